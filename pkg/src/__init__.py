# Cooperative perception simulator
