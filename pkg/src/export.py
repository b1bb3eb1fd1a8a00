"""Export utilities: grid files, weight checkpoints, CSV tables and run reports."""

import csv
import io
import json
import logging
import struct
import zipfile
from pathlib import Path
from typing import Iterable, Optional

import markdown2
import numpy as np

from src.episode import EpisodeRecord, StepRecord
from src.errors import FormatError
from src.evidential import CLASS_ORDER, N_CHANNELS, SemanticGrid
from src.schemas import TABLE_COLUMNS, validate_table_header

logger = logging.getLogger(__name__)

GRID_MAGIC = b"EVGRID1\n"
GRID_HEADER = struct.Struct("<IIdIIH")  # height, width, meters_per_cell, ego_row, ego_col, order length
CHECKPOINT_MAGIC = b"NAMEDARR"
FLOAT_FORMAT = "{:.9g}"
ZIP_TIMESTAMP = (1980, 1, 1, 0, 0, 0)  # fixed so bundles are byte-identical across runs


# --- grid files --------------------------------------------------------------


def grid_to_bytes(grid: SemanticGrid) -> bytes:
    """Magic, fixed header, class-order string, then row-major cells of 6 float32 (LE)."""
    order = ",".join(CLASS_ORDER).encode("ascii")
    header = GRID_HEADER.pack(
        grid.height, grid.width, grid.meters_per_cell, grid.ego_cell[0], grid.ego_cell[1], len(order)
    )
    return GRID_MAGIC + header + order + grid.masses.astype("<f4").tobytes()


def grid_from_bytes(data: bytes) -> SemanticGrid:
    if not data.startswith(GRID_MAGIC):
        raise FormatError("not a grid file: bad magic")
    offset = len(GRID_MAGIC)
    try:
        height, width, mpc, ego_row, ego_col, n_order = GRID_HEADER.unpack_from(data, offset)
    except struct.error as e:
        raise FormatError(f"truncated grid header: {e}") from e
    offset += GRID_HEADER.size
    order = data[offset:offset + n_order].decode("ascii", errors="replace").split(",")
    if tuple(order) != CLASS_ORDER:
        raise FormatError("grid file uses a different class order", order=order)
    offset += n_order
    expected = height * width * N_CHANNELS * 4
    if len(data) - offset != expected:
        raise FormatError(
            f"grid body has {len(data) - offset} bytes, header implies {expected}",
            height=height,
            width=width,
        )
    masses = np.frombuffer(data, dtype="<f4", offset=offset).astype(np.float64)
    return SemanticGrid(masses.reshape(height, width, N_CHANNELS), mpc, (ego_row, ego_col))


def write_grid(path, grid: SemanticGrid) -> Path:
    path = Path(path)
    path.write_bytes(grid_to_bytes(grid))
    logger.debug("Wrote grid %dx%d to %s", grid.height, grid.width, path)
    return path


def read_grid(path) -> SemanticGrid:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as e:
        raise FormatError(f"grid file not found: {path}", path=str(path)) from e
    return grid_from_bytes(data)


# --- named-array checkpoints ---------------------------------------------------


def checkpoint_to_bytes(arrays: dict[str, np.ndarray], metadata: Optional[dict] = None) -> bytes:
    """
    Magic, JSON metadata block, array count, then per array: name, ndim, shape and
    float64 (LE) values. Arrays are written in sorted name order.
    """
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(meta)), meta, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        value = np.asarray(arrays[name], dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<B", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(value.tobytes())
    return b"".join(parts)


def checkpoint_from_bytes(data: bytes) -> tuple:
    """Returns (arrays, metadata)."""
    if not data.startswith(CHECKPOINT_MAGIC):
        raise FormatError("not a checkpoint: bad magic")
    view = memoryview(data)
    offset = len(CHECKPOINT_MAGIC)
    try:
        (n_meta,) = struct.unpack_from("<I", view, offset)
        offset += 4
        metadata = json.loads(bytes(view[offset:offset + n_meta]).decode("utf-8"))
        offset += n_meta
        (count,) = struct.unpack_from("<I", view, offset)
        offset += 4
        arrays = {}
        for _ in range(count):
            (n_name,) = struct.unpack_from("<H", view, offset)
            offset += 2
            name = bytes(view[offset:offset + n_name]).decode("utf-8")
            offset += n_name
            (ndim,) = struct.unpack_from("<B", view, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", view, offset)
            offset += 4 * ndim
            size = int(np.prod(shape)) if shape else 1
            if offset + 8 * size > len(data):
                raise FormatError(f"checkpoint truncated inside array '{name}'")
            arrays[name] = np.frombuffer(data, dtype="<f8", count=size, offset=offset).reshape(shape).copy()
            offset += 8 * size
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"malformed checkpoint: {e}") from e
    if offset != len(data):
        raise FormatError(f"checkpoint has {len(data) - offset} trailing bytes")
    return arrays, metadata


def write_checkpoint(path, arrays: dict, metadata: Optional[dict] = None) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_to_bytes(arrays, metadata))
    logger.info("Wrote checkpoint with %d arrays to %s", len(arrays), path)
    return path


def read_checkpoint(path) -> tuple:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as e:
        raise FormatError(f"checkpoint not found: {path}", path=str(path)) from e
    return checkpoint_from_bytes(data)


# --- CSV tables ----------------------------------------------------------------


def _format_cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return FLOAT_FORMAT.format(float(value))
    return str(value)


def table_to_csv(kind: str, rows: Iterable[dict]) -> str:
    """Render rows with the documented column order of `kind`."""
    columns = TABLE_COLUMNS.get(kind)
    if columns is None:
        raise FormatError(f"unknown table kind '{kind}'")
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_format_cell(row[c]) for c in columns])
    return buffer.getvalue()


def write_table(path, kind: str, rows: Iterable[dict]) -> Path:
    path = Path(path)
    path.write_text(table_to_csv(kind, rows), encoding="utf-8")
    logger.info("Wrote %s table to %s", kind, path)
    return path


def read_table(path, kind: str) -> list[dict]:
    """Rows as dicts of strings; header mismatches are logged as warnings."""
    try:
        with open(path, encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            rows = list(reader)
            header = reader.fieldnames or []
    except FileNotFoundError as e:
        raise FormatError(f"table not found: {path}", path=str(path)) from e
    for warning in validate_table_header(kind, list(header)):
        logger.warning("Table validation: %s", warning)
    missing = set(TABLE_COLUMNS[kind]) - set(header)
    if missing:
        raise FormatError(f"{kind} table {path} lacks columns {sorted(missing)}", path=str(path))
    return rows


def heatmap_csv(values: np.ndarray) -> str:
    """A 2-D array as plain CSV, one grid row per line."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    for row in np.atleast_2d(values):
        writer.writerow([FLOAT_FORMAT.format(float(v)) for v in row])
    return buffer.getvalue()


# --- reports -------------------------------------------------------------------


def markdown_to_html(markdown_content: str) -> str:
    """Convert markdown to a styled HTML page."""
    html_content = markdown2.markdown(
        markdown_content,
        extras=["fenced-code-blocks", "tables", "header-ids"],
    )
    return f"""<!DOCTYPE html>
<html>
<head>
    <meta charset="utf-8">
    <style>
        body {{
            font-family: -apple-system, BlinkMacSystemFont, sans-serif;
            line-height: 1.6;
            color: #1a1a2e;
            max-width: 800px;
            margin: 0 auto;
            padding: 40px 20px;
        }}

        h1 {{
            color: #007A75;
            border-bottom: 3px solid #007A75;
            padding-bottom: 10px;
        }}

        table {{
            border-collapse: collapse;
            width: 100%;
            margin: 20px 0;
        }}

        th, td {{
            border: 1px solid #ddd;
            padding: 8px 12px;
            text-align: left;
        }}

        th {{
            background-color: #007A75;
            color: white;
        }}
    </style>
</head>
<body>
{html_content}
</body>
</html>
"""


def create_run_bundle(
    report_markdown: str,
    files: Optional[dict[str, str]] = None,
    metadata: Optional[dict] = None,
    title: str = "run_report",
) -> bytes:
    """ZIP with the report as markdown and HTML, extra text files and metadata.

    Entries are written in sorted order with a fixed timestamp, so identical
    inputs give identical bytes.
    """
    logger.info("Creating run bundle: title=%s", title)
    entries = {f"{title}.md": report_markdown, f"{title}.html": markdown_to_html(report_markdown)}
    for name, content in (files or {}).items():
        entries[f"data/{name}"] = content
    entries["metadata.json"] = json.dumps(
        {"title": title, "files_included": sorted(entries), **(metadata or {})},
        indent=2,
        sort_keys=True,
    )

    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, "w", zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(entries):
            info = zipfile.ZipInfo(name, date_time=ZIP_TIMESTAMP)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, entries[name])
    logger.info("Run bundle created: %d bytes", len(buffer.getvalue()))
    return buffer.getvalue()


def safe_filename(title: str, extension: str = "") -> str:
    """Lowercase, dash-separated filename from a title."""
    safe_title = "".join(c if c.isalnum() or c in " -_" else "" for c in title).strip()
    filename = safe_title.replace(" ", "-").lower() or "untitled"
    if extension:
        filename = f"{filename}.{extension.lstrip('.')}"
    return filename


# --- episode dumps -------------------------------------------------------------

EPISODE_INDEX = "episodes.json"


def episode_filename(policy: str, seed: int) -> str:
    return f"episode_{safe_filename(policy)}_{seed}.csv"


def write_episodes(out_dir, records: list[EpisodeRecord]) -> Path:
    """One CSV per episode plus a JSON index carrying the episode metadata."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for record in sorted(records, key=lambda r: (r.policy, r.seed)):
        name = episode_filename(record.policy, record.seed)
        write_table(out_dir / name, "episode", [s.to_row() for s in record.steps])
        index.append(
            {
                "file": name,
                "seed": record.seed,
                "scenario": record.scenario,
                "policy": record.policy,
                "height": record.height,
                "width": record.width,
            }
        )
    path = out_dir / EPISODE_INDEX
    path.write_text(json.dumps(index, indent=2), encoding="utf-8")
    return path


def read_episodes(dump_dir) -> list[EpisodeRecord]:
    dump_dir = Path(dump_dir)
    try:
        index = json.loads((dump_dir / EPISODE_INDEX).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise FormatError(f"no {EPISODE_INDEX} in {dump_dir}", path=str(dump_dir)) from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{EPISODE_INDEX} is not valid JSON: {e}", path=str(dump_dir)) from e
    records = []
    for entry in index:
        rows = read_table(dump_dir / entry["file"], "episode")
        records.append(
            EpisodeRecord(
                seed=int(entry["seed"]),
                scenario=entry["scenario"],
                policy=entry["policy"],
                steps=tuple(StepRecord.from_row(row) for row in rows),
                height=int(entry["height"]),
                width=int(entry["width"]),
            )
        )
    logger.info("Read %d episodes from %s", len(records), dump_dir)
    return records
