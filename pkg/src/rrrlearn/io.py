"""File formats, run configuration, and reproducibility utilities.

The harness around the trainers: IDX image/label ingestion, key-value run
configs with one fixed schema per task, seeded generators, metrics CSVs
written at full float precision, binary PGM images, versioned model
checkpoints, code-distribution CSVs, and minimal SVG line charts.

All text outputs use '.' as the decimal mark and 17 significant digits,
enough to round-trip a float64 exactly, and a bare newline as the line
terminator so files are byte-identical across platforms.
"""

import csv
import dataclasses
import json
import struct

import numpy as np

from .autoencoder import IdeCode
from .classifier import LabeledDataset
from .graph import Activation, ConsensusState, HyperParams, RunMetrics, \
    build_layered


# ---------------------------------------------------------------------------
# random numbers
# ---------------------------------------------------------------------------

def rng(seed):
    """Seeded PCG64 generator (numpy's 128-bit permuted congruential
    stream); given the same seed the draws are identical on every
    platform."""
    return np.random.default_rng(int(seed))


def uniform01(gen, count):
    """count uniform draws from [0, 1)."""
    return gen.random(int(count))


def shuffled(gen, values):
    """Fisher-Yates shuffle of a copy of values along the first axis."""
    out = np.array(values)
    gen.shuffle(out)
    return out


# ---------------------------------------------------------------------------
# IDX image and label files
# ---------------------------------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _idx_read(path, magic_want, head_fmt):
    with open(path, "rb") as fh:
        blob = fh.read()
    head = struct.calcsize(head_fmt)
    if len(blob) < head:
        raise ValueError(f"{path}: truncated IDX header")
    fields = struct.unpack(head_fmt, blob[:head])
    if fields[0] != magic_want:
        raise ValueError(f"{path}: IDX magic 0x{fields[0]:08x}, expected "
                         f"0x{magic_want:08x}")
    return fields, blob[head:]


def read_idx_images(path, limit=None):
    """IDX image file to float rows in [0, 1].

    Returns (images, declared_count): the first `limit` images, one row of
    rows*cols pixels each, scaled by 1/255, plus the header's item count.
    """
    (_, count, n_rows, n_cols), body = _idx_read(path, IDX_IMAGES_MAGIC,
                                                 ">IIII")
    n = count if limit is None else min(int(limit), count)
    need = n * n_rows * n_cols
    if len(body) < need:
        raise ValueError(f"{path}: truncated IDX image data")
    pixels = np.frombuffer(body[:need], dtype=np.uint8)
    return pixels.reshape(n, n_rows * n_cols) / 255.0, count


def read_idx_labels(path, limit=None):
    """IDX label file to an integer vector.  Returns (labels, count)."""
    (_, count), body = _idx_read(path, IDX_LABELS_MAGIC, ">II")
    n = count if limit is None else min(int(limit), count)
    if len(body) < n:
        raise ValueError(f"{path}: truncated IDX label data")
    return np.frombuffer(body[:n], dtype=np.uint8).astype(np.int64), count


def load_mnist_idx(images_path, labels_path, limit=None):
    """Paired IDX image and label files as a LabeledDataset."""
    images, n_images = read_idx_images(images_path, limit)
    labels, n_labels = read_idx_labels(labels_path, limit)
    if n_images != n_labels:
        raise ValueError(f"image count {n_images} != label count {n_labels}")
    return LabeledDataset(vectors=images, labels=labels)


# ---------------------------------------------------------------------------
# metrics files
# ---------------------------------------------------------------------------

METRIC_FIELDS = [f.name for f in dataclasses.fields(RunMetrics)]
_INT_FIELDS = {"epoch", "iter_count"}


def metrics_columns(rows):
    """Fields worth a column: the integer counters always, plus any float
    field finite in at least one row."""
    cols = []
    for name in METRIC_FIELDS:
        if name in _INT_FIELDS or any(
                np.isfinite(getattr(r, name)) for r in rows):
            cols.append(name)
    return cols


def _format_cell(name, value):
    if name in _INT_FIELDS:
        return str(int(value))
    value = float(value)
    return f"{value:.17g}" if np.isfinite(value) else ""


class MetricsWriter:
    """CSV metrics sink flushed after every row, so partial runs leave
    readable files.  The column set is fixed at construction."""

    def __init__(self, path, columns):
        self.columns = list(columns)
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(self.columns)
        self._fh.flush()

    def write(self, row):
        self._writer.writerow(
            [_format_cell(c, getattr(row, c)) for c in self.columns])
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_metrics(path, rows):
    """All rows at once, columns inferred from their finite fields.
    Returns the column list."""
    columns = metrics_columns(rows)
    with MetricsWriter(path, columns) as out:
        for row in rows:
            out.write(row)
    return columns


def read_metrics(path):
    """Metrics CSV back as RunMetrics rows; absent fields stay NaN."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        unknown = set(header) - set(METRIC_FIELDS)
        if unknown:
            raise ValueError(f"{path}: unknown metrics columns {unknown}")
        rows = []
        for record in reader:
            kw = {}
            for name, cell in zip(header, record):
                if cell == "":
                    continue
                kw[name] = int(cell) if name in _INT_FIELDS else float(cell)
            rows.append(RunMetrics(**kw))
    return rows


# ---------------------------------------------------------------------------
# plain matrices
# ---------------------------------------------------------------------------

def write_matrix_csv(path, matrix):
    """2-D array as CSV, 17 significant digits."""
    arr = np.asarray(matrix, dtype=float)
    if arr.ndim != 2:
        raise ValueError("matrix must be 2-D")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in arr:
            writer.writerow([f"{v:.17g}" for v in row])


def read_matrix_csv(path):
    """CSV of numbers back as a 2-D float array."""
    with open(path, newline="") as fh:
        rows = [[float(cell) for cell in record]
                for record in csv.reader(fh) if record]
    if not rows:
        raise ValueError(f"{path}: empty matrix file")
    if len({len(r) for r in rows}) != 1:
        raise ValueError(f"{path}: rows differ in length")
    return np.array(rows)


# ---------------------------------------------------------------------------
# PGM images
# ---------------------------------------------------------------------------

def write_pgm(path, image, shape=None):
    """Binary 8-bit PGM (P5); values in [0, 1] scale to 0..255.

    A flat pixel vector needs an explicit (rows, cols) shape.
    """
    img = np.asarray(image, dtype=float)
    if img.ndim == 1:
        if shape is None:
            raise ValueError("flat image needs an explicit (rows, cols)"
                             " shape")
        img = img.reshape(shape)
    if img.ndim != 2:
        raise ValueError("image must be 2-D")
    gray = np.clip(np.rint(img * 255.0), 0.0, 255.0).astype(np.uint8)
    n_rows, n_cols = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{n_cols} {n_rows}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


# ---------------------------------------------------------------------------
# model checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"RRRC"
CHECKPOINT_VERSION = 1


def checkpoint_save(consensus, graph, path):
    """Versioned binary model file.

    Layout: magic, version, a length-prefixed JSON header holding the
    graph spec (widths, roles, cyclic), omega, activation and the array
    manifest, then the arrays as raw little-endian float64.  The header is
    serialized with sorted keys, so save -> load -> save is byte-exact.
    """
    manifest = []
    arrays = []
    for blk, wb in enumerate(consensus.w_blocks):
        manifest.append({"name": f"w{blk}", "shape": list(np.shape(wb))})
        arrays.append(np.ascontiguousarray(wb, dtype="<f8"))
    for layer, bl in enumerate(consensus.b_layers):
        if bl is None:
            continue
        manifest.append({"name": f"b{layer}", "shape": list(np.shape(bl))})
        arrays.append(np.ascontiguousarray(bl, dtype="<f8"))
    act = None
    if consensus.act is not None:
        act = {"kind": consensus.act.kind,
               "delta": float(consensus.act.delta)}
    header = {"graph": {"widths": [int(w) for w in graph.widths],
                        "roles": list(graph.roles),
                        "cyclic": bool(graph.cyclic)},
              "omega": float(consensus.omega), "act": act,
              "arrays": manifest}
    payload = json.dumps(header, sort_keys=True,
                         separators=(",", ":")).encode("ascii")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack(">II", CHECKPOINT_VERSION, len(payload)))
        fh.write(payload)
        for arr in arrays:
            fh.write(arr.tobytes())


def checkpoint_load(path, graph=None):
    """Model checkpoint back as (consensus, graph).

    Passing a graph refuses a checkpoint whose stored spec differs from
    it; any version other than CHECKPOINT_VERSION is refused.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    if len(blob) < 12:
        raise ValueError(f"{path}: truncated checkpoint")
    version, header_len = struct.unpack(">II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    if len(blob) < 12 + header_len:
        raise ValueError(f"{path}: truncated checkpoint")
    header = json.loads(blob[12:12 + header_len].decode("ascii"))
    spec = header["graph"]
    stored = build_layered(spec["widths"], roles=spec["roles"],
                           cyclic=spec["cyclic"])
    if graph is not None and (
            tuple(graph.widths) != stored.widths
            or tuple(graph.roles) != stored.roles
            or graph.cyclic != stored.cyclic):
        raise ValueError(f"{path}: checkpoint graph spec does not match the"
                         " requested graph")
    found = {}
    offset = 12 + header_len
    for item in header["arrays"]:
        shape = tuple(int(s) for s in item["shape"])
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + 8 * n
        if end > len(blob):
            raise ValueError(f"{path}: truncated checkpoint")
        found[item["name"]] = np.frombuffer(
            blob[offset:end], dtype="<f8").reshape(shape).astype(float)
        offset = end
    try:
        w_blocks = [found[f"w{blk}"] for blk in range(stored.n_blocks)]
    except KeyError as exc:
        raise ValueError(f"{path}: missing weight block {exc}") from None
    b_layers = [found.get(f"b{layer}") for layer in range(stored.n_layers)]
    act = None
    if header["act"] is not None:
        act = Activation(header["act"]["kind"], header["act"]["delta"])
    consensus = ConsensusState(w_blocks=w_blocks, b_layers=b_layers,
                               act=act, omega=float(header["omega"]))
    return consensus, stored


# ---------------------------------------------------------------------------
# code distributions
# ---------------------------------------------------------------------------

def write_code_csv(path, code):
    """Per-node code distributions: one row per code node holding the node
    index and its sorted values."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for i in range(code.n_code):
            values = np.sort(code.values[:, i])
            writer.writerow([i] + [f"{v:.17g}" for v in values])


def read_code_csv(path):
    """Code distribution CSV back as an IdeCode.

    The file stores each node's values sorted, which drops the pairing
    across nodes; product sampling never uses that pairing.
    """
    columns = {}
    with open(path, newline="") as fh:
        for record in csv.reader(fh):
            if not record:
                continue
            columns[int(record[0])] = [float(v) for v in record[1:]]
    if not columns or sorted(columns) != list(range(len(columns))):
        raise ValueError(f"{path}: expected one row per code node 0..n-1")
    if len({len(v) for v in columns.values()}) != 1 or not columns[0]:
        raise ValueError(f"{path}: code node rows differ in length")
    values = np.array([columns[i] for i in range(len(columns))]).T
    return IdeCode(values)


# ---------------------------------------------------------------------------
# SVG line charts
# ---------------------------------------------------------------------------

_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
               "#8c564b", "#17becf")


def write_metrics_svg(path, rows, columns=None, width=720, height=440):
    """Minimal SVG line chart of metrics series over epochs.

    By default plots every float column that is finite somewhere, one
    polyline per series on a shared linear axis.
    """
    if not rows:
        raise ValueError("no metrics rows to plot")
    if columns is None:
        skip = _INT_FIELDS | {"wall_seconds"}
        columns = [c for c in metrics_columns(rows) if c not in skip]
    if not columns:
        raise ValueError("no plottable metrics columns")
    xs = np.array([r.epoch for r in rows], dtype=float)
    x_lo, x_hi = float(xs.min()), float(xs.max())
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    series = {c: np.array([getattr(r, c) for r in rows], dtype=float)
              for c in columns}
    finite = np.concatenate([v[np.isfinite(v)] for v in series.values()])
    if finite.size == 0:
        raise ValueError("no finite values to plot")
    y_lo, y_hi = float(finite.min()), float(finite.max())
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    left, right, top, bottom = 60, 16, 16, 36

    def sx(x):
        return left + (x - x_lo) / (x_hi - x_lo) * (width - left - right)

    def sy(y):
        return height - bottom - (y - y_lo) / (y_hi - y_lo) * (
            height - top - bottom)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">',
             f'<rect x="{left}" y="{top}" width="{width - left - right}" '
             f'height="{height - top - bottom}" fill="none" stroke="#888"/>']
    for tag, x, y, anchor in ((f"{x_lo:g}", sx(x_lo), height - bottom + 14,
                               "middle"),
                              (f"{x_hi:g}", sx(x_hi), height - bottom + 14,
                               "middle"),
                              (f"{y_lo:.3g}", left - 4, sy(y_lo), "end"),
                              (f"{y_hi:.3g}", left - 4, sy(y_hi), "end")):
        parts.append(f'<text x="{x:.1f}" y="{y:.1f}" font-size="11" '
                     f'text-anchor="{anchor}">{tag}</text>')
    parts.append(f'<text x="{(left + width - right) / 2:.1f}" '
                 f'y="{height - 6}" font-size="11" '
                 'text-anchor="middle">epoch</text>')
    for idx, name in enumerate(columns):
        color = _SVG_COLORS[idx % len(_SVG_COLORS)]
        ys = series[name]
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}"
                       for x, y in zip(xs, ys) if np.isfinite(y))
        if pts:
            parts.append(f'<polyline points="{pts}" fill="none" '
                         f'stroke="{color}" stroke-width="1.5"/>')
        ly = top + 14 + 14 * idx
        parts.append(f'<text x="{width - right - 4}" y="{ly}" '
                     f'font-size="11" text-anchor="end" '
                     f'fill="{color}">{name}</text>')
    parts.append("</svg>")
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(parts) + "\n")


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

_CONFIG_TYPES = {
    "task": str, "data": str, "out": str, "widths": str, "act": str,
    "variant": str, "rank": int, "epochs": int, "seed": int, "batch": int,
    "code_batch": int, "code_layer": int, "rrr_iter": int, "beta": float,
    "omega": float, "delta": float, "upsilon": float, "ee": float,
    "tol": float, "timings": bool,
}

CONFIG_KEYS = {
    "nmf": frozenset({"task", "data", "rank", "out", "epochs", "seed",
                      "batch", "rrr_iter", "beta", "omega", "tol",
                      "timings"}),
    "classify": frozenset({"task", "data", "widths", "act", "variant",
                           "out", "epochs", "seed", "batch", "rrr_iter",
                           "beta", "omega", "delta", "upsilon", "ee", "tol",
                           "timings"}),
    "autoencode": frozenset({"task", "data", "widths", "act", "out",
                             "epochs", "seed", "batch", "code_batch",
                             "code_layer", "rrr_iter", "beta", "omega",
                             "delta", "tol", "timings"}),
}

_REQUIRED_KEYS = {
    "nmf": frozenset({"task", "data", "rank"}),
    "classify": frozenset({"task", "data", "widths"}),
    "autoencode": frozenset({"task", "data"}),
}


def _convert(key, value):
    want = _CONFIG_TYPES[key]
    if want is bool:
        lowered = value.lower()
        if lowered in ("on", "true", "yes", "1"):
            return True
        if lowered in ("off", "false", "no", "0"):
            return False
        raise ValueError(f"{key}: expected on or off, got {value!r}")
    try:
        return want(value)
    except ValueError:
        raise ValueError(
            f"{key}: expected {want.__name__}, got {value!r}") from None


def parse_config(text):
    """Key-value run configuration.

    One `key = value` per line; blank lines and lines starting with '#'
    are ignored.  The key set is fixed by the task and unknown keys are
    rejected.  Nothing here reads the environment: RRR_THREADS, handled
    by the command line front end, is the only environment knob.
    """
    raw = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"line {line_no}: expected key = value")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if key in raw:
            raise ValueError(f"line {line_no}: duplicate key {key!r}")
        raw[key] = value
    if "task" not in raw:
        raise ValueError("config must set task = nmf|classify|autoencode")
    task = raw["task"]
    if task not in CONFIG_KEYS:
        raise ValueError(f"unknown task {task!r}")
    allowed = CONFIG_KEYS[task]
    config = {}
    for key, value in raw.items():
        if key not in allowed:
            raise ValueError(f"unknown key {key!r} for task {task!r}")
        config[key] = _convert(key, value)
    missing = _REQUIRED_KEYS[task] - config.keys()
    if missing:
        raise ValueError(f"missing required keys: {sorted(missing)}")
    return config


def load_config(path):
    """Parse a configuration file; see parse_config for the format."""
    with open(path) as fh:
        return parse_config(fh.read())


def parse_widths(text):
    """Comma-separated layer widths to a list of ints."""
    try:
        widths = [int(token) for token in text.split(",")]
    except ValueError:
        raise ValueError("widths must be comma-separated integers, got "
                         f"{text!r}") from None
    if len(widths) < 2:
        raise ValueError("need at least two layer widths")
    return widths


_HYPER_KEYS = {"beta": "beta", "omega": "omega", "delta": "delta",
               "upsilon": "upsilon", "ee": "ee", "tol": "tol",
               "rrr_iter": "rrr_iter", "batch": "batch_size",
               "seed": "rng_seed"}


def hyper_from_config(config):
    """HyperParams from the config keys that map onto it; absent keys keep
    the HyperParams defaults."""
    kw = {field: config[key]
          for key, field in _HYPER_KEYS.items() if key in config}
    return HyperParams(**kw)
