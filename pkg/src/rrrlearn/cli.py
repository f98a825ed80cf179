"""Command line front end.

`rrr-learn <task>` drives the trainers from key-value config files and
writes metrics CSVs, model checkpoints, and generated images.  Tasks:

  nmf         exact non-negative factorization of a data matrix
  classify    layered classifier training (plain, drop, relabel variants)
  autoencode  cyclic autoencoder training, or the n-bit encoding problem
  generate    decode classifier-accepted samples from a product code
  gendata     emit benchmark data sets (ledm, montage, majority) to files

The single environment knob is RRR_THREADS (default 1); this build runs
projections single-threaded and warns when more threads are requested.
"""

import argparse
import csv
import logging
import math
import os
import sys
import time

import numpy as np

from . import autoencoder as ae
from . import classifier as clf
from . import io as hio
from . import nmf
from .graph import (ROLE_CODE, ROLE_DATA, ROLE_HIDDEN, Activation,
                    HyperParams, RunMetrics, build_layered)

log = logging.getLogger(__name__)


class _MetricsSink:
    """Collects per-epoch rows and flushes each to CSV immediately; the
    column set is fixed by the first row's finite fields."""

    def __init__(self, path, timings=False):
        self._path = path
        self._timings = timings
        self._start = time.perf_counter()
        self._writer = None
        self.rows = []

    def write(self, row):
        if self._timings:
            row.wall_seconds = time.perf_counter() - self._start
        self.rows.append(row)
        if self._writer is None:
            self._writer = hio.MetricsWriter(self._path,
                                             hio.metrics_columns([row]))
        self._writer.write(row)

    def close(self):
        if self._writer is not None:
            self._writer.close()


def _prepare_out(config):
    out_dir = config.get("out", ".")
    os.makedirs(out_dir, exist_ok=True)
    return out_dir


def _require_task(config, expected):
    if config["task"] != expected:
        raise ValueError(f"config sets task = {config['task']!r}, but the "
                         f"{expected} command was invoked")


def _configure_threads():
    raw = os.environ.get("RRR_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError("RRR_THREADS must be a positive integer, got "
                         f"{raw!r}") from None
    if n < 1:
        raise ValueError(f"RRR_THREADS must be a positive integer, got {n}")
    if n > 1:
        log.warning("RRR_THREADS=%d requested; this build runs projections "
                    "single-threaded", n)
    return n


# ---------------------------------------------------------------------------
# nmf
# ---------------------------------------------------------------------------

def _nmf_data(spec):
    kind, _, rest = spec.partition(":")
    if kind == "ledm":
        return nmf.gen_ledm(int(rest))
    if kind == "montage":
        try:
            count, seed = (int(p) for p in rest.split(":"))
        except ValueError:
            raise ValueError(
                "montage data spec is montage:count:seed") from None
        return nmf.gen_montage(count, seed)
    if kind == "csv":
        return hio.read_matrix_csv(rest)
    raise ValueError(f"unknown nmf data source {spec!r}; expected "
                     "ledm:m, montage:count:seed or csv:path")


def _cmd_nmf(args):
    config = hio.load_config(args.config)
    _require_task(config, "nmf")
    out_dir = _prepare_out(config)
    data = _nmf_data(config["data"])
    problem = nmf.NmfProblem(data=data, n_codes=config["rank"],
                             hyper=hio.hyper_from_config(config))
    sink = _MetricsSink(os.path.join(out_dir, "metrics.csv"),
                        config.get("timings", False))
    try:
        w_a, _ = nmf.train_nmf(problem, epochs=config.get("epochs", 1),
                               progress=sink.write)
    finally:
        sink.close()
    hio.write_matrix_csv(os.path.join(out_dir, "w.csv"), w_a)
    if args.plot:
        hio.write_metrics_svg(os.path.join(out_dir, "metrics.svg"),
                              sink.rows)
    return 0


# ---------------------------------------------------------------------------
# classify
# ---------------------------------------------------------------------------

def _classifier_data(spec):
    kind, _, rest = spec.partition(":")
    if kind == "majority":
        try:
            m, n, seed = (int(p) for p in rest.split(":"))
        except ValueError:
            raise ValueError(
                "majority data spec is majority:m:n:seed") from None
        _, train, test = clf.gen_majority_data(m, n, seed=seed)
        return train, test
    if kind == "mnist":
        parts = rest.split(":")
        if not parts[0]:
            raise ValueError("mnist data spec is mnist:dir[:limit]")
        base = parts[0]
        limit = int(parts[1]) if len(parts) > 1 and parts[1] else None
        train = hio.load_mnist_idx(
            os.path.join(base, "train-images-idx3-ubyte"),
            os.path.join(base, "train-labels-idx1-ubyte"), limit)
        test = hio.load_mnist_idx(
            os.path.join(base, "t10k-images-idx3-ubyte"),
            os.path.join(base, "t10k-labels-idx1-ubyte"), limit)
        return train, test
    raise ValueError(f"unknown classify data source {spec!r}; expected "
                     "majority:m:n:seed or mnist:dir[:limit]")


def _make_act(config, default_kind):
    kind = config.get("act", default_kind)
    delta = config.get("delta", 0.0) if kind in ("step", "zigmoid") else 0.0
    return Activation(kind, delta)


def _cmd_classify(args):
    config = hio.load_config(args.config)
    _require_task(config, "classify")
    out_dir = _prepare_out(config)
    train, test = _classifier_data(config["data"])
    graph = build_layered(hio.parse_widths(config["widths"]))
    sink = _MetricsSink(os.path.join(out_dir, "metrics.csv"),
                        config.get("timings", False))
    try:
        consensus, _, exempt = clf.train_classifier(
            graph, train, test, hio.hyper_from_config(config),
            act=_make_act(config, "relu"),
            variant=config.get("variant", "plain"),
            epochs=config.get("epochs", 1), progress=sink.write)
    finally:
        sink.close()
    hio.checkpoint_save(consensus, graph,
                        os.path.join(out_dir, "model.ckpt"))
    with open(os.path.join(out_dir, "exempt.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index"])
        for idx in exempt:
            writer.writerow([int(idx)])
    if args.plot:
        hio.write_metrics_svg(os.path.join(out_dir, "metrics.svg"),
                              sink.rows)
    return 0


# ---------------------------------------------------------------------------
# autoencode
# ---------------------------------------------------------------------------

def _autoencoder_graph(config):
    widths = hio.parse_widths(config["widths"])
    n_layers = len(widths) - 1
    if n_layers < 2:
        raise ValueError("a cyclic autoencoder needs at least two layers")
    interior = range(1, n_layers)
    code_layer = config.get("code_layer",
                            min(interior, key=lambda l: widths[l]))
    if not 1 <= code_layer < n_layers:
        raise ValueError(f"code_layer must be in 1..{n_layers - 1}, got "
                         f"{code_layer}")
    roles = [ROLE_HIDDEN] * n_layers
    roles[0] = ROLE_DATA
    roles[code_layer] = ROLE_CODE
    return build_layered(widths, roles=roles, cyclic=True)


def _run_binary_encoding(config, n, out_dir, plot):
    """The n-bit encoding problem: one joint batch, checked for an exact
    codec after every rrr_iter iterations (one metrics row each)."""
    seed = config.get("seed", 0)
    base = dict(beta=0.5, omega=100.0, delta=0.4, rrr_iter=1000,
                batch_size=2 ** (n + 1), rng_seed=seed, tol=0.0)
    overrides = {"beta": "beta", "omega": "omega", "delta": "delta",
                 "rrr_iter": "rrr_iter", "tol": "tol",
                 "batch": "batch_size"}
    for key, field in overrides.items():
        if key in config:
            base[field] = config[key]
    hyper = HyperParams(**base)
    graph, batch = ae.binary_encoding_task(n, hyper)
    state, consensus = ae.init_batch_autoencoder(batch, None, hio.rng(seed))
    sink = _MetricsSink(os.path.join(out_dir, "metrics.csv"),
                        config.get("timings", False))
    solved = False
    iters = 0
    work = 0.0
    try:
        for epoch in range(1, config.get("epochs", 100) + 1):
            logbook = ae.run_autoencoder_batch(state, batch, tol=0.0)
            consensus = ae.extract_consensus_autoencoder(state, batch)
            iters += logbook.iter_count
            work += logbook.iter_count * batch.n_items * graph.n_edges
            diag = ae.autoencoder_errors(graph, consensus, batch)
            sink.write(RunMetrics(epoch=epoch, rrr_err=logbook.errs[-1],
                                  data_err=diag["data_err"],
                                  code_err=diag["code_err"],
                                  iter_count=iters, gwms=1e-9 * work))
            solved = ae.verify_binary_solution(graph, consensus)
            if solved:
                break
    finally:
        sink.close()
    hio.checkpoint_save(consensus, graph,
                        os.path.join(out_dir, "model.ckpt"))
    hio.write_code_csv(os.path.join(out_dir, "code.csv"),
                       ae.build_ide_code(graph, consensus, batch.data))
    if plot:
        hio.write_metrics_svg(os.path.join(out_dir, "metrics.svg"),
                              sink.rows)
    status = "solved" if solved else "not solved"
    print(f"binary encoding n={n}: {status} after {iters} iterations")
    return 0


def _cmd_autoencode(args):
    config = hio.load_config(args.config)
    _require_task(config, "autoencode")
    out_dir = _prepare_out(config)
    spec = config["data"]
    kind, _, rest = spec.partition(":")
    if kind == "binary":
        return _run_binary_encoding(config, int(rest), out_dir, args.plot)
    if kind == "mnist":
        parts = rest.split(":")
        if not parts[0]:
            raise ValueError("mnist data spec is mnist:dir[:limit]")
        limit = int(parts[1]) if len(parts) > 1 and parts[1] else None
        data, _ = hio.read_idx_images(
            os.path.join(parts[0], "train-images-idx3-ubyte"), limit)
    elif kind == "csv":
        data = hio.read_matrix_csv(rest)
    else:
        raise ValueError(f"unknown autoencode data source {spec!r}; "
                         "expected mnist:dir[:limit], csv:path or binary:n")
    if "widths" not in config:
        raise ValueError("autoencode with mnist or csv data needs widths")
    graph = _autoencoder_graph(config)
    sink = _MetricsSink(os.path.join(out_dir, "metrics.csv"),
                        config.get("timings", False))
    try:
        consensus, code, _ = ae.train_autoencoder(
            graph, data, hio.hyper_from_config(config),
            act=_make_act(config, "zigmoid"),
            epochs=config.get("epochs", 1),
            code_batch=config.get("code_batch"), progress=sink.write)
    finally:
        sink.close()
    hio.checkpoint_save(consensus, graph,
                        os.path.join(out_dir, "model.ckpt"))
    hio.write_code_csv(os.path.join(out_dir, "code.csv"), code)
    if args.plot:
        hio.write_metrics_svg(os.path.join(out_dir, "metrics.svg"),
                              sink.rows)
    return 0


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def _parse_shape(text, n_pixels):
    if text:
        rows_txt, sep, cols_txt = text.lower().partition("x")
        if not sep:
            raise ValueError(f"--shape must look like 28x28, got {text!r}")
        try:
            shape = (int(rows_txt), int(cols_txt))
        except ValueError:
            raise ValueError(
                f"--shape must look like 28x28, got {text!r}") from None
    else:
        side = math.isqrt(n_pixels)
        if side * side != n_pixels:
            raise ValueError(f"decoded images have {n_pixels} pixels, not a "
                             "square; pass --shape ROWSxCOLS")
        shape = (side, side)
    if shape[0] * shape[1] != n_pixels:
        raise ValueError(f"--shape {shape[0]}x{shape[1]} does not hold "
                         f"{n_pixels} pixels")
    return shape


def _cmd_generate(args):
    consensus_ae, graph_ae = hio.checkpoint_load(args.ae)
    consensus_clf, graph_clf = hio.checkpoint_load(args.clf)
    code = hio.read_code_csv(args.code)
    images, rate = ae.generate(graph_ae, consensus_ae, code, graph_clf,
                               consensus_clf, args.count,
                               rng=hio.rng(args.seed))
    shape = _parse_shape(args.shape, images.shape[1])
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "index.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["file"])
        for i, image in enumerate(images):
            name = f"gen_{i:04d}.pgm"
            hio.write_pgm(os.path.join(args.out, name), image, shape)
            writer.writerow([name])
    print(f"wrote {len(images)} images to {args.out} "
          f"(acceptance rate {rate:.4f})")
    return 0


# ---------------------------------------------------------------------------
# gendata
# ---------------------------------------------------------------------------

def _cmd_gendata(args):
    if args.generator == "ledm":
        out = args.out or f"ledm_m{args.m}.csv"
        hio.write_matrix_csv(out, nmf.gen_ledm(args.m))
        print(f"wrote {out}")
    elif args.generator == "montage":
        out = args.out or f"montage_{args.count}_{args.seed}.csv"
        hio.write_matrix_csv(out, nmf.gen_montage(args.count, args.seed))
        print(f"wrote {out}")
    else:
        out_dir = args.out or "."
        os.makedirs(out_dir, exist_ok=True)
        _, train, test = clf.gen_majority_data(args.m, args.n,
                                               seed=args.seed)
        for name, ds in (("train.csv", train), ("test.csv", test)):
            hio.write_matrix_csv(os.path.join(out_dir, name),
                                 np.column_stack([ds.vectors, ds.labels]))
        print(f"wrote {out_dir}/train.csv and {out_dir}/test.csv "
              "(label in the last column)")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="rrr-learn",
        description="Constraint-based network training by RRR projections.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text, func in (
            ("nmf", "exact non-negative matrix factorization", _cmd_nmf),
            ("classify", "layered classifier training", _cmd_classify),
            ("autoencode", "cyclic autoencoder training", _cmd_autoencode)):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True,
                       help="key-value run configuration file")
        p.add_argument("--plot", action="store_true",
                       help="also write metrics.svg line charts")
        p.set_defaults(func=func)

    p = sub.add_parser("generate",
                       help="decode classifier-accepted code samples")
    p.add_argument("--ae", required=True, help="autoencoder checkpoint")
    p.add_argument("--clf", required=True, help="code classifier checkpoint")
    p.add_argument("--code", required=True, help="code distribution CSV")
    p.add_argument("--count", required=True, type=int,
                   help="number of images to generate")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--shape", default="",
                   help="image shape ROWSxCOLS (default: square)")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("gendata", help="emit benchmark data sets")
    gen = p.add_subparsers(dest="generator", required=True)
    q = gen.add_parser("ledm", help="linear Euclidean distance matrix")
    q.add_argument("--m", required=True, type=int, help="matrix size")
    q.add_argument("--out", default="", help="output CSV path")
    q = gen.add_parser("montage", help="four-quadrant letter montages")
    q.add_argument("--count", required=True, type=int,
                   help="number of images")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", default="", help="output CSV path")
    q = gen.add_parser("majority", help="majority-circuit truth tables")
    q.add_argument("--m", required=True, type=int, help="input bits")
    q.add_argument("--n", required=True, type=int, help="circuit size knob")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", default="", help="output directory")
    p.set_defaults(func=_cmd_gendata)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _configure_threads()
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
