"""Non-negative matrix factorization trained as constraint satisfaction.

Factor Y ~ W X with W, X >= 0 by splitting the variables into edge
replicas x[k,i->j], w[k,i->j] and alternating two projections: A imposes
consensus (x per item/code node, w per edge) with non-negativity and a
per-code-node weight norm; B imposes the bilinear data constraint
sum_i x*w = Y[k,j] independently per item and data node.

The training loop runs a fused numba kernel; reference numpy versions of
both projections are exposed for tests and small problems.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numba import njit

from .engine import IterationLog
from .graph import HyperParams, RunMetrics
from .kernels import DegenerateBilinearError, _solve_h0, project_bilinear, \
    project_nonneg_norm

log = logging.getLogger(__name__)

RIDGE_EPS = 1e-10
RIDGE_COND = 1e12


@dataclass
class NmfProblem:
    """data holds one item per row (n_items, n_data_nodes); entries >= 0."""

    data: np.ndarray
    n_codes: int
    hyper: HyperParams

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 2:
            raise ValueError("data must be a 2-D array of items by data nodes")
        if not np.isfinite(self.data).all() or (self.data < 0).any():
            raise ValueError("data entries must be finite and non-negative")
        if self.n_codes < 1:
            raise ValueError("need at least one code node")

    @property
    def n_items(self):
        return self.data.shape[0]

    @property
    def n_data(self):
        return self.data.shape[1]

    @property
    def n_edges(self):
        return self.n_codes * self.n_data


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def pseudo_inverse_encoder(w_a):
    """E_W = (W^T W)^-1 W^T for W with columns w_A[i, :] (w_a is stored
    code-major, (n_codes, n_data)).  A ridge of 1e-10 is added when the
    Gram matrix's condition number exceeds 1e12."""
    w_a = np.asarray(w_a, dtype=float)
    gram = w_a @ w_a.T
    if np.linalg.cond(gram) > RIDGE_COND:
        gram = gram + RIDGE_EPS * np.eye(gram.shape[0])
    return np.linalg.solve(gram, w_a)


def encode(e_w, y):
    """Non-negative code x = ReLU(E_W y); y may be one vector or a
    (n_data, n_items) matrix."""
    return np.maximum(e_w @ y, 0.0)


# ---------------------------------------------------------------------------
# projections (reference numpy forms)
# ---------------------------------------------------------------------------

def project_A_nmf(x_edges, w_edges, omega):
    """Consensus + side constraints: x[k,i,:] -> mean clamped at zero;
    w[:,i,j] -> mean over items, then each code node's outgoing row is
    projected to the non-negative sphere of radius omega.

    Returns (x_proj, w_proj, x_a, w_a) with the replicated projections and
    the consensus values themselves.
    """
    x_a = np.maximum(x_edges.mean(axis=2), 0.0)
    w_mean = w_edges.mean(axis=0)
    w_a = np.empty_like(w_mean)
    for i in range(w_mean.shape[0]):
        w_a[i] = project_nonneg_norm(w_mean[i], omega)
    x_proj = np.repeat(x_a[:, :, None], x_edges.shape[2], axis=2)
    w_proj = np.broadcast_to(w_a, w_edges.shape).copy()
    return x_proj, w_proj, x_a, w_a


def project_B_nmf(x_edges, w_edges, y_batch):
    """Bilinear data constraint per (item, data node): the vectors
    x[k,:,j], w[k,:,j] move to the nearest pair with x.w = y_batch[k,j]."""
    x_b = np.empty_like(x_edges)
    w_b = np.empty_like(w_edges)
    n_items, _, n_data = x_edges.shape
    for k in range(n_items):
        for j in range(n_data):
            xv, wv, _ = project_bilinear(x_edges[k, :, j], w_edges[k, :, j],
                                         y=y_batch[k, j], omega=1.0)
            x_b[k, :, j] = xv
            w_b[k, :, j] = wv
    return x_b, w_b


def rrr_err_nmf(state_a, state_b):
    """Distance between the A- and B-projected variable sets, normalized
    by the square root of the batch size."""
    xa, wa = state_a
    xb, wb = state_b
    n_items = xa.shape[0]
    d2 = np.sum((xa - xb) ** 2) + np.sum((wa - wb) ** 2)
    return float(np.sqrt(d2 / n_items))


# ---------------------------------------------------------------------------
# batch setup
# ---------------------------------------------------------------------------

def init_batch_nmf(problem, prev_w_a, batch_data, rng):
    """Fresh batch state with every A constraint satisfied exactly.

    First batch draws w_A uniformly from [0,1) and rescales each code
    node's outgoing row to norm omega; later batches reuse the previous
    consensus (warm start).  Codes come from the pseudo-inverse encoder.
    """
    n, m = problem.n_codes, problem.n_data
    if prev_w_a is None:
        w_a = rng.uniform(0.0, 1.0, size=(n, m))
        w_a *= problem.hyper.omega / np.linalg.norm(w_a, axis=1, keepdims=True)
    else:
        w_a = prev_w_a.copy()
    codes = encode(pseudo_inverse_encoder(w_a), batch_data.T)  # (n, |K|)
    x_a = codes.T
    n_items = batch_data.shape[0]
    x_edges = np.repeat(x_a[:, :, None], m, axis=2)
    w_edges = np.broadcast_to(w_a, (n_items, n, m)).copy()
    return x_edges, w_edges, w_a


# ---------------------------------------------------------------------------
# fused RRR loop
# ---------------------------------------------------------------------------

@njit(cache=True)
def _nmf_rrr(x, w, yb, omega, beta, tol, max_iter, errs):
    """In-place RRR iterations on the batch state (x, w), both (K, n, m).

    Returns (iterations, last RRR_err, status): status 1 flags a
    degenerate bilinear block that survived perturbation, 2 a non-finite
    error value.
    """
    n_items, n, m = x.shape
    xa = np.empty((n_items, n))
    wa = np.empty((n, m))
    rx = np.empty(n)
    rw = np.empty(n)
    it = 0
    last = 0.0
    while it < max_iter:
        for k in range(n_items):
            for i in range(n):
                s = 0.0
                for j in range(m):
                    s += x[k, i, j]
                v = s / m
                xa[k, i] = v if v > 0.0 else 0.0
        for i in range(n):
            anypos = False
            for j in range(m):
                s = 0.0
                for k in range(n_items):
                    s += w[k, i, j]
                v = s / n_items
                wa[i, j] = v
                if v > 0.0:
                    anypos = True
            if anypos:
                s2 = 0.0
                for j in range(m):
                    if wa[i, j] < 0.0:
                        wa[i, j] = 0.0
                    else:
                        s2 += wa[i, j] * wa[i, j]
                sc = omega / np.sqrt(s2)
                for j in range(m):
                    wa[i, j] *= sc
            else:
                jb = 0
                vb = wa[i, 0]
                for j in range(1, m):
                    if wa[i, j] > vb:
                        vb = wa[i, j]
                        jb = j
                for j in range(m):
                    wa[i, j] = 0.0
                wa[i, jb] = omega
        err2 = 0.0
        for k in range(n_items):
            for j in range(m):
                p = 0.0
                q = 0.0
                for i in range(n):
                    a = 2.0 * xa[k, i] - x[k, i, j]
                    c = 2.0 * wa[i, j] - w[k, i, j]
                    rx[i] = a
                    rw[i] = c
                    p += a * c
                    q += a * a + c * c
                if not q > 2.0 * abs(p):
                    nr = 0.0
                    for i in range(n):
                        nr += rw[i] * rw[i]
                    rw[0] += 1e-9 * np.sqrt(nr)
                    p = 0.0
                    q = 0.0
                    for i in range(n):
                        p += rx[i] * rw[i]
                        q += rx[i] * rx[i] + rw[i] * rw[i]
                    if not q > 2.0 * abs(p):
                        return it, last, 1
                u = _solve_h0(p, q, yb[k, j], 0.0, 1e-12, 100)
                s = 1.0 / (1.0 - u * u)
                for i in range(n):
                    bx = s * (rx[i] + u * rw[i])
                    bw = s * (rw[i] + u * rx[i])
                    dx = bx - xa[k, i]
                    dw = bw - wa[i, j]
                    err2 += dx * dx + dw * dw
                    x[k, i, j] += beta * dx
                    w[k, i, j] += beta * dw
        last = np.sqrt(err2 / n_items)
        errs[it] = last
        it += 1
        if not np.isfinite(last):
            return it, last, 2
        if last < tol:
            return it, last, 0
    return it, last, 0


def run_nmf_batch(x_edges, w_edges, y_batch, hyper, rrr_iter=None, tol=None):
    """Drive the fused RRR kernel on one batch.

    Mutates x_edges/w_edges in place and returns an IterationLog whose
    err series covers the iterations actually performed.
    """
    cap = hyper.rrr_iter if rrr_iter is None else rrr_iter
    stop = hyper.tol if tol is None else tol
    errs = np.empty(max(cap, 1))
    iters, last, status = _nmf_rrr(x_edges, w_edges, y_batch, hyper.omega,
                                   hyper.beta, stop, cap, errs)
    if status == 1:
        raise DegenerateBilinearError(
            f"degenerate bilinear block at iteration {iters}")
    if status == 2:
        raise FloatingPointError(
            f"RRR_err became non-finite at iteration {iters}")
    n_items = x_edges.shape[0]
    n_edges = x_edges.shape[1] * x_edges.shape[2]
    logbook = IterationLog(errs=errs[:iters].tolist(), iter_count=iters,
                           work_per_iter=float(n_items * n_edges))
    return logbook


def extract_consensus_nmf(x_edges, w_edges, omega):
    """Consensus (x_a, w_a) of the current batch state (its A-projection)."""
    _, _, x_a, w_a = project_A_nmf(x_edges, w_edges, omega)
    return x_a, w_a


# ---------------------------------------------------------------------------
# errors
# ---------------------------------------------------------------------------

def recon_err(problem, w_a, x_a=None):
    """Root-mean-square reconstruction error over the entire data set.

    When the per-item consensus codes for the whole data set are available
    (single-batch training), pass them as ``x_a`` and they are used directly.
    Otherwise codes are recomputed with the pseudo-inverse encoder, the
    online-NMF convention.  The distinction matters: an exact factorization
    can have a rank-deficient w_a, which no encoder of the form
    relu(linear) can invert.
    """
    if x_a is None:
        codes = encode(pseudo_inverse_encoder(w_a), problem.data.T)
    else:
        codes = np.asarray(x_a, dtype=float).T
    recon = w_a.T @ codes
    diff = recon - problem.data.T
    return float(np.sqrt(np.mean(diff ** 2)))


# ---------------------------------------------------------------------------
# data generators
# ---------------------------------------------------------------------------

def gen_ledm(m):
    """Linear Euclidean distance matrix Y[i,k] = ((i-k)/(m-1))^2 (1-based
    indices), the exact-NMF benchmark."""
    if m < 2:
        raise ValueError("m must be at least 2")
    idx = np.arange(1, m + 1, dtype=float)
    return ((idx[:, None] - idx[None, :]) / (m - 1)) ** 2


_GLYPH_SEGMENTS = {
    "w": [(3, 3, 16, 6), (16, 6, 8, 10), (8, 10, 16, 14), (16, 14, 3, 17)],
    "x": [(3, 4, 16, 16), (3, 16, 16, 4)],
    "y": [(3, 4, 10, 10), (3, 16, 10, 10), (10, 10, 16, 5)],
    "z": [(3, 4, 3, 16), (3, 16, 16, 4), (16, 4, 16, 16)],
}

GLYPH_LETTERS = ("w", "x", "y", "z")
GLYPH_SIZE = 20
_SLANT = 0.3


def _draw_glyph(letter, shear):
    rr, cc = np.mgrid[0:GLYPH_SIZE, 0:GLYPH_SIZE].astype(float)
    img = np.zeros((GLYPH_SIZE, GLYPH_SIZE))
    for r0, c0, r1, c1 in _GLYPH_SEGMENTS[letter]:
        c0s = c0 + shear * (10.0 - r0)
        c1s = c1 + shear * (10.0 - r1)
        dr, dc = r1 - r0, c1s - c0s
        t = ((rr - r0) * dr + (cc - c0s) * dc) / (dr * dr + dc * dc)
        t = np.clip(t, 0.0, 1.0)
        d2 = (rr - (r0 + t * dr)) ** 2 + (cc - (c0s + t * dc)) ** 2
        img[d2 <= 1.3 ** 2] = 1.0
    return img


def glyph_bitmaps():
    """The eight 20x20 letter bitmaps: four letters in plain and slanted
    variants, generated deterministically."""
    out = {}
    for letter in GLYPH_LETTERS:
        out[(letter, "plain")] = _draw_glyph(letter, 0.0)
        out[(letter, "slant")] = _draw_glyph(letter, _SLANT)
    return out


def gen_montage(count, seed):
    """count images of 40x40 pixels, one random letter (random font) in
    each of the four quadrants; returned flattened, one image per row."""
    glyphs = glyph_bitmaps()
    keys = [(letter, font) for letter in GLYPH_LETTERS
            for font in ("plain", "slant")]
    rng = np.random.default_rng(seed)
    side = 2 * GLYPH_SIZE
    images = np.zeros((count, side, side))
    anchors = [(0, 0), (0, GLYPH_SIZE), (GLYPH_SIZE, 0), (GLYPH_SIZE, GLYPH_SIZE)]
    for n in range(count):
        for r0, c0 in anchors:
            g = glyphs[keys[rng.integers(len(keys))]]
            images[n, r0:r0 + GLYPH_SIZE, c0:c0 + GLYPH_SIZE] = g
    return images.reshape(count, side * side)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def train_nmf(problem, epochs=1, progress=None):
    """Online NMF: shuffle the items each epoch, process them in batches
    with warm-started RRR, and report per-epoch metrics.

    Returns (w_a, metrics) where metrics is one RunMetrics per epoch.
    """
    hyper = problem.hyper
    rng = np.random.default_rng(hyper.rng_seed)
    n_items = problem.n_items
    batch = min(hyper.batch_size, n_items)
    w_a = None
    work_units = 0
    iters_total = 0
    metrics = []
    last_err = np.nan
    single_batch = batch >= n_items
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n_items)
        codes_full = None
        for start in range(0, n_items, batch):
            sel = order[start:start + batch]
            batch_data = problem.data[sel]
            x_edges, w_edges, w_a = init_batch_nmf(problem, w_a, batch_data, rng)
            logbook = run_nmf_batch(x_edges, w_edges, batch_data, hyper)
            x_a, w_a = extract_consensus_nmf(x_edges, w_edges, hyper.omega)
            work_units += logbook.iter_count * len(sel) * problem.n_edges
            iters_total += logbook.iter_count
            if logbook.errs:
                last_err = logbook.errs[-1]
            if single_batch:
                codes_full = np.empty_like(x_a)
                codes_full[sel] = x_a
        row = RunMetrics(epoch=epoch, rrr_err=last_err,
                         recon_err=recon_err(problem, w_a, codes_full),
                         iter_count=iters_total,
                         gwms=1e-9 * work_units)
        metrics.append(row)
        log.info("epoch %d: recon_err=%.6g RRR_err=%.6g GWMs=%.4g",
                 epoch, row.recon_err, row.rrr_err, row.gwms)
        if progress is not None:
            progress(row)
    return w_a, metrics
