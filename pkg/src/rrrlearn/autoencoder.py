"""Constraint-based training of cyclic autoencoders with product codes.

The network is a cycle: the output layer is identified with the data
layer, so decoding wraps back onto the nodes that carry the data.  A
batch mixes two kinds of items.  Data items pin the node values x at the
data layer and leave the code layer free; code items pin x at the code
layer and leave the data layer free.  Constraint set A holds the
x-consensus per source node, the pinned values, the activation loci at
every node (at pinned nodes only y and b move) and the weight consensus
with per-column norm omega.  Constraint set B holds the bilinear input
constraints sum_i x w = omega*y at every node and the bias consensus
over all items at every node.  Tying the pinned nodes' biases into the
consensus is what couples encoder to decoder: a per-item bias at a
pinned node could absorb any pre-activation, making the round trip
vacuous.  Every node carries metric weight g^2 = outdeg; there is no
special class-layer weight.

Code items are drawn from a product code: per code node i, an empirical
distribution Z_i collects the encodings of a body of data, and codes are
sampled coordinate-wise independently from the Z_i.  Training alternates
RRR on mixed batches with resampling of the code items from the updated
distributions, pulling the decoder toward inverting the encoder on the
whole product of the Z_i rather than only on encoded data.

Edge storage is destination-major as in the classifier: within block b
(layer b feeding layer b+1, widths a and c) edge (i -> j) sits at flat
index block_off[b] + j*a + i.  The wrap block feeds layer 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numba import njit

from .classifier import (ClassifierBatch, LabeledDataset, block_offsets,
                         blocks_to_flat, classify, extract_consensus_classifier,
                         flat_to_blocks, init_batch_classifier,
                         run_classifier_batch)
from .engine import IterationLog
from .graph import (ACT_RELU, ACT_STEP, ROLE_CLASS, ROLE_CODE, ROLE_DATA,
                    Activation, ConsensusState, HyperParams, NetworkGraph,
                    RunMetrics, build_layered)
from .kernels import (ACT_ID, MAXIT_ROOT, TOL_ROOT, DegenerateBilinearError,
                      _act_pin, _act_project, _solve_h0, project_bilinear,
                      project_norm)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------

@dataclass
class MixedBatch:
    """One training batch: pinned data vectors and pinned code vectors.

    Items are ordered data first, codes second.  Data items pin the data
    layer, code items pin the code layer; each kind leaves the other
    pinning layer free.
    """

    graph: NetworkGraph
    act: Activation
    data: np.ndarray
    codes: np.ndarray
    hyper: HyperParams

    def __post_init__(self):
        g = self.graph
        if not g.cyclic:
            raise ValueError("autoencoder graphs are cyclic")
        if g.roles[0] != ROLE_DATA:
            raise ValueError("the first layer must have role 'data'")
        if ROLE_CLASS in g.roles:
            raise ValueError("cyclic autoencoder graphs have no class layer")
        lc = g.layer_of_role(ROLE_CODE)
        self.data = np.asarray(self.data, dtype=float)
        self.codes = np.asarray(self.codes, dtype=float)
        if self.data.ndim != 2 or self.data.shape[1] != g.widths[0]:
            raise ValueError("data shape does not match the data layer")
        if self.codes.ndim != 2 or self.codes.shape[1] != g.widths[lc]:
            raise ValueError("codes shape does not match the code layer")
        if self.data.shape[0] < 1 or self.codes.shape[0] < 1:
            raise ValueError("need at least one data item and one code item")
        for name, arr in (("data", self.data), ("codes", self.codes)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {name}")
            _check_image(arr, self.act, name)

    @property
    def code_layer(self):
        return self.graph.layer_of_role(ROLE_CODE)

    @property
    def n_data(self):
        return self.data.shape[0]

    @property
    def n_codes(self):
        return self.codes.shape[0]

    @property
    def n_items(self):
        return self.n_data + self.n_codes


def _check_image(arr, act, name):
    """Pinned values must lie in the activation's image."""
    if act.kind == ACT_STEP:
        if not np.all((arr == 0.0) | (arr == 1.0)):
            raise ValueError(f"{name} must be binary for the step activation")
    elif act.kind == "zigmoid":
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError(f"{name} must lie in [0, 1] for the zigmoid")
    elif act.kind == "relu":
        if arr.min() < 0.0:
            raise ValueError(f"{name} must be non-negative for the relu")
    else:
        raise ValueError(f"cannot pin values of activation kind {act.kind!r}")


@dataclass
class AutoencoderState:
    """Per-item search variables: x, w per edge (destination-major) and
    y, b per node.  Every node carries variables, including the data
    layer."""

    x: np.ndarray
    w: np.ndarray
    y: np.ndarray
    b: np.ndarray

    def copy(self):
        return AutoencoderState(self.x.copy(), self.w.copy(),
                                self.y.copy(), self.b.copy())


@dataclass
class IdeCode:
    """Product code built from encodings of a body of data.

    values[k, i] is the encoding of source item k at code node i; column
    i is the empirical distribution Z_i.  Sampling draws each coordinate
    independently and uniformly from its column."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ValueError("need a 2-D (sources, code nodes) value array")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite code values")

    @property
    def n_code(self):
        return self.values.shape[1]

    def sample(self, count, rng):
        """count independent product-code draws, shape (count, n_code)."""
        idx = rng.integers(0, self.values.shape[0],
                           size=(int(count), self.n_code))
        return np.take_along_axis(self.values, idx, axis=0)


# ---------------------------------------------------------------------------
# cyclic forward passes
# ---------------------------------------------------------------------------

def feed_around(graph, consensus, act, vectors, start_layer, omega=1.0):
    """Propagate pinned vectors once around the cycle.

    vectors (n_items, widths[start_layer]) seeds the start layer; each
    block applies y = x.w/omega and x = f(y - b).  The wrap step into the
    start layer sets its pre-activation y but keeps x pinned.  Returns
    (ys, xs) indexed by layer; every layer gets a y.
    """
    if not graph.cyclic:
        raise ValueError("feed_around requires a cyclic graph")
    vectors = np.asarray(vectors, dtype=float)
    if vectors.ndim != 2 or vectors.shape[1] != graph.widths[start_layer]:
        raise ValueError("vectors do not match the start layer width")
    xs = [None] * graph.n_layers
    ys = [None] * graph.n_layers
    xs[start_layer] = vectors
    for step in range(graph.n_blocks):
        blk = (start_layer + step) % graph.n_blocks
        dst = graph.block_dst(blk)
        y = xs[blk] @ consensus.w_blocks[blk] / omega
        ys[dst] = y
        if dst != start_layer:
            xs[dst] = act.apply(y - consensus.b_layers[dst][None, :])
    return ys, xs


def encode(graph, consensus, d, act=None, omega=None):
    """Data-layer vectors to code-layer values via the encoder blocks."""
    return _half_pass(graph, consensus, d, 0, act, omega)


def decode(graph, consensus, z, act=None, omega=None):
    """Code-layer vectors to data-layer values via the decoder blocks."""
    lc = graph.layer_of_role(ROLE_CODE)
    return _half_pass(graph, consensus, z, lc, act, omega)


def _half_pass(graph, consensus, v, start_layer, act, omega):
    act = consensus.act if act is None else act
    omega = consensus.omega if omega is None else omega
    if act is None:
        raise ValueError("no activation stored in the consensus model")
    lc = graph.layer_of_role(ROLE_CODE)
    n_steps = lc - start_layer if start_layer < lc else graph.n_blocks - lc
    v = np.asarray(v, dtype=float)
    squeeze = v.ndim == 1
    if squeeze:
        v = v[None, :]
    if v.shape[1] != graph.widths[start_layer]:
        raise ValueError("input does not match the start layer width")
    x = v
    for step in range(n_steps):
        blk = (start_layer + step) % graph.n_blocks
        dst = graph.block_dst(blk)
        y = x @ consensus.w_blocks[blk] / omega
        x = act.apply(y - consensus.b_layers[dst][None, :])
    return x[0] if squeeze else x


def build_ide_code(graph, consensus, data, act=None, omega=None):
    """Product code whose per-node distributions are the encodings of
    `data` under the current model."""
    return IdeCode(encode(graph, consensus, data, act=act, omega=omega))


# ---------------------------------------------------------------------------
# reference projections (numpy; the fused kernel is tested against these)
# ---------------------------------------------------------------------------

def _node_g2_auto(graph):
    """Metric weight per node: outdeg everywhere."""
    g2 = np.empty(graph.n_nodes)
    for layer in range(graph.n_layers):
        g2[graph.node_ids(layer)] = graph.widths[layer + 1]
    return g2


def project_A_autoencoder(state, batch):
    """Consensus/pinning/activation projection."""
    g = batch.graph
    hyper = batch.hyper
    boff = block_offsets(g)
    K = batch.n_items
    Kd = batch.n_data
    lc = batch.code_layer
    out = state.copy()
    w_a = state.w.mean(axis=0)
    for blk in range(g.n_blocks):
        a, c = g.block_shape(blk)
        cols = w_a[boff[blk]:boff[blk + 1]].reshape(c, a)
        for j in range(c):
            cols[j] = project_norm(cols[j], hyper.omega)
    out.w[:] = w_a[None, :]
    kind = ACT_ID[batch.act.kind]
    delta = batch.act.delta
    for layer in range(g.n_layers):
        a, c = g.widths[layer], g.widths[layer + 1]
        xblk = state.x[:, boff[layer]:boff[layer + 1]].reshape(K, c, a)
        oblk = out.x[:, boff[layer]:boff[layer + 1]].reshape(K, c, a)
        xbar = xblk.mean(axis=1)
        ids = g.node_ids(layer)
        for k in range(K):
            pinned = (layer == 0 and k < Kd) or (layer == lc and k >= Kd)
            for i in range(a):
                node = ids[i]
                z = state.y[k, node] - state.b[k, node]
                if pinned:
                    v = batch.data[k, i] if k < Kd else batch.codes[k - Kd, i]
                    z1 = _act_pin(z, v, kind, delta)
                else:
                    z1, v = _act_project(z, xbar[k, i], 0.5 * c, float(c),
                                         kind, delta)
                t = 0.5 * (z1 - z)
                out.y[k, node] = state.y[k, node] + t
                out.b[k, node] = state.b[k, node] - t
                oblk[k, :, i] = v
    return out


def project_B_autoencoder(state, batch):
    """Bilinear input constraints at every node plus the bias consensus
    over items."""
    g = batch.graph
    hyper = batch.hyper
    boff = block_offsets(g)
    K = batch.n_items
    out = state.copy()
    g2 = _node_g2_auto(g)
    for layer in range(g.n_layers):
        blk = layer - 1 if layer >= 1 else g.n_blocks - 1
        a = g.widths[blk]
        ids = g.node_ids(layer)
        for j in range(g.widths[layer]):
            node = ids[j]
            sl = slice(boff[blk] + j * a, boff[blk] + (j + 1) * a)
            for k in range(K):
                x1, w1, y1 = project_bilinear(state.x[k, sl], state.w[k, sl],
                                              state.y[k, node], hyper.omega,
                                              g2[node])
                out.x[k, sl] = x1
                out.w[k, sl] = w1
                out.y[k, node] = y1
    out.b[:] = state.b.mean(axis=0, keepdims=True)
    return out


def rrr_err_autoencoder(state_a, state_b, g2_nodes, n_items):
    """Weighted A-B discrepancy: edge terms plus g^2-weighted node terms,
    averaged over the batch."""
    err2 = np.sum((state_b.x - state_a.x) ** 2)
    err2 += np.sum((state_b.w - state_a.w) ** 2)
    err2 += np.sum(g2_nodes[None, :] * (state_b.y - state_a.y) ** 2)
    err2 += np.sum(g2_nodes[None, :] * (state_b.b - state_a.b) ** 2)
    return float(np.sqrt(err2 / n_items))


# ---------------------------------------------------------------------------
# fused RRR loop
# ---------------------------------------------------------------------------

@njit(cache=True)
def _auto_rrr(x, w, y, b, data, codes, code_layer,
              widths, loff, boff, g2n, act_kind, act_delta, omega,
              beta, tol, max_iter, errs):
    """RRR iterations for one mixed batch, in place.

    Returns (iterations_run, last_err, status); status 1 flags a
    degenerate bilinear block that survived one retry, status 2 a
    non-finite state.
    """
    K, E = x.shape
    Kd = data.shape[0]
    n_layers = widths.shape[0] - 1
    n_nodes = loff[n_layers]

    xa = np.empty_like(x)
    wa = np.empty(E)
    ya = np.empty_like(y)
    ba = np.empty_like(b)
    xb = np.empty_like(x)
    wb = np.empty_like(w)
    yb = np.empty_like(y)
    bb = np.empty_like(b)

    it = 0
    err = np.inf
    status = 0
    while it < max_iter:
        # ---- projection A ----
        for e in range(E):
            s = 0.0
            for k in range(K):
                s += w[k, e]
            wa[e] = s / K
        for blk in range(n_layers):
            a = widths[blk]
            for j in range(widths[blk + 1]):
                base = boff[blk] + j * a
                nrm = 0.0
                for t in range(a):
                    nrm += wa[base + t] * wa[base + t]
                nrm = np.sqrt(nrm)
                if nrm > 0.0:
                    sc = omega / nrm
                    for t in range(a):
                        wa[base + t] *= sc
                else:
                    wa[base] = omega
                    for t in range(1, a):
                        wa[base + t] = 0.0
        for k in range(K):
            pl = 0 if k < Kd else code_layer
            for layer in range(n_layers):
                a = widths[layer]
                c = widths[layer + 1]
                eoff = boff[layer]
                for i in range(a):
                    s = 0.0
                    for j in range(c):
                        s += x[k, eoff + j * a + i]
                    xbar = s / c
                    node = loff[layer] + i
                    z = y[k, node] - b[k, node]
                    if layer == pl:
                        if k < Kd:
                            v = data[k, i]
                        else:
                            v = codes[k - Kd, i]
                        z1 = _act_pin(z, v, act_kind, act_delta)
                    else:
                        z1, v = _act_project(z, xbar, 0.5 * c, 1.0 * c,
                                             act_kind, act_delta)
                    mv = 0.5 * (z1 - z)
                    ya[k, node] = y[k, node] + mv
                    ba[k, node] = b[k, node] - mv
                    for j in range(c):
                        xa[k, eoff + j * a + i] = v
        # ---- reflect and project B ----
        for k in range(K):
            for e in range(E):
                xb[k, e] = 2.0 * xa[k, e] - x[k, e]
                wb[k, e] = 2.0 * wa[e] - w[k, e]
            for t in range(n_nodes):
                yb[k, t] = 2.0 * ya[k, t] - y[k, t]
        for t in range(n_nodes):
            s = 0.0
            for k in range(K):
                s += 2.0 * ba[k, t] - b[k, t]
            m = s / K
            for k in range(K):
                bb[k, t] = m
        for layer in range(n_layers):
            bl = layer - 1 if layer >= 1 else n_layers - 1
            a = widths[bl]
            eoff = boff[bl]
            for j in range(widths[layer]):
                node = loff[layer] + j
                g2 = g2n[node]
                base = eoff + j * a
                for k in range(K):
                    p = 0.0
                    q = 0.0
                    for t in range(a):
                        p += xb[k, base + t] * wb[k, base + t]
                        q += (xb[k, base + t] * xb[k, base + t]
                              + wb[k, base + t] * wb[k, base + t])
                    if q <= 2.0 * abs(p):
                        wn = 0.0
                        for t in range(a):
                            wn += wb[k, base + t] * wb[k, base + t]
                        wb[k, base] += 1e-9 * np.sqrt(wn)
                        p = 0.0
                        q = 0.0
                        for t in range(a):
                            p += xb[k, base + t] * wb[k, base + t]
                            q += (xb[k, base + t] * xb[k, base + t]
                                  + wb[k, base + t] * wb[k, base + t])
                        if q <= 2.0 * abs(p):
                            return it, err, 1
                    og2 = omega * omega / g2
                    u = _solve_h0(p, q, omega * yb[k, node], og2,
                                  TOL_ROOT, MAXIT_ROOT)
                    if u != 0.0:
                        sc = 1.0 / (1.0 - u * u)
                        for t in range(a):
                            xv = xb[k, base + t]
                            wv = wb[k, base + t]
                            xb[k, base + t] = sc * (xv + u * wv)
                            wb[k, base + t] = sc * (wv + u * xv)
                        yb[k, node] = yb[k, node] - u * omega / g2
        # ---- error and update ----
        err2 = 0.0
        for k in range(K):
            for e in range(E):
                dx = xb[k, e] - xa[k, e]
                dw = wb[k, e] - wa[e]
                err2 += dx * dx + dw * dw
                x[k, e] += beta * dx
                w[k, e] += beta * dw
            for t in range(n_nodes):
                dy = yb[k, t] - ya[k, t]
                db = bb[k, t] - ba[k, t]
                err2 += g2n[t] * (dy * dy + db * db)
                y[k, t] += beta * dy
                b[k, t] += beta * db
        err = np.sqrt(err2 / K)
        errs[it] = err
        it += 1
        if not np.isfinite(err):
            return it, err, 2
        if err < tol:
            break
    return it, err, status


# ---------------------------------------------------------------------------
# batch setup and training
# ---------------------------------------------------------------------------

def init_batch_autoencoder(batch, consensus=None, rng=None):
    """Feed-around initialization of a mixed batch state.

    With no consensus model, weight columns are drawn uniform on [-1, 1)
    and rescaled to norm omega, and all biases start at zero; a warm
    start reuses the passed consensus weights and biases.  Data items are
    fed from the data layer, code items from the code layer, once around
    the cycle; the wrap step keeps the pinned values.  Every constraint
    then holds except the activation locus at the pinned nodes.
    """
    g = batch.graph
    hyper = batch.hyper
    if consensus is None:
        if rng is None:
            raise ValueError("random initialization needs an rng")
        w_blocks = []
        for blk in range(g.n_blocks):
            a, c = g.block_shape(blk)
            wb = rng.uniform(-1.0, 1.0, size=(a, c))
            wb *= hyper.omega / np.linalg.norm(wb, axis=0, keepdims=True)
            w_blocks.append(wb)
        b_layers = [np.zeros(g.widths[l]) for l in range(g.n_layers)]
        consensus = ConsensusState(w_blocks=w_blocks, b_layers=b_layers,
                                   act=batch.act, omega=hyper.omega)
    K = batch.n_items
    Kd = batch.n_data
    lc = batch.code_layer
    boff = block_offsets(g)
    x = np.empty((K, g.n_edges))
    y = np.zeros((K, g.n_nodes))
    b = np.zeros((K, g.n_nodes))
    groups = ((slice(0, Kd), batch.data, 0),
              (slice(Kd, K), batch.codes, lc))
    for rows, vecs, start in groups:
        ys, xs = feed_around(g, consensus, batch.act, vecs, start,
                             hyper.omega)
        for blk in range(g.n_blocks):
            a, c = g.block_shape(blk)
            x[rows, boff[blk]:boff[blk + 1]] = np.tile(xs[blk], (1, c))
        for layer in range(g.n_layers):
            ids = g.node_ids(layer)
            y[rows, ids[0]:ids[-1] + 1] = ys[layer]
            b[rows, ids[0]:ids[-1] + 1] = consensus.b_layers[layer][None, :]
    w = np.broadcast_to(blocks_to_flat(g, consensus.w_blocks),
                        (K, g.n_edges)).copy()
    return AutoencoderState(x=x, w=w, y=y, b=b), consensus


def extract_consensus_autoencoder(state, batch):
    """Consensus weights (normalized per column) and biases (pool means)
    from a batch state."""
    g = batch.graph
    boff = block_offsets(g)
    w_a = state.w.mean(axis=0)
    for blk in range(g.n_blocks):
        a, c = g.block_shape(blk)
        cols = w_a[boff[blk]:boff[blk + 1]].reshape(c, a)
        for j in range(c):
            cols[j] = project_norm(cols[j], batch.hyper.omega)
    b_mean = state.b.mean(axis=0)
    b_layers = [b_mean[g.node_ids(layer)].copy()
                for layer in range(g.n_layers)]
    return ConsensusState(w_blocks=flat_to_blocks(g, w_a), b_layers=b_layers,
                          act=batch.act, omega=batch.hyper.omega)


def batch_recon_errors(state, batch):
    """Reconstruction errors of a batch state, usually at initialization:
    rms gap between the pinned values and f(y - b_mean) at the pinned
    nodes, per item kind."""
    g = batch.graph
    Kd = batch.n_data
    lc = batch.code_layer
    out = {}
    for name, rows, layer, target in (
            ("data_err", np.arange(Kd), 0, batch.data),
            ("code_err", np.arange(Kd, batch.n_items), lc, batch.codes)):
        ids = g.node_ids(layer)
        b_mean = state.b[:, ids].mean(axis=0)
        pred = batch.act.apply(state.y[np.ix_(rows, ids)] - b_mean[None, :])
        out[name] = float(np.sqrt(np.mean((target - pred) ** 2)))
    return out


def autoencoder_errors(graph, consensus, batch):
    """Reconstruction and constraint-gap diagnostics of a model on a batch.

    data_err and code_err are the rms differences between the pinned
    values and their reconstructions after one pass around the cycle;
    rrr_err is the A-B discrepancy at the start of iterations from this
    model.
    """
    if graph is not batch.graph and graph != batch.graph:
        raise ValueError("batch was built for a different graph")
    act = batch.act
    omega = batch.hyper.omega
    lc = batch.code_layer
    ys, _ = feed_around(graph, consensus, act, batch.data, 0, omega)
    pred = act.apply(ys[0] - consensus.b_layers[0][None, :])
    data_err = float(np.sqrt(np.mean((batch.data - pred) ** 2)))
    ys, _ = feed_around(graph, consensus, act, batch.codes, lc, omega)
    pred = act.apply(ys[lc] - consensus.b_layers[lc][None, :])
    code_err = float(np.sqrt(np.mean((batch.codes - pred) ** 2)))
    state, _ = init_batch_autoencoder(batch, consensus)
    pa = project_A_autoencoder(state, batch)
    refl = AutoencoderState(x=2.0 * pa.x - state.x, w=2.0 * pa.w - state.w,
                            y=2.0 * pa.y - state.y, b=2.0 * pa.b - state.b)
    pb = project_B_autoencoder(refl, batch)
    rrr = rrr_err_autoencoder(pa, pb, _node_g2_auto(graph), batch.n_items)
    return {"data_err": data_err, "code_err": code_err, "rrr_err": rrr}


def run_autoencoder_batch(state, batch, rrr_iter=None, tol=None):
    """RRR on one mixed batch, in place.  Returns the iteration log."""
    hyper = batch.hyper
    g = batch.graph
    rrr_iter = hyper.rrr_iter if rrr_iter is None else int(rrr_iter)
    tol = hyper.tol if tol is None else float(tol)
    errs = np.empty(max(rrr_iter, 1))
    widths = np.asarray(g.widths, dtype=np.int64)
    iters, last, status = _auto_rrr(
        state.x, state.w, state.y, state.b, batch.data, batch.codes,
        batch.code_layer, widths,
        np.asarray(g.layer_offset, dtype=np.int64), block_offsets(g),
        _node_g2_auto(g), ACT_ID[batch.act.kind], batch.act.delta,
        hyper.omega, hyper.beta, tol, rrr_iter, errs)
    if status == 1:
        raise DegenerateBilinearError(
            "bilinear block with x = +-w persisted after perturbation")
    if status == 2:
        raise FloatingPointError("non-finite state during RRR iterations")
    return IterationLog(errs=list(errs[:iters]), iter_count=iters,
                        work_per_iter=float(batch.n_items * g.n_edges))


def _first_codes(act, count, width, rng):
    """Code items for the very first batch, before any model exists:
    independent uniform draws over the activation image per coordinate."""
    if act.kind == ACT_STEP:
        return rng.integers(0, 2, size=(count, width)).astype(float)
    return rng.uniform(0.0, 1.0, size=(count, width))


def train_autoencoder(graph, data, hyper, act=None, epochs=1,
                      code_batch=None, progress=None):
    """Batched RRR training of a cyclic autoencoder with warm starts.

    Shuffles the data each epoch and pairs every data batch with freshly
    sampled code items: encodings of the batch's own data under the
    parameters carried over from the previous batch, sampled
    coordinate-wise (the first batch uses uniform draws over the
    activation image instead).  data_err and code_err are measured at
    each batch's start and averaged per epoch.  Returns
    (consensus, code, metrics) where code holds the final per-node
    distributions built from the full data set.
    """
    act = Activation(ACT_STEP, hyper.delta) if act is None else act
    data = np.asarray(data, dtype=float)
    rng = np.random.default_rng(hyper.rng_seed)
    n_items = data.shape[0]
    bsz = min(hyper.batch_size, n_items)
    csz = max(1, bsz // 10) if code_batch is None else int(code_batch)
    lc = graph.layer_of_role(ROLE_CODE)
    consensus = None
    metrics = []
    work_units = 0.0
    iters_total = 0
    last_err = np.nan
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n_items)
        derrs = []
        cerrs = []
        for start in range(0, n_items, bsz):
            sel = order[start:start + bsz]
            if consensus is None:
                codes = _first_codes(act, csz, graph.widths[lc], rng)
            else:
                code = build_ide_code(graph, consensus, data[sel])
                codes = code.sample(csz, rng)
            batch = MixedBatch(graph=graph, act=act, data=data[sel],
                               codes=codes, hyper=hyper)
            state, consensus = init_batch_autoencoder(batch, consensus, rng)
            recon = batch_recon_errors(state, batch)
            derrs.append(recon["data_err"])
            cerrs.append(recon["code_err"])
            logbook = run_autoencoder_batch(state, batch)
            consensus = extract_consensus_autoencoder(state, batch)
            work_units += logbook.iter_count * batch.n_items * graph.n_edges
            iters_total += logbook.iter_count
            if logbook.errs:
                last_err = logbook.errs[-1]
        row = RunMetrics(epoch=epoch, rrr_err=last_err,
                         data_err=float(np.mean(derrs)),
                         code_err=float(np.mean(cerrs)),
                         iter_count=iters_total, gwms=1e-9 * work_units)
        metrics.append(row)
        log.info("epoch %d: data_err=%.4f code_err=%.4f RRR_err=%.4g "
                 "GWMs=%.3f", epoch, row.data_err, row.code_err,
                 row.rrr_err, row.gwms)
        if progress is not None:
            progress(row)
    code = build_ide_code(graph, consensus, data)
    return consensus, code, metrics


# ---------------------------------------------------------------------------
# binary encoding task
# ---------------------------------------------------------------------------

def binary_codes(n):
    """All 2^n binary vectors of length n; row k holds the bits of k,
    least significant first."""
    k = np.arange(2 ** n)
    return ((k[:, None] >> np.arange(n)[None, :]) & 1).astype(float)


def binary_margin_bounds(graph):
    """Largest feasible step margins (delta_code, delta_data) of a cyclic
    binary codec: 2/sqrt(|D|) at the code layer and 1/sqrt(|C|) at the
    data layer, set by the weight-norm budget."""
    if not graph.cyclic:
        raise ValueError("margin bounds apply to cyclic graphs")
    lc = graph.layer_of_role(ROLE_CODE)
    return 2.0 / np.sqrt(graph.widths[0]), 1.0 / np.sqrt(graph.widths[lc])


def binary_encoding_task(n, hyper=None):
    """The n-bit encoding problem: map the 2^n 1-hot vectors to the 2^n
    binary codes, jointly constrained as one mixed batch on a cyclic
    2^n -> n -> 2^n step-activation network."""
    if hyper is None:
        hyper = HyperParams(beta=0.5, omega=100.0, delta=0.4,
                            rrr_iter=1000, batch_size=2 ** (n + 1))
    graph = build_layered([2 ** n, n, 2 ** n], roles=(ROLE_DATA, ROLE_CODE),
                          cyclic=True)
    act = Activation(ACT_STEP, hyper.delta)
    batch = MixedBatch(graph=graph, act=act, data=np.eye(2 ** n),
                       codes=binary_codes(n), hyper=hyper)
    return graph, batch


def verify_binary_solution(graph, consensus, delta=0.0):
    """Check a binary codec by zero-margin step inference: every 1-hot
    vector must round-trip encode -> decode, every code decode -> encode.
    With delta > 0 every pre-activation must also clear |y - b| >=
    delta/2; with delta = 0 it only has to be nonzero.
    """
    lc = graph.layer_of_role(ROLE_CODE)
    nd = graph.widths[0]
    eye = np.eye(nd)
    codes = binary_codes(graph.widths[lc])

    def sweep(x, start, steps):
        margin = np.inf
        for s in range(steps):
            blk = (start + s) % graph.n_blocks
            dst = graph.block_dst(blk)
            z = x @ consensus.w_blocks[blk] / consensus.omega
            z = z - consensus.b_layers[dst][None, :]
            margin = min(margin, float(np.min(np.abs(z))))
            x = (z > 0.0).astype(float)
        return x, margin

    c1, m1 = sweep(eye, 0, lc)
    d1, m2 = sweep(c1, lc, graph.n_blocks - lc)
    x2, m3 = sweep(codes, lc, graph.n_blocks - lc)
    c2, m4 = sweep(x2, 0, lc)
    floor = 0.5 * delta - 1e-9 if delta > 0.0 else 0.0
    if min(m1, m2, m3, m4) <= floor:
        return False
    return np.array_equal(d1, eye) and np.array_equal(c2, codes)


def build_binary_codec(n, omega=100.0):
    """Hand-built exact solution of the n-bit encoding problem at the
    margin bounds.

    Encoder columns read the bits of the hot index: w[i -> j] is
    +omega/sqrt(|D|) when bit j of i is set, else negative, with zero
    biases, so a 1-hot input lands at z = +-delta_code/2 exactly.
    Decoder columns match code bits against the bits of the output index:
    w[j -> i] is +omega*delta_data when bit j of i is set, else negative,
    with biases popcount(i)*delta_data - delta_data/2, so the matching
    output node lands at z = +delta_data/2 and every other node at or
    below -delta_data/2.
    """
    nd = 2 ** n
    graph = build_layered([nd, n, nd], roles=(ROLE_DATA, ROLE_CODE),
                          cyclic=True)
    dc, dd = binary_margin_bounds(graph)
    bits = binary_codes(n)  # (nd, n); bits[i, j] = bit j of i
    sign = 2.0 * bits - 1.0
    w_enc = omega / np.sqrt(nd) * sign
    w_dec = omega * dd * sign.T
    b_code = np.zeros(n)
    b_data = bits.sum(axis=1) * dd - dd / 2.0
    consensus = ConsensusState(
        w_blocks=[w_enc, w_dec], b_layers=[b_data, b_code],
        act=Activation(ACT_STEP, delta=min(dc, dd)), omega=omega)
    return graph, consensus


def train_binary_encoding(n, seed=0, hyper=None, max_iter=400_000,
                          check_every=2_000):
    """One attempt at the n-bit encoding problem from a random start.

    Runs RRR on the joint mixed batch, pausing every check_every
    iterations to test the extracted model by zero-margin round trips.
    Returns (consensus, solved, iterations).
    """
    graph, batch = binary_encoding_task(n, hyper)
    rng = np.random.default_rng(seed)
    state, consensus = init_batch_autoencoder(batch, None, rng)
    done = 0
    while done < max_iter:
        chunk = min(check_every, max_iter - done)
        logbook = run_autoencoder_batch(state, batch, rrr_iter=chunk,
                                        tol=0.0)
        done += logbook.iter_count
        consensus = extract_consensus_autoencoder(state, batch)
        if verify_binary_solution(graph, consensus):
            return consensus, True, done
    return consensus, False, done


# ---------------------------------------------------------------------------
# generative pipeline
# ---------------------------------------------------------------------------

def train_fp_classifier(graph, genuine, fakes, fpa, hyper, act=None,
                        epochs=1, test_genuine=None, test_fakes=None,
                        progress=None):
    """Train a genuine-vs-fake code classifier with a false-positive
    allowance.

    Genuine codes get label 1, fakes label 0.  Training uses the
    relabeling variant restricted to fake items: per batch, up to
    floor(fpa * n_fakes_in_batch) fakes whose excess class-projection
    distance is positive are treated as genuine.  Returns
    (consensus, fp, tn) where fp is the fraction of fakes classified
    genuine and tn the fraction of genuine codes classified fake,
    measured on the test sets when given, else on the training data.
    """
    if not (0.0 <= fpa < 1.0):
        raise ValueError(f"fpa must be in [0, 1), got {fpa}")
    act = Activation(ACT_RELU) if act is None else act
    genuine = np.asarray(genuine, dtype=float)
    fakes = np.asarray(fakes, dtype=float)
    vectors = np.concatenate([genuine, fakes])
    labels = np.concatenate([np.ones(len(genuine), dtype=np.int64),
                             np.zeros(len(fakes), dtype=np.int64)])
    train = LabeledDataset(vectors=vectors, labels=labels)
    eval_genuine = genuine if test_genuine is None else np.asarray(
        test_genuine, dtype=float)
    eval_fakes = fakes if test_fakes is None else np.asarray(
        test_fakes, dtype=float)
    rng = np.random.default_rng(hyper.rng_seed)
    n_items = train.n_items
    bsz = min(hyper.batch_size, n_items)
    consensus = None
    work_units = 0.0
    iters_total = 0
    last_err = np.nan
    fp = np.nan
    tn = np.nan
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n_items)
        for start in range(0, n_items, bsz):
            sel = order[start:start + bsz]
            batch = ClassifierBatch(graph=graph, act=act,
                                    data=train.vectors[sel],
                                    labels=train.labels[sel], hyper=hyper)
            eligible = (batch.labels == 0).astype(np.int8)
            allowance = int(fpa * int(eligible.sum()))
            state, consensus = init_batch_classifier(batch, consensus, rng)
            logbook, _, _ = run_classifier_batch(
                state, batch, variant="relabel", eligible=eligible,
                ee_count=allowance)
            consensus = extract_consensus_classifier(state, batch)
            work_units += logbook.iter_count * batch.n_items * graph.n_edges
            iters_total += logbook.iter_count
            if logbook.errs:
                last_err = logbook.errs[-1]
        fp = float(np.mean(classify(graph, consensus, eval_fakes) == 1))
        tn = float(np.mean(classify(graph, consensus, eval_genuine) == 0))
        row = RunMetrics(epoch=epoch, rrr_err=last_err, fp=fp, tn=tn,
                         iter_count=iters_total, gwms=1e-9 * work_units)
        log.info("epoch %d: fp=%.4f tn=%.4f RRR_err=%.4g GWMs=%.3f",
                 epoch, fp, tn, last_err, row.gwms)
        if progress is not None:
            progress(row)
    return consensus, fp, tn


def generate(graph_ae, consensus_ae, code, graph_clf, consensus_clf, count,
             rng=None, max_factor=1000):
    """Decode product-code samples that a genuine-vs-fake classifier
    accepts.

    Draws codes from `code`, keeps those classified genuine (class 1),
    and decodes the first `count` through the autoencoder.  Raises
    RuntimeError after max_factor * count draws without enough
    acceptances.  Returns (outputs, acceptance_rate).
    """
    count = int(count)
    if count < 1:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    cap = max_factor * count
    chunk = max(count, 256)
    kept = []
    n_kept = 0
    attempts = 0
    while n_kept < count:
        m = min(chunk, cap - attempts)
        if m <= 0:
            raise RuntimeError(
                f"no {count} acceptances within {cap} draws "
                f"(acceptance rate {n_kept / max(attempts, 1):.4f})")
        z = code.sample(m, rng)
        pred = classify(graph_clf, consensus_clf, z)
        keep = z[pred == 1]
        kept.append(keep)
        n_kept += keep.shape[0]
        attempts += m
    rate = n_kept / attempts
    accepted = np.concatenate(kept)[:count]
    return decode(graph_ae, consensus_ae, accepted), rate
