"""Constraint-based training of layered feed-forward classifiers.

Search variables are per-item copies of every edge activation x and edge
weight w, plus per-item node pre-activations y and biases b.  Constraint
set A holds the consensus constraints (x per source node, w per edge), the
data pinning, the activation loci on hidden nodes and the class margins;
constraint set B holds the bilinear input constraints sum_i x w = omega*y
per node and the bias consensus over items.  Training runs RRR on the
pair.  Node variables carry metric weight g^2 = outdeg on hidden nodes and
g^2 = upsilon on class nodes, so inconsistencies resolve evenly upstream
and downstream of each neuron.

Edge storage is destination-major: within block b (layers b -> b+1 of
widths a, c) edge (i -> j) sits at flat index block_off[b] + j*a + i, so
the incoming edges of every node form one contiguous slice.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numba import njit

from .engine import IterationLog
from .graph import (ACT_RELU, ROLE_CLASS, ROLE_DATA, Activation,
                    ConsensusState, HyperParams, NetworkGraph, RunMetrics,
                    build_layered, feed_forward)
from .kernels import (ACT_ID, MAXIT_ROOT, TOL_ROOT, DegenerateBilinearError,
                      _act_project, _solve_h0, project_bilinear,
                      project_class, project_class_exempt, project_norm)

log = logging.getLogger(__name__)

VARIANTS = ("plain", "drop", "relabel")
_VARIANT_ID = {name: i for i, name in enumerate(VARIANTS)}


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class LabeledDataset:
    """Vectors with integer class labels."""

    vectors: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be a 2-D array (items, features)")
        if self.labels.shape != (self.vectors.shape[0],):
            raise ValueError("need exactly one label per vector")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("non-finite values in data vectors")
        if self.labels.min(initial=0) < 0:
            raise ValueError("labels must be non-negative")

    @property
    def n_items(self):
        return self.vectors.shape[0]

    @property
    def n_features(self):
        return self.vectors.shape[1]

    def subset(self, idx):
        return LabeledDataset(self.vectors[idx], self.labels[idx])


@dataclass
class MajorityCircuit:
    """A Boolean circuit of odd-input majority gates.

    m inputs feed depth-1 hidden layers of m gates each; every hidden gate
    reads three randomly chosen nodes of the layer below, each through an
    optional NOT.  The top gate is a plain majority over the last layer.
    Negating all inputs flips every gate, so the two output classes have
    exactly equal cardinality over the full input set.
    """

    m: int
    depth: int
    sources: np.ndarray  # (depth-1, m, 3) node indices into the layer below
    negations: np.ndarray  # (depth-1, m, 3) bool

    def __post_init__(self):
        if self.m < 3 or self.m % 2 == 0:
            raise ValueError("m must be odd and at least 3")
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        shape = (self.depth - 1, self.m, 3)
        self.sources = np.asarray(self.sources, dtype=np.int64).reshape(shape)
        self.negations = np.asarray(self.negations, dtype=bool).reshape(shape)
        if self.sources.min(initial=0) < 0 or self.sources.max(initial=0) >= self.m:
            raise ValueError("gate sources out of range")

    def evaluate(self, bits):
        """Truth value (0/1) of the circuit for each row of 0/1 inputs."""
        vals = np.asarray(bits)
        squeeze = vals.ndim == 1
        if squeeze:
            vals = vals[None, :]
        if vals.shape[1] != self.m:
            raise ValueError(f"expected {self.m} inputs, got {vals.shape[1]}")
        vals = (vals > 0.5).astype(np.int64)
        for layer in range(self.depth - 1):
            picked = vals[:, self.sources[layer]]  # (N, m, 3)
            picked = np.where(self.negations[layer][None, :, :], 1 - picked, picked)
            vals = (picked.sum(axis=2) >= 2).astype(np.int64)
        out = (vals.sum(axis=1) >= (self.m + 1) // 2).astype(np.int64)
        return out[0] if squeeze else out


def gen_majority_circuit(m, depth, rng):
    """Draw a random majority-gate circuit."""
    n_hidden = max(depth - 1, 0)
    sources = rng.integers(0, m, size=(n_hidden, m, 3))
    negations = rng.integers(0, 2, size=(n_hidden, m, 3)).astype(bool)
    return MajorityCircuit(m=m, depth=depth, sources=sources, negations=negations)


def gen_majority_data(m, depth, seed):
    """Label all 2^m Boolean vectors with a random majority circuit and
    split them into equal train/test halves, stratified by class so both
    halves keep the exact class balance.

    Returns (circuit, train, test).
    """
    rng = np.random.default_rng(seed)
    circuit = gen_majority_circuit(m, depth, rng)
    count = 1 << m
    bits = ((np.arange(count)[:, None] >> np.arange(m)[None, :]) & 1).astype(float)
    labels = circuit.evaluate(bits)
    train_idx = []
    test_idx = []
    for cls in (0, 1):
        members = np.flatnonzero(labels == cls)
        members = rng.permutation(members)
        half = members.size // 2
        train_idx.append(members[:half])
        test_idx.append(members[half:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    full = LabeledDataset(bits, labels)
    return circuit, full.subset(train_idx), full.subset(test_idx)


def relu_margin_bound(m, h):
    """Class-node output change from one flipped penultimate majority gate
    in the rescaled relu simulation network with h hidden layers."""
    return (1.0 / np.sqrt(2.0 * m)) * (1.0 / np.sqrt(3.0)) ** h


def build_majority_network(circuit, omega=1.0):
    """Hand-built relu network that reproduces a majority circuit exactly.

    Each gate becomes a pair of relu nodes computing relu(s - b) and
    relu(s - b - 1); their difference is the gate value.  All weight
    columns are rescaled to norm omega with biases scaled to match, which
    shrinks each node's activation by its column norm but preserves signs.
    Column norms differ when a gate reads the same source twice, so the
    running scale is tracked per node.
    Returns a ConsensusState for the m -> 2m -> ... -> 2m -> 2 graph.
    """
    m, depth = circuit.m, circuit.depth
    widths = [m] + [2 * m] * (depth - 1) + [2]
    graph = build_layered(widths)
    w_blocks = []
    b_layers = [None]
    scale = np.ones(m)  # per-node activation scale entering the block
    for layer in range(depth - 1):
        a = widths[layer]
        w_raw = np.zeros((a, 2 * m))
        b_raw = np.zeros(2 * m)
        for gate in range(m):
            signs = np.where(circuit.negations[layer, gate], -1.0, 1.0)
            bias = (signs.sum() - 1.0) / 2.0
            for src, sgn in zip(circuit.sources[layer, gate], signs):
                if layer == 0:
                    w_raw[src, 2 * gate] += sgn
                    w_raw[src, 2 * gate + 1] += sgn
                else:
                    for col in (2 * gate, 2 * gate + 1):
                        w_raw[2 * src, col] += sgn
                        w_raw[2 * src + 1, col] -= sgn
            b_raw[2 * gate] = bias
            b_raw[2 * gate + 1] = bias + 1.0
        w_eff = w_raw / scale[:, None]
        norms = np.linalg.norm(w_eff, axis=0)
        w_blocks.append(omega * w_eff / norms[None, :])
        b_layers.append(b_raw / norms)
        scale = 1.0 / norms
    # top layer: class node 1 collects the gate count, node 0 its negation
    a = widths[-2]
    pattern = np.zeros(a)
    if depth == 1:
        pattern[:] = 1.0
    else:
        pattern[0::2] = 1.0
        pattern[1::2] = -1.0
    theta = m / 2.0
    p_eff = pattern / scale
    norm = np.linalg.norm(p_eff)
    w_top = np.stack([-p_eff, p_eff], axis=1) * (omega / norm)
    b_top = np.array([-theta, theta]) / norm
    w_blocks.append(w_top)
    b_layers.append(b_top)
    return graph, ConsensusState(w_blocks=w_blocks, b_layers=b_layers,
                                 act=Activation(ACT_RELU), omega=omega)


# ---------------------------------------------------------------------------
# edge layout and state
# ---------------------------------------------------------------------------

def block_offsets(graph):
    """Flat edge offsets per block for destination-major storage."""
    sizes = [graph.widths[b] * graph.widths[b + 1] for b in range(graph.n_blocks)]
    return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)


def flat_to_blocks(graph, w_flat):
    """Destination-major flat edge vector -> list of (a, c) block matrices."""
    boff = block_offsets(graph)
    out = []
    for b in range(graph.n_blocks):
        a, c = graph.block_shape(b)
        out.append(w_flat[boff[b]:boff[b + 1]].reshape(c, a).T.copy())
    return out


def blocks_to_flat(graph, w_blocks):
    """Inverse of flat_to_blocks."""
    return np.concatenate([wb.T.ravel() for wb in w_blocks])


@dataclass
class ClassifierBatch:
    """One training batch: the graph, activation, pinned data and labels."""

    graph: NetworkGraph
    act: Activation
    data: np.ndarray
    labels: np.ndarray
    hyper: HyperParams

    def __post_init__(self):
        if self.graph.cyclic:
            raise ValueError("classifier graphs are acyclic")
        if self.graph.roles[0] != ROLE_DATA or self.graph.roles[-1] != ROLE_CLASS:
            raise ValueError("classifier graphs need data first, class last")
        self.data = np.asarray(self.data, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.data.ndim != 2 or self.data.shape[1] != self.graph.widths[0]:
            raise ValueError("data shape does not match the input layer")
        if self.labels.shape != (self.data.shape[0],):
            raise ValueError("need one label per item")
        if self.labels.max(initial=0) >= self.graph.widths[-1]:
            raise ValueError("label out of range for the class layer")

    @property
    def n_items(self):
        return self.data.shape[0]

    @property
    def ee_count(self):
        return int(self.hyper.ee * self.n_items)


@dataclass
class ClassifierState:
    """Per-item search variables: x, w per edge (destination-major) and
    y, b per node (data-layer columns unused and held at zero)."""

    x: np.ndarray
    w: np.ndarray
    y: np.ndarray
    b: np.ndarray

    def copy(self):
        return ClassifierState(self.x.copy(), self.w.copy(),
                               self.y.copy(), self.b.copy())


def _node_g2(graph, upsilon):
    """Metric weight per node: outdeg for hidden, upsilon for class nodes,
    zero for the (variable-free) data layer."""
    g2 = np.zeros(graph.n_nodes)
    for layer in range(1, graph.n_layers):
        ids = graph.node_ids(layer)
        if graph.roles[layer] == ROLE_CLASS:
            g2[ids] = upsilon
        else:
            g2[ids] = graph.widths[layer + 1]
    return g2


# ---------------------------------------------------------------------------
# reference projections (numpy; the fused kernel is tested against these)
# ---------------------------------------------------------------------------

def project_A_classifier(state, batch, variant="plain", eligible=None,
                         ee_count=None):
    """Consensus/data/activation/class-margin projection.

    Returns (state_A, exempt_indices, labels_used); exemptions are empty
    for the plain variant.  `eligible` restricts which items the relabel
    variant may relabel; `ee_count` overrides the batch's exemption
    budget.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if eligible is not None and variant != "relabel":
        raise ValueError("eligibility masks apply to the relabel variant")
    g = batch.graph
    hyper = batch.hyper
    boff = block_offsets(g)
    K = batch.n_items
    ee_count = batch.ee_count if ee_count is None else int(ee_count)
    out = state.copy()
    # weights: consensus over items, then norm omega per incoming column
    w_a = state.w.mean(axis=0)
    for blk in range(g.n_blocks):
        a, c = g.block_shape(blk)
        cols = w_a[boff[blk]:boff[blk + 1]].reshape(c, a)
        for j in range(c):
            cols[j] = project_norm(cols[j], hyper.omega)
    out.w[:] = w_a[None, :]
    # x: consensus per source node with the layer's side constraint
    for layer in range(g.n_layers - 1):
        a, c = g.widths[layer], g.widths[layer + 1]
        xblk = state.x[:, boff[layer]:boff[layer + 1]].reshape(K, c, a)
        oblk = out.x[:, boff[layer]:boff[layer + 1]].reshape(K, c, a)
        if layer == 0:
            oblk[:] = batch.data[:, None, :]
            continue
        xbar = xblk.mean(axis=1)  # (K, a)
        ids = g.node_ids(layer)
        for k in range(K):
            for i in range(a):
                node = ids[i]
                z = state.y[k, node] - state.b[k, node]
                z1, x1 = _act_project(z, xbar[k, i], 0.5 * c, float(c),
                                      ACT_ID[batch.act.kind], batch.act.delta)
                t = 0.5 * (z1 - z)
                out.y[k, node] = state.y[k, node] + t
                out.b[k, node] = state.b[k, node] - t
                oblk[k, :, i] = x1
    # class margins
    ids = g.node_ids(g.n_layers - 1)
    yc, bc = state.y[:, ids], state.b[:, ids]
    if variant == "plain" or ee_count == 0:
        y1 = np.empty_like(yc)
        b1 = np.empty_like(bc)
        for k in range(K):
            y1[k], b1[k] = project_class(yc[k], bc[k], batch.labels[k],
                                         hyper.delta, hyper.upsilon)
        exempt = np.empty(0, dtype=int)
        labels_used = batch.labels.copy()
    else:
        y1, b1, exempt, labels_used = project_class_exempt(
            yc, bc, batch.labels, ee_count, variant,
            hyper.delta, hyper.upsilon, eligible=eligible)
    out.y[:, ids] = y1
    out.b[:, ids] = b1
    return out, exempt, labels_used


def project_B_classifier(state, batch):
    """Bilinear input constraints per (item, non-data node) plus the bias
    consensus over items."""
    g = batch.graph
    hyper = batch.hyper
    boff = block_offsets(g)
    K = batch.n_items
    out = state.copy()
    g2 = _node_g2(g, hyper.upsilon)
    for layer in range(1, g.n_layers):
        a = g.widths[layer - 1]
        ids = g.node_ids(layer)
        for j in range(g.widths[layer]):
            node = ids[j]
            sl = slice(boff[layer - 1] + j * a, boff[layer - 1] + (j + 1) * a)
            for k in range(K):
                x1, w1, y1 = project_bilinear(state.x[k, sl], state.w[k, sl],
                                              state.y[k, node], hyper.omega,
                                              g2[node])
                out.x[k, sl] = x1
                out.w[k, sl] = w1
                out.y[k, node] = y1
    lo = g.layer_offset[1]
    out.b[:, lo:] = state.b[:, lo:].mean(axis=0, keepdims=True)
    return out


def rrr_err_classifier(state_a, state_b, g2_nodes, n_items):
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
def _class_rrr(x, w, y, b, data, labels, widths, loff, boff, g2n,
               act_kind, act_delta, omega, upsilon, delta,
               variant_id, ee_count, eligible, beta, tol, max_iter,
               errs, exempt_out, labels_out):
    """RRR iterations for one classifier batch, in place.

    Returns (iterations_run, last_err, status); status 1 flags a
    degenerate bilinear block that survived one retry, status 2 a
    non-finite state.
    """
    K, E = x.shape
    n_layers = widths.shape[0]
    n_nodes = loff[n_layers]
    cl0 = loff[n_layers - 1]
    C = widths[n_layers - 1]

    xa = np.empty_like(x)
    wa = np.empty(E)
    ya = np.empty_like(y)
    ba = np.empty_like(b)
    xb = np.empty_like(x)
    wb = np.empty_like(w)
    yb = np.empty_like(y)
    bb = np.empty_like(b)
    mb = np.empty(n_nodes)
    dists = np.empty((K, C))
    dlab = np.empty(K)
    zrow = np.empty(C)

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
        for blk in range(n_layers - 1):
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
            for t in range(loff[1]):
                ya[k, t] = y[k, t]
                ba[k, t] = b[k, t]
            for layer in range(n_layers - 1):
                a = widths[layer]
                c = widths[layer + 1]
                eoff = boff[layer]
                for i in range(a):
                    if layer == 0:
                        v = data[k, i]
                    else:
                        s = 0.0
                        for j in range(c):
                            s += x[k, eoff + j * a + i]
                        xbar = s / c
                        node = loff[layer] + i
                        z = y[k, node] - b[k, node]
                        z1, v = _act_project(z, xbar, 0.5 * c, 1.0 * c,
                                             act_kind, act_delta)
                        mv = 0.5 * (z1 - z)
                        ya[k, node] = y[k, node] + mv
                        ba[k, node] = b[k, node] - mv
                    for j in range(c):
                        xa[k, eoff + j * a + i] = v
        # class layer: provisional distances, exemptions, then projection
        for k in range(K):
            tot_up = 0.0
            for c in range(C):
                node = cl0 + c
                z = y[k, node] - b[k, node]
                zrow[c] = z
                up = z if z > 0.0 else 0.0
                tot_up += up * up
            for c in range(C):
                z = zrow[c]
                dn = delta - z if delta - z > 0.0 else 0.0
                up = z if z > 0.0 else 0.0
                dists[k, c] = 0.5 * upsilon * (dn * dn + tot_up - up * up)
            dlab[k] = dists[k, labels[k]]
            exempt_out[k] = 0
            labels_out[k] = labels[k]
        if variant_id == 1 and ee_count > 0:  # drop
            order = np.argsort(-dlab, kind="mergesort")
            for t in range(ee_count):
                exempt_out[order[t]] = 1
        elif variant_id == 2 and ee_count > 0:  # relabel
            excess = np.empty(K)
            for k in range(K):
                best = np.inf
                barg = -1
                for c in range(C):
                    if c != labels[k] and dists[k, c] < best:
                        best = dists[k, c]
                        barg = c
                excess[k] = dlab[k] - best
                if eligible[k] == 0:
                    excess[k] = -np.inf
                dlab[k] = float(barg)  # stash the alternative
            order = np.argsort(-excess, kind="mergesort")
            taken = 0
            for t in range(K):
                k = order[t]
                if taken >= ee_count or excess[k] <= 0.0:
                    break
                exempt_out[k] = 1
                labels_out[k] = int(dlab[k])
                taken += 1
        for k in range(K):
            if variant_id == 1 and exempt_out[k] == 1:
                for c in range(C):
                    node = cl0 + c
                    ya[k, node] = y[k, node]
                    ba[k, node] = b[k, node]
                continue
            lab = labels_out[k]
            for c in range(C):
                node = cl0 + c
                z = y[k, node] - b[k, node]
                if c == lab:
                    zt = z if z > delta else delta
                else:
                    zt = z if z < 0.0 else 0.0
                mv = 0.5 * (zt - z)
                ya[k, node] = y[k, node] + mv
                ba[k, node] = b[k, node] - mv
        # ---- reflect and project B ----
        for k in range(K):
            for e in range(E):
                xb[k, e] = 2.0 * xa[k, e] - x[k, e]
                wb[k, e] = 2.0 * wa[e] - w[k, e]
            for t in range(n_nodes):
                yb[k, t] = 2.0 * ya[k, t] - y[k, t]
        for t in range(loff[1]):
            mb[t] = 0.0
        for t in range(loff[1], n_nodes):
            s = 0.0
            for k in range(K):
                s += 2.0 * ba[k, t] - b[k, t]
            mb[t] = s / K
        for k in range(K):
            for t in range(loff[1]):
                bb[k, t] = b[k, t]
            for t in range(loff[1], n_nodes):
                bb[k, t] = mb[t]
        for layer in range(1, n_layers):
            a = widths[layer - 1]
            eoff = boff[layer - 1]
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
                        s = 1.0 / (1.0 - u * u)
                        for t in range(a):
                            xv = xb[k, base + t]
                            wv = wb[k, base + t]
                            xb[k, base + t] = s * (xv + u * wv)
                            wb[k, base + t] = s * (wv + u * xv)
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
            for t in range(loff[1], n_nodes):
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
# training
# ---------------------------------------------------------------------------

def init_batch_classifier(batch, consensus=None, rng=None):
    """Feed-forward initialization of a batch state.

    With no consensus model, weight columns are drawn uniform on [-1, 1)
    and rescaled to norm omega, and all biases start at zero; a warm start
    reuses the passed consensus weights and biases.  Either way x, y come
    from the forward pass, so every constraint except the class margins
    holds exactly.  The sign diversity of the draw matters: all-positive
    columns put the relu net in a state RRR is slow to escape.
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
        b_layers = [None] + [np.zeros(g.widths[l]) for l in range(1, g.n_layers)]
        consensus = ConsensusState(w_blocks=w_blocks, b_layers=b_layers,
                                   act=batch.act, omega=hyper.omega)
    ys, xs = feed_forward(g, consensus, batch.act, batch.data, hyper.omega)
    K = batch.n_items
    boff = block_offsets(g)
    x = np.empty((K, g.n_edges))
    for blk in range(g.n_blocks):
        a, c = g.block_shape(blk)
        x[:, boff[blk]:boff[blk + 1]] = np.tile(xs[blk], (1, c))
    w = np.broadcast_to(blocks_to_flat(g, consensus.w_blocks), (K, g.n_edges)).copy()
    y = np.zeros((K, g.n_nodes))
    b = np.zeros((K, g.n_nodes))
    for layer in range(1, g.n_layers):
        ids = g.node_ids(layer)
        y[:, ids] = ys[layer]
        b[:, ids] = consensus.b_layers[layer][None, :]
    return ClassifierState(x=x, w=w, y=y, b=b), consensus


def extract_consensus_classifier(state, batch):
    """Consensus weights (normalized per column) and biases (item means)
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
    b_layers = [None] + [b_mean[g.node_ids(l)].copy()
                         for l in range(1, g.n_layers)]
    return ConsensusState(w_blocks=flat_to_blocks(g, w_a), b_layers=b_layers,
                          act=batch.act, omega=batch.hyper.omega)


def run_classifier_batch(state, batch, variant="plain", rrr_iter=None,
                         tol=None, eligible=None, ee_count=None):
    """RRR on one batch, in place.

    Returns (log, exempt_idx, labels_used); the exemptions are those of the
    last iteration's A projection.  `eligible` restricts which items the
    relabel variant may relabel; `ee_count` overrides the batch's
    exemption budget.
    """
    hyper = batch.hyper
    g = batch.graph
    K = batch.n_items
    rrr_iter = hyper.rrr_iter if rrr_iter is None else int(rrr_iter)
    tol = hyper.tol if tol is None else float(tol)
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if eligible is None:
        eligible_arr = np.ones(K, dtype=np.int8)
    elif variant != "relabel":
        raise ValueError("eligibility masks apply to the relabel variant")
    else:
        eligible_arr = np.asarray(eligible, dtype=np.int8)
        if eligible_arr.shape != (K,):
            raise ValueError("need one eligibility flag per item")
    ee_count = batch.ee_count if ee_count is None else int(ee_count)
    if variant == "drop" and ee_count >= K:
        raise ValueError("cannot exempt an entire batch")
    errs = np.empty(max(rrr_iter, 1))
    exempt_flags = np.zeros(K, dtype=np.int8)
    labels_used = batch.labels.copy()
    iters, last, status = _class_rrr(
        state.x, state.w, state.y, state.b, batch.data, batch.labels,
        np.asarray(g.widths, dtype=np.int64),
        np.asarray(g.layer_offset, dtype=np.int64),
        block_offsets(g), _node_g2(g, hyper.upsilon),
        ACT_ID[batch.act.kind], batch.act.delta,
        hyper.omega, hyper.upsilon, hyper.delta,
        _VARIANT_ID[variant], ee_count, eligible_arr,
        hyper.beta, tol, rrr_iter,
        errs, exempt_flags, labels_used)
    if status == 1:
        raise DegenerateBilinearError(
            "bilinear block with x = +-w persisted after perturbation")
    if status == 2:
        raise FloatingPointError("non-finite state during RRR iterations")
    logbook = IterationLog(errs=list(errs[:iters]), iter_count=iters,
                           work_per_iter=float(K * g.n_edges))
    return logbook, np.flatnonzero(exempt_flags), labels_used


def classify(graph, consensus, d, act=None, omega=None):
    """Class decision by maximum class-node score y - b after a forward
    pass; ties resolve to the lowest class index."""
    act = consensus.act if act is None else act
    omega = consensus.omega if omega is None else omega
    if act is None:
        raise ValueError("no activation stored in the consensus model")
    _, xs = feed_forward(graph, consensus, act, d, omega)
    scores = xs[-1]
    if scores.ndim == 1:
        return int(np.argmax(scores))
    return np.argmax(scores, axis=1)


def classification_error(graph, consensus, dataset, act=None, omega=None):
    """Fraction of items whose classify() output disagrees with the label."""
    pred = classify(graph, consensus, dataset.vectors, act=act, omega=omega)
    return float(np.mean(pred != dataset.labels))


def errors_report(graph, consensus, datasets, act=None, omega=None):
    """Classification error for each named dataset."""
    return {name: classification_error(graph, consensus, ds, act=act,
                                       omega=omega)
            for name, ds in datasets.items()}


def train_classifier(graph, train, test, hyper, act=None, variant="plain",
                     epochs=1, stop_train_err=None, progress=None):
    """Batched RRR training with warm starts.

    Shuffles the training items each epoch, runs hyper.rrr_iter RRR
    iterations per batch (or to hyper.tol), and carries the consensus
    weights and biases from batch to batch.  Stops early when train_err
    falls to stop_train_err or below.  Returns (consensus, metrics,
    exempt_idx) where exempt_idx holds training-set indices exempted
    during the final epoch's batches.
    """
    act = Activation(ACT_RELU) if act is None else act
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    rng = np.random.default_rng(hyper.rng_seed)
    n_items = train.n_items
    bsz = min(hyper.batch_size, n_items)
    consensus = None
    metrics = []
    work_units = 0.0
    iters_total = 0
    last_err = np.nan
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n_items)
        batch_errs = []
        exempt_epoch = []
        for start in range(0, n_items, bsz):
            sel = order[start:start + bsz]
            batch = ClassifierBatch(graph=graph, act=act,
                                    data=train.vectors[sel],
                                    labels=train.labels[sel], hyper=hyper)
            state, consensus = init_batch_classifier(batch, consensus, rng)
            logbook, exempt, _ = run_classifier_batch(state, batch, variant)
            consensus = extract_consensus_classifier(state, batch)
            work_units += logbook.iter_count * batch.n_items * graph.n_edges
            iters_total += logbook.iter_count
            if logbook.errs:
                last_err = logbook.errs[-1]
            batch_errs.append(classification_error(graph, consensus,
                                                   train.subset(sel)))
            exempt_epoch.extend(sel[exempt].tolist())
        row = RunMetrics(
            epoch=epoch, rrr_err=last_err,
            train_err=classification_error(graph, consensus, train),
            test_err=classification_error(graph, consensus, test),
            batch_err=float(np.mean(batch_errs)),
            iter_count=iters_total, gwms=1e-9 * work_units)
        metrics.append(row)
        log.info("epoch %d: train_err=%.4f test_err=%.4f batch_err=%.4f "
                 "RRR_err=%.4g GWMs=%.3f", epoch, row.train_err, row.test_err,
                 row.batch_err, row.rrr_err, row.gwms)
        if progress is not None:
            progress(row)
        if stop_train_err is not None and row.train_err <= stop_train_err:
            break
    return consensus, metrics, np.array(sorted(set(exempt_epoch)), dtype=int)
