"""Layered network graphs, hyperparameters, and variable storage layout.

All trainers share one representation: nodes are numbered contiguously in
layer order, edges connect consecutive layers with full connectivity, and
the search variables (edge activations x, edge weights w, pre-activations y,
biases b) live in a single flat vector whose block structure is described by
a Layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

ROLE_DATA = "data"
ROLE_HIDDEN = "hidden"
ROLE_CODE = "code"
ROLE_CLASS = "class"

_ROLES = (ROLE_DATA, ROLE_HIDDEN, ROLE_CODE, ROLE_CLASS)

ACT_NONE = "none"
ACT_RELU = "relu"
ACT_STEP = "step"
ACT_ZIGMOID = "zigmoid"


@dataclass(frozen=True)
class Activation:
    """An activation constraint on (z, x) pairs, z = y - b.

    kind 'relu' admits {(z, max(z, 0))}; 'step' admits x=0 for z <= -delta/2
    and x=1 for z >= delta/2 (nothing inside the gap); 'zigmoid' closes the
    gap with the line x = z/delta + 1/2; 'none' means the node carries no
    activation constraint.
    """

    kind: str = ACT_RELU
    delta: float = 0.0

    def __post_init__(self):
        if self.kind not in (ACT_NONE, ACT_RELU, ACT_STEP, ACT_ZIGMOID):
            raise ValueError(f"unknown activation kind {self.kind!r}")
        if self.kind in (ACT_STEP, ACT_ZIGMOID) and self.delta <= 0:
            raise ValueError(f"{self.kind} activation needs delta > 0")

    def apply(self, z):
        """Forward-pass value x = f(z).

        For 'step' the zero-margin convention is used: x = 1 iff z > 0.
        """
        z = np.asarray(z, dtype=float)
        if self.kind == ACT_RELU:
            return np.maximum(z, 0.0)
        if self.kind == ACT_STEP:
            return (z > 0.0).astype(float)
        if self.kind == ACT_ZIGMOID:
            return np.clip(z / self.delta + 0.5, 0.0, 1.0)
        return z.copy()


@dataclass
class HyperParams:
    """All hyperparameters shared by the trainers.

    beta is the RRR step size, gamma the generalized-step parameter,
    omega the weight norm, delta the class margin or activation gap,
    upsilon the class-node metric weight, ee the exemption fraction of a
    batch and fpa the false-positive allowance of the relabeling
    classifier.
    """

    beta: float = 1.0
    gamma: float = 1.0
    omega: float = 1.0
    delta: float = 0.0
    upsilon: float = 1.0
    tol: float = 0.0
    rrr_iter: int = 100
    batch_size: int = 100
    ee: float = 0.0
    fpa: float = 0.0
    admm_alpha: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.beta < 2.0):
            raise ValueError(f"beta must be in (0, 2), got {self.beta}")
        if self.gamma <= 0.0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.omega <= 0.0:
            raise ValueError(f"omega must be positive, got {self.omega}")
        if self.delta < 0.0:
            raise ValueError(f"delta must be non-negative, got {self.delta}")
        if self.upsilon <= 0.0:
            raise ValueError(f"upsilon must be positive, got {self.upsilon}")
        if self.tol < 0.0:
            raise ValueError(f"tol must be non-negative, got {self.tol}")
        if self.rrr_iter < 0:
            raise ValueError(f"rrr_iter must be non-negative, got {self.rrr_iter}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if not (0.0 <= self.ee < 1.0):
            raise ValueError(f"ee must be in [0, 1), got {self.ee}")
        if not (0.0 <= self.fpa < 1.0):
            raise ValueError(f"fpa must be in [0, 1), got {self.fpa}")
        if not (0.0 <= self.admm_alpha < 2.0):
            raise ValueError(f"admm_alpha must be in [0, 2), got {self.admm_alpha}")


@dataclass
class RunMetrics:
    """Per-epoch quantities reported by the trainers.

    Fields that do not apply to a task stay NaN and are omitted from its
    metrics file.  gwms accumulates 1e-9 * iterations * |K| * |E| over all
    batches seen so far.
    """

    epoch: int = 0
    rrr_err: float = np.nan
    recon_err: float = np.nan
    data_err: float = np.nan
    code_err: float = np.nan
    train_err: float = np.nan
    test_err: float = np.nan
    batch_err: float = np.nan
    fp: float = np.nan
    tn: float = np.nan
    iter_count: int = 0
    gwms: float = 0.0
    wall_seconds: float = np.nan


@dataclass(frozen=True)
class NetworkGraph:
    """A layered, fully connected graph with role-tagged node layers.

    For cyclic graphs (autoencoders) the final width must equal the first:
    the output layer is identified with the data layer, so the last edge
    block wraps back to layer 0 and the data layer has both incoming and
    outgoing edges.
    """

    widths: tuple
    roles: tuple
    cyclic: bool = False

    # derived, filled in __post_init__
    n_layers: int = field(init=False)
    n_nodes: int = field(init=False)
    n_edges: int = field(init=False)
    layer_offset: tuple = field(init=False)

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2:
            raise ValueError("need at least two layer widths")
        if any(w < 1 for w in widths):
            raise ValueError(f"widths must be positive, got {widths}")
        object.__setattr__(self, "widths", widths)
        if self.cyclic:
            if widths[0] != widths[-1]:
                raise ValueError(
                    "cyclic graph requires first and last widths to match, "
                    f"got {widths[0]} and {widths[-1]}"
                )
            n_layers = len(widths) - 1
        else:
            n_layers = len(widths)
        roles = tuple(self.roles)
        if len(roles) != n_layers:
            raise ValueError(f"expected {n_layers} layer roles, got {len(roles)}")
        for r in roles:
            if r not in _ROLES:
                raise ValueError(f"unknown node role {r!r}")
        object.__setattr__(self, "roles", roles)
        object.__setattr__(self, "n_layers", n_layers)
        offsets = np.concatenate([[0], np.cumsum(widths[:n_layers])])
        object.__setattr__(self, "layer_offset", tuple(int(o) for o in offsets))
        object.__setattr__(self, "n_nodes", int(offsets[n_layers]))
        n_edges = sum(widths[b] * widths[b + 1] for b in range(self.n_blocks))
        object.__setattr__(self, "n_edges", int(n_edges))

    @property
    def n_blocks(self):
        return len(self.widths) - 1

    def block_src(self, b):
        return b

    def block_dst(self, b):
        dst = b + 1
        if self.cyclic and dst == self.n_layers:
            dst = 0
        return dst

    def block_shape(self, b):
        return (self.widths[b], self.widths[b + 1])

    def node_ids(self, layer):
        lo = self.layer_offset[layer]
        return np.arange(lo, lo + self.widths[layer])

    def layer_of_role(self, role):
        hits = [l for l, r in enumerate(self.roles) if r == role]
        if len(hits) != 1:
            raise ValueError(f"expected exactly one {role!r} layer, found {len(hits)}")
        return hits[0]

    @property
    def edges(self):
        """Ordered (src, dst) node-id pairs, block by block, origin-major."""
        out = []
        for b in range(self.n_blocks):
            a, c = self.block_shape(b)
            src0 = self.layer_offset[self.block_src(b)]
            dst0 = self.layer_offset[self.block_dst(b)]
            src = np.repeat(np.arange(src0, src0 + a), c)
            dst = np.tile(np.arange(dst0, dst0 + c), a)
            out.append(np.stack([src, dst], axis=1))
        return np.concatenate(out, axis=0)

    @property
    def outdeg(self):
        """Out-degree per node id."""
        deg = np.zeros(self.n_nodes, dtype=np.int64)
        for b in range(self.n_blocks):
            src = self.block_src(b)
            lo = self.layer_offset[src]
            deg[lo:lo + self.widths[src]] += self.widths[b + 1]
        return deg

    def validate(self):
        """Check the structural invariants; raises AssertionError on failure."""
        edges = self.edges
        assert edges.min() >= 0 and edges.max() < self.n_nodes
        deg = np.bincount(edges[:, 0], minlength=self.n_nodes)
        assert np.array_equal(deg, self.outdeg)
        if not self.cyclic:
            assert np.all(edges[:, 0] < edges[:, 1])
        else:
            wrap = edges[:, 1] < edges[:, 0]
            dlo = self.layer_offset[0]
            assert np.all(edges[wrap, 1] < dlo + self.widths[0])
        return True


def build_layered(widths, roles=None, cyclic=False):
    """Build a fully connected layered graph.

    widths lists the layer sizes, input first.  roles tags each node layer
    (one of 'data', 'hidden', 'code', 'class'); the default marks the first
    layer 'data', the last 'class' and the rest 'hidden'.  For cyclic graphs
    the last width repeats the first and is not a separate node layer.
    """
    widths = tuple(int(w) for w in widths)
    if len(widths) == 0:
        raise ValueError("widths must be non-empty")
    if roles is None:
        if cyclic:
            raise ValueError("cyclic graphs need an explicit role list")
        if len(widths) < 2:
            raise ValueError("need at least two layer widths")
        roles = (ROLE_DATA,) + (ROLE_HIDDEN,) * (len(widths) - 2) + (ROLE_CLASS,)
    return NetworkGraph(widths=widths, roles=tuple(roles), cyclic=cyclic)


@dataclass
class ConsensusState:
    """Trained model parameters: consensus weights per edge block and
    consensus biases per layer (None where a layer has no bias), plus the
    activation and weight norm the model was trained with."""

    w_blocks: list
    b_layers: list
    x_A: Optional[np.ndarray] = None
    act: Optional[Activation] = None
    omega: float = 1.0

    def copy(self):
        return ConsensusState(
            w_blocks=[w.copy() for w in self.w_blocks],
            b_layers=[None if b is None else b.copy() for b in self.b_layers],
            x_A=None if self.x_A is None else self.x_A.copy(),
            act=self.act,
            omega=self.omega,
        )


class Layout:
    """Index map of the flat search vector.

    Blocks appear in the order: edge-x blocks, edge-w blocks, y layers,
    b layers.  y/b blocks exist only for layers listed in yb_layers.
    """

    def __init__(self, graph: NetworkGraph, n_items: int, yb_layers: Sequence[int] = ()):
        self.graph = graph
        self.n_items = int(n_items)
        self.yb_layers = tuple(yb_layers)
        k = self.n_items
        self._x_off = []
        self._w_off = []
        self._y_off = {}
        self._b_off = {}
        pos = 0
        for b in range(graph.n_blocks):
            a, c = graph.block_shape(b)
            self._x_off.append((pos, (k, a, c)))
            pos += k * a * c
        for b in range(graph.n_blocks):
            a, c = graph.block_shape(b)
            self._w_off.append((pos, (k, a, c)))
            pos += k * a * c
        for l in self.yb_layers:
            self._y_off[l] = (pos, (k, graph.widths[l]))
            pos += k * graph.widths[l]
        for l in self.yb_layers:
            self._b_off[l] = (pos, (k, graph.widths[l]))
            pos += k * graph.widths[l]
        self.dim = pos

    def new_vector(self):
        return np.zeros(self.dim)

    def _view(self, vec, off_shape):
        off, shape = off_shape
        n = int(np.prod(shape))
        return vec[off:off + n].reshape(shape)

    def x(self, vec, block):
        return self._view(vec, self._x_off[block])

    def w(self, vec, block):
        return self._view(vec, self._w_off[block])

    def y(self, vec, layer):
        return self._view(vec, self._y_off[layer])

    def b(self, vec, layer):
        return self._view(vec, self._b_off[layer])


@dataclass
class BatchState:
    """Per-batch search variables, stored flat with a Layout index map."""

    layout: Layout
    vec: np.ndarray

    def x(self, block):
        return self.layout.x(self.vec, block)

    def w(self, block):
        return self.layout.w(self.vec, block)

    def y(self, layer):
        return self.layout.y(self.vec, layer)

    def b(self, layer):
        return self.layout.b(self.vec, layer)

    def validate(self):
        assert self.vec.shape == (self.layout.dim,)
        assert np.all(np.isfinite(self.vec))
        return True


def feed_forward(graph, consensus, activation, data, omega=1.0):
    """Forward pass through an acyclic layered graph.

    Uses the deep-network normalization y[k,j] = sum_i x[k,i] w[i->j] / omega
    and x = f(y - b).  Returns (ys, xs), lists indexed by layer; ys[0] is
    None (the data layer has no pre-activation).

    data has shape (n_items, widths[0]) or (widths[0],).
    """
    if graph.cyclic:
        raise ValueError("feed_forward requires an acyclic graph")
    data = np.asarray(data, dtype=float)
    squeeze = data.ndim == 1
    if squeeze:
        data = data[None, :]
    if not np.all(np.isfinite(data)):
        raise ValueError("non-finite values in input data")
    if data.shape[1] != graph.widths[0]:
        raise ValueError(
            f"data width {data.shape[1]} != input layer width {graph.widths[0]}"
        )
    xs = [data]
    ys = [None]
    for blk in range(graph.n_blocks):
        y = xs[blk] @ consensus.w_blocks[blk] / omega
        b = consensus.b_layers[blk + 1]
        z = y if b is None else y - b[None, :]
        layer = blk + 1
        if graph.roles[layer] == ROLE_CLASS:
            x = z  # class nodes carry no activation; x holds the scores y - b
        else:
            x = activation.apply(z)
        ys.append(y)
        xs.append(x)
    if squeeze:
        ys = [None if y is None else y[0] for y in ys]
        xs = [x[0] for x in xs]
    return ys, xs
