"""Primitive Euclidean projections used by all trainers.

The central one is the projection to the bilinear constraint
x'.w' = Omega y', computed from the unique root of a rational function
h0 on (-1, 1) by a safeguarded Newton/bisection scheme.  The remaining
projections (consensus means, norm and non-negativity conditions,
activation loci, class margins, exemption variants) have closed forms.

Scalar hot paths are numba-compiled and shared with the batched trainer
kernels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numba import njit

log = logging.getLogger(__name__)

TOL_ROOT = 1e-12
MAXIT_ROOT = 100

ACT_ID = {"relu": 0, "step": 1, "zigmoid": 2}


class DegenerateBilinearError(ValueError):
    """Raised when x = +-w (q <= 2|p|) persists after perturbation."""


# ---------------------------------------------------------------------------
# root solver for the bilinear projection
# ---------------------------------------------------------------------------

@njit(cache=True)
def _h0(u, p, q, omy, og2):
    t = 1.0 - u * u
    return (p * (1.0 + u * u) + q * u) / (t * t) - omy + og2 * u


@njit(cache=True)
def _h1(u, p, q, og2):
    t = 1.0 - u * u
    return (q * (1.0 + 3.0 * u * u) + 2.0 * p * u * (3.0 + u * u)) / (t * t * t) + og2


@njit(cache=True)
def _solve_h0(p, q, omy, og2, tol, maxit):
    """Two-mode Newton/bisection solve of h0(u) = 0 on (-1, 1).

    omy = Omega*y, og2 = (Omega/g)^2; both are zero-free encodings of the
    simple (fixed-y) form when og2 = 0.  Requires q > 2|p|.
    """
    ua = 0.0
    fa = p - omy  # h0(0)
    if abs(fa) <= tol:
        return 0.0
    ub = 1.0 if fa < 0.0 else -1.0
    for _ in range(maxit):
        un = ua - fa / _h1(ua, p, q, og2)
        if (un - ua) * (un - ub) < 0.0:
            ua_new = un
        else:
            ua_new = 0.5 * (ua + ub)
        fn = _h0(ua_new, p, q, omy, og2)
        if abs(fn) <= tol:
            return ua_new
        if (fn > 0.0) != (fa > 0.0):
            ub = ua
        ua = ua_new
        fa = fn
    return ua


@dataclass
class RootProblem:
    """Scalar data of the bilinear root equation.

    g2 = inf gives the simple form: the (Omega/g)^2 u term drops and y is
    held fixed by the caller.
    """

    p: float
    q: float
    omega: float = 1.0
    y: float = 0.0
    g2: float = np.inf

    @property
    def og2(self):
        return 0.0 if np.isinf(self.g2) else self.omega ** 2 / self.g2

    def h0(self, u):
        u = np.asarray(u, dtype=float)
        t = 1.0 - u * u
        return (self.p * (1 + u * u) + self.q * u) / t ** 2 - self.omega * self.y + self.og2 * u

    def h1(self, u):
        u = np.asarray(u, dtype=float)
        t = 1.0 - u * u
        return (self.q * (1 + 3 * u * u) + 2 * self.p * u * (3 + u * u)) / t ** 3 + self.og2

    def h2(self, u):
        u = np.asarray(u, dtype=float)
        t = 1.0 - u * u
        return 3 * (self.q * u * (4 + 4 * u * u) + 2 * self.p * (1 + 6 * u * u + u ** 4)) / t ** 4

    def h3(self, u):
        u = np.asarray(u, dtype=float)
        t = 1.0 - u * u
        return 12 * (self.q * (1 + 10 * u * u + 5 * u ** 4)
                     + 2 * self.p * u * (5 + 10 * u * u + u ** 4)) / t ** 5


def solve_h0(rp: RootProblem, tol_root: float = TOL_ROOT, max_iter: int = MAXIT_ROOT) -> float:
    """Root of h0 in (-1, 1).  Requires q > 2|p|."""
    if not rp.q > 2.0 * abs(rp.p):
        raise DegenerateBilinearError(
            f"bilinear projection needs q > 2|p|, got q={rp.q}, p={rp.p}"
        )
    return _solve_h0(rp.p, rp.q, rp.omega * rp.y, rp.og2, tol_root, max_iter)


# ---------------------------------------------------------------------------
# bilinear projection
# ---------------------------------------------------------------------------

@dataclass
class BilinearInstance:
    """One bilinear block: vectors x, w and (for deep networks) scalar y."""

    x: np.ndarray
    w: np.ndarray
    y: float = 0.0
    omega: float = 1.0
    g2: float = np.inf

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        if self.x.shape != self.w.shape or self.x.ndim != 1 or self.x.size < 1:
            raise ValueError("x and w must be equal-length 1-D vectors")

    def project(self, tol_root=TOL_ROOT):
        return project_bilinear(self.x, self.w, self.y,
                                omega=self.omega, g2=self.g2, tol_root=tol_root)


def project_bilinear(x, w, y=0.0, omega=1.0, g2=np.inf, tol_root=TOL_ROOT):
    """Project (x, w, y) onto {x'.w' = omega*y'} in the metric
    ||dx||^2 + ||dw||^2 + g2*dy^2.

    With g2 = inf (the simple form used by NMF) y is a constant of the
    projection and returned unchanged.  A degenerate input with x = +-w
    is retried once after a 1e-9*||w|| perturbation of w's first
    coordinate; if that fails a DegenerateBilinearError is raised.
    """
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    p = float(x @ w)
    q = float(x @ x + w @ w)
    if not q > 2.0 * abs(p):
        log.warning("degenerate bilinear input (q=%.3g, 2|p|=%.3g); perturbing", q, 2 * abs(p))
        w = w.copy()
        w[0] += 1e-9 * np.linalg.norm(w)
        p = float(x @ w)
        q = float(x @ x + w @ w)
        if not q > 2.0 * abs(p):
            raise DegenerateBilinearError(
                f"bilinear projection degenerate after perturbation (q={q}, p={p})"
            )
    og2 = 0.0 if np.isinf(g2) else omega * omega / g2
    u = _solve_h0(p, q, omega * float(y), og2, tol_root, MAXIT_ROOT)
    if u == 0.0:
        return x.copy(), w.copy(), float(y)
    s = 1.0 / (1.0 - u * u)
    x1 = s * (x + u * w)
    w1 = s * (w + u * x)
    y1 = float(y) if np.isinf(g2) else float(y) - u * omega / g2
    return x1, w1, y1


# ---------------------------------------------------------------------------
# simple set projections
# ---------------------------------------------------------------------------

def project_nonneg(v):
    """Entrywise projection onto the non-negative orthant."""
    return np.maximum(np.asarray(v, dtype=float), 0.0)


def project_norm(v, omega):
    """Projection onto the sphere of radius omega.

    The zero vector maps to omega*e1 (a fixed direction, so the map stays
    deterministic).
    """
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        raise ValueError("cannot project an empty vector")
    n = np.linalg.norm(v)
    if n == 0.0:
        out = np.zeros_like(v)
        out[0] = omega
        return out
    return v * (omega / n)


def project_nonneg_norm(v, omega):
    """Projection onto {v >= 0, ||v|| = omega}.

    Negative entries are zeroed and the remainder rescaled; if no entry is
    positive, the least negative entry is set to omega and the rest to zero.
    """
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        raise ValueError("cannot project an empty vector")
    if np.all(v <= 0.0):
        out = np.zeros_like(v)
        out[int(np.argmax(v))] = omega
        return out
    vp = np.maximum(v, 0.0)
    return vp * (omega / np.linalg.norm(vp))


# ---------------------------------------------------------------------------
# activation-locus projection
# ---------------------------------------------------------------------------

@njit(cache=True)
def _piece_min(z, x, wz, wx, a, c, lo, hi):
    """Nearest point of the segment {(t, a*t + c): lo <= t <= hi} in the
    weighted metric wz*dz^2 + wx*dx^2.  Returns (t, x', dist2)."""
    denom = wz + wx * a * a
    if denom > 0.0:
        t = (wz * z + wx * a * (x - c)) / denom
    else:
        t = z
    if t < lo:
        t = lo
    elif t > hi:
        t = hi
    xv = a * t + c
    dz = t - z
    dx = xv - x
    return t, xv, wz * dz * dz + wx * dx * dx


@njit(cache=True)
def _act_project(z, x, wz, wx, kind, delta):
    """Project (z, x) onto the activation locus; ties pick the larger x."""
    big = np.inf
    if kind == 0:  # relu: x = z (z >= 0) union x = 0 (z <= 0)
        t1, x1, d1 = _piece_min(z, x, wz, wx, 1.0, 0.0, 0.0, big)
        t2, x2, d2 = _piece_min(z, x, wz, wx, 0.0, 0.0, -big, 0.0)
        if d1 < d2 or (d1 == d2 and x1 >= x2):
            return t1, x1
        return t2, x2
    h = 0.5 * delta
    if kind == 1:  # gapped step
        t1, x1, d1 = _piece_min(z, x, wz, wx, 0.0, 1.0, h, big)
        t2, x2, d2 = _piece_min(z, x, wz, wx, 0.0, 0.0, -big, -h)
        if d1 < d2 or (d1 == d2 and x1 >= x2):
            return t1, x1
        return t2, x2
    # zigmoid: step pieces plus the connecting ramp
    t1, x1, d1 = _piece_min(z, x, wz, wx, 0.0, 1.0, h, big)
    t2, x2, d2 = _piece_min(z, x, wz, wx, 1.0 / delta, 0.5, -h, h)
    t3, x3, d3 = _piece_min(z, x, wz, wx, 0.0, 0.0, -big, -h)
    tb, xb, db = t1, x1, d1
    if d2 < db or (d2 == db and x2 > xb):
        tb, xb, db = t2, x2, d2
    if d3 < db or (d3 == db and x3 > xb):
        tb, xb, db = t3, x3, d3
    return tb, xb


@njit(cache=True)
def _act_pin(z, x_pin, kind, delta):
    """Smallest-|dz| z' with f(z') = x_pin, for a pinned activation node."""
    if kind == 0:  # relu
        if x_pin > 0.0:
            return x_pin
        return min(z, 0.0)
    h = 0.5 * delta
    if kind == 1:  # step: x_pin must be 0 or 1
        if x_pin >= 0.5:
            return max(z, h)
        return min(z, -h)
    # zigmoid
    if x_pin <= 0.0:
        return min(z, -h)
    if x_pin >= 1.0:
        return max(z, h)
    return delta * (x_pin - 0.5)


def project_activation(x_a, nout, y, b, g2, act):
    """Project (x_a, y, b) onto {x' = f(y' - b')} minimizing
    nout*dx^2 + g2*(dy^2 + db^2).

    y and b move equally and oppositely, so the problem reduces to the
    (z, x) plane with z = y - b carrying weight g2/2.  Returns
    (x_a', y', b').
    """
    if act.kind == "none":
        raise ValueError("cannot project onto activation of kind 'none'")
    kind = ACT_ID[act.kind]
    z = float(y) - float(b)
    z1, x1 = _act_project(z, float(x_a), 0.5 * g2, float(nout), kind, act.delta)
    t = 0.5 * (z1 - z)
    return x1, float(y) + t, float(b) - t


def project_activation_pinned(x_pin, y, b, act):
    """Move (y, b) only, so that f(y' - b') equals the pinned value."""
    if act.kind == "none":
        raise ValueError("cannot project onto activation of kind 'none'")
    if act.kind == "relu" and x_pin < 0.0:
        raise ValueError(f"pinned value {x_pin} is outside the relu image")
    if act.kind in ("step", "zigmoid") and not (0.0 <= x_pin <= 1.0):
        raise ValueError(f"pinned value {x_pin} is outside the activation image")
    if act.kind == "step" and x_pin not in (0.0, 1.0):
        raise ValueError(f"step activation needs binary pinned values, got {x_pin}")
    z = float(y) - float(b)
    z1 = _act_pin(z, float(x_pin), ACT_ID[act.kind], act.delta)
    t = 0.5 * (z1 - z)
    return float(y) + t, float(b) - t


# ---------------------------------------------------------------------------
# consensus with side constraints
# ---------------------------------------------------------------------------

@dataclass
class SideNonNeg:
    pass


@dataclass
class SideNorm:
    omega: float


@dataclass
class SideNonNegNorm:
    omega: float


@dataclass
class SideActivation:
    act: object
    y: float
    b: float
    g2: float


def project_consensus(values, side=None):
    """Consensus projection: replicas along axis 0 collapse to their mean,
    then an optional side constraint is applied to the mean.

    When the side constraint involves extra variables (activation), the
    mean's displacement is weighted by the replica count, as the compound
    projection requires.  Returns (replicated values, side extras), where
    extras is (y', b') for an activation side and None otherwise.
    """
    values = np.asarray(values, dtype=float)
    if values.shape[0] == 0:
        raise ValueError("consensus over an empty replica set")
    zbar = values.mean(axis=0)
    extras = None
    if side is None:
        out = zbar
    elif isinstance(side, SideNonNeg):
        out = project_nonneg(zbar)
    elif isinstance(side, SideNorm):
        out = project_norm(zbar, side.omega)
    elif isinstance(side, SideNonNegNorm):
        out = project_nonneg_norm(zbar, side.omega)
    elif isinstance(side, SideActivation):
        if zbar.ndim != 0:
            raise ValueError("activation side constraint applies to scalar consensus")
        m = values.shape[0]
        x1, y1, b1 = project_activation(float(zbar), m, side.y, side.b, side.g2, side.act)
        out = np.asarray(x1)
        extras = (y1, b1)
    else:
        raise TypeError(f"unknown side constraint {side!r}")
    return np.broadcast_to(out, values.shape).copy(), extras


# ---------------------------------------------------------------------------
# class-node projections
# ---------------------------------------------------------------------------

def project_class(y, b, correct, delta, upsilon=1.0):
    """Project class-node (y, b) onto the margin constraints: y-b >= delta
    at the correct node, y-b <= 0 elsewhere.  Violating coordinates move y
    and b equally and oppositely to the equality case; the result does not
    depend on upsilon (y and b carry the same weight)."""
    y = np.asarray(y, dtype=float).copy()
    b = np.asarray(b, dtype=float).copy()
    z = y - b
    zt = np.minimum(z, 0.0)
    zt[correct] = max(z[correct], delta)
    t = 0.5 * (zt - z)
    return y + t, b - t


def class_distances(y, b, delta, upsilon=1.0):
    """Squared class-projection distance for every choice of correct node.

    Returns a (n_items, n_classes) array D with D[k, c] the weighted squared
    move of (y[k], b[k]) when class c is forced to be the correct one.
    """
    y = np.asarray(y, dtype=float)
    b = np.asarray(b, dtype=float)
    z = y - b
    up = np.maximum(z, 0.0) ** 2          # cost of forcing y-b <= 0
    down = np.maximum(delta - z, 0.0) ** 2  # cost of forcing y-b >= delta
    total_up = up.sum(axis=1, keepdims=True)
    return 0.5 * upsilon * (down + total_up - up)


def project_class_exempt(y, b, labels, ee_count, mode, delta, upsilon=1.0,
                         eligible=None):
    """Batch class projection with eccentric exemptions.

    mode 'drop': project all items provisionally, keep the ee_count items
    with the largest class-projection distance unchanged, project the rest.
    mode 'relabel': every item gets projected, but up to ee_count items with
    the largest positive excess d2(label) - d2(best other) are projected to
    their nearest alternative class instead.  `eligible` optionally masks
    which items may be relabeled.

    Returns (y', b', exempt_indices, labels_used).
    """
    y = np.asarray(y, dtype=float)
    b = np.asarray(b, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n = y.shape[0]
    ee_count = int(ee_count)
    if ee_count >= n and mode == "drop":
        raise ValueError(f"ee_count {ee_count} must be smaller than the batch ({n})")
    dists = class_distances(y, b, delta, upsilon)
    d_label = dists[np.arange(n), labels]
    labels_used = labels.copy()
    if mode == "drop":
        if ee_count > 0:
            order = np.argsort(-d_label, kind="stable")
            exempt = np.sort(order[:ee_count])
        else:
            exempt = np.empty(0, dtype=int)
    elif mode == "relabel":
        masked = dists.copy()
        masked[np.arange(n), labels] = np.inf
        best_alt = np.argmin(masked, axis=1)
        excess = d_label - masked[np.arange(n), best_alt]
        if eligible is not None:
            excess = np.where(np.asarray(eligible, bool), excess, -np.inf)
        cand = np.flatnonzero(excess > 0.0)
        if ee_count > 0 and cand.size > 0:
            order = cand[np.argsort(-excess[cand], kind="stable")]
            exempt = np.sort(order[:ee_count])
            labels_used[exempt] = best_alt[exempt]
        else:
            exempt = np.empty(0, dtype=int)
    else:
        raise ValueError(f"unknown exemption mode {mode!r}")
    y1 = y.copy()
    b1 = b.copy()
    skip = set(exempt.tolist()) if mode == "drop" else ()
    for k in range(n):
        if k in skip:
            continue
        y1[k], b1[k] = project_class(y[k], b[k], labels_used[k], delta, upsilon)
    return y1, b1, exempt, labels_used
