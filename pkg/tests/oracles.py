"""Independent reference solvers used to validate the fast projections.

Everything here is deliberately naive: penalty ramps, dense grids,
generic constrained minimizers, subset enumeration.  None of it shares
code with the package kernels, so agreement is meaningful evidence.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy import optimize


# ---------------------------------------------------------------------------
# bilinear projection oracle: penalty ramp + constrained polish
# ---------------------------------------------------------------------------

def oracle_bilinear(x, w, y=0.0, omega=1.0, g2=np.inf, n_starts=3, seed=0,
                    polish=False):
    """Global minimizer of ||x'-x||^2 + ||w'-w||^2 + g2*(y'-y)^2 subject to
    x'.w' = omega*y', found by a penalty ramp with least-norm Newton
    feasibility restoration; polish=True adds an SLSQP refinement pass.

    g2 = inf treats y as a fixed constant.  Returns (x', w', y').
    """
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    d = x.size
    free_y = np.isfinite(g2)

    def split(v):
        if free_y:
            return v[:d], v[d:2 * d], v[2 * d]
        return v[:d], v[d:2 * d], y

    def pack(xv, wv, yv):
        if free_y:
            return np.concatenate([xv, wv, [yv]])
        return np.concatenate([xv, wv])

    def resid(v):
        xv, wv, yv = split(v)
        return float(xv @ wv - omega * yv)

    def penalty(v, mu):
        xv, wv, yv = split(v)
        dx = xv - x
        dw = wv - w
        c = xv @ wv - omega * yv
        f = dx @ dx + dw @ dw + mu * c * c
        gx = 2.0 * dx + 2.0 * mu * c * wv
        gw = 2.0 * dw + 2.0 * mu * c * xv
        if free_y:
            dy = yv - y
            f += g2 * dy * dy
            gy = 2.0 * g2 * dy - 2.0 * mu * c * omega
            return f, np.concatenate([gx, gw, [gy]])
        return f, np.concatenate([gx, gw])

    def distance(v):
        xv, wv, yv = split(v)
        f = np.sum((xv - x) ** 2) + np.sum((wv - w) ** 2)
        if free_y:
            f += g2 * (yv - y) ** 2
        return f

    def distance_jac(v):
        xv, wv, yv = split(v)
        gx = 2.0 * (xv - x)
        gw = 2.0 * (wv - w)
        if free_y:
            return np.concatenate([gx, gw, [2.0 * g2 * (yv - y)]])
        return np.concatenate([gx, gw])

    def resid_jac(v):
        xv, wv, yv = split(v)
        if free_y:
            return np.concatenate([wv, xv, [-omega]])
        return np.concatenate([wv, xv])

    rng = np.random.default_rng(seed)
    scale = max(np.linalg.norm(x), np.linalg.norm(w), 1.0)
    starts = [pack(x, w, y)]
    for _ in range(n_starts - 1):
        starts.append(pack(x + 0.3 * scale * rng.standard_normal(d),
                           w + 0.3 * scale * rng.standard_normal(d),
                           y + 0.3 * rng.standard_normal()))
    best = None
    for v0 in starts:
        v = v0
        for mu in (1e2, 1e4, 1e6, 1e8):
            res = optimize.minimize(penalty, v, args=(mu,), jac=True,
                                    method="L-BFGS-B",
                                    options={"maxiter": 400, "ftol": 1e-16, "gtol": 1e-12})
            v = res.x
        if polish:
            cons = [{"type": "eq", "fun": resid, "jac": resid_jac}]
            res = optimize.minimize(distance, v, jac=distance_jac,
                                    method="SLSQP", constraints=cons,
                                    options={"maxiter": 200, "ftol": 1e-14})
            v = res.x
        # least-norm Newton restoration: the minimizers stop near the
        # constraint; polish the residual without moving the distance
        for _ in range(5):
            c = resid(v)
            if abs(c) <= 1e-12:
                break
            grad = resid_jac(v)
            v = v - (c / (grad @ grad)) * grad
        if abs(resid(v)) > 1e-9:
            continue
        if best is None or distance(v) < distance(best):
            best = v
    if best is None:
        raise RuntimeError("oracle failed to find a feasible point")
    xv, wv, yv = split(best)
    return xv, wv, float(yv)


# ---------------------------------------------------------------------------
# root oracle: tanh-spaced grid scan + Brent refinement
# ---------------------------------------------------------------------------

def oracle_h0(u, p, q, omy, og2):
    t = 1.0 - u * u
    return (p * (1.0 + u * u) + q * u) / (t * t) - omy + og2 * u


def oracle_root(p, q, omy, og2, n_grid=2_000_001):
    """Unique root of h0 on (-1, 1), located by sign change on a grid that
    is uniform in atanh(u), then polished with Brent's method."""
    v = np.linspace(-18.0, 18.0, n_grid)
    u = np.tanh(v)
    h = oracle_h0(u, p, q, omy, og2)
    sign = np.sign(h)
    idx = np.flatnonzero(np.diff(sign) != 0)
    if idx.size == 0:
        exact = np.flatnonzero(h == 0.0)
        if exact.size:
            return float(u[exact[0]])
        raise RuntimeError("no sign change found on the grid")
    i = int(idx[0])
    return float(optimize.brentq(oracle_h0, u[i], u[i + 1],
                                 args=(p, q, omy, og2), xtol=1e-15, rtol=1e-15))


# ---------------------------------------------------------------------------
# activation locus: sampling and dense projection oracle
# ---------------------------------------------------------------------------

def locus_pieces(act):
    """Pieces of the activation graph as (slope, intercept, lo, hi) in the
    (z, x) plane."""
    if act.kind == "relu":
        return [(1.0, 0.0, 0.0, np.inf), (0.0, 0.0, -np.inf, 0.0)]
    h = 0.5 * act.delta
    if act.kind == "step":
        return [(0.0, 1.0, h, np.inf), (0.0, 0.0, -np.inf, -h)]
    if act.kind == "zigmoid":
        return [(0.0, 1.0, h, np.inf),
                (1.0 / act.delta, 0.5, -h, h),
                (0.0, 0.0, -np.inf, -h)]
    raise ValueError(act.kind)


def sample_locus(act, rng, n, span=50.0):
    """n points on the activation locus, for optimality spot checks."""
    pts = []
    pieces = locus_pieces(act)
    for _ in range(n):
        a, c, lo, hi = pieces[rng.integers(len(pieces))]
        z = rng.uniform(max(lo, -span), min(hi, span))
        pts.append((z, a * z + c))
    return np.array(pts)


def oracle_activation_project(z, x, wz, wx, act, n_dense=200_001, span=None):
    """Projection of (z, x) onto the activation locus in the metric
    wz*dz^2 + wx*dx^2, by dense search plus bounded scalar refinement."""
    if span is None:
        span = 10.0 * max(abs(z), abs(x), act.delta if act.delta else 0.0, 1.0)
    best = None
    for a, c, lo, hi in locus_pieces(act):
        lo_c = max(lo, -span)
        hi_c = min(hi, span)
        t = np.linspace(lo_c, hi_c, n_dense)
        d = wz * (t - z) ** 2 + wx * (a * t + c - x) ** 2
        i = int(np.argmin(d))
        f = lambda s: wz * (s - z) ** 2 + wx * (a * s + c - x) ** 2
        a_lo = t[max(i - 1, 0)]
        a_hi = t[min(i + 1, n_dense - 1)]
        res = optimize.minimize_scalar(f, bounds=(a_lo, a_hi), method="bounded",
                                       options={"xatol": 1e-14})
        for tc in (res.x, t[i], lo_c, hi_c):
            cand = (f(tc), a * tc + c, tc)
            if best is None or cand[0] < best[0] - 1e-15 or \
                    (abs(cand[0] - best[0]) <= 1e-15 and cand[1] > best[1]):
                best = cand
    d2, xv, zv = best
    return zv, xv, d2


# ---------------------------------------------------------------------------
# generic constrained projections via SLSQP multi-start
# ---------------------------------------------------------------------------

def oracle_nonneg_norm(v, omega):
    """Projection onto {c >= 0, ||c|| = omega} by multi-start SLSQP."""
    v = np.asarray(v, dtype=float)
    d = v.size
    cons = [{"type": "eq", "fun": lambda c: c @ c - omega ** 2}]
    bounds = [(0.0, None)] * d
    starts = []
    vp = np.maximum(v, 0.0)
    if vp.any():
        starts.append(omega * vp / np.linalg.norm(vp))
    for i in np.argsort(-v)[:3]:
        e = np.zeros(d)
        e[i] = omega
        starts.append(e)
    starts.append(np.full(d, omega / np.sqrt(d)))
    best = None
    for c0 in starts:
        res = optimize.minimize(lambda c: np.sum((c - v) ** 2), c0,
                                method="SLSQP", bounds=bounds, constraints=cons,
                                options={"maxiter": 300, "ftol": 1e-18})
        c = np.maximum(res.x, 0.0)
        n = np.linalg.norm(c)
        if n == 0.0:
            continue
        c = omega * c / n
        val = np.sum((c - v) ** 2)
        if best is None or val < best[0]:
            best = (val, c)
    return best[1]


def oracle_class_project(y, b, correct, delta):
    """Projection onto the class margin constraints by SLSQP."""
    y = np.asarray(y, dtype=float)
    b = np.asarray(b, dtype=float)
    d = y.size

    def fun(v):
        return np.sum((v[:d] - y) ** 2) + np.sum((v[d:] - b) ** 2)

    cons = []
    for i in range(d):
        if i == correct:
            cons.append({"type": "ineq",
                         "fun": lambda v, i=i: (v[:d] - v[d:])[i] - delta})
        else:
            cons.append({"type": "ineq",
                         "fun": lambda v, i=i: -(v[:d] - v[d:])[i]})
    v0 = np.concatenate([y, b])
    res = optimize.minimize(fun, v0, method="SLSQP", constraints=cons,
                            options={"maxiter": 500, "ftol": 1e-18})
    return res.x[:d], res.x[d:]


def oracle_exemption_cost(dists, labels, exempt_set, relabel_to=None):
    """Total squared class-projection cost of a batch given an exempt set.

    dists is the (n_items, n_classes) matrix of per-choice costs.  In drop
    mode (relabel_to None) exempted items cost nothing; in relabel mode they
    cost their best-alternative distance.
    """
    n = dists.shape[0]
    total = 0.0
    for k in range(n):
        if k in exempt_set:
            if relabel_to is not None:
                total += dists[k, relabel_to[k]]
        else:
            total += dists[k, labels[k]]
    return total


def oracle_best_exempt_set(dists, labels, ee, relabel_to=None):
    """Exhaustive search over exempt sets of size <= ee (drop: exactly ee)."""
    n = dists.shape[0]
    sizes = [ee] if relabel_to is None else range(ee + 1)
    best = (np.inf, frozenset())
    for s in sizes:
        for comb in itertools.combinations(range(n), s):
            cost = oracle_exemption_cost(dists, labels, set(comb), relabel_to)
            if cost < best[0] - 1e-12:
                best = (cost, frozenset(comb))
    return best


def oracle_consensus_activation(values, y, b, g2, act):
    """Joint projection of replicated x values and (y, b) onto
    {x_r all equal to f(y' - b')}, minimizing
    sum_r (x_r' - x_r)^2 + g2*(dy^2 + db^2), one SLSQP per locus piece."""
    values = np.asarray(values, dtype=float)

    def fun(v):
        out, yv, bv = v
        return np.sum((out - values) ** 2) + g2 * ((yv - y) ** 2 + (bv - b) ** 2)

    best = None
    for a, c, lo, hi in locus_pieces(act):
        cons = [{"type": "eq", "fun": lambda v, a=a, c=c: v[0] - (a * (v[1] - v[2]) + c)}]
        if np.isfinite(lo):
            cons.append({"type": "ineq", "fun": lambda v, lo=lo: (v[1] - v[2]) - lo})
        if np.isfinite(hi):
            cons.append({"type": "ineq", "fun": lambda v, hi=hi: hi - (v[1] - v[2])})
        z0 = np.clip(values.mean(), lo if np.isfinite(lo) else -1e3,
                     hi if np.isfinite(hi) else 1e3)
        v0 = np.array([a * z0 + c, y + 0.5 * (z0 - (y - b)), b - 0.5 * (z0 - (y - b))])
        res = optimize.minimize(fun, v0, method="SLSQP", constraints=cons,
                                options={"maxiter": 500, "ftol": 1e-18})
        if not res.success and abs(cons[0]["fun"](res.x)) > 1e-8:
            continue
        val = fun(res.x)
        if best is None or val < best[0] - 1e-14:
            best = (val, res.x)
    return best[1]  # (x_out, y', b')


# ---------------------------------------------------------------------------
# random flats for the divide-and-concur geometry tests
# ---------------------------------------------------------------------------

def random_orthonormal(rng, d, cols):
    """d x cols matrix with orthonormal columns."""
    m = rng.standard_normal((d, max(cols, 1)))
    q, _ = np.linalg.qr(m)
    return q[:, :cols]


def random_flat_pair(rng, d, dim_c, dim_d, dim_y, dim_z, z_gap=0.0,
                     shift_scale=1.0):
    """Two random flats A = (C (+) Y) + s and B = (D (+) Y) + s + gap.

    C and D are random subspaces of the common part X orthogonal to Y and
    Z, so A and B intersect in the flat Y + s when z_gap = 0.  A nonzero
    z_gap displaces B along a unit vector of Z, which makes the pair
    infeasible by exactly that distance.  Returns a dict with the bases,
    the offsets, and the projection maps onto each flat.
    """
    assert dim_y + dim_z + max(dim_c, dim_d) <= d
    basis = random_orthonormal(rng, d, d)
    ny = basis[:, :dim_y]
    nz = basis[:, dim_y:dim_y + dim_z]
    rest = basis[:, dim_y + dim_z:]
    dr = rest.shape[1]
    cc = rest @ random_orthonormal(rng, dr, dim_c) if dim_c else np.zeros((d, 0))
    dd = rest @ random_orthonormal(rng, dr, dim_d) if dim_d else np.zeros((d, 0))
    # X is the span of C and D; leftover directions of `rest` act as extra
    # gap-free Z directions (iterate components there never move)
    if dim_c + dim_d:
        nx = np.linalg.qr(np.hstack([cc, dd]))[0][:, :dim_c + dim_d]
    else:
        nx = np.zeros((d, 0))
    s = shift_scale * rng.standard_normal(d)
    gap = z_gap * nz[:, 0] if z_gap else np.zeros(d)
    sa = s
    sb = s + gap
    pa_dir = cc @ cc.T + ny @ ny.T
    pb_dir = dd @ dd.T + ny @ ny.T
    return {
        "C": cc, "D": dd, "Y": ny, "Z": nz, "X": nx,
        "offset": s, "gap": gap, "offset_a": sa, "offset_b": sb,
        "proj_a": lambda v: sa + pa_dir @ (v - sa),
        "proj_b": lambda v: sb + pb_dir @ (v - sb),
    }
