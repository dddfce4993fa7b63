"""Set-valued maps as records of closures, plus a catalog of test maps.

A SetValuedMap bundles membership, image/preimage distances, a deterministic
graph sampler, and optional analytic oracles (coderivative, graph normals,
feature points). Constructors build these records for function graphs,
linear maps, and the structured maps used throughout: the reciprocal
interval map, the complementarity angle, and oscillating graphs.

Feature points deserve a word. Uniform annulus sampling provably misses
measure-zero qualifying sets (the sin/cos zero fibers of x sin(1/x) occupy
an O(r) fraction of each annulus), so structured maps enumerate those fibers
deterministically. Features are graph points only; every derived quantity is
still computed from the map's own oracles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .geometry import (
    NormContext,
    derive_seed,
    dual_sphere_grid,
    norm,
    r2_lattice,
    sample_annulus,
)

__all__ = [
    "GraphPoint",
    "SetValuedMap",
    "CatalogEntry",
    "make_function_graph",
    "make_linear_map",
    "make_identity",
    "make_zero_map",
    "make_scale_map",
    "make_square",
    "make_abs",
    "make_xsin",
    "make_oscillating",
    "make_spiral",
    "make_interval_map",
    "make_complementarity_angle",
    "sum_with_function",
    "inverse",
    "catalog",
    "resolve_map_spec",
    "preimage_distance_fallback",
]


@dataclass
class GraphPoint:
    """A point (x, y) of the graph of a set-valued map."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_1d(np.asarray(self.x, dtype=float))
        self.y = np.atleast_1d(np.asarray(self.y, dtype=float))


@dataclass
class SetValuedMap:
    """Record of closures describing F: R^dim_x => R^dim_y.

    membership(x, y, tol) decides y in F(x); image_distance(x, y) returns
    d(y, F(x)) (inf when F(x) is empty); preimage_distance(x, y) returns
    d(x, F^{-1}(y)) or may be None, in which case callers fall back to
    preimage_distance_fallback. sample_graph(center, r_inner, r_outer, n,
    seed) returns graph points whose x lies in the annulus around center.x
    (maps with vertical structure also return same-x points with y in the
    annulus around center.y).

    analytic_coderivative(x, y, y_star) returns the list of x* with
    (x*, -y*) normal to the graph at (x, y); an empty list means the
    coderivative is empty there (e.g. a constant set-valued map with
    y* != 0), None means no oracle information at that point.
    analytic_normals(x, y, m) returns representative (x*, y*) pairs without
    the unit-y* restriction, so purely horizontal normals (y* = 0) are
    expressible. feature_points(base_x, r_inner, r_outer, cap) enumerates
    structural graph points per annulus.
    """

    dim_x: int
    dim_y: int
    membership: Callable
    image_distance: Callable
    sample_graph: Callable
    preimage_distance: Callable | None = None
    analytic_coderivative: Callable | None = None
    analytic_normals: Callable | None = None
    feature_points: Callable | None = None
    func: Callable | None = None
    grad: Callable | None = None
    closed_graph: bool = True
    name: str = "map"
    kind: str = "l1"

    @property
    def single_valued(self) -> bool:
        return self.func is not None


# ---------------------------------------------------------------------------
# function graphs


def make_function_graph(
    f: Callable,
    grad: Callable | None = None,
    dim_x: int = 1,
    dim_y: int = 1,
    kind: str = "l1",
    name: str = "function",
    preimage: Callable | None = None,
    features: Callable | None = None,
) -> SetValuedMap:
    """Wrap a single-valued function as a set-valued map via its graph.

    grad(x) returns the Jacobian as a (dim_y, dim_x) array, or None where f
    is not differentiable; the analytic oracles skip such points.
    """

    def fv(x):
        return np.atleast_1d(np.asarray(f(np.atleast_1d(np.asarray(x, dtype=float))), dtype=float))

    def gv(x):
        if grad is None:
            return None
        g = grad(np.atleast_1d(np.asarray(x, dtype=float)))
        if g is None:
            return None
        return np.atleast_2d(np.asarray(g, dtype=float))

    def membership(x, y, tol=1e-9):
        return norm(np.atleast_1d(y) - fv(x), kind) <= tol

    def image_distance(x, y):
        return norm(np.atleast_1d(y) - fv(x), kind)

    def sample(center: GraphPoint, r_inner, r_outer, n, seed):
        xs = sample_annulus(center.x, r_inner, r_outer, n, seed, kind)
        return [GraphPoint(x, fv(x)) for x in xs]

    def coderivative(x, y, y_star):
        g = gv(x)
        if g is None:
            return None
        return [g.T @ np.atleast_1d(y_star)]

    def normals(x, y, m=8):
        g = gv(x)
        if g is None:
            return None
        out = []
        for eta in dual_sphere_grid(kind, dim_y, m):
            out.append((g.T @ eta, eta))
        return out

    return SetValuedMap(
        dim_x=dim_x,
        dim_y=dim_y,
        membership=membership,
        image_distance=image_distance,
        preimage_distance=preimage,
        sample_graph=sample,
        analytic_coderivative=coderivative,
        analytic_normals=normals,
        feature_points=features,
        func=fv,
        grad=gv,
        name=name,
        kind=kind,
    )


def make_linear_map(A, kind: str = "l1", name: str | None = None) -> SetValuedMap:
    """F(x) = {Ax} with closed-form preimage distances."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    dy, dx = A.shape

    def preimage(x, y):
        x = np.atleast_1d(x)
        y = np.atleast_1d(y)
        try:
            z = np.linalg.solve(A, y) if dy == dx else None
        except np.linalg.LinAlgError:
            z = None
        if z is None:
            z, *_ = np.linalg.lstsq(A, y, rcond=None)
            if norm(A @ z - y, kind) > 1e-9 * max(1.0, norm(y, kind)):
                return math.inf
        return norm(x - z, kind)

    m = make_function_graph(
        lambda x: A @ x,
        grad=lambda x: A,
        dim_x=dx,
        dim_y=dy,
        kind=kind,
        name=name or "linear",
        preimage=preimage,
    )
    return m


def make_identity(dim: int = 1, kind: str = "l1") -> SetValuedMap:
    return make_linear_map(np.eye(dim), kind=kind, name="identity")


def make_zero_map(dim_x: int = 1, dim_y: int = 1, kind: str = "l1") -> SetValuedMap:
    def preimage(x, y):
        if norm(y, kind) == 0.0:
            return 0.0
        return math.inf

    return make_function_graph(
        lambda x: np.zeros(dim_y),
        grad=lambda x: np.zeros((dim_y, dim_x)),
        dim_x=dim_x,
        dim_y=dim_y,
        kind=kind,
        name="zero",
        preimage=preimage,
    )


def make_scale_map(lam: float = 2.0, kind: str = "l1") -> SetValuedMap:
    return make_linear_map([[float(lam)]], kind=kind, name=f"scale({lam:g})")


def make_square(kind: str = "l1") -> SetValuedMap:
    def preimage(x, y):
        yv = float(np.atleast_1d(y)[0])
        xv = float(np.atleast_1d(x)[0])
        if yv < -1e-15:
            return math.inf
        r = math.sqrt(max(yv, 0.0))
        return min(abs(xv - r), abs(xv + r))

    return make_function_graph(
        lambda x: x * x,
        grad=lambda x: [[2.0 * float(x[0])]],
        kind=kind,
        name="square",
        preimage=preimage,
    )


def make_abs(kind: str = "l1") -> SetValuedMap:
    def grad(x):
        xv = float(x[0])
        if xv == 0.0:
            return None
        return [[1.0 if xv > 0 else -1.0]]

    def preimage(x, y):
        yv = float(np.atleast_1d(y)[0])
        xv = float(np.atleast_1d(x)[0])
        if yv < -1e-15:
            return math.inf
        return min(abs(xv - yv), abs(xv + yv))

    return make_function_graph(
        lambda x: np.abs(x), grad=grad, kind=kind, name="abs", preimage=preimage
    )


def _stride_indices(count: int, cap: int) -> list[int]:
    """Deterministic selection of at most cap indices from range(count)."""
    if count <= cap:
        return list(range(count))
    pos = np.linspace(0, count - 1, cap)
    out = sorted({int(round(p)) for p in pos})
    return out


def make_xsin(kind: str = "l1") -> SetValuedMap:
    """Graph of f(x) = x sin(1/x), f(0) = 0.

    The derivative sin(1/x) - cos(1/x)/x is unbounded near 0; the feature
    oracle enumerates three fiber families per annulus: sin zeros
    (x = 1/(k pi)), cos zeros, and the fixed points of tan u = u, each
    refined by Newton steps to machine accuracy.
    """

    def f(x):
        xv = float(x[0])
        if xv == 0.0:
            return np.array([0.0])
        return np.array([xv * math.sin(1.0 / xv)])

    def grad(x):
        xv = float(x[0])
        if xv == 0.0:
            return None
        u = 1.0 / xv
        return [[math.sin(u) - u * math.cos(u)]]

    def features(base_x, r_inner, r_outer, cap=24):
        bx = float(np.atleast_1d(base_x)[0])
        pts: list[GraphPoint] = []
        if abs(bx) > 1e-12 or r_inner <= 0:
            return pts
        u_lo, u_hi = 1.0 / r_outer, 1.0 / r_inner
        per = max(2, cap // 6)
        # keep k implicit: at fine scales the index range has ~1/r_inner
        # members and must never be materialized
        k_lo = max(1, int(math.ceil(u_lo / math.pi)))
        k_hi = int(math.floor(u_hi / math.pi))
        n_k = max(0, k_hi - k_lo + 1)
        for sign in (1.0, -1.0):
            # sin zeros: u = k pi exactly
            for i in _stride_indices(n_k, per):
                x = sign / ((k_lo + i) * math.pi)
                pts.append(GraphPoint(np.array([x]), f(np.array([x]))))
            # cos zeros: Newton on cos from u0 = (k + 1/2) pi
            for i in _stride_indices(n_k, per):
                u = (k_lo + i + 0.5) * math.pi
                for _ in range(2):
                    u = u + math.cos(u) / math.sin(u)
                if u_lo <= u <= u_hi:
                    x = sign / u
                    pts.append(GraphPoint(np.array([x]), f(np.array([x]))))
            # tan u = u fixed points: Newton on sin u - u cos u
            for i in _stride_indices(n_k, per):
                u = (k_lo + i + 0.5) * math.pi
                u = u - 1.0 / u
                for _ in range(3):
                    h = math.sin(u) - u * math.cos(u)
                    dh = u * math.sin(u)
                    if dh != 0.0:
                        u = u - h / dh
                if u_lo <= u <= u_hi:
                    x = sign / u
                    pts.append(GraphPoint(np.array([x]), f(np.array([x]))))
        return pts

    return make_function_graph(f, grad=grad, kind=kind, name="xsin", features=features)


def make_oscillating(kind: str = "l1") -> SetValuedMap:
    """Graph of f(x) = x sin(ln |x|), f(0) = 0.

    Log-periodic: every modulus of this map oscillates with period pi in
    ln x, which makes it the package's standing counterexample to the
    semismoothness test (the defect does not decay with scale).
    """

    def f(x):
        xv = float(x[0])
        if xv == 0.0:
            return np.array([0.0])
        return np.array([xv * math.sin(math.log(abs(xv)))])

    def grad(x):
        xv = float(x[0])
        if xv == 0.0:
            return None
        th = math.log(abs(xv))
        return [[math.sin(th) + math.cos(th)]]

    theta_min = math.atan(-0.5)  # argmin of max(|sin|, |sin + cos|)

    def features(base_x, r_inner, r_outer, cap=24):
        bx = float(np.atleast_1d(base_x)[0])
        pts: list[GraphPoint] = []
        if abs(bx) > 1e-12 or r_inner <= 0:
            return pts
        lo, hi = math.log(r_inner), math.log(r_outer)
        per = max(2, cap // 6)
        for sign in (1.0, -1.0):
            for off in (theta_min, 0.0, math.pi / 2.0):
                ms = range(int(math.ceil((lo - off) / math.pi)), int(math.floor((hi - off) / math.pi)) + 1)
                ms = list(ms)
                for i in _stride_indices(len(ms), per):
                    x = sign * math.exp(off + ms[i] * math.pi)
                    pts.append(GraphPoint(np.array([x]), f(np.array([x]))))
        return pts

    return make_function_graph(f, grad=grad, kind=kind, name="oscillating", features=features)


def make_spiral(kind: str = "l2") -> SetValuedMap:
    """Complex squaring z -> z^2 on R^2; smooth with rotating derivative.

    Its witness directions never stabilize, which exercises the
    distinct-direction (cone) branch of the perturbation builders.
    """

    def f(x):
        a, b = float(x[0]), float(x[1])
        return np.array([a * a - b * b, 2.0 * a * b])

    def grad(x):
        a, b = float(x[0]), float(x[1])
        return [[2.0 * a, -2.0 * b], [2.0 * b, 2.0 * a]]

    def preimage(x, y):
        w = complex(float(np.atleast_1d(y)[0]), float(np.atleast_1d(y)[1]))
        r = np.sqrt(w) if w != 0 else 0.0 + 0.0j
        cands = [np.array([r.real, r.imag]), np.array([-r.real, -r.imag])]
        return min(norm(np.atleast_1d(x) - c, kind) for c in cands)

    return make_function_graph(
        f, grad=grad, dim_x=2, dim_y=2, kind=kind, name="spiral", preimage=preimage
    )


# ---------------------------------------------------------------------------
# structured set-valued maps


def make_interval_map(kind: str = "l1", recip_tol: float = 1e-9) -> SetValuedMap:
    """F(x) = [-x, x] when x = 1/k for an integer k >= 1, else {x}.

    Reciprocal detection accepts x > 0 with |1/x - round(1/x)| <=
    recip_tol * (1/x)^2, i.e. an absolute x-window of about recip_tol around
    each 1/k. That is unambiguous while the windows stay separated, which
    holds for x above roughly sqrt(2 * recip_tol); the catalog ladders stay
    well inside that range.
    """

    def recip_k(xv: float) -> int:
        if xv <= 0.0:
            return 0
        q = 1.0 / xv
        k = round(q)
        if k >= 1 and abs(q - k) <= recip_tol * q * q:
            return int(k)
        return 0

    def membership(x, y, tol=1e-9):
        xv = float(np.atleast_1d(x)[0])
        yv = float(np.atleast_1d(y)[0])
        if recip_k(xv):
            return -xv - tol <= yv <= xv + tol
        return abs(yv - xv) <= tol

    def image_distance(x, y):
        xv = float(np.atleast_1d(x)[0])
        yv = float(np.atleast_1d(y)[0])
        if recip_k(xv):
            return max(0.0, abs(yv) - xv)
        return abs(yv - xv)

    def preimage_distance(x, y):
        xv = float(np.atleast_1d(x)[0])
        yv = float(np.atleast_1d(y)[0])
        best = abs(xv - yv)  # the diagonal point y itself
        ay = abs(yv)
        if ay <= 1.0 + 1e-15:
            k_max = int(math.floor(1.0 / ay)) if ay > 1e-300 else 10**15
            if k_max >= 1:
                cands = {k_max}
                if xv > 0:
                    kc = int(round(1.0 / xv))
                    for k in (kc - 1, kc, kc + 1):
                        if 1 <= k <= k_max:
                            cands.add(k)
                for k in cands:
                    best = min(best, abs(xv - 1.0 / k))
        return best

    def sample(center: GraphPoint, r_inner, r_outer, n, seed):
        cx = float(center.x[0])
        cy = float(center.y[0])
        pts = []
        for x in sample_annulus(center.x, r_inner, r_outer, max(2, n // 2), seed, kind):
            pts.append(GraphPoint(x, x.copy()))
        # vertical fibers whose foot lies in the x-annulus
        for lo, hi in ((cx + r_inner, cx + r_outer), (cx - r_outer, cx - r_inner)):
            a, b = max(lo, 1e-300), hi
            if b <= a:
                continue
            k_lo = int(math.ceil(1.0 / b))
            k_hi = int(math.floor(1.0 / a)) if 1.0 / a < 1e15 else k_lo + 64
            ks = [k for k in range(k_lo, min(k_hi, k_lo + 512) + 1) if k >= 1]
            u = r2_lattice(4 * max(1, len(ks)), 1, derive_seed(seed, 7))
            for i in _stride_indices(len(ks), 12):
                k = ks[i]
                xk = 1.0 / k
                for yv in (0.0, xk, -xk, 0.5 * xk, -0.5 * xk):
                    pts.append(GraphPoint(np.array([xk]), np.array([yv])))
                for j in range(3):
                    yv = (2.0 * float(u[3 * i % len(u), 0] + 0.31 * j) % 2.0 - 1.0) * xk
                    pts.append(GraphPoint(np.array([xk]), np.array([yv])))
        # same-x fiber around a vertical center
        kc = recip_k(cx)
        if kc:
            xk = 1.0 / kc if abs(cx * kc - 1.0) < 1e-12 else cx
            u = r2_lattice(8, 1, derive_seed(seed, 11))
            for j in range(8):
                yv = cy + (r_outer - (r_outer - r_inner) * float(u[j, 0])) * (1 if j % 2 else -1)
                if -xk <= yv <= xk:
                    pts.append(GraphPoint(np.array([cx]), np.array([yv])))
        return pts

    def features(base_x, r_inner, r_outer, cap=24):
        bx = float(np.atleast_1d(base_x)[0])
        pts = []
        if abs(bx) > 1e-12:
            return pts
        a, b = max(r_inner, 1e-300), r_outer
        # implicit index range: at fine scales floor(1/a) is astronomically
        # large and must never be turned into a list
        k_lo = max(1, int(math.ceil(1.0 / b)))
        k_hi = int(math.floor(min(1.0 / a, 1e18)))
        n_k = max(0, k_hi - k_lo + 1)
        for i in _stride_indices(n_k, max(2, cap // 3)):
            xk = 1.0 / (k_lo + i)
            if not (a < xk <= b):
                continue
            for yv in (0.0, xk, -xk):
                pts.append(GraphPoint(np.array([xk]), np.array([yv])))
        return pts

    def coderivative(x, y, y_star):
        xv = float(np.atleast_1d(x)[0])
        yv = float(np.atleast_1d(y)[0])
        ys = float(np.atleast_1d(y_star)[0])
        k = recip_k(xv)
        if not k:
            return [np.atleast_1d(y_star).astype(float)]
        xk = xv
        if abs(abs(yv) - xk) <= 1e-12 * max(1.0, xk):
            # corner of the vertical segment
            if yv > 0:  # top: normals {(-s, s): s >= 0}, i.e. x* = y* for y* <= 0
                return [np.array([ys])] if ys < 0 else []
            if yv < 0:  # bottom: x* = y* for y* >= 0
                return [np.array([ys])] if ys > 0 else []
            # xk == |yv| == 0 cannot happen (xk > 0)
        if abs(yv) < xk:
            # interior of the fiber: only horizontal normals, so the
            # coderivative at any y* != 0 is empty
            return [] if ys != 0.0 else None
        return [np.atleast_1d(y_star).astype(float)]

    def normals(x, y, m=8):
        xv = float(np.atleast_1d(x)[0])
        yv = float(np.atleast_1d(y)[0])
        k = recip_k(xv)
        if not k:
            return [(np.array([1.0]), np.array([1.0])), (np.array([-1.0]), np.array([-1.0]))]
        if abs(abs(yv) - xv) <= 1e-12 * max(1.0, xv):
            s = -1.0 if yv > 0 else 1.0
            return [(np.array([s]), np.array([s]))]
        return [(np.array([1.0]), np.array([0.0])), (np.array([-1.0]), np.array([0.0]))]

    return SetValuedMap(
        dim_x=1,
        dim_y=1,
        membership=membership,
        image_distance=image_distance,
        preimage_distance=preimage_distance,
        sample_graph=sample,
        analytic_coderivative=coderivative,
        analytic_normals=normals,
        feature_points=features,
        name="interval",
        kind=kind,
    )


def make_complementarity_angle(kind: str = "l1") -> SetValuedMap:
    """The complementarity angle {x >= 0, y >= 0, xy = 0} read as a map R => R.

    F(x) = {0} for x > 0, [0, inf) at x = 0, empty for x < 0.
    """

    def membership(x, y, tol=1e-9):
        xv = float(np.atleast_1d(x)[0])
        yv = float(np.atleast_1d(y)[0])
        return (xv >= -tol and abs(yv) <= tol) or (abs(xv) <= tol and yv >= -tol)

    def image_distance(x, y):
        xv = float(np.atleast_1d(x)[0])
        yv = float(np.atleast_1d(y)[0])
        if xv > 0.0:
            return abs(yv)
        if xv == 0.0:
            return max(0.0, -yv)
        return math.inf

    def preimage_distance(x, y):
        xv = float(np.atleast_1d(x)[0])
        yv = float(np.atleast_1d(y)[0])
        if yv > 0.0:
            return abs(xv)
        if yv == 0.0:
            return max(0.0, -xv)
        return math.inf

    def sample(center: GraphPoint, r_inner, r_outer, n, seed):
        cx = float(center.x[0])
        cy = float(center.y[0])
        pts = []
        for x in sample_annulus(center.x, r_inner, r_outer, max(2, n // 2), seed, kind):
            if float(x[0]) > 0.0:
                pts.append(GraphPoint(x, np.array([0.0])))
        if abs(cx) <= r_outer:
            u = r2_lattice(max(2, n // 2), 1, derive_seed(seed, 3))
            for j in range(len(u)):
                s = cy + (r_outer - (r_outer - r_inner) * float(u[j, 0])) * (1 if j % 2 else -1)
                if s >= 0.0:
                    pts.append(GraphPoint(np.array([0.0]), np.array([s])))
        return pts

    def coderivative(x, y, y_star):
        xv = float(np.atleast_1d(x)[0])
        yv = float(np.atleast_1d(y)[0])
        ys = float(np.atleast_1d(y_star)[0])
        if xv > 0.0 and abs(yv) <= 1e-15:
            return [np.array([0.0])]
        if abs(xv) <= 1e-15 and yv > 0.0:
            return [] if ys != 0.0 else None
        return None  # the origin's normal cone is not enumerable per y*

    def normals(x, y, m=8):
        xv = float(np.atleast_1d(x)[0])
        yv = float(np.atleast_1d(y)[0])
        if xv > 0.0 and abs(yv) <= 1e-15:
            return [(np.array([0.0]), np.array([1.0])), (np.array([0.0]), np.array([-1.0]))]
        if abs(xv) <= 1e-15 and yv > 0.0:
            return [(np.array([1.0]), np.array([0.0])), (np.array([-1.0]), np.array([0.0]))]
        # origin: polar cone of the angle itself
        return [
            (np.array([-1.0]), np.array([0.0])),
            (np.array([0.0]), np.array([1.0])),
            (np.array([-1.0]), np.array([1.0])),
        ]

    return SetValuedMap(
        dim_x=1,
        dim_y=1,
        membership=membership,
        image_distance=image_distance,
        preimage_distance=preimage_distance,
        sample_graph=sample,
        analytic_coderivative=coderivative,
        analytic_normals=normals,
        name="compl_angle",
        kind=kind,
    )


# ---------------------------------------------------------------------------
# combinators


def sum_with_function(F: SetValuedMap, f, grad=None, name: str | None = None,
                      anchors: list[GraphPoint] | None = None) -> SetValuedMap:
    """The map x -> F(x) + f(x) for a single-valued f.

    f may be a callable or a perturbation object carrying .eval and
    .derivative; coderivative oracles are shifted by the gradient of f at
    points where it exists (the shift is exact there). anchors are extra
    graph points injected into the sampler, used to keep constructed
    witness points visible to the estimators.
    """
    if hasattr(f, "eval") and callable(getattr(f, "eval")):
        fe = f.eval
        gr = getattr(f, "derivative", None)
        if anchors is None and getattr(f, "anchors", None) is not None:
            anchors = [GraphPoint(a, b) for a, b in f.anchors]
    else:
        fe, gr = f, grad

    def fv(x):
        return np.atleast_1d(np.asarray(fe(np.atleast_1d(np.asarray(x, dtype=float))), dtype=float))

    def gv(x):
        if gr is None:
            return None
        g = gr(np.atleast_1d(np.asarray(x, dtype=float)))
        if g is None:
            return None
        return np.atleast_2d(np.asarray(g, dtype=float))

    anchor_pts = list(anchors or [])

    def membership(x, y, tol=1e-9):
        return F.membership(x, np.atleast_1d(y) - fv(x), tol)

    def image_distance(x, y):
        return F.image_distance(x, np.atleast_1d(y) - fv(x))

    def sample(center: GraphPoint, r_inner, r_outer, n, seed):
        inner_center = GraphPoint(center.x, center.y - fv(center.x))
        pts = [GraphPoint(p.x, p.y + fv(p.x)) for p in F.sample_graph(inner_center, r_inner, r_outer, n, seed)]
        for a in anchor_pts:
            t = norm(a.x - center.x, F.kind)
            if r_inner < t <= r_outer:
                pts.append(GraphPoint(a.x.copy(), a.y.copy()))
        return pts

    def coderivative(x, y, y_star):
        if F.analytic_coderivative is None:
            return None
        g = gv(x)
        if g is None:
            return None
        base = F.analytic_coderivative(x, np.atleast_1d(y) - fv(x), y_star)
        if base is None:
            return None
        return [b + g.T @ np.atleast_1d(y_star) for b in base]

    def normals(x, y, m=8):
        if F.analytic_normals is None:
            return None
        g = gv(x)
        if g is None:
            return None
        base = F.analytic_normals(x, np.atleast_1d(y) - fv(x), m)
        if base is None:
            return None
        return [(xs + g.T @ ys, ys) for xs, ys in base]

    def features(base_x, r_inner, r_outer, cap=24):
        pts = []
        if F.feature_points is not None:
            for p in F.feature_points(base_x, r_inner, r_outer, cap):
                pts.append(GraphPoint(p.x, p.y + fv(p.x)))
        return pts

    def func(x):
        return F.func(x) + fv(x) if F.func is not None else None

    def grad_total(x):
        if F.grad is None:
            return None
        a = F.grad(x)
        b = gv(x)
        if a is None or b is None:
            return None
        return a + b

    return SetValuedMap(
        dim_x=F.dim_x,
        dim_y=F.dim_y,
        membership=membership,
        image_distance=image_distance,
        preimage_distance=None,
        sample_graph=sample,
        analytic_coderivative=coderivative,
        analytic_normals=normals,
        feature_points=features if F.feature_points is not None else None,
        func=func if F.func is not None else None,
        grad=grad_total if F.grad is not None else None,
        name=name or f"{F.name}+perturbation",
        kind=F.kind,
    )


def inverse(F: SetValuedMap, name: str | None = None) -> SetValuedMap:
    """The inverse map, with image/preimage distances swapped exactly.

    The sampler reuses F's sampler over a spread of shells and filters to
    the requested annulus in the swapped coordinate, so annuli fill only
    approximately for strongly nonlinear maps.
    """

    def membership(u, v, tol=1e-9):
        return F.membership(v, u, tol)

    def image_distance(u, v):
        if F.preimage_distance is not None:
            return F.preimage_distance(v, u)
        return preimage_distance_fallback(F, v, u)

    def preimage_distance(u, v):
        return F.image_distance(v, u)

    def sample(center: GraphPoint, r_inner, r_outer, n, seed):
        inner_center = GraphPoint(center.y, center.x)
        pts = []
        shells = [(r_inner, r_outer), (r_inner * 0.25, r_outer), (r_inner, r_outer * 4.0),
                  (r_inner * 0.0625, r_outer * 2.0)]
        for i, (a, b) in enumerate(shells):
            for p in F.sample_graph(inner_center, a, b, n // 2, derive_seed(seed, i)):
                t = norm(p.y - center.x, F.kind)
                if r_inner < t <= r_outer:
                    pts.append(GraphPoint(p.y, p.x))
            if len(pts) >= n:
                break
        return pts[: 2 * n]

    def coderivative(u, v, v_star):
        return None  # enumeration via normals below

    def normals(u, v, m=8):
        if F.analytic_normals is None:
            return None
        base = F.analytic_normals(v, u, m)
        if base is None:
            return None
        # (x*, -y*) normal at (x, y) becomes (-y*, x*) normal at (y, x);
        # in coderivative pairs: (a, b) -> (-b, -a)
        return [(-ys, -xs) for xs, ys in base]

    return SetValuedMap(
        dim_x=F.dim_y,
        dim_y=F.dim_x,
        membership=membership,
        image_distance=image_distance,
        preimage_distance=preimage_distance,
        sample_graph=sample,
        analytic_coderivative=coderivative,
        analytic_normals=normals,
        name=name or f"inv({F.name})",
        kind=F.kind,
    )


def _nearest_root_1d(g, xv: float, r0: float, n_grid: int,
                     max_doublings: int, tol: float) -> float:
    """Distance from xv to the nearest zero of a scalar g, or inf.

    Scans a grid of doubling width for sign changes (bisected to machine
    accuracy) and for interior minima of |g| (golden-section refined, which
    catches even-order touches like z**2). Once a root is found the grid is
    re-centered on the remaining interval so a closer crossing between two
    same-sign grid points is not missed.
    """
    invphi = (math.sqrt(5.0) - 1.0) / 2.0

    def scan(half_width: float) -> float:
        grid = np.linspace(xv - half_width, xv + half_width, n_grid)
        vals = [g(z) for z in grid]
        found = math.inf
        for j in range(len(grid) - 1):
            z0, z1, g0, g1 = grid[j], grid[j + 1], vals[j], vals[j + 1]
            if g0 == 0.0:
                found = min(found, abs(xv - z0))
                continue
            if g0 * g1 < 0.0:
                lo, hi, glo = z0, z1, g0
                for _ in range(80):
                    mid = 0.5 * (lo + hi)
                    gm = g(mid)
                    if gm == 0.0 or (glo < 0.0) == (gm < 0.0):
                        lo, glo = mid, gm
                    else:
                        hi = mid
                found = min(found, abs(xv - 0.5 * (lo + hi)))
        if vals and vals[-1] == 0.0:
            found = min(found, abs(xv - grid[-1]))
        for j in range(1, len(grid) - 1):
            if abs(vals[j]) < abs(vals[j - 1]) and abs(vals[j]) <= abs(vals[j + 1]):
                a, b = grid[j - 1], grid[j + 1]
                c = b - invphi * (b - a)
                d = a + invphi * (b - a)
                gc, gd = abs(g(c)), abs(g(d))
                for _ in range(90):
                    if gc < gd:
                        b, d, gd = d, c, gc
                        c = b - invphi * (b - a)
                        gc = abs(g(c))
                    else:
                        a, c, gc = c, d, gd
                        d = a + invphi * (b - a)
                        gd = abs(g(d))
                zm = 0.5 * (a + b)
                if abs(g(zm)) <= tol:
                    found = min(found, abs(xv - zm))
        return found

    r = r0
    for _ in range(max_doublings):
        best = scan(r)
        if best < math.inf:
            for _ in range(3):
                closer = scan(best)
                if closer < best * (1.0 - 1e-9):
                    best = closer
                else:
                    break
            return best
        r *= 2.0
    return math.inf


def preimage_distance_fallback(F: SetValuedMap, x, y, n_starts: int = 48,
                               seed: int = 0x9E11, max_doublings: int = 8) -> float:
    """d(x, F^{-1}(y)) without an analytic preimage oracle.

    Scalar function graphs get a grid scan with sign-change bisection and
    golden-section touch refinement; the crossings of f - y are exactly the
    fiber, so accumulating fibers (reciprocal zero families and the like)
    are resolved to machine accuracy. Everything else falls back to seeded
    multi-start acceptance: lattice starts on balls of doubling radius
    around x, near-zero residuals bisected toward x. Returns inf when no
    approximate preimage point is found.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    tol = 1e-10 * max(1.0, norm(y, F.kind))
    if F.image_distance(x, y) <= tol:
        return 0.0
    r = max(1e-8, 0.25 * max(norm(x, F.kind), 1e-6))
    if F.func is not None and F.dim_x == 1 and F.dim_y == 1:
        xv = float(x[0])
        yv = float(y[0])

        def residual(z: float) -> float:
            return float(F.func(np.array([z]))[0]) - yv

        return _nearest_root_1d(residual, xv, r, max(n_starts, 16),
                                max_doublings, tol)
    best = math.inf
    for i in range(max_doublings):
        starts = sample_annulus(x, 0.0, r, n_starts, derive_seed(seed, i), F.kind)
        for z in starts:
            d = F.image_distance(z, y)
            if d <= tol:
                # bisect toward x while staying in the preimage
                lo, hi = z, x
                for _ in range(60):
                    mid = 0.5 * (lo + hi)
                    if F.image_distance(mid, y) <= tol:
                        lo = mid
                    else:
                        hi = mid
                best = min(best, norm(x - lo, F.kind))
        if best < math.inf:
            return best
        r *= 2.0
    return best


# ---------------------------------------------------------------------------
# catalog


@dataclass
class CatalogEntry:
    """A named map with its base point, known values, and ladder hint."""

    id: str
    factory: Callable
    dim_x: int
    dim_y: int
    base_x: np.ndarray
    base_y: np.ndarray
    known: dict = field(default_factory=dict)
    ladder_hint: dict = field(default_factory=dict)
    notes: str = ""
    combinator: dict | None = None

    def make(self, kind: str = "l1", params: dict | None = None) -> SetValuedMap:
        return self.factory(kind=kind, **(params or {}))


def _known(**kv):
    out = {}
    for name, (value, prov) in kv.items():
        out[name] = {"value": value, "provenance": prov}
    return out


def catalog() -> dict[str, CatalogEntry]:
    """Registry of the built-in test maps with closed-form reference values."""
    z1 = np.zeros(1)
    z2 = np.zeros(2)
    entries = [
        CatalogEntry(
            id="identity", factory=lambda kind, dim=1: make_identity(dim, kind),
            dim_x=1, dim_y=1, base_x=z1, base_y=z1,
            known=_known(
                rg=(1.0, "closed form"), srg=(1.0, "closed form"), ssrg=(1.0, "closed form"),
                srg1=(1.0, "closed form"), srg2=(1.0, "closed form"), srg4=(1.0, "closed form"),
                srg1p=(2.0, "sum of unit ratio and unit dual norm"),
                clm=(1.0, "closed form"), lip=(1.0, "closed form"),
            ),
        ),
        CatalogEntry(
            id="zero", factory=lambda kind: make_zero_map(kind=kind),
            dim_x=1, dim_y=1, base_x=z1, base_y=z1,
            known=_known(
                srg=(math.inf, "empty quotient set: every point is in the preimage"),
                srg1=(0.0, "all elements vanish"), srg1p=(0.0, "all elements vanish"),
                srg2=(0.0, "all elements vanish"), rg=(0.0, "closed form"),
                clm=(0.0, "closed form"), lip=(0.0, "closed form"),
            ),
        ),
        CatalogEntry(
            id="scale", factory=lambda kind, lam=2.0: make_scale_map(lam, kind),
            dim_x=1, dim_y=1, base_x=z1, base_y=z1,
            known=_known(
                rg=(2.0, "closed form at lam=2"), srg=(2.0, "closed form at lam=2"),
                srg1=(2.0, "closed form at lam=2"), srg1p=(4.0, "closed form at lam=2"),
                clm=(2.0, "closed form at lam=2"), lip=(2.0, "closed form at lam=2"),
            ),
        ),
        CatalogEntry(
            id="linear", factory=lambda kind, matrix=((2.0, 0.0), (0.0, 0.5)): make_linear_map(matrix, kind),
            dim_x=2, dim_y=2, base_x=z2, base_y=z2,
            known=_known(rg=(0.5, "smallest singular value, l2 norms")),
            ladder_hint={"samples_per_scale": 768},
            notes="reference values assume the default matrix and l2 norms",
        ),
        CatalogEntry(
            id="square", factory=lambda kind: make_square(kind),
            dim_x=1, dim_y=1, base_x=z1, base_y=z1,
            known=_known(
                srg1=(0.0, "derivative vanishes at the base"), srg2=(0.0, "derivative vanishes at the base"),
                clm=(0.0, "closed form"), ssrg=(0.0, "quotient |x| -> 0"),
            ),
        ),
        CatalogEntry(
            id="abs", factory=lambda kind: make_abs(kind),
            dim_x=1, dim_y=1, base_x=z1, base_y=z1,
            known=_known(
                clm=(1.0, "closed form"), lip=(1.0, "closed form"), srg=(1.0, "closed form"),
                ssrg=(1.0, "closed form"), srg1=(1.0, "unit slopes on both sides"),
                srg1p=(2.0, "unit ratio plus unit dual norm"),
            ),
        ),
        CatalogEntry(
            id="xsin", factory=lambda kind: make_xsin(kind),
            dim_x=1, dim_y=1, base_x=z1, base_y=z1,
            known=_known(
                clm=(1.0, "sup |sin(1/x)| = 1"),
                srg2=(0.0, "ratio vanishes along x = 1/(k pi)"),
                srg4=(1.0, "ratio 1 along the cos zeros, defect filter removes the sin zeros"),
                srg4p=(1.0, "coincides with srg4 on exact element pools"),
                srg1=(1.0, "approached along the tan fixed points"),
            ),
        ),
        CatalogEntry(
            id="interval", factory=lambda kind: make_interval_map(kind),
            dim_x=1, dim_y=1, base_x=z1, base_y=z1,
            known=_known(
                srg2=(1.0, "unit ratio on the diagonal; fiber interiors carry no unit-y* elements"),
                srg2p=(1.0, "coincides with srg2 on exact element pools"),
                ssrg=(0.0, "vertical fibers at x = 1/k reach y = 0"),
                clm=(1.0, "closed form"),
            ),
            notes="the base point is not isolated in the preimage of 0",
        ),
        CatalogEntry(
            id="compl_angle", factory=lambda kind: make_complementarity_angle(kind),
            dim_x=1, dim_y=1, base_x=z1, base_y=z1,
            known=_known(
                srg1=(0.0, "horizontal ray elements vanish"),
                srg2=(0.0, "horizontal ray elements vanish"),
            ),
        ),
        CatalogEntry(
            id="oscillating", factory=lambda kind: make_oscillating(kind),
            dim_x=1, dim_y=1, base_x=z1, base_y=z1,
            known=_known(
                srg1=(1.0 / math.sqrt(5.0), "min over phase of max(|sin t|, |sin t + cos t|)"),
                srg2=(0.0, "ratio vanishes along ln x = k pi"),
                clm=(1.0, "sup |sin(ln x)|"), lip=(math.sqrt(2.0), "sup |sin + cos|"),
            ),
            ladder_hint={"theta": 0.04, "depth": 8},
            notes="log-periodic with period pi in ln x; annulus log-width must exceed the period",
        ),
        CatalogEntry(
            id="spiral", factory=lambda kind: make_spiral(kind),
            dim_x=2, dim_y=2, base_x=z2, base_y=z2,
            known=_known(srg1=(0.0, "derivative vanishes at the base"), clm=(0.0, "closed form")),
        ),
        CatalogEntry(
            id="square_plus_identity", factory=None,
            dim_x=1, dim_y=1, base_x=z1, base_y=z1,
            combinator={"op": "sum", "of": "square", "fn": "identity"},
            known=_known(srg1=(1.0, "unit derivative at the base after the shift")),
        ),
        CatalogEntry(
            id="inverse_abs", factory=None,
            dim_x=1, dim_y=1, base_x=z1, base_y=z1,
            combinator={"op": "inverse", "of": "abs"},
        ),
    ]
    return {e.id: e for e in entries}


def resolve_map_spec(spec: dict, kind: str = "l1",
                     registry: dict[str, CatalogEntry] | None = None) -> tuple[SetValuedMap, CatalogEntry | None]:
    """Build a map from a config spec {id, params, wrap}, recursively.

    Combinator entries reference other ids; cycles raise ValueError. wrap is
    an ordered list of {op: inverse} or {op: sum, fn: <map spec>} steps.
    """
    registry = registry if registry is not None else catalog()

    def resolve_id(mid: str, params: dict, visited: tuple[str, ...]) -> tuple[SetValuedMap, CatalogEntry]:
        if mid in visited:
            raise ValueError(f"catalog combinator cycle: {' -> '.join(visited + (mid,))}")
        if mid not in registry:
            raise ValueError(f"unknown catalog id {mid!r}")
        entry = registry[mid]
        if entry.combinator is None:
            return entry.make(kind=kind, params=params), entry
        comb = entry.combinator
        base_map, _ = resolve_id(comb["of"], {}, visited + (mid,))
        if comb["op"] == "inverse":
            return inverse(base_map, name=entry.id), entry
        if comb["op"] == "sum":
            fn_map, _ = resolve_id(comb["fn"], {}, visited + (mid,))
            if not fn_map.single_valued:
                raise ValueError(f"sum combinator needs a single-valued fn, got {comb['fn']!r}")
            return sum_with_function(base_map, fn_map.func, grad=fn_map.grad, name=entry.id), entry
        raise ValueError(f"unknown combinator op {comb['op']!r}")

    mid = spec.get("id")
    if not isinstance(mid, str):
        raise ValueError("map spec needs a string 'id'")
    m, entry = resolve_id(mid, dict(spec.get("params") or {}), ())
    for step in spec.get("wrap") or []:
        op = step.get("op")
        if op == "inverse":
            m = inverse(m)
        elif op == "sum":
            fn_spec = step.get("fn")
            if not isinstance(fn_spec, dict):
                raise ValueError("sum wrap step needs a 'fn' map spec")
            fn_map, _ = resolve_map_spec(fn_spec, kind=kind, registry=registry)
            if not fn_map.single_valued:
                raise ValueError("sum wrap step needs a single-valued fn")
            m = sum_with_function(m, fn_map.func, grad=fn_map.grad)
        else:
            raise ValueError(f"unknown wrap op {op!r}")
    return m, entry
