"""Shared numerical smoothers: B-spline bases, penalized splines, kernel smoothing, PAVA."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LAMBDA_GRID = np.logspace(-6, 6, 25)  # fixed GCV grid keeps fits deterministic


@dataclass(frozen=True)
class BSplineBasis:
    """Clamped B-spline basis of `degree` with sorted interior knots inside `boundary`."""

    degree: int
    interior_knots: tuple[float, ...]
    boundary: tuple[float, float]

    def __post_init__(self):
        lo, hi = self.boundary
        if not (lo < hi):
            raise ValueError("boundary must satisfy lo < hi")
        ks = np.asarray(self.interior_knots, dtype=float)
        if ks.size and (np.any(np.diff(ks) <= 0) or ks[0] <= lo or ks[-1] >= hi):
            raise ValueError("interior knots must be strictly increasing inside boundary")
        if self.degree < 0:
            raise ValueError("degree must be >= 0")

    @property
    def dimension(self) -> int:
        return len(self.interior_knots) + self.degree + 1

    @property
    def knot_vector(self) -> np.ndarray:
        lo, hi = self.boundary
        return np.concatenate(
            [np.full(self.degree + 1, lo), self.interior_knots, np.full(self.degree + 1, hi)]
        )

    def to_dict(self) -> dict:
        return {
            "degree": self.degree,
            "interior_knots": list(self.interior_knots),
            "boundary": list(self.boundary),
        }

    @staticmethod
    def from_dict(d: dict) -> "BSplineBasis":
        return BSplineBasis(d["degree"], tuple(d["interior_knots"]), tuple(d["boundary"]))


def bspline_eval(basis: BSplineBasis, t) -> np.ndarray:
    """Design matrix of basis values at t via the Cox-de Boor recursion.

    Output shape (len(t), M); rows are nonnegative and sum to one.  Points
    outside the boundary raise (no extrapolation).
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    lo, hi = basis.boundary
    if np.any(t < lo) or np.any(t > hi):
        raise ValueError(f"evaluation points outside boundary [{lo}, {hi}]")
    v = basis.degree
    knots = basis.knot_vector
    M = basis.dimension
    span = np.searchsorted(knots, t, side="right") - 1
    span = np.clip(span, v, M - 1)

    npts = t.shape[0]
    N = np.zeros((npts, v + 1))
    N[:, 0] = 1.0
    left = np.empty((npts, v + 1))
    right = np.empty((npts, v + 1))
    for d in range(1, v + 1):
        left[:, d] = t - knots[span + 1 - d]
        right[:, d] = knots[span + d] - t
        saved = np.zeros(npts)
        for r in range(d):
            denom = right[:, r + 1] + left[:, d - r]
            temp = N[:, r] / denom
            N[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, d - r] * temp
        N[:, d] = saved

    out = np.zeros((npts, M))
    cols = span[:, None] - v + np.arange(v + 1)[None, :]
    np.put_along_axis(out, cols, N, axis=1)
    return out


def knot_rule(n: int, rule: str = "cube-root-like") -> int:
    """Interior-knot count from the event count: floor(n**(1/3.5))."""
    if n < 1:
        raise ValueError("need at least one event")
    if rule != "cube-root-like":
        raise ValueError(f"unknown knot rule {rule!r}")
    # guard the float power against 8**(1/3.5)-style representation slop
    return int(math.floor(n ** (1.0 / 3.5) + 1e-12))


def place_knots(x: np.ndarray, k: int, boundary: tuple[float, float], placement: str = "quantile"):
    """K interior knots at equally spaced quantiles of x (or equally spaced in time)."""
    lo, hi = boundary
    if placement == "even":
        knots = np.linspace(lo, hi, k + 2)[1:-1]
    elif placement == "quantile":
        knots = np.quantile(np.asarray(x, dtype=float), np.arange(1, k + 1) / (k + 1))
    else:
        raise ValueError(f"unknown placement {placement!r}")
    eps = 1e-9 * (hi - lo)
    knots = np.clip(knots, lo + eps, hi - eps)
    knots = np.unique(knots)
    return tuple(float(v) for v in knots)


# -- evaluable smooth-function representations --


class SmoothFn:
    """A univariate function over a domain; subclasses implement _eval."""

    domain: tuple[float, float]

    def __call__(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return self._eval(t)

    def _eval(self, t: np.ndarray) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError


@dataclass
class SplineFn(SmoothFn):
    basis: BSplineBasis
    coef: np.ndarray
    gcv_lambda: float | None = None
    fallback: bool = False  # true when the fit degraded to a global weighted mean

    def __post_init__(self):
        self.coef = np.asarray(self.coef, dtype=float)
        self.domain = self.basis.boundary

    def _eval(self, t):
        lo, hi = self.domain
        pad = 1e-9 * (hi - lo)
        t = np.clip(t, lo, hi) if np.all((t >= lo - pad) & (t <= hi + pad)) else t
        return bspline_eval(self.basis, t) @ self.coef

    def to_dict(self):
        return {
            "smooth_fn": "spline",
            "basis": self.basis.to_dict(),
            "coef": self.coef.tolist(),
            "gcv_lambda": self.gcv_lambda,
            "fallback": self.fallback,
        }


@dataclass
class KernelFn(SmoothFn):
    x: np.ndarray
    y: np.ndarray
    w: np.ndarray
    kernel: str
    bandwidth: float

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        self.domain = (float(self.x.min()), float(self.x.max()))

    def _eval(self, t):
        with np.errstate(over="ignore"):
            u = (self.x[None, :] - t[:, None]) / self.bandwidth
            if self.kernel == "epanechnikov":
                k = np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - np.minimum(np.abs(u), 1.0) ** 2), 0.0)
            else:
                k = np.exp(-0.5 * np.minimum(u * u, 1e6))
        kw = k * self.w[None, :]
        den = kw.sum(axis=1)
        num = kw @ self.y
        out = np.divide(num, den, out=np.zeros_like(den), where=den > 0)
        dead = den <= 0
        if np.any(dead):
            # no kernel mass: fall back to the value at the nearest supported point
            order = np.argsort(self.x)
            xs, ys = self.x[order], self.y[order]
            idx = np.clip(np.searchsorted(xs, t[dead]), 1, len(xs) - 1)
            nearer = np.abs(xs[idx] - t[dead]) < np.abs(xs[idx - 1] - t[dead])
            out[dead] = np.where(nearer, ys[idx], ys[idx - 1])
        return out

    def to_dict(self):
        return {
            "smooth_fn": "kernel",
            "x": self.x.tolist(),
            "y": self.y.tolist(),
            "w": self.w.tolist(),
            "kernel": self.kernel,
            "bandwidth": self.bandwidth,
        }


@dataclass
class TableFn(SmoothFn):
    """Linear interpolation through (x, value) with constant extrapolation at the ends."""

    x: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.domain = (float(self.x.min()), float(self.x.max()))

    def _eval(self, t):
        return np.interp(t, self.x, self.values)

    def to_dict(self):
        return {"smooth_fn": "table", "x": self.x.tolist(), "values": self.values.tolist()}


@dataclass
class ConstantFn(SmoothFn):
    value: float
    domain: tuple[float, float] = (-np.inf, np.inf)

    def _eval(self, t):
        return np.full_like(t, self.value)

    def to_dict(self):
        return {"smooth_fn": "constant", "value": self.value}


@dataclass
class SumFn(SmoothFn):
    parts: list

    def __post_init__(self):
        self.domain = (
            max(p.domain[0] for p in self.parts),
            min(p.domain[1] for p in self.parts),
        )

    def _eval(self, t):
        out = np.zeros_like(t)
        for p in self.parts:
            out = out + p(t)
        return out

    def to_dict(self):
        return {"smooth_fn": "sum", "parts": [p.to_dict() for p in self.parts]}


def smooth_fn_from_dict(d: dict) -> SmoothFn:
    kind = d["smooth_fn"]
    if kind == "spline":
        return SplineFn(
            BSplineBasis.from_dict(d["basis"]),
            np.asarray(d["coef"]),
            d.get("gcv_lambda"),
            d.get("fallback", False),
        )
    if kind == "kernel":
        return KernelFn(
            np.asarray(d["x"]), np.asarray(d["y"]), np.asarray(d["w"]), d["kernel"], d["bandwidth"]
        )
    if kind == "table":
        return TableFn(np.asarray(d["x"]), np.asarray(d["values"]))
    if kind == "constant":
        return ConstantFn(d["value"])
    if kind == "sum":
        return SumFn([smooth_fn_from_dict(p) for p in d["parts"]])
    raise ValueError(f"unknown smooth fn {kind!r}")


def combine_offsets(*fns: SmoothFn) -> SmoothFn:
    fns = [f for f in fns if f is not None]
    if not fns:
        return ConstantFn(0.0)
    return fns[0] if len(fns) == 1 else SumFn(list(fns))


def _second_difference(m: int, order: int = 2) -> np.ndarray:
    d = np.eye(m)
    for _ in range(order):
        d = np.diff(d, axis=0)
    return d


def weighted_spline_smooth(
    x,
    y,
    w=None,
    penalty_order: int = 2,
    n_knots: int | None = None,
    domain: tuple[float, float] | None = None,
    degree: int = 3,
    placement: str = "quantile",
) -> SmoothFn:
    """Penalized weighted least-squares B-spline fit with GCV-chosen penalty.

    Minimizes sum w_i (y_i - g(x_i))^2 + lam * ||D2 coef||^2 over the fixed
    log-spaced lambda grid.  Degenerate inputs (too few weighted points for the
    basis) fall back to the global weighted mean, flagged on the result.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones_like(x) if w is None else np.asarray(w, dtype=float)
    if not (len(x) == len(y) == len(w)):
        raise ValueError("x, y, w must have equal length")
    if len(x) < 4:
        raise ValueError("need at least 4 points")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    wsum = w.sum()
    if wsum <= 0:
        raise ValueError("all weights are zero")

    if domain is None:
        domain = (float(x.min()), float(x.max()))
    lo, hi = domain
    if not lo < hi:
        return SplineFn(
            BSplineBasis(0, (), (lo, lo + 1.0)), np.array([np.average(y, weights=w)]), None, True
        )
    active = w > 0
    if n_knots is None:
        n_knots = max(1, knot_rule(int(active.sum())))
    knots = place_knots(x[active], n_knots, (lo, hi), placement)
    basis = BSplineBasis(degree, knots, (lo, hi))
    m = basis.dimension
    if int(active.sum()) < m:
        return SplineFn(basis, np.full(m, np.average(y, weights=w)), None, True)

    B = bspline_eval(basis, np.clip(x, lo, hi))
    BW = B * w[:, None]
    btb = B.T @ BW
    bty = BW.T @ y
    D = _second_difference(m, penalty_order)
    P = D.T @ D
    n = len(x)

    best = None
    for lam in LAMBDA_GRID:
        A = btb + lam * P
        try:
            coef = np.linalg.solve(A, bty)
            hat_trace = float(np.trace(np.linalg.solve(A, btb)))
        except np.linalg.LinAlgError:
            continue
        resid = y - B @ coef
        rss = float(np.sum(w * resid * resid)) / n
        denom = max(1.0 - hat_trace / n, 1e-10)
        gcv = rss / denom**2
        if best is None or gcv < best[0] - 1e-15:
            best = (gcv, lam, coef)
    if best is None:
        return SplineFn(basis, np.full(m, np.average(y, weights=w)), None, True)
    return SplineFn(basis, best[2], best[1], False)


def silverman_bandwidth(x, w=None) -> float:
    """0.9 * min(weighted sd, IQR/1.34) * n**(-1/5)."""
    x = np.asarray(x, dtype=float)
    w = np.ones_like(x) if w is None else np.asarray(w, dtype=float)
    mean = np.average(x, weights=w)
    sd = math.sqrt(max(np.average((x - mean) ** 2, weights=w), 0.0))
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * len(x) ** (-0.2)


def kernel_smooth(x, y, w=None, kernel: str = "epanechnikov", bandwidth=None) -> KernelFn:
    """Nadaraya-Watson weighted kernel regression of y on x."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones_like(x) if w is None else np.asarray(w, dtype=float)
    if x.size == 0:
        raise ValueError("empty data")
    if kernel not in ("epanechnikov", "gaussian"):
        raise ValueError(f"unknown kernel {kernel!r}")
    if bandwidth is None:
        bandwidth = silverman_bandwidth(x, w)
        if bandwidth <= 0:
            # degenerate spread: nearest-point semantics via an infinitesimal window
            bandwidth = 1e-300
    elif bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    return KernelFn(x, y, w, kernel, float(bandwidth))


def pava_isotonic(y, w=None) -> np.ndarray:
    """Weighted least-squares projection onto nondecreasing vectors (pool adjacent violators)."""
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    if len(y) != len(w) or len(y) < 1:
        raise ValueError("y and w must be nonempty and of equal length")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")

    # blocks as (weighted sum, weight, count), merged while means decrease
    means = np.empty(len(y))
    weights = np.empty(len(y))
    counts = np.empty(len(y), dtype=np.int64)
    top = 0
    for yi, wi in zip(y, w):
        means[top], weights[top], counts[top] = yi, wi, 1
        top += 1
        while top > 1 and means[top - 2] >= means[top - 1]:
            wtot = weights[top - 2] + weights[top - 1]
            means[top - 2] = (
                weights[top - 2] * means[top - 2] + weights[top - 1] * means[top - 1]
            ) / wtot
            weights[top - 2] = wtot
            counts[top - 2] += counts[top - 1]
            top -= 1
    return np.repeat(means[:top], counts[:top])
