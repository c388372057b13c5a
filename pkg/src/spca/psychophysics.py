"""Simulated colour-vision phenomenology from fitted models: incremental
thresholds (two paradigms), Fechner integration, corresponding pairs and
the ATD opponent frame."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import knn_density_sorted
from .errors import NonConvergedError, OutOfSupportError, ParameterError, RangeError

# Ingling-Tsou opponent transform (rows A, T, D) from cone-like tristimulus
INGLING_TSOU = ((0.6, 0.4, 0.0),
                (1.2, -1.6, 0.4),
                (0.24, 0.105, -0.7))

AXES = {"A": 0, "T": 1, "D": 2}
GRID_POINTS = 25
DELTA_FRACTION = 0.01


@dataclass(frozen=True)
class AtdFrame:
    matrix: np.ndarray = field(default_factory=lambda: np.array(INGLING_TSOU))

    def __post_init__(self):
        M = np.asarray(self.matrix, dtype=float)
        if M.shape != (3, 3) or not np.all(np.isfinite(M)):
            raise ParameterError("ATD matrix must be a finite 3x3 array")
        if np.linalg.cond(M) >= 1e6:
            raise ParameterError("ATD matrix is ill-conditioned")
        object.__setattr__(self, "matrix", M)
        object.__setattr__(self, "_inv", np.linalg.inv(M))

    @property
    def inverse_matrix(self) -> np.ndarray:
        return self._inv


def atd_convert(frame: AtdFrame, x, direction: str = "to_atd") -> np.ndarray:
    """Apply the frame (``to_atd``) or its inverse (``from_atd``) to rows of ``x``."""
    x = np.asarray(x, dtype=float)
    if direction == "to_atd":
        M = frame.matrix
    elif direction == "from_atd":
        M = frame.inverse_matrix
    else:
        raise ParameterError(f"direction must be to_atd or from_atd, not {direction!r}")
    return x @ M.T


@dataclass(frozen=True)
class ThresholdProfile:
    axis: str | int
    response_dim: int
    test_points: np.ndarray
    thresholds: np.ndarray
    paradigm: str
    flags: np.ndarray

    def __post_init__(self):
        if len(self.test_points) != len(self.thresholds):
            raise ParameterError("test points and thresholds differ in length")
        if np.any(self.thresholds <= 0):
            raise ParameterError("thresholds must be positive")


@dataclass(frozen=True)
class ResponseCurve:
    x: np.ndarray
    response: np.ndarray
    beta: float
    anchor: float
    flags: np.ndarray


@dataclass(frozen=True)
class CorrespondingPair:
    x_source: np.ndarray
    x_predicted: np.ndarray
    environments: tuple[str, str]
    converged: bool


def _axis_index(axis) -> int:
    if isinstance(axis, str):
        try:
            return AXES[axis]
        except KeyError:
            raise ParameterError(f"unknown axis {axis!r}; use A, T or D") from None
    return int(axis)


def axis_direction(model, axis, response_dim: int | None = None):
    """Unit test direction and response dimension for ``axis``.

    The response follows the origin curve whose direction loads most on the
    input coordinate (A, T, D are coordinates 0, 1, 2). Thresholds are
    measured along that curve's direction, oriented so its ``axis``
    component is positive; on an aligned frame this is the axis itself.
    """
    j = _axis_index(axis)
    B = model.basis[:, model.dim_order]
    m = int(np.argmax(np.abs(B[j]))) if response_dim is None else int(response_dim)
    u = B[:, m].copy()
    if u[j] < 0:
        u = -u
    return u, m


def test_grid(model, axis, n: int = GRID_POINTS, central: float = 0.9) -> np.ndarray:
    """Equispaced coordinates over the central part of the training projections."""
    u, _ = axis_direction(model, axis)
    v = model.training.points @ u
    lo, hi = np.quantile(v, [(1 - central) / 2, (1 + central) / 2])
    return np.linspace(lo, hi, n)


def marginal_density(model, axis, grid, k: int | None = None) -> np.ndarray:
    """kNN density of the training projections on the test direction at ``grid``."""
    u, _ = axis_direction(model, axis)
    v = np.sort(model.training.points @ u)
    k = k or max(10, round(0.02 * v.size))
    return knn_density_sorted(v, grid, k)


def axis_points(model, axis, test_points, response_dim: int | None = None):
    """Points of the test line through the origin at coordinates ``test_points``."""
    u, m = axis_direction(model, axis, response_dim)
    t = np.asarray(test_points, dtype=float).ravel()
    X = model.origin + np.outer(t - model.origin @ u, u)
    return X, u, m, t


def training_responses(model) -> np.ndarray:
    cache = getattr(model, "_train_resp", None)
    if cache is None:
        R, conv, _ = model.transform_many(model.training.points)
        cache = R[conv.all(axis=1)]
        model._train_resp = cache
    return cache


def response_criterion(model, dim: int) -> float:
    """One percent of the interquartile range of training responses ``dim``."""
    R = training_responses(model)
    q1, q3 = np.percentile(R[:, dim], [25, 75])
    return DELTA_FRACTION * float(q3 - q1)


def _default_h(t):
    gaps = np.diff(np.unique(t))
    return 0.25 * float(gaps.min()) if gaps.size else 1e-3


def _response(model, x):
    r, conv = model._forward(x)
    return r, bool(conv.all()) and bool(model.in_support(x)[0])


def thresholds_physiological(model, axis, test_points, response_dim: int | None = None,
                             delta: float | None = None, h: float | None = None
                             ) -> ThresholdProfile:
    """``delta / |dr/dx|`` from central differences along ``axis``."""
    X, e, m, t = axis_points(model, axis, test_points, response_dim)
    delta = response_criterion(model, m) if delta is None else float(delta)
    h = _default_h(t) if h is None else float(h)
    thr = np.empty(t.size)
    flags = np.zeros(t.size, dtype=bool)
    for n, x in enumerate(X):
        rp, okp = _response(model, x + h * e)
        rm, okm = _response(model, x - h * e)
        slope = abs(rp[m] - rm[m]) / (2 * h)
        if slope == 0 or not np.isfinite(slope):
            thr[n] = np.inf
            flags[n] = True
        else:
            thr[n] = delta / slope
        flags[n] |= not (okp and okm)
    return ThresholdProfile(axis, m, t, thr, "physiological", flags)


def thresholds_psychophysical(model, axis, test_points, criterion: float | None = None,
                              response_dim: int | None = None, norm: float = 2.0,
                              tol: float = 1e-4) -> ThresholdProfile:
    """Smallest step along ``axis`` whose response change reaches ``criterion``.

    The response change is summarised by the ``norm``-norm (Euclidean by
    default). The criterion defaults to the physiological ``delta`` of the
    mapped response dimension, so both paradigms share units.
    """
    X, e, m, t = axis_points(model, axis, test_points, response_dim)
    crit = response_criterion(model, m) if criterion is None else float(criterion)
    if crit <= 0:
        raise ParameterError("criterion must be positive")
    step0 = _default_h(t)
    thr = np.empty(t.size)
    flags = np.zeros(t.size, dtype=bool)
    for n, x in enumerate(X):
        r0, ok0 = _response(model, x)

        def dist(s):
            r, ok = _response(model, x + s * e)
            return float(np.linalg.norm(r - r0, ord=norm)), ok

        lo, hi = 0.0, step0
        val, ok = dist(hi)
        while ok and val < crit and hi < 1e3 * step0:
            lo, hi = hi, 2 * hi
            val, ok = dist(hi)
        if not ok or val < crit:
            thr[n] = np.inf
            flags[n] = True
            continue
        for _ in range(60):
            if hi - lo <= tol * hi:
                break
            mid = 0.5 * (lo + hi)
            if dist(mid)[0] >= crit:
                hi = mid
            else:
                lo = mid
        thr[n] = hi
        flags[n] = not ok0
    return ThresholdProfile(axis, m, t, thr, "psychophysical", flags)


def fechner_integrate(profile: ThresholdProfile, anchor: float, beta: float = 1.0) -> ResponseCurve:
    """Trapezoidal ``beta * integral of 1/threshold`` with zero response at ``anchor``.

    Infinite thresholds contribute nothing and are flagged.
    """
    if not beta > 0:
        raise ParameterError("beta must be positive")
    x = np.asarray(profile.test_points, dtype=float)
    thr = np.asarray(profile.thresholds, dtype=float)
    if not x[0] <= anchor <= x[-1]:
        raise ParameterError("anchor must lie within the test points")
    flags = ~np.isfinite(thr)
    g = np.where(flags, 0.0, 1.0 / np.where(flags, 1.0, thr))
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (g[1:] + g[:-1]) * np.diff(x))])
    resp = beta * (cum - np.interp(anchor, x, cum))
    return ResponseCurve(x, resp, float(beta), float(anchor), flags)


def response_alignment(model_B, model_A) -> tuple[np.ndarray, np.ndarray]:
    """Permutation and signs that carry ``model_B`` responses onto ``model_A``'s.

    Curve directions are defined only up to sign, and dimensions of similar
    entropy can swap order between environments. Responses are paired by
    maximal total ``|cos|`` between their origin directions (``perm[i]`` is
    the B response feeding A response ``i``); a sign flips when the paired
    directions point apart.
    """
    if model_B.dim != model_A.dim:
        raise ParameterError("models differ in dimension")
    UB = model_B.basis[:, model_B.dim_order]
    UA = model_A.basis[:, model_A.dim_order]
    dots = UA.T @ UB
    rows, cols = linear_sum_assignment(-np.abs(dots))
    perm = cols[np.argsort(rows)]
    signs = np.where(dots[np.arange(len(perm)), perm] < 0, -1.0, 1.0)
    return perm, signs


def corresponding_pairs(model_B, model_A, xs_B, environments=("B", "A"),
                        align: bool = True) -> list[CorrespondingPair]:
    """``x_A = R_A^-1(R_B(x_B))`` for each row; failures are kept and flagged.

    With ``align`` the responses are first matched across the two models
    (see :func:`response_alignment`).
    """
    X = np.atleast_2d(np.asarray(xs_B, dtype=float))
    R, conv, sup = model_B.transform_many(X)
    if align:
        perm, signs = response_alignment(model_B, model_A)
        R = R[:, perm] * signs
        conv = conv[:, perm]
    out = []
    for x, r, c, s in zip(X, R, conv, sup):
        ok = bool(c.all() and s)
        try:
            xa = model_A.inverse(r)
        except (RangeError, NonConvergedError, OutOfSupportError):
            xa = np.full(X.shape[1], np.nan)
            ok = False
        out.append(CorrespondingPair(x.copy(), xa, tuple(environments), ok))
    return out


def pair_arrays(pairs: list[CorrespondingPair]):
    src = np.array([p.x_source for p in pairs])
    pred = np.array([p.x_predicted for p in pairs])
    ok = np.array([p.converged for p in pairs])
    return src, pred, ok


def chromaticity(x) -> np.ndarray:
    """Tristimulus rows normalised to unit sum."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return x / x.sum(axis=1, keepdims=True)


def argmin_within(profile: ThresholdProfile, density: np.ndarray) -> tuple[int, int]:
    """Indices of the threshold minimum and of the density maximum."""
    thr = np.where(np.isfinite(profile.thresholds), profile.thresholds, np.inf)
    return int(np.argmin(thr)), int(np.argmax(density))


def affine_corr(a, b, mask=None) -> float:
    """Pearson correlation, optionally over ``mask`` only (finite entries)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    keep = np.isfinite(a) & np.isfinite(b)
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool)
    a, b = a[keep], b[keep]
    if a.size < 3 or a.std() == 0 or b.std() == 0:
        return math.nan
    return float(np.corrcoef(a, b)[0, 1])
