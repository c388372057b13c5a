"""Scores and linear baselines: kNN mutual information, lattice quantizers in
the response domain, quantization RMSE, PCA whitening and least squares."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma

from .core import SampleSet, knn_density_nd, pca_frame
from .errors import DegenerateDataError, FitError, ParameterError, RangeError

MI_K = 5


@dataclass(frozen=True)
class MIResult:
    bits: float
    k: int
    approximate: bool = False

    def __float__(self):
        return self.bits


def mutual_information(set, k: int = MI_K) -> MIResult:
    """Multi-information ``sum H(x_i) - H(x)`` by the Kraskov (KSG, first
    variant) estimator with max-norm neighbourhoods, in bits."""
    X = set.points if isinstance(set, SampleSet) else np.asarray(set, dtype=float)
    n, d = X.shape
    if n < 500:
        raise ParameterError(f"mutual information needs >= 500 samples, got {n}")
    if d < 2:
        raise ParameterError("mutual information needs d >= 2")
    tree = cKDTree(X)
    eps, _ = tree.query(X, k=[k + 1], p=np.inf)
    eps = eps[:, 0]
    if np.mean(eps == 0) > 0.01:
        raise DegenerateDataError("too many duplicate points for a kNN estimate")
    eps = np.where(eps == 0, np.min(eps[eps > 0]), eps)
    acc = 0.0
    for j in range(d):
        v = np.sort(X[:, j])
        # strictly closer than eps, self excluded
        hi = np.searchsorted(v, X[:, j] + eps, side="left")
        lo = np.searchsorted(v, X[:, j] - eps, side="right")
        cnt = np.maximum(hi - lo - 1, 0)
        acc += np.mean(digamma(cnt + 1))
    nats = digamma(k) + (d - 1) * digamma(n) - acc
    return MIResult(bits=float(nats / math.log(2.0)), k=k, approximate=d > 2)


@dataclass
class LatticeQuantizer:
    bins_per_dim: list[int]
    response_bounds: list[tuple[float, float]]
    codebook: np.ndarray
    cell_responses: np.ndarray
    dropped: list[tuple[int, ...]] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.codebook.shape[0]


def response_grid(bounds, bins) -> np.ndarray:
    """Cell centres of a Cartesian grid, first dimension varying slowest."""
    axes = [lo + (np.arange(m) + 0.5) * (hi - lo) / m for (lo, hi), m in zip(bounds, bins)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([g.ravel() for g in mesh])


def build_lattice(model, bins_per_dim, responses=None, pct: float = 0.5) -> LatticeQuantizer:
    """Uniform grid over the central response range, inverted cell by cell.

    ``responses`` are the transformed training samples (computed when not
    given). Cells whose inverse leaves the reachable range are dropped and
    listed in ``dropped``.
    """
    bins = [int(b) for b in bins_per_dim]
    if len(bins) != model.dim or min(bins) < 1:
        raise ParameterError(f"bins_per_dim must be {model.dim} positive integers")
    if responses is None:
        responses, conv, _ = model.transform_many(model.training.points)
        responses = responses[conv.all(axis=1)]
    lo = np.percentile(responses, pct, axis=0)
    hi = np.percentile(responses, 100 - pct, axis=0)
    bounds = [(float(a), float(b)) for a, b in zip(lo, hi)]
    cells = response_grid(bounds, bins)
    code, kept, dropped = [], [], []
    for idx, r in zip(np.ndindex(*bins), cells):
        try:
            x = model.inverse(r)
        except RangeError:
            dropped.append(idx)
            continue
        code.append(x)
        kept.append(r)
    if not code:
        raise RangeError("every lattice cell fell outside the reachable range")
    return LatticeQuantizer(bins, bounds, np.array(code), np.array(kept), dropped)


def uniform_input_quantizer(set, bins_per_dim, pct: float = 0.5) -> np.ndarray:
    """Codebook of the per-dimension uniform scalar quantizer on the input."""
    X = set.points if isinstance(set, SampleSet) else np.asarray(set, dtype=float)
    lo = np.percentile(X, pct, axis=0)
    hi = np.percentile(X, 100 - pct, axis=0)
    return response_grid(list(zip(lo, hi)), bins_per_dim)


def quantization_rmse(set, quantizer) -> float:
    """RMS distance from each sample to its nearest codebook point."""
    X = set.points if isinstance(set, SampleSet) else np.asarray(set, dtype=float)
    code = quantizer.codebook if isinstance(quantizer, LatticeQuantizer) else np.asarray(quantizer)
    code = np.atleast_2d(code)
    if code.size == 0:
        raise ParameterError("empty codebook")
    dist, _ = cKDTree(code).query(X, k=1)
    return float(np.sqrt(np.mean(dist ** 2)))


def occupancy_cv(responses, quantizer: LatticeQuantizer) -> float:
    """Coefficient of variation of the training counts per response cell."""
    R = np.asarray(responses, dtype=float)
    idx = []
    for j, ((lo, hi), m) in enumerate(zip(quantizer.response_bounds, quantizer.bins_per_dim)):
        c = np.floor((R[:, j] - lo) / (hi - lo) * m).astype(int)
        idx.append(c)
    idx = np.column_stack(idx)
    inside = np.all((idx >= 0) & (idx < np.array(quantizer.bins_per_dim)), axis=1)
    flat = np.ravel_multi_index(idx[inside].T, quantizer.bins_per_dim)
    counts = np.bincount(flat, minlength=int(np.prod(quantizer.bins_per_dim)))
    return float(counts.std() / counts.mean())


# ---------------------------------------------------------------------------
# density / Jacobian power law
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PowerLawFit:
    slope: float
    intercept: float
    corr: float
    n_points: int


def power_law_check(model, points, h: float, k_density: int = 50) -> PowerLawFit:
    """Regress ``log|det J(x)|`` on ``log p(x)``; ``p`` is an independent
    d-dimensional kNN density of the training set."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    logdet = np.array([np.log(abs(np.linalg.det(model.jacobian_fd(x, h)))) for x in pts])
    logp = np.log(knn_density_nd(model.training.points, pts, k_density))
    if logp.std() == 0:
        raise ParameterError("density is constant over the test points")
    slope, intercept = np.polyfit(logp, logdet, 1)
    corr = float(np.corrcoef(logp, logdet)[0, 1]) if logdet.std() > 0 else 0.0
    return PowerLawFit(float(slope), float(intercept), corr, len(pts))


# ---------------------------------------------------------------------------
# linear baselines
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearMap:
    matrix: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.matrix)) and np.all(np.isfinite(self.offset))):
            raise ParameterError("linear map has non-finite entries")

    def inverse(self) -> "LinearMap":
        Ainv = np.linalg.inv(self.matrix)
        return LinearMap(Ainv, -Ainv @ self.offset)

    def compose(self, inner: "LinearMap") -> "LinearMap":
        """``self`` after ``inner``."""
        return LinearMap(self.matrix @ inner.matrix, self.matrix @ inner.offset + self.offset)


def apply_linear(m: LinearMap, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x @ m.matrix.T + m.offset


def pca_whitening_fit(set) -> LinearMap:
    """Zero mean, identity covariance, axes ordered and sign-fixed as in PCA."""
    X = set.points if isinstance(set, SampleSet) else np.asarray(set, dtype=float)
    frame = pca_frame(X)
    if frame.degenerate:
        raise FitError("singular covariance: cannot whiten")
    W = (frame.basis / np.sqrt(frame.local_variances)).T
    return LinearMap(W, -W @ frame.center)


def match_manifolds_linear(map_A: LinearMap, map_B: LinearMap, x_B) -> np.ndarray:
    """Send ``x_B`` through ``map_B`` and back out through the inverse of ``map_A``."""
    return apply_linear(map_A.inverse().compose(map_B), x_B)


def least_squares_map(pairs=None, X=None, Y=None) -> LinearMap:
    """Affine map minimising ``sum ||A x + b - y||^2``.

    Pass either a sequence of ``(x, y)`` pairs or the stacked arrays.
    """
    if pairs is not None:
        X = np.array([p[0] for p in pairs], dtype=float)
        Y = np.array([p[1] for p in pairs], dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n, d = X.shape
    design = np.column_stack([X, np.ones(n)])
    if n < d + 1 or np.linalg.matrix_rank(design) < d + 1:
        raise FitError("rank-deficient design: need d+1 affinely independent inputs")
    coef, *_ = np.linalg.lstsq(design, Y, rcond=None)
    return LinearMap(coef[:d].T.copy(), coef[d].copy())
