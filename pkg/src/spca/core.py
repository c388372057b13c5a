"""Statistical primitives shared by the curve tracer and the transform.

Neighbourhood queries are exhaustive linear scans with a deterministic
tie-break (lower index first). One-dimensional densities use the balloon
k-nearest-neighbour rule ``k / (n * 2 r_k)`` and entropies the
Kozachenko-Leonenko estimator.
"""

from __future__ import annotations

import csv
import hashlib
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import digamma

from .errors import DataFormatError, DegenerateDataError, ParameterError

# relative eigenvalue floor below which a local covariance counts as rank deficient
RANK_TOL = 1e-10


@dataclass(frozen=True)
class SampleSet:
    """Ordered collection of ``n`` points of dimension ``d``."""

    points: np.ndarray
    label: str | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float, copy=True)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[1] < 1:
            raise ParameterError("points must be a 2-D array of shape (n, d)")
        if pts.shape[0] < 2:
            raise ParameterError("a SampleSet needs at least 2 points")
        if not np.all(np.isfinite(pts)):
            raise ParameterError("points contain NaN or Inf")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return self.n

    def digest(self) -> str:
        """SHA-256 of the raw point bytes (shape included)."""
        h = hashlib.sha256()
        h.update(np.asarray(self.points.shape, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(self.points).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class LocalFrame:
    center: np.ndarray
    basis: np.ndarray
    local_variances: np.ndarray
    degenerate: bool = False


@dataclass(frozen=True)
class DensitySample:
    location: float
    density: float
    bandwidth_k: int


# ---------------------------------------------------------------------------
# neighbourhoods
# ---------------------------------------------------------------------------

def _as_points(set_or_array) -> np.ndarray:
    if isinstance(set_or_array, SampleSet):
        return set_or_array.points
    return np.asarray(set_or_array, dtype=float)


def knn_indices(points: np.ndarray, x, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and distances of the ``k`` nearest rows of ``points`` to ``x``.

    Ascending by distance, ties broken by lower index. Exhaustive scan.
    """
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ParameterError(f"k={k} out of range [1, {n}]")
    diff = points - np.asarray(x, dtype=float)
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    if k == n:
        cand = np.arange(n)
    else:
        kth = np.partition(dist, k - 1)[k - 1]
        cand = np.flatnonzero(dist <= kth)
    order = cand[np.lexsort((cand, dist[cand]))][:k]
    return order, dist[order]


def knn_query(set: SampleSet, x, k: int) -> list[tuple[int, float]]:
    """The ``k`` nearest points of ``set`` to ``x`` as ``(index, distance)`` pairs."""
    idx, dist = knn_indices(set.points, x, k)
    return [(int(i), float(r)) for i, r in zip(idx, dist)]


def pca_frame(points: np.ndarray) -> LocalFrame:
    """PCA frame of a point cloud: mean, eigenvectors by descending variance.

    Each basis column is sign-fixed so its largest-magnitude entry is positive.
    """
    center = points.mean(axis=0)
    d = points.shape[1]
    if points.shape[0] > 1:
        cov = np.atleast_2d(np.cov(points, rowvar=False, bias=False))
    else:
        cov = np.zeros((d, d))
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    for j in range(d):
        col = evecs[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            evecs[:, j] = -col
    top = evals[0] if evals.size else 0.0
    degenerate = bool(top <= 0.0 or evals[-1] <= RANK_TOL * top)
    return LocalFrame(center=center, basis=evecs, local_variances=evals,
                      degenerate=degenerate)


def local_pca_frame(set: SampleSet, x, k: int) -> LocalFrame:
    """Local PCA of the ``k`` nearest neighbours of ``x``."""
    if k < set.dim + 1:
        raise ParameterError(f"local PCA needs k >= d + 1 = {set.dim + 1}, got {k}")
    idx, _ = knn_indices(set.points, x, k)
    return pca_frame(set.points[idx])


# ---------------------------------------------------------------------------
# one-dimensional densities and entropies
# ---------------------------------------------------------------------------

def nearest_window(values: np.ndarray, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Start index and radius of the k-nearest window in sorted ``values``.

    The k nearest entries of a sorted array form a contiguous window, so the
    search reduces to a vectorised bisection over window starts.
    """
    v = values
    n = v.shape[0]
    q = np.atleast_1d(np.asarray(queries, dtype=float))
    if not 1 <= k <= n:
        raise ParameterError(f"k={k} out of range [1, {n}]")
    p = np.searchsorted(v, q)
    lo = np.maximum(0, p - k)
    hi = np.minimum(p, n - k)
    lo0 = lo.copy()
    while True:
        active = lo < hi
        if not active.any():
            break
        mid = (lo + hi) // 2
        cond = (v[mid + k - 1] - q) >= (q - v[mid])
        hi = np.where(active & cond, mid, hi)
        lo = np.where(active & ~cond, mid + 1, lo)
    r = np.maximum(q - v[lo], v[lo + k - 1] - q)
    prev = np.maximum(lo - 1, lo0)
    r_prev = np.maximum(q - v[prev], v[prev + k - 1] - q)
    use_prev = r_prev < r
    return np.where(use_prev, prev, lo), np.where(use_prev, r_prev, r)


def kth_distance_sorted(values: np.ndarray, queries, k: int) -> np.ndarray:
    """Distance from each query to its k-th nearest entry of sorted ``values``."""
    return nearest_window(values, queries, k)[1]


def _nearest_nonzero_distance(values: np.ndarray, q: np.ndarray) -> np.ndarray:
    left = np.searchsorted(values, q, side="left") - 1
    right = np.searchsorted(values, q, side="right")
    dl = np.where(left >= 0, q - values[np.clip(left, 0, None)], np.inf)
    dr = np.where(right < values.size,
                  values[np.clip(right, None, values.size - 1)] - q, np.inf)
    return np.minimum(dl, dr)


def knn_density_sorted(values: np.ndarray, queries, k: int) -> np.ndarray:
    """Vectorised balloon kNN density on pre-sorted ``values``."""
    n = values.shape[0]
    q = np.atleast_1d(np.asarray(queries, dtype=float))
    r = kth_distance_sorted(values, q, k)
    zero = r <= 0
    if zero.any():
        r = r.copy()
        r[zero] = _nearest_nonzero_distance(values, q[zero])
        if not np.all(np.isfinite(r)):
            raise DegenerateDataError("all values coincide; density undefined")
    return k / (n * 2.0 * r)


def knn_density_1d(values, query: float, k: int) -> DensitySample:
    """Balloon kNN density of ``values`` at ``query``."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size < 2:
        raise ParameterError("need at least 2 values")
    if not 1 <= k <= v.size:
        raise ParameterError(f"k={k} out of range [1, {v.size}]")
    dens = knn_density_sorted(v, [query], k)[0]
    return DensitySample(location=float(query), density=float(dens), bandwidth_k=k)


def marginal_entropy_1d(values, k: int = 3) -> float:
    """Kozachenko-Leonenko differential entropy in bits.

    Returns ``-inf`` (with a warning) for constant input.
    """
    v = np.sort(np.asarray(values, dtype=float).ravel())
    n = v.size
    if n < 50:
        raise ParameterError(f"entropy estimate needs >= 50 values, got {n}")
    if v[0] == v[-1]:
        warnings.warn("constant input: entropy is -inf", RuntimeWarning, stacklevel=2)
        return float("-inf")
    # k+1 because each value is its own nearest neighbour
    eps = kth_distance_sorted(v, v, k + 1)
    zero = eps <= 0
    if zero.any():
        eps[zero] = _nearest_nonzero_distance(v, v[zero])
    h_nats = digamma(n) - digamma(k) + math.log(2.0) + np.mean(np.log(eps))
    return float(h_nats / math.log(2.0))


def knn_density_nd(points: np.ndarray, queries: np.ndarray, k: int,
                   exclude_self: bool = False) -> np.ndarray:
    """d-dimensional kNN density ``k / (n * V_d * r_k^d)`` via a KD-tree."""
    from scipy.spatial import cKDTree
    from scipy.special import gammaln

    pts = np.asarray(points, dtype=float)
    n, d = pts.shape
    kk = k + 1 if exclude_self else k
    r, _ = cKDTree(pts).query(np.atleast_2d(queries), k=[kk])
    r = np.maximum(r[:, 0], 1e-300)
    log_vd = (d / 2) * math.log(math.pi) - gammaln(d / 2 + 1)
    return np.exp(math.log(k) - math.log(n) - log_vd - d * np.log(r))


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def read_csv(path, label: str | None = None) -> SampleSet:
    """Read a SampleSet CSV: one point per row, optional ``#`` header rows."""
    rows = []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (row[0].lstrip().startswith("#")):
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise DataFormatError(
                    f"{path}:{lineno}: expected {width} columns, got {len(vals)}")
            rows.append(vals)
    if len(rows) < 2:
        raise DataFormatError(f"{path}: need at least 2 data rows")
    return SampleSet(np.array(rows), label=label or Path(path).stem)


def format_row(values) -> str:
    return ",".join(f"{float(v):.10g}" for v in values)


def write_csv(path, rows, header: list[str] | None = None,
              comments: list[str] | None = None) -> None:
    """Write numeric rows with 10 significant digits."""
    with open(path, "w", newline="") as fh:
        for c in comments or []:
            fh.write(f"# {c}\n")
        if header:
            fh.write("# " + ",".join(header) + "\n")
        for row in rows:
            fh.write(format_row(row) + "\n")

