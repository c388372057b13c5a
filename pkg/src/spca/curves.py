"""Bottom-up principal curves: tracing, geodesic projection, weighted length."""

from __future__ import annotations

import json
import threading
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import SampleSet, knn_density_sorted, knn_indices, pca_frame
from .errors import ExtrapolationError, ParameterError, RangeError

# look-ahead distance of the tracer, in units of (1 + q) * tau
LOOK = 1.0


@dataclass(frozen=True)
class CurveParams:
    """Rigidity of the tracer.

    Parameters
    ----------
    k_fraction : float
        Fraction of the available samples in each local neighbourhood.
    tau : float
        Step length in data units.
    q : float
        Stiffness: weight of the previous tangent against the local principal
        direction when choosing the next step.
    max_steps : int
        Cap on the number of steps per branch.
    """

    k_fraction: float = 0.2
    tau: float = 1.0
    q: float = 16.0
    max_steps: int = 400

    def __post_init__(self):
        if not 0 < self.k_fraction <= 1:
            raise ParameterError(f"k_fraction must be in (0, 1], got {self.k_fraction}")
        if not self.tau > 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if not self.q > 0:
            raise ParameterError(f"q must be positive, got {self.q}")
        if int(self.max_steps) < 1:
            raise ParameterError("max_steps must be >= 1")

    def k_for(self, n: int, d: int) -> int:
        return int(min(n, max(d + 1, round(self.k_fraction * n))))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PrincipalCurve:
    """Polyline ordered from the negative branch end to the positive end.

    ``arc_length`` is signed and zero at the seed vertex.
    """

    vertices: np.ndarray
    tangents: np.ndarray
    arc_length: np.ndarray
    direction_sign: np.ndarray
    seed_index: int
    params: CurveParams | None = None

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def arc_range(self) -> tuple[float, float]:
        return float(self.arc_length[0]), float(self.arc_length[-1])

    @property
    def seed(self) -> np.ndarray:
        return self.vertices[self.seed_index]

    def _locate(self, s: float) -> tuple[int, float]:
        a = self.arc_length
        if s < a[0] or s > a[-1]:
            raise ExtrapolationError(
                f"arc position {s:.6g} outside traced range [{a[0]:.6g}, {a[-1]:.6g}]")
        j = int(np.searchsorted(a, s, side="right")) - 1
        j = min(max(j, 0), len(a) - 2)
        lam = (s - a[j]) / (a[j + 1] - a[j])
        return j, lam

    def point_at(self, s: float) -> np.ndarray:
        if s == 0.0:
            return self.seed.copy()
        j, lam = self._locate(s)
        return self.vertices[j] + lam * (self.vertices[j + 1] - self.vertices[j])

    def tangent_at(self, s: float) -> np.ndarray:
        j, lam = self._locate(s)
        t = (1 - lam) * self.tangents[j] + lam * self.tangents[j + 1]
        return t / np.linalg.norm(t)

    def to_json(self) -> dict:
        return {
            "vertices": self.vertices.tolist(),
            "tangents": self.tangents.tolist(),
            "arc_length": self.arc_length.tolist(),
            "seed_index": self.seed_index,
            "params": self.params.to_dict() if self.params else None,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json())

    @classmethod
    def from_json(cls, obj: dict) -> "PrincipalCurve":
        v = np.asarray(obj["vertices"], dtype=float)
        arc = np.asarray(obj["arc_length"], dtype=float)
        seed = int(obj.get("seed_index", int(np.argmin(np.abs(arc)))))
        sign = np.where(np.arange(len(arc)) < seed, -1, 1)
        params = CurveParams(**obj["params"]) if obj.get("params") else None
        return cls(v, np.asarray(obj["tangents"], dtype=float), arc, sign, seed, params)


@dataclass(frozen=True)
class GeodesicProjection:
    point: np.ndarray
    arc_position: float
    segment_index: int
    converged: bool = True


def _vertex_tangents(vertices: np.ndarray) -> np.ndarray:
    seg = np.diff(vertices, axis=0)
    seg /= np.linalg.norm(seg, axis=1, keepdims=True)
    t = np.empty_like(vertices)
    t[0] = seg[0]
    t[-1] = seg[-1]
    if len(seg) > 1:
        mid = seg[:-1] + seg[1:]
        norms = np.linalg.norm(mid, axis=1, keepdims=True)
        # a reversal makes the bisector vanish; fall back to the incoming segment
        bad = norms[:, 0] < 1e-12
        mid[bad] = seg[:-1][bad]
        norms[bad] = 1.0
        t[1:-1] = mid / norms
    return t


def _best_aligned(basis: np.ndarray, prev: np.ndarray) -> np.ndarray:
    cos = basis.T @ prev
    j = int(np.argmax(np.abs(cos)))
    e = basis[:, j]
    return e if cos[j] >= 0 else -e


def _trace_branch(pool: np.ndarray, start: np.ndarray, direction: np.ndarray,
                  k: int, params: CurveParams) -> list[np.ndarray]:
    """Grow one branch in subspace coordinates; returns vertices after ``start``."""
    m = pool.shape[1]
    tau = params.tau
    radius = 3.0 * tau
    prev_t = direction
    v = start
    out: list[np.ndarray] = []
    history = [start]
    idx, dist = knn_indices(pool, v, k)
    for _ in range(int(params.max_steps)):
        if np.count_nonzero(dist <= radius) < m + 1:
            break
        frame = pca_frame(pool[idx])
        if frame.local_variances[0] <= 0.0:
            break
        e = _best_aligned(frame.basis, prev_t)
        g = e
        if m > 1:
            # aim at the look-ahead point recentred onto its neighbourhood mean
            look = v + LOOK * (1 + params.q) * tau * e
            li, ld = knn_indices(pool, look, k)
            rel = pool - look
            along = rel @ e
            across = np.linalg.norm(rel - along[:, None] * e, axis=1)
            # thin slice across the cloud; its mean is the conditional centre
            sl = (np.abs(along) <= tau) & (across <= 2.0 * ld[-1])
            if np.count_nonzero(sl) > m:
                off = pool[sl].mean(axis=0) - look
            else:
                off = pool[li].mean(axis=0) - look
            if (off @ e) + LOOK * (1 + params.q) * tau <= 0.0:
                # the neighbourhood mean retracts behind the current vertex
                break
            off -= (off @ e) * e
            norm = np.linalg.norm(off)
            if norm > tau:
                off *= tau / norm
            g = look + off - v
            g /= np.linalg.norm(g)
        t = params.q * prev_t + g
        t /= np.linalg.norm(t)
        cand = v + tau * t
        idx, dist = knn_indices(pool, cand, k)
        if np.count_nonzero(dist <= radius) < m + 1:
            break
        gaps = np.linalg.norm(np.asarray(history) - cand, axis=1)
        if np.any(gaps < tau / 4):
            break
        out.append(cand)
        history.append(cand)
        prev_t = t
        v = cand
    return out


def trace_curve(set, seed, init_direction, subspace=None,
                params: CurveParams | None = None, k: int | None = None) -> PrincipalCurve:
    """Trace a principal curve through ``seed`` in both directions.

    Parameters
    ----------
    set : SampleSet or ndarray
        Samples the neighbourhoods are drawn from.
    seed : array_like
        First vertex; it is kept fixed.
    init_direction : array_like
        Unit vector giving the initial tangent and the positive orientation.
    subspace : ndarray, optional
        ``(d, m)`` orthonormal basis. Motion, neighbourhoods and local PCA are
        restricted to ``seed + span(subspace)``.
    params : CurveParams
    k : int, optional
        Neighbourhood size; defaults to ``params.k_for(n, m)``.
    """
    params = params or CurveParams()
    pts = set.points if isinstance(set, SampleSet) else np.asarray(set, dtype=float)
    seed = np.asarray(seed, dtype=float)
    d = pts.shape[1]
    direction = np.asarray(init_direction, dtype=float)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
        raise ParameterError("init_direction must have unit norm")
    if subspace is None:
        basis = np.eye(d)
    else:
        basis = np.asarray(subspace, dtype=float).reshape(d, -1)
    coords = (pts - seed) @ basis
    dir_sub = basis.T @ direction
    if np.linalg.norm(dir_sub) < 1 - 1e-6:
        raise ParameterError("init_direction does not lie in the subspace")
    dir_sub /= np.linalg.norm(dir_sub)
    m = basis.shape[1]
    n = coords.shape[0]
    if k is None:
        k = params.k_for(n, m)
    k = int(min(max(k, m + 1), n))
    origin = np.zeros(m)
    fwd = _trace_branch(coords, origin, dir_sub, k, params)
    bwd = _trace_branch(coords, origin, -dir_sub, k, params)
    sub = np.array(bwd[::-1] + [origin] + fwd)
    if len(sub) < 2:
        # isolated seed: fall back to a single tau step along the direction
        sub = np.array([origin, origin + params.tau * dir_sub])
    seed_index = len(bwd)
    if subspace is None:
        vertices = sub + seed
    else:
        vertices = seed + sub @ basis.T
    vertices[seed_index] = seed
    seglen = np.linalg.norm(np.diff(vertices, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seglen)])
    arc -= arc[seed_index]
    arc[seed_index] = 0.0
    sign = np.where(np.arange(len(arc)) < seed_index, -1, 1)
    return PrincipalCurve(vertices, _vertex_tangents(vertices), arc, sign,
                          seed_index, params)


def points_at(curve: PrincipalCurve, arcs) -> tuple[np.ndarray, np.ndarray]:
    """Polyline points and unit tangents at many arc positions (no range check)."""
    a = np.atleast_1d(np.asarray(arcs, dtype=float))
    S = curve.arc_length
    P = np.column_stack([np.interp(a, S, curve.vertices[:, c]) for c in range(curve.dim)])
    T = np.column_stack([np.interp(a, S, curve.tangents[:, c]) for c in range(curve.dim)])
    T /= np.linalg.norm(T, axis=1, keepdims=True)
    return P, T


def extend_curve(curve: PrincipalCurve, before: float, after: float) -> PrincipalCurve:
    """Continue both ends straight along their end tangents.

    Extensions add no turning; they only widen the range points can
    project into. New vertices are spaced at most ``tau`` apart.
    """
    tau = curve.params.tau if curve.params else max(before, after, 1.0)
    V = curve.vertices
    head = tail = np.empty((0, curve.dim))
    if before > 0:
        m = int(np.ceil(before / tau))
        steps = np.linspace(before, before / m, m)
        head = V[0] - steps[:, None] * curve.tangents[0]
    if after > 0:
        m = int(np.ceil(after / tau))
        steps = np.linspace(after / m, after, m)
        tail = V[-1] + steps[:, None] * curve.tangents[-1]
    verts = np.vstack([head, V, tail])
    seed_index = curve.seed_index + head.shape[0]
    seglen = np.linalg.norm(np.diff(verts, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seglen)])
    arc -= arc[seed_index]
    arc[seed_index] = 0.0
    tangents = np.vstack([np.repeat(curve.tangents[:1], head.shape[0], axis=0),
                          curve.tangents,
                          np.repeat(curve.tangents[-1:], tail.shape[0], axis=0)])
    sign = np.where(np.arange(len(arc)) < seed_index, -1, 1)
    return PrincipalCurve(verts, tangents, arc, sign, seed_index, curve.params)


def cover_points(curve: PrincipalCurve, X, margin: float | None = None) -> PrincipalCurve:
    """Extend ``curve`` straight until every row of ``X`` lies between its end normals."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if margin is None:
        margin = curve.params.tau if curve.params else 0.0
    after = float(np.max((X - curve.vertices[-1]) @ curve.tangents[-1]))
    before = float(np.max((curve.vertices[0] - X) @ curve.tangents[0]))
    after = max(after, 0.0) + margin
    before = max(before, 0.0) + margin
    return extend_curve(curve, before, after)


def geodesic_project_many(curve: PrincipalCurve, X, chunk: int = 2048):
    """Project rows of ``X`` onto ``curve``.

    The foot is the polyline point where the residual is orthogonal to the
    interpolated tangent. On each segment this condition is a quadratic in
    the segment parameter and is solved exactly; among candidate segments the
    foot nearest to the point wins. Points beyond either end are clamped to
    the nearest polyline point and flagged.

    Returns
    -------
    points, arcs, segments, converged
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    V, T, S = curve.vertices, curve.tangents, curve.arc_length
    D = np.diff(V, axis=0)
    dT = np.diff(T, axis=0)
    seglen = np.linalg.norm(D, axis=1)
    nseg = D.shape[0]
    out_p = np.empty_like(X)
    out_s = np.empty(X.shape[0])
    out_j = np.empty(X.shape[0], dtype=int)
    out_c = np.empty(X.shape[0], dtype=bool)
    DT0 = np.einsum("jd,jd->j", D, T[:-1])
    DdT = np.einsum("jd,jd->j", D, dT)
    for lo in range(0, X.shape[0], chunk):
        x = X[lo:lo + chunk]
        A = x[:, None, :] - V[None, :-1, :]                      # (n, s, d)
        f = np.einsum("nsd,sd->ns", x[:, None, :] - V[None, :, :], T)  # at vertices
        f0, f1 = f[:, :-1], f[:, 1:]
        cand = (f0 >= 0) & (f1 < 0)
        cand[:, -1] |= (f1[:, -1] == 0) & (f0[:, -1] >= 0)
        c0 = f0
        c1 = np.einsum("nsd,sd->ns", A, dT) - DT0[None, :]
        c2 = -DdT[None, :]
        lam = _quadratic_root(c2, c1, c0, f1)
        lam = np.where(cand, lam, 0.0)
        foot = V[None, :-1, :] + lam[..., None] * D[None, :, :]
        dist = np.linalg.norm(x[:, None, :] - foot, axis=2)
        dist = np.where(cand, dist, np.inf)
        j = np.argmin(dist, axis=1)
        ok = np.isfinite(dist[np.arange(len(x)), j])
        lam_j = lam[np.arange(len(x)), j]
        # clamp unresolved points to the nearest polyline point
        if not ok.all():
            bad = np.flatnonzero(~ok)
            xb = x[bad]
            AB = xb[:, None, :] - V[None, :-1, :]
            t = np.einsum("nsd,sd->ns", AB, D) / (seglen ** 2)[None, :]
            t = np.clip(t, 0.0, 1.0)
            fb = V[None, :-1, :] + t[..., None] * D[None, :, :]
            db = np.linalg.norm(xb[:, None, :] - fb, axis=2)
            jb = np.argmin(db, axis=1)
            j[bad] = jb
            lam_j[bad] = t[np.arange(len(bad)), jb]
        out_j[lo:lo + chunk] = j
        out_c[lo:lo + chunk] = ok
        out_p[lo:lo + chunk] = V[j] + lam_j[:, None] * D[j]
        out_s[lo:lo + chunk] = S[j] + lam_j * (S[j + 1] - S[j])
    # exact hits on the last vertex
    out_j = np.minimum(out_j, nseg - 1)
    return out_p, out_s, out_j, out_c


def _quadratic_root(a, b, c, f1):
    """Root in [0, 1] of ``a l^2 + b l + c`` given ``c >= 0`` and ``f(1) = f1 < 0``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        lin = np.where(b != 0, -c / b, 0.0)
        disc = np.sqrt(np.maximum(b * b - 4 * a * c, 0.0))
        # numerically stable pair of roots
        qq = -0.5 * (b + np.where(b >= 0, disc, -disc))
        r1 = np.where(a != 0, qq / a, np.inf)
        r2 = np.where(qq != 0, c / qq, np.inf)
        small = np.abs(a) <= 1e-14 * (np.abs(b) + np.abs(c) + 1e-300)
        in1 = (r1 >= 0) & (r1 <= 1)
        in2 = (r2 >= 0) & (r2 <= 1)
        quad = np.where(in2, r2, np.where(in1, r1, np.nan))
        lam = np.where(small, lin, quad)
        # bisection-free fallback: secant between the bracketing endpoints
        secant = c / (c - f1)
        lam = np.where(np.isfinite(lam) & (lam >= 0) & (lam <= 1), lam, secant)
    return np.clip(lam, 0.0, 1.0)


def geodesic_project(curve: PrincipalCurve, x) -> GeodesicProjection:
    """Geodesic projection of a single point onto ``curve``."""
    p, s, j, ok = geodesic_project_many(curve, np.asarray(x, dtype=float)[None, :])
    return GeodesicProjection(point=p[0], arc_position=float(s[0]),
                              segment_index=int(j[0]), converged=bool(ok[0]))


class ArcDensity:
    """Cumulative density-weighted length along a one-dimensional coordinate.

    The marginal density of ``values`` (balloon kNN with ``k`` neighbours) is
    raised to ``gamma`` and integrated with the trapezoid rule on a fixed
    grid; the cumulative is anchored so that ``cumulative(0) == 0``. Between
    grid nodes the cumulative is linear, which makes it exactly additive and
    exactly invertible. ``gamma == 0`` short-circuits to plain length.
    """

    def __init__(self, values, gamma: float, k: int, lo: float, hi: float,
                 n_grid: int = 2049):
        if gamma < 0:
            raise ParameterError("gamma must be >= 0")
        if not lo <= 0.0 <= hi:
            raise ParameterError("grid must contain the anchor 0")
        self.gamma = float(gamma)
        self.lo, self.hi = float(lo), float(hi)
        vals = np.sort(np.asarray(values, dtype=float).ravel())
        self.n_values = vals.size
        self.k = int(min(max(k, 1), vals.size))
        if self.gamma == 0.0:
            self.grid = self.cum = None
            return
        grid = np.linspace(lo, hi, n_grid)
        i0 = int(np.argmin(np.abs(grid)))
        grid[i0] = 0.0
        w = knn_density_sorted(vals, grid, self.k) ** self.gamma
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (w[1:] + w[:-1]) * np.diff(grid))])
        cum -= cum[i0]
        cum[i0] = 0.0
        self.grid, self.cum = grid, cum

    def _check(self, s):
        s = np.asarray(s, dtype=float)
        if np.any((s < self.lo) | (s > self.hi)):
            raise ExtrapolationError(
                f"position outside tabulated range [{self.lo:.6g}, {self.hi:.6g}]")
        return s

    def cumulative(self, s):
        s = self._check(s)
        if self.grid is None:
            return s * 1.0
        return np.interp(s, self.grid, self.cum)

    def density_weight(self, s):
        """Local line element ``p(s)^gamma`` (slope of the cumulative)."""
        s = self._check(s)
        if self.grid is None:
            return np.ones_like(s)
        return np.interp(s, self.grid[1:], np.diff(self.cum) / np.diff(self.grid))

    @property
    def bounds(self) -> tuple[float, float]:
        if self.grid is None:
            return self.lo, self.hi
        return float(self.cum[0]), float(self.cum[-1])

    def inverse(self, v):
        v = np.asarray(v, dtype=float)
        lo, hi = self.bounds
        if np.any((v < lo) | (v > hi)):
            raise RangeError(
                f"weighted length {np.ravel(v)[0]:.6g} beyond reachable [{lo:.6g}, {hi:.6g}]",
                bound=(lo, hi))
        if self.grid is None:
            return v * 1.0
        return np.interp(v, self.cum, self.grid)

    def length(self, a, b):
        return self.cumulative(b) - self.cumulative(a)

    def cumulative_ext(self, s):
        """Cumulative with linear continuation past the table; returns (value, inside)."""
        s = np.asarray(s, dtype=float)
        inside = (s >= self.lo) & (s <= self.hi)
        if self.grid is None:
            return s * 1.0, inside
        val = np.interp(s, self.grid, self.cum)
        g0 = (self.cum[1] - self.cum[0]) / (self.grid[1] - self.grid[0])
        g1 = (self.cum[-1] - self.cum[-2]) / (self.grid[-1] - self.grid[-2])
        val = np.where(s < self.lo, self.cum[0] + g0 * (s - self.lo), val)
        val = np.where(s > self.hi, self.cum[-1] + g1 * (s - self.hi), val)
        return val, inside


@dataclass
class _DensityCache:
    lock: threading.Lock = field(default_factory=threading.Lock)
    store: dict = field(default_factory=dict)


_density_cache = _DensityCache()


def curve_density(curve: PrincipalCurve, set: SampleSet, gamma: float, k: int) -> ArcDensity:
    """Density snapshot of ``set``'s projections along ``curve`` (cached)."""
    key = (id(curve), id(set), float(gamma), int(k))
    with _density_cache.lock:
        hit = _density_cache.store.get(key)
    if hit is not None and hit[0] is curve and hit[1] is set:
        return hit[2]
    _, arcs, _, _ = geodesic_project_many(curve, set.points)
    lo, hi = curve.arc_range
    dens = ArcDensity(arcs, gamma, k, lo, hi)
    with _density_cache.lock:
        _density_cache.store[key] = (curve, set, dens)
    return dens


def weighted_length(curve: PrincipalCurve, set: SampleSet, gamma: float, k: int,
                    from_arc: float, to_arc: float) -> float:
    """Integral of ``p(s)**gamma`` along the curve between two arc positions."""
    if from_arc == to_arc:
        lo, hi = curve.arc_range
        if not lo <= from_arc <= hi:
            raise ExtrapolationError("arc position outside traced range")
        return 0.0
    if gamma == 0:
        lo, hi = curve.arc_range
        for s in (from_arc, to_arc):
            if not lo <= s <= hi:
                raise ExtrapolationError("arc position outside traced range")
        return float(to_arc - from_arc)
    dens = curve_density(curve, set, gamma, k)
    return float(dens.length(from_arc, to_arc))
