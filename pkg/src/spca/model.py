"""The fitted SPCA transform, its inverse and a finite-difference Jacobian.

Response ``i`` is the density-weighted length travelled along the ``i``-th
curve of a path that starts at the origin and branches off, at each foot,
into the orthogonal complement of the tangents gathered so far. The last
level of a ``d > 1`` model is a straight segment: one direction is left.

Curves and conditional densities beyond the first level are tabulated at
grid nodes spaced ``tau / 2`` along the parent coordinate. A query blends
the tables (and the node curves) of the surrounding nodes multilinearly,
which keeps the transform continuous and lets the inverse retrace exactly
the path the forward transform used.
"""

from __future__ import annotations

import hashlib
import json
import math
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.spatial import cKDTree

from .core import (RANK_TOL, SampleSet, knn_density_nd, local_pca_frame,
                   marginal_entropy_1d, nearest_window, pca_frame, read_csv)
from .curves import (ArcDensity, CurveParams, PrincipalCurve, _vertex_tangents,
                     cover_points, geodesic_project_many, points_at, trace_curve)
from .errors import (ConfigError, DegenerateDataError, FitError, NonConvergedError,
                     OutOfSupportError, ParameterError, RangeError)

SUPPORT_K = 10
SUPPORT_FACTOR = 3.0
MIN_SLAB = 50
MIN_DENSITY_K = 10


@dataclass(frozen=True)
class ResponseVector:
    r: np.ndarray
    converged: np.ndarray

    @property
    def ok(self) -> bool:
        return bool(np.all(self.converged))


def _complement(tangents: list[np.ndarray], d: int) -> np.ndarray:
    """Orthonormal basis ``(d, d - len(tangents))`` of the complement."""
    if not tangents:
        return np.eye(d)
    A = np.column_stack(tangents)
    q, _ = np.linalg.qr(np.column_stack([A, np.eye(d)]))
    return q[:, len(tangents):d]


def _aligned(v: np.ndarray, ref: np.ndarray) -> np.ndarray:
    return -v if v @ ref < 0 else v


class _Node:
    """Tables for one coordinate below a fixed branch point.

    ``curve`` is ``None`` on the final straight level. ``values`` are the
    slab members' own coordinates on this level.
    """

    def __init__(self, seed, prev, slab, curve, normal, values, density,
                 proj=None, feet_t=None, basis=None):
        self.seed = seed
        self.prev = prev
        self.slab = slab
        self.curve = curve
        self.normal = normal
        self.values = values
        self.density = density
        self.proj = proj
        self.feet_t = feet_t
        self.basis = basis
        order = np.argsort(values, kind="stable")
        self.sorted_values = values[order]
        self.sorted_slab = slab[order]


class SpcaModel:
    """A fitted transform. Build with :func:`fit` or :meth:`load`.

    ``dim_order[i]`` is the index (into ``basis`` columns, the local PCA axes
    at the origin) of the direction followed by response ``i``; ``scales[i]``
    multiplies response ``i``.
    """

    def __init__(self, training: SampleSet, gamma: float, origin, dim_order, scales,
                 curve_params: CurveParams, k_fraction_density: float = 0.02,
                 slab_fraction: float = 0.1, basis=None, training_ref: dict | None = None):
        if gamma < 0:
            raise ParameterError("gamma must be >= 0")
        d = training.dim
        self.training = training
        self.gamma = float(gamma)
        self.origin = np.asarray(origin, dtype=float).reshape(d)
        self.dim_order = [int(i) for i in dim_order]
        if sorted(self.dim_order) != list(range(d)):
            raise ParameterError(f"dim_order {self.dim_order} is not a permutation of 0..{d - 1}")
        self.scales = np.asarray(scales, dtype=float).reshape(d)
        if np.any(self.scales <= 0):
            raise ParameterError("scales must be positive")
        self.curve_params = curve_params
        self.k_fraction_density = float(k_fraction_density)
        self.slab_fraction = float(slab_fraction)
        if basis is None:
            basis = local_pca_frame(training, self.origin,
                                    curve_params.k_for(training.n, d)).basis
        self.basis = np.asarray(basis, dtype=float).reshape(d, d)
        self.training_ref = training_ref or {}
        self.spacing = curve_params.tau / 2.0
        self._nodes: dict[tuple, _Node] = {}
        self._lock = threading.Lock()
        self._tree = None
        self._support_radius = None
        self._root = self._build_root()

    @property
    def dim(self) -> int:
        return self.training.dim

    def _density_k(self, n: int) -> int:
        return int(min(n, max(MIN_DENSITY_K, round(self.k_fraction_density * n))))

    def _ref(self, level: int) -> np.ndarray:
        return self.basis[:, self.dim_order[level]]

    # ------------------------------------------------------------------
    # tables
    # ------------------------------------------------------------------

    def _curve_node(self, seed, prev, slab, level):
        pts = self.training.points[slab]
        d = self.dim
        Q = _complement(prev, d)
        ref = Q @ (Q.T @ self._ref(level))
        nref = np.linalg.norm(ref)
        ref = ref / nref if nref > 1e-12 else Q[:, 0]
        sub = None if not prev else Q
        curve = trace_curve(pts, seed, ref, subspace=sub, params=self.curve_params)
        proj = seed + (pts - seed) @ Q @ Q.T
        curve = cover_points(curve, proj)
        _, arcs, _, _ = geodesic_project_many(curve, proj)
        _, ft = points_at(curve, arcs)
        lo, hi = curve.arc_range
        dens = ArcDensity(arcs, self.gamma, self._density_k(len(slab)), lo, hi)
        return _Node(seed, prev, slab, curve, None, arcs, dens, proj=proj,
                     feet_t=ft, basis=Q)

    def _build_root(self) -> _Node:
        slab = np.arange(self.training.n)
        return self._curve_node(self.origin, [], slab, 0)

    def _child(self, path: tuple, parent: _Node, j: int) -> _Node:
        key = path + (j,)
        node = self._nodes.get(key)
        if node is not None:
            return node
        level = len(key)
        d = self.dim
        lo, hi = parent.curve.arc_range
        a_j = min(max(j * self.spacing, lo), hi)
        P, T = points_at(parent.curve, [a_j])
        seed, t = P[0], T[0]
        if j == 0:
            seed = parent.curve.point_at(0.0)
        prev = parent.prev + [t]
        n_par = len(parent.slab)
        size = int(min(n_par, max(MIN_SLAB, round(self.slab_fraction * n_par))))
        start, _ = nearest_window(parent.sorted_values, [a_j], size)
        slab = np.sort(parent.sorted_slab[start[0]:start[0] + size])
        if level < d - 1:
            node = self._curve_node(seed, prev, slab, level)
        else:
            # straight final level: each member's offset from its own foot
            pos = np.searchsorted(parent.slab, slab)
            f = parent.proj[pos]
            feet, ft = points_at(parent.curve, parent.values[pos])
            ref = self._ref(level)
            normals = np.array([_aligned(_complement(parent.prev + [tt], d)[:, 0], ref)
                                for tt in ft])
            values = np.einsum("nd,nd->n", f - feet, normals)
            normal = _aligned(_complement(prev, d)[:, 0], ref)
            span = max(values.max(), 0.0) - min(values.min(), 0.0)
            lo_v = min(values.min(), 0.0) - 0.5 * span
            hi_v = max(values.max(), 0.0) + 0.5 * span
            dens = ArcDensity(values, self.gamma, self._density_k(len(slab)), lo_v, hi_v)
            node = _Node(seed, prev, slab, None, normal, values, dens)
        with self._lock:
            self._nodes[key] = node
        return node

    def _children(self, corners, coord):
        out = []
        g = coord / self.spacing
        j = math.floor(g)
        v = g - j
        for path, node, w in corners:
            for jj, ww in ((j, 1.0 - v), (j + 1, v)):
                if ww * w > 0.0:
                    out.append((path + (jj,), self._child(path, node, jj), w * ww))
        return out

    def _blend(self, corners, foot, prev):
        """Weighted average of the corner curves, moved to pass through ``foot``."""
        lo = max(c[1].curve.arc_range[0] for c in corners)
        hi = min(c[1].curve.arc_range[1] for c in corners)
        step = self.spacing
        a = np.concatenate([-np.arange(0.0, -lo, step)[:0:-1], np.arange(0.0, hi, step)])
        if a[0] > lo:
            a = np.concatenate([[lo], a])
        if a[-1] < hi:
            a = np.concatenate([a, [hi]])
        V = np.zeros((a.size, self.dim))
        for _, node, w in corners:
            P, _ = points_at(node.curve, a)
            V += w * (P - node.seed)
        Q = _complement(prev, self.dim)
        V = foot + V @ Q @ Q.T
        i0 = int(np.flatnonzero(a == 0.0)[0])
        V[i0] = foot
        keep = np.concatenate([[True], np.linalg.norm(np.diff(V, axis=0), axis=1) > 0])
        keep[i0] = True
        V, a = V[keep], a[keep]
        seed_index = int(np.flatnonzero(a == 0.0)[0])
        sign = np.where(np.arange(a.size) < seed_index, -1, 1)
        return PrincipalCurve(V, _vertex_tangents(V), a, sign, seed_index, self.curve_params)

    @staticmethod
    def _mix(corners, coord):
        val = 0.0
        inside = True
        for _, node, w in corners:
            g, ins = node.density.cumulative_ext(coord)
            val += w * float(g)
            inside &= bool(ins)
        return val, inside

    # ------------------------------------------------------------------
    # direct transform
    # ------------------------------------------------------------------

    def _level_curve(self, i, corners, foot, prev):
        if i == 0:
            return self._root.curve
        return self._blend(corners, foot, prev)

    def _forward(self, x, root_proj=None):
        d = self.dim
        r = np.zeros(d)
        conv = np.ones(d, dtype=bool)
        corners = [((), self._root, 1.0)]
        foot = self.origin
        prev: list[np.ndarray] = []
        for i in range(d):
            line = i > 0 and i == d - 1
            if line:
                n = _aligned(_complement(prev, d)[:, 0], self._ref(i))
                coord = float((x - foot) @ n)
                ok = True
            else:
                curve = self._level_curve(i, corners, foot, prev)
                if i == 0 and root_proj is not None:
                    p, coord, ok = root_proj
                else:
                    p, s, _, c = geodesic_project_many(curve, x[None, :])
                    p, coord, ok = p[0], float(s[0]), bool(c[0])
                _, t = points_at(curve, [coord])
                t = t[0]
            val, inside = self._mix(corners, coord)
            r[i] = self.scales[i] * val
            conv[i] = ok and inside
            if i < d - 1:
                corners = self._children(corners, coord)
                prev = prev + [t]
                foot = p
        return r, conv

    def _support(self):
        if self._tree is None:
            tree = cKDTree(self.training.points)
            k = min(SUPPORT_K + 1, self.training.n)
            dist, _ = tree.query(self.training.points, k=[k])
            self._support_radius = SUPPORT_FACTOR * float(np.median(dist[:, 0]))
            self._tree = tree
        return self._tree, self._support_radius

    def in_support(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        tree, rad = self._support()
        k = min(SUPPORT_K, self.training.n)
        dist, _ = tree.query(X, k=[k])
        return dist[:, 0] <= rad

    def transform(self, x) -> ResponseVector:
        x = np.asarray(x, dtype=float).reshape(self.dim)
        if not np.all(np.isfinite(x)):
            raise ParameterError("x must be finite")
        if not self.in_support(x)[0]:
            raise OutOfSupportError(f"point {x.tolist()} is outside the training support")
        r, conv = self._forward(x)
        return ResponseVector(r, conv)

    def transform_many(self, X):
        """Responses for many rows.

        Returns
        -------
        R : (n, d) array
        converged : (n, d) bool array
        support : (n,) bool array
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dim:
            raise ParameterError(f"expected {self.dim} columns, got {X.shape[1]}")
        P, S, _, C = geodesic_project_many(self._root.curve, X)
        R = np.empty_like(X)
        conv = np.empty(X.shape, dtype=bool)
        for n in range(X.shape[0]):
            R[n], conv[n] = self._forward(X[n], root_proj=(P[n], float(S[n]), bool(C[n])))
        return R, conv, self.in_support(X)

    # ------------------------------------------------------------------
    # inverse
    # ------------------------------------------------------------------

    def _solve(self, corners, target, lo, hi, level):
        if target == 0.0:
            return 0.0
        for _, node, _ in corners:
            lo = max(lo, node.density.lo)
            hi = min(hi, node.density.hi)
        if self.gamma == 0.0:
            if not lo <= target <= hi:
                raise RangeError(f"response {level}: length {target:.6g} beyond reachable "
                                 f"[{lo:.6g}, {hi:.6g}]", bound=(lo, hi))
            return float(target)
        g_lo, _ = self._mix(corners, lo)
        g_hi, _ = self._mix(corners, hi)
        if not g_lo <= target <= g_hi:
            s = self.scales[level]
            raise RangeError(f"response {level}: {target * s:.6g} beyond reachable "
                             f"[{g_lo * s:.6g}, {g_hi * s:.6g}]", bound=(g_lo * s, g_hi * s))
        if target == g_lo:
            return lo
        if target == g_hi:
            return hi
        return float(brentq(lambda c: self._mix(corners, c)[0] - target, lo, hi,
                            xtol=1e-13, rtol=4 * np.finfo(float).eps, maxiter=200))

    def inverse(self, r) -> np.ndarray:
        r = np.asarray(r.r if isinstance(r, ResponseVector) else r, dtype=float).reshape(self.dim)
        if not np.all(np.isfinite(r)):
            raise ParameterError("response must be finite")
        d = self.dim
        corners = [((), self._root, 1.0)]
        foot = self.origin
        prev: list[np.ndarray] = []
        for i in range(d):
            target = r[i] / self.scales[i]
            if i > 0 and i == d - 1:
                n = _aligned(_complement(prev, d)[:, 0], self._ref(i))
                coord = self._solve(corners, target, -np.inf, np.inf, i)
                return foot + coord * n
            curve = self._level_curve(i, corners, foot, prev)
            lo, hi = curve.arc_range
            coord = self._solve(corners, target, lo, hi, i)
            P, T = points_at(curve, [coord])
            p = curve.point_at(0.0) if coord == 0.0 else P[0]
            if i < d - 1:
                corners = self._children(corners, coord)
                prev = prev + [T[0]]
            foot = p
        return foot

    # ------------------------------------------------------------------
    # Jacobian
    # ------------------------------------------------------------------

    def jacobian_fd(self, x, h: float) -> np.ndarray:
        """Central-difference Jacobian; row ``i`` is the gradient of response ``i``."""
        if not h > 0:
            raise ParameterError("h must be positive")
        x = np.asarray(x, dtype=float).reshape(self.dim)
        d = self.dim
        probes = []
        names = []
        for j in range(d):
            for sgn in (1, -1):
                probes.append(x + sgn * h * np.eye(d)[j])
                names.append(f"x{'+' if sgn > 0 else '-'}h*e{j}")
        probes = np.array(probes)
        sup = self.in_support(probes)
        J = np.empty((d, d))
        for j in range(d):
            outs = []
            for m in (2 * j, 2 * j + 1):
                if not sup[m]:
                    raise NonConvergedError(f"probe {names[m]} is outside the support")
                r, conv = self._forward(probes[m])
                if not conv.all():
                    raise NonConvergedError(f"probe {names[m]} did not converge")
                outs.append(r)
            J[:, j] = (outs[0] - outs[1]) / (2 * h)
        return J

    # ------------------------------------------------------------------
    # serialisation
    # ------------------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "gamma": self.gamma,
            "origin": self.origin.tolist(),
            "dim_order": self.dim_order,
            "scales": self.scales.tolist(),
            "basis": self.basis.tolist(),
            "curve_params": self.curve_params.to_dict(),
            "k_fraction_density": self.k_fraction_density,
            "slab_fraction": self.slab_fraction,
            "training_ref": dict(self.training_ref, sha256=self.training.digest()),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def from_json(cls, obj: dict, training: SampleSet | None = None,
                  base_dir=None) -> "SpcaModel":
        ref = obj.get("training_ref", {})
        if training is None:
            p = ref.get("path")
            if not p:
                raise ConfigError("model has no training path; pass the training set")
            p = Path(p)
            if not p.is_absolute() and base_dir is not None:
                p = Path(base_dir) / p
            training = read_csv(p)
        want = ref.get("sha256")
        if want and want != training.digest():
            raise ConfigError("training data hash does not match the model's training_ref")
        try:
            return cls(training, obj["gamma"], obj["origin"], obj["dim_order"], obj["scales"],
                       CurveParams(**obj["curve_params"]),
                       obj.get("k_fraction_density", 0.02), obj.get("slab_fraction", 0.1),
                       basis=obj.get("basis"),
                       training_ref={k: v for k, v in ref.items() if k != "sha256"})
        except KeyError as exc:
            raise ConfigError(f"model JSON lacks field {exc}") from None

    @classmethod
    def load(cls, path, training: SampleSet | None = None) -> "SpcaModel":
        obj = json.loads(Path(path).read_text())
        return cls.from_json(obj, training, base_dir=Path(path).parent)


def _origin(set: SampleSet, mode, k: int) -> np.ndarray:
    if isinstance(mode, str):
        if mode == "mean":
            return set.points.mean(axis=0)
        if mode == "mode":
            dens = knn_density_nd(set.points, set.points, k, exclude_self=True)
            return set.points[int(np.argmax(dens))].copy()
        raise ParameterError(f"unknown origin mode {mode!r}")
    o = np.asarray(mode, dtype=float).reshape(-1)
    if o.size != set.dim or not np.all(np.isfinite(o)):
        raise ParameterError("user origin must be a finite d-vector")
    return o


def fit(set: SampleSet, gamma: float, curve_params: CurveParams | None = None,
        origin_mode="mean", k_fraction_density: float = 0.02,
        slab_fraction: float = 0.1, training_path=None) -> SpcaModel:
    """Fit an SPCA model.

    ``origin_mode`` is ``"mean"``, ``"mode"`` or an explicit d-vector.
    Dimensions are ordered by decreasing entropy of the training projections
    onto the curves drawn at the origin; scales follow the transform-coding
    bit allocation on the spread of the metric coordinate along each curve,
    normalised to unit product.
    """
    params = curve_params or CurveParams()
    n, d = set.n, set.dim
    if gamma < 0:
        raise ParameterError("gamma must be >= 0")
    if n < 10 * d:
        raise ParameterError(f"need at least 10*d = {10 * d} samples, got {n}")
    glob = pca_frame(set.points)
    top = glob.local_variances[0]
    for j, v in enumerate(glob.local_variances):
        if top <= 0 or v <= RANK_TOL * top:
            raise FitError(f"degenerate data: principal direction {j + 1} of {d} "
                           "has zero variance")
    k = params.k_for(n, d)
    origin = _origin(set, origin_mode, k)
    frame = local_pca_frame(set, origin, k)
    if frame.degenerate:
        j = int(np.flatnonzero(frame.local_variances <= RANK_TOL * frame.local_variances[0])[0])
        raise FitError(f"degenerate neighbourhood at the origin: local direction {j + 1} "
                       "has zero variance")
    B = frame.basis
    k_density = int(min(n, max(MIN_DENSITY_K, round(k_fraction_density * n))))
    ent = np.empty(d)
    sig = np.empty(d)
    for j in range(d):
        sub = B[:, j:] if j > 0 else None
        curve = trace_curve(set, origin, B[:, j], subspace=sub, params=params)
        proj = set.points if sub is None else origin + (set.points - origin) @ sub @ sub.T
        curve = cover_points(curve, proj)
        _, arcs, _, _ = geodesic_project_many(curve, proj)
        # spread in the model's own metric, so responses have comparable units
        dens = ArcDensity(arcs, gamma, k_density, min(arcs.min(), 0.0), max(arcs.max(), 0.0))
        sig[j] = dens.cumulative(arcs).std()
        if sig[j] <= 0:
            raise FitError(f"degenerate data: no spread along curve {j + 1}")
        try:
            ent[j] = marginal_entropy_1d(arcs)
        except DegenerateDataError:
            ent[j] = -np.inf
    order = sorted(range(d), key=lambda j: (-ent[j], j))
    s = sig[order]
    scales = s / math.exp(np.mean(np.log(s)))
    ref = {}
    if training_path is not None:
        ref["path"] = str(training_path)
    return SpcaModel(set, gamma, origin, order, scales, params, k_fraction_density,
                     slab_fraction, basis=B, training_ref=ref)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
