"""Seeded synthetic ensembles: the curved gamba set, an undulated Lambertian
surface, and colour-like ensembles around an illuminant axis."""

from __future__ import annotations

import math
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .core import SampleSet
from .errors import ParameterError

ILLUMINANT_GAINS = {
    "D65-like": (1.0, 1.0, 1.0),
    "A-like": (1.35, 1.0, 0.45),
}


class _Spec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GambaSpec(_Spec):
    """Curved two-dimensional set: circular backbone, growing transverse spread.

    The transverse law is Laplacian on the first ``split`` fraction of the
    arc and uniform on the rest. Its standard deviation grows linearly from
    ``base_std`` at the start to ``variance_growth * base_std`` at the end.
    Normalised arc positions are ``U ** arc_profile`` with ``U`` uniform, so
    ``arc_profile > 1`` crowds samples towards the narrow start.
    """

    kind: Literal["gamba"] = "gamba"
    n: int = Field(10000, ge=100)
    seed: int = 0
    arc_radius: float = Field(3.0, gt=0)
    arc_angle_deg: float = Field(120.0, gt=0, le=300)
    variance_growth: float = Field(3.0, gt=0)
    base_std: float = Field(0.15, gt=0)
    split: float = Field(0.5, gt=0, lt=1)
    arc_profile: float = Field(1.0, gt=0)


class SurfaceSpec(_Spec):
    """Triangular-wave Lambertian surface with a smooth reflectance field."""

    kind: Literal["surface"] = "surface"
    illuminant: Literal["D65-like", "A-like"] = "D65-like"
    gains: tuple[float, float, float] | None = None
    tilt_deg: float = 11.0
    undulation_period: float = Field(1.0, gt=0)
    undulation_amplitude: float = Field(0.15, ge=0)
    reflectance_variation: float = Field(0.3, ge=0)
    channel_correlation: float = Field(0.0, ge=0, le=1)
    n: int = Field(5000, ge=1)
    seed: int = 0
    reflectance_seed: int | None = None

    @field_validator("gains")
    @classmethod
    def _positive(cls, v):
        if v is not None and min(v) <= 0:
            raise ValueError("gains must be strictly positive")
        return v

    def gain_triple(self) -> np.ndarray:
        return np.asarray(self.gains if self.gains is not None
                          else ILLUMINANT_GAINS[self.illuminant], dtype=float)


class EnsembleSpec(_Spec):
    """Colour-like cloud around an illuminant axis in tristimulus space."""

    kind: Literal["ensemble"] = "ensemble"
    axis: tuple[float, float, float] = (1.0, 1.0, 1.0)
    saturation_decay: float = Field(4.0, gt=0)
    luminance_law: Literal["lognormal", "exponential"] = "lognormal"
    luminance_params: tuple[float, ...] = (0.0, 0.35)
    chroma_aspect: float = Field(1.0, gt=0)
    n: int = Field(5000, ge=1000)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if np.linalg.norm(self.axis) <= 0:
            raise ValueError("axis must be nonzero")
        need = 2 if self.luminance_law == "lognormal" else 1
        if len(self.luminance_params) != need:
            raise ValueError(f"{self.luminance_law} luminance needs {need} parameters")
        return self


def transverse_std(spec: GambaSpec, t) -> np.ndarray:
    """Transverse standard deviation at normalised arc position ``t`` in [0, 1]."""
    return spec.base_std * (1.0 + (spec.variance_growth - 1.0) * np.asarray(t, dtype=float))


def gamba_backbone(spec: GambaSpec, t) -> tuple[np.ndarray, np.ndarray]:
    """Backbone points and unit outward normals at normalised positions ``t``."""
    theta = math.radians(spec.arc_angle_deg)
    phi = math.pi / 2 + theta / 2 - theta * np.asarray(t, dtype=float)
    normal = np.column_stack([np.cos(phi), np.sin(phi)])
    return spec.arc_radius * normal, normal


def gen_gamba(spec: GambaSpec) -> SampleSet:
    rng = np.random.default_rng(spec.seed)
    t = rng.uniform(0.0, 1.0, spec.n) ** spec.arc_profile
    std = transverse_std(spec, t)
    lap = rng.laplace(0.0, 1.0 / math.sqrt(2.0), spec.n)
    uni = rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), spec.n)
    u = std * np.where(t < spec.split, lap, uni)
    base, normal = gamba_backbone(spec, t)
    return SampleSet(base + u[:, None] * normal, label="gamba")


def _facet_slope(spec: SurfaceSpec) -> float:
    # height rises by the amplitude over half a period
    return 2.0 * spec.undulation_amplitude / spec.undulation_period


def facet_shading(spec: SurfaceSpec) -> tuple[float, float]:
    """Lambert shading of the rising and the falling facet."""
    g = _facet_slope(spec)
    tilt = math.radians(spec.tilt_deg)
    light = np.array([math.sin(tilt), math.cos(tilt)])
    out = []
    for slope in (g, -g):
        nrm = np.array([-slope, 1.0]) / math.hypot(slope, 1.0)
        out.append(float(max(nrm @ light, 0.0)))
    return out[0], out[1]


def _smooth_field(rng, xy: np.ndarray) -> np.ndarray:
    # four random plane waves, unit-ish amplitude
    field = np.zeros(xy.shape[0])
    for _ in range(4):
        freq = rng.normal(0.0, 1.0, 2)
        phase = rng.uniform(0, 2 * math.pi)
        field += np.sin(xy @ freq + phase)
    return field / 4.0


def _reflectance(spec: SurfaceSpec, xy: np.ndarray) -> np.ndarray:
    """Grey base level plus a field shared by all channels (weight
    ``channel_correlation``) and a channel-specific one."""
    rs = spec.reflectance_seed if spec.reflectance_seed is not None else spec.seed + 7919
    rng = np.random.default_rng(rs)
    rho = spec.channel_correlation
    base = rng.uniform(0.4, 0.6)
    common = _smooth_field(rng, xy)
    out = np.empty((xy.shape[0], 3))
    for c in range(3):
        own = _smooth_field(rng, xy)
        field = rho * common + math.sqrt(1.0 - rho * rho) * own
        out[:, c] = base + spec.reflectance_variation * field
    return np.clip(out, 0.05, 0.95)


def surface_positions(spec: SurfaceSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    return rng.uniform(0.0, 10.0 * spec.undulation_period, (spec.n, 2))


def gen_undulated_surface(spec: SurfaceSpec) -> SampleSet:
    """Tristimulus = reflectance * gains * shading at random surface positions."""
    s_up, s_down = facet_shading(spec)
    if min(s_up, s_down) <= 0:
        raise ParameterError("a facet faces away from the light; shading would vanish")
    xy = surface_positions(spec)
    phase = (xy[:, 0] / spec.undulation_period) % 1.0
    shading = np.where(phase < 0.5, s_up, s_down)
    if spec.undulation_amplitude == 0 and spec.tilt_deg == 0:
        shading = np.ones(spec.n)
    pts = _reflectance(spec, xy) * spec.gain_triple() * shading[:, None]
    return SampleSet(pts, label=f"surface-{spec.illuminant}")


def ensemble_frame(axis) -> np.ndarray:
    """Orthonormal ``(3, 3)`` frame whose first column is the illuminant axis."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    helper = np.array([1.0, -1.0, 0.0]) if abs(a[2]) > 0.9 else np.array([0.0, 0.0, 1.0])
    e1 = helper - (helper @ a) * a
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(a, e1)
    return np.column_stack([a, e1, e2])


def gen_color_ensemble(spec: EnsembleSpec) -> SampleSet:
    """Luminance along the axis, saturation ~ Exponential(rate=saturation_decay)."""
    rng = np.random.default_rng(spec.seed)
    if spec.luminance_law == "lognormal":
        mu, sigma = spec.luminance_params
        lum = rng.lognormal(mu, sigma, spec.n)
    else:
        (scale,) = spec.luminance_params
        lum = rng.exponential(scale, spec.n)
    sat = rng.exponential(1.0 / spec.saturation_decay, spec.n)
    hue = rng.uniform(0.0, 2 * math.pi, spec.n)
    F = ensemble_frame(spec.axis)
    chroma = np.column_stack([np.cos(hue), spec.chroma_aspect * np.sin(hue)]) * sat[:, None]
    pts = lum[:, None] * F[:, 0] + chroma @ F[:, 1:].T
    return SampleSet(pts, label="ensemble")


def generate(spec) -> SampleSet:
    if isinstance(spec, GambaSpec):
        return gen_gamba(spec)
    if isinstance(spec, SurfaceSpec):
        return gen_undulated_surface(spec)
    if isinstance(spec, EnsembleSpec):
        return gen_color_ensemble(spec)
    raise ParameterError(f"unknown generator spec {type(spec).__name__}")
