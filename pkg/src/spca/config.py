"""Experiment configuration: one self-describing JSON document per run."""

from __future__ import annotations

import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .curves import CurveParams
from .datagen import EnsembleSpec, GambaSpec, SurfaceSpec
from .errors import ConfigError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CsvData(_Strict):
    kind: Literal["csv"] = "csv"
    path: str


DataSpec = Annotated[Union[GambaSpec, SurfaceSpec, EnsembleSpec, CsvData],
                     Field(discriminator="kind")]


class CurveOptions(_Strict):
    k_fraction: float = Field(0.2, gt=0, le=1)
    tau: float = Field(1.0, gt=0)
    q: float = Field(16.0, gt=0)
    max_steps: int = Field(400, ge=1)

    def params(self) -> CurveParams:
        return CurveParams(self.k_fraction, self.tau, self.q, self.max_steps)


class ModelOptions(_Strict):
    origin_mode: Literal["mode", "mean"] | list[float] = "mode"
    k_fraction_density: float = Field(0.02, gt=0, le=1)
    slab_fraction: float = Field(0.1, gt=0, le=1)


class PowerLawOptions(_Strict):
    n_points: int = Field(100, ge=3)
    h: float = Field(0.02, gt=0)
    k_density: int = Field(50, ge=1)
    central: float = Field(0.8, gt=0, le=1)


class AnalysisOptions(_Strict):
    bins_per_dim: list[int] | None = None
    mi_k: int = Field(5, ge=1)
    power_law: PowerLawOptions | None = None
    roundtrip_points: int = Field(0, ge=0)


class PsychophysicsOptions(_Strict):
    axes: list[Literal["A", "T", "D"]] = ["T", "D"]
    grid_points: int = Field(25, ge=3)
    criterion: float | None = Field(None, gt=0)
    norm: float = Field(2.0, gt=0)
    atd_matrix: list[list[float]] | None = None

    @field_validator("atd_matrix")
    @classmethod
    def _shape(cls, v):
        if v is not None and (len(v) != 3 or any(len(r) != 3 for r in v)):
            raise ValueError("atd_matrix must be 3x3")
        return v


class PairOptions(_Strict):
    source: str
    target: str
    grid: Literal["neutral", "samples"] = "samples"
    n_points: int = Field(200, ge=1)
    # row i of source and target data show the same object
    paired_rows: bool = False


class ExperimentConfig(_Strict):
    name: str
    seed: int = 0
    data: DataSpec | None = None
    environments: dict[str, DataSpec] | None = None
    gammas: list[float] = [0.0, 0.3333333333, 1.0]
    curve_params: CurveOptions = CurveOptions()
    model: ModelOptions = ModelOptions()
    analysis: AnalysisOptions = AnalysisOptions()
    psychophysics: PsychophysicsOptions | None = None
    pairs: list[PairOptions] = []
    atd: bool = False
    output_dir: str = "out"

    @field_validator("gammas")
    @classmethod
    def _gammas(cls, v):
        if not v or any(g < 0 for g in v):
            raise ValueError("gammas must be a nonempty list of values >= 0")
        return v

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


def gamma_label(g: float) -> str:
    for value, label in ((0.0, "0"), (1 / 3, "1/3"), (1.0, "1")):
        if abs(g - value) < 1e-6:
            return label
    return f"{g:.10g}"


def _set_dotted(obj: dict, path: str, value) -> None:
    keys = path.split(".")
    cur = obj
    for k in keys[:-1]:
        nxt = cur.get(k)
        if nxt is None:
            nxt = cur[k] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"override {path}: {k} is not an object")
        cur = nxt
    cur[keys[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like dotted.path=value")
    path, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path.strip(), value


def _format_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def load_config(source, overrides: list[str] | None = None) -> ExperimentConfig:
    """Load a config from a path, a shipped name (``fig4``), or a dict."""
    if isinstance(source, dict):
        raw = json.loads(json.dumps(source))
    else:
        text = None
        p = Path(source)
        if p.exists():
            text = p.read_text()
        else:
            shipped = resources.files("spca").joinpath("configs", f"{source}.json")
            if shipped.is_file():
                text = shipped.read_text()
        if text is None:
            raise ConfigError(f"no config file or shipped config named {source!r}")
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    for item in overrides or []:
        path, value = parse_override(item)
        _set_dotted(raw, path, value)
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {_format_error(exc)}") from None


def shipped_configs() -> list[str]:
    d = resources.files("spca").joinpath("configs")
    return sorted(p.name[:-5] for p in d.iterdir() if p.name.endswith(".json"))
