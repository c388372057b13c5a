"""Config-driven pipelines: generate, fit, score and report.

Every output lands in the run directory next to ``manifest.json``. CSVs
carry a ``# config_hash=...`` comment line; rerunning into a directory
produced by a different config fails unless ``force`` is set.
"""

from __future__ import annotations

import csv
import hashlib
import json
import platform
from pathlib import Path

import numpy as np

from .analysis import (build_lattice, least_squares_map, apply_linear, mutual_information,
                       occupancy_cv, power_law_check, quantization_rmse,
                       uniform_input_quantizer)
from .config import CsvData, ExperimentConfig, gamma_label
from .core import SampleSet, format_row, read_csv, write_csv
from .datagen import generate
from .errors import ConfigError, SpcaError
from .model import SpcaModel, fit
from .psychophysics import (AtdFrame, argmin_within, atd_convert, axis_points,
                            chromaticity, corresponding_pairs, fechner_integrate,
                            marginal_density, pair_arrays, test_grid,
                            thresholds_physiological, thresholds_psychophysical,
                            affine_corr)

# published reference values for the gamba experiment, reported next to ours
REFERENCE_FIG4 = {
    "input": {"mi_bits": 0.75, "rmse": 0.63},
    "0": {"mi_bits": 0.27, "rmse": 0.55},
    "1": {"mi_bits": 0.05, "rmse": 0.56},
    "1/3": {"mi_bits": 0.06, "rmse": 0.53},
}


class PipelineError(SpcaError):
    """A stage failed; ``stage`` names it and ``cause`` keeps the original error."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def _file_tag(label: str) -> str:
    return label.replace("/", "_")


def _versions() -> dict:
    import scipy
    import pydantic
    from . import __version__
    return {"spca": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "pydantic": pydantic.__version__, "python": platform.python_version()}


def resolve_seed(spec, seed: int):
    """Generator specs without an explicit seed take the experiment seed."""
    if isinstance(spec, CsvData) or "seed" in spec.model_fields_set:
        return spec
    return spec.model_copy(update={"seed": seed})


class Runner:
    def __init__(self, config: ExperimentConfig, out_dir=None, force: bool = False):
        self.cfg = config
        self.hash = config.config_hash()
        self.out = Path(out_dir if out_dir is not None else config.output_dir)
        self.force = force
        self.files: list[str] = []
        self.report: dict = {"config_hash": self.hash, "seed": config.seed, "name": config.name}

    # -- output helpers ---------------------------------------------------

    def _comments(self, *extra) -> list[str]:
        return [f"config_hash={self.hash}", *extra]

    def _csv(self, name: str, rows, header, *extra) -> Path:
        path = self.out / name
        write_csv(path, rows, header=header, comments=self._comments(*extra))
        self.files.append(name)
        return path

    def _table(self, name: str, header, rows) -> Path:
        """CSV with a text first column; numbers at 10 significant digits."""
        path = self.out / name
        with open(path, "w", newline="") as fh:
            for c in self._comments():
                fh.write(f"# {c}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([v if isinstance(v, str) else format_row([v]) for v in row])
        self.files.append(name)
        return path

    def _json(self, name: str, obj) -> Path:
        path = self.out / name
        path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
        self.files.append(name)
        return path

    def _prepare_dir(self) -> None:
        manifest = self.out / "manifest.json"
        if manifest.exists() and not self.force:
            try:
                old = json.loads(manifest.read_text()).get("config_hash")
            except json.JSONDecodeError:
                old = None
            if old != self.hash:
                raise ConfigError(
                    f"{self.out} holds outputs of config {old}, not {self.hash}; "
                    "use a fresh directory or force")
        self.out.mkdir(parents=True, exist_ok=True)

    # -- data and models --------------------------------------------------

    def _dataset(self, tag: str, spec) -> SampleSet:
        if isinstance(spec, CsvData):
            pts = read_csv(spec.path).points
        else:
            pts = generate(resolve_seed(spec, self.cfg.seed)).points
        if self.cfg.atd:
            p = self.cfg.psychophysics
            frame = AtdFrame(np.array(p.atd_matrix)) if p and p.atd_matrix else AtdFrame()
            pts = atd_convert(frame, pts)
        name = f"data_{tag}.csv"
        path = self._csv(name, pts, [f"x{j + 1}" for j in range(pts.shape[1])])
        # fit on the rows as written so saved models match their CSV exactly
        return read_csv(path, label=tag)

    def _fit(self, tag: str, data: SampleSet, gamma: float) -> SpcaModel:
        opts = self.cfg.model
        model = fit(data, gamma, self.cfg.curve_params.params(), origin_mode=opts.origin_mode,
                    k_fraction_density=opts.k_fraction_density,
                    slab_fraction=opts.slab_fraction, training_path=f"data_{tag}.csv")
        self._json(f"model_{tag}_g{_file_tag(gamma_label(gamma))}.json", model.to_json())
        return model

    def _rng(self, *salt) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, *salt])

    # -- stages -----------------------------------------------------------

    def _stage(self, name, fn, *args):
        try:
            return fn(*args)
        except ConfigError:
            raise
        except (SpcaError, OSError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            raise PipelineError(name, exc) from exc

    def run(self) -> dict:
        cfg = self.cfg
        if cfg.data is None and not cfg.environments:
            raise ConfigError("config needs data or environments")
        self._prepare_dir()
        if cfg.data is not None:
            data = self._stage("generate", self._dataset, "main", cfg.data)
            models = {}
            for g in cfg.gammas:
                models[g] = self._stage(f"fit gamma={gamma_label(g)}", self._fit, "main", data, g)
            self._stage("score", self._score, data, models)
        if cfg.environments:
            envs = {name: self._stage(f"generate {name}", self._dataset, name, spec)
                    for name, spec in cfg.environments.items()}
            for g in cfg.gammas:
                models = {name: self._stage(f"fit {name} gamma={gamma_label(g)}",
                                            self._fit, name, s, g)
                          for name, s in envs.items()}
                if cfg.psychophysics is not None:
                    for name, m in models.items():
                        self._stage(f"thresholds {name}", self._thresholds, name, m, g)
                for pair in cfg.pairs:
                    self._stage(f"pairs {pair.source}->{pair.target}", self._pairs,
                                pair, envs, models, g)
        self._json("report.json", self.report)
        manifest = {"config_hash": self.hash, "config": json.loads(cfg.canonical_json()),
                    "versions": _versions(),
                    "files": {f: hashlib.sha256((self.out / f).read_bytes()).hexdigest()
                              for f in sorted(set(self.files))}}
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        return self.report

    def _score(self, data: SampleSet, models: dict) -> None:
        a = self.cfg.analysis
        table = {"input": {}}
        out = {}
        bins = a.bins_per_dim
        if data.dim >= 2:
            table["input"]["mi_bits"] = mutual_information(data, a.mi_k).bits
        if bins:
            table["input"]["rmse"] = quantization_rmse(data, uniform_input_quantizer(data, bins))
        for g, m in models.items():
            label = gamma_label(g)
            R, conv, _ = m.transform_many(data.points)
            ok = conv.all(axis=1)
            rows = np.column_stack([R, conv.astype(float)])
            self._csv(f"responses_g{_file_tag(label)}.csv", rows,
                      [f"r{j + 1}" for j in range(m.dim)] + [f"conv{j + 1}" for j in range(m.dim)],
                      f"gamma={g:.10g}")
            entry = {"n_excluded": int((~ok).sum())}
            if data.dim >= 2:
                entry["mi_bits"] = mutual_information(R[ok], a.mi_k).bits
            if bins:
                lat = build_lattice(m, bins, R[ok])
                entry["rmse"] = quantization_rmse(data, lat)
                entry["lattice_dropped"] = len(lat.dropped)
                entry["occupancy_cv"] = occupancy_cv(R[ok], lat)
            table[label] = entry
            res = {}
            if a.power_law is not None:
                res["power_law"] = self._power_law(m, R, ok, g)
            if a.roundtrip_points:
                res["roundtrip"] = self._roundtrip(m, data, R, ok, g)
            out[label] = res
        self.report["fig4"] = table
        self.report["reference_fig4"] = REFERENCE_FIG4
        self.report["gammas"] = out
        if bins:
            order = ["input"] + [gamma_label(g) for g in models]
            rows = []
            for key in order:
                t = table[key]
                ref = REFERENCE_FIG4.get(key, {})
                rows.append(["input" if key == "input" else f"gamma={key}",
                             t.get("mi_bits", float("nan")), t.get("rmse", float("nan")),
                             ref.get("mi_bits", float("nan")), ref.get("rmse", float("nan"))])
            self._table("fig4_table.csv", ["system", "mi_bits", "rmse", "reference_mi_bits",
                                           "reference_rmse"], rows)
            self._json("fig4_table.json", {"config_hash": self.hash, "seed": self.cfg.seed,
                                           "rows": table, "reference": REFERENCE_FIG4})

    def _power_law(self, m: SpcaModel, R, ok, g) -> dict:
        opts = self.cfg.analysis.power_law
        lo_q = 50 * (1 - opts.central)
        lo, hi = np.percentile(R[ok], [lo_q, 100 - lo_q], axis=0)
        cand = np.flatnonzero(ok & np.all((R > lo) & (R < hi), axis=1))
        n = min(opts.n_points, cand.size)
        pick = np.sort(self._rng(1, round(g * 1e6)).choice(cand, n, replace=False))
        fitres = power_law_check(m, m.training.points[pick], opts.h, opts.k_density)
        return {"slope": fitres.slope, "intercept": fitres.intercept, "corr": fitres.corr,
                "n_points": fitres.n_points, "target_slope": g}

    def _roundtrip(self, m: SpcaModel, data: SampleSet, R, ok, g) -> dict:
        cand = np.flatnonzero(ok)
        n = min(self.cfg.analysis.roundtrip_points, cand.size)
        pick = np.sort(self._rng(2, round(g * 1e6)).choice(cand, n, replace=False))
        err = []
        for i in pick:
            x = data.points[i]
            err.append(np.linalg.norm(m.inverse(R[i]) - x) / max(np.linalg.norm(x), 1e-300))
        err = np.array(err)
        return {"n": int(n), "median_rel_error": float(np.median(err)),
                "p90_rel_error": float(np.percentile(err, 90))}

    def _thresholds(self, name: str, m: SpcaModel, g: float) -> None:
        p = self.cfg.psychophysics
        label = _file_tag(gamma_label(g))
        summary = {}
        for axis in p.axes:
            grid = test_grid(m, axis, p.grid_points)
            phys = thresholds_physiological(m, axis, grid)
            psy = thresholds_psychophysical(m, axis, grid, criterion=p.criterion, norm=p.norm)
            dens = marginal_density(m, axis, grid)
            X, u, rd, t = axis_points(m, axis, grid)
            anchor = float(np.clip(m.origin @ u, grid[0], grid[-1]))
            fech = fechner_integrate(phys, anchor)
            resp = np.array([m._forward(x)[0][rd] for x in X])
            flags = phys.flags | psy.flags
            rows = np.column_stack([grid, X, phys.thresholds, psy.thresholds, dens,
                                    fech.response, resp, flags.astype(float)])
            header = ["t"] + [f"x{j + 1}" for j in range(m.dim)] + [
                "threshold_physiological", "threshold_psychophysical", "density",
                "fechner_response", "model_response", "flag"]
            self._csv(f"thresholds_{name}_{axis}_g{label}.csv", rows, header,
                      f"axis={axis}", f"response_dim={rd}")
            imin, imax = argmin_within(phys, dens)
            summary[axis] = {
                "response_dim": rd, "direction": u.tolist(),
                "argmin_threshold": imin, "argmax_density": imax,
                "argmin_point": X[imin].tolist(),
                "paradigm_corr": affine_corr(phys.thresholds, psy.thresholds, ~flags),
                "fechner_corr": affine_corr(fech.response, resp),
                "n_flagged": int(flags.sum()),
            }
        self.report.setdefault("thresholds", {}).setdefault(gamma_label(g), {})[name] = summary

    def _pairs(self, pair, envs: dict, models: dict, g: float) -> None:
        for key in (pair.source, pair.target):
            if key not in envs:
                raise ConfigError(f"pairs: unknown environment {key!r}")
        src, tgt = envs[pair.source], envs[pair.target]
        mB, mA = models[pair.source], models[pair.target]
        truth = None
        if pair.grid == "neutral":
            lum = src.points.mean(axis=1)
            levels = np.quantile(lum, np.linspace(0.05, 0.95, pair.n_points))
            xs = np.repeat(levels[:, None], src.dim, axis=1)
        else:
            n = min(pair.n_points, src.n)
            pick = np.sort(self._rng(3).choice(src.n, n, replace=False))
            xs = src.points[pick]
            if pair.paired_rows and tgt.n == src.n:
                truth = tgt.points[pick]
        pairs = corresponding_pairs(mB, mA, xs, (pair.source, pair.target))
        x_src, x_pred, ok = pair_arrays(pairs)
        d = src.dim
        cols = [np.arange(len(xs)), x_src, x_pred, ok.astype(float)]
        header = ["row"] + [f"src{j + 1}" for j in range(d)] + \
            [f"pred{j + 1}" for j in range(d)] + ["converged"]
        if truth is not None:
            cols.append(truth)
            header += [f"truth{j + 1}" for j in range(d)]
        tag = f"pairs_{pair.source}_to_{pair.target}_{pair.grid}_g{_file_tag(gamma_label(g))}"
        self._csv(f"{tag}.csv", np.column_stack(cols), header)
        entry = {"grid": pair.grid, "n": int(len(xs)), "n_excluded": int((~ok).sum())}
        if ok.any():
            shift_dir = chromaticity(tgt.points.mean(axis=0))[0] - chromaticity(src.points.mean(axis=0))[0]
            shift = (chromaticity(x_pred[ok]) - chromaticity(x_src[ok])) @ shift_dir
            entry["shift_along_environment_fraction"] = float(np.mean(shift > 0))
        if truth is not None and ok.sum() > d + 1:
            res = x_pred[ok] - truth[ok]
            ls = least_squares_map(X=x_src[ok], Y=truth[ok])
            ls_res = apply_linear(ls, x_src[ok]) - truth[ok]
            rel = np.linalg.norm(res, axis=1) / np.linalg.norm(truth[ok], axis=1)
            entry.update({
                "spca_rmse": float(np.sqrt(np.mean(np.sum(res ** 2, axis=1)))),
                "least_squares_rmse": float(np.sqrt(np.mean(np.sum(ls_res ** 2, axis=1)))),
                "spca_median_rel_error": float(np.median(rel)),
            })
        self.report.setdefault("pairs", {}).setdefault(gamma_label(g), {})[tag] = entry


def run(config: ExperimentConfig, out_dir=None, force: bool = False) -> dict:
    return Runner(config, out_dir, force).run()
