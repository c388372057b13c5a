"""Command line: ``spca <subcommand> ...``.

Exit codes: 0 success, 2 configuration or input-format error, 3 numerical
failure. Numbers are printed with 10 significant digits.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .analysis import (build_lattice, mutual_information, power_law_check, quantization_rmse,
                       uniform_input_quantizer)
from .config import load_config
from .core import format_row, read_csv, write_csv
from .datagen import EnsembleSpec, GambaSpec, SurfaceSpec, generate
from .errors import ConfigError, DataFormatError, ParameterError, SpcaError
from .model import SpcaModel, fit
from .runner import PipelineError, Runner

EXIT_CONFIG = 2
EXIT_NUMERIC = 3

_SPECS = {"gamba": GambaSpec, "surface": SurfaceSpec, "ensemble": EnsembleSpec}


def _config(args):
    overrides = list(args.set or []) + list(getattr(args, "overrides", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if args.config is None:
        return load_config({"name": "cli"}, overrides)
    return load_config(args.config, overrides)


def _emit(line: str, out) -> None:
    out.write(line + "\n")
    out.flush()


def _rows(stream, source: str, width: int):
    """Yield ``(lineno, values)`` from CSV text, skipping blanks and ``#`` lines."""
    for lineno, line in enumerate(stream, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        try:
            vals = [float(c) for c in text.split(",")]
        except ValueError as exc:
            raise DataFormatError(f"{source}:{lineno}: {exc}") from None
        if len(vals) != width:
            raise DataFormatError(f"{source}:{lineno}: expected {width} columns, got {len(vals)}")
        yield lineno, np.array(vals)


def _open_in(path):
    if path in (None, "-"):
        return sys.stdin, "<stdin>"
    try:
        return open(path), str(path)
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc.strerror}") from None


def _open_out(path):
    if path in (None, "-"):
        return sys.stdout
    return open(path, "w")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = _config(args)
    report = Runner(cfg, args.out, force=args.force).run()
    out = Path(args.out or cfg.output_dir)
    print(f"config_hash={report['config_hash']} outputs in {out}")
    for key, row in report.get("fig4", {}).items():
        name = "input" if key == "input" else f"gamma={key}"
        print(f"{name}: MI_bits={format_row([row.get('mi_bits', np.nan)])} "
              f"RMSE={format_row([row.get('rmse', np.nan)])}")
    return 0


def cmd_gen(args) -> int:
    try:
        raw = json.loads(Path(args.spec).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {args.spec}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.spec}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    kind = raw.get("kind")
    if kind not in _SPECS:
        raise ConfigError(f"{args.spec}: kind must be one of {sorted(_SPECS)}, not {kind!r}")
    if args.seed is not None:
        raw["seed"] = args.seed
    from pydantic import ValidationError
    try:
        spec = _SPECS[kind].model_validate(raw)
    except ValidationError as exc:
        msg = "; ".join(f"{'.'.join(map(str, e['loc']))}: {e['msg']}" for e in exc.errors())
        raise ConfigError(f"invalid spec: {msg}") from None
    pts = generate(spec).points
    if args.out in (None, "-"):
        for row in pts:
            _emit(format_row(row), sys.stdout)
    else:
        write_csv(args.out, pts, header=[f"x{j + 1}" for j in range(pts.shape[1])])
    return 0


def cmd_fit(args) -> int:
    cfg = _config(args)
    data = read_csv(args.data)
    out = Path(args.out)
    model = fit(data, args.gamma, cfg.curve_params.params(), origin_mode=cfg.model.origin_mode,
                k_fraction_density=cfg.model.k_fraction_density,
                slab_fraction=cfg.model.slab_fraction,
                training_path=os.path.relpath(Path(args.data).resolve(), out.resolve().parent))
    model.save(out)
    print(f"dim_order={model.dim_order} scales={format_row(model.scales)} "
          f"origin={format_row(model.origin)}", file=sys.stderr)
    return 0


def _stream(args, fn) -> int:
    model = SpcaModel.load(args.model)
    src, name = _open_in(args.input)
    out = _open_out(args.output)
    bad = 0
    try:
        for lineno, x in _rows(src, name, model.dim):
            vals, ok = fn(model, x)
            if not ok:
                bad += 1
                print(f"{name}:{lineno}: flagged", file=sys.stderr)
            _emit(format_row(list(vals) + ([float(ok)] if args.flags else [])), out)
    finally:
        if src is not sys.stdin:
            src.close()
        if out is not sys.stdout:
            out.close()
    return EXIT_NUMERIC if bad and args.strict else 0


def _transform_row(model, x):
    if not model.in_support(x)[0]:
        return np.full(model.dim, np.nan), False
    r, conv = model._forward(x)
    return r, bool(conv.all())


def _invert_row(model, r):
    from .errors import NonConvergedError, RangeError
    try:
        return model.inverse(r), True
    except (RangeError, NonConvergedError) as exc:
        print(f"  {exc}", file=sys.stderr)
        return np.full(model.dim, np.nan), False


def cmd_transform(args) -> int:
    return _stream(args, _transform_row)


def cmd_invert(args) -> int:
    return _stream(args, _invert_row)


def cmd_score(args) -> int:
    data = read_csv(args.data)
    if args.metric == "mi":
        res = mutual_information(data, args.k)
        print(f"mi_bits={format_row([res.bits])} k={res.k} approximate={str(res.approximate).lower()}")
        return 0
    if args.metric == "rmse":
        if args.bins is None:
            raise ConfigError("score rmse needs --bins")
        bins = [int(b) for b in args.bins.split(",")]
        if args.model:
            model = SpcaModel.load(args.model)
            lat = build_lattice(model, bins)
            value = quantization_rmse(data, lat)
            print(f"rmse={format_row([value])} dropped_cells={len(lat.dropped)}")
        else:
            value = quantization_rmse(data, uniform_input_quantizer(data, bins))
            print(f"rmse={format_row([value])}")
        return 0
    if args.metric == "powerlaw":
        if not args.model:
            raise ConfigError("score powerlaw needs --model")
        model = SpcaModel.load(args.model)
        res = power_law_check(model, data.points, args.h, args.k_density)
        print(f"slope={format_row([res.slope])} corr={format_row([res.corr])} n={res.n_points}")
        return 0
    raise ConfigError(f"unknown metric {args.metric!r}")


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spca", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="config path or shipped name (fig4, adaptation, thresholds)")
            sp.add_argument("--set", action="append", metavar="PATH=VALUE",
                            help="dotted config override, e.g. curve_params.tau=0.5")
            sp.add_argument("overrides", nargs="*", metavar="PATH=VALUE",
                            help="more dotted overrides")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("run", help="run a full experiment from a config")
    common(sp)
    sp.add_argument("--out", help="output directory (default: config output_dir)")
    sp.add_argument("--force", action="store_true", help="overwrite outputs of another config")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("gen", help="generate a synthetic set from a JSON spec")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", help="CSV path (default stdout)")
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("fit", help="fit a model to a CSV set")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--gamma", type=float, required=True)
    sp.add_argument("--out", required=True, help="model JSON path")
    sp.set_defaults(func=cmd_fit)

    for name, func, what in (("transform", cmd_transform, "responses of input rows"),
                             ("invert", cmd_invert, "input points of response rows")):
        sp = sub.add_parser(name, help=what)
        sp.add_argument("--model", required=True)
        sp.add_argument("--in", dest="input", default="-", help="CSV rows (default stdin)")
        sp.add_argument("--out", dest="output", default="-", help="CSV rows (default stdout)")
        sp.add_argument("--flags", action="store_true", help="append an ok column (1/0)")
        sp.add_argument("--strict", action="store_true", help="exit 3 if any row is flagged")
        sp.set_defaults(func=func)

    sp = sub.add_parser("score", help="score a CSV set")
    sp.add_argument("metric", choices=["mi", "rmse", "powerlaw"])
    sp.add_argument("--data", required=True)
    sp.add_argument("--model")
    sp.add_argument("--bins", help="comma-separated bins per dimension")
    sp.add_argument("--k", type=int, default=5, help="kNN k for mi")
    sp.add_argument("--h", type=float, default=0.02, help="finite-difference step for powerlaw")
    sp.add_argument("--k-density", type=int, default=50)
    sp.set_defaults(func=cmd_score)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(exc.cause, (DataFormatError, OSError)) else EXIT_NUMERIC
    except ParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SpcaError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except BrokenPipeError:
        return 0
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
