"""``cdrl`` command line: schedule, train, sample, density, ood, inpaint.

Exit codes partition error classes:

    0  success
    1  unexpected internal error
    2  usage: unknown flag or malformed command line
    3  I/O (missing or unreadable checkpoint / CSV, unwritable output)
    4  numeric divergence (Langevin chain or loss left finite range)
    5  configuration (unknown keys, unparsable or out-of-range values)
    6  data dimension mismatch
    7  usage: a required argument is missing

Every output file ``X`` gets a sibling ``X.manifest.json`` holding the
resolved arguments, seed and package version.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, TrainConfig, coerce, dump_kv, load_config
from .evaluation import DimensionError, auroc, density_grid, ood_score
from .io import read_csv, write_csv, write_manifest
from .models import GuidanceSpec
from .ndgrad import NonFiniteError
from .rng import stream
from .sampler import DivergenceError, SampleBatch, SamplerConfig, generate, inpaint
from .schedule import SIGMA_TILDE_VARIANTS, ScheduleError, build_cosine_schedule

log = logging.getLogger("cdrl")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4
EXIT_CONFIG = 5
EXIT_DIMENSION = 6
EXIT_MISSING = 7

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class ArgumentError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting so each argument problem gets its own code."""

    def error(self, message):
        if "required" in message:
            code = EXIT_MISSING
        elif "invalid" in message or "must be" in message or "unparsable" in message:
            code = EXIT_CONFIG
        else:
            code = EXIT_USAGE
        raise ArgumentError(f"{self.prog}: {message}", code)


class InputError(IOError):
    """A user-supplied file could not be read or parsed."""


# ---------------------------------------------------------------------------
# argument parsing


def _bounds(text: str) -> tuple[float, float, float, float]:
    parts = text.split(",")
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("bounds must be xmin,xmax,ymin,ymax")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"unparsable bounds {text!r}") from None


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _pos_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _nonneg_float(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _add_sampling(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ckpt", required=True, help="checkpoint written by 'cdrl train'")
    p.add_argument("--steps", type=_nonneg_int, default=15,
                   help="Langevin steps per level (0 = initializer proposals only)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tweedie-coeff", type=_nonneg_float, default=2.0)
    p.add_argument("--raw-weights", action="store_true", help="use live weights instead of EMA")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="cdrl", description="Cooperative diffusion recovery likelihood at desk scale.")
    ap.add_argument("--version", action="version", version=f"cdrl {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("schedule", help="write the per-level noise schedule as CSV")
    p.add_argument("--T", type=int, default=6)
    p.add_argument("--lambda-max", type=float, default=9.8)
    p.add_argument("--lambda-min", type=float, default=-5.1)
    p.add_argument("--step-constant", type=float, default=0.054)
    p.add_argument("--sigma-tilde-variant", choices=SIGMA_TILDE_VARIANTS, default="next")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the energy models and initializers")
    p.add_argument("--config", required=True, help="flat key = value file of training settings")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--set", nargs="*", default=[], metavar="KEY=VALUE", help="config overrides")

    p = sub.add_parser("sample", help="generate samples")
    _add_sampling(p)
    p.add_argument("--n", type=_pos_int, required=True)
    p.add_argument("--guidance-w", type=_nonneg_float, default=0.0)
    p.add_argument("--class", dest="classes", type=int, action="append", default=None,
                   help="concept class; repeat to compose; -1 = unconditional")
    p.add_argument("--trace", help="directory for per-level CSVs")

    p = sub.add_parser("density", help="log-density grid of a 2-D model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--level", type=_nonneg_int, default=0)
    p.add_argument("--bounds", type=_bounds, default=(-2.0, 2.0, -2.0, 2.0))
    p.add_argument("--res", type=int, default=100)
    p.add_argument("--class", dest="cls", type=int, default=-1)
    p.add_argument("--raw-weights", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("ood", help="AUROC of level-0 energies between two pools")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pos", required=True, help="in-distribution CSV")
    p.add_argument("--neg", required=True, help="out-of-distribution CSV")
    p.add_argument("--raw-weights", action="store_true")
    p.add_argument("--out", help="per-sample score CSV")

    p = sub.add_parser("inpaint", help="fill masked coordinates of observed points")
    _add_sampling(p)
    p.add_argument("--in", dest="inp", required=True, help="observed CSV")
    p.add_argument("--mask", required=True, help="CSV of 0/1, 1 = fill")
    return ap


def parse_args(argv=None) -> argparse.Namespace:
    return build_parser().parse_args(argv)


# ---------------------------------------------------------------------------
# helpers


def _manifest(args: argparse.Namespace, out, **extra) -> None:
    payload = {
        "command": args.command,
        "args": {k: v for k, v in vars(args).items() if k != "command"},
        "version": __version__,
        "seed": getattr(args, "seed", None),
    }
    payload.update(extra)
    write_manifest(out, payload)


def _read(path, dtype=np.float64) -> np.ndarray:
    try:
        return read_csv(path, dtype)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def _models(args):
    from .trainer import load_models
    return load_models(args.ckpt, use_ema=not args.raw_weights)


def _sampler_cfg(args, lm, guidance=None) -> SamplerConfig:
    K_train = lm.header.get("train_config", {}).get("K", 15) or 1
    return SamplerConfig(K=args.steps, K_train=max(int(K_train), 1), tweedie_coeff=args.tweedie_coeff,
                         guidance=guidance or GuidanceSpec(), trace=bool(getattr(args, "trace", None)))


def _check_dim(data: np.ndarray, dim: int, what: str) -> None:
    if data.shape[1] != dim:
        raise DimensionError(f"{what} has {data.shape[1]} columns but the model is {dim}-D")


# ---------------------------------------------------------------------------
# subcommands


def cmd_schedule(args) -> int:
    sch = build_cosine_schedule(args.T, args.lambda_max, args.lambda_min, args.step_constant,
                                args.sigma_tilde_variant)
    rows = sch.rows()
    cols = list(rows[0])
    write_csv(args.out, np.array([[r[c] for c in cols] for r in rows], dtype=np.float64), cols)
    _manifest(args, args.out)
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    over = {}
    for kv in args.set:
        if "=" not in kv:
            raise ConfigError(f"override {kv!r} is not KEY=VALUE")
        k, v = kv.split("=", 1)
        over[k.strip()] = coerce(TrainConfig, k.strip(), v)
    if args.seed is not None:
        over["seed"] = args.seed
    try:
        return load_config(args.config, over)
    except OSError as exc:
        raise InputError(f"cannot read config {args.config}: {exc}") from exc


def cmd_train(args) -> int:
    from .trainer import Trainer
    cfg = _train_config(args)
    if args.resume:
        tr = Trainer.load(args.resume)
        saved = tr.cfg.to_dict()
        wanted = cfg.to_dict()
        diff = sorted(k for k in wanted if k not in ("total_iters", "log_every") and wanted[k] != saved[k])
        if diff:
            raise ConfigError(f"resume config differs from checkpoint in: {', '.join(diff)}")
        tr.cfg = tr.cfg.replace(total_iters=cfg.total_iters, log_every=cfg.log_every)
    else:
        tr = Trainer(cfg)
    log.info("training to iteration %d (from %d)", tr.cfg.total_iters, tr.iteration)
    tr.run(dump_path=str(args.out) + ".diverged")
    tr.save(args.out)
    _manifest(args, args.out, config=dump_kv(tr.cfg), iteration=tr.iteration)
    return EXIT_OK


def _guidance(args, lm) -> GuidanceSpec | None:
    classes = args.classes or [-1]
    if classes == [-1]:
        if args.guidance_w:
            raise ConfigError("--guidance-w needs a class (--class >= 0)")
        return None
    if any(c < 0 for c in classes):
        raise ConfigError("-1 (unconditional) cannot be combined with concept classes")
    if not lm.ebm.num_classes:
        raise ConfigError("checkpoint is unconditional; use --class -1")
    if max(classes) >= lm.ebm.num_classes:
        raise ConfigError(f"class index out of range (model has {lm.ebm.num_classes} classes)")
    return GuidanceSpec(args.guidance_w, tuple(classes))


def cmd_sample(args) -> int:
    lm = _models(args)
    spec = _guidance(args, lm)
    cfg = _sampler_cfg(args, lm, spec)
    res = generate(lm.ebm, lm.init, args.n, cfg, stream(args.seed, 11))
    write_csv(args.out, res.samples.data)
    _manifest(args, args.out)
    if args.trace:
        tdir = Path(args.trace)
        tdir.mkdir(parents=True, exist_ok=True)
        for batch in res.trace:
            path = tdir / f"level_{batch.level}.csv"
            write_csv(path, batch.data)
            _manifest(args, path, level=batch.level)
    return EXIT_OK


def cmd_density(args) -> int:
    lm = _models(args)
    lm.schedule.check_level(args.level, lm.schedule.T - 1)
    c = None if args.cls == -1 else args.cls
    grid = density_grid(lm.ebm, args.level, args.bounds, args.res, c)
    pts = grid.points()
    table = np.column_stack([pts, grid.log_density.ravel(), grid.prob.ravel()])
    write_csv(args.out, table, ["x", "y", "log_density", "prob"])
    _manifest(args, args.out)
    return EXIT_OK


def cmd_ood(args) -> int:
    lm = _models(args)
    pos, neg = _read(args.pos), _read(args.neg)
    _check_dim(pos, lm.ebm.dim, args.pos)
    _check_dim(neg, lm.ebm.dim, args.neg)
    sp, sn = ood_score(lm.ebm, SampleBatch(0, pos)), ood_score(lm.ebm, SampleBatch(0, neg))
    value = auroc(sp, sn)
    print(f"AUROC {value:.6f}")
    if args.out:
        table = np.column_stack([np.r_[sp, sn], np.r_[np.ones(len(sp)), np.zeros(len(sn))]])
        write_csv(args.out, table, ["score", "in_distribution"])
        _manifest(args, args.out, auroc=value)
    return EXIT_OK


def cmd_inpaint(args) -> int:
    lm = _models(args)
    obs = _read(args.inp)
    mask = _read(args.mask, bool)
    _check_dim(obs, lm.ebm.dim, args.inp)
    if mask.shape != obs.shape:
        raise DimensionError(f"mask shape {mask.shape} does not match observed {obs.shape}")
    res = inpaint(lm.ebm, lm.init, SampleBatch(0, obs), mask, _sampler_cfg(args, lm), stream(args.seed, 13))
    write_csv(args.out, res.samples.data)
    _manifest(args, args.out)
    return EXIT_OK


COMMANDS = {
    "schedule": cmd_schedule, "train": cmd_train, "sample": cmd_sample,
    "density": cmd_density, "ood": cmd_ood, "inpaint": cmd_inpaint,
}


def run(args: argparse.Namespace) -> int:
    """Dispatch a parsed command; map errors to exit codes."""
    from .trainer import CheckpointError
    try:
        return COMMANDS[args.command](args)
    except (DivergenceError, NonFiniteError, FloatingPointError) as exc:
        log.error("numeric divergence: %s", exc)
        return EXIT_DIVERGENCE
    except DimensionError as exc:
        log.error("dimension error: %s", exc)
        return EXIT_DIMENSION
    except (CheckpointError, InputError, OSError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except (ConfigError, ScheduleError, ValueError, IndexError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except Exception as exc:  # never a traceback on user input
        log.error("internal error: %r", exc)
        return EXIT_INTERNAL


def main(argv=None) -> int:
    level = os.environ.get("CDRL_LOG", "error").lower()
    logging.basicConfig(level=_LOG_LEVELS.get(level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args = parse_args(argv)
    except ArgumentError as exc:
        print(build_parser().format_usage().rstrip(), file=sys.stderr)
        print(exc, file=sys.stderr)
        return exc.code
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
