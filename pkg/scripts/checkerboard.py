"""Train on the 2-D checkerboard and report sample / density / OOD statistics."""

import argparse
import logging
import time
from pathlib import Path

import numpy as np

from cdrl.config import TrainConfig, load_config
from cdrl.evaluation import (ToySpec, auroc, density_grid, gen_toy, grid_mass_on_squares,
                             mode_fractions, on_square_fraction, ood_score)
from cdrl.rng import stream
from cdrl.sampler import SamplerConfig, generate
from cdrl.trainer import Trainer


def evaluate(tr, n=5000, seed=123, K=None):
    ebm, init = tr.ema_models()
    K = tr.cfg.K if K is None else K
    res = generate(ebm, init, n, SamplerConfig(K=K, K_train=max(tr.cfg.K, 1)), stream(seed, 0))
    x = res.samples.data
    grid = density_grid(ebm, 0, resolution=100)
    pos = gen_toy(ToySpec("checkerboard", seed=991), 5000)
    neg = gen_toy(ToySpec("checkerboard", seed=992, shift=(0.5, 0.5)), 5000)
    return {
        "on": on_square_fraction(x),
        "on_pre": on_square_fraction(res.pre_tweedie.data),
        "min_mode": float(mode_fractions(x).min()),
        "grid_mass": grid_mass_on_squares(grid),
        "auroc": auroc(ood_score(ebm, pos), ood_score(ebm, neg)),
        "mean_f": float(ebm.energy(x, 0).mean()),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(Path(__file__).resolve().parents[1] / "configs" / "checkerboard.cfg"))
    ap.add_argument("--iters", type=int, default=None)
    ap.add_argument("--eval-every", type=int, default=2000)
    ap.add_argument("--out")
    ap.add_argument("--set", nargs="*", default=[], help="key=value overrides")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    from cdrl.config import coerce
    over = dict(kv.split("=", 1) for kv in args.set)
    over = {k: coerce(TrainConfig, k, v) for k, v in over.items()}
    cfg = load_config(args.config, over)
    if args.iters:
        cfg = cfg.replace(total_iters=args.iters)
    tr = Trainer(cfg)
    t0 = time.time()
    while tr.iteration < cfg.total_iters:
        tr.run(min(args.eval_every, cfg.total_iters - tr.iteration))
        stats = evaluate(tr)
        print(f"[{time.time() - t0:6.0f}s] iter {tr.iteration}: "
              + " ".join(f"{k}={v:.4g}" for k, v in stats.items()), flush=True)
    if args.out:
        tr.save(args.out)


if __name__ == "__main__":
    main()
