"""Recompute the noise schedule in 50-digit arithmetic and compare with cdrl.

Usage: python3 scripts/schedule_check.py [--T 6] [--tol 1e-9]

Exits non-zero if any schedule entry differs from the high-precision
reference by more than ``--tol``.
"""

import argparse
import sys

import mpmath

from cdrl.schedule import build_cosine_schedule


def reference(T, lambda_max=9.8, lambda_min=-5.1, step_constant=0.054, dps=50):
    """Per-level schedule quantities as mpmath numbers (sigma_tilde uses sigma_{t+1})."""
    with mpmath.workdps(dps):
        b = mpmath.atan(mpmath.exp(-mpmath.mpf(lambda_max) / 2))
        a = mpmath.atan(mpmath.exp(-mpmath.mpf(lambda_min) / 2)) - b
        lam = [-2 * mpmath.log(mpmath.tan(a * mpmath.mpf(t) / T + b)) for t in range(T + 1)]
        alpha_bar = [mpmath.sqrt(1 / (1 + mpmath.exp(-v))) for v in lam]
        sigma_bar = [mpmath.sqrt(1 - ab ** 2) for ab in alpha_bar]
        alpha = [mpmath.mpf(1)] + [alpha_bar[t] / alpha_bar[t - 1] for t in range(1, T + 1)]
        sigma = [mpmath.mpf(0)] + [mpmath.sqrt(sigma_bar[t] ** 2 - alpha[t] ** 2 * sigma_bar[t - 1] ** 2)
                                   for t in range(1, T + 1)]
        sigma_tilde = [sigma_bar[t] / sigma_bar[t + 1] * sigma[t + 1] for t in range(T)]
        step = [mpmath.sqrt(step_constant * sigma_bar[t] * sigma[t + 1] ** 2) for t in range(T)]
        return {"lam": lam, "alpha_bar": alpha_bar, "sigma_bar": sigma_bar, "alpha": alpha,
                "sigma": sigma, "sigma_tilde": sigma_tilde, "step_size": step}


def max_deviation(T, **kw):
    """Largest absolute difference between cdrl's schedule and the reference, per field."""
    ref = reference(T, **kw)
    sch = build_cosine_schedule(T, kw.get("lambda_max", 9.8), kw.get("lambda_min", -5.1),
                                kw.get("step_constant", 0.054))
    out = {}
    for name, values in ref.items():
        ours = getattr(sch, name)
        # level 0 has no forward step into it: alpha_0 and sigma_0 are conventions
        start = 1 if name in ("alpha", "sigma") else 0
        out[name] = max(abs(float(values[i]) - float(ours[i])) for i in range(start, len(values)))
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--T", type=int, default=6)
    ap.add_argument("--tol", type=float, default=1e-9)
    args = ap.parse_args(argv)
    dev = max_deviation(args.T)
    for name, d in dev.items():
        print(f"{name:12s} max |diff| = {d:.3e}")
    worst = max(dev.values())
    print("OK" if worst <= args.tol else "FAIL", f"(tol {args.tol:g})")
    return 0 if worst <= args.tol else 1


if __name__ == "__main__":
    sys.exit(main())
