"""Variance-preserving cosine log-SNR noise schedule.

Level ``t`` in ``{0, ..., T}`` maps to ``u = t / T`` so that level 0 sits at
``lambda_max`` and level ``T`` at ``lambda_min``.  Levels ``0..T-1`` carry an
energy model; level ``T`` is treated as a standard normal at sampling time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SIGMA_TILDE_VARIANTS = ("next", "literal", "y")


class ScheduleError(ValueError):
    """Raised for an invalid or degenerate schedule configuration."""


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-level coefficients of the diffusion.

    Arrays indexed by level.  ``alpha`` and ``sigma`` are per-step
    coefficients stored so that ``alpha[t]`` is the step *into* level ``t``;
    ``alpha[0]`` and ``sigma[0]`` are NaN placeholders.
    """

    T: int
    lambda_max: float
    lambda_min: float
    step_constant: float
    sigma_tilde_variant: str
    lam: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    sigma_bar: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)
    sigma_tilde: np.ndarray = field(repr=False)
    step_size: np.ndarray = field(repr=False)

    def check_level(self, t, upper: int | None = None) -> None:
        upper = self.T - 1 if upper is None else upper
        arr = np.asarray(t)
        if arr.size and (arr.min() < 0 or arr.max() > upper):
            raise IndexError(f"noise level {t!r} outside [0, {upper}]")

    def params(self) -> dict:
        """Constructor arguments, enough to rebuild this schedule exactly."""
        return {
            "T": self.T,
            "lambda_max": self.lambda_max,
            "lambda_min": self.lambda_min,
            "step_constant": self.step_constant,
            "sigma_tilde_variant": self.sigma_tilde_variant,
        }

    def rows(self) -> list[dict]:
        """One record per level, used for the CSV dump."""
        out = []
        for t in range(self.T + 1):
            last = t == self.T
            out.append({
                "t": t,
                "lambda": self.lam[t],
                "alpha_bar": self.alpha_bar[t],
                "sigma_bar": self.sigma_bar[t],
                "alpha": self.alpha[t],
                "sigma": self.sigma[t],
                "sigma_tilde": math.nan if last else self.sigma_tilde[t],
                "step_size": math.nan if last else self.step_size[t],
            })
        return out


def build_cosine_schedule(
    T: int,
    lambda_max: float = 9.8,
    lambda_min: float = -5.1,
    step_constant: float = 0.054,
    sigma_tilde_variant: str = "next",
) -> NoiseSchedule:
    """Build the cosine log-SNR schedule ``lambda(u) = -2 log tan(a u + b)``.

    Args:
        T: number of modeled noise levels (>= 2).
        lambda_max: log-SNR at level 0.
        lambda_min: log-SNR at level T.
        step_constant: multiplier in ``s_t^2 = c * sigma_bar_t * sigma_{t+1}^2``.
        sigma_tilde_variant: ``"next"`` uses ``sigma_{t+1}`` in the initializer
            std (posterior lower bound); ``"literal"`` uses ``sigma_t`` and
            falls back to ``sigma_{t+1}`` at ``t = 0`` where ``sigma_0`` is
            undefined; ``"y"`` multiplies the ``"next"`` value by
            ``alpha_{t+1}``, the same bound expressed for ``y_t = alpha_{t+1} x_t``.
    """
    if isinstance(T, bool) or int(T) != T or T < 2:
        raise ScheduleError(f"T must be an integer >= 2, got {T!r}")
    T = int(T)
    if not (math.isfinite(lambda_max) and math.isfinite(lambda_min)):
        raise ScheduleError("log-SNR endpoints must be finite")
    if lambda_max <= lambda_min:
        raise ScheduleError("lambda_max must exceed lambda_min")
    if not (math.isfinite(step_constant) and step_constant > 0):
        raise ScheduleError("step_constant must be positive")
    if sigma_tilde_variant not in SIGMA_TILDE_VARIANTS:
        raise ScheduleError(f"unknown sigma_tilde variant {sigma_tilde_variant!r}")

    b = math.atan(math.exp(-0.5 * lambda_max))
    a = math.atan(math.exp(-0.5 * lambda_min)) - b
    u = np.arange(T + 1, dtype=np.float64) / T
    lam = -2.0 * np.log(np.tan(a * u + b))
    # pin endpoints against last-ulp drift from tan/atan
    lam[0], lam[T] = lambda_max, lambda_min

    alpha_bar = np.sqrt(_sigmoid(lam))
    # sigma_bar^2 = sigmoid(-lam); computed directly to keep precision near alpha_bar ~ 1
    sigma_bar = np.sqrt(_sigmoid(-lam))

    alpha = np.full(T + 1, np.nan)
    sigma = np.full(T + 1, np.nan)
    alpha[1:] = alpha_bar[1:] / alpha_bar[:-1]
    sigma_sq = sigma_bar[1:] ** 2 - alpha[1:] ** 2 * sigma_bar[:-1] ** 2
    if np.any(~(sigma_sq > 0)):
        raise ScheduleError("schedule yields a non-positive per-step variance")
    sigma[1:] = np.sqrt(sigma_sq)

    ratio = np.sqrt(sigma_bar[:-1] ** 2 / sigma_bar[1:] ** 2)
    if sigma_tilde_variant == "next":
        sigma_tilde = ratio * sigma[1:]
    elif sigma_tilde_variant == "y":
        sigma_tilde = ratio * sigma[1:] * alpha[1:]
    else:
        sigma_tilde = ratio * np.concatenate([[sigma[1]], sigma[1:T]])
    step_size = np.sqrt(step_constant * sigma_bar[:-1] * sigma[1:] ** 2)

    for arr in (lam, alpha_bar, sigma_bar, alpha, sigma, sigma_tilde, step_size):
        arr.setflags(write=False)
    return NoiseSchedule(
        T=T,
        lambda_max=float(lambda_max),
        lambda_min=float(lambda_min),
        step_constant=float(step_constant),
        sigma_tilde_variant=sigma_tilde_variant,
        lam=lam,
        alpha_bar=alpha_bar,
        sigma_bar=sigma_bar,
        alpha=alpha,
        sigma=sigma,
        sigma_tilde=sigma_tilde,
        step_size=step_size,
    )


def snr_embedding_input(schedule: NoiseSchedule, t):
    """Noise-level conditioning scalar fed to the networks (the log-SNR)."""
    schedule.check_level(t, upper=schedule.T)
    if np.ndim(t) == 0:
        return float(schedule.lam[int(t)])
    return schedule.lam[np.asarray(t)]


def adjusted_step_size(schedule: NoiseSchedule, t: int, K_train: int, K_infer: int) -> float:
    """Langevin step size rescaled by ``sqrt(K_train / K_infer)``."""
    if K_train < 1 or K_infer < 1:
        raise ValueError("step counts must be >= 1")
    schedule.check_level(t)
    s = float(schedule.step_size[t])
    if K_train == K_infer:
        return s
    return s * math.sqrt(K_train / K_infer)


def step_to_posterior_ratio(schedule: NoiseSchedule, data_var: float = 1.0) -> np.ndarray:
    """Per-level ``s_t^2 / Var(y_t | x_{t+1})`` for isotropic Gaussian data.

    Unadjusted Langevin on a Gaussian with curvature ``c`` (in units of
    ``1 / s_t^2``) has stationary variance ``s_t^2 / (c (1 - c / 4))``, which
    never drops below ``s_t^2``. A ratio above 1 therefore means no energy can
    make the level-``t`` chain match the data, and training tends to push the
    curvature up until the chain explodes.
    """
    if data_var <= 0:
        raise ValueError("data_var must be positive")
    a = schedule.alpha[1:]
    marg = a * a * (schedule.alpha_bar[:-1] ** 2 * data_var + schedule.sigma_bar[:-1] ** 2)
    post = 1.0 / (1.0 / marg + 1.0 / schedule.sigma[1:] ** 2)
    return schedule.step_size ** 2 / post
