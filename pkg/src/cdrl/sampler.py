"""Langevin refinement, ancestral generation, Tweedie denoising, inpainting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .models import GuidanceSpec, initializer_sample, level_coef, sampling_grad


class DivergenceError(FloatingPointError):
    """A Langevin chain left the configured magnitude bound."""

    def __init__(self, msg, level=None, step=None, state=None):
        super().__init__(msg)
        self.level = level
        self.step = step
        self.state = state


@dataclass
class SampleBatch:
    level: int
    data: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ValueError("sample data must be an (n, d) matrix")

    def __len__(self):
        return self.data.shape[0]


@dataclass
class SamplerConfig:
    K: int = 15
    K_train: int = 15
    guidance: GuidanceSpec = field(default_factory=GuidanceSpec)
    tweedie_coeff: float = 2.0
    noise_scale: float = 1.0
    divergence_bound: float = 1e3
    trace: bool = False
    fresh_inpaint_noise: bool = True

    def __post_init__(self):
        if self.K < 0 or self.K_train < 1:
            raise ValueError("K must be >= 0 and K_train >= 1")
        if self.tweedie_coeff < 0:
            raise ValueError("tweedie_coeff must be >= 0")


def step_sizes(schedule, t, K: int, K_train: int):
    """Per-level (or per-sample) Langevin step size with step-count adjustment."""
    s = level_coef(schedule.step_size, t)
    return s if K == K_train else s * math.sqrt(K_train / K)


def langevin_refine(ebm, y0: SampleBatch, x_next: SampleBatch, t, cfg: SamplerConfig, rng,
                    c=None, clamp=None) -> SampleBatch:
    """Run ``cfg.K`` unadjusted Langevin steps on ``p(y_t | x_{t+1})``.

    ``clamp`` is an optional ``(keep_mask, values)`` pair: after every step
    the entries where ``keep_mask`` is true are reset to ``values``.
    """
    y = np.array(y0.data, dtype=np.float64)
    if cfg.K == 0:
        return SampleBatch(y0.level, y, y0.labels)
    x = np.asarray(x_next.data, dtype=np.float64)
    s = step_sizes(ebm.schedule, t, cfg.K, cfg.K_train)
    half_s2 = 0.5 * s * s
    noise = cfg.noise_scale * s
    bound = cfg.divergence_bound
    for k in range(cfg.K):
        g = sampling_grad(ebm, y, x, t, cfg.guidance, c)
        y = y + half_s2 * g
        if cfg.noise_scale:
            y = y + noise * rng.standard_normal(y.shape)
        if clamp is not None:
            keep, vals = clamp
            y[keep] = vals[keep]
        if not np.all(np.isfinite(y)) or np.abs(y).max() > bound:
            bad = ~np.all(np.isfinite(y) & (np.abs(y) <= bound), axis=1)
            where = t if np.ndim(t) == 0 else sorted(set(np.asarray(t)[bad].tolist()))
            raise DivergenceError(
                f"Langevin chain diverged at level {where}, step {k} (|y| > {bound:g})",
                level=where, step=k, state=y)
    return SampleBatch(y0.level, y, y0.labels)


def tweedie_denoise(ebm, x0: SampleBatch, coeff: float = 2.0) -> SampleBatch:
    """``(x + coeff * sigma_bar_0^2 * grad f(x; 0)) / alpha_bar_0`` with the marginal energy."""
    if x0.level != 0:
        raise ValueError("Tweedie denoising applies to level-0 samples")
    sch = ebm.schedule
    x = np.asarray(x0.data, dtype=np.float64)
    ab, sb = float(sch.alpha_bar[0]), float(sch.sigma_bar[0])
    if coeff == 0.0:
        return SampleBatch(0, x / ab, x0.labels)
    return SampleBatch(0, (x + coeff * sb * sb * ebm.grad_y(x, 0, None)) / ab, x0.labels)


@dataclass
class GenerateResult:
    samples: SampleBatch
    pre_tweedie: SampleBatch
    trace: list[SampleBatch] = field(default_factory=list)


def _descend(ebm, init, x: np.ndarray, cfg: SamplerConfig, rng, c=None, trace=None, observed=None):
    """Shared level loop of generation and inpainting; returns level-0 state."""
    sch = ebm.schedule
    for t in range(sch.T - 1, -1, -1):
        a_next = float(sch.alpha[t + 1])
        xb = SampleBatch(t + 1, x)
        y_hat = initializer_sample(init, x, t, c, rng, cfg.guidance)
        clamp = None
        if observed is not None:
            keep, noisy = observed
            xo = noisy(t)
            yo = a_next * xo
            y_hat[keep] = yo[keep]
            clamp = (keep, yo)
        y = langevin_refine(ebm, SampleBatch(t, y_hat), xb, t, cfg, rng, c, clamp).data
        x = y / a_next
        if observed is not None:
            x[keep] = xo[keep]
        if trace is not None:
            trace.append(SampleBatch(t, x.copy()))
    return x


def generate(ebm, init, n: int, cfg: SamplerConfig, rng, c=None) -> GenerateResult:
    """Ancestral sampling from pure noise at level ``T`` down to level 0.

    Returns the Tweedie-denoised samples together with the raw level-0 state
    and, if ``cfg.trace`` is set, the per-level states (level ``T`` first).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    x = rng.standard_normal((n, ebm.dim))
    trace = [SampleBatch(ebm.schedule.T, x.copy())] if cfg.trace else None
    x0 = SampleBatch(0, _descend(ebm, init, x, cfg, rng, c, trace))
    out = tweedie_denoise(ebm, x0, cfg.tweedie_coeff)
    return GenerateResult(out, x0, trace or [])


def inpaint(ebm, init, observed: SampleBatch, mask, cfg: SamplerConfig, rng) -> GenerateResult:
    """Fill the entries where ``mask`` is true; the rest stay at ``observed``.

    The observed values are forward-diffused to each level and written back
    after every proposal and every Langevin step.
    """
    if observed.level != 0:
        raise ValueError("observed batch must be at level 0")
    obs = np.asarray(observed.data, dtype=np.float64)
    fill = np.broadcast_to(np.asarray(mask, dtype=bool), obs.shape)
    keep = ~fill
    sch = ebm.schedule
    shared = None if cfg.fresh_inpaint_noise else rng.standard_normal(obs.shape)

    def noisy(t):
        e = rng.standard_normal(obs.shape) if shared is None else shared
        return float(sch.alpha_bar[t]) * obs + float(sch.sigma_bar[t]) * e

    if not fill.any():
        x0 = SampleBatch(0, obs.copy(), observed.labels)
        return GenerateResult(SampleBatch(0, obs.copy(), observed.labels), x0, [])

    x = rng.standard_normal(obs.shape)
    x[keep] = noisy(sch.T)[keep]
    trace = [SampleBatch(sch.T, x.copy())] if cfg.trace else None
    x = _descend(ebm, init, x, cfg, rng, None, trace, observed=(keep, noisy))
    x[keep] = obs[keep]
    x0 = SampleBatch(0, x, observed.labels)
    out = tweedie_denoise(ebm, x0, cfg.tweedie_coeff).data
    out[keep] = obs[keep]
    return GenerateResult(SampleBatch(0, out, observed.labels), x0, trace or [])
