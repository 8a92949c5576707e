"""Per-level energy models and Gaussian initializers.

``f`` is the negative energy (unnormalized log-density), so Langevin dynamics
ascend it.  The network output ``f_hat`` is rescaled as
``f = f_hat / s_t**2`` where ``s_t`` is the training Langevin step size.

Both learned models and the closed-form Gaussian references below expose the
same duck-typed surface (``energy``, ``grad_y``, ``mean``), so the sampler
and the guidance helpers accept either.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ndgrad import Cond, MLPConfig, ParamSet, forward, init_mlp
from .schedule import NoiseSchedule

INIT_TARGETS = ("y", "x0", "eps")


def level_coef(values: np.ndarray, t):
    """Index a per-level array with a scalar level or a per-sample level array.

    Returns a Python float for scalar ``t`` and an ``(n, 1)`` column otherwise.
    """
    if np.ndim(t) == 0:
        return float(values[int(t)])
    return np.asarray(values)[np.asarray(t)][:, None]


@dataclass(frozen=True)
class GuidanceSpec:
    """Guidance weight ``w`` and concept classes; no concepts = unconditional."""

    w: float = 0.0
    concepts: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "concepts", tuple(int(c) for c in self.concepts))

    @property
    def M(self) -> int:
        return len(self.concepts)


def composition_coefficients(M: int, w: float) -> tuple[float, float]:
    """Weights on each conditional term and on the unconditional term."""
    if M < 1:
        raise ValueError("composition needs at least one concept")
    return w + 1.0, M * w + (M - 1)


class _Conditional:
    schedule: NoiseSchedule
    net: MLPConfig

    @property
    def num_classes(self) -> int:
        return self.net.num_classes

    @property
    def null_class(self) -> int:
        return self.net.num_classes

    @property
    def dim(self) -> int:
        return self.net.in_dim

    def _cond(self, t, c, n: int) -> Cond:
        lam = self.schedule.lam[np.asarray(t)] if np.ndim(t) else np.full(n, self.schedule.lam[int(t)])
        if c is None:
            cls = np.full(n, self.null_class) if self.num_classes else None
        else:
            if not self.num_classes:
                raise ValueError("class conditioning requested on an unconditional model")
            cls = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
            if cls.min() < 0 or cls.max() > self.null_class:
                raise ValueError(f"class index outside [0, {self.num_classes - 1}] (null = {self.null_class})")
        return Cond(lam, cls)


@dataclass
class EnergyModel(_Conditional):
    """Sequence of per-level EBMs sharing one MLP with scalar output."""

    params: ParamSet
    net: MLPConfig
    schedule: NoiseSchedule

    @classmethod
    def create(cls, net: MLPConfig, schedule: NoiseSchedule, rng) -> "EnergyModel":
        if not net.scalar:
            raise ValueError("energy network must have a scalar output")
        return cls(init_mlp(net, rng), net, schedule)

    def _scale(self, t):
        self.schedule.check_level(t)
        return level_coef(self.schedule.step_size, t) ** 2

    def raw(self, y, t, c=None) -> np.ndarray:
        out, _ = forward(self.params, self.net, y, self._cond(t, c, len(y)), False, False)
        return out

    def energy(self, y, t, c=None) -> np.ndarray:
        """Negative energy ``f_hat / s_t^2`` per sample."""
        s2 = self._scale(t)
        out = self.raw(y, t, c).astype(np.float64)
        return out / (s2 if np.ndim(s2) == 0 else s2[:, 0])

    def grad_y(self, y, t, c=None) -> np.ndarray:
        """Gradient of the negative energy w.r.t. the input, float64."""
        s2 = self._scale(t)
        out, tape = forward(self.params, self.net, y, self._cond(t, c, len(y)), False, True)
        g = tape.grad_input(np.ones_like(out)).astype(np.float64)
        return g / s2

    def param_grad(self, y, t, c, upstream) -> tuple[np.ndarray, ParamSet]:
        """Return ``(f, d<upstream, f>/dparams)`` with ``f`` the scaled energy."""
        s2 = self._scale(t)
        s2 = s2 if np.ndim(s2) == 0 else s2[:, 0]
        out, tape = forward(self.params, self.net, y, self._cond(t, c, len(y)), True, False)
        up = (np.asarray(upstream, dtype=np.float64) / s2).astype(out.dtype)
        return out.astype(np.float64) / s2, tape.grad_params(up)


@dataclass
class InitializerModel(_Conditional):
    """Per-level Gaussian proposal ``N(g(x_next; t), sigma_tilde_t^2 I)``.

    ``target`` selects what the network outputs: the mean of ``y_t`` itself
    (``"y"``), a clean-sample estimate (``"x0"``) or a noise estimate
    (``"eps"``); the latter two are mapped to the ``y_t`` mean by the
    shared-noise interpolation.
    """

    params: ParamSet
    net: MLPConfig
    schedule: NoiseSchedule
    target: str = "y"

    def __post_init__(self):
        if self.target not in INIT_TARGETS:
            raise ValueError(f"unknown initializer target {self.target!r}")

    @classmethod
    def create(cls, net: MLPConfig, schedule: NoiseSchedule, rng, target: str = "y") -> "InitializerModel":
        if net.out_dim != net.in_dim:
            raise ValueError("initializer output must match its input dimension")
        return cls(init_mlp(net, rng), net, schedule, target)

    def _affine(self, t):
        """``mean = A * x_next + B * net(x_next)`` coefficients."""
        if self.target == "y":
            return 0.0, 1.0
        sch = self.schedule
        a_next = level_coef(sch.alpha, np.asarray(t) + 1)
        ab_t, ab_n = level_coef(sch.alpha_bar, t), level_coef(sch.alpha_bar, np.asarray(t) + 1)
        sb_t, sb_n = level_coef(sch.sigma_bar, t), level_coef(sch.sigma_bar, np.asarray(t) + 1)
        if self.target == "x0":
            return a_next * sb_t / sb_n, a_next * (ab_t - sb_t * ab_n / sb_n)
        return 1.0, a_next * (sb_t - sb_n / a_next)

    def mean_with_tape(self, x_next, t, c=None):
        self.schedule.check_level(t)
        out, tape = forward(self.params, self.net, x_next, self._cond(t, c, len(x_next)), True, False)
        A, B = self._affine(t)
        mean = out.astype(np.float64) if self.target == "y" else A * x_next + B * out
        return mean, tape, B

    def mean(self, x_next, t, c=None) -> np.ndarray:
        self.schedule.check_level(t)
        out, _ = forward(self.params, self.net, x_next, self._cond(t, c, len(x_next)), False, False)
        if self.target == "y":
            return out.astype(np.float64)
        A, B = self._affine(t)
        return A * x_next + B * out.astype(np.float64)


# ---------------------------------------------------------------------------
# closed-form references


@dataclass
class GaussianEnergy:
    """Exact negative energy of Gaussian data pushed through the diffusion.

    With ``per_level=True`` level ``t`` models ``y_t = alpha_{t+1} x_t`` for
    data ``N(mean, cov)``; otherwise every level uses ``N(mean, cov)`` itself.
    ``class_shift`` optionally adds ``a_c . y`` to the negative energy for
    class ``c`` (the null/None class gets no shift).
    """

    schedule: NoiseSchedule
    mean_: np.ndarray
    cov: np.ndarray
    per_level: bool = True
    class_shift: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.mean_ = np.atleast_1d(np.asarray(self.mean_, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.mean_.size

    @property
    def num_classes(self) -> int:
        return 0 if self.class_shift is None else len(self.class_shift)

    def level_moments(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        if not self.per_level:
            return self.mean_, self.cov
        sch = self.schedule
        a, ab, sb = sch.alpha[t + 1], sch.alpha_bar[t], sch.sigma_bar[t]
        m = a * ab * self.mean_
        V = a * a * (ab * ab * self.cov + sb * sb * np.eye(self.dim))
        return m, V

    def _precision(self, t: int):
        if t not in self._cache:
            m, V = self.level_moments(t)
            self._cache[t] = (m, np.linalg.inv(V))
        return self._cache[t]

    def _shift(self, c, n):
        if c is None or self.class_shift is None:
            return None
        return np.asarray(self.class_shift, dtype=np.float64)[np.broadcast_to(np.asarray(c), (n,))]

    def energy(self, y, t, c=None):
        m, P = self._precision(int(t))
        d = np.asarray(y, dtype=np.float64) - m
        f = -0.5 * np.einsum("ni,ij,nj->n", d, P, d)
        a = self._shift(c, len(d))
        return f if a is None else f + np.sum(a * y, axis=1)

    def grad_y(self, y, t, c=None):
        m, P = self._precision(int(t))
        g = -(np.asarray(y, dtype=np.float64) - m) @ P
        a = self._shift(c, len(g))
        return g if a is None else g + a


@dataclass
class GaussianInitializer:
    """Exact conditional mean ``E[y_t | x_{t+1}]`` for Gaussian data."""

    energy_ref: GaussianEnergy

    @property
    def schedule(self):
        return self.energy_ref.schedule

    @property
    def num_classes(self) -> int:
        return 0

    def mean(self, x_next, t, c=None):
        m, V = self.energy_ref.level_moments(int(t))
        s2 = self.schedule.sigma[int(t) + 1] ** 2
        gain = V @ np.linalg.inv(V + s2 * np.eye(len(m)))
        return m + (np.asarray(x_next, dtype=np.float64) - m) @ gain.T


# ---------------------------------------------------------------------------
# gradients of the conditional log-density


def quadratic_pull(schedule: NoiseSchedule, y, x_next, t):
    return -(y - x_next) / level_coef(schedule.sigma, np.asarray(t) + 1) ** 2


def cond_energy_grad(m, y, x_next, t, c=None):
    """``grad f(y; c, t) - (y - x_next) / sigma_{t+1}^2``."""
    return m.grad_y(y, t, c) + quadratic_pull(m.schedule, y, x_next, t)


def _require_conditional(m):
    if not m.num_classes:
        raise ValueError("guidance requires a class-conditional model")


def guided_energy_grad(m, y, x_next, t, spec: GuidanceSpec):
    """Classifier-free guided gradient for a single concept."""
    if spec.M != 1:
        raise ValueError("guided_energy_grad takes exactly one concept")
    _require_conditional(m)
    w = float(spec.w)
    g = (w + 1.0) * m.grad_y(y, t, spec.concepts[0])
    if w != 0.0:
        g = g - w * m.grad_y(y, t, None)
    return g + quadratic_pull(m.schedule, y, x_next, t)


def compositional_grad(m, y, x_next, t, spec: GuidanceSpec):
    """Product-of-experts gradient over ``spec.concepts`` with guidance ``w``."""
    if spec.M == 0:
        raise ValueError("empty concept list: use the unconditional gradient")
    _require_conditional(m)
    c_cond, c_uncond = composition_coefficients(spec.M, float(spec.w))
    total = m.grad_y(y, t, spec.concepts[0])
    for c in spec.concepts[1:]:
        total = total + m.grad_y(y, t, c)
    g = c_cond * total
    if c_uncond != 0.0:
        g = g - c_uncond * m.grad_y(y, t, None)
    return g + quadratic_pull(m.schedule, y, x_next, t)


def sampling_grad(m, y, x_next, t, spec: GuidanceSpec | None, c=None):
    """Dispatch on the guidance spec; ``c`` is used only without one."""
    if spec is None or spec.M == 0:
        return cond_energy_grad(m, y, x_next, t, c)
    if spec.M == 1:
        return guided_energy_grad(m, y, x_next, t, spec)
    return compositional_grad(m, y, x_next, t, spec)


# ---------------------------------------------------------------------------
# initializer proposals


def initializer_mean(im, x_next, t, c=None, spec: GuidanceSpec | None = None):
    """Proposal mean, guided as an affine combination when ``spec`` has concepts."""
    if spec is None or spec.M == 0:
        return im.mean(x_next, t, c)
    _require_conditional(im)
    w = float(spec.w)
    if spec.M == 1:
        mu = (w + 1.0) * im.mean(x_next, t, spec.concepts[0])
        return mu - w * im.mean(x_next, t, None) if w != 0.0 else mu
    c_cond, c_uncond = composition_coefficients(spec.M, w)
    total = im.mean(x_next, t, spec.concepts[0])
    for c in spec.concepts[1:]:
        total = total + im.mean(x_next, t, c)
    mu = c_cond * total
    return mu - c_uncond * im.mean(x_next, t, None) if c_uncond != 0.0 else mu


def initializer_sample(im, x_next, t, c=None, rng=None, spec: GuidanceSpec | None = None):
    """Draw ``mean + sigma_tilde_t * eps``."""
    mu = initializer_mean(im, x_next, t, c, spec)
    st = level_coef(im.schedule.sigma_tilde, t)
    if np.all(np.asarray(st) == 0.0):
        return mu
    return mu + st * rng.standard_normal(mu.shape)
