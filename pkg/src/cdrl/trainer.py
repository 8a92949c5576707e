"""Cooperative training of the energy models and initializers, plus checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import TrainConfig
from .evaluation import ToySpec, gen_toy
from .models import EnergyModel, InitializerModel, initializer_sample, level_coef
from .ndgrad import (AdamState, MLPConfig, NonFiniteError, ParamSet, adam_step,
                     clip_by_global_norm, ema_update)
from .rng import from_state, get_state, stream
from .sampler import DivergenceError, SampleBatch, SamplerConfig, langevin_refine
from .schedule import NoiseSchedule, build_cosine_schedule, step_to_posterior_ratio

log = logging.getLogger(__name__)

MAGIC = b"CDRL"
FORMAT_VERSION = 1


class CheckpointError(IOError):
    pass


def warmup_lr(it: int, base_lr: float, warmup_iters: int, head_start: int = 0) -> float:
    """Linear warmup ``min(1, (it + head_start) / warmup_iters) * base_lr``."""
    if warmup_iters <= 0:
        return base_lr
    return min(1.0, (it + head_start) / warmup_iters) * base_lr


def make_pair(x0, t, e, schedule: NoiseSchedule, variance_reduction: bool = True,
              e2=None, literal: bool = False):
    """Build the training pair ``(y_t, x_{t+1})`` from clean data.

    With variance reduction both levels interpolate ``x0`` and one noise draw
    ``e``.  Without it, ``x_t`` uses ``e`` and the forward step uses ``e2``.
    ``literal`` composes the shared-noise interpolation on ``x_t`` instead of
    ``x0`` (kept for comparison; it does not preserve the marginals).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    t1 = np.asarray(t) + 1
    ab_t, sb_t = level_coef(schedule.alpha_bar, t), level_coef(schedule.sigma_bar, t)
    ab_n, sb_n = level_coef(schedule.alpha_bar, t1), level_coef(schedule.sigma_bar, t1)
    a_n, s_n = level_coef(schedule.alpha, t1), level_coef(schedule.sigma, t1)
    x_t = ab_t * x0 + sb_t * e
    if variance_reduction:
        x_next = ab_n * (x_t if literal else x0) + sb_n * e
    else:
        if e2 is None:
            raise ValueError("independent pairing needs a second noise draw")
        x_next = a_n * x_t + s_n * e2
    return a_n * x_t, x_next


def build_schedule(cfg: TrainConfig) -> NoiseSchedule:
    return build_cosine_schedule(cfg.T, cfg.lambda_max, cfg.lambda_min, cfg.step_constant,
                                 cfg.sigma_tilde_variant)


def net_configs(cfg: TrainConfig, dim: int) -> tuple[MLPConfig, MLPConfig]:
    common = dict(emb_dim=cfg.emb_dim, num_classes=cfg.num_classes, class_dim=cfg.class_dim,
                  activation=cfg.activation, dtype=cfg.dtype)
    ebm = MLPConfig(dim, 1, cfg.hidden, scalar=True, **common)
    init = MLPConfig(dim, dim, cfg.init_hidden, residual=cfg.init_target != "eps", **common)
    return ebm, init


def load_dataset(cfg: TrainConfig) -> SampleBatch:
    if cfg.data_path:
        from .io import read_csv
        return SampleBatch(0, read_csv(cfg.data_path))
    return gen_toy(ToySpec(cfg.data, seed=cfg.data_seed, dim=cfg.data_dim), cfg.n_data)


@dataclass
class StepStats:
    it: int
    t: float
    ebm_loss: float
    init_loss: float
    mean_energy_real: float
    mean_energy_fake: float
    langevin_shift: float = 0.0


class Trainer:
    """Holds both models, their EMA shadows, optimiser state and data cursor."""

    def __init__(self, cfg: TrainConfig, data: SampleBatch | None = None, *, _init_models: bool = True):
        self.cfg = cfg
        self.schedule = build_schedule(cfg)
        self.data = load_dataset(cfg) if data is None else data
        if len(self.data) < cfg.batch_size:
            raise ValueError("dataset smaller than one batch")
        dim = self.data.data.shape[1]
        ebm_net, init_net = net_configs(cfg, dim)
        init_rng = stream(cfg.seed, 0)
        self.ebm = EnergyModel.create(ebm_net, self.schedule, init_rng)
        self.init = InitializerModel.create(init_net, self.schedule, init_rng, cfg.init_target)
        self.ebm_ema = self.ebm.params.copy()
        self.init_ema = self.init.params.copy()
        self.adam_ebm = AdamState.zeros(self.ebm.params)
        self.adam_init = AdamState.zeros(self.init.params)
        self.rng = stream(cfg.seed, 2)
        self.iteration = 0
        self.epoch = 0
        self.cursor = 0
        self._perm = None
        self.sampler_cfg = SamplerConfig(K=cfg.K, K_train=max(cfg.K, 1),
                                         divergence_bound=cfg.divergence_bound)
        data_var = float(np.mean(np.var(self.data.data, axis=0)))
        ratio = step_to_posterior_ratio(self.schedule, max(data_var, 1e-12))
        if np.any(ratio > 1.0):
            log.warning("Langevin step exceeds the conditional std at levels %s (ratio %s); "
                        "lower step_constant or raise T", np.flatnonzero(ratio > 1.0).tolist(),
                        np.round(ratio[ratio > 1.0], 2).tolist())

    # data -------------------------------------------------------------------
    def _permutation(self):
        if self._perm is None or self._perm[0] != self.epoch:
            perm = stream(self.cfg.seed, 1, self.epoch).permutation(len(self.data))
            self._perm = (self.epoch, perm)
        return self._perm[1]

    def next_batch(self):
        B = self.cfg.batch_size
        if self.cursor + B > len(self.data):
            self.epoch += 1
            self.cursor = 0
        idx = self._permutation()[self.cursor:self.cursor + B]
        self.cursor += B
        labels = None if self.data.labels is None else self.data.labels[idx]
        return self.data.data[idx], labels

    # models -----------------------------------------------------------------
    def ema_models(self) -> tuple[EnergyModel, InitializerModel]:
        ebm = EnergyModel(self.ebm_ema, self.ebm.net, self.schedule)
        init = InitializerModel(self.init_ema, self.init.net, self.schedule, self.init.target)
        return ebm, init

    def _classes(self, labels, n):
        cfg = self.cfg
        if not cfg.num_classes:
            return None
        if labels is None:
            raise ValueError("class-conditional training needs labels")
        labels = np.asarray(labels)
        if labels.ndim == 2:
            # one controlled attribute per element, chosen uniformly
            pick = self.rng.integers(0, labels.shape[1], n)
            labels = labels[np.arange(n), pick]
        drop = self.rng.random(n) < cfg.p_uncond
        return np.where(drop, cfg.num_classes, labels).astype(np.int64)

    # one iteration ----------------------------------------------------------
    def train_step(self, x0, labels=None, refined_override=None) -> StepStats:
        """One cooperative update on a batch of clean data.

        ``refined_override`` replaces the Langevin output (testing hook).
        """
        cfg, sch, rng = self.cfg, self.schedule, self.rng
        x0 = np.asarray(x0, dtype=np.float64)
        n = x0.shape[0]
        t = rng.integers(0, sch.T, n) if cfg.per_element_levels else int(rng.integers(0, sch.T))
        e = rng.standard_normal(x0.shape)
        e2 = None if cfg.variance_reduction else rng.standard_normal(x0.shape)
        y, x_next = make_pair(x0, t, e, sch, cfg.variance_reduction, e2, cfg.literal_pairing)
        cls = self._classes(labels, n)

        y_hat = initializer_sample(self.init, x_next, t, cls, rng)
        if refined_override is not None:
            y_ref = np.asarray(refined_override, dtype=np.float64)
        else:
            y_ref = langevin_refine(self.ebm, SampleBatch(0, y_hat), SampleBatch(1, x_next), t,
                                    self.sampler_cfg, rng, cls).data

        # EBM: ascend mean f(y) - mean f(y_ref)
        both = np.concatenate([y, y_ref])
        t2 = t if np.ndim(t) == 0 else np.concatenate([t, t])
        c2 = None if cls is None else np.concatenate([cls, cls])
        upstream = np.concatenate([np.full(n, -1.0 / n), np.full(n, 1.0 / n)])
        if cfg.ebm_level_weight == "step":
            # weight level t by s_t^2: the loss then sees raw network outputs
            w = level_coef(sch.step_size, t2) ** 2
            upstream = upstream * (w if np.ndim(w) == 0 else w[:, 0])
        f, g_ebm = self.ebm.param_grad(both, t2, c2, upstream)
        real, fake = float(f[:n].mean()), float(f[n:].mean())

        # initializer: regress the mean on the refined (or data) sample
        target = y if cfg.init_learns_from == "data" else y_ref
        mean, tape, B = self.init.mean_with_tape(x_next, t, cls)
        resid = target - mean
        init_loss = float(np.mean(np.sum(resid * resid, axis=1)))
        up = (-2.0 / n) * resid * B
        g_init = tape.grad_params(up.astype(self.init.params["l0.W"].dtype))

        ebm_loss = fake - real
        if not (math.isfinite(ebm_loss) and math.isfinite(init_loss)):
            raise NonFiniteError(f"non-finite loss at iteration {self.iteration}")
        if cfg.clip_norm > 0:
            g_ebm = clip_by_global_norm(g_ebm, cfg.clip_norm)
            g_init = clip_by_global_norm(g_init, cfg.clip_norm)

        it = self.iteration
        lr_e = warmup_lr(it, cfg.lr_ebm, cfg.warmup_iters, 0)
        lr_i = warmup_lr(it, cfg.lr_init, cfg.warmup_iters, cfg.init_head_start)
        adam_step(self.ebm.params, g_ebm, self.adam_ebm, lr_e, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
        adam_step(self.init.params, g_init, self.adam_init, lr_i, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
        ema_update(self.ebm_ema, self.ebm.params, cfg.ema_decay)
        ema_update(self.init_ema, self.init.params, cfg.ema_decay)
        self.iteration += 1
        shift = float(np.mean(np.linalg.norm(y_ref - y_hat, axis=1)))
        return StepStats(it, float(np.mean(t)), ebm_loss, init_loss, real, fake, shift)

    def run(self, n_iters: int | None = None, callback=None, dump_path=None) -> list[StepStats]:
        """Train until ``n_iters`` more iterations (default: up to ``total_iters``)."""
        stop = self.cfg.total_iters if n_iters is None else self.iteration + n_iters
        history = []
        while self.iteration < stop:
            x0, labels = self.next_batch()
            try:
                st = self.train_step(x0, labels)
            except (DivergenceError, NonFiniteError):
                if dump_path is not None:
                    self.save(dump_path)
                    log.error("training diverged at iteration %d; state dumped to %s", self.iteration, dump_path)
                raise
            history.append(st)
            if callback is not None:
                callback(self, st)
            if self.cfg.log_every and st.it % self.cfg.log_every == 0:
                log.info("iter %d t=%.1f ebm %.4g init %.4g real %.4g fake %.4g", st.it, st.t,
                         st.ebm_loss, st.init_loss, st.mean_energy_real, st.mean_energy_fake)
        return history

    # checkpoints --------------------------------------------------------------
    def _tensor_groups(self):
        return [
            ("ebm", self.ebm.params), ("init", self.init.params),
            ("ebm_ema", self.ebm_ema), ("init_ema", self.init_ema),
            ("adam_ebm_m", self.adam_ebm.m), ("adam_ebm_v", self.adam_ebm.v),
            ("adam_init_m", self.adam_init.m), ("adam_init_v", self.adam_init.v),
        ]

    def state_header(self) -> dict:
        return {
            "format": "cdrl-checkpoint",
            "package_version": __version__,
            "schedule": self.schedule.params(),
            "ebm_net": self.ebm.net.to_dict(),
            "init_net": self.init.net.to_dict(),
            "init_target": self.init.target,
            "train_config": self.cfg.to_dict(),
            "iteration": self.iteration,
            "epoch": self.epoch,
            "cursor": self.cursor,
            "adam_steps": {"ebm": self.adam_ebm.step, "init": self.adam_init.step},
            "rng": get_state(self.rng),
        }

    def save(self, path) -> None:
        tensors = []
        for group, ps in self._tensor_groups():
            for name, arr in ps.items():
                tensors.append((f"{group}/{name}", arr))
        save_checkpoint(path, self.state_header(), tensors)

    @classmethod
    def load(cls, path, data: SampleBatch | None = None) -> "Trainer":
        header, tensors = load_checkpoint(path)
        cfg = TrainConfig.from_dict(_tuples(header["train_config"]))
        tr = cls(cfg, data)
        for group, ps in tr._tensor_groups():
            for name, arr in ps.items():
                arr[...] = tensors[f"{group}/{name}"]
            ps.bump()
        tr.iteration = header["iteration"]
        tr.epoch = header["epoch"]
        tr.cursor = header["cursor"]
        tr.adam_ebm.step = header["adam_steps"]["ebm"]
        tr.adam_init.step = header["adam_steps"]["init"]
        tr.rng = from_state(header["rng"])
        return tr


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


# ---------------------------------------------------------------------------
# binary format: magic | u32 version | u64 header length | header JSON |
# tensor blobs (little-endian, header order) | u32 crc32 of everything before


def save_checkpoint(path, header: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    header = dict(header)
    header["tensors"] = [
        {"name": name, "shape": list(arr.shape), "dtype": _le_dtype(arr).str} for name, arr in tensors
    ]
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = bytearray(MAGIC)
    buf += struct.pack("<IQ", FORMAT_VERSION, len(hbytes))
    buf += hbytes
    for _, arr in tensors:
        buf += np.ascontiguousarray(arr, dtype=_le_dtype(arr)).tobytes()
    buf += struct.pack("<I", zlib.crc32(buf) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(buf))


def _le_dtype(arr: np.ndarray) -> np.dtype:
    return np.dtype("<f4") if arr.dtype.itemsize <= 4 else np.dtype("<f8")


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse and verify a checkpoint; returns ``(header, {name: array})``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 20:
        raise CheckpointError("truncated checkpoint")
    if raw[:4] != MAGIC:
        raise CheckpointError("bad magic: not a CDRL checkpoint")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError("checksum mismatch (corrupted or truncated file)")
    if 16 + hlen > len(raw) - 4:
        raise CheckpointError("truncated header")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    pos = 16 + hlen
    tensors = {}
    for spec in header["tensors"]:
        dt = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if pos + nbytes > len(raw) - 4:
            raise CheckpointError("truncated tensor data")
        tensors[spec["name"]] = np.frombuffer(raw, dtype=dt, count=count, offset=pos).reshape(spec["shape"]).copy()
        pos += nbytes
    if pos != len(raw) - 4:
        raise CheckpointError("trailing bytes after tensor data")
    return header, tensors


@dataclass
class LoadedModels:
    """Sampling view of a checkpoint (EMA weights by default)."""

    ebm: EnergyModel
    init: InitializerModel
    schedule: NoiseSchedule
    header: dict


def load_models(path, use_ema: bool = True) -> LoadedModels:
    header, tensors = load_checkpoint(path)
    s = header["schedule"]
    sch = build_cosine_schedule(s["T"], s["lambda_max"], s["lambda_min"], s["step_constant"],
                                s["sigma_tilde_variant"])
    ebm_net = MLPConfig.from_dict(header["ebm_net"])
    init_net = MLPConfig.from_dict(header["init_net"])
    eg, ig = ("ebm_ema", "init_ema") if use_ema else ("ebm", "init")

    def group(prefix, net):
        dt = np.dtype(net.dtype)
        items = [(k.split("/", 1)[1], v.astype(dt)) for k, v in tensors.items() if k.startswith(prefix + "/")]
        return ParamSet(items)

    ebm = EnergyModel(group(eg, ebm_net), ebm_net, sch)
    init = InitializerModel(group(ig, init_net), init_net, sch, header["init_target"])
    return LoadedModels(ebm, init, sch, header)
