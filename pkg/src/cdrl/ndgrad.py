"""Small reverse-mode differentiation engine for dense MLPs.

Arrays are plain numpy ndarrays.  A :class:`Tape` records one forward pass
as a list of nodes in creation order (which is a topological order), and
``backward`` walks it once in reverse.  Gradients are available both for
parameters (training) and for the network input (Langevin dynamics).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """Activations or outputs went non-finite."""


class StaleTapeError(RuntimeError):
    """A tape was replayed after the parameters it recorded were mutated."""


class ParamSet:
    """Named tensors with a stable flattening order.

    ``version`` increases on every in-place mutation so that tapes recorded
    against older values can be rejected.
    """

    def __init__(self, tensors: dict[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]):
        items = list(tensors.items()) if isinstance(tensors, dict) else list(tensors)
        names = [n for n, _ in items]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self._tensors = {n: np.ascontiguousarray(a) for n, a in items}
        self.version = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    @property
    def size(self) -> int:
        return sum(a.size for a in self._tensors.values())

    def bump(self) -> None:
        self.version += 1

    def flatten(self) -> np.ndarray:
        if not self._tensors:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self._tensors.values()])

    def unflatten(self, flat: np.ndarray) -> "ParamSet":
        """Return a new ParamSet with this one's layout filled from ``flat``."""
        flat = np.asarray(flat)
        if flat.size != self.size:
            raise ShapeError(f"expected {self.size} values, got {flat.size}")
        out, i = {}, 0
        for name, a in self._tensors.items():
            out[name] = flat[i:i + a.size].reshape(a.shape).astype(a.dtype)
            i += a.size
        return ParamSet(out)

    def assign(self, other: "ParamSet") -> None:
        """Copy values from ``other`` in place."""
        for name, a in self._tensors.items():
            a[...] = other[name]
        self.bump()

    def copy(self) -> "ParamSet":
        return ParamSet({n: a.copy() for n, a in self._tensors.items()})

    def zeros_like(self) -> "ParamSet":
        return ParamSet({n: np.zeros_like(a) for n, a in self._tensors.items()})

    def astype(self, dtype) -> "ParamSet":
        return ParamSet({n: a.astype(dtype) for n, a in self._tensors.items()})

    def equal(self, other: "ParamSet") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(a, other[n]) for n, a in self.items())


class Var:
    __slots__ = ("value", "parents", "backward", "needs_grad", "index")

    def __init__(self, value, parents=(), backward=None, needs_grad=False, index=-1):
        self.value = value
        self.parents = parents
        self.backward = backward
        self.needs_grad = needs_grad
        self.index = index

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Record of one forward pass.

    Args:
        params: the ParamSet whose tensors appear as leaves, if any.
    """

    def __init__(self, params: ParamSet | None = None):
        self.nodes: list[Var] = []
        self.params = params
        self.version = params.version if params is not None else None
        self._param_leaves: dict[str, Var] = {}
        self._inputs: list[Var] = []
        self.output: Var | None = None

    # leaves ---------------------------------------------------------------
    def _push(self, var: Var) -> Var:
        var.index = len(self.nodes)
        self.nodes.append(var)
        return var

    def input(self, value: np.ndarray, requires_grad: bool = True) -> Var:
        var = self._push(Var(value, needs_grad=requires_grad))
        self._inputs.append(var)
        return var

    def const(self, value: np.ndarray) -> Var:
        return self._push(Var(value))

    def param(self, name: str, requires_grad: bool = True) -> Var:
        if self.params is None:
            raise RuntimeError("tape has no ParamSet")
        if name not in self._param_leaves:
            self._param_leaves[name] = self._push(Var(self.params[name], needs_grad=requires_grad))
        return self._param_leaves[name]

    # ops ------------------------------------------------------------------
    def _op(self, value, parents: Sequence[Var], backward: Callable) -> Var:
        need = any(p.needs_grad for p in parents)
        return self._push(Var(value, tuple(parents), backward if need else None, need))

    def add(self, a: Var, b: Var) -> Var:
        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
        return self._op(a.value + b.value, (a, b), bw)

    def mul(self, a: Var, b: Var) -> Var:
        av, bv = a.value, b.value

        def bw(g):
            return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)
        return self._op(av * bv, (a, b), bw)

    def scale(self, a: Var, c: float) -> Var:
        return self._op(a.value * c, (a,), lambda g: (g * c,))

    def matmul(self, a: Var, b: Var) -> Var:
        av, bv = a.value, b.value

        def bw(g):
            ga = g @ bv.T if a.needs_grad else None
            gb = av.T @ g if b.needs_grad else None
            return ga, gb
        return self._op(av @ bv, (a, b), bw)

    def linear(self, x: Var, W: Var, b: Var) -> Var:
        xv, Wv = x.value, W.value

        def bw(g):
            gx = g @ Wv.T if x.needs_grad else None
            gW = xv.T @ g if W.needs_grad else None
            gb = g.sum(axis=0) if b.needs_grad else None
            return gx, gW, gb
        return self._op(xv @ Wv + b.value, (x, W, b), bw)

    def swish(self, x: Var) -> Var:
        xv = x.value
        sig = _sigmoid(xv)
        return self._op(xv * sig, (x,), lambda g: (g * sig * (1.0 + xv * (1.0 - sig)),))

    def softplus(self, x: Var) -> Var:
        xv = x.value
        return self._op(np.logaddexp(0.0, xv), (x,), lambda g: (g * _sigmoid(xv),))

    def tanh(self, x: Var) -> Var:
        y = np.tanh(x.value)
        return self._op(y, (x,), lambda g: (g * (1.0 - y * y),))

    def square(self, x: Var) -> Var:
        xv = x.value
        return self._op(xv * xv, (x,), lambda g: (2.0 * g * xv,))

    def sum(self, x: Var, axis=None) -> Var:
        shape = x.shape

        def bw(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)
        return self._op(np.asarray(x.value.sum(axis=axis)), (x,), bw)

    def concat(self, parts: Sequence[Var], axis: int = -1) -> Var:
        sizes = [p.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]

        def bw(g):
            return tuple(np.split(g, splits, axis=axis))
        return self._op(np.concatenate([p.value for p in parts], axis=axis), parts, bw)

    def embed(self, table: Var, idx: np.ndarray) -> Var:
        tv = table.value

        def bw(g):
            gt = np.zeros_like(tv)
            np.add.at(gt, idx, g)
            return (gt,)
        return self._op(tv[idx], (table,), bw)

    # backward -------------------------------------------------------------
    def backward(self, out: Var, upstream) -> dict[int, np.ndarray]:
        """Accumulate gradients of ``<upstream, out>`` into every reachable node."""
        if self.params is not None and self.params.version != self.version:
            raise StaleTapeError("parameters changed since this tape was recorded")
        upstream = np.asarray(upstream, dtype=out.value.dtype)
        if upstream.shape != out.shape:
            upstream = np.broadcast_to(upstream, out.shape)
        grads: dict[int, np.ndarray] = {out.index: upstream}
        for node in reversed(self.nodes[: out.index + 1]):
            g = grads.pop(node.index, None) if node.backward is not None else grads.get(node.index)
            if g is None or node.backward is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.needs_grad:
                    continue
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + pg
                else:
                    grads[parent.index] = pg
        return grads

    def grad_params(self, upstream, out: Var | None = None) -> ParamSet:
        out = self.output if out is None else out
        grads = self.backward(out, upstream)
        res = {}
        for name, arr in self.params.items():
            leaf = self._param_leaves.get(name)
            g = grads.get(leaf.index) if leaf is not None else None
            res[name] = np.zeros_like(arr) if g is None else np.asarray(g, dtype=arr.dtype).reshape(arr.shape)
        return ParamSet(res)

    def grad_input(self, upstream, out: Var | None = None, which: int = 0) -> np.ndarray:
        out = self.output if out is None else out
        grads = self.backward(out, upstream)
        leaf = self._inputs[which]
        g = grads.get(leaf.index)
        return np.zeros_like(leaf.value) if g is None else np.asarray(g)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# MLP networks

ACTIVATIONS = ("swish", "softplus", "tanh")


@dataclass(frozen=True)
class MLPConfig:
    """Shape of a conditional MLP.

    Features are ``[x, sinusoidal(lambda), class_embedding]``; the class table
    has ``num_classes + 1`` rows, the last one being the null token.
    """

    in_dim: int
    out_dim: int
    hidden: tuple[int, ...] = (128, 128, 128)
    emb_dim: int = 32
    num_classes: int = 0
    class_dim: int = 16
    activation: str = "swish"
    residual: bool = False
    scalar: bool = False
    dtype: str = "float32"
    max_freq: float = 1.0
    min_freq: float = 0.01

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.residual and self.in_dim != self.out_dim:
            raise ValueError("residual MLP needs in_dim == out_dim")
        if self.scalar and self.out_dim != 1:
            raise ValueError("scalar output needs out_dim == 1")
        if self.emb_dim % 2:
            raise ValueError("emb_dim must be even")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def null_class(self) -> int:
        return self.num_classes

    @property
    def feature_dim(self) -> int:
        return self.in_dim + self.emb_dim + (self.class_dim if self.num_classes else 0)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MLPConfig":
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        return cls(**d)


class Cond(NamedTuple):
    """Per-sample conditioning: log-SNR values and optional class indices."""

    lam: np.ndarray
    cls: np.ndarray | None = None


def init_mlp(cfg: MLPConfig, rng: np.random.Generator, zero_last: bool = True) -> ParamSet:
    """He-style init for hidden layers; the output layer starts at zero."""
    dt = np.dtype(cfg.dtype)
    tensors = {}
    if cfg.num_classes:
        tensors["class_emb"] = rng.normal(0.0, 1.0, (cfg.num_classes + 1, cfg.class_dim)).astype(dt)
    dims = [cfg.feature_dim, *cfg.hidden, cfg.out_dim]
    n_layers = len(dims) - 1
    for i in range(n_layers):
        fan_in, fan_out = dims[i], dims[i + 1]
        if i == n_layers - 1 and zero_last:
            W = np.zeros((fan_in, fan_out))
        else:
            W = rng.normal(0.0, math.sqrt(2.0 / fan_in), (fan_in, fan_out))
        tensors[f"l{i}.W"] = W.astype(dt)
        tensors[f"l{i}.b"] = np.zeros(fan_out, dtype=dt)
    return ParamSet(tensors)


def sinusoidal(lam: np.ndarray, dim: int, max_freq: float = 1.0, min_freq: float = 0.01) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(np.linspace(math.log(max_freq), math.log(min_freq), half))
    arg = np.asarray(lam, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def forward(
    params: ParamSet,
    cfg: MLPConfig,
    x: np.ndarray,
    cond: Cond,
    grad_params: bool = True,
    grad_input: bool = True,
) -> tuple[np.ndarray, Tape]:
    """Run the MLP and return ``(output, tape)``.

    Output has shape ``(n,)`` for scalar networks and ``(n, out_dim)``
    otherwise.  The flags prune the backward graph to what is needed.
    """
    dt = np.dtype(cfg.dtype)
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != cfg.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match in_dim={cfg.in_dim}")
    n = x.shape[0]
    lam = np.broadcast_to(np.asarray(cond.lam, dtype=np.float64), (n,))

    tape = Tape(params)
    xin = tape.input(x.astype(dt, copy=False), requires_grad=grad_input)
    parts = [xin, tape.const(sinusoidal(lam, cfg.emb_dim, cfg.max_freq, cfg.min_freq).astype(dt))]
    if cfg.num_classes:
        cls = cond.cls
        if cls is None:
            cls = np.full(n, cfg.null_class)
        cls = np.broadcast_to(np.asarray(cls, dtype=np.int64), (n,))
        if cls.min() < 0 or cls.max() > cfg.null_class:
            raise IndexError(f"class index out of range [0, {cfg.null_class}]")
        parts.append(tape.embed(tape.param("class_emb", grad_params), cls))
    elif cond.cls is not None and np.any(np.asarray(cond.cls) != 0):
        raise IndexError("class given to an unconditional network")

    h = tape.concat(parts)
    act = getattr(tape, cfg.activation)
    n_layers = len(cfg.hidden) + 1
    for i in range(n_layers):
        h = tape.linear(h, tape.param(f"l{i}.W", grad_params), tape.param(f"l{i}.b", grad_params))
        if i < n_layers - 1:
            h = act(h)
    if cfg.residual:
        h = tape.add(h, xin)
    if cfg.scalar:
        h = tape.sum(h, axis=1)
    if not np.all(np.isfinite(h.value)):
        raise NonFiniteError("non-finite network output")
    tape.output = h
    return h.value, tape


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    m: ParamSet
    v: ParamSet
    step: int = 0

    @classmethod
    def zeros(cls, params: ParamSet) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0)


def adam_step(
    params: ParamSet,
    grads: ParamSet,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[ParamSet, AdamState]:
    """In-place Adam update with bias correction (L2-style weight decay)."""
    if grads.names() != params.names():
        raise ShapeError("gradient names do not match parameters")
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if weight_decay:
            g = g + weight_decay * p
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
    params.bump()
    return params, state


def ema_update(shadow: ParamSet, params: ParamSet, decay: float) -> ParamSet:
    """``shadow <- decay * shadow + (1 - decay) * params`` in place."""
    if not 0.0 <= decay < 1.0:
        raise ValueError("decay must lie in [0, 1)")
    for name, s in shadow.items():
        p = params[name]
        if p.shape != s.shape:
            raise ShapeError(f"shape mismatch for {name}")
        s *= decay
        s += (1.0 - decay) * p
    shadow.bump()
    return shadow


def global_norm(grads: ParamSet) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for _, g in grads.items()))


def clip_by_global_norm(grads: ParamSet, max_norm: float) -> ParamSet:
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    c = max_norm / norm
    return ParamSet({n: g * np.asarray(c, dtype=g.dtype) for n, g in grads.items()})
