"""Layers, parameter handling, optimizers, and regularization.

Models are described by a :class:`ModelSpec` (an ordered list of layer
descriptors, shape-checked at construction) and evaluated functionally:
``forward(spec, params, x)`` never mutates anything, and every optimizer
step returns fresh parameters.  That functional discipline is what lets
the meta-learning inner loop clone and update parameters while keeping
the originals intact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor

__all__ = [
    "Dense",
    "Conv",
    "Relu",
    "Scale",
    "Dropout",
    "GlobalAvgPool",
    "Flatten",
    "SoftmaxHead",
    "ModelSpec",
    "ParamSet",
    "OptimizerState",
    "RegularizationConfig",
    "EarlyStoppingConfig",
    "init_params",
    "forward",
    "sgd_step",
    "adam_step",
    "adam_init",
    "l2_penalty",
    "check_early_stop",
    "save_params",
    "load_params",
]


# ---------------------------------------------------------------------------
# layer descriptors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int


@dataclass(frozen=True)
class Conv:
    c_in: int
    c_out: int
    k: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Scale:
    """Fixed, parameter-free input scaling (e.g. feature normalization)."""

    factor: float


@dataclass(frozen=True)
class Dropout:
    rate: float


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class SoftmaxHead:
    """Final dense layer producing one logit per class.

    The softmax itself lives in the loss / prediction functions, so the
    forward pass returns logits.
    """

    classes: int


Layer = object  # any of the descriptors above


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layer stack with its expected (per-sample) input shape.

    Shape compatibility between adjacent layers is validated eagerly; an
    invalid stack raises ``ValueError`` at construction time.
    """

    layers: tuple
    input_shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        self._infer_shapes()

    def _infer_shapes(self) -> list[tuple]:
        """Per-layer output shapes (sample-level, no batch dim)."""
        shape = self.input_shape
        shapes = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                if len(shape) != 3 or shape[0] != layer.c_in:
                    raise ValueError(
                        f"layer {i}: conv expects [{layer.c_in},H,W], got {shape}"
                    )
                _, h, w = shape
                hp = (h + 2 * layer.pad - layer.k) // layer.stride + 1
                wp = (w + 2 * layer.pad - layer.k) // layer.stride + 1
                if hp < 1 or wp < 1:
                    raise ValueError(f"layer {i}: conv output would be empty for {shape}")
                shape = (layer.c_out, hp, wp)
            elif isinstance(layer, (Relu, Dropout, Scale)):
                pass
            elif isinstance(layer, GlobalAvgPool):
                if len(shape) != 3:
                    raise ValueError(f"layer {i}: pooling expects [C,H,W], got {shape}")
                shape = (shape[0],)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, Dense):
                if shape != (layer.in_dim,):
                    raise ValueError(
                        f"layer {i}: dense expects [{layer.in_dim}], got {shape}"
                    )
                shape = (layer.out_dim,)
            elif isinstance(layer, SoftmaxHead):
                if len(shape) != 1:
                    raise ValueError(f"layer {i}: head expects a flat vector, got {shape}")
                shape = (layer.classes,)
            else:
                raise ValueError(f"layer {i}: unknown layer descriptor {layer!r}")
            shapes.append(shape)
        return shapes

    @property
    def output_shape(self) -> tuple:
        shapes = self._infer_shapes()
        return shapes[-1] if shapes else self.input_shape

    def head_in_dim(self, index: int) -> int:
        """Input width of the dense/head layer at ``index``."""
        shape = self.input_shape if index == 0 else self._infer_shapes()[index - 1]
        return int(np.prod(shape))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


class ParamSet:
    """Named, ordered collection of parameter tensors.

    Names are unique and order is stable, so optimizer state can be zipped
    with parameters.  ``clone`` copies storage; no tensor is ever shared.
    """

    def __init__(self, entries: Iterable[tuple[str, Tensor]]):
        self.entries: list[tuple[str, Tensor]] = list(entries)
        names = [n for n, _ in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")

    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.entries]

    def get(self, name: str) -> Tensor:
        for n, t in self.entries:
            if n == name:
                return t
        raise KeyError(name)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def clone(self, requires_grad: Optional[bool] = None) -> "ParamSet":
        out = []
        for n, t in self.entries:
            rq = t.requires_grad if requires_grad is None else requires_grad
            out.append((n, Tensor(t.data.copy(), requires_grad=rq)))
        return ParamSet(out)

    def replace_tensors(self, tensors: Sequence[Tensor]) -> "ParamSet":
        if len(tensors) != len(self.entries):
            raise ValueError("tensor count does not match parameter count")
        return ParamSet([(n, t) for (n, _), t in zip(self.entries, tensors)])

    def subset(self, prefixes: Sequence[str]) -> "ParamSet":
        return ParamSet(
            [(n, t) for n, t in self.entries if any(n.startswith(p) for p in prefixes)]
        )

    def checksum(self) -> int:
        """Order-sensitive hash of names and raw bytes; for freeze checks."""
        import hashlib

        h = hashlib.sha256()
        for n, t in self.entries:
            h.update(n.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return int.from_bytes(h.digest()[:8], "little")


def init_params(spec: ModelSpec, rng: Rng) -> ParamSet:
    """He-uniform weights (variance 2/fan_in), zero biases; seed-deterministic."""
    entries: list[tuple[str, Tensor]] = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            fan_in = layer.c_in * layer.k * layer.k
            limit = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-limit, limit, (layer.c_out, layer.c_in, layer.k, layer.k))
            entries.append((f"{i}.weight", Tensor(w, requires_grad=True)))
            entries.append((f"{i}.bias", Tensor(np.zeros(layer.c_out), requires_grad=True)))
        elif isinstance(layer, Dense):
            limit = np.sqrt(6.0 / layer.in_dim)
            w = rng.uniform(-limit, limit, (layer.in_dim, layer.out_dim))
            entries.append((f"{i}.weight", Tensor(w, requires_grad=True)))
            entries.append((f"{i}.bias", Tensor(np.zeros(layer.out_dim), requires_grad=True)))
        elif isinstance(layer, SoftmaxHead):
            in_dim = spec.head_in_dim(i)
            limit = np.sqrt(6.0 / in_dim)
            w = rng.uniform(-limit, limit, (in_dim, layer.classes))
            entries.append((f"{i}.weight", Tensor(w, requires_grad=True)))
            entries.append((f"{i}.bias", Tensor(np.zeros(layer.classes), requires_grad=True)))
    return ParamSet(entries)


def forward(
    spec: ModelSpec,
    params: ParamSet,
    x: Tensor,
    mode: str = "train",
    rng: Optional[Rng] = None,
) -> Tensor:
    """Run a batch through the model; returns logits (or features).

    ``x`` is [N, *input_shape].  Dropout is active only in train mode and
    uses inverted scaling, so eval mode needs no rescaling and is fully
    deterministic.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = x if isinstance(x, Tensor) else Tensor(x)
    if tuple(x.data.shape[1:]) != spec.input_shape:
        raise ValueError(
            f"input shape {x.data.shape[1:]} does not match spec {spec.input_shape}"
        )
    h = x
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            w = params.get(f"{i}.weight")
            b = params.get(f"{i}.bias")
            h = T.conv2d(h, w, stride=layer.stride, padding=layer.pad)
            h = T.add(h, T.reshape(b, (1, layer.c_out, 1, 1)))
        elif isinstance(layer, (Dense, SoftmaxHead)):
            w = params.get(f"{i}.weight")
            b = params.get(f"{i}.bias")
            h = T.add(T.matmul(h, w), T.reshape(b, (1, b.data.shape[0])))
        elif isinstance(layer, Relu):
            h = T.relu(h)
        elif isinstance(layer, Scale):
            h = T.mul(h, Tensor(layer.factor))
        elif isinstance(layer, Dropout):
            if mode == "train" and layer.rate > 0.0:
                if rng is None:
                    raise ValueError("dropout in train mode needs an Rng")
                keep = 1.0 - layer.rate
                mask = (rng.random(h.data.shape) < keep).astype(np.float64) / keep
                h = T.mul(h, Tensor(mask))
        elif isinstance(layer, GlobalAvgPool):
            h = T.global_avg_pool2d(h)
        elif isinstance(layer, Flatten):
            h = T.reshape(h, (h.data.shape[0], int(np.prod(h.data.shape[1:]))))
    return h


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str  # "sgd" | "adam"
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(params: ParamSet, lr: float) -> OptimizerState:
    return OptimizerState(
        kind="adam",
        lr=lr,
        m=[np.zeros_like(t.data) for t in params.tensors()],
        v=[np.zeros_like(t.data) for t in params.tensors()],
    )


def _grad_arrays(grads) -> list[np.ndarray]:
    return [g.data if isinstance(g, Tensor) else np.asarray(g) for g in grads]


def adam_step(
    params: ParamSet, grads: Sequence, state: OptimizerState
) -> tuple[ParamSet, OptimizerState]:
    """Bias-corrected Adam update; returns new values, mutates nothing."""
    gs = _grad_arrays(grads)
    if len(gs) != len(params):
        raise ValueError(f"got {len(gs)} gradients for {len(params)} parameters")
    t = state.step_count + 1
    new_m, new_v, new_tensors = [], [], []
    for (name, p), g, m, v in zip(params.entries, gs, state.m, state.v):
        m2 = state.beta1 * m + (1 - state.beta1) * g
        v2 = state.beta2 * v + (1 - state.beta2) * (g * g)
        m_hat = m2 / (1 - state.beta1**t)
        v_hat = v2 / (1 - state.beta2**t)
        new = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
        new_m.append(m2)
        new_v.append(v2)
        new_tensors.append(Tensor(new, requires_grad=p.requires_grad))
    new_state = replace(state, step_count=t, m=new_m, v=new_v)
    return params.replace_tensors(new_tensors), new_state


def sgd_step(params: ParamSet, grads: Sequence, lr: float) -> ParamSet:
    """Plain gradient descent: w' = w - lr*g, functionally."""
    gs = _grad_arrays(grads)
    if len(gs) != len(params):
        raise ValueError(f"got {len(gs)} gradients for {len(params)} parameters")
    new_tensors = [
        Tensor(p.data - lr * g, requires_grad=p.requires_grad)
        for (_, p), g in zip(params.entries, gs)
    ]
    return params.replace_tensors(new_tensors)


# ---------------------------------------------------------------------------
# regularization and early stopping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegularizationConfig:
    l2_lambda: float = 2e-6


@dataclass(frozen=True)
class EarlyStoppingConfig:
    patience: int = 10
    min_delta: float = 1e-4


def l2_penalty(params: ParamSet, lam: float) -> Tensor:
    """lambda * sum of squared weight entries; biases excluded."""
    if lam < 0:
        raise ValueError("l2 lambda must be non-negative")
    total = None
    for name, t in params.entries:
        if not name.endswith(".weight"):
            continue
        s = T.reduce_sum(T.mul(t, t))
        total = s if total is None else T.add(total, s)
    if total is None:
        return Tensor(0.0)
    return T.mul(total, Tensor(lam))


def check_early_stop(history: Sequence[float], cfg: EarlyStoppingConfig) -> bool:
    """True when the last ``patience`` losses all failed to improve.

    An entry improves when it beats the best loss seen strictly before it
    by more than ``min_delta``.  Needs at least patience+1 entries.
    """
    if not history:
        raise ValueError("history must be non-empty")
    if len(history) < cfg.patience + 1:
        return False
    for i in range(len(history) - cfg.patience, len(history)):
        best_before = min(history[:i])
        if history[i] < best_before - cfg.min_delta:
            return False
    return True


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

_MAGIC = b"FSPSET\x00\x00"
_VERSION = 1


def save_params(params: ParamSet, path) -> None:
    """Flat binary checkpoint; round-trips bit-exactly.

    Layout (all integers little-endian): 8-byte magic, u32 version,
    u32 entry count; then per entry u32 name length, utf-8 name bytes,
    u32 rank, u32 dims, raw little-endian float64 data.
    """
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(params)))
        for name, t in params.entries:
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            arr = np.ascontiguousarray(t.data, dtype="<f8")
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_params(path, requires_grad: bool = True) -> ParamSet:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint")
        version, count = struct.unpack("<II", f.read(8))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        entries = []
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(dims)
            entries.append((name, Tensor(data.copy(), requires_grad=requires_grad)))
    return ParamSet(entries)
