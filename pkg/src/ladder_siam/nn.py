"""Parameter stores, layers and the staged residual encoder."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

# stem <-> conv1, stage1..4 <-> res2..res5
RESNET_STAGE_NAMES = {0: "conv1", 1: "res2", 2: "res3", 3: "res4", 4: "res5"}


@dataclass(frozen=True)
class ArchConfig:
    input_size: int = 32
    in_channels: int = 3
    stem_channels: int = 32
    channels: tuple[int, ...] = (32, 64, 128, 256)
    blocks_per_stage: int = 2
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) < 2:
            raise ValueError("need at least 2 stages")
        if self.blocks_per_stage < 1 or self.input_size < 2 ** (len(self.channels) - 1):
            raise ValueError(f"invalid arch: {self}")

    @property
    def num_stages(self) -> int:
        return len(self.channels)

    def stage_stride(self, stage: int) -> int:
        return 1 if stage == 1 else 2

    def stage_shape(self, stage: int) -> tuple[int, int, int]:
        size = self.input_size
        for s in range(2, stage + 1):
            size = (size - 1) // 2 + 1
        return self.channels[stage - 1], size, size


class ParamStore:
    """Named trainable tensors plus non-trainable buffers (norm running stats)."""

    def __init__(self, params: dict[str, Tensor] | None = None,
                 buffers: dict[str, np.ndarray] | None = None,
                 arch: ArchConfig | None = None):
        self.params: dict[str, Tensor] = dict(params or {})
        self.buffers: dict[str, np.ndarray] = dict(buffers or {})
        self.arch = arch

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self) -> list[str]:
        return list(self.params)

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name}")
        t = Tensor(value, requires_grad=trainable)
        self.params[name] = t
        return t

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def num_params(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def copy(self, drop: tuple[str, ...] = (), trainable: bool | None = None) -> "ParamStore":
        """Deep copy, optionally dropping names containing any of ``drop``."""
        keep = {k: v for k, v in self.params.items() if not any(d in k for d in drop)}
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad if trainable is None else trainable)
                  for k, v in keep.items()}
        buffers = {k: v.copy() for k, v in self.buffers.items() if not any(d in k for d in drop)}
        return ParamStore(params, buffers, self.arch)

    def astype(self, dtype) -> "ParamStore":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad)
                  for k, v in self.params.items()}
        buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        return ParamStore(params, buffers, self.arch)

    def merge(self, other: "ParamStore") -> "ParamStore":
        clash = set(self.params) & set(other.params)
        if clash:
            raise KeyError(f"duplicate parameter names: {sorted(clash)[:3]}")
        return ParamStore({**self.params, **other.params},
                          {**self.buffers, **other.buffers}, self.arch or other.arch)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param.{k}": v.data for k, v in self.params.items()}
        out.update({f"buffer.{k}": v for k, v in self.buffers.items()})
        return out


# ---------------------------------------------------------------- init


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
              dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def add_conv(store: ParamStore, rng, name: str, cin: int, cout: int, k: int,
             bias: bool = False, dtype=np.float32) -> None:
    store.add(f"{name}.weight", he_normal(rng, (cout, cin, k, k), cin * k * k, dtype))
    if bias:
        store.add(f"{name}.bias", np.zeros(cout, dtype))


def add_linear(store: ParamStore, rng, name: str, din: int, dout: int, dtype=np.float32) -> None:
    store.add(f"{name}.weight", he_normal(rng, (din, dout), din, dtype))
    store.add(f"{name}.bias", np.zeros(dout, dtype))


def add_bn(store: ParamStore, name: str, c: int, dtype=np.float32) -> None:
    store.add(f"{name}.scale", np.ones(c, dtype))
    store.add(f"{name}.shift", np.zeros(c, dtype))
    store.buffers[f"{name}.running_mean"] = np.zeros(c, dtype)
    store.buffers[f"{name}.running_var"] = np.ones(c, dtype)


def init_params(arch: ArchConfig, seed: int, dtype=np.float32) -> ParamStore:
    """Backbone parameters: He-normal convs, unit BN scale, zero shift."""
    rng = np.random.default_rng([seed, 0x5EED])
    store = ParamStore(arch=arch)
    add_conv(store, rng, "stem.conv", arch.in_channels, arch.stem_channels, 3, dtype=dtype)
    add_bn(store, "stem.bn", arch.stem_channels, dtype)
    cin = arch.stem_channels
    for s, cout in enumerate(arch.channels, start=1):
        for b in range(1, arch.blocks_per_stage + 1):
            p = f"stage{s}.block{b}"
            stride = arch.stage_stride(s) if b == 1 else 1
            add_conv(store, rng, f"{p}.conv1", cin, cout, 3, dtype=dtype)
            add_bn(store, f"{p}.bn1", cout, dtype)
            add_conv(store, rng, f"{p}.conv2", cout, cout, 3, dtype=dtype)
            add_bn(store, f"{p}.bn2", cout, dtype)
            if stride != 1 or cin != cout:
                add_conv(store, rng, f"{p}.shortcut.conv", cin, cout, 1, dtype=dtype)
                add_bn(store, f"{p}.shortcut.bn", cout, dtype)
            cin = cout
    return store


# ---------------------------------------------------------------- layers


@dataclass
class Mode:
    """How norm layers behave: batch statistics or running statistics."""

    training: bool
    update_stats: bool = True
    momentum: float = 0.9
    eps: float = 1e-5


def as_mode(mode, arch: ArchConfig | None = None) -> Mode:
    if isinstance(mode, Mode):
        return mode
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    m = Mode(training=mode == "train")
    if arch is not None:
        m.momentum, m.eps = arch.bn_momentum, arch.bn_eps
    return m


def batchnorm(store: ParamStore, name: str, x: Tensor, mode: Mode) -> Tensor:
    return T.batch_norm(x, store[f"{name}.scale"], store[f"{name}.shift"],
                        store.buffers[f"{name}.running_mean"],
                        store.buffers[f"{name}.running_var"],
                        training=mode.training, momentum=mode.momentum, eps=mode.eps,
                        update_stats=mode.update_stats)


def conv(store: ParamStore, name: str, x: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    bias = store.params.get(f"{name}.bias")
    return T.conv2d(x, store[f"{name}.weight"], bias, stride=stride, pad=pad)


def linear(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return T.add(T.matmul(x, store[f"{name}.weight"]), store[f"{name}.bias"])


def basic_block(store: ParamStore, prefix: str, x: Tensor, stride: int, mode: Mode) -> Tensor:
    h = T.relu(batchnorm(store, f"{prefix}.bn1", conv(store, f"{prefix}.conv1", x, stride, 1), mode))
    h = batchnorm(store, f"{prefix}.bn2", conv(store, f"{prefix}.conv2", h, 1, 1), mode)
    if f"{prefix}.shortcut.conv.weight" in store:
        sc = batchnorm(store, f"{prefix}.shortcut.bn",
                       conv(store, f"{prefix}.shortcut.conv", x, stride, 0), mode)
    else:
        sc = x
    return T.relu(T.add(h, sc))


# ---------------------------------------------------------------- encoder


def encode(params: ParamStore, x: Tensor | np.ndarray, mode="train",
           arch: ArchConfig | None = None) -> list[Tensor]:
    """Run the stem and every stage, returning the per-stage maps z_1..z_S."""
    arch = arch or params.arch
    if arch is None:
        raise ValueError("encode needs an ArchConfig")
    mode = as_mode(mode, arch)
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=params["stem.conv.weight"].dtype))
    want = (arch.in_channels, arch.input_size, arch.input_size)
    if x.ndim != 4 or tuple(x.shape[1:]) != want:
        raise T.ShapeError(f"encode expects input [B,{want[0]},{want[1]},{want[2]}], got {x.shape}")
    h = T.relu(batchnorm(params, "stem.bn", conv(params, "stem.conv", x, 1, 1), mode))
    outs = []
    for s in range(1, arch.num_stages + 1):
        for b in range(1, arch.blocks_per_stage + 1):
            stride = arch.stage_stride(s) if b == 1 else 1
            h = basic_block(params, f"stage{s}.block{b}", h, stride, mode)
        outs.append(h)
    return outs


def stage_prefix(stage: int) -> str:
    return f"stage{stage}."


def collapse_stage(params: ParamStore, stage: int, shift: float = -1e30) -> ParamStore:
    """Copy of ``params`` whose stage output is identically zero for any finite input.

    The last conv of the stage gets zero weights, so its norm layer emits a
    per-channel constant; a huge negative shift then drives the residual sum
    below zero everywhere and the final ReLU outputs 0.
    """
    arch = params.arch
    out = params.copy()
    last = f"stage{stage}.block{arch.blocks_per_stage}"
    w = out[f"{last}.conv2.weight"]
    w.data[...] = 0
    out[f"{last}.bn2.shift"].data[...] = shift
    return out
