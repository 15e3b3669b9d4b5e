"""Multi-level Siamese objectives: global BYOL heads, dense alignment heads, EMA."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from . import tensor as T
from .nn import ArchConfig, Mode, ParamStore
from .tensor import Tensor

NONE, GLOBAL, DENSE = "none", "global", "dense_plus_global"
HEAD_KINDS = (NONE, GLOBAL, DENSE)
PRESETS = ("byol", "ladder_byol", "dense_byol", "ladder_dense_byol")


class ConfigError(ValueError):
    pass


def weight_schedule(w: float, num_stages: int) -> list[float]:
    """Halving weights below the top: [2^(i-S) * w for i < S] + [1]."""
    if num_stages < 2:
        raise ConfigError("weight_schedule needs at least 2 stages")
    return [math.ldexp(w, i - num_stages) for i in range(1, num_stages)] + [1.0]


@dataclass
class LadderConfig:
    heads: tuple[str, ...]
    weights: tuple[float, ...]
    tau_base: float = 0.99
    symmetrize: bool = True
    hidden_dim: int = 256
    out_dim: int = 64

    def __post_init__(self):
        self.heads = tuple(self.heads)
        self.weights = tuple(float(w) for w in self.weights)
        if len(self.heads) != len(self.weights):
            raise ConfigError("heads and weights must have one entry per stage")
        if any(h not in HEAD_KINDS for h in self.heads):
            raise ConfigError(f"unknown head kind in {self.heads}")
        if self.heads[-1] == NONE or self.weights[-1] != 1.0:
            raise ConfigError("the top stage always carries a loss with weight 1")
        if any(w < 0 for w in self.weights):
            raise ConfigError("loss weights must be non-negative")
        for h, w in zip(self.heads, self.weights):
            if h == NONE and w != 0:
                raise ConfigError("a stage without a head must have weight 0")
        if not 0.0 <= self.tau_base <= 1.0:
            raise ConfigError("tau_base must lie in [0, 1]")

    @property
    def num_stages(self) -> int:
        return len(self.heads)

    def active_levels(self) -> list[int]:
        """1-based stages whose loss enters the total (zero weights are skipped)."""
        return [i + 1 for i, (h, w) in enumerate(zip(self.heads, self.weights))
                if h != NONE and w != 0]

    @classmethod
    def preset(cls, name: str, num_stages: int = 4, weight_w: float = 0.5, **kw) -> "LadderConfig":
        S = num_stages
        ws = weight_schedule(weight_w, S)
        if name == "byol":
            heads = [NONE] * (S - 1) + [GLOBAL]
            ws = [0.0] * (S - 1) + [1.0]
        elif name == "dense_byol":
            heads = [NONE] * (S - 1) + [DENSE]
            ws = [0.0] * (S - 1) + [1.0]
        elif name == "ladder_byol":
            heads = [GLOBAL] * S
        elif name == "ladder_dense_byol":
            half = S // 2
            heads = [DENSE] * half + [GLOBAL] * (S - half)
        else:
            raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")
        return cls(tuple(heads), tuple(ws), **kw)


# ---------------------------------------------------------------- heads


def init_heads(arch: ArchConfig, cfg: LadderConfig, seed: int, dtype=np.float32) -> ParamStore:
    """Projector and predictor MLPs (and 1x1-conv versions for dense stages).

    Heads are created for every stage with a head kind, even at zero weight,
    so a store can be reused across weight settings.
    """
    rng = np.random.default_rng([seed, 0x4EAD])
    store = ParamStore(arch=arch)
    hid, out = cfg.hidden_dim, cfg.out_dim
    for i, kind in enumerate(cfg.heads, start=1):
        if kind == NONE:
            continue
        c = arch.channels[i - 1]
        for part, din in (("proj", c), ("pred", out)):
            p = f"head{i}.{part}"
            nn.add_linear(store, rng, f"{p}.fc1", din, hid, dtype)
            nn.add_bn(store, f"{p}.bn", hid, dtype)
            nn.add_linear(store, rng, f"{p}.fc2", hid, out, dtype)
        if kind == DENSE:
            for part, din in (("dproj", c), ("dpred", out)):
                p = f"head{i}.{part}"
                nn.add_conv(store, rng, f"{p}.conv1", din, hid, 1, bias=True, dtype=dtype)
                nn.add_bn(store, f"{p}.bn", hid, dtype)
                nn.add_conv(store, rng, f"{p}.conv2", hid, out, 1, bias=True, dtype=dtype)
    return store


PREDICTOR_TAGS = (".pred.", ".dpred.")


def target_copy(online: ParamStore) -> ParamStore:
    """Target store: same values as online, no predictors, not trainable."""
    return online.copy(drop=PREDICTOR_TAGS, trainable=False)


def mlp(store: ParamStore, prefix: str, x: Tensor, mode: Mode) -> Tensor:
    h = T.relu(nn.batchnorm(store, f"{prefix}.bn", nn.linear(store, f"{prefix}.fc1", x), mode))
    return nn.linear(store, f"{prefix}.fc2", h)


def conv_mlp(store: ParamStore, prefix: str, x: Tensor, mode: Mode) -> Tensor:
    h = T.relu(nn.batchnorm(store, f"{prefix}.bn", nn.conv(store, f"{prefix}.conv1", x), mode))
    return nn.conv(store, f"{prefix}.conv2", h)


def _require(store: ParamStore, name: str, stage: int, what: str) -> None:
    if f"{name}.fc1.weight" not in store and f"{name}.conv1.weight" not in store:
        raise ConfigError(f"stage {stage} has no {what} head configured")


def project_global(store: ParamStore, stage: int, z: Tensor, mode: Mode) -> Tensor:
    """Side-branch pooling followed by the stage's projector."""
    _require(store, f"head{stage}.proj", stage, "global")
    return mlp(store, f"head{stage}.proj", T.global_avg_pool(z), mode)


def project_dense(store: ParamStore, stage: int, z: Tensor, mode: Mode) -> Tensor:
    _require(store, f"head{stage}.dproj", stage, "dense")
    return conv_mlp(store, f"head{stage}.dproj", z, mode)


# ---------------------------------------------------------------- losses


def byol_pair_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over rows of ||n(pred) - n(target)||^2 = 2 - 2 cos, in [0, 4]."""
    if pred.shape != target.shape:
        raise T.ShapeError(f"byol_pair_loss shape mismatch: {pred.shape} vs {target.shape}")
    d = T.sub(T.l2_normalize(pred), T.l2_normalize(target))
    # rounding can lift an antiparallel pair a few ulp past 4, where the true gradient is 0
    return T.mean(T.clip(T.sum(T.mul(d, d), axis=-1), 0.0, 4.0))


def global_level_loss(z_online: Tensor, z_target: Tensor, online: ParamStore,
                      target: ParamStore, stage: int, online_mode: Mode,
                      target_mode: Mode) -> Tensor:
    """One direction: predictor(projector(pool(z_online))) against the target projection."""
    y_online = project_global(online, stage, z_online, online_mode)
    with T.no_grad():
        y_target = project_global(target, stage, z_target, target_mode)
    pred = mlp(online, f"head{stage}.pred", y_online, online_mode)
    return byol_pair_loss(pred, T.stop_gradient(y_target))


def _argmax_locations(ya: np.ndarray, yb: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """For every location of ya, flat index of the most cosine-similar location of yb.

    np.argmax returns the first maximum, i.e. the smallest row-major index on ties.
    Only yb is normalized: the argmax for a fixed ya vector ignores its length.
    """
    B, C = ya.shape[:2]
    a = ya.reshape(B, C, -1)
    b = yb.reshape(B, C, -1)
    bn = b / np.maximum(np.sqrt((b * b).sum(axis=1, keepdims=True)), eps)
    sims = np.matmul(a.transpose(0, 2, 1), bn)
    return sims.argmax(axis=2)


def dense_align(ya: Tensor, yb: Tensor) -> Tensor:
    """Resample yb onto ya's grid by per-location argmax cosine similarity.

    The selection is data: gradients reach the chosen yb vectors but not the choice.
    """
    if ya.ndim != 4 or yb.ndim != 4 or ya.shape[:2] != yb.shape[:2]:
        raise T.ShapeError(f"dense_align needs matching batch/channels: {ya.shape} vs {yb.shape}")
    idx = _argmax_locations(ya.data, yb.data)
    return T.gather_locations(yb, idx, ya.shape[2:])


def dense_pair_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Per-location normalized squared distance, averaged over batch and space."""
    d = T.sub(T.l2_normalize(pred, axis=1), T.l2_normalize(target, axis=1))
    return T.mean(T.clip(T.sum(T.mul(d, d), axis=1), 0.0, 4.0))


def dense_level_loss(z_online: Tensor, z_target: Tensor, online: ParamStore,
                     target: ParamStore, stage: int, online_mode: Mode,
                     target_mode: Mode) -> Tensor:
    ya = project_dense(online, stage, z_online, online_mode)
    with T.no_grad():
        yb = project_dense(target, stage, z_target, target_mode)
    aligned = T.stop_gradient(dense_align(ya, yb))
    pred = conv_mlp(online, f"head{stage}.dpred", ya, online_mode)
    return dense_pair_loss(pred, aligned)


def mix_dense_global(dense, global_):
    return T.scale(T.add(dense, global_), 0.5) if isinstance(dense, Tensor) else (dense + global_) / 2


def level_loss(kind: str, z_online: Tensor, z_target: Tensor, online: ParamStore,
               target: ParamStore, stage: int, online_mode: Mode, target_mode: Mode) -> Tensor:
    args = (z_online, z_target, online, target, stage, online_mode, target_mode)
    if kind == GLOBAL:
        return global_level_loss(*args)
    if kind == DENSE:
        return mix_dense_global(dense_level_loss(*args), global_level_loss(*args))
    raise ConfigError(f"stage {stage} carries no loss")


def ladder_total_loss(out_online: Sequence[Tensor], out_target: Sequence[Tensor],
                      online: ParamStore, target: ParamStore, cfg: LadderConfig,
                      online_mode: Mode, target_mode: Mode,
                      levels: Sequence[int] | None = None) -> tuple[Tensor, dict[int, Tensor]]:
    """Top loss plus weighted intermediate losses for one view ordering.

    Returns the total and the unweighted per-level losses (1-based stage keys).
    Stages with zero weight are not evaluated at all.
    """
    S = cfg.num_stages
    if len(out_online) != S or len(out_target) != S:
        raise ConfigError(f"config has {S} stages but encoder produced {len(out_online)}")
    levels = cfg.active_levels() if levels is None else list(levels)
    per: dict[int, Tensor] = {}
    total = None
    for i in levels:
        kind = cfg.heads[i - 1]
        li = level_loss(kind, out_online[i - 1], out_target[i - 1], online, target,
                        i, online_mode, target_mode)
        per[i] = li
        w = cfg.weights[i - 1]
        term = li if w == 1.0 else T.scale(li, w)
        total = term if total is None else T.add(total, term)
    return total, per


def combine_levels(per: dict[int, float], weights: Sequence[float]) -> float:
    """Eq.-4-style weighted sum of plain per-level numbers (top weight is 1)."""
    return float(sum(weights[i - 1] * v for i, v in per.items()))


# ---------------------------------------------------------------- target network


def ema_update(target: ParamStore, online: ParamStore, tau: float) -> ParamStore:
    """target <- tau * target + (1 - tau) * online, for parameters and buffers."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    missing = [n for n in target.params if n not in online.params]
    missing += [n for n in target.buffers if n not in online.buffers]
    if missing:
        raise KeyError(f"target names absent from online store: {missing[:5]}")
    for name, t in target.params.items():
        _ema_inplace(t.data, online.params[name].data, tau)
    for name, buf in target.buffers.items():
        _ema_inplace(buf, online.buffers[name], tau)
    return target


def _ema_inplace(dst: np.ndarray, src: np.ndarray, tau: float) -> None:
    if dst.shape != src.shape:
        raise ValueError(f"EMA shape mismatch {dst.shape} vs {src.shape}")
    if tau == 1.0:
        return
    if tau == 0.0:
        dst[...] = src
        return
    t = dst.dtype.type(tau)
    dst *= t
    dst += (dst.dtype.type(1.0) - t) * src


def tau_schedule(step: int, total_steps: int, tau_base: float) -> float:
    """Cosine ramp of the EMA momentum from tau_base at step 0 to 1 at the end."""
    if total_steps <= 0:
        return 1.0
    if step >= total_steps:
        return 1.0
    return 1.0 - (1.0 - tau_base) * (math.cos(math.pi * step / total_steps) + 1.0) / 2.0
