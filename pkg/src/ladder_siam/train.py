"""Online/target Siamese training: one step, and a full pretraining run."""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import losses as L
from . import tensor as T
from .augment import AugPolicy, view_batch
from .dataio import (Checkpoint, Dataset, MetricsWriter, arrays_to_store, batch_iter,
                     save_checkpoint, store_to_arrays)
from .nn import ArchConfig, Mode, ParamStore, encode, init_params
from .optim import OptState, cosine_lr, lars_step, sgd_momentum_step

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, per_level: dict, cause: Exception | None = None):
        self.step = step
        self.per_level = per_level
        levels = ", ".join(f"L{i}={v:.6g}" for i, v in sorted(per_level.items())) or "n/a"
        super().__init__(f"non-finite loss at step {step} ({levels}): {cause}")


class GradientLeak(AssertionError):
    pass


@dataclass
class TrainConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    ladder: L.LadderConfig = field(default_factory=lambda: L.LadderConfig.preset("ladder_byol"))
    aug: AugPolicy = field(default_factory=AugPolicy)
    epochs: int = 40
    batch_size: int = 256
    lr: float = 0.5
    weight_decay: float = 1e-4
    optimizer: str = "sgd"
    momentum: float = 0.9
    target_bn: str = "eval"
    seed: int = 0
    ckpt_every: int = 0  # epochs; 0 = only the final checkpoint
    workers: int = 1

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.optimizer not in ("sgd", "lars"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.target_bn not in ("eval", "train"):
            raise ValueError("target_bn must be 'eval' or 'train'")
        if self.ladder.num_stages != self.arch.num_stages:
            raise ValueError("ladder config and arch disagree on the stage count")

    def digest(self) -> str:
        """Hash of everything that shapes the trajectory (worker count does not)."""
        d = asdict(self)
        d.pop("workers")
        blob = json.dumps(d, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class TrainState:
    online: ParamStore
    target: ParamStore
    opt: OptState
    total_steps: int
    step: int = 0

    @classmethod
    def fresh(cls, cfg: TrainConfig, total_steps: int, dtype=np.float32) -> "TrainState":
        backbone = init_params(cfg.arch, cfg.seed, dtype)
        heads = L.init_heads(cfg.arch, cfg.ladder, cfg.seed, dtype)
        online = backbone.merge(heads)
        return cls(online, L.target_copy(online), OptState(), total_steps)


# ---------------------------------------------------------------- objectives


def ladder_objective(on_out, tgt_out, state: TrainState, cfg: TrainConfig,
                     omode: Mode, tmode: Mode):
    return L.ladder_total_loss(on_out, tgt_out, state.online, state.target, cfg.ladder, omode, tmode)


def byol_objective(on_out, tgt_out, state: TrainState, cfg: TrainConfig,
                   omode: Mode, tmode: Mode):
    """Plain single-level BYOL on the top stage, bypassing the ladder machinery."""
    S = cfg.arch.num_stages
    loss = L.global_level_loss(on_out[-1], tgt_out[-1], state.online, state.target, S, omode, tmode)
    return loss, {S: loss}


OBJECTIVES: dict[str, Callable] = {"ladder": ladder_objective, "byol": byol_objective}


def modes(cfg: TrainConfig) -> tuple[Mode, Mode]:
    a = cfg.arch
    online = Mode(training=True, update_stats=True, momentum=a.bn_momentum, eps=a.bn_eps)
    target = Mode(training=cfg.target_bn == "train", update_stats=False,
                  momentum=a.bn_momentum, eps=a.bn_eps)
    return online, target


def train_step(state: TrainState, xa: np.ndarray, xb: np.ndarray, cfg: TrainConfig,
               objective: str | Callable = "ladder") -> dict:
    """One optimisation step on a batch of view pairs; mutates ``state``.

    Returns lr, tau, total loss and the per-level losses (averaged over view
    orderings when symmetrized).
    """
    fn = OBJECTIVES[objective] if isinstance(objective, str) else objective
    lr = cosine_lr(state.step, state.total_steps, cfg.lr)
    tau = L.tau_schedule(state.step, state.total_steps, cfg.ladder.tau_base)
    omode, tmode = modes(cfg)
    dtype = state.online["stem.conv.weight"].dtype
    xa, xb = np.asarray(xa, dtype), np.asarray(xb, dtype)

    with T.no_grad():
        tgt_a = encode(state.target, xa, tmode, cfg.arch)
        tgt_b = encode(state.target, xb, tmode, cfg.arch)
    directions = [(xa, tgt_b), (xb, tgt_a)] if cfg.ladder.symmetrize else [(xa, tgt_b)]
    share = 1.0 / len(directions)

    total = 0.0
    per: dict[int, float] = {}
    try:
        for x_on, tgt in directions:
            on_out = encode(state.online, x_on, omode, cfg.arch)
            loss, levels = fn(on_out, tgt, state, cfg, omode, tmode)
            total += share * loss.item()
            for i, v in levels.items():
                per[i] = per.get(i, 0.0) + share * v.item()
            if not np.isfinite(loss.item()):
                raise T.NumericError("total_loss")
            T.backward(loss if share == 1.0 else T.scale(loss, share))
    except T.NumericError as e:
        raise TrainingDiverged(state.step, per, e) from e

    leaked = [n for n, t in state.target.items() if t.grad is not None and np.any(t.grad)]
    if leaked:
        raise GradientLeak(f"target parameters received gradient: {leaked[:3]}")

    if cfg.optimizer == "lars":
        lars_step(state.online, state.opt, lr, cfg.momentum, cfg.weight_decay)
    else:
        sgd_momentum_step(state.online, state.opt, lr, cfg.momentum, cfg.weight_decay)
    L.ema_update(state.target, state.online, tau)
    state.online.zero_grad()
    state.step += 1
    return {"lr": lr, "tau": tau, "total": total, "levels": per}


# ---------------------------------------------------------------- checkpoints


def arch_meta(arch: ArchConfig) -> dict[str, str]:
    return {
        "arch.input_size": str(arch.input_size),
        "arch.in_channels": str(arch.in_channels),
        "arch.stem_channels": str(arch.stem_channels),
        "arch.channels": ",".join(map(str, arch.channels)),
        "arch.blocks_per_stage": str(arch.blocks_per_stage),
        "arch.bn_momentum": repr(arch.bn_momentum),
        "arch.bn_eps": repr(arch.bn_eps),
    }


def arch_from_meta(meta: dict[str, str]) -> ArchConfig:
    return ArchConfig(
        input_size=int(meta["arch.input_size"]),
        in_channels=int(meta["arch.in_channels"]),
        stem_channels=int(meta["arch.stem_channels"]),
        channels=tuple(int(c) for c in meta["arch.channels"].split(",")),
        blocks_per_stage=int(meta["arch.blocks_per_stage"]),
        bn_momentum=float(meta["arch.bn_momentum"]),
        bn_eps=float(meta["arch.bn_eps"]),
    )


def to_checkpoint(state: TrainState, cfg: TrainConfig, epoch: int, extra: dict | None = None) -> Checkpoint:
    tensors = store_to_arrays("online", state.online)
    tensors.update(store_to_arrays("target", state.target))
    tensors.update({f"opt.momentum.{k}": v for k, v in state.opt.momentum.items()})
    meta = {
        "step": str(state.step),
        "total_steps": str(state.total_steps),
        "epoch": str(epoch),
        "config_digest": cfg.digest(),
        "rng_state": f"seed={cfg.seed};epoch={epoch}",
        "ladder.heads": ",".join(cfg.ladder.heads),
        "ladder.weights": ",".join(repr(w) for w in cfg.ladder.weights),
        **arch_meta(cfg.arch),
    }
    meta.update(extra or {})
    return Checkpoint(tensors, meta)


def stores_from_checkpoint(ckpt: Checkpoint) -> tuple[ParamStore, ParamStore, ArchConfig]:
    arch = arch_from_meta(ckpt.meta)
    online = arrays_to_store(ckpt, "online", trainable=True, arch=arch)
    target = arrays_to_store(ckpt, "target", trainable=False, arch=arch)
    return online, target, arch


def state_from_checkpoint(ckpt: Checkpoint) -> TrainState:
    online, target, _ = stores_from_checkpoint(ckpt)
    opt = OptState({k: v.copy() for k, v in ckpt.group("opt.momentum").items()},
                   step=int(ckpt.meta["step"]))
    return TrainState(online, target, opt, int(ckpt.meta["total_steps"]), int(ckpt.meta["step"]))


def ladder_from_meta(meta: dict[str, str], hidden: int = 256, out: int = 64) -> L.LadderConfig:
    heads = tuple(meta["ladder.heads"].split(","))
    weights = tuple(float(w) for w in meta["ladder.weights"].split(","))
    return L.LadderConfig(heads, weights, hidden_dim=hidden, out_dim=out)


# ---------------------------------------------------------------- full run


def steps_per_epoch(n: int, batch_size: int) -> int:
    return n // batch_size


def pretrain_run(cfg: TrainConfig, ds: Dataset, out_dir: str | os.PathLike,
                 objective: str = "ladder",
                 on_step: Callable[[int, dict], None] | None = None) -> tuple[Checkpoint, Path]:
    """Train for cfg.epochs, logging every step; returns the final checkpoint and metrics path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spe = steps_per_epoch(len(ds), cfg.batch_size)
    if spe == 0:
        raise ValueError(f"dataset of {len(ds)} samples is smaller than one batch")
    state = TrainState.fresh(cfg, cfg.epochs * spe)
    metrics_path = out / "metrics.csv"
    with MetricsWriter(metrics_path, cfg.arch.num_stages) as mw:
        for epoch in range(cfg.epochs):
            for idx in batch_iter(ds, cfg.batch_size, epoch, cfg.seed):
                xa, xb = view_batch(ds.images, idx, cfg.aug, cfg.seed, epoch, cfg.workers)
                step = state.step
                rec = train_step(state, xa, xb, cfg, objective)
                mw.write(step, rec["lr"], rec["tau"], rec["total"], rec["levels"])
                if on_step:
                    on_step(step, rec)
                if step % 50 == 0:
                    log.info("step %d/%d loss %.4f", step, state.total_steps, rec["total"])
            if cfg.ckpt_every and (epoch + 1) % cfg.ckpt_every == 0 and epoch + 1 < cfg.epochs:
                save_checkpoint(to_checkpoint(state, cfg, epoch + 1), out / f"epoch{epoch + 1:03d}.ckpt")
    final = to_checkpoint(state, cfg, cfg.epochs)
    save_checkpoint(final, out / "final.ckpt")
    return final, metrics_path
