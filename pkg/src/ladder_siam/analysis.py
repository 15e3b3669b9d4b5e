"""Linear probes, view-distance statistics, gradient attribution, collapse checks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import losses as L
from . import tensor as T
from .augment import AugPolicy, make_view_pair, sample_seed
from .dataio import Checkpoint, load_checkpoint
from .nn import ArchConfig, Mode, ParamStore, collapse_stage, encode, init_params
from .tensor import Tensor
from .train import ladder_from_meta, stores_from_checkpoint


class InsufficientSamplesError(ValueError):
    pass


def _ckpt(ckpt) -> Checkpoint:
    return ckpt if isinstance(ckpt, Checkpoint) else load_checkpoint(ckpt)


def _images(ds) -> np.ndarray:
    return ds.images if hasattr(ds, "images") else np.asarray(ds)


def _check_stage(stage: int, arch: ArchConfig) -> None:
    if not 1 <= stage <= arch.num_stages:
        raise ValueError(f"stage {stage} out of range 1..{arch.num_stages}")


# ---------------------------------------------------------------- features


def pooled_stage_features(store: ParamStore, images: np.ndarray, stages: Sequence[int],
                          batch_size: int = 256) -> dict[int, np.ndarray]:
    """Global-average-pooled eval-mode stage outputs of a backbone."""
    arch = store.arch
    for s in stages:
        _check_stage(s, arch)
    dtype = store["stem.conv.weight"].dtype
    chunks: dict[int, list] = {s: [] for s in stages}
    with T.no_grad():
        for k in range(0, len(images), batch_size):
            outs = encode(store, np.asarray(images[k:k + batch_size], dtype), "eval")
            for s in stages:
                chunks[s].append(outs[s - 1].data.mean(axis=(2, 3)))
    return {s: np.concatenate(c) for s, c in chunks.items()}


def extract_features(ckpt, stage: int, ds, batch_size: int = 256) -> np.ndarray:
    online, _, arch = stores_from_checkpoint(_ckpt(ckpt))
    _check_stage(stage, arch)
    return pooled_stage_features(online, _images(ds), [stage], batch_size)[stage]


# ---------------------------------------------------------------- linear probe


@dataclass
class ProbeResult:
    stage: int
    accuracy: float
    n_train: int
    n_val: int
    seed: int
    epochs: int


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng([seed, 0x5B17]).permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def linear_probe(features: np.ndarray, labels: np.ndarray, split=0.2, seed: int = 0,
                 epochs: int = 30, lr: float = 1.0, momentum: float = 0.9,
                 batch_size: int = 256, stage: int = 0, num_classes: int | None = None,
                 val_features: np.ndarray | None = None,
                 val_labels: np.ndarray | None = None) -> ProbeResult:
    """Softmax regression on frozen, standardized features; held-out top-1.

    ``split`` is a validation fraction or an explicit (train_idx, val_idx) pair;
    passing ``val_features``/``val_labels`` uses all of ``features`` for training.
    """
    X = np.asarray(features, np.float64)
    y = np.asarray(labels, np.int64)
    if val_features is not None:
        Xtr, ytr = X, y
        Xva, yva = np.asarray(val_features, np.float64), np.asarray(val_labels, np.int64)
    else:
        if isinstance(split, (float, int)):
            tr, va = split_indices(len(y), float(split), seed)
        else:
            tr, va = (np.asarray(s) for s in split)
            if np.intersect1d(tr, va).size:
                raise ValueError("train and validation indices overlap")
        Xtr, ytr, Xva, yva = X[tr], y[tr], X[va], y[va]
    if len(ytr) == 0 or len(yva) == 0:
        raise ValueError("degenerate split: empty train or validation set")
    K = num_classes or int(max(ytr.max(), yva.max()) + 1)
    if len(np.unique(ytr)) < 2:
        raise ValueError("linear probe needs at least 2 classes in the training split")

    mu = Xtr.mean(axis=0)
    sd = Xtr.std(axis=0)
    sd[sd < 1e-8] = 1.0
    Xtr = (Xtr - mu) / sd
    Xva = (Xva - mu) / sd

    rng = np.random.default_rng([seed, 0x9B0BE])
    D = Xtr.shape[1]
    W = np.zeros((D, K))
    b = np.zeros(K)
    vW = np.zeros_like(W)
    vb = np.zeros_like(b)
    n = len(ytr)
    bs = min(batch_size, n)
    per_epoch = math.ceil(n / bs)
    total = epochs * per_epoch
    step = 0
    for _ in range(epochs):
        perm = rng.permutation(n)
        for k in range(per_epoch):
            idx = perm[k * bs:(k + 1) * bs]
            logits = Xtr[idx] @ W + b
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(len(idx)), ytr[idx]] -= 1.0
            p /= len(idx)
            gW = Xtr[idx].T @ p
            gb = p.sum(axis=0)
            cur = lr * (1 + math.cos(math.pi * step / total)) / 2
            vW = momentum * vW + gW
            vb = momentum * vb + gb
            W -= cur * vW
            b -= cur * vb
            step += 1
    acc = float(((Xva @ W + b).argmax(axis=1) == yva).mean())
    return ProbeResult(stage, acc, len(ytr), len(yva), seed, epochs)


# ---------------------------------------------------------------- view distances


@dataclass
class DistanceStats:
    stage: int
    distances: np.ndarray
    sample_index: np.ndarray
    quantiles: dict[float, float] = field(default_factory=dict)

    @property
    def median(self) -> float:
        return float(np.median(self.distances))


QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


def view_distances(store: ParamStore, images: np.ndarray, stages: Sequence[int], n_samples: int,
                   seed: int, policy: AugPolicy | None = None,
                   batch_size: int = 256) -> dict[int, DistanceStats]:
    """Euclidean distance between L2-normalized pooled features of two views, per stage."""
    policy = policy or AugPolicy()
    N = len(images)
    if n_samples > N:
        raise ValueError(f"n_samples {n_samples} exceeds dataset size {N}")
    idx = np.sort(np.random.default_rng([seed, 0xD157]).choice(N, n_samples, replace=False))
    pairs = [make_view_pair(images[i], policy, sample_seed(seed, 0, i)) for i in idx]
    va = np.stack([p[0] for p in pairs])
    vb = np.stack([p[1] for p in pairs])
    fa = pooled_stage_features(store, va, stages, batch_size)
    fb = pooled_stage_features(store, vb, stages, batch_size)
    out = {}
    for s in stages:
        a = fa[s] / np.maximum(np.linalg.norm(fa[s], axis=1, keepdims=True), 1e-12)
        b = fb[s] / np.maximum(np.linalg.norm(fb[s], axis=1, keepdims=True), 1e-12)
        d = np.linalg.norm(a - b, axis=1)
        out[s] = DistanceStats(s, d, idx, {q: float(np.quantile(d, q)) for q in QUANTILES})
    return out


def view_distance_stats(ckpt, ds, stage: int, n_samples: int, seed: int,
                        policy: AugPolicy | None = None) -> DistanceStats:
    online, _, arch = stores_from_checkpoint(_ckpt(ckpt))
    _check_stage(stage, arch)
    return view_distances(online, _images(ds), [stage], n_samples, seed, policy)[stage]


# ---------------------------------------------------------------- gradient attribution


@dataclass
class Attribution:
    level: int
    signed: np.ndarray  # [N, C, H, W] gradient at the probed stage
    heat: np.ndarray  # [N, H, W] channel-axis absolute sum
    image: np.ndarray  # [N, H, W] uint8, per-sample scaled to [0, 255]


def _heat_to_uint8(heat: np.ndarray) -> np.ndarray:
    peak = heat.reshape(len(heat), -1).max(axis=1)
    scale = np.where(peak > 0, 255.0 / np.where(peak > 0, peak, 1.0), 0.0)
    return np.clip(np.round(heat * scale[:, None, None]), 0, 255).astype(np.uint8)


def signed_stage_gradient(online: ParamStore, target: ParamStore, cfg: L.LadderConfig,
                          xa: np.ndarray, xb: np.ndarray, weights: dict[int, float],
                          probe_stage: int = 1) -> np.ndarray:
    """d(sum_i weights[i] * L_i)/d z_probe for the (online a, target b) ordering.

    Online norms use batch statistics without touching the running buffers,
    the target uses its running statistics, matching a training step.
    """
    arch = online.arch
    omode = Mode(True, update_stats=False, momentum=arch.bn_momentum, eps=arch.bn_eps)
    tmode = Mode(False, update_stats=False, momentum=arch.bn_momentum, eps=arch.bn_eps)
    for lvl in weights:
        if lvl <= probe_stage and lvl != probe_stage:
            raise ValueError(f"level {lvl} lies below the probed stage {probe_stage}")
        if cfg.heads[lvl - 1] == L.NONE:
            raise ValueError(f"level {lvl} carries no loss")
    dtype = online["stem.conv.weight"].dtype
    with T.no_grad():
        tgt = encode(target, np.asarray(xb, dtype), tmode)
    x = Tensor(np.asarray(xa, dtype), requires_grad=True)
    outs = encode(online, x, omode)
    z = outs[probe_stage - 1].retain_grad()
    total = None
    for lvl, w in sorted(weights.items()):
        li = L.level_loss(cfg.heads[lvl - 1], outs[lvl - 1], tgt[lvl - 1], online, target,
                          lvl, omode, tmode)
        term = T.scale(li, w)
        total = term if total is None else T.add(total, term)
    T.backward(total)
    return z.grad if z.grad is not None else np.zeros_like(z.data)


def _frozen(store: ParamStore) -> ParamStore:
    return store.copy(trainable=False)


def gradient_attribution(ckpt, xa: np.ndarray, xb: np.ndarray, level: int,
                         probe_stage: int = 1, weight: float = 1.0) -> Attribution:
    """Per-sample map of |dL_level/dz_probe| summed over channels."""
    c = _ckpt(ckpt)
    online, target, _ = stores_from_checkpoint(c)
    cfg = ladder_for(c, online)
    if not probe_stage < level:
        raise ValueError("probe stage must lie below the attributed level")
    g = signed_stage_gradient(_frozen(online), target, cfg, xa, xb, {level: weight}, probe_stage)
    heat = np.abs(g).sum(axis=1)
    return Attribution(level, g, heat, _heat_to_uint8(heat))


def ladder_for(ckpt: Checkpoint, online: ParamStore) -> L.LadderConfig:
    S = online.arch.num_stages
    w = online[f"head{S}.proj.fc1.weight"].shape[1]
    out = online[f"head{S}.proj.fc2.weight"].shape[1]
    return ladder_from_meta(ckpt.meta, hidden=w, out=out)


def write_pgm(path, img: np.ndarray) -> None:
    """Binary 8-bit greyscale PGM (P5)."""
    img = np.asarray(img, np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = parts[4] if len(parts) > 4 else b""
    return np.frombuffer(data[: w * h], np.uint8).reshape(h, w)


# ---------------------------------------------------------------- collapse


@dataclass
class CollapseReport:
    per_dim_std: np.ndarray
    mean_std: float
    threshold: float
    collapsed: bool


def collapse_metric(embeddings: np.ndarray, min_samples: int = 64, ratio: float = 0.2) -> CollapseReport:
    """Mean per-dimension std of L2-normalized rows; flags collapse below ratio/sqrt(D)."""
    E = np.asarray(embeddings, np.float64)
    if E.ndim != 2 or len(E) < min_samples:
        raise InsufficientSamplesError(f"need at least {min_samples} embeddings, got {len(E)}")
    std = (E - E[0]).std(axis=0)  # shifting by a row makes constant columns exactly 0
    thr = ratio / math.sqrt(E.shape[1])
    m = float(std.mean())
    return CollapseReport(std, m, thr, m < thr)


def top_embeddings(ckpt, ds, batch_size: int = 256) -> np.ndarray:
    """L2-normalized top-level projector outputs of the online network (eval mode)."""
    c = _ckpt(ckpt)
    online, _, arch = stores_from_checkpoint(c)
    S = arch.num_stages
    images = _images(ds)
    dtype = online["stem.conv.weight"].dtype
    mode = Mode(False, update_stats=False, momentum=arch.bn_momentum, eps=arch.bn_eps)
    rows = []
    with T.no_grad():
        for k in range(0, len(images), batch_size):
            outs = encode(online, np.asarray(images[k:k + batch_size], dtype), mode)
            rows.append(L.project_global(online, S, outs[-1], mode).data)
    E = np.concatenate(rows).astype(np.float64)
    return E / np.maximum(np.linalg.norm(E, axis=1, keepdims=True), 1e-12)


# ---------------------------------------------------------------- collapse nesting probe


@dataclass
class Theorem1Report:
    stage: int
    seed: int
    constant: list[bool]  # per stage 1..S, under every mode tried
    passed: bool

    def describe(self) -> str:
        flags = " ".join(f"z{i + 1}={'const' if c else 'var'}" for i, c in enumerate(self.constant))
        return f"collapse at stage {self.stage} (seed {self.seed}): {flags} -> {'PASS' if self.passed else 'FAIL'}"


def is_constant(z: np.ndarray, rtol: float = 1e-12) -> bool:
    """True when every channel takes one value across batch and space."""
    flat = z.reshape(z.shape[0], z.shape[1], -1).transpose(1, 0, 2).reshape(z.shape[1], -1)
    spread = flat.max(axis=1) - flat.min(axis=1)
    scale = max(float(np.abs(flat).max()), 1.0)
    return bool((spread <= rtol * scale).all())


def theorem1_probe(arch: ArchConfig, seed: int, stage: int, batch: int = 4) -> Theorem1Report:
    """Force z_stage to a constant and check every later stage is constant too.

    Checked in train mode (batch statistics, buffers untouched) and eval mode.
    Passing also requires the stage just below the collapse to remain non-constant.
    """
    _check_stage(stage, arch)
    params = collapse_stage(init_params(arch, seed, np.float64), stage)
    x = np.random.default_rng([seed, stage, 0x7E01]).uniform(
        0, 1, (batch, arch.in_channels, arch.input_size, arch.input_size))
    const = [True] * arch.num_stages
    for mode in (Mode(True, update_stats=False, momentum=arch.bn_momentum, eps=arch.bn_eps),
                 Mode(False, update_stats=False, momentum=arch.bn_momentum, eps=arch.bn_eps)):
        with T.no_grad():
            outs = encode(params, x, mode)
        for i, z in enumerate(outs):
            const[i] = const[i] and is_constant(z.data)
    later_ok = all(const[stage - 1:])
    below_ok = stage == 1 or not const[stage - 2]
    return Theorem1Report(stage, seed, const, later_ok and below_ok)
