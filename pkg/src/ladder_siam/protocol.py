"""Desk-scale comparison of a ladder objective against the plain BYOL baseline.

Pretrains both methods over several seeds, then reads out linear-probe
accuracy per stage, median two-view distance per stage and the collapse
metric of the final checkpoints. The same code drives the CIFAR-10 acceptance
checks and the synthetic demo script.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import analysis as A
from . import losses as L
from .augment import AugPolicy
from .dataio import Dataset
from .nn import ArchConfig
from .train import TrainConfig, pretrain_run, stores_from_checkpoint

log = logging.getLogger(__name__)

METHODS = ("byol", "ladder_byol")


@dataclass
class DeskProtocol:
    arch: ArchConfig = field(default_factory=ArchConfig)
    epochs: int = 40
    batch_size: int = 256
    lr: float = 0.5
    seeds: tuple[int, ...] = (0, 1, 2)
    ladder_w: float = 0.5
    hidden_dim: int = 256
    out_dim: int = 64
    probe_stages: tuple[int, ...] = (1, 2, 3, 4)
    probe_epochs: int = 30
    dist_stages: tuple[int, ...] = (1, 2, 3, 4)
    dist_samples: int = 500
    collapse_samples: int = 2000
    workers: int = 1

    def train_config(self, method: str, seed: int) -> TrainConfig:
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}")
        lad = L.LadderConfig.preset(method, self.arch.num_stages, self.ladder_w,
                                    hidden_dim=self.hidden_dim, out_dim=self.out_dim)
        return TrainConfig(arch=self.arch, ladder=lad, aug=AugPolicy(out_size=self.arch.input_size),
                           epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, seed=seed,
                           workers=self.workers)


@dataclass
class RunResult:
    method: str
    seed: int
    steps: int
    probe: dict[int, float]  # stage -> top-1
    median_distance: dict[int, float]  # stage -> median view distance
    collapse_mean_std: float
    collapse_threshold: float
    collapsed: bool


@dataclass
class ProtocolResult:
    runs: list[RunResult]

    def of(self, method: str) -> list[RunResult]:
        return [r for r in self.runs if r.method == method]

    def mean_probe(self, method: str, stage: int) -> float:
        return float(np.mean([r.probe[stage] for r in self.of(method)]))

    def median_distance(self, method: str, stage: int) -> float:
        """Median over seeds of each run's median view distance."""
        return float(np.median([r.median_distance[stage] for r in self.of(method)]))

    # the three directional checks; each returns (passed, one-line detail)

    def probe_gap(self, mid_stage: int = 2, top_stage: int = 4, mid_margin: float = 0.01,
                  top_slack: float = 0.005) -> tuple[bool, str]:
        b2, l2 = self.mean_probe("byol", mid_stage), self.mean_probe("ladder_byol", mid_stage)
        b4, l4 = self.mean_probe("byol", top_stage), self.mean_probe("ladder_byol", top_stage)
        # accuracies are count ratios; the tolerance only absorbs float noise at the bounds
        ok = l2 - b2 >= mid_margin - 1e-12 and l4 >= b4 - top_slack - 1e-12
        return ok, (f"stage{mid_stage} ladder {l2:.4f} vs byol {b2:.4f} (gap {100 * (l2 - b2):+.2f} pt); "
                    f"stage{top_stage} ladder {l4:.4f} vs byol {b4:.4f} ({100 * (l4 - b4):+.2f} pt)")

    def distance_order(self, stages=(1, 2)) -> tuple[bool, str]:
        parts, ok = [], True
        for s in stages:
            b, lad = self.median_distance("byol", s), self.median_distance("ladder_byol", s)
            ok = ok and lad < b
            parts.append(f"stage{s} ladder {lad:.4f} vs byol {b:.4f}")
        return ok, "; ".join(parts)

    def no_collapse(self) -> tuple[bool, str]:
        bad = [f"{r.method}/seed{r.seed}" for r in self.runs if r.collapsed]
        worst = min(self.runs, key=lambda r: r.collapse_mean_std)
        return not bad, (f"min mean std {worst.collapse_mean_std:.4f} vs threshold "
                         f"{worst.collapse_threshold:.4f}" + (f"; collapsed: {bad}" if bad else ""))


def evaluate_checkpoint(ckpt, proto: DeskProtocol, train: Dataset, val: Dataset) -> dict:
    online, _, _ = stores_from_checkpoint(ckpt)
    ftr = A.pooled_stage_features(online, train.images, proto.probe_stages)
    fva = A.pooled_stage_features(online, val.images, proto.probe_stages)
    probe = {}
    for s in proto.probe_stages:
        res = A.linear_probe(ftr[s], train.labels, seed=0, epochs=proto.probe_epochs, stage=s,
                             num_classes=train.num_classes, val_features=fva[s], val_labels=val.labels)
        probe[s] = res.accuracy
    n = min(proto.dist_samples, len(val))
    dist = A.view_distances(online, val.images, proto.dist_stages, n, seed=0,
                            policy=AugPolicy(out_size=proto.arch.input_size))
    emb = A.top_embeddings(ckpt, val.images[:proto.collapse_samples])
    rep = A.collapse_metric(emb)
    return dict(probe=probe, median_distance={s: d.median for s, d in dist.items()},
                collapse_mean_std=rep.mean_std, collapse_threshold=rep.threshold,
                collapsed=rep.collapsed)


def run_protocol(proto: DeskProtocol, train: Dataset, val: Dataset,
                 out_root: str | os.PathLike) -> ProtocolResult:
    """Pretrain every (method, seed) pair, evaluate, and write summary.json."""
    root = Path(out_root)
    runs = []
    for method in METHODS:
        for seed in proto.seeds:
            cfg = proto.train_config(method, seed)
            log.info("pretraining %s seed %d", method, seed)
            ckpt, _ = pretrain_run(cfg, train, root / f"{method}_seed{seed}")
            ev = evaluate_checkpoint(ckpt, proto, train, val)
            runs.append(RunResult(method, seed, int(ckpt.meta.get("step", 0)), **ev))
            log.info("%s seed %d: %s", method, seed, ev["probe"])
    result = ProtocolResult(runs)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "summary.json", "w") as f:
        json.dump([asdict(r) for r in runs], f, indent=1, default=float)
    return result
