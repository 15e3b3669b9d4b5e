"""Command-line entry point: ``lsn pretrain | probe | analyze``."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis as A
from .augment import view_batch
from .config import ConfigError, RunConfig
from .dataio import CorruptCheckpointError, NotACheckpointError, UnsupportedVersionError, load_checkpoint
from .train import TrainingDiverged, arch_from_meta, pretrain_run

log = logging.getLogger("ladder_siam")

ANALYSES = ("dist", "grad", "collapse", "theorem1")
SNAPSHOT = "resolved.cfg"


class UsageError(Exception):
    pass


def workers_from_env() -> int:
    try:
        return max(1, int(os.environ.get("LSN_THREADS", "1")))
    except ValueError:
        return 1


def _overrides(args) -> list[str]:
    sets = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        sets.append(f"run.seed={args.seed}")
    if getattr(args, "out", None):
        sets.append(f"run.out_dir={args.out}")
    return sets


def _config_near_ckpt(args) -> RunConfig:
    path = args.config
    if path is None and args.ckpt:
        cand = Path(args.ckpt).parent / SNAPSHOT
        path = cand if cand.exists() else None
    sets = list(args.set or [])
    return RunConfig.load(path, sets)


def _load_ckpt(path):
    if not path or not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except (NotACheckpointError, CorruptCheckpointError, UnsupportedVersionError) as e:
        raise UsageError(f"{path}: {e}") from e


# ---------------------------------------------------------------- commands


def cmd_pretrain(args) -> int:
    cfg = RunConfig.load(args.config, _overrides(args))
    out = Path(cfg["run.out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / SNAPSHOT).write_text(cfg.snapshot())
    tcfg = cfg.train(workers=workers_from_env())
    ds = cfg.dataset("train")
    objective = "byol" if args.plain_byol else "ladder"
    try:
        ckpt, metrics = pretrain_run(tcfg, ds, out, objective=objective)
    except TrainingDiverged as e:
        print(f"training failed: {e}", file=sys.stderr)
        return 1
    print(f"wrote {out / 'final.ckpt'} and {metrics} ({ckpt.step} steps)")
    return 0


def _stage_list(spec: str, num_stages: int) -> list[int]:
    if spec == "all":
        return list(range(1, num_stages + 1))
    try:
        stages = [int(s) for s in spec.split(",")]
    except ValueError:
        raise UsageError(f"bad stage list {spec!r}") from None
    for s in stages:
        if not 1 <= s <= num_stages:
            raise UsageError(f"stage {s} out of range 1..{num_stages}")
    return stages


def probe_rows(ckpt, cfg: RunConfig, stages: list[int]) -> list[tuple[int, int, float]]:
    from .train import stores_from_checkpoint
    online, _, _ = stores_from_checkpoint(ckpt)
    train = cfg.dataset("train")
    feats = A.pooled_stage_features(online, train.images, stages)
    val_feats = None
    if cfg["probe.val_source"] == "test":
        test = cfg.dataset("test")
        val_feats = A.pooled_stage_features(online, test.images, stages)
    rows = []
    for s in stages:
        for seed in cfg["probe.seeds"]:
            kw = dict(seed=seed, epochs=cfg["probe.epochs"], lr=cfg["probe.lr"],
                      momentum=cfg["probe.momentum"], batch_size=cfg["probe.batch_size"],
                      stage=s, num_classes=train.num_classes)
            if val_feats is not None:
                res = A.linear_probe(feats[s], train.labels, val_features=val_feats[s],
                                     val_labels=test.labels, **kw)
            else:
                res = A.linear_probe(feats[s], train.labels, split=cfg["probe.val_fraction"], **kw)
            rows.append((s, seed, res.accuracy))
    return rows


def cmd_probe(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    cfg = _config_near_ckpt(args)
    arch = arch_from_meta(ckpt.meta)
    stages = _stage_list(args.stage, arch.num_stages)
    rows = probe_rows(ckpt, cfg, stages)
    out = Path(args.out or Path(args.ckpt).parent)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "probes.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["stage", "seed", "accuracy"])
        for s, seed, acc in rows:
            w.writerow([s, seed, repr(acc)])
            print(f"stage {s} seed {seed}: top-1 {acc:.4f}")
    return 0


def cmd_analyze(args) -> int:
    out = Path(args.out or (Path(args.ckpt).parent if args.ckpt else "."))
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "theorem1":
        return _theorem1(args, out)
    ckpt = _load_ckpt(args.ckpt)
    cfg = _config_near_ckpt(args)
    arch = arch_from_meta(ckpt.meta)
    ds = cfg.dataset("train")
    seed = args.seed if args.seed is not None else 0
    if args.kind == "dist":
        from .train import stores_from_checkpoint
        stages = _stage_list(args.stages, arch.num_stages)
        if args.n > len(ds):
            raise UsageError(f"--n {args.n} exceeds dataset size {len(ds)}")
        online, _, _ = stores_from_checkpoint(ckpt)
        stats = A.view_distances(online, ds.images, stages, args.n, seed, cfg.aug())
        with open(out / "distances.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["stage", "sample", "distance"])
            for s in stages:
                for i, d in zip(stats[s].sample_index, stats[s].distances):
                    w.writerow([s, int(i), repr(float(d))])
                print(f"stage {s}: median distance {stats[s].median:.4f}")
        return 0
    if args.kind == "grad":
        level = args.level or arch.num_stages
        if not 1 <= level <= arch.num_stages or level <= args.probe_stage:
            raise UsageError(f"level {level} must lie above probe stage {args.probe_stage}")
        n = args.samples
        if n < 2:
            raise UsageError("--samples must be >= 2 (batch statistics)")
        idx = np.arange(min(n, len(ds)))
        xa, xb = view_batch(ds.images, idx, cfg.aug(), seed, 0)
        try:
            att = A.gradient_attribution(ckpt, xa, xb, level, args.probe_stage)
        except ValueError as e:
            raise UsageError(str(e)) from e
        for k in range(len(idx)):
            A.write_pgm(out / f"grad_L{level}_s{k}.pgm", att.image[k])
        print(f"wrote {len(idx)} maps of shape {att.image.shape[1:]} to {out}")
        return 0
    if args.kind == "collapse":
        n = min(args.n, len(ds))
        emb = A.top_embeddings(ckpt, ds.images[:n])
        rep = A.collapse_metric(emb)
        with open(out / "collapse.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["n", "dim", "mean_std", "threshold", "collapsed"])
            w.writerow([n, emb.shape[1], repr(rep.mean_std), repr(rep.threshold), int(rep.collapsed)])
        print(f"mean per-dim std {rep.mean_std:.4f} (threshold {rep.threshold:.4f}): "
              f"{'COLLAPSED' if rep.collapsed else 'ok'}")
        return 0
    raise UsageError(f"unknown analysis {args.kind!r}; valid kinds: {', '.join(ANALYSES)}")


def _theorem1(args, out: Path) -> int:
    if args.ckpt:
        arch = arch_from_meta(_load_ckpt(args.ckpt).meta)
    else:
        arch = RunConfig.load(args.config, list(args.set or [])).arch()
    base = args.seed if args.seed is not None else 0
    ok = True
    with open(out / "theorem1.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["stage", "seed"] + [f"z{i}_constant" for i in range(1, arch.num_stages + 1)] + ["pass"])
        for stage in range(1, arch.num_stages + 1):
            for seed in range(base, base + args.seeds):
                rep = A.theorem1_probe(arch, seed, stage)
                ok &= rep.passed
                w.writerow([stage, seed] + [int(c) for c in rep.constant] + [int(rep.passed)])
            print(rep.describe())
    print("collapse nesting holds for every stage" if ok else "collapse nesting VIOLATED")
    return 0 if ok else 1


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lsn", description="Multi-level Siamese SSL at desk scale")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, need_ckpt: bool):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override (repeatable)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        if need_ckpt:
            sp.add_argument("--ckpt", help="checkpoint path")

    sp = sub.add_parser("pretrain", help="self-supervised pretraining")
    common(sp, False)
    sp.add_argument("--plain-byol", action="store_true",
                    help="use the single-level BYOL code path instead of the ladder objective")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("probe", help="per-stage linear probing")
    common(sp, True)
    sp.add_argument("--stage", default="all", help="'all' or a stage number")
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("analyze", help="diagnostics: " + ", ".join(ANALYSES))
    sp.add_argument("kind", choices=ANALYSES)
    common(sp, True)
    sp.add_argument("--stages", default="all")
    sp.add_argument("--n", type=int, default=500)
    sp.add_argument("--level", type=int)
    sp.add_argument("--probe-stage", type=int, default=1)
    sp.add_argument("--samples", type=int, default=8)
    sp.add_argument("--seeds", type=int, default=10)
    sp.set_defaults(func=cmd_analyze)
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("LSN_LOG", "WARNING"),
                        format="%(asctime)s %(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error ({e.key}): {e}", file=sys.stderr)
        return 2
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
