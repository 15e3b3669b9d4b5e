"""Linear-probe accuracy per stage as the intermediate weight w varies.

    python scripts/weight_sweep.py --data /path/to/cifar-10-batches-bin --w 0,0.25,0.5,1

Without --data the sweep runs on the synthetic dataset with a small network.
Writes sweep.csv (w, seed, stage, accuracy) under --out.
"""
import argparse
import csv
import logging
import sys
from pathlib import Path

from ladder_siam import losses as L
from ladder_siam.augment import AugPolicy
from ladder_siam.dataio import load_cifar10, synth_dataset
from ladder_siam.nn import ArchConfig
from ladder_siam.protocol import DeskProtocol, evaluate_checkpoint
from ladder_siam.train import TrainConfig, pretrain_run


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data")
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--w", default="0,0.25,0.5,1")
    ap.add_argument("--n", type=int, default=10_000)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    if args.data:
        proto = DeskProtocol(epochs=args.epochs, workers=args.workers)
        train, val = load_cifar10(args.data, "train", limit=args.n), load_cifar10(args.data, "test")
    else:
        arch = ArchConfig(input_size=16, stem_channels=8, channels=(8, 16, 16, 32), blocks_per_stage=1)
        proto = DeskProtocol(arch=arch, epochs=args.epochs, batch_size=64, lr=0.2, hidden_dim=64,
                             out_dim=32, probe_epochs=20, dist_samples=256, collapse_samples=512)
        train, val = synth_dataset(min(args.n, 1024), 8, 0, size=16), synth_dataset(512, 8, 1, size=16)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["w", "seed", "stage", "accuracy"])
        for w in (float(x) for x in args.w.split(",")):
            for seed in (int(s) for s in args.seeds.split(",")):
                lad = L.LadderConfig.preset("ladder_byol", 4, w, hidden_dim=proto.hidden_dim,
                                            out_dim=proto.out_dim)
                cfg = TrainConfig(arch=proto.arch, ladder=lad, aug=AugPolicy(out_size=proto.arch.input_size),
                                  epochs=proto.epochs, batch_size=proto.batch_size, lr=proto.lr,
                                  seed=seed, workers=proto.workers)
                ckpt, _ = pretrain_run(cfg, train, out / f"w{w:g}_seed{seed}")
                ev = evaluate_checkpoint(ckpt, proto, train, val)
                for s, acc in ev["probe"].items():
                    wr.writerow([w, seed, s, acc])
                    print(f"w={w:g} seed={seed} stage{s}: {acc:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
