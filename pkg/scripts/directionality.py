"""Ladder BYOL vs plain BYOL on a CIFAR-10 subset: probe gap, view distances, collapse.

    python scripts/directionality.py --data /path/to/cifar-10-batches-bin --out runs/desk

Defaults follow the acceptance protocol (10,000 training images, default
architecture, 40 epochs, batch 256, seeds 0-2). Expect several CPU hours per run.
"""
import argparse
import logging
import os
import sys

from ladder_siam.dataio import load_cifar10
from ladder_siam.protocol import DeskProtocol, run_protocol


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", default=os.environ.get("LSN_CIFAR10_DIR"), required="LSN_CIFAR10_DIR" not in os.environ)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--n", type=int, default=10_000)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--batch-size", type=int, default=256)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    train = load_cifar10(args.data, "train", limit=args.n)
    val = load_cifar10(args.data, "test")
    proto = DeskProtocol(epochs=args.epochs, batch_size=args.batch_size,
                         seeds=tuple(int(s) for s in args.seeds.split(",")), workers=args.workers)
    res = run_protocol(proto, train, val, args.out)
    checks = [("probe gap", res.probe_gap()), ("view distance", res.distance_order((1, 2))),
              ("no collapse", res.no_collapse())]
    for name, (ok, detail) in checks:
        print(f"{name:14s} {'PASS' if ok else 'FAIL'}  {detail}")
    return 0 if all(ok for _, (ok, _) in checks) else 1


if __name__ == "__main__":
    sys.exit(main())
