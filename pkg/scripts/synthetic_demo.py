"""Minutes-scale version of the directionality protocol on procedural shapes.

    python scripts/synthetic_demo.py --out runs/demo

Uses a narrow 16x16 network and the synthetic dataset, so the numbers only
show that the pipeline runs end to end; they say nothing about CIFAR-10.
"""
import argparse
import logging
import sys

from ladder_siam.dataio import synth_dataset
from ladder_siam.nn import ArchConfig
from ladder_siam.protocol import METHODS, DeskProtocol, run_protocol


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/demo")
    ap.add_argument("--n", type=int, default=1024)
    ap.add_argument("--epochs", type=int, default=4)
    ap.add_argument("--seeds", default="0")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    arch = ArchConfig(input_size=16, stem_channels=8, channels=(8, 16, 16, 32), blocks_per_stage=1)
    train = synth_dataset(args.n, 8, 0, size=16)
    val = synth_dataset(512, 8, 1, size=16)
    proto = DeskProtocol(arch=arch, epochs=args.epochs, batch_size=64, lr=0.2, hidden_dim=64, out_dim=32,
                         seeds=tuple(int(s) for s in args.seeds.split(",")), probe_epochs=20,
                         dist_samples=256, collapse_samples=512)
    res = run_protocol(proto, train, val, args.out)
    print("method       " + "  ".join(f"probe{s}" for s in proto.probe_stages) + "  dist1   dist2")
    for m in METHODS:
        probes = "  ".join(f"{res.mean_probe(m, s):.3f} " for s in proto.probe_stages)
        print(f"{m:12s} {probes}  {res.median_distance(m, 1):.3f}   {res.median_distance(m, 2):.3f}")
    print("collapse:", res.no_collapse()[1])
    return 0


if __name__ == "__main__":
    sys.exit(main())
