"""Noise-robustness sweep: SI-SNRi of a checkpoint at fixed noise SNRs, per noise file or pooled.

    python3 scripts/noise_sweep.py --ckpt runs/toy/saddel/model.pt --pools runs/toy/data/pools \
        --tag 2sp+n --snrs -5 0 5 10 15 20 --out runs/sweep
"""

import argparse
import json
from pathlib import Path

import torch

from saddel.evaluate import load_system
from saddel.experiments import noise_sweep, split_pool
from saddel.synth import scan_pool


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pools", required=True, help="directory with speech/ and noise/ subdirectories")
    p.add_argument("--tag", default="2sp+n")
    p.add_argument("--snrs", nargs="+", type=float, default=[-5, 0, 5, 10, 15, 20])
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--per-noise", action="store_true", help="one sweep per noise file instead of the pooled set")
    p.add_argument("--holdout", type=int, default=5, help="use only the last N utterances per speaker")
    p.add_argument("--out", default="runs/sweep")
    args = p.parse_args()
    torch.set_num_threads(1)

    system, _ = load_system(args.ckpt)
    pools = Path(args.pools)
    speech = scan_pool(pools / "speech")
    if args.holdout:
        speech = split_pool(speech, args.holdout)[1]
    noise = scan_pool(pools / "noise")
    groups = {Path(n.path).stem: [n] for n in noise} if args.per_noise else {"all": noise}
    out = Path(args.out)
    results = {}
    for name, pool in groups.items():
        results[name] = noise_sweep(system, speech, pool, out / name, args.tag, args.snrs, args.count)
        print(name, " ".join(f"{snr:+.0f}dB:{v:.2f}" for snr, v in results[name].items()))
    (out / "sweep.json").write_text(json.dumps(results, indent=2))


if __name__ == "__main__":
    main()
