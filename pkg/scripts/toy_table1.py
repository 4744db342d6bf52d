"""Toy-scale replication of the SD/CSS/NSS comparison and the channel degradation analysis.

Trains the requested strategies on the bundled synthetic corpus, evaluates them
on held-out utterances and writes table.txt, report.{json,csv} and degradation.png.

    python3 scripts/toy_table1.py --out runs/toy --strategies saddel baseline_ss --steps 1500
    python3 scripts/toy_table1.py --out runs/cmp --strategies saddel a2pit cascade
"""

import argparse
import json
import logging
import time
from pathlib import Path

import torch

from saddel.evaluate import REPORT_FORMATS, report_render
from saddel.experiments import ToySetup, degradation_toy, evaluate_toy, prepare_toy_data, residual_stop_accuracy, train_toy
from saddel.train import STRATEGY_TASKS


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="runs/toy")
    p.add_argument("--strategies", nargs="+", default=["saddel", "baseline_ss", "baseline_sd"],
                   choices=sorted(STRATEGY_TASKS))
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--seed", type=int, default=17)
    p.add_argument("--data-seed", type=int, default=1)
    args = p.parse_args()
    torch.set_num_threads(1)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    t0 = time.time()
    data = prepare_toy_data(out / "data", ToySetup(seed=args.data_seed))
    logging.info("data ready in %.0fs", time.time() - t0)

    reports, summary = [], {}
    for strategy in args.strategies:
        t0 = time.time()
        result = train_toy(data, strategy, out / strategy, steps=args.steps, seed=args.seed)
        train_s = time.time() - t0
        report = evaluate_toy(result.model, data, strategy, trained_tasks=STRATEGY_TASKS[strategy])
        entry = {"train_seconds": train_s, "tasks": report.task_stats()}
        if strategy in ("saddel", "baseline_ss"):
            report.degradation = degradation_toy(result.model, data, 2)
            entry["degradation_2sp"] = report.degradation.means
            entry["degradation_3sp"] = degradation_toy(result.model, data, 3).means
            acc, counts = residual_stop_accuracy(result.model, data, "3sp")
            entry["residual_stop_3sp"] = {"accuracy": acc, "counts": counts}
        reports.append(report)
        summary[strategy] = entry
        logging.info("%s: %s", strategy, json.dumps(entry, default=float)[:400])

    for fmt in REPORT_FORMATS:
        report_render(reports, fmt, out)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=float))
    print((out / "table.txt").read_text())


if __name__ == "__main__":
    main()
