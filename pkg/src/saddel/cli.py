"""Command line entry point: ``saddel {synth,train,separate,eval}``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import torch

from . import evaluate as ev
from .audio import Waveform, read_wav, resample, write_wav
from .data import find_manifests, load_corpus
from .model import SeparatorConfig
from .recursive import StopRule, separate_recursive
from .synth import (
    NOISE_SNR_RANGE,
    SAMPLE_RATE,
    TASK_TAGS,
    generate_corpus,
    generate_paired_corpus,
    make_toy_corpus,
    parse_config_counts,
    render_manifest,
    scan_pool,
)
from .train import STRATEGY_TASKS, TrainConfig, TRAINERS, ValidationSet, build_model, train_cascade

log = logging.getLogger("saddel")


def _range(text: str) -> tuple[float, float]:
    lo, hi = (float(v) for v in text.split(","))
    return lo, hi


def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.replay:
        path = render_manifest(args.replay, out)
        print(path)
        return 0
    if args.toy:
        speech, noise = make_toy_corpus(out / "pools", args.toy_speakers, args.toy_utterances, args.seed)
    else:
        if not args.speech_dir:
            raise SystemExit("synth needs --speech-dir (or --toy)")
        speech = scan_pool(args.speech_dir)
        noise = scan_pool(args.noise_dir) if args.noise_dir else []
    ranges = {"speech_snr_range": args.speech_snr}
    if args.noise_snr is not None:
        ranges["noise_snr_range"] = args.noise_snr
    if args.paired:
        clean, noisy = generate_paired_corpus(
            speech, noise, args.paired, args.paired_count, out / "paired", args.seed,
            args.noise_snr or NOISE_SNR_RANGE,
        )
        print(clean)
        print(noisy)
    if args.config:
        manifest = generate_corpus(speech, noise, parse_config_counts(args.config, **ranges), out, args.seed,
                                   workers=args.workers)
        print(manifest)
    return 0


def cmd_train(args) -> int:
    torch.set_num_threads(args.threads)
    tasks = tuple(t.strip() for t in args.tasks.split(",")) if args.tasks else None
    cfg = TrainConfig(
        strategy=args.strategy, tasks=tasks, batch_size=args.batch_size, segment_seconds=args.segment,
        steps=args.steps, lr=args.lr, l2=args.l2, seed=args.seed, validate_every=args.validate_every,
        checkpoint_every=args.checkpoint_every, grad_clip=args.grad_clip or None,
    )
    corpora = load_corpus(find_manifests(args.manifest_dir), cfg.tasks)
    validation = ValidationSet(load_corpus(args.val_manifest, cfg.tasks)) if args.val_manifest else None
    heads = args.heads or (3 if cfg.strategy == "a2pit" else 2)
    sep_cfg = SeparatorConfig(
        encoder_basis_count=args.basis, encoder_window=args.window, encoder_stride=args.window // 2,
        block_channels=args.channels, hidden_channels=2 * args.channels, blocks_per_repeat=args.blocks,
        repeats=args.repeats, num_output_heads=heads,
    )
    if cfg.strategy == "cascade":
        sd = build_model(sep_cfg, args.seed)
        ss = build_model(sep_cfg, args.seed + 1)
        train_cascade(sd, ss, corpora, cfg, validation, args.out)
    else:
        model = build_model(sep_cfg, args.seed)
        TRAINERS[cfg.strategy](model, corpora, cfg, validation, out_dir=args.out)
    print(Path(args.out))
    return 0


def _json_safe(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_json_safe(v) for v in x]
    return x


def cmd_separate(args) -> int:
    system, _ = ev.load_system(args.ckpt)
    w = read_wav(args.input)
    rate = w.sample_rate
    w = resample(w, SAMPLE_RATE)
    stop = StopRule.parse(args.stop, args.max_iter)
    result = separate_recursive(system.model, w, stop)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    peak = max(float(np.max(np.abs(s.samples))) for s in result.extracted_sources + [result.final_residual])
    # keep relative levels but avoid clipping on write
    gain = min(1.0, 0.99 / peak) if peak > 0 else 1.0
    for j, s in enumerate(result.extracted_sources, start=1):
        write_wav(out / f"source_{j}.wav", Waveform(gain * s.samples, SAMPLE_RATE))
    write_wav(out / "residual.wav", Waveform(gain * result.final_residual.samples, SAMPLE_RATE))
    report = {**result.report(), "input": str(args.input), "input_sample_rate": rate, "sample_rate": SAMPLE_RATE}
    (out / "report.json").write_text(json.dumps(_json_safe(report), indent=2))
    print(json.dumps(_json_safe(result.report())))
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out)
    reports = []
    if args.degradation:
        if not (args.clean and args.noisy and args.ckpt):
            raise SystemExit("--degradation needs --ckpt, --clean and --noisy")
        system, meta = ev.load_system(args.ckpt[0])
        stats = ev.degradation_analysis(system.model, args.clean, args.noisy)
        reports.append(ev.EvalReport(system.name, [], meta, stats))
        print("mean degradation: channel1 %.4f channel2 %.4f" % stats.means)
    else:
        if not (args.ckpt and args.manifest):
            raise SystemExit("eval needs --ckpt and --manifest")
        stop = "known" if args.stop == "known" else StopRule.parse(args.stop, args.max_iter)
        configs = args.configs.split(",") if args.configs else None
        for ckpt in args.ckpt:
            system, meta = ev.load_system(ckpt, stop, args.a2pit_threshold)
            meta = {"checkpoint": Path(ckpt).name, "trained_tasks": meta.get("trained_tasks", []),
                    "strategy": meta.get("strategy")}
            reports.append(ev.evaluate(system, args.manifest, configs, known_count=stop == "known", metadata=meta))
    for fmt in ev.REPORT_FORMATS:
        ev.report_render(reports, fmt, out)
    print(ev.render_table(reports), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="saddel", description="Joint speech separation and denoising toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="synthesize mixture corpora")
    s.add_argument("--speech-dir")
    s.add_argument("--noise-dir")
    s.add_argument("--config", help="comma list of TAG:COUNT, e.g. 2sp+n:1000,1sp+n:500")
    s.add_argument("--seed", type=int, default=17)
    s.add_argument("--out", required=True)
    s.add_argument("--toy", action="store_true", help="generate and use the synthetic toy pools")
    s.add_argument("--toy-speakers", type=int, default=8)
    s.add_argument("--toy-utterances", type=int, default=20)
    s.add_argument("--speech-snr", type=_range, default=(-2.5, 2.5), metavar="LO,HI")
    s.add_argument("--noise-snr", type=_range, default=None, metavar="LO,HI")
    s.add_argument("--paired", type=int, default=0, metavar="N",
                   help="also write clean/noisy paired N-speaker sets for degradation analysis")
    s.add_argument("--paired-count", type=int, default=50)
    s.add_argument("--replay", help="regenerate the WAVs of an existing manifest into --out")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a separator")
    t.add_argument("--strategy", choices=sorted(STRATEGY_TASKS), default="saddel")
    t.add_argument("--tasks", help=f"comma list from {','.join(TASK_TAGS)}; default per strategy")
    t.add_argument("--manifest-dir", required=True)
    t.add_argument("--val-manifest")
    t.add_argument("--steps", type=int, default=20000)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--l2", type=float, default=0.0)
    t.add_argument("--batch-size", type=int, default=4)
    t.add_argument("--segment", type=float, default=4.0, help="training crop in seconds")
    t.add_argument("--grad-clip", type=float, default=5.0, help="0 disables clipping")
    t.add_argument("--seed", type=int, default=17)
    t.add_argument("--validate-every", type=int, default=500)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--basis", type=int, default=128)
    t.add_argument("--window", type=int, default=16)
    t.add_argument("--channels", type=int, default=64)
    t.add_argument("--blocks", type=int, default=4)
    t.add_argument("--repeats", type=int, default=2)
    t.add_argument("--heads", type=int, default=0, help="output heads (a2pit default 3)")
    t.add_argument("--threads", type=int, default=1)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("separate", help="recursively separate one WAV file")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--stop", default="residual:-25", help="known:K | residual:DB | max")
    r.add_argument("--max-iter", type=int, default=5)
    r.add_argument("--out-dir", required=True)
    r.set_defaults(func=cmd_separate)

    e = sub.add_parser("eval", help="evaluate checkpoints or run the degradation analysis")
    e.add_argument("--ckpt", nargs="+")
    e.add_argument("--manifest", nargs="+")
    e.add_argument("--configs", help="restrict to these task tags")
    e.add_argument("--stop", default="known")
    e.add_argument("--max-iter", type=int, default=5)
    e.add_argument("--a2pit-threshold", type=float, default=ev.DEFAULT_A2PIT_THRESHOLD)
    e.add_argument("--degradation", action="store_true")
    e.add_argument("--clean")
    e.add_argument("--noisy")
    e.add_argument("--out", default="eval_out")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
