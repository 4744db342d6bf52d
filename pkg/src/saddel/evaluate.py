"""Evaluation harness: SI-SNRi tables, channel degradation analysis, report rendering.

Extractions are paired with references by the best permutation before
scoring. Task means are averaged per source, then per utterance, then over
the test set.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch.nn as nn

from .audio import Waveform, si_snr
from .data import load_item
from .losses import autoencoding_channels
from .model import CascadeSeparator, infer, load_checkpoint
from .recursive import StopRule, as_separator_fn, separate_recursive
from .synth import SAMPLE_RATE, TASK_TAGS, read_manifest

MATCHING_NOTE = "extractions paired with references by best-permutation matching before scoring"
TASK_GROUPS = (("SD", ("1sp+n",)), ("CSS", ("2sp", "3sp")), ("NSS", ("2sp+n", "3sp+n")))
DEFAULT_A2PIT_THRESHOLD = 15.0


class System(Protocol):
    name: str

    def extract(self, mixture: np.ndarray, num_sources: int | None) -> list[np.ndarray]: ...


class RecursiveSystem:
    """Recursive extraction; ``stop="known"`` uses the reference count."""

    def __init__(self, model, stop: StopRule | str = "known", name: str = "saddel"):
        self.model = model
        self.stop = stop
        self.name = name

    def extract(self, mixture, num_sources):
        stop = self.stop
        if stop == "known":
            if num_sources is None:
                raise ValueError("known-count stopping needs the reference count")
            stop = StopRule.known_count(num_sources)
        result = separate_recursive(self.model, Waveform(mixture, SAMPLE_RATE), stop)
        return [w.samples for w in result.extracted_sources]


class A2PITSystem:
    """Fixed-output model; channels resembling the mixture are discarded."""

    def __init__(self, model: nn.Module, threshold: float = DEFAULT_A2PIT_THRESHOLD, known_count: bool = True,
                 name: str = "a2pit"):
        self.model = model
        self.threshold = threshold
        self.known_count = known_count
        self.name = name

    def extract(self, mixture, num_sources):
        out = list(infer(self.model, mixture))
        similarity = [si_snr(o, mixture) for o in out]
        order = sorted(range(len(out)), key=lambda j: (similarity[j], j))
        if self.known_count and num_sources is not None:
            keep = num_sources
        else:
            keep = max(1, len(out) - sum(autoencoding_channels(out, mixture, self.threshold)))
        return [out[j] for j in sorted(order[:keep])]


@dataclass
class UtteranceRecord:
    output_id: str
    config: str
    si_snr: list[float]
    si_snri: list[float]
    assignment: list[int]

    @property
    def mean_si_snri(self) -> float:
        return float(np.mean(self.si_snri))


@dataclass
class DegradationStats:
    """Per-item SI-SNR deltas (noisy run minus clean run) for each output channel."""

    channel1: list[float] = field(default_factory=list)
    channel2: list[float] = field(default_factory=list)
    item_ids: list[str] = field(default_factory=list)

    @property
    def means(self) -> tuple[float, float]:
        m1 = float(np.mean(self.channel1)) if self.channel1 else math.nan
        m2 = float(np.mean(self.channel2)) if self.channel2 else math.nan
        return m1, m2


@dataclass
class EvalReport:
    system: str
    records: list[UtteranceRecord] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    degradation: DegradationStats | None = None

    def task_stats(self) -> dict[str, dict]:
        out = {}
        for tag in sorted({r.config for r in self.records}, key=_tag_order):
            vals = [r.mean_si_snri for r in self.records if r.config == tag]
            out[tag] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "count": len(vals)}
        return out

    def to_dict(self) -> dict:
        d = {
            "system": self.system,
            "note": MATCHING_NOTE,
            "metadata": self.metadata,
            "tasks": self.task_stats(),
            "records": [asdict(r) for r in self.records],
            "degradation": None,
        }
        if self.degradation is not None:
            m1, m2 = self.degradation.means
            d["degradation"] = {**asdict(self.degradation), "mean_channel1": m1, "mean_channel2": m2}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        deg = d.get("degradation")
        if deg is not None:
            deg = DegradationStats(deg["channel1"], deg["channel2"], deg["item_ids"])
        return cls(d["system"], [UtteranceRecord(**r) for r in d["records"]], d.get("metadata", {}), deg)


def _tag_order(tag: str) -> int:
    return TASK_TAGS.index(tag) if tag in TASK_TAGS else len(TASK_TAGS)


def match_estimates(estimates: Sequence[np.ndarray], references: Sequence[np.ndarray],
                    mixture: np.ndarray) -> tuple[list[int], list[float]]:
    """Pick the estimate for each reference maximising mean SI-SNR.

    Returns ``(assignment, si_snrs)`` with ``assignment[k]`` the estimate index
    used for reference ``k`` (``-1`` means the mixture stood in for a missing
    estimate). Ties go to the lexicographically first assignment.
    """
    n = len(references)
    pool = list(estimates) + [mixture] * max(0, n - len(estimates))
    scores = np.array([[si_snr(e, r) for r in references] for e in pool])
    best, best_val = None, -np.inf
    for perm in itertools.permutations(range(len(pool)), n):
        val = scores[list(perm), range(n)].mean()
        if val > best_val:
            best, best_val = perm, val
    assignment = [j if j < len(estimates) else -1 for j in best]
    return assignment, [float(scores[j, k]) for k, j in enumerate(best)]


def score_item(system: System, output_id: str, tag: str, mixture: np.ndarray, sources: np.ndarray,
               known_count: bool) -> UtteranceRecord:
    n = sources.shape[0]
    estimates = system.extract(mixture, n)
    if known_count and len(estimates) != n:
        raise ValueError(f"{output_id}: {len(estimates)} extractions for {n} references")
    if n == 1:
        # denoising: only the first extraction is scored
        estimates = estimates[:1]
    assignment, values = match_estimates(estimates, list(sources), mixture)
    improvements = [v - si_snr(mixture, s) for v, s in zip(values, sources)]
    return UtteranceRecord(output_id, tag, values, improvements, assignment)


def evaluate(
    system: System,
    manifests: Sequence[str | Path] | str | Path,
    configs: Sequence[str] | None = None,
    known_count: bool = True,
    metadata: dict | None = None,
    limit: int | None = None,
) -> EvalReport:
    """Score ``system`` on every manifest item (in manifest order)."""
    if isinstance(manifests, (str, Path)):
        manifests = [manifests]
    records = []
    for m in manifests:
        m = Path(m)
        entries = read_manifest(m)
        per_tag: dict[str, int] = {}
        for entry in entries:
            tag = entry.config.tag
            if configs is not None and tag not in configs:
                continue
            if limit is not None and per_tag.get(tag, 0) >= limit:
                continue
            per_tag[tag] = per_tag.get(tag, 0) + 1
            item = load_item(entry, m.parent)
            records.append(
                score_item(system, entry.output_id, tag, item.mixture.astype(np.float64),
                           item.sources.astype(np.float64), known_count)
            )
    meta = {"note": MATCHING_NOTE, **(metadata or {})}
    return EvalReport(system.name, records, meta)


def _channel_scores(s_hat, r_hat, sources: np.ndarray) -> tuple[float, float]:
    """SI-SNR of both heads under the best one-and-rest assignment (clean targets)."""
    total = sources.sum(0)
    best = None
    for i in range(sources.shape[0]):
        one = si_snr(s_hat, sources[i])
        rest = si_snr(r_hat, total - sources[i])
        if best is None or one + rest > best[0] + best[1]:
            best = (one, rest)
    return best


def degradation_analysis(
    model,
    clean_manifest: str | Path,
    noisy_manifest: str | Path,
    limit: int | None = None,
) -> DegradationStats:
    """Channel-wise SI-SNR change when the same items are run with noise added.

    Each delta is ``si_snr(noisy run) - si_snr(clean run)`` against the clean
    targets, so negative values mean the noise hurt that channel.
    """
    step = as_separator_fn(model)
    clean_manifest, noisy_manifest = Path(clean_manifest), Path(noisy_manifest)
    clean = {e.output_id: e for e in read_manifest(clean_manifest)}
    noisy = read_manifest(noisy_manifest)
    unpaired = sorted(set(clean) ^ {e.output_id for e in noisy})
    if unpaired:
        raise ValueError(f"unpaired items between clean and noisy manifests: {unpaired[:5]}")
    stats = DegradationStats()
    for entry in noisy[:limit]:
        c = load_item(clean[entry.output_id], clean_manifest.parent)
        nz = load_item(entry, noisy_manifest.parent)
        refs = c.sources.astype(np.float64)
        # the noisy copy may be rescaled to avoid clipping, so compare up to gain
        if refs.shape != nz.sources.shape or min(si_snr(a, b) for a, b in zip(nz.sources, refs)) < 20.0:
            raise ValueError(f"{entry.output_id}: clean and noisy items do not share sources")
        c1, c2 = _channel_scores(*step(c.mixture.astype(np.float64)), refs)
        n1, n2 = _channel_scores(*step(nz.mixture.astype(np.float64)), refs)
        stats.channel1.append(n1 - c1)
        stats.channel2.append(n2 - c2)
        stats.item_ids.append(entry.output_id)
    return stats


# --- rendering ---------------------------------------------------------------

REPORT_FORMATS = ("table-text", "csv", "json", "plot")
CSV_FIELDS = ("system", "output_id", "config", "si_snr", "si_snri", "assignment", "trained")


def render_table(reports: Sequence[EvalReport]) -> str:
    tags = [t for _, group in TASK_GROUPS for t in group]
    width = 9
    name_w = max([len("system")] + [len(r.system) for r in reports])
    lines = [f"# SI-SNRi (dB); * = task used in training; {MATCHING_NOTE}"]
    groups = " " * name_w + " |" + "|".join(
        f" {label:^{len(group) * (width + 1) - 2}} " for label, group in TASK_GROUPS
    )
    lines.append(groups)
    lines.append(f"{'system':<{name_w}} |" + "|".join(f"{t:^{width}}" for t in tags))
    for r in reports:
        stats = r.task_stats()
        trained = set(r.metadata.get("trained_tasks", []))
        cells = []
        for t in tags:
            if t in stats:
                cell = f"{stats[t]['mean']:.2f}" + ("*" if t in trained else "")
            else:
                cell = "-"
            cells.append(f"{cell:^{width}}")
        lines.append(f"{r.system:<{name_w}} |" + "|".join(cells))
    return "\n".join(lines) + "\n"


def parse_table(text: str) -> dict[str, dict[str, float]]:
    """Inverse of :func:`render_table` for the numeric cells."""
    rows = [l for l in text.splitlines() if l and not l.startswith("#")]
    header = [c.strip() for c in rows[1].split("|")[1:]]
    out = {}
    for row in rows[2:]:
        name, _, rest = row.partition("|")
        cells = [c.strip().rstrip("*") for c in rest.split("|")]
        out[name.strip()] = {t: float(c) for t, c in zip(header, cells) if c != "-"}
    return out


def write_csv(reports: Sequence[EvalReport], path: str | Path) -> None:
    buf = io.StringIO()
    for r in reports:
        meta = {"system": r.system, "metadata": r.metadata,
                "degradation": None if r.degradation is None else asdict(r.degradation)}
        buf.write("# " + json.dumps(meta, sort_keys=True) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for r in reports:
        trained = set(r.metadata.get("trained_tasks", []))
        for rec in r.records:
            writer.writerow([
                r.system, rec.output_id, rec.config,
                ";".join(repr(v) for v in rec.si_snr),
                ";".join(repr(v) for v in rec.si_snri),
                ";".join(str(v) for v in rec.assignment),
                int(rec.config in trained),
            ])
    Path(path).write_text(buf.getvalue())


def read_csv(path: str | Path) -> list[EvalReport]:
    text = Path(path).read_text()
    reports: dict[str, EvalReport] = {}
    body = []
    for line in text.splitlines():
        if line.startswith("# "):
            meta = json.loads(line[2:])
            deg = meta["degradation"]
            reports[meta["system"]] = EvalReport(
                meta["system"], [], meta["metadata"], None if deg is None else DegradationStats(**deg)
            )
        else:
            body.append(line)
    for row in csv.DictReader(body):
        floats = lambda s: [float(v) for v in s.split(";")] if s else []
        reports[row["system"]].records.append(
            UtteranceRecord(
                row["output_id"], row["config"], floats(row["si_snr"]), floats(row["si_snri"]),
                [int(v) for v in row["assignment"].split(";")] if row["assignment"] else [],
            )
        )
    return list(reports.values())


def render_plot(reports: Sequence[EvalReport], path: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with_deg = [r for r in reports if r.degradation is not None and r.degradation.channel1]
    fig, axes = plt.subplots(1, max(1, len(with_deg)), figsize=(5 * max(1, len(with_deg)), 3.5), squeeze=False)
    if not with_deg:
        axes[0, 0].text(0.5, 0.5, "no degradation data", ha="center", va="center")
        axes[0, 0].set_axis_off()
    for ax, r in zip(axes[0], with_deg):
        d = r.degradation
        m1, m2 = d.means
        bins = np.histogram_bin_edges(d.channel1 + d.channel2, bins=20)
        ax.hist(d.channel1, bins=bins, alpha=0.6, label=f"channel 1 (mean {m1:.2f})")
        ax.hist(d.channel2, bins=bins, alpha=0.6, label=f"channel 2 (mean {m2:.2f})")
        ax.set_xlabel("SI-SNR degradation (dB)")
        ax.set_ylabel("count")
        ax.set_title(r.system)
        ax.legend()
    fig.tight_layout()
    fig.savefig(str(path))
    plt.close(fig)


OUTPUT_NAMES = {"table-text": "table.txt", "csv": "report.csv", "json": "report.json", "plot": "degradation.png"}


def report_render(reports: EvalReport | Sequence[EvalReport], fmt: str, out_dir: str | Path) -> Path:
    """Write ``reports`` in one format under ``out_dir`` and return the file path."""
    if fmt not in REPORT_FORMATS:
        raise ValueError(f"unknown report format {fmt!r}; expected one of {REPORT_FORMATS}")
    if isinstance(reports, EvalReport):
        reports = [reports]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / OUTPUT_NAMES[fmt]
    if fmt == "table-text":
        path.write_text(render_table(reports))
    elif fmt == "csv":
        write_csv(reports, path)
    elif fmt == "json":
        path.write_text(json.dumps({"reports": [r.to_dict() for r in reports]}, indent=2, sort_keys=True))
    else:
        render_plot(reports, path)
    return path


def read_json(path: str | Path) -> list[EvalReport]:
    return [EvalReport.from_dict(d) for d in json.loads(Path(path).read_text())["reports"]]


def load_system(ckpt: str | Path, stop: StopRule | str = "known", a2pit_threshold: float = DEFAULT_A2PIT_THRESHOLD):
    """Build an evaluable system from a checkpoint file or a cascade directory."""
    ckpt = Path(ckpt)
    if ckpt.is_dir():
        if (ckpt / "ss.pt").exists():
            ss = load_checkpoint(ckpt / "ss.pt")
            sd = load_checkpoint(ckpt / "sd.pt").build() if (ckpt / "sd.pt").exists() else None
            model = CascadeSeparator(sd, ss.build())
            return RecursiveSystem(model, stop, "cascade"), ss.metadata
        ckpt = ckpt / "model.pt"
    c = load_checkpoint(ckpt)
    name = c.metadata.get("strategy", "saddel")
    model = c.build()
    if c.config.num_output_heads > 2:
        return A2PITSystem(model, a2pit_threshold, known_count=stop == "known", name=name), c.metadata
    return RecursiveSystem(model, stop, name), c.metadata
