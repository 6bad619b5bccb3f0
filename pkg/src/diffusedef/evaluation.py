"""Robustness metrics and analyses computed from attack records."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attack import AttackRecord
from .text import TokenSequence, batch


class EmptyInput(ValueError):
    pass


def clean_accuracy(victim, testset: list[TokenSequence], seed: int = 0) -> float:
    """Accuracy over the whole test set; example ``i`` uses victim seed ``seed ^ i``."""
    if not testset:
        raise EmptyInput("empty test set")
    correct = 0
    for i, seq in enumerate(testset):
        correct += victim.predict(seq.ids, seq.mask, seed ^ i) == seq.label
    return correct / len(testset)


@dataclass
class AttackSummary:
    aua: float
    mean_queries_success: float | None
    mean_queries_all: float | None
    success_rate: float
    n_examples: int
    n_attacked: int


def accuracy_under_attack(records: Sequence[AttackRecord]) -> AttackSummary:
    """AUA over one record set (one attack, one seed).

    AUA counts an example as accurate only if it was classified correctly
    and the attack failed, so skipped (already wrong) examples count
    against it and AUA never exceeds the subset's clean accuracy.
    """
    if not records:
        raise EmptyInput("no attack records")
    attacked = [r for r in records if not r.skipped]
    failed = sum(not r.success for r in attacked)
    won = [r.queries for r in attacked if r.success]
    return AttackSummary(
        aua=failed / len(records),
        mean_queries_success=float(np.mean(won)) if won else None,
        mean_queries_all=float(np.mean([r.queries for r in attacked])) if attacked else None,
        success_rate=len(won) / len(attacked) if attacked else 0.0,
        n_examples=len(records),
        n_attacked=len(attacked),
    )


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


@dataclass
class EvalReport:
    victim: str
    clean_acc: float
    aua: dict[str, float] = field(default_factory=dict)
    mean_queries_success: dict[str, float | None] = field(default_factory=dict)
    mean_queries_all: dict[str, float | None] = field(default_factory=dict)
    success_rate: dict[str, float] = field(default_factory=dict)
    per_seed: dict[str, dict[str, dict]] = field(default_factory=dict)
    seeds: list[int] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def build_report(victim_name: str, clean_acc: float, records: Sequence[AttackRecord], config: dict | None = None) -> EvalReport:
    """Per-attack metrics as the arithmetic mean over seeds; per-seed values kept."""
    if not records:
        raise EmptyInput("no attack records")
    groups: dict[str, dict[int, list]] = defaultdict(lambda: defaultdict(list))
    for r in records:
        groups[r.attack][r.seed].append(r)
    rep = EvalReport(victim=victim_name, clean_acc=clean_acc, config=dict(config or {}))
    rep.seeds = sorted({r.seed for r in records})
    for attack, by_seed in sorted(groups.items()):
        summaries = {s: accuracy_under_attack(rs) for s, rs in sorted(by_seed.items())}
        rep.per_seed[attack] = {str(s): asdict(v) for s, v in summaries.items()}
        rep.aua[attack] = float(np.mean([v.aua for v in summaries.values()]))
        rep.mean_queries_success[attack] = _mean(v.mean_queries_success for v in summaries.values())
        rep.mean_queries_all[attack] = _mean(v.mean_queries_all for v in summaries.values())
        rep.success_rate[attack] = float(np.mean([v.success_rate for v in summaries.values()]))
    return rep


# ---------------------------------------------------------------- analyses


def hidden_distance(victim, pairs: Sequence[tuple[TokenSequence, TokenSequence, int]]):
    """Mean L2 and cosine distance between pooled clean/adversarial representations.

    ``pairs`` holds ``(clean, adversarial, seed)``; both sides of a pair are
    represented with the same victim seed.
    """
    if not pairs:
        raise EmptyInput("no clean/adversarial pairs")
    l2, cos = [], []
    for clean, adv, seed in pairs:
        a = victim.pooled(clean.ids, clean.mask, seed)[0].astype(np.float64)
        b = victim.pooled(adv.ids, adv.mask, seed)[0].astype(np.float64)
        l2.append(float(np.linalg.norm(a - b)))
        denom = np.linalg.norm(a) * np.linalg.norm(b)
        cos.append(float(1.0 - (a @ b) / denom) if denom > 0 else 1.0)
    return float(np.mean(l2)), float(np.clip(np.mean(cos), 0.0, 2.0))


def successful_pairs(records: Sequence[AttackRecord]):
    return [(r.original, r.adversarial, r.seed ^ r.example_index) for r in records if r.success]


def max_importance(records: Sequence[AttackRecord]) -> np.ndarray:
    return np.array([max(r.importance_scores) for r in records if r.importance_scores])


def importance_histogram(records: Sequence[AttackRecord], bins: int = 20, lo: float = 0.0, hi: float = 1.0):
    """Fraction of examples per bin of the max importance score; values are clipped into range."""
    scores = np.clip(max_importance(records), lo, hi)
    edges = np.linspace(lo, hi, bins + 1)
    if scores.size == 0:
        return edges, np.zeros(bins)
    counts, _ = np.histogram(scores, bins=edges)
    return edges, counts / counts.sum()


def tail_mass(records: Sequence[AttackRecord], threshold: float = 0.5) -> float:
    scores = max_importance(records)
    return float((scores > threshold).mean()) if scores.size else 0.0


def defense_rate_by_length(records: Sequence[AttackRecord], buckets: Sequence[tuple[int, int]]):
    """Fraction of failed attacks per inclusive length bucket; empty buckets map to None."""
    out: dict[str, float | None] = {}
    attacked = [r for r in records if not r.skipped]
    for lo, hi in buckets:
        rs = [r for r in attacked if lo <= r.original.length <= hi]
        out[f"{lo}-{hi}"] = (sum(not r.success for r in rs) / len(rs)) if rs else None
    return out


def length_buckets(lengths: Sequence[int], n: int = 4) -> list[tuple[int, int]]:
    lo, hi = int(min(lengths)), int(max(lengths))
    cuts = np.linspace(lo, hi + 1, n + 1).round().astype(int)
    return [(int(a), int(b) - 1) for a, b in zip(cuts[:-1], cuts[1:]) if b > a]


# ---------------------------------------------------------------- output


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else (f"{v:.6g}" if isinstance(v, float) else v) for v in row])


def histogram_rows(edges, mass):
    return [(float(edges[i]), float(edges[i + 1]), float(mass[i])) for i in range(len(mass))]


def pooled_many(victim, seqs: list[TokenSequence], seeds: Sequence[int]) -> np.ndarray:
    ids, mask, _ = batch(seqs)
    return np.concatenate([victim.pooled(ids[i : i + 1], mask[i : i + 1], s) for i, s in enumerate(seeds)])
