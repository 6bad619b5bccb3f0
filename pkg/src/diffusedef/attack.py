"""Greedy black-box word-substitution attacks with query accounting.

Both attacks rank words by the drop in gold-class probability when the word
is deleted, then walk the ranking and substitute. Every sequence shown to the
victim costs one query; the budget is ``k_max * L`` for ``L`` valid words.
"""

from __future__ import annotations

import math
import multiprocessing as mp
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .numerics import Rng
from .text import PAD_ID, UNK_ID, TokenSequence, Vocab, batch, from_words

Query = Callable[[np.ndarray, np.ndarray], np.ndarray]


class NotCorrectlyClassified(ValueError):
    pass


@dataclass(frozen=True)
class AttackConstraints:
    rho_max: float = 0.3
    eps_min: float = 0.84
    k_max: int = 50

    def __post_init__(self):
        if not 0 < self.rho_max <= 1:
            raise ValueError("rho_max must lie in (0, 1]")
        if not 0 <= self.eps_min <= 1:
            raise ValueError("eps_min must lie in [0, 1]")
        if self.k_max < 1:
            raise ValueError("k_max must be positive")

    def q_max(self, length: int) -> int:
        return self.k_max * length

    def max_changes(self, length: int) -> int:
        # small epsilon keeps e.g. 0.3 * 10 from rounding down to 2
        return int(math.floor(self.rho_max * length + 1e-9))


@dataclass
class AttackRecord:
    original: TokenSequence
    adversarial: TokenSequence | None
    success: bool
    queries: int
    perturbed_ratio: float
    importance_scores: list[float]
    similarity: float = 1.0
    skipped: bool = False
    attack: str = ""
    victim: str = ""
    seed: int = 0
    example_index: int = -1

    def to_json(self) -> dict:
        return {
            "attack": self.attack,
            "victim": self.victim,
            "seed": self.seed,
            "example_index": self.example_index,
            "label": self.original.label,
            "original_text": self.original.text,
            "adversarial_text": None if self.adversarial is None else self.adversarial.text,
            "success": self.success,
            "skipped": self.skipped,
            "queries": self.queries,
            "perturbed_ratio": self.perturbed_ratio,
            "similarity": self.similarity,
            "length": self.original.length,
            "importance_scores": self.importance_scores,
        }


def record_from_json(d: dict, vocab: Vocab, max_len: int) -> AttackRecord:
    """Rebuild a record written by ``AttackRecord.to_json``."""
    orig = from_words(d["original_text"].split(), vocab, max_len, d["label"])
    adv = None if d["adversarial_text"] is None else from_words(d["adversarial_text"].split(), vocab, max_len, d["label"])
    return AttackRecord(
        original=orig,
        adversarial=adv,
        success=bool(d["success"]),
        queries=int(d["queries"]),
        perturbed_ratio=float(d["perturbed_ratio"]),
        importance_scores=[float(x) for x in d["importance_scores"]],
        similarity=float(d["similarity"]),
        skipped=bool(d["skipped"]),
        attack=d["attack"],
        victim=d["victim"],
        seed=int(d["seed"]),
        example_index=int(d["example_index"]),
    )


# ---------------------------------------------------------------- similarity


class EmbeddingSimilarity:
    """Cosine similarity of mean word embeddings over valid positions."""

    def __init__(self, table: np.ndarray):
        self.table = np.asarray(table, dtype=np.float64)

    def mean_vector(self, ids, mask):
        m = np.asarray(mask, dtype=np.float64)
        return (self.table[ids] * m[..., None]).sum(axis=-2) / m.sum(axis=-1, keepdims=True)

    def __call__(self, a: TokenSequence, b: TokenSequence) -> float:
        return float(self.many(a, [b])[0])

    def many(self, ref: TokenSequence, others: Sequence[TokenSequence]) -> np.ndarray:
        if not others:
            return np.zeros(0)
        ids, mask, _ = batch(list(others))
        u = self.mean_vector(ref.ids, ref.mask)
        v = self.mean_vector(ids, mask)
        den = np.linalg.norm(u) * np.linalg.norm(v, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            cos = np.where(den > 0, v @ u / den, 0.0)
        return np.clip(cos, -1.0, 1.0)


def similarity(a: TokenSequence, b: TokenSequence, embeddings: np.ndarray) -> float:
    if a.length != b.length:
        raise ValueError("similarity is defined for equal-length sequences")
    return EmbeddingSimilarity(embeddings)(a, b)


# ---------------------------------------------------------------- candidates


class SubstitutionTable:
    """word -> ranked candidate replacements (never the word itself)."""

    def __init__(self, pools: dict[str, list[str]], k_max: int = 50):
        self.k_max = k_max
        self.pools = {w: [c for c in dict.fromkeys(cs) if c != w][:k_max] for w, cs in pools.items()}

    def __call__(self, word: str) -> list[str]:
        return self.pools.get(word, [])

    @classmethod
    def build(cls, pools, vocab: Vocab, embeddings=None, neighbors: int = 0, k_max: int = 50):
        """Synonym pools, optionally extended with nearest neighbours in ``embeddings``."""
        merged = {w: list(cs) for w, cs in pools.items()}
        if embeddings is not None and neighbors > 0:
            E = np.asarray(embeddings, dtype=np.float64)
            norm = E / np.maximum(np.linalg.norm(E, axis=1, keepdims=True), 1e-12)
            sims = norm @ norm.T
            sims[:, [PAD_ID, UNK_ID]] = -np.inf
            np.fill_diagonal(sims, -np.inf)
            for wid in range(2, len(vocab)):
                word = vocab.itos[wid]
                near = np.argsort(-sims[wid], kind="stable")[:neighbors]
                merged.setdefault(word, []).extend(vocab.itos[int(j)] for j in near)
        return cls(merged, k_max)

    def filter_pools(self, keep: Callable[[str, str], bool]) -> "SubstitutionTable":
        return SubstitutionTable({w: [c for c in cs if keep(w, c)] for w, cs in self.pools.items()}, self.k_max)


KEYBOARD = {
    row[i]: row[max(i - 1, 0) : i] + row[i + 1 : i + 2]
    for row in ("qwertyuiop", "asdfghjkl", "zxcvbnm")
    for i in range(len(row))
}


def char_candidates(word: str) -> list[str]:
    """Swap adjacent letters, delete one, duplicate one, or hit a keyboard neighbour."""
    out: list[str] = []
    n = len(word)
    for i in range(n - 1):
        if word[i] != word[i + 1]:
            out.append(word[:i] + word[i + 1] + word[i] + word[i + 2 :])
    if n > 1:
        out += [word[:i] + word[i + 1 :] for i in range(n)]
    out += [word[: i + 1] + word[i] + word[i + 1 :] for i in range(n)]
    for i, ch in enumerate(word):
        out += [word[:i] + nb + word[i + 1 :] for nb in KEYBOARD.get(ch, "")]
    return [c for c in dict.fromkeys(out) if c and c != word]


# ---------------------------------------------------------------- attacks


def _deleted(seq: TokenSequence, i: int, vocab: Vocab) -> TokenSequence:
    return from_words(seq.words[:i] + seq.words[i + 1 :], vocab, len(seq.ids), seq.label)


def word_importance(query: Query, seq: TokenSequence, vocab: Vocab):
    """Gold-probability drop when each word is deleted.

    Returns ``(scores, base_probs, queries)``; one query for the unmodified
    sequence and one per valid word.
    """
    base = query(seq.ids[None], seq.mask[None])[0]
    gold = seq.label
    if seq.length < 2:
        return np.zeros(seq.length), base, 1
    variants = [_deleted(seq, i, vocab) for i in range(seq.length)]
    ids, mask, _ = batch(variants)
    probs = query(ids, mask)
    return base[gold] - probs[:, gold], base, 1 + seq.length


def _greedy(
    query: Query,
    seq: TokenSequence,
    candidates: Callable[[str, Rng], list[str]],
    vocab: Vocab,
    constraints: AttackConstraints,
    sim: EmbeddingSimilarity,
    rng: Rng,
    name: str,
) -> AttackRecord:
    """Shared greedy loop over importance-ranked positions.

    Candidates for one position are scored in a single batch for speed, but
    ``queries`` charges them as a sequential attacker would: up to and
    including the first flip, or all of them when none flips.
    """
    L, gold = seq.length, seq.label
    scores, base, queries = word_importance(query, seq, vocab)
    if int(np.argmax(base)) != gold:
        raise NotCorrectlyClassified(f"victim already misclassifies {seq.text!r}")
    q_max = constraints.q_max(L)
    budget_changes = constraints.max_changes(L)
    order = np.argsort(-scores, kind="stable")
    current = list(seq.words)
    p_gold = float(base[gold])
    changed: set[int] = set()

    def record(adv, success):
        return AttackRecord(
            original=seq,
            adversarial=adv,
            success=success,
            queries=queries,
            perturbed_ratio=len(changed) / L,
            importance_scores=[float(s) for s in scores],
            similarity=sim(seq, adv) if adv is not None else 1.0,
            attack=name,
        )

    for pos in order:
        pos = int(pos)
        if len(changed) + 1 > budget_changes or queries >= q_max:
            break
        options = []
        for cand in candidates(seq.words[pos], rng)[: constraints.k_max]:
            if cand == current[pos]:
                continue
            trial = list(current)
            trial[pos] = cand
            options.append(from_words(trial, vocab, len(seq.ids), gold))
        # candidates collapsing onto the same token ids are one query
        uniq: dict[bytes, TokenSequence] = {}
        for o in options:
            uniq.setdefault(o.ids.tobytes(), o)
        options = [o for o in uniq.values() if not np.array_equal(o.ids, _ids(current, vocab, seq))]
        if options:
            ok = sim.many(seq, options) >= constraints.eps_min
            options = [o for o, good in zip(options, ok) if good]
        options = options[: q_max - queries]
        if not options:
            continue
        ids, mask, _ = batch(options)
        probs = query(ids, mask)
        flipped = np.flatnonzero(probs.argmax(axis=1) != gold)
        if flipped.size:
            j = int(flipped[0])
            queries += j + 1
            changed.add(pos)
            return record(options[j], True)
        queries += len(options)
        j = int(np.argmin(probs[:, gold]))
        if probs[j, gold] < p_gold:
            p_gold = float(probs[j, gold])
            current = list(options[j].words)
            changed.add(pos)
    return record(None, False)


def _ids(words, vocab, seq):
    return from_words(words, vocab, len(seq.ids), seq.label).ids


def greedy_word_attack(query, seq, table: SubstitutionTable, vocab, constraints, sim, rng=None) -> AttackRecord:
    """Synonym substitution in importance order; stops at the first label flip."""
    return _greedy(query, seq, lambda w, r: table(w), vocab, constraints, sim, rng or Rng(0), "word")


def char_attack(query, seq, vocab, constraints, sim, rng=None) -> AttackRecord:
    """Character-level typos, tokenized back into (mostly out-of-vocabulary) ids."""

    def cands(word, r):
        cs = char_candidates(word)
        return [cs[int(i)] for i in r.permutation(len(cs))] if cs else []

    return _greedy(query, seq, cands, vocab, constraints, sim, rng or Rng(0), "char")


def attack_one(victim, seq: TokenSequence, index: int, seed: int, name: str, fn: Callable) -> AttackRecord:
    """One attack on one example; victim noise and attacker rng are both seeded ``seed ^ index``."""
    ex_seed = seed ^ index
    try:
        rec = fn(victim.bind(ex_seed), seq, Rng(ex_seed))
    except NotCorrectlyClassified:
        rec = AttackRecord(seq, None, False, 0, 0.0, [], skipped=True)
    rec.attack, rec.victim, rec.seed, rec.example_index = name, victim.name, seed, index
    return rec


_JOB: tuple = ()


def _run_job(task):
    victim, testset, attacks = _JOB
    seed, name, i = task
    return attack_one(victim, testset[i], i, seed, name, attacks[name])


def attack_suite(
    victim,
    testset: list[TokenSequence],
    attacks: dict[str, Callable],
    seeds: Sequence[int],
    n_examples: int | None = 200,
    workers: int = 1,
) -> list[AttackRecord]:
    """Run every attack for every seed on a seeded subset of ``testset``.

    ``attacks`` maps a name to ``fn(query, seq, rng) -> AttackRecord``.
    Examples the victim misclassifies before any attack are emitted as
    ``skipped`` records with zero queries. Records come back in
    (seed, attack, example) order whatever the worker count.
    """
    global _JOB
    if not testset:
        raise ValueError("empty test set")
    tasks = []
    for seed in seeds:
        n = len(testset) if n_examples is None else min(n_examples, len(testset))
        subset = sorted(int(i) for i in Rng(seed).permutation(len(testset))[:n])
        tasks += [(seed, name, i) for name in attacks for i in subset]
    _JOB = (victim, testset, attacks)
    try:
        if workers <= 1 or len(tasks) < 2:
            return [_run_job(t) for t in tasks]
        # fork shares the victim and the attack closures without pickling them
        ctx = mp.get_context("fork")
        with ctx.Pool(workers) as pool:
            return pool.map(_run_job, tasks, chunksize=max(1, len(tasks) // (8 * workers)))
    finally:
        _JOB = ()
