"""Synthetic topic-classification corpus with held-out synonyms.

Each sentence mixes a few topic keywords from its class with shared filler
words. Every keyword has synonyms that never occur in the generated text;
they are reserved for the attacker's substitution table, so a substitution
keeps the human label by construction.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .numerics import Rng

# keyword: held-out synonyms
TOPICS = {
    "world": {
        "government": ["administration", "regime"],
        "minister": ["secretary", "official"],
        "election": ["ballot", "vote"],
        "parliament": ["legislature", "assembly"],
        "treaty": ["accord", "pact"],
        "embassy": ["consulate", "mission"],
        "president": ["leader", "premier"],
        "border": ["frontier", "boundary"],
        "military": ["army", "troops"],
        "diplomat": ["envoy", "ambassador"],
        "protest": ["demonstration", "rally"],
        "refugees": ["exiles", "migrants"],
    },
    "sports": {
        "football": ["soccer", "futbol"],
        "coach": ["trainer", "manager"],
        "tournament": ["championship", "cup"],
        "goal": ["score", "point"],
        "stadium": ["arena", "ground"],
        "striker": ["forward", "attacker"],
        "season": ["campaign", "term"],
        "team": ["squad", "side"],
        "match": ["game", "fixture"],
        "olympic": ["olympics", "games"],
        "athlete": ["sportsman", "competitor"],
        "referee": ["umpire", "official"],
    },
    "business": {
        "market": ["exchange", "bourse"],
        "shares": ["stocks", "equities"],
        "profit": ["earnings", "income"],
        "investor": ["shareholder", "backer"],
        "merger": ["acquisition", "takeover"],
        "company": ["firm", "corporation"],
        "revenue": ["sales", "turnover"],
        "bank": ["lender", "financier"],
        "economy": ["economics", "commerce"],
        "prices": ["costs", "rates"],
        "retailer": ["merchant", "seller"],
        "dividend": ["payout", "distribution"],
    },
    "science": {
        "software": ["program", "application"],
        "computer": ["machine", "pc"],
        "research": ["study", "investigation"],
        "internet": ["web", "online"],
        "scientists": ["researchers", "experts"],
        "space": ["cosmos", "orbit"],
        "technology": ["tech", "engineering"],
        "chip": ["processor", "semiconductor"],
        "network": ["grid", "web"],
        "laboratory": ["lab", "facility"],
        "satellite": ["probe", "spacecraft"],
        "genome": ["dna", "genes"],
    },
}

FILLERS = (
    "the a on in at for with from after before during report said says new "
    "week monday today year officials people group plans first two three "
    "more than about over under amid while this that its their will could "
    "would also just still again"
).split()

# filler: alternatives the attacker may swap in (all ordinary training words)
FILLER_SYNONYMS = {
    "said": ["says", "reported"],
    "says": ["said", "reported"],
    "new": ["fresh", "latest"],
    "week": ["weekend", "days"],
    "today": ["now", "currently"],
    "plans": ["proposals", "schemes"],
    "people": ["persons", "citizens"],
    "officials": ["authorities", "sources"],
    "after": ["following", "since"],
    "before": ["ahead", "prior"],
    "during": ["throughout", "amid"],
    "amid": ["during", "among"],
    "first": ["initial", "opening"],
    "report": ["news", "story"],
    "group": ["body", "organization"],
    "about": ["regarding", "concerning"],
    "again": ["once", "anew"],
    "also": ["too", "additionally"],
    "still": ["yet", "nonetheless"],
    "could": ["might", "can"],
    "would": ["could", "might"],
}


@dataclass
class GeneratorSpec:
    n_train: int = 2000
    n_valid: int = 250
    n_test: int = 250
    min_words: int = 6
    max_words: int = 16
    min_keywords: int = 1
    max_keywords: int = 1
    seed: int = 42

    def to_dict(self):
        return asdict(self)


CLASSES = tuple(TOPICS)


def all_words() -> list[str]:
    """Every surface word the generator or the substitution table can emit."""
    seen: dict[str, None] = {}
    for kws in TOPICS.values():
        for kw, syns in kws.items():
            seen[kw] = None
            seen.update(dict.fromkeys(syns))
    seen.update(dict.fromkeys(FILLERS))
    for w, syns in FILLER_SYNONYMS.items():
        seen[w] = None
        seen.update(dict.fromkeys(syns))
    return list(seen)


def synonym_pools() -> dict[str, list[str]]:
    pools: dict[str, list[str]] = {}
    for kws in TOPICS.values():
        for kw, syns in kws.items():
            pools[kw] = list(syns)
    for w, syns in FILLER_SYNONYMS.items():
        pools.setdefault(w, []).extend(s for s in syns if s != w)
    return pools


def _sentence(label: int, spec: GeneratorSpec, rng: Rng) -> str:
    n = int(rng.integers(spec.min_words, spec.max_words + 1))
    n_kw = int(rng.integers(spec.min_keywords, min(spec.max_keywords, n) + 1))
    keywords = list(TOPICS[CLASSES[label]])
    words = [FILLERS[int(i)] for i in rng.integers(0, len(FILLERS), size=n)]
    slots = rng.permutation(n)[:n_kw]
    for slot in slots:
        words[int(slot)] = keywords[int(rng.integers(0, len(keywords)))]
    return " ".join(words)


def generate(spec: GeneratorSpec) -> dict[str, list[dict]]:
    """Disjoint train/valid/test splits of ``{"text", "label"}`` rows, balanced by class."""
    rng = Rng(spec.seed)
    total = spec.n_train + spec.n_valid + spec.n_test
    seen: set[str] = set()
    rows = []
    while len(rows) < total:
        label = len(rows) % len(CLASSES)
        text = _sentence(label, spec, rng)
        if text in seen:
            continue
        seen.add(text)
        rows.append({"text": text, "label": label})
    order = rng.permutation(total)
    rows = [rows[int(i)] for i in order]
    a, b = spec.n_train, spec.n_train + spec.n_valid
    return {"train": rows[:a], "valid": rows[a:b], "test": rows[b:]}
