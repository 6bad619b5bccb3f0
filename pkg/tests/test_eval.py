import json

import numpy as np
import pytest

from diffusedef import evaluation as E
from diffusedef.attack import AttackRecord
from diffusedef.text import Vocab, from_words

V = Vocab(["a", "b", "c", "d", "e", "f"])


def rec(success=False, skipped=False, queries=10, n_words=4, seed=0, attack="word", scores=None, idx=0):
    orig = from_words(["a", "b", "c", "d", "e", "f"][:n_words], V, 8, 0)
    adv = from_words(["b"] + list(orig.words[1:]), V, 8, 0) if success else None
    return AttackRecord(
        orig, adv, success, 0 if skipped else queries, 0.0,
        [] if skipped else (scores if scores is not None else [0.1] * n_words),
        skipped=skipped, attack=attack, seed=seed, example_index=idx,
    )


# ---------------------------------------------------------------- AUA and queries


def test_aua_all_failed_attacks_is_one():
    s = E.accuracy_under_attack([rec() for _ in range(5)])
    assert s.aua == 1.0 and s.success_rate == 0.0 and s.mean_queries_success is None


def test_aua_all_successful_attacks_is_zero():
    s = E.accuracy_under_attack([rec(success=True, queries=q) for q in (4, 6)])
    assert s.aua == 0.0 and s.mean_queries_success == 5.0 and s.mean_queries_all == 5.0


def test_aua_counts_skipped_against_accuracy():
    """Hand count: 2 failed, 1 success, 1 skipped -> 2 / 4."""
    rs = [rec(), rec(), rec(success=True, queries=7), rec(skipped=True)]
    s = E.accuracy_under_attack(rs)
    assert s.aua == 0.5 and s.n_attacked == 3 and s.success_rate == pytest.approx(1 / 3)
    assert s.mean_queries_all == pytest.approx(9.0)  # (10 + 10 + 7) / 3, skipped excluded


def test_aua_never_exceeds_clean_accuracy():
    rng = np.random.default_rng(0)
    for _ in range(50):
        rs = [rec(success=bool(rng.random() < 0.4), skipped=bool(rng.random() < 0.2)) for _ in range(30)]
        clean = np.mean([not r.skipped for r in rs])
        assert E.accuracy_under_attack(rs).aua <= clean + 1e-12


def test_empty_inputs_raise():
    with pytest.raises(E.EmptyInput):
        E.accuracy_under_attack([])
    with pytest.raises(E.EmptyInput):
        E.build_report("x", 1.0, [])
    with pytest.raises(E.EmptyInput):
        E.clean_accuracy(None, [])
    with pytest.raises(E.EmptyInput):
        E.hidden_distance(None, [])


def test_report_means_over_seeds_and_keeps_per_seed():
    rs = [rec(seed=0), rec(seed=0, success=True), rec(seed=1), rec(seed=1), rec(seed=0, attack="char")]
    r = E.build_report("v", 0.9, rs, {"k": 1})
    assert r.aua["word"] == pytest.approx((0.5 + 1.0) / 2)
    assert r.aua["char"] == 1.0
    assert set(r.per_seed["word"]) == {"0", "1"} and r.seeds == [0, 1]
    assert json.loads(r.to_json())["config"] == {"k": 1}


def test_report_is_pure():
    rs = [rec(seed=s, success=bool(s % 2)) for s in range(4)]
    snapshot = [r.to_json() for r in rs]
    a = E.build_report("v", 1.0, rs).to_json()
    assert a == E.build_report("v", 1.0, rs).to_json()
    assert [r.to_json() for r in rs] == snapshot


# ---------------------------------------------------------------- importance histogram


def test_histogram_sums_to_one_and_bins_by_max():
    rs = [rec(scores=[0.1, 0.72, 0.3, 0.0]), rec(scores=[0.05, 0.0, 0.0, 0.0]), rec(scores=[1.5, 0, 0, 0])]
    edges, mass = E.importance_histogram(rs, bins=20)
    assert len(edges) == 21 and mass.sum() == pytest.approx(1.0)
    assert mass[14] == pytest.approx(1 / 3)  # 0.72 falls in [0.70, 0.75)
    assert mass[1] == pytest.approx(1 / 3)
    assert mass[19] == pytest.approx(1 / 3)  # 1.5 is clipped into the last bin
    assert E.tail_mass(rs, 0.5) == pytest.approx(2 / 3)


def test_histogram_ignores_skipped_and_handles_empty():
    edges, mass = E.importance_histogram([rec(skipped=True)])
    assert mass.sum() == 0 and E.tail_mass([]) == 0.0


# ---------------------------------------------------------------- length buckets


def test_defense_rate_by_length():
    rs = [rec(n_words=2), rec(n_words=2, success=True), rec(n_words=5), rec(n_words=6, skipped=True)]
    out = E.defense_rate_by_length(rs, [(1, 3), (4, 6), (7, 9)])
    assert out == {"1-3": 0.5, "4-6": 1.0, "7-9": None}


def test_length_buckets_cover_range_without_overlap():
    b = E.length_buckets([6, 7, 9, 12, 16], 4)
    assert b[0][0] == 6 and b[-1][1] == 16
    assert all(b[i][1] + 1 == b[i + 1][0] for i in range(len(b) - 1))
    assert E.length_buckets([5, 5], 4) == [(5, 5)]


# ---------------------------------------------------------------- distances


class FixedVictim:
    """Pooled vector = one-hot of the first token id, for hand-computable distances."""

    def pooled(self, ids, mask, seed=0):
        v = np.zeros((1, len(V)))
        v[0, int(np.atleast_2d(ids)[0, 0])] = 1.0
        return v


def test_hidden_distance_hand_values():
    same = from_words(["a", "b"], V, 4, 0)
    other = from_words(["b", "b"], V, 4, 0)
    l2, cos = E.hidden_distance(FixedVictim(), [(same, same, 0), (same, other, 0)])
    assert l2 == pytest.approx(np.sqrt(2) / 2)
    assert cos == pytest.approx(0.5)


def test_successful_pairs_seed():
    rs = [rec(success=True, seed=3, idx=5), rec(seed=3, idx=6)]
    pairs = E.successful_pairs(rs)
    assert len(pairs) == 1 and pairs[0][2] == 3 ^ 5


def test_write_csv_format(tmp_path):
    p = tmp_path / "x.csv"
    E.write_csv(p, ["a", "b"], [(1, 0.123456789), ("z", None)])
    assert p.read_text() == "a,b\n1,0.123457\nz,\n"


# ---------------------------------------------------------------- trivial spec cases


class ConstantVictim:
    def __init__(self, label=None):
        self.label = label

    def predict(self, ids, mask, seed):
        return self.label


class PerfectVictim:
    def __init__(self, testset):
        self.answers = {s.ids.tobytes(): s.label for s in testset}

    def predict(self, ids, mask, seed):
        return self.answers[ids.tobytes()]


def balanced_set():
    return [from_words([w], V, 4, i) for i, w in enumerate("abcd")]


def test_clean_accuracy_stub_victims():
    data = balanced_set()
    assert E.clean_accuracy(PerfectVictim(data), data) == 1.0
    assert E.clean_accuracy(ConstantVictim(2), data) == 0.25


def test_identical_pair_has_zero_distance():
    s = from_words(["c", "d"], V, 4, 0)
    assert E.hidden_distance(FixedVictim(), [(s, s, 0)]) == (0.0, 0.0)


def test_distance_bounds_on_random_pairs():
    class RandomVictim:
        def pooled(self, ids, mask, seed=0):
            return np.random.default_rng(int(np.atleast_2d(ids)[0, 0]) + seed).normal(size=(1, 5))

    pairs = [(from_words([a], V, 2, 0), from_words([b], V, 2, 0), s) for s, (a, b) in enumerate(zip("abcde", "fedcb"))]
    l2, cos = E.hidden_distance(RandomVictim(), pairs)
    assert l2 >= 0 and 0 <= cos <= 2


def test_single_record_histogram_is_one_bin():
    _, mass = E.importance_histogram([rec(scores=[0.33, 0.1, 0, 0])])
    assert mass.max() == 1.0 and np.count_nonzero(mass) == 1


def test_all_fail_records_defend_every_bucket():
    rs = [rec(n_words=n) for n in (2, 3, 5, 6)]
    out = E.defense_rate_by_length(rs, [(1, 2), (3, 4), (5, 6), (9, 9)])
    assert out == {"1-2": 1.0, "3-4": 1.0, "5-6": 1.0, "9-9": None}
