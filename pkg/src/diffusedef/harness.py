"""Pipeline stages behind the CLI subcommands.

Every stage reads and writes under one output directory:

    data/{train,valid,test}.jsonl, data/synonyms.json
    base/            encoder-classifier checkpoint + loss.csv
    denoiser/        diffusion-layer checkpoint + loss.csv
    attacks/         one JSONL of attack records per victim
    reports/         EvalReport JSON per victim, summary.json, CSV analyses
    ablation/        per-toggle reports (+ the clean-trained components)
    sweep/           t' sensitivity curves

Outputs depend only on the config and the code; no timestamps or
wall-clock values are written into reports.
"""

from __future__ import annotations

import json
import logging
from dataclasses import replace
from pathlib import Path


from . import attack as A
from . import checkpoint as ck
from . import diffusion as D
from . import evaluation as E
from . import model as M
from . import numerics as nx
from . import synthetic
from .config import ConfigError, RunConfig, dump_config
from .text import Vocab, batch, encode_dataset, from_words, load_dataset, read_jsonl, split_words, write_jsonl
from .victim import BaseVictim, DiffuseDefVictim

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
ABLATIONS = ("full", "no_ensemble", "no_denoise", "no_adv")


class MissingInput(RuntimeError):
    pass


def _json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingInput(f"{what} not found at {path}; run the earlier stage first")
    return path


# ---------------------------------------------------------------- data


def generator_spec(cfg: RunConfig) -> synthetic.GeneratorSpec:
    t = cfg.task
    return synthetic.GeneratorSpec(t.n_train, t.n_valid, t.n_test, t.min_words, t.max_words, t.min_keywords, t.max_keywords, t.seed)


def gen_data(cfg: RunConfig, out) -> dict[str, int]:
    d = Path(out) / "data"
    splits = synthetic.generate(generator_spec(cfg))
    for name in SPLITS:
        write_jsonl(d / f"{name}.jsonl", splits[name])
    _json(d / "synonyms.json", synthetic.synonym_pools())
    _json(d / "spec.json", generator_spec(cfg).to_dict())
    return {k: len(v) for k, v in splits.items()}


def data_dir(cfg: RunConfig, out) -> Path:
    return Path(cfg.task.data_dir) if cfg.task.data_dir else Path(out) / "data"


def load_pools(cfg, out) -> dict[str, list[str]]:
    p = data_dir(cfg, out) / "synonyms.json"
    return json.loads(p.read_text(encoding="utf-8")) if p.exists() else {}


def build_vocab(rows, pools) -> Vocab:
    words = {w for text, _ in rows for w in split_words(text)}
    words |= set(pools) | {c for cs in pools.values() for c in cs}
    return Vocab(sorted(words))


def load_split(cfg, out, name, vocab):
    path = _need(data_dir(cfg, out) / f"{name}.jsonl", f"{name} split")
    return encode_dataset(load_dataset(path), vocab, cfg.model.max_len)


# ---------------------------------------------------------------- training


def _loss_csv(path, losses):
    E.write_csv(path, ["epoch", "loss"], [(i, float(v)) for i, v in enumerate(losses)])


def train(cfg: RunConfig, out, adversarial: bool | None = None, dest: str = "base") -> str:
    """Train the encoder-classifier; returns the checkpoint content hash."""
    out = Path(out)
    rows = load_dataset(_need(data_dir(cfg, out) / "train.jsonl", "train split"))
    pools = load_pools(cfg, out)
    vocab = build_vocab(rows, pools)
    data = encode_dataset(rows, vocab, cfg.model.max_len)
    labels = {label for _, label in rows}
    mc = cfg.model
    mcfg = M.ModelConfig(len(vocab), max(labels) + 1, mc.width, mc.layers, mc.heads, mc.ffn, mc.max_len, mc.dropout)
    model = M.EncoderClassifier(mcfg, seed=mc.seed)
    rng = nx.Rng(mc.seed + 1)
    adv = cfg.adv.enabled if adversarial is None else adversarial
    if adv:
        a = cfg.adv
        tlog = M.train_adversarial(model, data, M.AdvTrainConfig(True, a.inner_steps, a.step_size, a.norm_bound), mc.epochs, mc.lr, rng, mc.batch_size)
    else:
        tlog = M.train_clean(model, data, mc.epochs, mc.lr, rng, mc.batch_size)
    echo = cfg.to_dict() | {"adversarial_training": adv}
    digest = ck.save_model(out / dest, model, vocab, echo)
    _loss_csv(out / dest / "loss.csv", tlog.epoch_loss)
    log.info("trained %s (adv=%s): final loss %.4f", dest, adv, tlog.epoch_loss[-1])
    return digest


def load_base(cfg: RunConfig, out, src: str = "base"):
    model, vocab, manifest = ck.load_model(_need(Path(out) / src / ck.MANIFEST, "base checkpoint").parent)
    want = cfg.model
    got = model.cfg
    if (got.width, got.layers, got.heads, got.ffn, got.max_len) != (want.width, want.layers, want.heads, want.ffn, want.max_len):
        raise ConfigError(f"checkpoint {src} architecture {got} disagrees with the config")
    return model, vocab, manifest


def schedule_args(cfg: RunConfig) -> dict:
    return {"T": cfg.diffusion.T, "beta1": cfg.diffusion.beta1, "betaT": cfg.diffusion.betaT}


def diffuse_train(cfg: RunConfig, out, src: str = "base", dest: str = "denoiser") -> str:
    out = Path(out)
    model, vocab, manifest = load_base(cfg, out, src)
    data = load_split(cfg, out, "train", vocab)
    dc = cfg.diffusion
    sched = D.linear_schedule(dc.T, dc.beta1, dc.betaT)
    den = D.DiffusionDenoiser(D.DenoiserConfig(cfg.model.width, cfg.model.heads, cfg.model.ffn, cfg.model.dropout), seed=dc.seed)
    tlog = D.diffusion_train(den, model, data, sched, dc.epochs, dc.lr, nx.Rng(dc.seed + 1), dc.batch_size)
    if ck.params_digest(model.params) != manifest["sha256"]:
        raise RuntimeError("encoder-classifier parameters changed during diffusion training")
    digest = ck.save_denoiser(out / dest, den, schedule_args(cfg), manifest["sha256"], cfg.to_dict())
    _loss_csv(out / dest / "loss.csv", tlog.epoch_loss)
    if dc.recalibrate_head:
        recal = recalibrate_head(model, den, sched, inference_config(cfg), data, dc.recalibrate_epochs, dc.lr, nx.Rng(dc.seed + 2))
        ck.save_model(out / f"{dest}_head", recal, vocab, cfg.to_dict() | {"recalibrated_from": manifest["sha256"]})
    return digest


def recalibrate_head(model, den, sched, icfg, data, epochs, lr, rng, batch_size=64):
    """Refit only the linear head on denoised states; returns a new model, ``model`` is untouched."""
    new = model.copy()
    victim = DiffuseDefVictim(model, den, sched, icfg)
    ids, mask, labels = batch(data)
    pooled = E.pooled_many(victim, data, range(len(data)))
    opt = nx.Adam(lr=lr)
    head = {"head.W": new.params["head.W"], "head.b": new.params["head.b"]}
    for _ in range(epochs):
        order = rng.permutation(len(data))
        for s in range(0, len(data), batch_size):
            idx = order[s : s + batch_size]
            logits, c = nx.linear_forward(pooled[idx].astype(new.dtype), head["head.W"], head["head.b"])
            _, dlogits = nx.softmax_cross_entropy(logits, labels[idx])
            _, dW, db = nx.linear_backward(dlogits.astype(new.dtype), c)
            opt.step(head, {"head.W": dW, "head.b": db})
    return new


def load_denoiser(cfg: RunConfig, out, base_manifest: dict, src: str = "denoiser"):
    den, sched, manifest = ck.load_denoiser(_need(Path(out) / src / ck.MANIFEST, "denoiser checkpoint").parent)
    if manifest["schedule"] != schedule_args(cfg):
        raise ConfigError(f"denoiser schedule {manifest['schedule']} disagrees with the config {schedule_args(cfg)}")
    if manifest["base_sha256"] != base_manifest["sha256"]:
        raise ConfigError("denoiser was trained on a different base checkpoint")
    if den.width != cfg.model.width:
        raise ConfigError("denoiser width disagrees with the config")
    return den, sched


# ---------------------------------------------------------------- victims and attacks


def inference_config(cfg: RunConfig, **override) -> D.InferenceConfig:
    i = cfg.inference
    return replace(D.InferenceConfig(i.t_prime, i.k, i.zero_final_z, i.noise_at_t_prime), **override)


def constraints(cfg: RunConfig) -> A.AttackConstraints:
    a = cfg.attack
    return A.AttackConstraints(a.rho_max, a.eps_min, a.k_max)


def validate_pools(table: A.SubstitutionTable, seqs, sim, eps_min, vocab) -> A.SubstitutionTable:
    """Drop candidates that break the similarity floor in a sentence using the word.

    Up to 20 sentences per word are checked; the attack re-checks every
    candidate at query time anyway, so this only prunes hopeless entries.
    """
    uses: dict[str, list] = {}
    for s in seqs:
        for i, w in enumerate(s.words):
            uses.setdefault(w, []).append((s, i))

    def keep(word, cand):
        for s, i in uses.get(word, [])[:20]:
            words = list(s.words)
            words[i] = cand
            if sim(s, from_words(words, vocab, len(s.ids), s.label)) < eps_min:
                return False
        return True

    return table.filter_pools(keep)


def make_attacks(cfg: RunConfig, model, vocab, pools, probe_seqs):
    cons = constraints(cfg)
    sim = A.EmbeddingSimilarity(model.params["tok_emb"])
    table = A.SubstitutionTable.build(pools, vocab, model.params["tok_emb"], cfg.attack.neighbors, cons.k_max)
    table = validate_pools(table, probe_seqs, sim, cons.eps_min, vocab)
    fns = {
        "word": lambda q, s, r: A.greedy_word_attack(q, s, table, vocab, cons, sim, r),
        "char": lambda q, s, r: A.char_attack(q, s, vocab, cons, sim, r),
    }
    return {name: fns[name] for name in cfg.attack.attacks}


def components(cfg, out, base="base", den_src="denoiser"):
    model, vocab, manifest = load_base(cfg, out, base)
    den, sched = load_denoiser(cfg, out, manifest, den_src)
    head_dir = Path(out) / f"{den_src}_head"
    if cfg.diffusion.recalibrate_head:
        recal, _, _ = ck.load_model(_need(head_dir, "recalibrated head"))
        return model, recal, vocab, den, sched
    return model, model, vocab, den, sched


def make_victim(kind: str, cfg, model, head_model, den, sched, **icfg):
    if kind == "base":
        return BaseVictim(model)
    icfg = inference_config(cfg, **icfg)
    v = DiffuseDefVictim(model, den, sched, icfg, resample=cfg.inference.resample)
    if head_model is not model:
        v.model = _with_head(model, head_model)
    return v


def _with_head(model, head_model):
    m = model.copy()
    m.params["head.W"], m.params["head.b"] = head_model.params["head.W"], head_model.params["head.b"]
    return m


def run_attacks(cfg, victim, model, vocab, pools, testset, workers=1, attacks=None):
    fns = make_attacks(cfg, model, vocab, pools, testset)
    if attacks is not None:
        fns = {k: v for k, v in fns.items() if k in attacks}
    return A.attack_suite(victim, testset, fns, cfg.attack.seeds, cfg.attack.n_examples, workers)


def write_records(path, records):
    write_jsonl(path, [r.to_json() for r in records])


def read_records(path, vocab, max_len):
    rows = read_jsonl(_need(Path(path), "attack records"))
    if not rows:
        raise E.EmptyInput(f"no attack records in {path}")
    return [A.record_from_json(d, vocab, max_len) for d in rows]


def attack(cfg: RunConfig, out, victims=("base", "diffusedef"), workers=1) -> dict[str, int]:
    out = Path(out)
    model, head_model, vocab, den, sched = components(cfg, out)
    test = load_split(cfg, out, "test", vocab)
    pools = load_pools(cfg, out)
    counts = {}
    for kind in victims:
        v = make_victim(kind, cfg, model, head_model, den, sched)
        recs = run_attacks(cfg, v, model, vocab, pools, test, workers)
        write_records(out / "attacks" / f"{kind}.jsonl", recs)
        counts[kind] = len(recs)
    return counts


# ---------------------------------------------------------------- evaluation


def victim_report(cfg, victim, test, records, extra=None) -> E.EvalReport:
    clean = E.clean_accuracy(victim, test, cfg.task.seed)
    return E.build_report(victim.name, clean, records, cfg.to_dict() | (extra or {}))


def evaluate(cfg: RunConfig, out) -> dict:
    """Reports per victim plus the paired analyses, all from stored records."""
    out = Path(out)
    model, head_model, vocab, den, sched = components(cfg, out)
    test = load_split(cfg, out, "test", vocab)
    victims = {k: make_victim(k, cfg, model, head_model, den, sched) for k in ("base", "diffusedef")}
    records = {k: read_records(out / "attacks" / f"{k}.jsonl", vocab, cfg.model.max_len) for k in victims}
    rep_dir = out / "reports"
    summary: dict = {"config": cfg.to_dict(), "victims": {}}
    for k, v in victims.items():
        rep = victim_report(cfg, v, test, records[k])
        (rep_dir / f"{k}.json").parent.mkdir(parents=True, exist_ok=True)
        (rep_dir / f"{k}.json").write_text(rep.to_json() + "\n", encoding="utf-8")
        edges, mass = E.importance_histogram(records[k], cfg.eval.bins)
        E.write_csv(rep_dir / f"importance_{k}.csv", ["lo", "hi", "mass"], E.histogram_rows(edges, mass))
        summary["victims"][k] = {
            "clean_acc": rep.clean_acc,
            "aua": rep.aua,
            "mean_queries_success": rep.mean_queries_success,
            "mean_queries_all": rep.mean_queries_all,
            "tail_mass": E.tail_mass(records[k], cfg.eval.tail_threshold),
        }
    # paired analyses on the union of successful pairs from both victims
    pairs, seen = [], set()
    for k in victims:
        for p in E.successful_pairs(records[k]):
            key = (p[0].text, p[1].text, p[2])
            if key not in seen:
                seen.add(key)
                pairs.append(p)
    if pairs:
        summary["hidden_distance"] = {k: dict(zip(("l2", "cosine"), E.hidden_distance(v, pairs))) for k, v in victims.items()}
        summary["hidden_distance"]["n_pairs"] = len(pairs)
    else:
        summary["hidden_distance"] = None
    lengths = [r.original.length for rs in records.values() for r in rs]
    buckets = E.length_buckets(lengths, cfg.eval.length_buckets)
    by_len = {}
    for k in victims:
        word = [r for r in records[k] if r.attack == cfg.eval.sweep_attack] or records[k]
        by_len[k] = E.defense_rate_by_length(word, buckets)
    summary["defense_rate_by_length"] = by_len
    E.write_csv(
        rep_dir / "defense_by_length.csv",
        ["bucket", "base", "diffusedef"],
        [(b, by_len["base"][b], by_len["diffusedef"][b]) for b in by_len["base"]],
    )
    _json(rep_dir / "summary.json", summary)
    return summary


def ablate(cfg: RunConfig, out, toggles=ABLATIONS, workers=1) -> dict:
    """Ablations of ensembling, denoising and adversarial training; each toggle gets its own EvalReport."""
    out = Path(out)
    unknown = set(toggles) - set(ABLATIONS)
    if unknown:
        raise ConfigError(f"unknown ablation toggles {sorted(unknown)}")
    model, head_model, vocab, den, sched = components(cfg, out)
    test = load_split(cfg, out, "test", vocab)
    pools = load_pools(cfg, out)
    reports = {}
    for name in toggles:
        m, hm, d, s = model, head_model, den, sched
        if name == "no_adv":
            clean_dir = out / "ablation" / "clean_base"
            if not (clean_dir / ck.MANIFEST).exists():
                train(cfg, out, adversarial=False, dest="ablation/clean_base")
                diffuse_train(cfg, out, src="ablation/clean_base", dest="ablation/clean_denoiser")
            m, hm, _, d, s = components(cfg, out, "ablation/clean_base", "ablation/clean_denoiser")
        if name == "no_denoise":
            v = make_victim("base", cfg, m, hm, d, s)
        elif name == "no_ensemble":
            v = make_victim("diffusedef", cfg, m, hm, d, s, k=1)
        else:
            v = make_victim("diffusedef", cfg, m, hm, d, s)
        recs = run_attacks(cfg, v, m, vocab, pools, test, workers)
        rep = victim_report(cfg, v, test, recs, None if name == "full" else {"ablation": name})
        (out / "ablation" / f"{name}.json").parent.mkdir(parents=True, exist_ok=True)
        (out / "ablation" / f"{name}.json").write_text(rep.to_json() + "\n", encoding="utf-8")
        reports[name] = {"aua": rep.aua, "clean_acc": rep.clean_acc, "mean_queries_all": rep.mean_queries_all}
    _json(out / "ablation" / "summary.json", reports)
    return reports


def sweep(cfg: RunConfig, out, workers=1) -> list[dict]:
    """AUA and #Query over t' for each ensemble size, on one attack."""
    out = Path(out)
    model, head_model, vocab, den, sched = components(cfg, out)
    test = load_split(cfg, out, "test", vocab)
    pools = load_pools(cfg, out)
    rows = []
    for k in cfg.eval.sweep_k:
        for tp in cfg.eval.sweep_t_prime:
            v = make_victim("diffusedef", cfg, model, head_model, den, sched, t_prime=tp, k=k)
            recs = run_attacks(cfg, v, model, vocab, pools, test, workers, attacks=[cfg.eval.sweep_attack])
            rep = E.build_report(v.name, float("nan"), recs)
            a = cfg.eval.sweep_attack
            rows.append({"t_prime": tp, "k": k, "aua": rep.aua[a], "mean_queries_success": rep.mean_queries_success[a], "mean_queries_all": rep.mean_queries_all[a]})
    E.write_csv(
        out / "sweep" / "tprime.csv",
        ["t_prime", "k", "aua", "mean_queries_success", "mean_queries_all"],
        [tuple(r.values()) for r in rows],
    )
    return rows


def write_config_echo(cfg: RunConfig, out):
    Path(out).mkdir(parents=True, exist_ok=True)
    (Path(out) / "config.ini").write_text(dump_config(cfg), encoding="utf-8")
