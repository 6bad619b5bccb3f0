"""Acceptance criteria, one verdict line each.

The default-size pipeline (2000 training sentences, 200 attacked examples,
3 seeds) is built once per session by the ``default_run`` fixture in
conftest.py.

Every criterion records a PASS/FAIL line; the lines are printed together
in the terminal summary (see ``conftest.pytest_terminal_summary``) and the
test itself fails when the criterion does.
"""

import math
import time
from pathlib import Path

import numpy as np

import test_diffusion
import test_model
import test_numerics
from conftest import GRAD_SEEDS, build_pipeline, load, small_config
from diffusedef import checkpoint as ck
from diffusedef import diffusion as D
from diffusedef import numerics as nx
from diffusedef.text import Vocab, read_jsonl

VERDICTS: dict[int, str] = {}


def verdict(n: int, title: str, ok: bool, detail: str):
    VERDICTS[n] = f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {title} | {detail}"
    print(VERDICTS[n])
    assert ok, VERDICTS[n]


# ---------------------------------------------------------------- exact math


GRAD_CHECKS = [
    test_numerics.test_linear_gradients,
    test_numerics.test_layernorm_gradients,
    test_numerics.test_gelu_gradient,
    test_numerics.test_attention_gradients,
    test_numerics.test_cross_entropy_gradient,
    test_numerics.test_mse_gradient,
    test_numerics.test_embedding_gradient,
    test_numerics.test_transformer_layer_gradients,
    test_diffusion.test_denoiser_mse_gradients,
    lambda seed: test_model.test_full_model_gradients(seed, Vocab(["the", "cat", "sat", "on", "mat", "dog", "ran"])),
]


def test_c01_gradient_correctness():
    t = time.perf_counter()
    failures = []
    for check in GRAD_CHECKS:
        for seed in GRAD_SEEDS:
            try:
                check(seed)
            except AssertionError as e:
                failures.append(f"{getattr(check, '__name__', 'model')}[{seed}]: {e}")
    secs = time.perf_counter() - t
    ok = not failures and secs < 60 and len(GRAD_SEEDS) >= 20
    detail = f"{len(GRAD_CHECKS)} kernels x {len(GRAD_SEEDS)} seeds, rel err < 1e-4, {secs:.1f}s, failures={failures[:3]}"
    verdict(1, "gradient correctness", ok, detail)


def naive_alpha_bar(beta1, betaT, T):
    """Independent oracle: fresh linear betas, product of (1 - beta) recomputed per t."""
    betas = [beta1] if T == 1 else [beta1 + (betaT - beta1) * i / (T - 1) for i in range(T)]
    return [math.prod(1.0 - b for b in betas[: t + 1]) for t in range(T)], betas


def test_c02_schedule_exactness():
    worst, sigma_exact = 0.0, True
    for T in (1, 10, 30):
        s = D.linear_schedule(T, 1e-4, 0.02)
        ab, betas = naive_alpha_bar(1e-4, 0.02, T)
        worst = max(worst, float(np.max(np.abs(s.alpha_bar - np.array(ab)))))
        # sigma is defined as sqrt(beta) bit for bit; squaring it back can round by one ulp
        sigma_exact &= bool(np.array_equal(s.sigma, np.sqrt(np.array(betas))))
        sigma_exact &= bool(np.all(np.abs(s.sigma**2 - s.beta) <= np.spacing(s.beta)))
        sigma_exact &= bool(np.allclose(s.beta, betas, rtol=0, atol=1e-15))
    verdict(2, "schedule exactness", worst <= 1e-12 and sigma_exact, f"T in (1,10,30): max |abar - naive| = {worst:.2e}, sigma == sqrt(beta) and sigma^2 == beta to 1 ulp: {sigma_exact}")


def test_c03_forward_moments():
    sched = D.linear_schedule(30)
    rng = np.random.default_rng(7)
    h = rng.choice([-1, 1], size=8) * rng.uniform(0.5, 2.0, size=8)
    worst_mean = worst_var = 0.0
    for t in (1, 5, 30):
        eps = nx.Rng(100 + t).gaussian((100_000, 8))
        x = D.add_noise(np.broadcast_to(h, eps.shape), t, eps, sched)
        ab = sched.alpha_bar[t - 1]
        worst_mean = max(worst_mean, float(np.max(np.abs(x.mean(0) / (math.sqrt(ab) * h) - 1))))
        worst_var = max(worst_var, float(np.max(np.abs(x.var(0) / (1 - ab) - 1))))
    ok = worst_mean < 0.02 and worst_var < 0.02
    verdict(3, "forward-noising moments", ok, f"1e5 draws, t in (1,5,30): worst rel mean err {worst_mean:.4f}, worst rel var err {worst_var:.4f}")


def test_c04_exact_recovery():
    sched = D.linear_schedule(30)
    rng = nx.Rng(11)
    worst = 0.0
    for _ in range(100):
        h = rng.gaussian((6, 8)) * 3
        eps = rng.gaussian((6, 8))
        back = D.reverse_step(D.add_noise(h, 1, eps, sched), 1, eps, sched, use_sigma=False)
        worst = max(worst, float(np.max(np.abs(back - h))))
    verdict(4, "exact recovery at t=1", worst <= 1e-10, f"100 pairs, max abs err {worst:.2e}")


# ---------------------------------------------------------------- trained pipeline


def test_c05_frozen_stage(default_run):
    cfg, out, meta = default_run
    base = load(out / "base" / ck.MANIFEST)
    den = load(out / "denoiser" / ck.MANIFEST)
    model, _, _ = ck.load_model(out / "base")
    ok = (
        meta["weights_before"] == meta["weights_after"]
        and meta["train_digest"] == base["sha256"] == den["base_sha256"] == ck.params_digest(model.params)
    )
    verdict(5, "frozen encoder during diffusion training", ok, f"weights.bin sha256 {meta['weights_before'][:12]} -> {meta['weights_after'][:12]}")


def test_c06_denoiser_efficacy(default_parts):
    rows, ok = [], True
    for tp in (1, 5):
        noised, denoised = test_diffusion.denoising_errors(default_parts, tp, matched=False, n=100)
        ok &= denoised < noised
        rows.append(f"t'={tp}: noised {noised:.3e} denoised {denoised:.3e}")
    # the optional matched-noise mode, reported for context only
    mn, md = test_diffusion.denoising_errors(default_parts, 5, matched=True, n=100)
    rows.append(f"[info, noise at abar_t' mode] t'=5: noised {mn:.3e} denoised {md:.3e}")
    verdict(6, "denoiser efficacy (default one-step abar_1 noising)", ok, "; ".join(rows))


def test_c07_end_to_end(default_run):
    cfg, out, meta = default_run
    s = load(out / "reports" / "summary.json")["victims"]
    b, d = s["base"], s["diffusedef"]
    rep = load(out / "reports" / "diffusedef.json")
    n_attacked = min(v["n_attacked"] for per in rep["per_seed"].values() for v in per.values())
    secs = sum(meta["seconds"][k] for k in ("gen_data", "train", "diffuse_train", "attack", "evaluate"))
    checks = {
        "aua_word": d["aua"]["word"] >= b["aua"]["word"] + 0.15,
        "aua_char": d["aua"]["char"] >= b["aua"]["char"] + 0.15,
        "query_word": d["mean_queries_all"]["word"] >= 1.5 * b["mean_queries_all"]["word"],
        "query_char": d["mean_queries_all"]["char"] >= 1.5 * b["mean_queries_all"]["char"],
        "clean_drop": b["clean_acc"] - d["clean_acc"] <= 0.02,
        "size": n_attacked >= 195 and len(rep["seeds"]) >= 3,
        "runtime": secs < 30 * 60,
    }
    detail = (
        f"AUA word {b['aua']['word']:.3f}->{d['aua']['word']:.3f}, char {b['aua']['char']:.3f}->{d['aua']['char']:.3f}; "
        f"#Query word {b['mean_queries_all']['word']:.2f}->{d['mean_queries_all']['word']:.2f}, "
        f"char {b['mean_queries_all']['char']:.2f}->{d['mean_queries_all']['char']:.2f}; "
        f"clean {b['clean_acc']:.3f}->{d['clean_acc']:.3f}; attacked/seed >= {n_attacked}, seeds {rep['seeds']}; "
        f"{secs / 60:.1f} min; failing: {[k for k, v in checks.items() if not v]}"
    )
    verdict(7, "end-to-end robustness trend", all(checks.values()), detail)


def test_c08_ablation(default_run):
    _, out, _ = default_run
    a = load(out / "ablation" / "summary.json")
    ok, rows = True, []
    for atk in ("word", "char"):
        full, ne, nd, na = (a[k]["aua"][atk] for k in ("full", "no_ensemble", "no_denoise", "no_adv"))
        ok &= full > ne and full > nd and (full - na) < (full - nd)
        rows.append(f"{atk}: full {full:.3f}, no_ensemble {ne:.3f}, no_denoise {nd:.3f}, no_adv {na:.3f}")
    verdict(8, "ablation trend", ok, "; ".join(rows))


def test_c09_hidden_distance(default_run):
    _, out, _ = default_run
    hd = load(out / "reports" / "summary.json")["hidden_distance"]
    ok = hd is not None and hd["diffusedef"]["l2"] < hd["base"]["l2"] and hd["diffusedef"]["cosine"] < hd["base"]["cosine"]
    detail = "no successful pairs" if hd is None else (
        f"{hd['n_pairs']} pairs; L2 {hd['base']['l2']:.4f}->{hd['diffusedef']['l2']:.4f}, "
        f"cosine {hd['base']['cosine']:.4f}->{hd['diffusedef']['cosine']:.4f}"
    )
    verdict(9, "clean/adversarial distance trend", ok, detail)


def test_c10_importance_tail(default_run):
    _, out, _ = default_run
    s = load(out / "reports" / "summary.json")["victims"]
    b, d = s["base"]["tail_mass"], s["diffusedef"]["tail_mass"]
    verdict(10, "importance-distribution trend", d < b, f"mass above 0.5: base {b:.4f}, diffusedef {d:.4f}")


def read_sweep(out):
    rows = [line.split(",") for line in (Path(out) / "sweep" / "tprime.csv").read_text().splitlines()[1:]]
    return {(int(r[0]), int(r[1])): (float(r[2]), float(r[4])) for r in rows}


def test_c11_sensitivity(default_run):
    _, out, _ = default_run
    sw = read_sweep(out)
    tps = (1, 3, 5)
    no_ens = [sw[(t, 1)] for t in tps]
    ens = [sw[(t, 10)] for t in tps]
    aua_ok = all(no_ens[i + 1][0] >= no_ens[i][0] - 0.03 for i in range(2))
    q_ok = all(no_ens[i + 1][1] >= no_ens[i][1] for i in range(2))
    range_no = max(a for a, _ in no_ens) - min(a for a, _ in no_ens)
    range_ens = max(a for a, _ in ens) - min(a for a, _ in ens)
    ok = aua_ok and q_ok and range_ens < range_no
    detail = (
        f"k=1 AUA {[round(a, 3) for a, _ in no_ens]} #Query {[round(q, 2) for _, q in no_ens]}; "
        f"k=10 AUA {[round(a, 3) for a, _ in ens]}; range k=1 {range_no:.3f} vs k=10 {range_ens:.3f}"
    )
    verdict(11, "t' sensitivity trend", ok, detail)


def test_c12_constraint_compliance(default_run):
    cfg, out, _ = default_run
    n = bad = 0
    for path in sorted((out / "attacks").glob("*.jsonl")):
        for r in read_jsonl(path):
            n += 1
            L = r["length"]
            ok = r["queries"] <= cfg.attack.k_max * L and r["perturbed_ratio"] <= cfg.attack.rho_max + 1e-12
            if r["success"]:
                ok &= r["similarity"] >= cfg.attack.eps_min
            bad += not ok
    verdict(12, "constraint compliance", n > 0 and bad == 0, f"{n} records, {bad} violations (Q <= 50L, rho <= 0.3, sim >= 0.84)")


def test_c13_determinism(tmp_path):
    cfg = small_config(n_examples=12, seeds=[0, 1])
    cfg.task.n_train, cfg.task.n_test = 400, 40
    cfg.model.epochs, cfg.diffusion.epochs = 3, 3
    cfg.eval.sweep_t_prime, cfg.eval.sweep_k = [1, 3], [1, 2]
    for name in ("a", "b"):
        build_pipeline(cfg, tmp_path / name)
    files = sorted(
        p.relative_to(tmp_path / "a")
        for sub in ("reports", "ablation", "sweep", "attacks", "base", "denoiser")
        for p in (tmp_path / "a" / sub).rglob("*")
        if p.is_file()
    )
    differ = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    verdict(13, "determinism", bool(files) and not differ, f"{len(files)} report/record/checkpoint files compared, differing: {differ}")
