import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from diffusedef import checkpoint as ck
from diffusedef import harness
from diffusedef import harness as H
from diffusedef.config import RunConfig


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    den = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


def grad_ok(analytic, numeric, rtol, atol=1e-8):
    """Relative check, with an absolute floor for gradients that are exactly zero."""
    diff = np.linalg.norm(np.asarray(analytic, float) - np.asarray(numeric, float))
    return diff < atol or rel_err(analytic, numeric) < rtol


GRAD_SEEDS = range(20)


def small_config(**attack):
    """Reduced pipeline for tests that only need a working, trained stack."""
    cfg = RunConfig()
    cfg.task.n_train, cfg.task.n_valid, cfg.task.n_test = 800, 60, 80
    cfg.model.epochs = 8
    cfg.adv.enabled = False
    cfg.diffusion.epochs = 20
    cfg.attack.n_examples = 30
    cfg.attack.seeds = [0]
    for k, v in attack.items():
        setattr(cfg.attack, k, v)
    return cfg


def build_stack(cfg, out):
    harness.gen_data(cfg, out)
    harness.train(cfg, out)
    harness.diffuse_train(cfg, out)
    return out


@pytest.fixture(scope="session")
def small_run(tmp_path_factory):
    """(config, run dir) for a reduced but fully trained pipeline."""
    cfg = small_config()
    out = tmp_path_factory.mktemp("small_run")
    return cfg, build_stack(cfg, out)


@pytest.fixture(scope="session")
def small_parts(small_run):
    cfg, out = small_run
    model, head_model, vocab, den, sched = harness.components(cfg, out)
    test = harness.load_split(cfg, out, "test", vocab)
    train = harness.load_split(cfg, out, "train", vocab)
    pools = harness.load_pools(cfg, out)
    return dict(cfg=cfg, out=out, model=model, vocab=vocab, den=den, sched=sched, test=test, train=train, pools=pools)



# ---------------------------------------------------------------- default-size pipeline


def build_pipeline(cfg, out):
    """Run every stage, recording wall time and the base checkpoint's hashes around diffusion training."""
    out = Path(out)
    meta = {"seconds": {}}

    def timed(name, fn, *a, **k):
        t = time.perf_counter()
        r = fn(*a, **k)
        meta["seconds"][name] = time.perf_counter() - t
        return r

    H.write_config_echo(cfg, out)
    timed("gen_data", H.gen_data, cfg, out)
    meta["train_digest"] = timed("train", H.train, cfg, out)
    meta["weights_before"] = ck.file_hash(out / "base" / ck.WEIGHTS)
    timed("diffuse_train", H.diffuse_train, cfg, out)
    meta["weights_after"] = ck.file_hash(out / "base" / ck.WEIGHTS)
    timed("attack", H.attack, cfg, out)
    timed("evaluate", H.evaluate, cfg, out)
    timed("ablate", H.ablate, cfg, out)
    timed("sweep", H.sweep, cfg, out)
    (out / "accept_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """(config, run dir, meta) for the default config, built once per session.

    Takes roughly 20 minutes on one CPU core. Set ``DIFFUSEDEF_ACCEPT_RUN`` to
    a directory to keep the run there and reuse it in later sessions.
    """
    cfg = RunConfig()
    keep = os.environ.get("DIFFUSEDEF_ACCEPT_RUN")
    out = Path(keep) if keep else tmp_path_factory.mktemp("accept_default")
    meta_path = out / "accept_meta.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
    else:
        meta = build_pipeline(cfg, out)
    return cfg, out, meta


@pytest.fixture(scope="session")
def default_parts(default_run):
    cfg, out, _ = default_run
    model, _, vocab, den, sched = H.components(cfg, out)
    return dict(cfg=cfg, out=out, model=model, vocab=vocab, den=den, sched=sched, test=H.load_split(cfg, out, "test", vocab))


def load(path):
    return json.loads(Path(path).read_text())

def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, in criterion order."""
    mod = __import__("sys").modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(verdicts):
        terminalreporter.write_line(verdicts[n])
