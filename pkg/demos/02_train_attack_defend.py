"""
Train, defend and attack on a reduced synthetic task
====================================================

Builds the whole stack in a temporary directory with a small config
(under a minute on one core): synthetic corpus, encoder-classifier,
diffusion layer on the frozen encoder, then the greedy word attack
against the plain model and the defended one.
"""

import tempfile

from diffusedef import harness as H
from diffusedef import evaluation as E
from diffusedef.config import RunConfig

cfg = RunConfig()
cfg.task.n_train, cfg.task.n_test = 800, 60
cfg.model.epochs, cfg.diffusion.epochs = 6, 10
cfg.adv.enabled = False
cfg.attack.n_examples, cfg.attack.seeds = 30, [0]

out = tempfile.mkdtemp(prefix="diffusedef_demo_")
print("run directory:", out)
print("corpus:", H.gen_data(cfg, out))
print("encoder hash:", H.train(cfg, out)[:16])
print("denoiser hash:", H.diffuse_train(cfg, out)[:16])

model, head, vocab, den, sched = H.components(cfg, out)
test = H.load_split(cfg, out, "test", vocab)
pools = H.load_pools(cfg, out)

# a sentence, its label and what each victim predicts
s = test[0]
print("\nexample:", s.text, "| label", s.label)
for kind in ("base", "diffusedef"):
    v = H.make_victim(kind, cfg, model, head, den, sched)
    print(f"  {kind:10s} predicts {v.predict(s.ids, s.mask, seed=0)}")

# attack both victims; records carry queries, ratio and similarity
for kind in ("base", "diffusedef"):
    v = H.make_victim(kind, cfg, model, head, den, sched)
    recs = H.run_attacks(cfg, v, model, vocab, pools, test, attacks=["word"])
    rep = E.build_report(kind, E.clean_accuracy(v, test), recs)
    won = [r for r in recs if r.success]
    print(f"\n{kind}: clean {rep.clean_acc:.3f}  AUA {rep.aua['word']:.3f}  mean queries {rep.mean_queries_all['word']:.1f}")
    if won:
        print("  e.g.", won[0].original.text, "->", won[0].adversarial.text)
