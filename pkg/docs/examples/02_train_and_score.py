"""Train on successes plus failures, then rank the failures by attention divergence.

Runs in about a minute on one CPU with the reduced model below.
"""
from pbkl.env import generate_dataset
from pbkl.model import Checkpoint, PolicyConfig
from pbkl.selection import build_plan, mode_means, score_all
from pbkl.training import train_multi_seed

demos, manifest = generate_dataset(10, 12, rng_seed=0)
lookup = {d.demo_id: d for d in demos}
cfg = PolicyConfig(d_model=32, n_heads=2, dim_feedforward=64, epochs=100, lr=1e-3, pb_lr=3e-2, alpha_pb=1.0)

records = train_multi_seed(manifest, cfg, [0, 1], lookup)
for r in records:
    print(f"seed {r.seed}: final L_ACT {r.history[-1].l_act:.4f}  separation {r.separation[0][1]:.3g} -> {r.separation[-1][1]:.3g}")

checkpoints = {r.seed: Checkpoint(r.policy, r.pb_table, r.seed) for r in records}
scores = score_all([lookup[i] for i in manifest.failure_ids], checkpoints)
for s in scores:
    print(f"rank {s.rank:2d}  {s.demo_id}  K-bar {s.mean:.4f}  ({s.failure_mode})")
print("mean K-bar by mode:", {k: round(v, 4) for k, v in mode_means(scores).items()})

low = build_plan(scores, "kl_low", 4)
print("kl_low subset:", low.selected)
