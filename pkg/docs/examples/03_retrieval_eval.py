"""Retrieval-based PB selection at inference and a paired success-rate comparison."""
from pbkl.env import generate_dataset
from pbkl.evaluation import build_index, evaluate, paired, pca_project, retrieve_pb
from pbkl.model import Checkpoint, PolicyConfig
from pbkl.training import train

demos, manifest = generate_dataset(15, 15, rng_seed=1)
lookup = {d.demo_id: d for d in demos}
small = PolicyConfig(d_model=32, n_heads=2, dim_feedforward=64, epochs=150, lr=1e-3, pb_lr=3e-2, alpha_pb=1.0)

prop = train(manifest, small, lookup)
act = train(manifest.success_only(), small.replace(use_pb=False, lambda_kl=0.0), lookup)

index = build_index(lookup[i] for i in manifest.success_ids)
start = demos[20].observations[0]
demo_id, pb, sim = retrieve_pb(start, index, prop.pb_table)
print(f"nearest success to {demos[20].demo_id}'s start: {demo_id} (cosine {sim:.4f}, label {pb.label})")

a = evaluate({0: Checkpoint(act.policy, None, 0)}, 30, 500, condition="ACT / D_S")
b = evaluate({0: Checkpoint(prop.policy, prop.pb_table, 0)}, 30, 500, lookup, condition="Proposed / D_S+D_F")
print("paired initial states:", paired(a, b))
for r in (a, b):
    print(f"{r.condition:22s} {r.cell()}")

pcs = pca_project([(i, prop.pb_table.array(i).ravel()) for i in prop.pb_table.demo_ids], k=2)
print("PB PCA explained variance:", pcs.explained_variance_ratio.round(3))
