"""Walk through the toy lift task: one scripted success, one of each failure mode."""
import numpy as np

from pbkl.env import LIFT_THRESHOLD, WorldState, generate_dataset, replay, scripted_actions

init = WorldState(0.0, 0.0, 1.0, 0.06, -0.12)
obs, final = replay(init, scripted_actions(init))
print(f"scripted demo: {len(obs)} steps, final height {final.height:.3f} (threshold {LIFT_THRESHOLD})")

demos, manifest = generate_dataset(3, 3, rng_seed=0)
for d in demos:
    peak = d.observations[:, 5].max()
    print(f"{d.demo_id}  {d.label:7s}  mode={d.failure_mode:13s}  task_end={d.task_end:2d}  peak height={peak:.3f}")

# observation layout: agent x, y, gripper, object x, y, height
np.set_printoptions(precision=3, suppress=True)
print(demos[0].observations[[0, 10, 30, -1]])
