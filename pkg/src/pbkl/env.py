"""Kinematic 2-D lift task and a scripted demonstrator.

The agent moves in the plane, closes its gripper on the object to attach
it, and lifts it by continuing to command "close" while attached. A
trajectory succeeds when the object ends above ``LIFT_THRESHOLD``.

Actions are ``(dx, dy, grip)``: motion is clipped to ``MAX_STEP`` per axis;
``grip > GRIP_DEADBAND`` closes (and lifts while attached), ``grip <
-GRIP_DEADBAND`` opens, anything in between keeps the gripper as it is.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attention import FAILURE, SUCCESS
from .errors import ConfigError, IntegrityError

X_BOUNDS = (-0.1, 0.1)
Y_BOUNDS = (-0.2, 0.2)
MAX_STEP = 0.05
GRIP_DEADBAND = 0.5
GRASP_RADIUS = 0.02
HOME_NOISE = 0.01
LIFT_RATE = 0.01
MAX_HEIGHT = 0.1
LIFT_THRESHOLD = 0.04
EPISODE_LENGTH = 60
FAILURE_MODES = ("miss", "early_release", "wander")
DATASET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class WorldState:
    agent_x: float
    agent_y: float
    gripper: float  # 1 open, 0 closed
    object_x: float
    object_y: float
    height: float = 0.0
    attached: bool = False
    step_index: int = 0

    def observation(self):
        return np.array([self.agent_x, self.agent_y, self.gripper,
                         self.object_x, self.object_y, self.height])

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _clamp(v, lo, hi):
    return float(min(max(v, lo), hi))


def step(state, action):
    """Advance one tick; inputs are clipped, dynamics are deterministic."""
    dx, dy, grip = (float(a) for a in action)
    dx = _clamp(dx, -MAX_STEP, MAX_STEP)
    dy = _clamp(dy, -MAX_STEP, MAX_STEP)
    ax = _clamp(state.agent_x + dx, *X_BOUNDS)
    ay = _clamp(state.agent_y + dy, *Y_BOUNDS)
    gripper, attached, height = state.gripper, state.attached, state.height
    ox, oy = state.object_x, state.object_y
    if grip > GRIP_DEADBAND:
        if attached:
            height = min(height + LIFT_RATE, MAX_HEIGHT)
        elif np.hypot(ax - ox, ay - oy) <= GRASP_RADIUS:
            attached = True
        gripper = 0.0
    elif grip < -GRIP_DEADBAND:
        gripper = 1.0
        if attached:
            attached, height = False, 0.0
    if attached:
        ox, oy = ax, ay
    return WorldState(ax, ay, gripper, ox, oy, height, attached, state.step_index + 1)


def sample_initial_state(rng):
    """Object uniform in the arena; agent near its home pose at the origin."""
    ox = rng.uniform(*X_BOUNDS)
    oy = rng.uniform(*Y_BOUNDS)
    ax, ay = rng.uniform(-HOME_NOISE, HOME_NOISE, size=2)
    return WorldState(float(ax), float(ay), 1.0, float(ox), float(oy))


def is_success(state):
    return state.height > LIFT_THRESHOLD


# ------------------------------------------------------------------ scripts


def _reach(state, tx, ty):
    return [_clamp(tx - state.agent_x, -MAX_STEP, MAX_STEP),
            _clamp(ty - state.agent_y, -MAX_STEP, MAX_STEP), 0.0]


def _at(state, tx, ty, tol=1e-9):
    return abs(state.agent_x - tx) <= tol and abs(state.agent_y - ty) <= tol


def scripted_actions(initial, mode="none", rng=None, lift_steps=8):
    """Action list for one episode of the given mode (``none`` = success script)."""
    rng = np.random.default_rng(0) if rng is None else rng
    tx, ty = initial.object_x, initial.object_y
    n_lift = lift_steps
    wander_dir = None
    if mode == "miss":
        r = rng.uniform(0.02, 0.05)
        for _ in range(64):
            ang = rng.uniform(0, 2 * np.pi)
            cx = tx + r * np.cos(ang)
            cy = ty + r * np.sin(ang)
            if X_BOUNDS[0] <= cx <= X_BOUNDS[1] and Y_BOUNDS[0] <= cy <= Y_BOUNDS[1]:
                break
        tx, ty = float(cx), float(cy)
    elif mode == "early_release":
        n_lift = int(rng.integers(1, 4))  # height stays <= 0.03
    elif mode == "wander":
        away = np.array([initial.agent_x - tx, initial.agent_y - ty])
        base = np.arctan2(away[1], away[0]) if np.hypot(*away) > 1e-6 else rng.uniform(0, 2 * np.pi)
        wander_dir = base + rng.uniform(-np.pi / 3, np.pi / 3)
    elif mode != "none":
        raise ValueError(f"unknown failure mode {mode!r}")

    state, actions, phase, lifted = initial, [], "reach", 0
    wander_len = int(rng.integers(6, 14)) if mode == "wander" else 0
    for t in range(EPISODE_LENGTH):
        if mode == "wander":
            if t < wander_len:
                a = [MAX_STEP * np.cos(wander_dir), MAX_STEP * np.sin(wander_dir), 0.0]
            elif t == wander_len:
                a = [0.0, 0.0, 1.0]
            else:
                a = [0.0, 0.0, 0.0]
        elif phase == "reach":
            if _at(state, tx, ty):
                a, phase = [0.0, 0.0, 1.0], "lift"
            else:
                a = _reach(state, tx, ty)
        elif phase == "lift" and lifted < n_lift:
            a = [0.0, 0.0, 1.0]
            lifted += 1
        elif phase == "lift" and mode == "early_release":
            a, phase = [0.0, 0.0, -1.0], "done"
        else:
            a, phase = [0.0, 0.0, 0.0], "done"
        actions.append([float(v) for v in a])
        state = step(state, a)
    return actions


def replay(initial, actions):
    """Observations seen before each action, and the final state."""
    state, obs = initial, []
    for a in actions:
        obs.append(state.observation())
        state = step(state, a)
    return np.array(obs), state


# ------------------------------------------------------------------ datasets


@dataclass
class Demonstration:
    demo_id: str
    observations: np.ndarray  # [T, 6]
    actions: np.ndarray  # [T, 3]
    label: str
    failure_mode: str
    initial_state: WorldState

    @property
    def task_end(self):
        """Steps up to and including the last non-zero action; the rest is padding."""
        moving = np.flatnonzero(np.any(self.actions != 0, axis=1))
        return int(moving[-1]) + 1 if moving.size else 1

    def to_record(self):
        return {
            "demo_id": self.demo_id,
            "label": self.label,
            "failure_mode": self.failure_mode,
            "initial_state": self.initial_state.to_dict(),
            "observations": self.observations.tolist(),
            "actions": self.actions.tolist(),
        }

    @classmethod
    def from_record(cls, r):
        return cls(r["demo_id"], np.asarray(r["observations"], dtype=float),
                   np.asarray(r["actions"], dtype=float), r["label"], r["failure_mode"],
                   WorldState.from_dict(r["initial_state"]))


@dataclass
class DatasetManifest:
    """Which demonstrations make up one training set, and why."""

    name: str
    dataset: str  # path of the demonstration file
    success_ids: list
    failure_ids: list
    strategy: str = "full"
    provenance: dict = field(default_factory=dict)

    @property
    def demo_ids(self):
        return list(self.success_ids) + list(self.failure_ids)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())

    def success_only(self, name=None):
        return DatasetManifest(name or f"{self.name}-success", self.dataset, list(self.success_ids), [],
                               "success_only", dict(self.provenance))


def _make_demo(demo_id, initial, actions, mode):
    obs, final = replay(initial, actions)
    label = SUCCESS if is_success(final) else FAILURE
    return Demonstration(demo_id, obs, np.asarray(actions, dtype=float), label, mode, initial)


def generate_dataset(n_success, n_failure, failure_mix=None, rng_seed=0, max_retries=20,
                     dataset_path=""):
    """Scripted successes and perturbed failures, relabeled by outcome.

    ``failure_mix`` maps failure mode to its share; counts per mode are
    apportioned deterministically (largest remainder). Each demo draws from
    its own RNG stream keyed by ``(rng_seed, index)``.
    """
    if n_success < 0 or n_failure < 0:
        raise ConfigError("demo counts must be >= 0")
    mix = failure_mix or {m: 1 / len(FAILURE_MODES) for m in FAILURE_MODES}
    if any(m not in FAILURE_MODES for m in mix) or abs(sum(mix.values()) - 1) > 1e-9:
        raise ConfigError(f"failure_mix must use modes {FAILURE_MODES} and sum to 1")
    modes = _apportion(n_failure, mix)
    demos = []
    for i in range(n_success):
        rng = np.random.default_rng([rng_seed, i])
        init = sample_initial_state(rng)
        demo = _make_demo(f"s{i:03d}", init, scripted_actions(init, "none", rng), "none")
        if demo.label != SUCCESS:
            raise IntegrityError(f"scripted success failed from {init}")
        demos.append(demo)
    for j, mode in enumerate(modes):
        rng = np.random.default_rng([rng_seed, n_success + j])
        for _ in range(max_retries):
            init = sample_initial_state(rng)
            demo = _make_demo(f"f{j:03d}", init, scripted_actions(init, mode, rng), mode)
            if demo.label == FAILURE:
                break
        else:
            raise IntegrityError(f"could not produce a {mode} failure in {max_retries} tries")
        demos.append(demo)
    manifest = DatasetManifest(
        "full", dataset_path,
        [d.demo_id for d in demos if d.label == SUCCESS],
        [d.demo_id for d in demos if d.label == FAILURE],
        "full", {"generator_seed": rng_seed, "failure_mix": dict(sorted(mix.items()))},
    )
    return demos, manifest


def _apportion(n, mix):
    names = [m for m in FAILURE_MODES if m in mix]
    raw = [n * mix[m] for m in names]
    counts = [int(np.floor(r)) for r in raw]
    order = sorted(range(len(names)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    out = []
    for m, c in zip(names, counts):
        out.extend([m] * c)
    return out


def save_demos(path, demos):
    lines = [json.dumps({"format_version": DATASET_FORMAT_VERSION, **d.to_record()}, sort_keys=True)
             for d in demos]
    Path(path).write_text("\n".join(lines) + "\n")


def load_demos(path):
    path = Path(path)
    if not path.exists():
        raise IntegrityError(f"demonstration file {path} not found")
    demos = {}
    for line in path.read_text().splitlines():
        if line.strip():
            r = json.loads(line)
            if r.pop("format_version", None) != DATASET_FORMAT_VERSION:
                raise IntegrityError(f"{path}: unsupported demonstration format")
            d = Demonstration.from_record(r)
            demos[d.demo_id] = d
    return demos


def resolve_manifest(manifest, demos=None):
    """Demonstrations named by ``manifest``, in manifest order; fails on any gap."""
    demos = load_demos(manifest.dataset) if demos is None else demos
    missing = [i for i in manifest.demo_ids if i not in demos]
    if missing:
        raise IntegrityError(f"manifest {manifest.name!r} references missing demos {missing[:5]}")
    out = [demos[i] for i in manifest.demo_ids]
    for d in out:
        want = SUCCESS if d.demo_id in manifest.success_ids else FAILURE
        if d.label != want:
            raise IntegrityError(f"demo {d.demo_id} is {d.label} but listed as {want}")
    return out


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
