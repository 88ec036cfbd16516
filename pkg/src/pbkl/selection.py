"""Failure scoring with PB attention divergence, ranking and subset selection."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attention import FAILURE, SUCCESS
from .env import DatasetManifest, load_demos
from .errors import ConfigError, IntegrityError
from .losses import trace_divergence

log = logging.getLogger(__name__)

STRATEGIES = ("random", "kl_low", "kl_mid", "kl_high")
PLAN_FORMAT = "pbkl-selection-plan"


@dataclass
class FailureScore:
    demo_id: str
    per_seed: dict  # seed -> K(f)
    mean: float
    rank: int = 0
    failure_mode: str = ""


@dataclass
class SelectionPlan:
    strategy: str
    subset_size: int
    selected: list
    scores_sha256: str = ""
    rng_seed: int | None = None
    subset_index: int = 0

    def to_json(self):
        return json.dumps({"format": PLAN_FORMAT, **asdict(self)}, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        if d.pop("format", None) != PLAN_FORMAT:
            raise IntegrityError("not a selection plan")
        return cls(**d)

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())


def window_starts(n_steps, length):
    """Chunk-window starts ``0, L, 2L, ...`` inside an ``n_steps`` sequence."""
    return list(range(0, n_steps, length))


def score_failure(failure, checkpoint, success_ids=None):
    """K(f): per success PB, the window-averaged divergence against ``PB_f``; summed over successes.

    The policy runs on ``failure``'s observations at every chunk-window
    start, once with the failure's own PB and once with each success PB.
    Successes are visited in ``success_ids`` order (default: table order),
    so the float sum is reproducible.
    """
    table = checkpoint.pb_table
    if table is None:
        raise ConfigError("checkpoint has no PB table; train with PBs enabled to score failures")
    if failure.label != FAILURE:
        raise ConfigError(f"demo {failure.demo_id} is not a failure")
    own = table.array(failure.demo_id)  # raises MissingPBError
    succ = table.ids_with_label(SUCCESS) if success_ids is None else list(success_ids)
    if not succ:
        raise ConfigError("no success demonstrations to score against")
    policy = checkpoint.policy
    obs = failure.observations[window_starts(len(failure.observations), policy.config.chunk_length)]
    n = len(obs)
    pos = policy.attention_maps(obs, np.broadcast_to(own, (n, *own.shape)))
    stacked_obs = np.tile(obs, (len(succ), 1))
    stacked_pb = np.repeat(np.stack([table.array(s) for s in succ]), n, axis=0)
    neg = policy.attention_maps(stacked_obs, stacked_pb)
    pos_rep = [np.tile(p, (len(succ), 1, 1, 1)) for p in pos]
    per_step = trace_divergence(pos_rep, neg).reshape(len(succ), n)
    total = 0.0
    for row in per_step:
        total += float(row.mean())
    return total


def score_all(failures, checkpoints_by_seed, seeds=None):
    """Per-seed K(f), its mean over seeds, and ascending ranks (ties by demo_id)."""
    seeds = sorted(checkpoints_by_seed) if seeds is None else list(seeds)
    for s in seeds:
        if checkpoints_by_seed.get(s) is None:
            raise IntegrityError(f"no checkpoint for seed {s}")
    scores = []
    for f in failures:
        per = {s: score_failure(f, checkpoints_by_seed[s]) for s in seeds}
        mean = sum(per[s] for s in seeds) / len(seeds)
        scores.append(FailureScore(f.demo_id, per, mean, 0, getattr(f, "failure_mode", "")))
    return rank_scores(scores)


def rank_scores(scores):
    ordered = sorted(scores, key=lambda s: (s.mean, s.demo_id))
    for r, s in enumerate(ordered, start=1):
        s.rank = r
    return ordered


def mid_window(n_total, n):
    """1-based ranks of the size-``n`` window centred on the median."""
    start = -(-(n_total - n) // 2) + 1
    return list(range(start, start + n))


def build_plan(scores, strategy, subset_size, rng_seed=None, subset_index=0, scores_sha256=""):
    """Failure ids for one selection strategy.

    ``random`` shuffles the ids with ``rng_seed`` and splits them into
    disjoint blocks of ``subset_size``; ``subset_index`` picks the block.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    ranked = sorted(scores, key=lambda s: s.rank)
    n_total, n = len(ranked), int(subset_size)
    if n < 0 or n > n_total:
        raise ConfigError(f"subset_size {n} must be between 0 and {n_total}")
    if n == 0:
        log.warning("subset_size 0: the plan selects no failures")
    if strategy == "kl_low":
        chosen = ranked[:n]
    elif strategy == "kl_high":
        chosen = ranked[n_total - n:]
    elif strategy == "kl_mid":
        chosen = [ranked[r - 1] for r in mid_window(n_total, n)]
    else:
        if rng_seed is None:
            raise ConfigError("random strategy needs rng_seed")
        ids = sorted(s.demo_id for s in ranked)
        perm = np.random.default_rng(rng_seed).permutation(len(ids))
        blocks = n_total // n if n else 1
        if not 0 <= subset_index < blocks:
            raise ConfigError(f"subset_index {subset_index} outside 0..{blocks - 1}")
        picked = [ids[i] for i in perm[subset_index * n:(subset_index + 1) * n]]
        return SelectionPlan(strategy, n, picked, scores_sha256, int(rng_seed), int(subset_index))
    return SelectionPlan(strategy, n, [s.demo_id for s in chosen], scores_sha256, None, 0)


def reconstruct_manifest(base, plan, demos=None, name=None):
    """All successes of ``base`` plus the plan's failures, with provenance attached."""
    overlap = set(base.success_ids) & set(plan.selected)
    if overlap:
        raise IntegrityError(f"plan ids overlap the success set: {sorted(overlap)[:5]}")
    if demos is None:
        demos = load_demos(base.dataset)
    missing = [i for i in list(base.success_ids) + list(plan.selected) if i not in demos]
    if missing:
        raise IntegrityError(f"demos missing from the dataset: {missing[:5]}")
    wrong = [i for i in plan.selected if demos[i].label != FAILURE]
    if wrong:
        raise IntegrityError(f"plan selects non-failure demos: {wrong[:5]}")
    tag = plan.strategy if plan.strategy != "random" else f"random{plan.subset_index}"
    prov = dict(base.provenance)
    prov.update({"plan": asdict(plan), "scores_sha256": plan.scores_sha256})
    return DatasetManifest(name or f"{tag}-{plan.subset_size}", base.dataset, list(base.success_ids),
                           list(plan.selected), plan.strategy, prov)


# ------------------------------------------------------------------ files


def write_scores_csv(path, scores):
    scores = sorted(scores, key=lambda s: s.rank)
    seeds = sorted({s for sc in scores for s in sc.per_seed})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["demo_id", *[f"K_seed_{s}" for s in seeds], "mean", "rank", "failure_mode"])
        for sc in scores:
            w.writerow([sc.demo_id, *[repr(float(sc.per_seed[s])) for s in seeds],
                        repr(float(sc.mean)), sc.rank, sc.failure_mode])
    return Path(path)


def read_scores_csv(path):
    path = Path(path)
    if not path.exists():
        raise IntegrityError(f"scores file {path} not found")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        per = {int(k[len("K_seed_"):]): float(v) for k, v in r.items() if k.startswith("K_seed_")}
        out.append(FailureScore(r["demo_id"], per, float(r["mean"]), int(r["rank"]), r.get("failure_mode", "")))
    return out


def scores_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def mode_means(scores):
    """Mean K-bar per failure mode."""
    groups = {}
    for s in scores:
        groups.setdefault(s.failure_mode, []).append(s.mean)
    return {m: float(np.mean(v)) for m, v in sorted(groups.items())}
