"""Inference-time PB retrieval, rollout evaluation, PCA and report files."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import SUCCESS
from .env import EPISODE_LENGTH, is_success, sample_initial_state, step
from .errors import ConfigError, MissingPBError


# ------------------------------------------------------------------ retrieval


@dataclass
class EmbeddingIndex:
    demo_ids: list
    embeddings: np.ndarray  # [n, dim], unit rows

    def __len__(self):
        return len(self.demo_ids)


def embed(obs):
    obs = np.asarray(obs, dtype=float)
    n = np.linalg.norm(obs)
    if n == 0:
        raise ValueError("cannot normalize a zero observation")
    return obs / n


def build_index(success_demos):
    """Unit-norm initial observations of the given success demonstrations."""
    demos = list(success_demos)
    if not demos:
        raise ConfigError("index needs at least one success demonstration")
    bad = [d.demo_id for d in demos if d.label != SUCCESS]
    if bad:
        raise ConfigError(f"index accepts success demos only, got {bad[:5]}")
    return EmbeddingIndex([d.demo_id for d in demos], np.stack([embed(d.observations[0]) for d in demos]))


def nearest(index, initial_obs):
    """``(demo_id, cosine similarity)`` of the best match; ties go to the smallest id."""
    if not len(index):
        raise ConfigError("empty index")
    sims = index.embeddings @ embed(initial_obs)
    best = sims.max()
    winner = min(i for i, s in zip(index.demo_ids, sims) if s == best)
    return winner, float(best)


def retrieve_pb(initial_obs, index, pb_table):
    demo_id, sim = nearest(index, initial_obs)
    if demo_id not in pb_table:
        raise MissingPBError(f"no PB for retrieved demo {demo_id!r}")
    if pb_table.label_of(demo_id) != SUCCESS:
        raise AssertionError(f"retrieved PB {demo_id!r} is not success-labeled")
    return demo_id, pb_table.lookup(demo_id), sim


# ------------------------------------------------------------------ rollouts


def rollout(policy, pb, initial_state, max_steps=EPISODE_LENGTH):
    """Execute predicted chunks open-loop, replanning every chunk.

    ``pb`` is a ``[L, d_pb]`` array (or ``None``). Returns ``(success,
    states)``; the episode stops as soon as the lift threshold is crossed.
    """
    outcomes, trajs = rollout_batch(policy, None if pb is None else [pb], [initial_state], max_steps)
    return outcomes[0], trajs[0]


def rollout_batch(policy, pbs, initial_states, max_steps=EPISODE_LENGTH):
    """Vectorized :func:`rollout` over several independent episodes."""
    if max_steps < 1:
        raise ConfigError("max_steps must be >= 1")
    n = len(initial_states)
    states = list(initial_states)
    trajs = [[s] for s in states]
    done = [is_success(s) for s in states]
    pb_arr = None if pbs is None else np.stack([np.asarray(p, dtype=float) for p in pbs])
    t = 0
    while t < max_steps and not all(done):
        obs = np.stack([s.observation() for s in states])
        chunks = policy.predict(obs, pb_arr)
        for j in range(chunks.shape[1]):
            if t >= max_steps:
                break
            for i in range(n):
                if done[i]:
                    continue
                states[i] = step(states[i], chunks[i, j])
                trajs[i].append(states[i])
                if is_success(states[i]):
                    done[i] = True
            t += 1
    return done, trajs


def initial_states(n, env_seed_base):
    return [sample_initial_state(np.random.default_rng([env_seed_base, i])) for i in range(n)]


def sample_std(values):
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


@dataclass
class EvalReport:
    condition: str
    seeds: list
    n_rollouts: int
    rates: list  # per seed, in [0, 1]
    checkpoints: list = field(default_factory=list)
    rollouts: list = field(default_factory=list)
    model: str = ""
    dataset: str = ""

    @property
    def mean(self):
        return float(np.mean(self.rates))

    @property
    def std(self):
        return sample_std(self.rates)

    def cell(self):
        return f"{100 * self.mean:.1f} ± {100 * self.std:.2f}"


def evaluate(checkpoints_by_seed, n_rollouts, env_seed_base, demos=None, condition="",
             max_steps=EPISODE_LENGTH, model="", dataset=""):
    """Success rate per seed on a shared sequence of initial states.

    PB-enabled checkpoints retrieve the PB of the nearest success demo
    (``demos`` maps id to demonstration); others run without bias.
    """
    if n_rollouts < 1:
        raise ConfigError("n_rollouts must be >= 1")
    starts = initial_states(n_rollouts, env_seed_base)
    report = EvalReport(condition, sorted(checkpoints_by_seed), n_rollouts, [], model=model, dataset=dataset)
    for seed in report.seeds:
        ck = checkpoints_by_seed[seed]
        policy, table = ck.policy, ck.pb_table
        report.checkpoints.append(str(ck.path) if ck.path else "")
        picks = [(None, None, float("nan"))] * n_rollouts
        pbs = None
        if policy.config.pb_active:
            if demos is None:
                raise ConfigError("PB retrieval needs the training demonstrations")
            index = build_index(demos[d] for d in table.ids_with_label(SUCCESS))
            picks = []
            for s in starts:
                demo_id, pb, sim = retrieve_pb(s.observation(), index, table)
                assert table.label_of(demo_id) == SUCCESS
                picks.append((demo_id, pb.matrix.data, sim))
            pbs = [p[1] for p in picks]
        outcomes, trajs = rollout_batch(policy, pbs, starts, max_steps)
        report.rates.append(float(np.mean(outcomes)))
        for i, (s, ok, pick, tr) in enumerate(zip(starts, outcomes, picks, trajs)):
            report.rollouts.append({
                "seed": seed, "index": i, "initial_state": s.to_dict(),
                "retrieved": pick[0], "similarity": pick[2],
                "success": bool(ok), "steps": len(tr) - 1,
            })
    return report


# ------------------------------------------------------------------ PCA


@dataclass
class PCAResult:
    ids: list
    points: np.ndarray  # [n, k]
    explained_variance_ratio: np.ndarray
    components: np.ndarray  # [k, dim]
    mean: np.ndarray

    def pairs(self):
        return list(zip(self.ids, self.points))

    def inverse_transform(self, points=None):
        pts = self.points if points is None else np.asarray(points)
        return pts @ self.components + self.mean


def pca_project(vectors, k=2):
    """Project ``(id, vector)`` pairs onto the top-``k`` principal axes.

    Axes come from the eigendecomposition of the sample covariance, sorted
    by decreasing eigenvalue; each axis is signed so its largest-magnitude
    loading is positive.
    """
    ids = [v[0] for v in vectors]
    X = np.stack([np.asarray(v[1], dtype=float).reshape(-1) for v in vectors])
    if X.shape[0] < 2:
        raise ConfigError("PCA needs at least two vectors")
    if k > X.shape[1]:
        raise ConfigError(f"k={k} exceeds vector dimension {X.shape[1]}")
    mu = X.mean(axis=0)
    Xc = X - mu
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order].T
    for row in evecs:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1
    total = evals.sum()
    ratios = evals / total if total > 0 else np.zeros_like(evals)
    comps = evecs[:k]
    return PCAResult(ids, Xc @ comps.T, ratios[:k], comps, mu)


@dataclass
class PCAPlot:
    """A PCA scatter to emit: point groups, optional scalar shading and links."""

    name: str
    result: PCAResult
    groups: dict  # id -> group name
    values: dict = field(default_factory=dict)  # id -> scalar for shading
    links: list = field(default_factory=list)  # (from id, to id)


# ------------------------------------------------------------------ reports

_W, _H, _PAD = 480, 360, 40
_PALETTE = {"success": "#d62728", "failure": "#1f77b4", "query": "#2ca02c"}


def _fmt(x):
    return f"{x:.4f}"


def _svg(body, title):
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
            f'viewBox="0 0 {_W} {_H}">\n<rect width="{_W}" height="{_H}" fill="white"/>\n'
            f'<text x="{_W // 2}" y="20" text-anchor="middle" font-size="14">{title}</text>\n')
    return head + "\n".join(body) + "\n</svg>\n"


def _scale(vals, lo_px, hi_px):
    lo, hi = float(np.min(vals)), float(np.max(vals))
    span = hi - lo if hi > lo else 1.0
    return [lo_px + (v - lo) / span * (hi_px - lo_px) for v in vals]


def _shade(t):
    # blue -> green as t goes 0 -> 1
    t = min(max(t, 0.0), 1.0)
    return "#%02x%02x%02x" % (int(31 + t * (44 - 31)), int(119 + t * (160 - 119)), int(180 + t * (44 - 180)))


def scatter_svg(plot):
    pts = plot.result.points
    xs = _scale(pts[:, 0], _PAD, _W - _PAD)
    ys = _scale(pts[:, 1] if pts.shape[1] > 1 else np.zeros(len(pts)), _H - _PAD, _PAD)
    pos = {i: (x, y) for i, x, y in zip(plot.result.ids, xs, ys)}
    vals = [plot.values[i] for i in plot.result.ids if i in plot.values]
    vlo, vhi = (min(vals), max(vals)) if vals else (0.0, 1.0)
    body = []
    for a, b in plot.links:
        (x1, y1), (x2, y2) = pos[a], pos[b]
        body.append(f'<line x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" y2="{_fmt(y2)}" '
                    f'stroke="#888888" stroke-width="1"/>')
    for i in plot.result.ids:
        x, y = pos[i]
        g = plot.groups.get(i, "failure")
        color = _PALETTE.get(g, "#7f7f7f")
        if g == "failure" and i in plot.values:
            color = _shade((plot.values[i] - vlo) / (vhi - vlo) if vhi > vlo else 0.0)
        body.append(f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="4" fill="{color}"><title>{i}</title></circle>')
    return _svg(body, f"{plot.name} (PCA)")


def bar_svg(values, title):
    n = max(len(values), 1)
    top = max(values) if values else 1.0
    top = top if top > 0 else 1.0
    bw = (_W - 2 * _PAD) / n
    body = []
    for j, v in enumerate(values):
        h = (v / top) * (_H - 2 * _PAD)
        body.append(f'<rect x="{_fmt(_PAD + j * bw)}" y="{_fmt(_H - _PAD - h)}" width="{_fmt(bw * 0.9)}" '
                    f'height="{_fmt(h)}" fill="{_shade(j / max(n - 1, 1))}"/>')
    return _svg(body, title)


def emit_report(eval_reports, scores, pca_outputs, out_dir):
    """Write the success-rate table, K-bar ranking and PCA scatters; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    max_seeds = max((len(r.seeds) for r in eval_reports), default=0)
    path = out / "success_rates.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["condition", "model", "dataset", "n_rollouts"]
                   + [f"rate_{j}" for j in range(max_seeds)] + ["mean", "std", "cell"])
        for r in eval_reports:
            rates = [f"{x:.4f}" for x in r.rates] + [""] * (max_seeds - len(r.rates))
            w.writerow([r.condition, r.model, r.dataset, r.n_rollouts, *rates,
                        f"{r.mean:.6f}", f"{r.std:.6f}", r.cell()])
    written.append(path)
    if scores:
        ranked = sorted(scores, key=lambda s: s.rank)
        lo = ranked[0].mean
        path = out / "kl_ranking.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", "demo_id", "mean", "relative_to_min"])
            for s in ranked:
                w.writerow([s.rank, s.demo_id, repr(float(s.mean)), repr(float(s.mean - lo))])
        written.append(path)
        path = out / "kl_ranking.svg"
        path.write_text(bar_svg([s.mean - lo for s in ranked], "K-bar relative to minimum (ascending)"))
        written.append(path)
    for plot in pca_outputs or []:
        path = out / f"{plot.name}_pca.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            k = plot.result.points.shape[1]
            w.writerow(["id", "group", "value"] + [f"pc{j + 1}" for j in range(k)])
            for i, p in plot.result.pairs():
                v = plot.values.get(i)
                w.writerow([i, plot.groups.get(i, ""), "" if v is None else repr(float(v))]
                           + [f"{x:.6f}" for x in p])
        written.append(path)
        path = out / f"{plot.name}_pca.svg"
        path.write_text(scatter_svg(plot))
        written.append(path)
    return written


def paired(report_a, report_b):
    """True when two reports were evaluated on the same initial states."""
    key = lambda r: [(x["index"], tuple(sorted(x["initial_state"].items()))) for x in r.rollouts if x["seed"] == r.seeds[0]]
    return report_a.n_rollouts == report_b.n_rollouts and key(report_a) == key(report_b)

