"""Joint optimization of policy weights and the PB table."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .attention import FAILURE, SUCCESS, PBTable, sample_negative_positions
from .autodiff import Tensor
from .env import DatasetManifest, resolve_manifest
from .errors import ConfigError, DivergenceAbort
from .losses import EPS, LossBreakdown, trace_divergence_tensor, write_metrics_csv
from .model import Policy, PolicyConfig, save_checkpoint

log = logging.getLogger(__name__)

KL_ABORT = 1e3


class AdamW:
    """Adam with decoupled weight decay.

    The PB table is updated lazily: only rows that appeared in the step's
    graph move, each with its own step count, and it never decays.
    """

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, betas[0], betas[1], eps, weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        c1, c2 = 1 - self.b1 ** self.t, 1 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.wd and p.data.ndim >= 2:
                p.data *= 1 - self.lr * self.wd
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SparseRowAdam:
    def __init__(self, table_param, lr, betas=(0.9, 0.999), eps=1e-8):
        self.p = table_param
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = np.zeros_like(table_param.data)
        self.v = np.zeros_like(table_param.data)
        self.t = np.zeros(table_param.data.shape[0], dtype=np.int64)

    def step(self, rows):
        if self.p.grad is None:
            return
        rows = np.unique(rows)
        g = self.p.grad[rows]
        self.t[rows] += 1
        t = self.t[rows].reshape(-1, *([1] * (g.ndim - 1)))
        self.m[rows] = self.b1 * self.m[rows] + (1 - self.b1) * g
        self.v[rows] = self.b2 * self.v[rows] + (1 - self.b2) * g * g
        mhat = self.m[rows] / (1 - self.b1 ** t)
        vhat = self.v[rows] / (1 - self.b2 ** t)
        self.p.data[rows] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainRunRecord:
    run_id: str
    manifest: str
    config: PolicyConfig
    seed: int
    history: list = field(default_factory=list)
    checkpoint: str | None = None
    duration: float = 0.0
    separation: list = field(default_factory=list)  # (epoch, mean D_sym success vs failure PBs)
    clipped_steps: int = 0
    negative_log: list = field(default_factory=list)
    policy: Policy | None = field(default=None, repr=False)
    pb_table: PBTable | None = field(default=None, repr=False)

    def summary(self):
        return {
            "run_id": self.run_id, "manifest": self.manifest, "seed": self.seed,
            "config": self.config.to_dict(), "epochs": len(self.history),
            "final": vars(self.history[-1]) if self.history else None,
            "checkpoint": self.checkpoint, "duration": round(self.duration, 3),
            "separation": self.separation, "clipped_steps": self.clipped_steps,
        }


def chunk_targets(actions, length):
    """``[T, L, A]`` action chunks starting at every step, zero-padded past the end."""
    T, a = actions.shape
    padded = np.concatenate([actions, np.zeros((length, a))], axis=0)
    return np.stack([padded[t:t + length] for t in range(T)])


def chunk_mask(n_steps, task_end, length):
    """``[T, L]`` with 1 where the chunk slot falls inside the task, 0 on padding."""
    idx = np.arange(n_steps)[:, None] + np.arange(length)[None, :]
    return (idx < task_end).astype(float)


def pb_separation(policy, table, probe_obs):
    """Mean attention divergence between every success PB and every failure PB on ``probe_obs``.

    Uses ``mean_{s,f} (p_s - q_f)(log p_s - log q_f)``, which expands into
    per-set sums, so the cost is linear in the number of PBs.
    """
    succ = table.ids_with_label(SUCCESS)
    fail = table.ids_with_label(FAILURE)
    if not succ or not fail or not policy.config.pb_active:
        return 0.0
    probe = np.atleast_2d(probe_obs)
    n = probe.shape[0]

    def stats(ids):
        acc = None
        for d in ids:
            pb = np.broadcast_to(table.array(d), (n, *table.array(d).shape))
            for li, p in enumerate(policy.attention_maps(probe, pb)):
                lp = np.log(p + EPS)
                cur = (p, lp, p * lp)
                if acc is None:
                    acc = [[np.zeros_like(p) for _ in range(3)] for _ in range(policy.config.n_decoder_layers)]
                for k in range(3):
                    acc[li][k] += cur[k]
        return acc

    S, F = stats(succ), stats(fail)
    ns, nf = len(succ), len(fail)
    per_layer = []
    for (sp, slp, splp), (fq, flq, fqlq) in zip(S, F):
        cross = nf * splp + ns * fqlq - sp * flq - fq * slp
        rows = 0.5 * cross.sum(axis=-1) / (ns * nf)
        per_layer.append(rows.mean())
    return float(np.mean(per_layer))


def _clip_grads(tensors, max_norm):
    total = np.sqrt(sum(float(np.sum(t.grad * t.grad)) for t in tensors if t.grad is not None))
    if max_norm and total > max_norm:
        s = max_norm / (total + 1e-12)
        for t in tensors:
            if t.grad is not None:
                t.grad *= s
        return True
    return False


def train(*args, **kwargs):
    # tiny matrices: BLAS threading only adds overhead
    with threadpool_limits(1):
        return _train(*args, **kwargs)


def _train(manifest, config, demos=None, out_dir=None, probe_obs=None, probe_every=0,
           log_negatives=False, run_id=None, on_step=None):
    """Train a fresh policy and zero PB table on the manifest's demonstrations.

    Each step draws one random time index per batch element, predicts the
    action chunk with the element's own PB (``act_loss``), reruns the decoder
    with a random opposite-label PB on the same observation, and subtracts
    ``lambda_kl`` times the symmetric attention KL. The KL term is dropped
    when one label class is missing or PBs are disabled. ``on_step(epoch,
    rows, table)`` is called after every update with the PB rows it touched.
    """
    t0 = time.perf_counter()
    if not manifest.demo_ids:
        raise ConfigError(f"manifest {manifest.name!r} is empty")
    data = resolve_manifest(manifest, demos)
    c = config
    seeds = np.random.SeedSequence(c.seed).spawn(3)
    init_rng, batch_rng, neg_rng = (np.random.default_rng(s) for s in seeds)

    policy = Policy(c, init_rng)
    all_obs = np.concatenate([d.observations for d in data])
    all_act = np.concatenate([d.actions for d in data])
    policy.set_normalization(all_obs.mean(0), all_obs.std(0), all_act.mean(0), all_act.std(0))
    obs_n = [policy.normalize_obs(d.observations) for d in data]
    tgt_n = [policy.normalize_actions(chunk_targets(d.actions, c.chunk_length)) for d in data]
    # padded tails are ignored: no chunk starts there and padded slots carry no loss
    ends = [d.task_end if c.mask_padding else len(d.actions) for d in data]
    masks = [chunk_mask(len(d.actions), e, c.chunk_length) for d, e in zip(data, ends)]

    table = PBTable([d.demo_id for d in data], [d.label for d in data], c.chunk_length, c.d_pb)
    labels = set(table.labels)
    use_pb = c.pb_active
    kl_on = use_pb and c.lambda_kl > 0 and labels == {SUCCESS, FAILURE}
    lam = c.lambda_kl if kl_on else 0.0

    opt = AdamW(policy.params, c.lr, weight_decay=c.weight_decay)
    pb_opt = SparseRowAdam(table.param, c.pb_lr) if use_pb else None
    record = TrainRunRecord(run_id or f"{manifest.name}-seed{c.seed}", manifest.name, c, c.seed)
    if probe_obs is None:
        probe_obs = np.stack([d.observations[0] for d in data])
    if use_pb:
        record.separation.append((0, pb_separation(policy, table, probe_obs)))

    n = len(data)
    for epoch in range(c.epochs):
        order = batch_rng.permutation(n)
        sums = np.zeros(3)
        steps = 0
        for start in range(0, n, c.batch_size):
            pos = order[start:start + c.batch_size]
            ts = [int(batch_rng.integers(ends[i])) for i in pos]
            obs = Tensor(np.stack([obs_n[i][t] for i, t in zip(pos, ts)]))
            target = np.stack([tgt_n[i][t] for i, t in zip(pos, ts)])
            mask = np.stack([masks[i][t] for i, t in zip(pos, ts)])
            weight = np.repeat(mask[:, :, None], c.action_dim, axis=2)
            weight = Tensor(weight / weight.sum())

            memory = policy.encode(obs)
            pb_pos = table.gather(pos) if use_pb else None
            pred, w_pos = policy.decode(memory, pb_pos)
            err = pred - Tensor(target)
            per = ad.abs_(err) if c.act_loss == "l1" else err * err
            l_act = ad.sum_(per * weight)
            rows = pos
            if kl_on:
                neg = sample_negative_positions(table, pos, neg_rng)
                if log_negatives:
                    record.negative_log.extend(
                        (table.demo_ids[p], table.demo_ids[q]) for p, q in zip(pos, neg))
                _, w_neg = policy.decode(memory, table.gather(neg), with_head=False)
                l_kl = ad.neg(trace_divergence_tensor(w_pos, w_neg))
                loss = l_act + ad.scale(l_kl, lam)
                rows = np.concatenate([pos, neg])
                l_kl_val = float(l_kl.data)
                if not np.isfinite(l_kl_val) or abs(l_kl_val) > KL_ABORT:
                    raise DivergenceAbort(
                        f"|l_kl|={abs(l_kl_val):.3g} exceeds {KL_ABORT:g} at epoch {epoch} (seed {c.seed})")
            else:
                loss = l_act
                l_kl_val = 0.0

            for p in policy.params.values():
                p.grad = None
            table.param.grad = None
            ad.backward(loss)
            tensors = list(policy.params.values()) + ([table.param] if use_pb else [])
            if _clip_grads(tensors, c.grad_clip):
                record.clipped_steps += 1
            opt.step()
            if use_pb:
                pb_opt.step(rows)
            if on_step is not None:
                on_step(epoch, np.unique(rows), table)
            sums += (float(l_act.data), l_kl_val, float(loss.data))
            steps += 1
        la, lk, _ = sums / steps
        record.history.append(LossBreakdown(float(la), float(lk), float(la + lam * lk), float(lam)))
        if use_pb and probe_every and (epoch + 1) % probe_every == 0:
            record.separation.append((epoch + 1, pb_separation(policy, table, probe_obs)))

    if use_pb and (not record.separation or record.separation[-1][0] != c.epochs):
        record.separation.append((c.epochs, pb_separation(policy, table, probe_obs)))
    for p in policy.params.values():
        p.grad = None
    table.param.grad = None
    record.policy, record.pb_table = policy, table
    record.duration = time.perf_counter() - t0
    if record.clipped_steps:
        log.info("%s: gradient clipping active on %d steps", record.run_id, record.clipped_steps)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        record.checkpoint = str(save_checkpoint(out / "checkpoint.npz", policy, table, c.seed))
        write_metrics_csv(out / "metrics.csv", record.history)
        (out / "run.json").write_text(json.dumps(record.summary(), indent=1, sort_keys=True))
    return record


def train_multi_seed(manifest, config, seeds, demos=None, out_dir=None, **kw):
    """Independent runs of :func:`train`, one per seed, returned in seed order."""
    seeds = list(seeds)
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")
    records = []
    for s in seeds:
        sub = None if out_dir is None else Path(out_dir) / f"seed{s}"
        try:
            records.append(train(manifest, config.replace(seed=s), demos, sub, **kw))
        except Exception as exc:
            raise type(exc)(f"seed {s}: {exc}") from exc
    return records
