"""Divergences between attention distributions and the training objective."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import AttentionTrace
from .errors import ConfigError, ShapeError

EPS = 1e-8
METRIC_COLUMNS = ("epoch", "l_act", "l_kl", "total", "lambda_kl")


def _as_dist(p):
    p = np.asarray(p, dtype=np.float64)
    return p / p.sum(axis=-1, keepdims=True)


def kl_divergence(p, q, eps=EPS):
    """``sum p * ln((p + eps) / (q + eps))`` over the last axis, after renormalizing."""
    p, q = np.asarray(p), np.asarray(q)
    if p.shape != q.shape:
        raise ShapeError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    p, q = _as_dist(p), _as_dist(q)
    return np.sum(p * (np.log(p + eps) - np.log(q + eps)), axis=-1)


def sym_kl(p, q, eps=EPS):
    return 0.5 * (kl_divergence(p, q, eps) + kl_divergence(q, p, eps))


def _layers(trace):
    return trace.layers if isinstance(trace, AttentionTrace) else list(trace)


def trace_divergence(a_pos, a_neg):
    """Symmetric KL per attention row, averaged over rows, heads, then layers.

    Accepts :class:`AttentionTrace` objects or lists of ``[heads, L, L]``
    arrays. Extra leading axes (a batch) are kept: the result then has the
    batch shape.
    """
    pos, neg = _layers(a_pos), _layers(a_neg)
    if len(pos) != len(neg):
        raise ShapeError("traces have different layer counts")
    per_layer = []
    for p, q in zip(pos, neg):
        if np.shape(p) != np.shape(q):
            raise ShapeError(f"trace layer shapes differ: {np.shape(p)} vs {np.shape(q)}")
        rows = sym_kl(p, q)  # [..., heads, L]
        per_layer.append(rows.mean(axis=-1).mean(axis=-1))
    return np.mean(per_layer, axis=0)


def kl_regularizer(a_pos, a_neg):
    return -trace_divergence(a_pos, a_neg)


def trace_divergence_tensor(pos_weights, neg_weights):
    """Differentiable batch-mean of :func:`trace_divergence`.

    Inputs are per-layer Tensors ``[B, heads, L, L]``. Rows are softmax
    outputs, so no renormalization is applied.
    """
    total = None
    for p, q in zip(pos_weights, neg_weights):
        lp = ad.log(p + EPS)
        lq = ad.log(q + EPS)
        d = ad.scale(ad.mean(ad.sum_((p - q) * (lp - lq), axis=-1)), 0.5)
        total = d if total is None else total + d
    return ad.scale(total, 1.0 / len(pos_weights))


@dataclass
class LossBreakdown:
    l_act: float
    l_kl: float
    total: float
    lambda_kl: float


def total_loss(l_act, l_kl, lambda_kl):
    """Combine imitation loss and KL regularizer; works on floats or Tensors.

    Returns a :class:`LossBreakdown` for floats, a scalar Tensor otherwise.
    """
    if lambda_kl < 0:
        raise ConfigError("lambda_kl must be >= 0")
    if isinstance(l_act, ad.Tensor):
        if lambda_kl == 0 or l_kl is None:
            return l_act
        return l_act + ad.scale(l_kl, lambda_kl)
    return LossBreakdown(float(l_act), float(l_kl), float(l_act + lambda_kl * l_kl), float(lambda_kl))


def write_metrics_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for epoch, b in enumerate(history):
            w.writerow([epoch, *(repr(float(x)) for x in (b.l_act, b.l_kl, b.total, b.lambda_kl))])


def read_metrics_csv(path):
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [LossBreakdown(float(r["l_act"]), float(r["l_kl"]), float(r["total"]), float(r["lambda_kl"]))
            for r in rows]
