"""Self-attention with per-demonstration parametric bias (PB).

A PB is a zero-initialized ``[L, d_pb]`` matrix owned by one demonstration.
Each decoder layer projects it to query and value offsets::

    softmax((Q + a * PB @ w_q) K^T / sqrt(d_k)) (V + a * PB @ w_v)

The offsets are formed in full model width and then split across heads.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import MissingPBError, NegativeUnavailableError, ShapeError

SUCCESS = "success"
FAILURE = "failure"
PB_TABLE_FORMAT = "pbkl-pb-table"
PB_TABLE_VERSION = 1


def opposite(label):
    if label == SUCCESS:
        return FAILURE
    if label == FAILURE:
        return SUCCESS
    raise ValueError(f"unknown label {label!r}")


@dataclass
class ParametricBias:
    demo_id: str
    label: str
    matrix: Tensor  # [L, d_pb]
    trainable: bool = True


@dataclass
class PBProjection:
    layer_index: int
    w_q: Tensor  # [d_pb, d_model]
    w_v: Tensor  # [d_pb, d_model]
    alpha_pb: float = 0.1


@dataclass
class AttentionTrace:
    """Decoder self-attention maps of one forward pass.

    ``layers[i]`` has shape ``[heads, L, L]``; every row is a distribution
    over key positions.
    """

    layers: list
    demo_id: str | None = None
    polarity: str = "positive"

    @property
    def structure(self):
        return tuple(np.shape(a) for a in self.layers)


class PBTable:
    """All PBs of one training run, stored as a single ``[N, L, d_pb]`` parameter."""

    def __init__(self, demo_ids, labels, length, d_pb=5):
        demo_ids = list(demo_ids)
        if len(set(demo_ids)) != len(demo_ids):
            raise ValueError("demo ids must be unique")
        if len(labels) != len(demo_ids):
            raise ValueError("one label per demo id")
        for lab in labels:
            opposite(lab)
        self.demo_ids = demo_ids
        self.labels = list(labels)
        self.length = int(length)
        self.d_pb = int(d_pb)
        self.index = {d: i for i, d in enumerate(demo_ids)}
        self.param = Tensor(np.zeros((len(demo_ids), self.length, self.d_pb)), requires_grad=True)

    def __len__(self):
        return len(self.demo_ids)

    def __contains__(self, demo_id):
        return demo_id in self.index

    def position(self, demo_id):
        try:
            return self.index[demo_id]
        except KeyError:
            raise MissingPBError(f"no PB for demo {demo_id!r}") from None

    def label_of(self, demo_id):
        return self.labels[self.position(demo_id)]

    def ids_with_label(self, label):
        return [d for d, lab in zip(self.demo_ids, self.labels) if lab == label]

    def lookup(self, demo_id):
        i = self.position(demo_id)
        mat = ad.reshape(ad.gather_rows(self.param, [i]), (self.length, self.d_pb))
        return ParametricBias(demo_id, self.labels[i], mat)

    def gather(self, positions):
        """Batched PBs ``[B, L, d_pb]`` for table positions, differentiable."""
        return ad.gather_rows(self.param, positions)

    def array(self, demo_id):
        return self.param.data[self.position(demo_id)]

    def set(self, demo_id, values):
        self.param.data[self.position(demo_id)] = np.asarray(values, dtype=ad.DTYPE)

    # -- serialization -------------------------------------------------

    def to_json(self):
        entries = [
            {"demo_id": d, "label": lab, "matrix": [float(v) for v in self.param.data[i].reshape(-1)]}
            for i, (d, lab) in enumerate(zip(self.demo_ids, self.labels))
        ]
        doc = {
            "format": PB_TABLE_FORMAT,
            "version": PB_TABLE_VERSION,
            "L": self.length,
            "d_pb": self.d_pb,
            "entries": entries,
        }
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("format") != PB_TABLE_FORMAT or doc.get("version") != PB_TABLE_VERSION:
            raise ValueError("unsupported PB table format/version")
        ents = doc["entries"]
        table = cls([e["demo_id"] for e in ents], [e["label"] for e in ents], doc["L"], doc["d_pb"])
        for i, e in enumerate(ents):
            table.param.data[i] = np.asarray(e["matrix"], dtype=ad.DTYPE).reshape(table.length, table.d_pb)
        return table

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())


def pb_table_lookup(table, demo_id):
    return table.lookup(demo_id)


def sample_negative_pb(table, own_label, rng):
    """Uniform draw among PBs whose label differs from ``own_label``."""
    pool = table.ids_with_label(opposite(own_label))
    if not pool:
        raise NegativeUnavailableError(f"no {opposite(own_label)} demonstrations in the table")
    return table.lookup(pool[int(rng.integers(len(pool)))])


def sample_negative_positions(table, positions, rng):
    """Table positions of one opposite-label PB per batch element."""
    by_label = {
        SUCCESS: np.array([i for i, lab in enumerate(table.labels) if lab == SUCCESS], dtype=np.intp),
        FAILURE: np.array([i for i, lab in enumerate(table.labels) if lab == FAILURE], dtype=np.intp),
    }
    out = np.empty(len(positions), dtype=np.intp)
    for j, p in enumerate(positions):
        pool = by_label[opposite(table.labels[p])]
        if pool.size == 0:
            raise NegativeUnavailableError("opposite-label set is empty")
        out[j] = pool[rng.integers(pool.size)]
    return out


# ------------------------------------------------------------------ attention


def split_heads(x, n_heads):
    *lead, length, d = x.shape
    if d % n_heads:
        raise ShapeError(f"model width {d} not divisible by {n_heads} heads")
    x = ad.reshape(x, (*lead, length, n_heads, d // n_heads))
    r = x.ndim
    return ad.transpose(x, (*range(r - 3), r - 2, r - 3, r - 1))


def merge_heads(x):
    *lead, h, length, dk = x.shape
    r = x.ndim
    x = ad.transpose(x, (*range(r - 3), r - 2, r - 3, r - 1))
    return ad.reshape(x, (*lead, length, h * dk))


def multi_head_attention(q, k, v, n_heads, pb=None, w_q=None, w_v=None, alpha_pb=0.0):
    """Scaled dot-product attention over already-projected ``q, k, v``.

    When ``pb`` is given (``[..., L, d_pb]`` matching ``q``), its projections
    are added to queries and values before the head split. Returns the
    merged output and the attention weights ``[..., heads, Lq, Lk]``.
    """
    if pb is not None and alpha_pb != 0.0:
        if pb.shape[:-1] != q.shape[:-1]:
            raise ShapeError(f"PB shape {pb.shape} does not match queries {q.shape}")
        q = q + ad.scale(pb @ w_q, alpha_pb)
        v = v + ad.scale(pb @ w_v, alpha_pb)
    weights = ad.attention_weights(q, k, n_heads)
    return ad.attend(weights, v), weights


def reference_attention(q, k, v, n_heads, pb=None, w_q=None, w_v=None, alpha_pb=0.0):
    """Same result as :func:`multi_head_attention`, built only from primitive ops."""
    if pb is not None:
        q = q + ad.scale(ad.matmul(pb, w_q), alpha_pb)
        v = v + ad.scale(ad.matmul(pb, w_v), alpha_pb)
    qh, kh, vh = split_heads(q, n_heads), split_heads(k, n_heads), split_heads(v, n_heads)
    r = kh.ndim
    scores = ad.scale(qh @ ad.transpose(kh, (*range(r - 2), r - 1, r - 2)), 1.0 / np.sqrt(qh.shape[-1]))
    weights = ad.softmax(scores)
    return merge_heads(weights @ vh), weights


def attention_with_pb(q, k, v, pb, proj, n_heads=1):
    """PB-modulated attention for a single sample; returns ``(output, trace)``."""
    if pb.matrix.shape[0] != q.shape[0]:
        raise ShapeError(f"PB has {pb.matrix.shape[0]} rows, queries have {q.shape[0]}")
    out, weights = multi_head_attention(q, k, v, n_heads, pb.matrix, proj.w_q, proj.w_v, proj.alpha_pb)
    return out, AttentionTrace([weights.data], demo_id=pb.demo_id)
