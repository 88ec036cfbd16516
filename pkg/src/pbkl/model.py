"""Encoder-decoder chunking policy with PB-modulated decoder self-attention."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import AttentionTrace, PBTable, multi_head_attention
from .autodiff import Tensor
from .errors import ConfigError, IntegrityError, ShapeError

CHECKPOINT_FORMAT = "pbkl-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class PolicyConfig:
    obs_dim: int = 6
    action_dim: int = 3
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    dim_feedforward: int = 128
    n_memory_tokens: int = 4
    chunk_length: int = 20
    d_pb: int = 5
    alpha_pb: float = 2.0
    use_pb: bool = True
    lambda_kl: float = 0.01
    lr: float = 1e-4
    pb_lr: float = 1e-2
    act_loss: str = "l2"
    mask_padding: bool = True
    weight_decay: float = 1e-2
    grad_clip: float = 1.0
    epochs: int = 300
    batch_size: int = 10
    seed: int = 0

    def __post_init__(self):
        ints = ("obs_dim", "action_dim", "d_model", "n_heads", "n_encoder_layers",
                "n_decoder_layers", "dim_feedforward", "n_memory_tokens", "chunk_length",
                "d_pb", "epochs", "batch_size")
        for name in ints:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.act_loss not in ("l1", "l2"):
            raise ConfigError("act_loss must be 'l1' or 'l2'")
        if self.pb_lr <= 0:
            raise ConfigError("pb_lr must be > 0")
        if self.alpha_pb < 0 or self.lambda_kl < 0 or self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("alpha_pb, lambda_kl, weight_decay must be >= 0 and lr > 0")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown policy config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    @property
    def pb_active(self):
        return self.use_pb and self.alpha_pb > 0


def parameter_shapes(config):
    """Ordered ``name -> shape`` for every trainable weight (PB table excluded)."""
    c = config
    d, ff, m = c.d_model, c.dim_feedforward, c.n_memory_tokens
    shapes = {
        "obs_embed.w": (c.obs_dim, m * d),
        "obs_embed.b": (m * d,),
        "memory_pos": (m, d),
    }

    def attn(prefix):
        # no key bias: it shifts a whole score row and cancels in the softmax
        for p in ("q", "k", "v", "o"):
            shapes[f"{prefix}.w_{p}"] = (d, d)
            if p != "k":
                shapes[f"{prefix}.b_{p}"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.w1"] = (d, ff)
        shapes[f"{prefix}.b1"] = (ff,)
        shapes[f"{prefix}.w2"] = (ff, d)
        shapes[f"{prefix}.b2"] = (d,)

    def norm(name):
        shapes[f"{name}.gamma"] = (d,)
        shapes[f"{name}.beta"] = (d,)

    for i in range(c.n_encoder_layers):
        p = f"enc{i}"
        norm(f"{p}.ln1")
        attn(f"{p}.attn")
        norm(f"{p}.ln2")
        ffn(f"{p}.ffn")
    shapes["query_embed"] = (c.chunk_length, d)
    for i in range(c.n_decoder_layers):
        p = f"dec{i}"
        norm(f"{p}.ln1")
        attn(f"{p}.self")
        if c.use_pb:
            shapes[f"{p}.pb_w_q"] = (c.d_pb, d)
            shapes[f"{p}.pb_w_v"] = (c.d_pb, d)
        norm(f"{p}.ln2")
        attn(f"{p}.cross")
        norm(f"{p}.ln3")
        ffn(f"{p}.ffn")
    norm("final_ln")
    shapes["head.w"] = (d, c.action_dim)
    shapes["head.b"] = (c.action_dim,)
    return shapes


def count_parameters(config, n_demos=0):
    """Trainable scalar counts: ``{"model": ..., "pb": ..., "total": ...}``."""
    model = sum(int(np.prod(s)) for s in parameter_shapes(config).values())
    pb = n_demos * config.chunk_length * config.d_pb if config.use_pb else 0
    return {"model": model, "pb": pb, "total": model + pb}


def _init_param(name, shape, rng):
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gamma":
        return np.ones(shape)
    if leaf.startswith("b") and len(shape) == 1:
        return np.zeros(shape)
    if name in ("query_embed", "memory_pos"):
        return rng.normal(0.0, 1.0, shape)
    fan_in, fan_out = shape
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, shape)


class Policy:
    """Maps a state observation to a chunk of ``chunk_length`` actions.

    Observations and actions are standardized with statistics stored on the
    model (``set_normalization``); the network itself works in normalized
    units.
    """

    def __init__(self, config, rng=None):
        self.config = config
        rng = np.random.default_rng(config.seed) if rng is None else rng
        self.params = {
            name: Tensor(_init_param(name, shape, rng), requires_grad=True)
            for name, shape in parameter_shapes(config).items()
        }
        self.obs_mean = np.zeros(config.obs_dim)
        self.obs_std = np.ones(config.obs_dim)
        self.act_mean = np.zeros(config.action_dim)
        self.act_std = np.ones(config.action_dim)

    def set_normalization(self, obs_mean, obs_std, act_mean, act_std):
        self.obs_mean = np.asarray(obs_mean, dtype=float)
        self.obs_std = np.maximum(np.asarray(obs_std, dtype=float), 1e-3)
        self.act_mean = np.asarray(act_mean, dtype=float)
        self.act_std = np.maximum(np.asarray(act_std, dtype=float), 1e-3)

    def normalize_obs(self, obs):
        return (np.asarray(obs, dtype=float) - self.obs_mean) / self.obs_std

    def normalize_actions(self, actions):
        return (np.asarray(actions, dtype=float) - self.act_mean) / self.act_std

    def denormalize_actions(self, actions):
        return np.asarray(actions) * self.act_std + self.act_mean

    # -- building blocks -------------------------------------------------

    def _ln(self, x, name):
        p = self.params
        return ad.layer_norm(x, p[f"{name}.gamma"], p[f"{name}.beta"])

    def _proj(self, x, prefix, which):
        p = self.params
        w = p[f"{prefix}.w_{which}"]
        b = p.get(f"{prefix}.b_{which}")
        return ad.matmul(x, w) if b is None else ad.linear(x, w, b)

    def _attention(self, xq, xkv, prefix, pb=None, layer=None):
        c = self.config
        q = self._proj(xq, prefix, "q")
        k = self._proj(xkv, prefix, "k")
        v = self._proj(xkv, prefix, "v")
        if pb is not None and c.pb_active:
            out, w = multi_head_attention(
                q, k, v, c.n_heads, pb,
                self.params[f"dec{layer}.pb_w_q"], self.params[f"dec{layer}.pb_w_v"], c.alpha_pb,
            )
        else:
            out, w = multi_head_attention(q, k, v, c.n_heads)
        return self._proj(out, prefix, "o"), w

    def _ffn(self, x, prefix):
        p = self.params
        h = ad.gelu(ad.linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
        return ad.linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    # -- forward ---------------------------------------------------------

    def encode(self, obs):
        """Memory tokens ``[B, M, d]`` from normalized observations ``[B, obs_dim]``."""
        c, p = self.config, self.params
        obs = ad.as_tensor(obs)
        if obs.ndim != 2 or obs.shape[1] != c.obs_dim:
            raise ShapeError(f"observations must be [B, {c.obs_dim}], got {obs.shape}")
        m = ad.linear(obs, p["obs_embed.w"], p["obs_embed.b"])
        m = ad.reshape(m, (obs.shape[0], c.n_memory_tokens, c.d_model)) + p["memory_pos"]
        for i in range(c.n_encoder_layers):
            pre = f"enc{i}"
            h = self._ln(m, f"{pre}.ln1")
            a, _ = self._attention(h, h, f"{pre}.attn")
            m = m + a
            m = m + self._ffn(self._ln(m, f"{pre}.ln2"), f"{pre}.ffn")
        return m

    def decode(self, memory, pb=None, with_head=True):
        """Run the decoder; returns ``(actions or None, [weights per layer])``.

        ``pb`` is ``[B, L, d_pb]`` (or ``None`` for no bias). Weights are
        ``[B, heads, L, L]`` decoder self-attention maps.
        """
        c, p = self.config, self.params
        batch = memory.shape[0]
        if pb is not None and tuple(pb.shape) != (batch, c.chunk_length, c.d_pb):
            raise ShapeError(f"PB batch must be {(batch, c.chunk_length, c.d_pb)}, got {pb.shape}")
        x = Tensor(np.zeros((batch, c.chunk_length, c.d_model))) + p["query_embed"]
        traces = []
        for i in range(c.n_decoder_layers):
            pre = f"dec{i}"
            h = self._ln(x, f"{pre}.ln1")
            a, w = self._attention(h, h, f"{pre}.self", pb=pb, layer=i)
            traces.append(w)
            if not with_head and i == c.n_decoder_layers - 1:
                return None, traces
            x = x + a
            x = x + self._attention(self._ln(x, f"{pre}.ln2"), memory, f"{pre}.cross")[0]
            x = x + self._ffn(self._ln(x, f"{pre}.ln3"), f"{pre}.ffn")
        x = self._ln(x, "final_ln")
        return ad.linear(x, p["head.w"], p["head.b"]), traces

    def forward(self, obs, pb=None):
        """Single observation -> ``(chunk [L, action_dim], [AttentionTrace])`` in raw units.

        ``pb`` is a :class:`~pbkl.attention.ParametricBias` or ``None``.
        """
        c = self.config
        mat = None
        if pb is not None:
            if pb.matrix.shape != (c.chunk_length, c.d_pb):
                raise ShapeError(f"PB must be {(c.chunk_length, c.d_pb)}, got {pb.matrix.shape}")
            mat = ad.reshape(pb.matrix, (1, c.chunk_length, c.d_pb))
        with ad.no_grad():
            mem = self.encode(self.normalize_obs(np.asarray(obs, dtype=float)[None]))
            out, weights = self.decode(mem, mat)
        trace = AttentionTrace([w.data[0] for w in weights], demo_id=getattr(pb, "demo_id", None))
        return self.denormalize_actions(out.data[0]), [trace]

    def predict(self, obs, pb=None):
        """Batched raw-unit chunks ``[B, L, action_dim]`` from raw observations and PB arrays."""
        with ad.no_grad():
            mem = self.encode(self.normalize_obs(np.atleast_2d(obs)))
            pbt = None if pb is None else Tensor(np.asarray(pb, dtype=float).reshape(mem.shape[0], self.config.chunk_length, self.config.d_pb))
            out, _ = self.decode(mem, pbt)
        return self.denormalize_actions(out.data)

    def attention_maps(self, obs, pb):
        """Decoder self-attention arrays ``[B, heads, L, L]`` per layer, no graph."""
        with ad.no_grad():
            mem = self.encode(self.normalize_obs(np.atleast_2d(obs)))
            pbt = None if pb is None else Tensor(np.asarray(pb, dtype=float))
            _, weights = self.decode(mem, pbt, with_head=False)
        return [w.data for w in weights]

    # -- persistence -------------------------------------------------------

    def state_arrays(self):
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        out.update({
            "stats/obs_mean": self.obs_mean, "stats/obs_std": self.obs_std,
            "stats/act_mean": self.act_mean, "stats/act_std": self.act_std,
        })
        return out


@dataclass
class Checkpoint:
    policy: Policy
    pb_table: PBTable | None
    seed: int
    path: Path | None = None


def save_checkpoint(path, policy, pb_table=None, seed=None):
    """Write ``<path>`` (npz: header + parameter blobs) and the PB table beside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pb_name = None
    if pb_table is not None:
        pb_name = path.with_suffix(".pb.json").name
        pb_table.save(path.parent / pb_name)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": policy.config.to_dict(),
        "seed": policy.config.seed if seed is None else int(seed),
        "pb_table": pb_name,
    }
    arrays = policy.state_arrays()
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise IntegrityError(f"checkpoint {path} not found")
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
            raise IntegrityError(
                f"checkpoint {path} has format {header.get('format')!r} v{header.get('version')}, "
                f"expected {CHECKPOINT_FORMAT!r} v{CHECKPOINT_VERSION}"
            )
        policy = Policy(PolicyConfig.from_dict(header["config"]))
        for name, t in policy.params.items():
            t.data = np.array(z[f"param/{name}"], dtype=ad.DTYPE)
        policy.set_normalization(z["stats/obs_mean"], z["stats/obs_std"],
                                 z["stats/act_mean"], z["stats/act_std"])
    table = None
    if header["pb_table"]:
        table = PBTable.load(path.parent / header["pb_table"])
    return Checkpoint(policy, table, header["seed"], path)
