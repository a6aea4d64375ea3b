"""A small post-LayerNorm transformer encoder in numpy.

Weights use the BERT checkpoint layout (linear weights stored ``(out, in)``),
so real BERT-style checkpoints converted to the archive format load directly.
The forward pass records the CLS row at every layer boundary, and the
backward pass is written out by hand so gradients are exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import erf

from .tensorstore import Checkpoint
from .topology import BERT_SCHEME, NamingScheme, infer_topology

HEAD_WEIGHT = "classifier.weight"
HEAD_BIAS = "classifier.bias"

MASK_BIAS = -1e9
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_positions: int
    type_vocab_size: int = 0
    ln_epsilon: float = 1e-12
    cls_index: int = 0

    def __post_init__(self):
        for name in ("num_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_positions"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.ln_epsilon <= 0:
            raise ModelError("ln_epsilon must be > 0")
        if not 0 <= self.cls_index < self.max_positions:
            raise ModelError("cls_index outside the position range")
        if self.type_vocab_size < 0:
            raise ModelError("type_vocab_size must be >= 0")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "EncoderConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def embedding_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.d_model
    shapes = {
        "word_embeddings.weight": (cfg.vocab_size, d),
        "position_embeddings.weight": (cfg.max_positions, d),
    }
    if cfg.type_vocab_size:
        shapes["token_type_embeddings.weight"] = (cfg.type_vocab_size, d)
    shapes["LayerNorm.weight"] = (d,)
    shapes["LayerNorm.bias"] = (d,)
    return shapes


def layer_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {}
    for proj in ("query", "key", "value"):
        shapes[f"attention.self.{proj}.weight"] = (d, d)
        shapes[f"attention.self.{proj}.bias"] = (d,)
    shapes.update({
        "attention.output.dense.weight": (d, d),
        "attention.output.dense.bias": (d,),
        "attention.output.LayerNorm.weight": (d,),
        "attention.output.LayerNorm.bias": (d,),
        "intermediate.dense.weight": (f, d),
        "intermediate.dense.bias": (f,),
        "output.dense.weight": (d, f),
        "output.dense.bias": (d,),
        "output.LayerNorm.weight": (d,),
        "output.LayerNorm.bias": (d,),
    })
    return shapes


def parameter_shapes(cfg, scheme=BERT_SCHEME, num_classes=None) -> dict[str, tuple[int, ...]]:
    emb = scheme.embedding_prefixes[0]
    shapes = {emb + k: v for k, v in embedding_shapes(cfg).items()}
    for i in range(cfg.num_layers):
        prefix = scheme.layer_prefix(i)
        shapes.update({prefix + k: v for k, v in layer_shapes(cfg).items()})
    if num_classes is not None:
        shapes[HEAD_WEIGHT] = (num_classes, cfg.d_model)
        shapes[HEAD_BIAS] = (num_classes,)
    return shapes


# ---------------------------------------------------------------------------
# primitives


def layer_norm(x, gamma, beta, eps):
    """Normalize over the last axis with population variance."""
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gamma + beta


def gelu(x):
    """Exact GELU, x * Phi(x)."""
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _layer_norm_fwd(x, gamma, beta, eps):
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def _layer_norm_bwd(dy, cache):
    xhat, inv, gamma = cache
    axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _linear_bwd(dy, x, w):
    """y = x @ w.T + b; returns dx, dw, db."""
    dx = dy @ w
    dw = dy.reshape(-1, dy.shape[-1]).T @ x.reshape(-1, x.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dw, db


# ---------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class TokenBatch:
    token_ids: np.ndarray  # (B, T) int
    mask: np.ndarray  # (B, T) bool, True = real token
    labels: np.ndarray | None = None

    def __post_init__(self):
        ids = np.asarray(self.token_ids, dtype=np.int64)
        mask = np.asarray(self.mask, dtype=bool)
        if ids.ndim != 2 or ids.shape != mask.shape:
            raise ModelError(f"token_ids {ids.shape} and mask {mask.shape} must be matching B x T grids")
        if ids.shape[0] and not mask.any(axis=1).all():
            raise ModelError("every row needs at least one unmasked position")
        labels = None if self.labels is None else np.asarray(self.labels, dtype=np.int64)
        if labels is not None and labels.shape != (ids.shape[0],):
            raise ModelError("labels must have one entry per row")
        object.__setattr__(self, "token_ids", ids)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.token_ids.shape[0]

    @classmethod
    def from_sequences(cls, seqs, labels=None, pad_id: int = 0) -> "TokenBatch":
        T = max(len(s) for s in seqs)
        ids = np.full((len(seqs), T), pad_id, dtype=np.int64)
        mask = np.zeros((len(seqs), T), dtype=bool)
        for r, s in enumerate(seqs):
            ids[r, : len(s)] = s
            mask[r, : len(s)] = True
        return cls(ids, mask, labels)

    def take(self, rows) -> "TokenBatch":
        labels = None if self.labels is None else self.labels[rows]
        return TokenBatch(self.token_ids[rows], self.mask[rows], labels)

    def check(self, cfg: EncoderConfig):
        B, T = self.token_ids.shape
        if T > cfg.max_positions:
            raise ModelError(f"sequence length {T} exceeds max_positions {cfg.max_positions}")
        if self.token_ids.size and (self.token_ids.min() < 0 or self.token_ids.max() >= cfg.vocab_size):
            raise ModelError(f"token ids must lie in [0, {cfg.vocab_size})")
        if cfg.cls_index >= T or not self.mask[:, cfg.cls_index].all():
            raise ModelError(f"cls position {cfg.cls_index} must be unmasked in every row")


def load_batches(path, batch_size: int = 32, pad_id: int = 0) -> list[TokenBatch]:
    """Read JSON-lines records ``{"tokens": [...], "label": optional}``."""
    seqs, labels = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        rec = json.loads(line)
        if not isinstance(rec, dict) or "tokens" not in rec:
            raise ModelError(f"{path}:{lineno}: record needs a 'tokens' list")
        seqs.append([int(t) for t in rec["tokens"]])
        labels.append(rec.get("label"))
    if not seqs:
        raise ModelError(f"{path}: no records")
    have = [lab is not None for lab in labels]
    if any(have) and not all(have):
        raise ModelError(f"{path}: labels must be given for all records or none")
    batches = []
    for s in range(0, len(seqs), batch_size):
        lab = labels[s : s + batch_size] if all(have) else None
        batches.append(TokenBatch.from_sequences(seqs[s : s + batch_size], lab, pad_id))
    return batches


# ---------------------------------------------------------------------------
# model


@dataclass
class EncoderModel:
    """Encoder weights keyed by checkpoint name.

    ``extras`` carries checkpoint tensors the encoder does not use (pooler,
    etc.) so a model can be written back without losing them. Layers listed
    in ``bypass`` (1-based) act as the identity; this is a test hook for
    contribution scoring.
    """

    config: EncoderConfig
    params: dict[str, np.ndarray]
    scheme: NamingScheme = BERT_SCHEME
    extras: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)
    bypass: frozenset = frozenset()

    @property
    def dtype(self):
        return self.params[self._emb("LayerNorm.weight")].dtype

    @property
    def num_classes(self) -> int | None:
        w = self.params.get(HEAD_WEIGHT)
        return None if w is None else w.shape[0]

    def _emb(self, name):
        return self.scheme.embedding_prefixes[0] + name

    def layer_params(self, i: int) -> dict[str, np.ndarray]:
        """Weights of 0-based layer ``i`` keyed by their in-layer name."""
        prefix = self.scheme.layer_prefix(i)
        return {k: self.params[prefix + k] for k in layer_shapes(self.config)}

    def copy(self) -> "EncoderModel":
        return replace(self, params={k: v.copy() for k, v in self.params.items()})

    def bypassed(self, layers) -> "EncoderModel":
        return replace(self, bypass=frozenset(layers))

    def with_head(self, num_classes: int, seed) -> "EncoderModel":
        rng = np.random.default_rng(seed)
        params = dict(self.params)
        params[HEAD_WEIGHT] = (rng.standard_normal((num_classes, self.config.d_model)) * 0.02).astype(self.dtype)
        params[HEAD_BIAS] = np.zeros(num_classes, dtype=self.dtype)
        return replace(self, params=params)

    def astype(self, dtype) -> "EncoderModel":
        return replace(self, params={k: v.astype(dtype) for k, v in self.params.items()})

    def to_checkpoint(self) -> Checkpoint:
        meta = dict(self.metadata)
        meta["encoder_config"] = json.dumps(self.config.to_dict(), sort_keys=True)
        return Checkpoint({**self.extras, **self.params}, meta)


def init_encoder(cfg: EncoderConfig, seed, dtype=np.float32, num_classes=None,
                 std: float = 0.02, scheme=BERT_SCHEME) -> EncoderModel:
    """Randomly initialised encoder (normal weights, zero biases, unit LN gains)."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg, scheme, num_classes).items():
        if name.endswith("LayerNorm.weight"):
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = (rng.standard_normal(shape) * std).astype(dtype)
    return EncoderModel(cfg, params, scheme)


def load_weights(c: Checkpoint, cfg: EncoderConfig, scheme: NamingScheme = BERT_SCHEME) -> EncoderModel:
    topo = infer_topology(c, scheme)
    if topo.num_layers != cfg.num_layers:
        raise ModelError(f"config expects {cfg.num_layers} layers but checkpoint has {topo.num_layers}")
    num_classes = c.tensors[HEAD_WEIGHT].shape[0] if HEAD_WEIGHT in c else None
    expected = parameter_shapes(cfg, scheme, num_classes)
    dtypes = set()
    params = {}
    for name, shape in expected.items():
        if name not in c:
            raise ModelError(f"missing tensor {name!r}")
        arr = c.tensors[name]
        if tuple(arr.shape) != shape:
            raise ModelError(f"shape mismatch for {name!r}: checkpoint {list(arr.shape)}, config expects {list(shape)}")
        dtypes.add(arr.dtype)
        params[name] = np.array(arr)
    if len(dtypes) > 1:
        raise ModelError(f"mixed dtypes in checkpoint: {sorted(map(str, dtypes))}")
    extras = {k: v for k, v in c.tensors.items() if k not in params}
    metadata = {k: v for k, v in c.metadata.items() if k != "encoder_config"}
    return EncoderModel(cfg, params, scheme, extras, metadata)


def config_from_checkpoint(c: Checkpoint, scheme=BERT_SCHEME) -> EncoderConfig:
    """Config stored in checkpoint metadata, with the layer count re-inferred
    (surgery changes depth but leaves metadata alone)."""
    if "encoder_config" not in c.metadata:
        raise ModelError("checkpoint carries no encoder_config metadata; pass a config file")
    cfg = EncoderConfig.from_dict(json.loads(c.metadata["encoder_config"]))
    return replace(cfg, num_layers=infer_topology(c, scheme).num_layers)


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class LayerTaps:
    """CLS rows at each executed layer boundary; entry 0 is the embedding output."""

    cls_states: list[np.ndarray]  # each (B, d_model)

    def __len__(self):
        return len(self.cls_states)


def _attention_fwd(x, p, mask, n_heads):
    B, T, d = x.shape
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)

    def heads(t):
        return t.reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)

    q = heads(x @ p["attention.self.query.weight"].T + p["attention.self.query.bias"])
    k = heads(x @ p["attention.self.key.weight"].T + p["attention.self.key.bias"])
    v = heads(x @ p["attention.self.value.weight"].T + p["attention.self.value.bias"])
    scores = (q @ k.transpose(0, 1, 3, 2)) * x.dtype.type(scale)
    # exp(-1e9 - max) underflows to exactly 0 in both float widths
    scores = np.where(mask[:, None, None, :], scores, x.dtype.type(MASK_BIAS))
    probs = softmax(scores)
    ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
    out = ctx @ p["attention.output.dense.weight"].T + p["attention.output.dense.bias"]
    return out, (x, q, k, v, probs, ctx, scale)


def _attention_bwd(dout, p, cache, grads, prefix):
    x, q, k, v, probs, ctx, scale = cache
    B, H, T, dh = q.shape
    dctx, grads[prefix + "attention.output.dense.weight"], grads[prefix + "attention.output.dense.bias"] = \
        _linear_bwd(dout, ctx, p["attention.output.dense.weight"])
    dctx = dctx.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
    dprobs = dctx @ v.transpose(0, 1, 3, 2)
    dv = probs.transpose(0, 1, 3, 2) @ dctx
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * scale
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q

    dx = np.zeros_like(x)
    for name, dt in (("query", dq), ("key", dk), ("value", dv)):
        dt = dt.transpose(0, 2, 1, 3).reshape(B, T, H * dh)
        w = f"attention.self.{name}.weight"
        dxi, grads[prefix + w], grads[prefix + f"attention.self.{name}.bias"] = _linear_bwd(dt, x, p[w])
        dx += dxi
    return dx


def _layer_fwd(x, p, mask, cfg):
    eps = cfg.ln_epsilon
    attn, attn_cache = _attention_fwd(x, p, mask, cfg.n_heads)
    a, ln1 = _layer_norm_fwd(x + attn, p["attention.output.LayerNorm.weight"],
                             p["attention.output.LayerNorm.bias"], eps)
    pre = a @ p["intermediate.dense.weight"].T + p["intermediate.dense.bias"]
    act = gelu(pre)
    ff = act @ p["output.dense.weight"].T + p["output.dense.bias"]
    y, ln2 = _layer_norm_fwd(a + ff, p["output.LayerNorm.weight"], p["output.LayerNorm.bias"], eps)
    return y, (attn_cache, ln1, a, pre, act, ln2)


def _layer_bwd(dy, p, cache, grads, prefix):
    attn_cache, ln1, a, pre, act, ln2 = cache
    dsum2, grads[prefix + "output.LayerNorm.weight"], grads[prefix + "output.LayerNorm.bias"] = \
        _layer_norm_bwd(dy, ln2)
    dact, grads[prefix + "output.dense.weight"], grads[prefix + "output.dense.bias"] = \
        _linear_bwd(dsum2, act, p["output.dense.weight"])
    dpre = dact * _gelu_grad(pre)
    da, grads[prefix + "intermediate.dense.weight"], grads[prefix + "intermediate.dense.bias"] = \
        _linear_bwd(dpre, a, p["intermediate.dense.weight"])
    da = da + dsum2
    dsum1, grads[prefix + "attention.output.LayerNorm.weight"], grads[prefix + "attention.output.LayerNorm.bias"] = \
        _layer_norm_bwd(da, ln1)
    dx = _attention_bwd(dsum1, p, attn_cache, grads, prefix)
    return dx + dsum1


def _run(model: EncoderModel, batch: TokenBatch, skip=(), keep_cache=False):
    cfg = model.config
    batch.check(cfg)
    skip = frozenset(skip)
    if any(not 1 <= s <= cfg.num_layers for s in skip):
        raise ModelError(f"skip indices must lie in 1..{cfg.num_layers}")
    P = model.params
    ids = batch.token_ids
    T = ids.shape[1]

    e = P[model._emb("word_embeddings.weight")][ids] + P[model._emb("position_embeddings.weight")][:T]
    if cfg.type_vocab_size:
        e = e + P[model._emb("token_type_embeddings.weight")][0]
    h, emb_ln = _layer_norm_fwd(e, P[model._emb("LayerNorm.weight")], P[model._emb("LayerNorm.bias")],
                                cfg.ln_epsilon)
    taps = [h[:, cfg.cls_index].copy()]
    caches = []
    for i in range(cfg.num_layers):
        if i + 1 in skip:
            continue
        if i + 1 in model.bypass:
            caches.append((i, None))
        else:
            h, c = _layer_fwd(h, model.layer_params(i), batch.mask, cfg)
            caches.append((i, c if keep_cache else None))
        taps.append(h[:, cfg.cls_index].copy())
    return h, LayerTaps(taps), (emb_ln, caches)


def forward(model: EncoderModel, batch: TokenBatch, skip=()):
    """Run the encoder; returns (B x T x d hidden states, LayerTaps).

    ``skip`` holds 1-based layers to leave out entirely, which must match
    running the surgically pruned checkpoint.
    """
    h, taps, _ = _run(model, batch, skip)
    return h, taps


def logits(model: EncoderModel, batch: TokenBatch) -> np.ndarray:
    h, _ = forward(model, batch)
    return h[:, model.config.cls_index] @ model.params[HEAD_WEIGHT].T + model.params[HEAD_BIAS]


def cross_entropy(z: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    B = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(B), labels].mean()
    dz = np.exp(logp)
    dz[np.arange(B), labels] -= 1.0
    return float(loss), dz / B


def loss_and_grads(model: EncoderModel, batch: TokenBatch, labels=None):
    """Mean cross-entropy of the classifier on the CLS state and exact
    gradients for every parameter in ``model.params``."""
    if model.num_classes is None:
        raise ModelError("model has no classification head")
    labels = batch.labels if labels is None else np.asarray(labels)
    if labels is None:
        raise ModelError("batch has no labels")
    cfg = model.config
    P = model.params
    h, _, (emb_ln, caches) = _run(model, batch, keep_cache=True)
    cls = h[:, cfg.cls_index]
    z = cls @ P[HEAD_WEIGHT].T + P[HEAD_BIAS]
    loss, dz = cross_entropy(z, labels)

    grads = {}
    dcls, grads[HEAD_WEIGHT], grads[HEAD_BIAS] = _linear_bwd(dz, cls, P[HEAD_WEIGHT])
    dh = np.zeros_like(h)
    dh[:, cfg.cls_index] = dcls
    for i in range(cfg.num_layers):
        if i + 1 in model.bypass:
            for k in layer_shapes(cfg):
                grads[model.scheme.layer_prefix(i) + k] = np.zeros_like(P[model.scheme.layer_prefix(i) + k])
    for i, cache in reversed(caches):
        if cache is not None:
            dh = _layer_bwd(dh, model.layer_params(i), cache, grads, model.scheme.layer_prefix(i))

    de, grads[model._emb("LayerNorm.weight")], grads[model._emb("LayerNorm.bias")] = _layer_norm_bwd(dh, emb_ln)
    ids = batch.token_ids
    dword = np.zeros_like(P[model._emb("word_embeddings.weight")])
    np.add.at(dword, ids.reshape(-1), de.reshape(-1, cfg.d_model))
    grads[model._emb("word_embeddings.weight")] = dword
    dpos = np.zeros_like(P[model._emb("position_embeddings.weight")])
    dpos[: ids.shape[1]] = de.sum(axis=0)
    grads[model._emb("position_embeddings.weight")] = dpos
    if cfg.type_vocab_size:
        dtype_emb = np.zeros_like(P[model._emb("token_type_embeddings.weight")])
        dtype_emb[0] = de.sum(axis=(0, 1))
        grads[model._emb("token_type_embeddings.weight")] = dtype_emb
    return loss, grads
