"""Shape-faithful checkpoints and toy models used by tests, docs and the CLI."""

from __future__ import annotations

import numpy as np

from .encoder import EncoderConfig, init_encoder, parameter_shapes
from .tensorstore import Checkpoint
from .topology import BERT_SCHEME

BERT_BASE = EncoderConfig(
    num_layers=12, d_model=768, n_heads=12, d_ff=3072,
    vocab_size=30522, max_positions=512, type_vocab_size=2, ln_epsilon=1e-12,
)

TOY = EncoderConfig(
    num_layers=4, d_model=32, n_heads=4, d_ff=64,
    vocab_size=24, max_positions=8, ln_epsilon=1e-5,
)

# 0.02 (BERT's value) leaves a randomly initialised toy model untrainable by
# plain SGD in a few hundred steps; 0.2 trains reliably.
TOY_INIT_STD = 0.2


def _tensor(shape, dtype, materialize, rng):
    if not materialize:
        # zero-stride view: shape and dtype without the memory
        return np.broadcast_to(np.zeros((), dtype=dtype), shape)
    return (rng.standard_normal(shape) * 0.02).astype(dtype)


def bert_shaped_checkpoint(cfg: EncoderConfig = BERT_BASE, pooler: bool = True,
                           materialize: bool = False, dtype=np.float32, seed=0) -> Checkpoint:
    """BERT-layout checkpoint; by default the tensors carry shapes only."""
    rng = np.random.default_rng(seed)
    shapes = parameter_shapes(cfg, BERT_SCHEME)
    if pooler:
        shapes["pooler.dense.weight"] = (cfg.d_model, cfg.d_model)
        shapes["pooler.dense.bias"] = (cfg.d_model,)
    return Checkpoint({n: _tensor(s, dtype, materialize, rng) for n, s in shapes.items()})


def distilbert_shaped_checkpoint(num_layers=6, d=768, d_ff=3072, vocab=30522, positions=512) -> Checkpoint:
    z = np.zeros((), dtype=np.float32)
    shapes = {
        "embeddings.word_embeddings.weight": (vocab, d),
        "embeddings.position_embeddings.weight": (positions, d),
        "embeddings.LayerNorm.weight": (d,),
        "embeddings.LayerNorm.bias": (d,),
        "pre_classifier.weight": (d, d),
        "pre_classifier.bias": (d,),
    }
    for i in range(num_layers):
        p = f"transformer.layer.{i}."
        for proj in ("q_lin", "k_lin", "v_lin", "out_lin"):
            shapes[p + f"attention.{proj}.weight"] = (d, d)
            shapes[p + f"attention.{proj}.bias"] = (d,)
        shapes.update({
            p + "sa_layer_norm.weight": (d,), p + "sa_layer_norm.bias": (d,),
            p + "ffn.lin1.weight": (d_ff, d), p + "ffn.lin1.bias": (d_ff,),
            p + "ffn.lin2.weight": (d, d_ff), p + "ffn.lin2.bias": (d,),
            p + "output_layer_norm.weight": (d,), p + "output_layer_norm.bias": (d,),
        })
    return Checkpoint({n: np.broadcast_to(z, s) for n, s in shapes.items()})


def toy_model(seed=0, cfg: EncoderConfig = TOY, dtype=np.float32, num_classes=None):
    return init_encoder(cfg, seed, dtype, num_classes=num_classes, std=TOY_INIT_STD)
