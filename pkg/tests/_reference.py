"""Slow, loop-based encoder used as an independent oracle.

Shares no code with ``layerprune.encoder``: one example at a time, one head
at a time, softmax over the unmasked keys only (no bias trick), GELU via
``math.erf``. Always evaluates in float64.
"""

import math

import numpy as np


def _ln(x, g, b, eps):
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return np.array([(v - mu) / math.sqrt(var + eps) for v in x]) * g + b


def _gelu(v):
    return 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0)))


def reference_states(params, cfg, tokens, mask, layers=None, emb="embeddings.", layer_fmt="encoder.layer.{}."):
    """Hidden states (T x d) after the embedding block and after each of
    ``layers`` (0-based, in order; default all)."""
    P = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    T, d, H = len(tokens), cfg.d_model, cfg.n_heads
    dh = d // H
    eps = cfg.ln_epsilon
    x = np.stack([P[emb + "word_embeddings.weight"][t] + P[emb + "position_embeddings.weight"][i]
                  for i, t in enumerate(tokens)])
    if cfg.type_vocab_size:
        x = x + P[emb + "token_type_embeddings.weight"][0]
    x = np.stack([_ln(row, P[emb + "LayerNorm.weight"], P[emb + "LayerNorm.bias"], eps) for row in x])
    states = [x]
    keys = [j for j in range(T) if mask[j]]
    for li in (range(cfg.num_layers) if layers is None else layers):
        p = {k[len(layer_fmt.format(li)):]: v for k, v in P.items() if k.startswith(layer_fmt.format(li))}
        q = x @ p["attention.self.query.weight"].T + p["attention.self.query.bias"]
        k = x @ p["attention.self.key.weight"].T + p["attention.self.key.bias"]
        v = x @ p["attention.self.value.weight"].T + p["attention.self.value.bias"]
        ctx = np.zeros((T, d))
        for h in range(H):
            sl = slice(h * dh, (h + 1) * dh)
            for i in range(T):
                s = [float(q[i, sl] @ k[j, sl]) / math.sqrt(dh) for j in keys]
                m = max(s)
                w = [math.exp(a - m) for a in s]
                z = sum(w)
                ctx[i, sl] = sum((wj / z) * v[j, sl] for wj, j in zip(w, keys))
        attn = ctx @ p["attention.output.dense.weight"].T + p["attention.output.dense.bias"]
        a = np.stack([_ln(r, p["attention.output.LayerNorm.weight"], p["attention.output.LayerNorm.bias"], eps)
                      for r in x + attn])
        inner = a @ p["intermediate.dense.weight"].T + p["intermediate.dense.bias"]
        inner = np.vectorize(_gelu)(inner)
        ff = inner @ p["output.dense.weight"].T + p["output.dense.bias"]
        x = np.stack([_ln(r, p["output.LayerNorm.weight"], p["output.LayerNorm.bias"], eps) for r in a + ff])
        states.append(x)
    return states


def reference_cosine(u, v):
    dot = sum(float(a) * float(b) for a, b in zip(u, v))
    nu = math.sqrt(sum(float(a) ** 2 for a in u))
    nv = math.sqrt(sum(float(b) ** 2 for b in v))
    return dot / (nu * nv)
