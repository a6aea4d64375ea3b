import json
import random

import numpy as np
import pytest

from layerprune.fixtures import BERT_BASE, bert_shaped_checkpoint, distilbert_shaped_checkpoint
from layerprune.tensorstore import Checkpoint
from layerprune.topology import (
    DISTILBERT_SCHEME,
    NamingScheme,
    TopologyError,
    count_parameters,
    infer_topology,
)


def bert_closed_form(V=30522, d=768, ff=3072, P=512, S=2, L=12):
    """Parameter counts written out from the architecture, not from the fixture."""
    embedding = V * d + P * d + S * d + 2 * d
    attention = 4 * (d * d + d) + 2 * d
    feed_forward = (d * ff + ff) + (ff * d + d) + 2 * d
    layer = attention + feed_forward
    pooler = d * d + d
    return embedding, layer, pooler, embedding + L * layer + pooler


def z(*shape):
    return np.broadcast_to(np.zeros((), np.float32), shape)


def test_closed_form_numbers():
    _, layer, _, total = bert_closed_form()
    assert layer == 7_087_872
    assert total == 109_482_240


def test_bert_fixture_topology():
    t = infer_topology(bert_shaped_checkpoint())
    assert t.num_layers == 12
    assert t.other_tensors == ("pooler.dense.bias", "pooler.dense.weight")
    assert all(len(names) == 16 for names in t.layer_tensors)


def test_bert_fixture_counts():
    emb, layer, pooler, total = bert_closed_form()
    c = bert_shaped_checkpoint()
    r = count_parameters(c, infer_topology(c))
    assert r.total == total == 109_482_240
    assert r.per_layer == (7_087_872,) * 12
    assert r.embedding == emb and r.other == pooler
    assert r.total == r.embedding + sum(r.per_layer) + r.other
    assert r.encoder_only == total - pooler


def test_distilbert_fixture():
    c = distilbert_shaped_checkpoint()
    t = infer_topology(c, DISTILBERT_SCHEME)
    assert t.num_layers == 6
    assert t.other_tensors == ("pre_classifier.bias", "pre_classifier.weight")


def test_gap_in_layers():
    c = Checkpoint({f"encoder.layer.{i}.w": z(2) for i in (0, 1, 3)})
    with pytest.raises(TopologyError, match="non-contiguous layer indices"):
        infer_topology(c)


def test_no_layers():
    with pytest.raises(TopologyError, match="no layer tensors"):
        infer_topology(Checkpoint({"embeddings.w": z(2)}))


def test_multiple_block_match():
    scheme = NamingScheme(embedding_prefixes=("encoder.",))
    with pytest.raises(TopologyError, match="multiple blocks"):
        infer_topology(Checkpoint({"encoder.layer.0.w": z(1)}), scheme)


def test_single_scalar_embedding():
    c = Checkpoint({"embeddings.s": z(), "encoder.layer.0.w": np.zeros(0, np.float32)})
    r = count_parameters(c, infer_topology(c))
    assert r.total == 1


def test_unmatched_tensors_go_to_other():
    c = Checkpoint({"encoder.layer.0.w": z(2), "lm_head.bias": z(3)})
    t = infer_topology(c)
    assert t.other_tensors == ("lm_head.bias",)


def test_partition_and_insertion_order():
    c = bert_shaped_checkpoint()
    items = list(c.tensors.items())
    random.Random(3).shuffle(items)
    t1, t2 = infer_topology(c), infer_topology(Checkpoint(dict(items)))
    assert t1 == t2
    n = len(t1.embedding_tensors) + sum(map(len, t1.layer_tensors)) + len(t1.other_tensors)
    assert n == len(c)


def test_layer_index_not_fooled_by_prefix_digits():
    scheme = NamingScheme()
    assert scheme.layer_index("encoder.layer.10.x") == 10
    assert scheme.layer_index("encoder.layer.1x.y") is None
    assert scheme.rename_layer("encoder.layer.10.attention.q", 3) == "encoder.layer.3.attention.q"


def test_scheme_requires_one_placeholder():
    with pytest.raises(TopologyError):
        NamingScheme(layer_pattern="layers.")


def test_scheme_from_file(tmp_path):
    path = tmp_path / "scheme.json"
    path.write_text(json.dumps(DISTILBERT_SCHEME.to_dict()))
    assert NamingScheme.from_file(path) == DISTILBERT_SCHEME


def test_bert_base_constant_matches_fixture_dims():
    assert (BERT_BASE.vocab_size, BERT_BASE.d_model, BERT_BASE.d_ff) == (30522, 768, 3072)
