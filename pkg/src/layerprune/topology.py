"""Split a checkpoint into embedding block, ordered encoder layers, and the rest."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .tensorstore import Checkpoint


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class NamingScheme:
    """Tensor-name conventions for one model family.

    ``layer_pattern`` is a literal name prefix containing exactly one ``{i}``
    placeholder for the 0-based layer index. Tensors matching no rule are
    assigned to the "other" block.
    """

    embedding_prefixes: tuple[str, ...] = ("embeddings.",)
    layer_pattern: str = "encoder.layer.{i}."
    other_prefixes: tuple[str, ...] = ("pooler.", "classifier.")

    def __post_init__(self):
        if self.layer_pattern.count("{i}") != 1:
            raise TopologyError(f"layer_pattern must contain exactly one '{{i}}': {self.layer_pattern!r}")
        object.__setattr__(self, "embedding_prefixes", tuple(self.embedding_prefixes))
        object.__setattr__(self, "other_prefixes", tuple(self.other_prefixes))

    @property
    def _layer_re(self) -> re.Pattern:
        head, tail = self.layer_pattern.split("{i}")
        return re.compile(re.escape(head) + r"(0|[1-9][0-9]*)" + re.escape(tail))

    def layer_index(self, name: str) -> int | None:
        m = self._layer_re.match(name)
        return int(m.group(1)) if m else None

    def layer_prefix(self, i: int) -> str:
        return self.layer_pattern.replace("{i}", str(i))

    def rename_layer(self, name: str, new_index: int) -> str:
        m = self._layer_re.match(name)
        if m is None:
            raise TopologyError(f"{name!r} is not a layer tensor")
        return self.layer_prefix(new_index) + name[m.end():]

    def to_dict(self) -> dict:
        return {
            "embedding_prefixes": list(self.embedding_prefixes),
            "layer_pattern": self.layer_pattern,
            "other_prefixes": list(self.other_prefixes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NamingScheme":
        unknown = set(d) - {"embedding_prefixes", "layer_pattern", "other_prefixes"}
        if unknown:
            raise TopologyError(f"unknown naming-scheme keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "NamingScheme":
        return cls.from_dict(json.loads(Path(path).read_text()))


BERT_SCHEME = NamingScheme()
DISTILBERT_SCHEME = NamingScheme(
    embedding_prefixes=("embeddings.",),
    layer_pattern="transformer.layer.{i}.",
    other_prefixes=("pre_classifier.", "classifier."),
)


@dataclass(frozen=True)
class ModelTopology:
    num_layers: int
    embedding_tensors: tuple[str, ...]
    layer_tensors: tuple[tuple[str, ...], ...]  # index 0 is layer 1
    other_tensors: tuple[str, ...]
    scheme: NamingScheme = field(default=BERT_SCHEME, compare=False)


def infer_topology(c: Checkpoint, scheme: NamingScheme = BERT_SCHEME) -> ModelTopology:
    embedding, other = [], []
    layers: dict[int, list[str]] = {}
    for name in c.names():
        blocks = []
        idx = scheme.layer_index(name)
        if idx is not None:
            blocks.append("layer")
        if any(name.startswith(p) for p in scheme.embedding_prefixes):
            blocks.append("embedding")
        if any(name.startswith(p) for p in scheme.other_prefixes):
            blocks.append("other")
        if len(blocks) > 1:
            raise TopologyError(f"tensor {name!r} matches multiple blocks: {blocks}")
        if idx is not None:
            layers.setdefault(idx, []).append(name)
        elif blocks == ["embedding"]:
            embedding.append(name)
        else:
            other.append(name)

    if not layers:
        raise TopologyError(f"no layer tensors found for pattern {scheme.layer_pattern!r}")
    indices = sorted(layers)
    if indices != list(range(len(indices))):
        raise TopologyError(f"non-contiguous layer indices: {indices}")
    return ModelTopology(
        num_layers=len(indices),
        embedding_tensors=tuple(embedding),
        layer_tensors=tuple(tuple(layers[i]) for i in indices),
        other_tensors=tuple(other),
        scheme=scheme,
    )


@dataclass(frozen=True)
class ParamReport:
    total: int
    embedding: int
    per_layer: tuple[int, ...]
    other: int

    @property
    def encoder_only(self) -> int:
        """Total without pooler/classifier/other tensors."""
        return self.embedding + sum(self.per_layer)

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "total_without_head": self.encoder_only,
            "embedding": self.embedding,
            "per_layer": list(self.per_layer),
            "other": self.other,
        }


def count_parameters(c: Checkpoint, t: ModelTopology) -> ParamReport:
    def n(names):
        return sum(int(c.tensors[name].size) for name in names)

    emb = n(t.embedding_tensors)
    per_layer = tuple(n(names) for names in t.layer_tensors)
    other = n(t.other_tensors)
    return ParamReport(emb + sum(per_layer) + other, emb, per_layer, other)
