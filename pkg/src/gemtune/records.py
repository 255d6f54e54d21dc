"""Heterogeneous records and their special-token text serialization.

A record is structured (ordered attribute/value fields), semi-structured
(a finite JSON-like tree), or plain text. Non-text records serialize to a
marker string of the form ``[COL] name [VAL] value ...``; candidate pairs
wrap two serialized entities as ``[CLS] left [SEP] right [SEP]``.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Sequence

COL = "[COL]"
VAL = "[VAL]"
CLS = "[CLS]"
SEP = "[SEP]"

MARKERS = frozenset({COL, VAL, CLS, SEP})


class RecordKind(Enum):
    STRUCTURED = "structured"
    SEMI_STRUCTURED = "semi_structured"
    TEXT = "text"


def _scalar_str(value: Any) -> str:
    """Render a JSON scalar; null becomes the empty string."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return value
    return str(value)


def _is_scalar(value: Any) -> bool:
    return value is None or isinstance(value, (str, int, float, bool))


def _normalize(text: str) -> str:
    return " ".join(text.split())


@dataclass(frozen=True)
class Record:
    """One entity in any of the three supported shapes."""

    kind: RecordKind
    content: Any

    @staticmethod
    def structured(fields: Sequence[tuple[str, str]]) -> "Record":
        fields = tuple((str(name), _scalar_str(value)) for name, value in fields)
        names = [name for name, _ in fields]
        if any(not name.strip() for name in names):
            raise ValueError("structured attribute names must be non-empty")
        if len(set(names)) != len(names):
            raise ValueError("structured attribute names must be unique")
        return Record(RecordKind.STRUCTURED, fields)

    @staticmethod
    def semi_structured(tree: Any) -> "Record":
        return Record(RecordKind.SEMI_STRUCTURED, tree)

    @staticmethod
    def text(value: str) -> "Record":
        return Record(RecordKind.TEXT, str(value))


def record_from_json(value: Any) -> Record:
    """Infer the record kind from a decoded JSON value.

    A string maps to text, an object of scalar values to structured, and
    any nested object or array to semi-structured.
    """
    if isinstance(value, str):
        return Record.text(value)
    if isinstance(value, dict):
        if all(_is_scalar(v) for v in value.values()):
            return Record.structured(list(value.items()))
        return Record.semi_structured(value)
    if isinstance(value, list):
        return Record.semi_structured(value)
    return Record.text(_scalar_str(value))


def record_to_json(record: Record) -> Any:
    """Inverse of :func:`record_from_json` for dataset writers."""
    if record.kind is RecordKind.TEXT:
        return record.content
    if record.kind is RecordKind.STRUCTURED:
        return dict(record.content)
    return record.content


def flatten_tree(node: Any) -> str:
    """Depth-first flattening of a semi-structured value.

    Maps render as comma-joined ``key: value`` pairs, lists join their
    items with ``, ``, and scalars render as whitespace-normalized text.
    """
    if isinstance(node, dict):
        return ", ".join(f"{_normalize(str(k))}: {flatten_tree(v)}" for k, v in node.items())
    if isinstance(node, (list, tuple)):
        return ", ".join(flatten_tree(item) for item in node)
    return _normalize(_scalar_str(node))


def serialize_record(record: Record) -> str:
    """Convert a record to its marker-token text form.

    Field order is preserved; all inter-token spacing is normalized to
    single spaces. Text records pass through unchanged.
    """
    if record.kind is RecordKind.TEXT:
        return record.content
    if record.kind is RecordKind.STRUCTURED:
        parts = [f"{COL} {_normalize(name)} {VAL} {_normalize(value)}" for name, value in record.content]
        return _normalize(" ".join(parts))
    tree = record.content
    if isinstance(tree, dict):
        parts = [f"{COL} {_normalize(str(k))} {VAL} {flatten_tree(v)}" for k, v in tree.items()]
        return _normalize(" ".join(parts))
    # top-level arrays and scalars have no attribute names to mark
    return flatten_tree(tree)


@dataclass(frozen=True)
class SerializedPair:
    """A serialized candidate pair with an optional binary match label."""

    text: str
    label: int | None = None


def join_pair(left_text: str, right_text: str) -> str:
    """Wrap two serialized entity texts as ``[CLS] left [SEP] right [SEP]``."""
    return f"{CLS} {left_text} {SEP} {right_text} {SEP}"


def encode_pair(left: Record, right: Record, label: int | None = None) -> SerializedPair:
    """Serialize two records and join them into a classifier input pair."""
    if label not in (None, 0, 1):
        raise ValueError(f"label must be 0, 1 or None, got {label!r}")
    return SerializedPair(text=join_pair(serialize_record(left), serialize_record(right)), label=label)


@dataclass
class DocumentFrequencies:
    """Document-frequency table over whitespace-split lowercased tokens."""

    num_docs: int = 0
    counts: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "DocumentFrequencies":
        counts: Counter[str] = Counter()
        num_docs = 0
        for text in texts:
            num_docs += 1
            counts.update(set(text.lower().split()))
        return cls(num_docs=num_docs, counts=dict(counts))

    def idf(self, token: str) -> float:
        """Smoothed inverse document frequency: ln((1+N)/(1+df)) + 1."""
        df = self.counts.get(token.lower(), 0)
        return math.log((1 + self.num_docs) / (1 + df)) + 1.0


def tfidf_summarize(text: str, stats: DocumentFrequencies, budget: int) -> str:
    """Trim a serialized entity to at most ``budget`` tokens.

    Marker tokens and attribute-name tokens are always kept. Value tokens
    are ranked by idf (earlier occurrences win ties) and the best are
    retained, in their original order, until the budget is filled.
    """
    tokens = text.split()
    if any(t in MARKERS for t in tokens):
        in_value = False
        value_positions: list[int] = []
        for i, token in enumerate(tokens):
            if token in MARKERS:
                in_value = token == VAL
            elif in_value:
                value_positions.append(i)
    else:
        # text-kind entities carry no markers: every token is a candidate
        value_positions = list(range(len(tokens)))

    mandatory = len(tokens) - len(value_positions)
    if budget < mandatory:
        raise ValueError(
            f"budget {budget} cannot cover the {mandatory} mandatory marker and attribute-name tokens"
        )
    slots = budget - mandatory
    if slots >= len(value_positions):
        return " ".join(tokens)

    ranked = sorted(value_positions, key=lambda i: (-stats.idf(tokens[i]), i))
    kept = set(ranked[:slots])
    out = [t for i, t in enumerate(tokens) if i not in set(value_positions) or i in kept]
    return " ".join(out)
