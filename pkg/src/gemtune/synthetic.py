"""Synthetic matching dataset with a planted keyword.

Positive pairs carry the keyword in both records, negative pairs in at
most one, so the task is separable. Each side independently takes one
of the three record shapes, which exercises the whole serialization
surface.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .records import Record, record_to_json

Pair = tuple[Record, Record, int]

DEFAULT_KEYWORD = "zephyrite"

_WORDS = (
    "camera lens tripod flash sensor zoom battery charger strap case "
    "laptop screen keyboard trackpad speaker webcam adapter cable dock "
    "stand novel author chapter edition cover paperback preface index"
).split()


def _make_record(rng: np.random.Generator, keyword: str | None) -> Record:
    words = [_WORDS[i] for i in rng.integers(0, len(_WORDS), int(rng.integers(3, 7)))]
    if keyword is not None:
        words.insert(int(rng.integers(0, len(words) + 1)), keyword)
    shape = int(rng.integers(0, 3))
    if shape == 0:
        return Record.structured(
            [("name", " ".join(words[:2])), ("notes", " ".join(words[2:]))]
        )
    if shape == 1:
        return Record.semi_structured(
            {"title": " ".join(words[:2]), "specs": {"detail": " ".join(words[2:])}}
        )
    return Record.text(" ".join(words))


def generate_pairs(
    num_pairs: int,
    seed: int,
    positive_frac: float = 0.5,
    keyword: str = DEFAULT_KEYWORD,
    one_sided_negative_frac: float = 0.15,
) -> list[Pair]:
    """Deterministic labeled pairs with exact class counts."""
    rng = np.random.default_rng(seed)
    num_pos = int(round(positive_frac * num_pairs))
    pairs: list[Pair] = []
    for _ in range(num_pos):
        pairs.append((_make_record(rng, keyword), _make_record(rng, keyword), 1))
    for _ in range(num_pairs - num_pos):
        if rng.random() < one_sided_negative_frac:
            sides = (keyword, None) if rng.random() < 0.5 else (None, keyword)
        else:
            sides = (None, None)
        pairs.append((_make_record(rng, sides[0]), _make_record(rng, sides[1]), 0))
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]


def write_jsonl(pairs: list[Pair], path: str | Path, include_labels: bool = True) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for left, right, label in pairs:
            row: dict = {"left": record_to_json(left), "right": record_to_json(right)}
            if include_labels and label is not None:
                row["label"] = label
            fh.write(json.dumps(row) + "\n")
