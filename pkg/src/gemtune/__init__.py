"""Adapter-tuning toolkit for generalized entity matching."""

from .records import (
    DocumentFrequencies,
    Record,
    RecordKind,
    SerializedPair,
    encode_pair,
    join_pair,
    record_from_json,
    record_to_json,
    serialize_record,
    tfidf_summarize,
)
from .tokenizer import TokenSequence, Vocabulary, build_vocab, decode, encode
from .tensor import Parameter, Tensor, backward, cross_entropy
from .model import (
    EncoderConfig,
    HoulsbyAdapter,
    InvertibleAdapter,
    MatchModel,
    build_model,
    count_parameters,
    forward,
)
from .training import (
    AdamW,
    MaskedBatch,
    Splits,
    TrainConfig,
    evaluate,
    finetune,
    make_splits,
    mask_tokens,
    train_mlm,
)
from .checkpoint import (
    CheckpointError,
    backbone_fingerprint,
    load_adapters,
    save_adapters,
    save_backbone,
    storage_report,
)
from .synthetic import generate_pairs, write_jsonl

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "CheckpointError",
    "DocumentFrequencies",
    "EncoderConfig",
    "HoulsbyAdapter",
    "InvertibleAdapter",
    "MaskedBatch",
    "MatchModel",
    "Parameter",
    "Record",
    "RecordKind",
    "SerializedPair",
    "Splits",
    "Tensor",
    "TokenSequence",
    "TrainConfig",
    "Vocabulary",
    "backbone_fingerprint",
    "backward",
    "build_model",
    "build_vocab",
    "count_parameters",
    "cross_entropy",
    "decode",
    "encode",
    "encode_pair",
    "evaluate",
    "finetune",
    "forward",
    "generate_pairs",
    "join_pair",
    "load_adapters",
    "make_splits",
    "mask_tokens",
    "record_from_json",
    "record_to_json",
    "save_adapters",
    "save_backbone",
    "serialize_record",
    "storage_report",
    "tfidf_summarize",
    "train_mlm",
    "write_jsonl",
]
