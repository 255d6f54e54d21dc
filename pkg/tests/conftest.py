import numpy as np
import pytest

from gemtune.model import EncoderConfig, build_model
from gemtune.tokenizer import CLS_ID, SEP_ID, TokenSequence, Vocabulary


@pytest.fixture
def tiny_vocab() -> Vocabulary:
    return Vocabulary.from_tokens(list("abcdefghij"))


@pytest.fixture
def desk_model():
    return build_model(EncoderConfig(vocab_size=50), seed=7)


def random_pair_batch(vocab_size: int, count: int, seed: int, max_len: int = 128) -> list[TokenSequence]:
    """Well-formed random pair sequences for forward-pass tests."""
    rng = np.random.default_rng(seed)
    batch = []
    for _ in range(count):
        left = rng.integers(7, vocab_size, size=int(rng.integers(3, 12))).tolist()
        right = rng.integers(7, vocab_size, size=int(rng.integers(3, 12))).tolist()
        ids = [CLS_ID, *left, SEP_ID, *right, SEP_ID]
        batch.append(TokenSequence(ids=ids, attention_mask=[1] * len(ids), max_len=max_len))
    return batch


def central_difference(build_loss, param, h: float = 1e-5) -> np.ndarray:
    """Finite-difference gradient oracle, independent of the autodiff path."""
    grad = np.zeros_like(param.data)
    flat_values = param.data.reshape(-1)
    flat_grad = grad.reshape(-1)
    for i in range(flat_values.size):
        original = flat_values[i]
        flat_values[i] = original + h
        plus = build_loss().item()
        flat_values[i] = original - h
        minus = build_loss().item()
        flat_values[i] = original
        flat_grad[i] = (plus - minus) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())
