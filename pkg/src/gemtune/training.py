"""Frozen-backbone optimization: fine-tuning, masked-token training,
learning-rate grid search, evaluation, and split protocol."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict
from math import floor
from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, backward, cross_entropy
from .tokenizer import MASK_ID, NUM_RESERVED, TokenSequence, pad_batch
from .model import MatchModel, count_parameters

Example = tuple[TokenSequence, int]

DEFAULT_LEARNING_RATES = (1e-4, 2e-4, 3e-4)


@dataclass
class TrainConfig:
    """Hyper-parameters for fine-tuning and masked-token training."""

    learning_rates: tuple[float, ...] = DEFAULT_LEARNING_RATES
    batch_size: int = 32
    epochs: int = 20
    weight_decay: float = 0.01
    seed: int = 7
    mask_prob: float = 0.25
    mlm_learning_rate: float = 2e-4
    mlm_batch_size: int = 16
    mlm_epochs: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if not self.learning_rates or any(lr <= 0 for lr in self.learning_rates):
            raise ValueError(f"learning rates must be positive, got {self.learning_rates}")
        if not 0.0 < self.mask_prob < 1.0:
            raise ValueError(f"mask_prob must lie strictly between 0 and 1, got {self.mask_prob}")


class AdamW:
    """Adam with decoupled weight decay; frozen parameters are skipped."""

    def __init__(self, params: Sequence[Parameter], lr: float, cfg: TrainConfig):
        self.params = [p for p in params if not p.frozen]
        self.lr = lr
        self.cfg = cfg
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        cfg = self.cfg
        self.step_count += 1
        bias1 = 1.0 - cfg.beta1**self.step_count
        bias2 = 1.0 - cfg.beta2**self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + cfg.adam_eps)
            p.data -= self.lr * (update + cfg.weight_decay * p.data)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: MatchModel, examples: Sequence[Example], batch_size: int = 64) -> dict[str, float]:
    """Precision/recall/F1 on the match class; ties predict non-match."""
    if not examples:
        raise ValueError("empty dataset")
    tp = fp = fn = tn = 0
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        logits = model.forward([seq for seq, _ in chunk]).data
        preds = (logits[:, 1] > logits[:, 0]).astype(int)
        for pred, (_, label) in zip(preds, chunk):
            pred = int(pred)
            if label == 1:
                tp += pred
                fn += 1 - pred
            else:
                fp += pred
                tn += 1 - pred
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "tp": tp,
        "fp": fp,
        "fn": fn,
        "tn": tn,
    }


# ---------------------------------------------------------------------------
# fine-tuning with learning-rate grid search


def _snapshot(params: Sequence[Parameter]) -> dict[str, np.ndarray]:
    return {p.name: p.data.copy() for p in params}

def _restore(params: Sequence[Parameter], state: dict[str, np.ndarray]) -> None:
    for p in params:
        np.copyto(p.data, state[p.name])


def finetune(
    model: MatchModel,
    train: Sequence[Example],
    valid: Sequence[Example],
    cfg: TrainConfig,
) -> dict:
    """Sweep the learning-rate grid and keep the best validation-F1 snapshot.

    Every grid entry restarts from the same initial trainable state and
    the same shuffling stream, trains for ``cfg.epochs``, and is scored
    on validation F1 after each epoch. The winning snapshot (strictly
    best F1; earlier grid entries win ties) is loaded back into the
    model before returning the report.
    """
    if not train:
        raise ValueError("empty training set")
    if cfg.epochs > 0 and not valid:
        raise ValueError("empty validation set")
    warnings: list[str] = []
    train_labels = {label for _, label in train}
    if len(train_labels) == 1:
        warnings.append(f"training set contains a single class ({train_labels.pop()})")

    started = time.perf_counter()
    trainable = model.trainable_parameters()
    initial = _snapshot(trainable)
    best_state = initial
    best = {"f1": -1.0, "learning_rate": None, "epoch": None}
    grid_report = []

    for lr in cfg.learning_rates:
        _restore(trainable, initial)
        optimizer = AdamW(trainable, lr, cfg)
        rng = np.random.default_rng(cfg.seed)
        epoch_rows = []
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(train))
            losses = []
            for start in range(0, len(order), cfg.batch_size):
                batch = [train[i] for i in order[start : start + cfg.batch_size]]
                logits = model.forward([seq for seq, _ in batch])
                loss = cross_entropy(logits, np.array([label for _, label in batch]))
                optimizer.zero_grad()
                backward(loss)
                optimizer.step()
                losses.append(loss.item())
            metrics = evaluate(model, valid)
            epoch_rows.append(
                {
                    "epoch": epoch + 1,
                    "train_loss": float(np.mean(losses)),
                    "valid": {k: metrics[k] for k in ("precision", "recall", "f1")},
                }
            )
            if metrics["f1"] > best["f1"]:
                best = {"f1": metrics["f1"], "learning_rate": lr, "epoch": epoch + 1}
                best_state = _snapshot(trainable)
        grid_report.append({"learning_rate": lr, "epochs": epoch_rows})

    _restore(trainable, best_state)
    return {
        "train_config": asdict(cfg),
        "grid": grid_report,
        "selected": best,
        "parameter_counts": count_parameters(model),
        "warnings": warnings,
        "wall_clock_seconds": time.perf_counter() - started,
    }


# ---------------------------------------------------------------------------
# masked-token training of the invertible adapter


@dataclass
class MaskedBatch:
    """A corrupted batch plus the positions and originals to predict."""

    input_ids: np.ndarray
    attention_mask: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    target_ids: np.ndarray

    @property
    def num_masked(self) -> int:
        return len(self.target_ids)


def mask_tokens(
    ids: np.ndarray,
    mask: np.ndarray,
    vocab_size: int,
    mask_prob: float,
    rng: np.random.Generator,
) -> MaskedBatch:
    """Select non-special tokens independently with ``mask_prob``.

    Selected tokens become [MASK] 80% of the time, a random non-reserved
    token 10%, and stay unchanged 10%. Reserved tokens and padding are
    never selected.
    """
    if not 0.0 < mask_prob < 1.0:
        raise ValueError(f"mask_prob must lie strictly between 0 and 1, got {mask_prob}")
    eligible = (ids >= NUM_RESERVED) & (mask > 0)
    selected = eligible & (rng.random(ids.shape) < mask_prob)
    rows, cols = np.nonzero(selected)
    targets = ids[rows, cols].copy()
    corrupted = ids.copy()
    roll = rng.random(len(rows))
    to_mask = roll < 0.8
    to_random = (roll >= 0.8) & (roll < 0.9)
    corrupted[rows[to_mask], cols[to_mask]] = MASK_ID
    if to_random.any() and vocab_size > NUM_RESERVED:
        corrupted[rows[to_random], cols[to_random]] = rng.integers(
            NUM_RESERVED, vocab_size, size=int(to_random.sum())
        )
    return MaskedBatch(corrupted, mask, rows, cols, targets)


def masked_loss(model: MatchModel, batch: MaskedBatch):
    logits = model.mlm_logits(batch.input_ids, batch.attention_mask, batch.rows, batch.cols)
    return cross_entropy(logits, batch.target_ids)


def _mean_masked_loss(
    model: MatchModel,
    sequences: Sequence[TokenSequence],
    cfg: TrainConfig,
    rng_seed: int,
) -> float:
    """Masked loss over a corpus slice with reproducible masking."""
    rng = np.random.default_rng(rng_seed)
    total, count = 0.0, 0
    for start in range(0, len(sequences), cfg.mlm_batch_size):
        chunk = sequences[start : start + cfg.mlm_batch_size]
        ids, mask = pad_batch(list(chunk))
        batch = mask_tokens(ids, mask, model.config.vocab_size, cfg.mask_prob, rng)
        if batch.num_masked == 0:
            continue
        total += masked_loss(model, batch).item() * batch.num_masked
        count += batch.num_masked
    if count == 0:
        raise ValueError("no maskable tokens in the evaluation slice")
    return total / count


def train_mlm(model: MatchModel, sequences: Sequence[TokenSequence], cfg: TrainConfig) -> dict:
    """Train the invertible adapter on the masked-token objective.

    Only the invertible adapter's parameters are optimized; everything
    else stays fixed. A held-out tail of the corpus (10%, at least one
    sequence) tracks generalization under a fixed masking stream.
    """
    if model.inv_adapter is None:
        raise ValueError("masked-token training requires an invertible adapter configuration")
    if not sequences:
        raise ValueError("empty corpus")
    started = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(sequences))
    holdout_size = max(1, len(sequences) // 10)
    holdout = [sequences[i] for i in order[:holdout_size]]
    training = [sequences[i] for i in order[holdout_size:]] or holdout

    eval_seed = cfg.seed + 0x5EED
    inv_params = model.inv_adapter.parameters()
    optimizer = AdamW(inv_params, cfg.mlm_learning_rate, cfg)
    initial_loss = _mean_masked_loss(model, holdout, cfg, eval_seed)
    epoch_losses = []
    for _ in range(cfg.mlm_epochs):
        perm = rng.permutation(len(training))
        losses = []
        for start in range(0, len(perm), cfg.mlm_batch_size):
            chunk = [training[i] for i in perm[start : start + cfg.mlm_batch_size]]
            ids, mask = pad_batch(chunk)
            batch = mask_tokens(ids, mask, model.config.vocab_size, cfg.mask_prob, rng)
            if batch.num_masked == 0:
                continue
            loss = masked_loss(model, batch)
            optimizer.zero_grad()
            backward(loss)
            optimizer.step()
            losses.append(loss.item())
        epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))
    final_loss = _mean_masked_loss(model, holdout, cfg, eval_seed)
    return {
        "train_config": asdict(cfg),
        "initial_heldout_loss": initial_loss,
        "final_heldout_loss": final_loss,
        "epoch_losses": epoch_losses,
        "trainable_parameters": sum(p.size for p in inv_params),
        "wall_clock_seconds": time.perf_counter() - started,
    }


# ---------------------------------------------------------------------------
# split protocol


@dataclass
class Splits:
    train: list
    valid: list = field(default_factory=list)
    test: list = field(default_factory=list)


def _round_half_up(x: float) -> int:
    return int(floor(x + 0.5))


def make_splits(
    pairs: Sequence,
    rate: float,
    seed: int,
    valid_frac: float = 0.0,
    test_frac: float = 0.0,
    label_fn: Callable = lambda pair: pair[-1],
) -> Splits:
    """Stratified splits with a low-resource training rate.

    Validation and test carve-outs are drawn first, so they do not
    depend on ``rate``; the training split is a per-class sample of the
    remaining pool sized round-half-up(rate * class size). Deterministic
    for a given seed.
    """
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"rate must lie in (0, 1], got {rate}")
    if valid_frac < 0 or test_frac < 0 or valid_frac + test_frac >= 1.0:
        raise ValueError(f"invalid valid/test fractions {valid_frac}/{test_frac}")
    rng = np.random.default_rng(seed)
    by_label: dict = {}
    for i, pair in enumerate(pairs):
        by_label.setdefault(label_fn(pair), []).append(i)
    train_idx: list[int] = []
    valid_idx: list[int] = []
    test_idx: list[int] = []
    for label in sorted(by_label):
        indices = np.array(by_label[label])
        indices = indices[rng.permutation(len(indices))]
        n = len(indices)
        n_test = _round_half_up(test_frac * n)
        n_valid = _round_half_up(valid_frac * n)
        test_idx.extend(indices[:n_test])
        valid_idx.extend(indices[n_test : n_test + n_valid])
        pool = indices[n_test + n_valid :]
        train_idx.extend(pool[: _round_half_up(rate * len(pool))])
    return Splits(
        train=[pairs[i] for i in train_idx],
        valid=[pairs[i] for i in valid_idx],
        test=[pairs[i] for i in test_idx],
    )
