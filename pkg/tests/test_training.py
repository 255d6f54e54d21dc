import math

import numpy as np
import pytest

from gemtune.model import EncoderConfig, build_model
from gemtune.records import encode_pair, serialize_record
from gemtune.synthetic import generate_pairs
from gemtune.tensor import Tensor
from gemtune.tokenizer import MASK_ID, NUM_RESERVED, build_vocab, encode, pad_batch
from gemtune.training import (
    AdamW,
    TrainConfig,
    evaluate,
    finetune,
    make_splits,
    mask_tokens,
    masked_loss,
    train_mlm,
)

from conftest import random_pair_batch


def separable_examples(num_pairs, seed, vocab=None, one_sided=0.0):
    pairs = generate_pairs(num_pairs, seed=seed, one_sided_negative_frac=one_sided)
    if vocab is None:
        vocab = build_vocab([serialize_record(r) for p in pairs for r in (p[0], p[1])])
    return [(encode(encode_pair(l, r, y).text, vocab, 128), y) for l, r, y in pairs], vocab


class FixedLogitsModel:
    """Evaluation stub returning canned logits."""

    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=float)

    def forward(self, seqs):
        return Tensor(self.logits[: len(seqs)])


def dummy_examples(labels):
    seq = random_pair_batch(50, 1, seed=0)[0]
    return [(seq, label) for label in labels]


class TestEvaluate:
    def test_all_correct_is_perfect(self):
        model = FixedLogitsModel([[0.0, 1.0], [1.0, 0.0], [0.0, 2.0]])
        metrics = evaluate(model, dummy_examples([1, 0, 1]))
        assert metrics["f1"] == metrics["precision"] == metrics["recall"] == 1.0

    def test_hand_counted_confusion(self):
        # TP=2 FP=1 FN=1 -> P = R = F1 = 2/3
        model = FixedLogitsModel([[0, 1], [0, 1], [0, 1], [1, 0], [1, 0]])
        metrics = evaluate(model, dummy_examples([1, 1, 0, 1, 0]))
        assert metrics["tp"] == 2 and metrics["fp"] == 1 and metrics["fn"] == 1
        assert metrics["precision"] == pytest.approx(2 / 3)
        assert metrics["recall"] == pytest.approx(2 / 3)
        assert metrics["f1"] == pytest.approx(2 / 3)

    def test_zero_denominators_defined_as_zero(self):
        model = FixedLogitsModel([[1.0, 0.0], [2.0, 1.0]])
        metrics = evaluate(model, dummy_examples([0, 0]))
        assert metrics["precision"] == metrics["recall"] == metrics["f1"] == 0.0

    def test_ties_predict_non_match(self):
        model = FixedLogitsModel([[0.5, 0.5]])
        metrics = evaluate(model, dummy_examples([1]))
        assert metrics["fn"] == 1 and metrics["tp"] == 0

    def test_row_shift_leaves_predictions_unchanged(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(12, 2))
        shifted = logits + rng.normal(size=(12, 1))  # common per-row constant
        labels = list(rng.integers(0, 2, size=12))
        base = evaluate(FixedLogitsModel(logits), dummy_examples(labels))
        moved = evaluate(FixedLogitsModel(shifted), dummy_examples(labels))
        assert base == moved

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty dataset"):
            evaluate(FixedLogitsModel([[0, 1]]), [])


class TestMakeSplits:
    def test_table_one_low_resource_semantics(self):
        # 67 positive / 500 negative, 10% rate -> 7 \ 50 = 57 training pairs
        pairs = [("l", "r", 1)] * 67 + [("l", "r", 0)] * 500
        splits = make_splits(pairs, rate=0.1, seed=3)
        assert len(splits.train) == 57
        labels = [label for _, _, label in splits.train]
        assert labels.count(1) == 7 and labels.count(0) == 50

    def test_full_rate_keeps_everything(self):
        pairs = [("l", "r", i % 2) for i in range(41)]
        assert len(make_splits(pairs, rate=1.0, seed=0).train) == 41

    def test_same_seed_same_splits(self):
        pairs = [(f"l{i}", f"r{i}", i % 2) for i in range(100)]
        a = make_splits(pairs, rate=0.3, seed=9, valid_frac=0.2, test_frac=0.2)
        b = make_splits(pairs, rate=0.3, seed=9, valid_frac=0.2, test_frac=0.2)
        assert a.train == b.train and a.valid == b.valid and a.test == b.test

    def test_valid_and_test_do_not_depend_on_rate(self):
        pairs = [(f"l{i}", f"r{i}", i % 2) for i in range(100)]
        low = make_splits(pairs, rate=0.1, seed=4, valid_frac=0.2, test_frac=0.2)
        high = make_splits(pairs, rate=1.0, seed=4, valid_frac=0.2, test_frac=0.2)
        assert low.valid == high.valid and low.test == high.test
        assert len(low.train) < len(high.train)

    def test_carved_splits_are_disjoint(self):
        pairs = [(f"l{i}", f"r{i}", i % 2) for i in range(60)]
        s = make_splits(pairs, rate=1.0, seed=5, valid_frac=0.25, test_frac=0.25)
        seen = [*s.train, *s.valid, *s.test]
        assert len(seen) == len(set(seen)) == 60

    @pytest.mark.parametrize("rate", [0.0, -0.2, 1.2])
    def test_rate_out_of_range_rejected(self, rate):
        with pytest.raises(ValueError, match="rate"):
            make_splits([("l", "r", 1)], rate=rate, seed=0)


class TestMaskTokens:
    def make_ids(self, rows, cols, vocab_size=500, seed=0):
        rng = np.random.default_rng(seed)
        ids = rng.integers(NUM_RESERVED, vocab_size, size=(rows, cols))
        return ids, np.ones_like(ids, dtype=float)

    def test_masked_count_within_binomial_bounds(self):
        ids, mask = self.make_ids(100, 100)
        batch = mask_tokens(ids, mask, 500, 0.25, np.random.default_rng(1))
        sigma = math.sqrt(10_000 * 0.25 * 0.75)
        assert 2500 - 3 * sigma <= batch.num_masked <= 2500 + 3 * sigma

    def test_reserved_and_padding_never_selected(self):
        rng = np.random.default_rng(2)
        ids = rng.integers(0, 50, size=(20, 30))
        mask = (rng.random((20, 30)) > 0.3).astype(float)
        batch = mask_tokens(ids, mask, 50, 0.9, rng)
        original = ids[batch.rows, batch.cols]
        assert np.all(original >= NUM_RESERVED)
        assert np.all(mask[batch.rows, batch.cols] == 1)

    def test_corruption_proportions(self):
        ids, mask = self.make_ids(120, 120)
        batch = mask_tokens(ids, mask, 500, 0.5, np.random.default_rng(3))
        corrupted = batch.input_ids[batch.rows, batch.cols]
        frac_mask = (corrupted == MASK_ID).mean()
        frac_same = (corrupted == batch.target_ids).mean()
        assert 0.77 <= frac_mask <= 0.83
        assert 0.07 <= frac_same <= 0.13

    def test_targets_hold_original_ids(self):
        ids, mask = self.make_ids(10, 20)
        batch = mask_tokens(ids, mask, 500, 0.4, np.random.default_rng(4))
        assert np.array_equal(batch.target_ids, ids[batch.rows, batch.cols])

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1])
    def test_degenerate_probability_rejected(self, p):
        ids, mask = self.make_ids(2, 4)
        with pytest.raises(ValueError, match="mask_prob"):
            mask_tokens(ids, mask, 500, p, np.random.default_rng(0))

    def test_train_config_rejects_degenerate_probability(self):
        with pytest.raises(ValueError, match="mask_prob"):
            TrainConfig(mask_prob=0.0)


class TestMlm:
    def test_initial_loss_near_log_vocab(self):
        vocab_size = 500
        model = build_model(EncoderConfig(vocab_size=vocab_size, config_kind="invertible_only"), seed=3)
        rng = np.random.default_rng(0)
        ids = rng.integers(NUM_RESERVED, vocab_size, size=(8, 40))
        mask = np.ones_like(ids, dtype=float)
        rows, cols = np.nonzero(rng.random((8, 40)) < 0.3)
        targets = rng.integers(0, vocab_size, size=len(rows))  # uniform-random targets
        from gemtune.tensor import cross_entropy

        loss = cross_entropy(model.mlm_logits(ids, mask, rows, cols), targets).item()
        assert abs(loss - math.log(vocab_size)) <= 0.1 * math.log(vocab_size)

    def test_repeated_sentence_memorized(self):
        """One repeated sentence is fully predictable, so the held-out
        masked loss heads toward zero given enough optimization steps."""
        vocab = build_vocab(["alpha beta gamma delta epsilon"], max_size=100)
        sequences = [encode("alpha beta gamma delta epsilon", vocab, 16) for _ in range(40)]
        model = build_model(EncoderConfig(vocab_size=len(vocab), config_kind="invertible_only"), seed=1)
        cfg = TrainConfig(seed=1, mlm_epochs=60, mask_prob=0.25, mlm_learning_rate=2e-3)
        report = train_mlm(model, sequences, cfg)
        assert report["final_heldout_loss"] < report["initial_heldout_loss"]
        assert report["final_heldout_loss"] < 0.5

    def test_only_invertible_parameters_move(self):
        vocab_size = 60
        model = build_model(EncoderConfig(vocab_size=vocab_size, config_kind="invertible_plus_task"), seed=2)
        rng = np.random.default_rng(5)
        sequences = [
            encode(" ".join(f"tok{i}" for i in rng.integers(0, 9, size=12)), _tok_vocab(), 32)
            for _ in range(24)
        ]
        before = {p.name: p.data.copy() for p in model.parameters()}
        train_mlm(model, sequences, TrainConfig(seed=2, mlm_epochs=1))
        for p in model.parameters():
            if p.name.startswith("inv_adapter."):
                continue
            assert np.array_equal(before[p.name], p.data), p.name
        moved = [p.name for p in model.inv_adapter.parameters() if not np.array_equal(before[p.name], p.data)]
        assert moved  # training actually updated the invertible adapter

    def test_non_invertible_model_rejected(self, desk_model):
        with pytest.raises(ValueError, match="invertible"):
            train_mlm(desk_model, [encode("a b", _tok_vocab(), 8)], TrainConfig())

    def test_empty_corpus_rejected(self):
        model = build_model(EncoderConfig(vocab_size=50, config_kind="invertible_only"), seed=0)
        with pytest.raises(ValueError, match="empty"):
            train_mlm(model, [], TrainConfig())


def _tok_vocab():
    return build_vocab([" ".join(f"tok{i}" for i in range(9))], max_size=60)


class TestFinetune:
    def test_empty_training_set_rejected(self, desk_model):
        with pytest.raises(ValueError, match="empty training"):
            finetune(desk_model, [], dummy_examples([1]), TrainConfig(epochs=1))

    def test_single_class_warning_recorded(self):
        model = build_model(EncoderConfig(vocab_size=50), seed=0)
        examples = [(s, 1) for s in random_pair_batch(50, 6, seed=1)]
        report = finetune(model, examples, examples, TrainConfig(epochs=1, learning_rates=(1e-4,)))
        assert any("single class" in w for w in report["warnings"])

    def test_zero_epochs_is_identity_training(self):
        examples = [(s, i % 2) for i, s in enumerate(random_pair_batch(50, 6, seed=2))]
        model = build_model(EncoderConfig(vocab_size=50), seed=11)
        fresh = build_model(EncoderConfig(vocab_size=50), seed=11)
        report = finetune(model, examples, [], TrainConfig(epochs=0))
        batch = [s for s, _ in examples]
        assert np.array_equal(model.forward(batch).data, fresh.forward(batch).data)
        assert report["selected"]["learning_rate"] is None

    def test_grid_accounting(self):
        examples = [(s, i % 2) for i, s in enumerate(random_pair_batch(50, 8, seed=3))]
        model = build_model(EncoderConfig(vocab_size=50), seed=0)
        report = finetune(model, examples, examples, TrainConfig(epochs=2))
        assert len(report["grid"]) == 3
        assert [e["learning_rate"] for e in report["grid"]] == [1e-4, 2e-4, 3e-4]
        assert all(len(e["epochs"]) == 2 for e in report["grid"])

    def test_first_batch_loss_matches_independent_recompute(self):
        examples = [(s, i % 2) for i, s in enumerate(random_pair_batch(50, 8, seed=4))]
        fresh = build_model(EncoderConfig(vocab_size=50), seed=5)
        model = build_model(EncoderConfig(vocab_size=50), seed=5)
        cfg = TrainConfig(epochs=1, learning_rates=(2e-4,), batch_size=64, seed=5)
        report = finetune(model, examples, examples, cfg)

        order = np.random.default_rng(cfg.seed).permutation(len(examples))
        batch = [examples[i] for i in order]
        logits = fresh.forward([s for s, _ in batch]).data
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        labels = np.array([y for _, y in batch])
        expected = -log_probs[np.arange(len(batch)), labels].mean()
        assert report["grid"][0]["epochs"][0]["train_loss"] == pytest.approx(expected, abs=1e-9)

    def test_frozen_parameters_bit_identical_after_training(self):
        examples = [(s, i % 2) for i, s in enumerate(random_pair_batch(50, 16, seed=6))]
        model = build_model(EncoderConfig(vocab_size=50), seed=1)
        frozen_before = {p.name: p.data.tobytes() for p in model.parameters() if p.frozen}
        finetune(model, examples, examples, TrainConfig(epochs=2, learning_rates=(3e-4,)))
        for p in model.parameters():
            if p.frozen:
                assert p.data.tobytes() == frozen_before[p.name], p.name

    def test_selected_snapshot_has_best_validation_f1(self):
        examples, vocab = separable_examples(64, seed=31)
        valid, _ = separable_examples(32, seed=32, vocab=vocab)
        model = build_model(EncoderConfig(vocab_size=len(vocab)), seed=2)
        report = finetune(model, examples, valid, TrainConfig(epochs=3, seed=2))
        all_f1 = [row["valid"]["f1"] for entry in report["grid"] for row in entry["epochs"]]
        assert report["selected"]["f1"] == max(all_f1)
        assert evaluate(model, valid)["f1"] == pytest.approx(report["selected"]["f1"])

    def test_reaches_high_f1_on_separable_pairs_within_20_epochs(self):
        """A planted-keyword task is separable, so near-perfect validation
        F1 is reachable quickly at a desk-scale learning rate."""
        train, vocab = separable_examples(240, seed=21)
        valid, _ = separable_examples(60, seed=22, vocab=vocab)
        model = build_model(EncoderConfig(vocab_size=len(vocab)), seed=7)
        report = finetune(model, train, valid, TrainConfig(learning_rates=(3e-3,), epochs=20, seed=7))
        assert report["selected"]["f1"] >= 0.95


class TestAdamW:
    def test_frozen_parameters_skipped(self):
        from gemtune.tensor import Parameter

        frozen = Parameter(np.ones(4), "f", frozen=True)
        live = Parameter(np.ones(4), "l")
        opt = AdamW([frozen, live], lr=0.1, cfg=TrainConfig())
        live.grad = np.ones(4)
        before = frozen.data.tobytes()
        opt.step()
        assert frozen.data.tobytes() == before
        assert not np.array_equal(live.data, np.ones(4))

    def test_decoupled_weight_decay_moves_zero_grad_params(self):
        from gemtune.tensor import Parameter

        p = Parameter(np.full(3, 2.0), "p")
        opt = AdamW([p], lr=0.5, cfg=TrainConfig(weight_decay=0.1))
        p.grad = np.zeros(3)
        opt.step()
        # update term is zero, decay term is lr * wd * theta
        assert np.allclose(p.data, 2.0 - 0.5 * 0.1 * 2.0)
