"""Command-line harness: dataset ingestion, vocabulary building,
masked-token pre-training, fine-tuning with grid search, evaluation,
and storage reporting.

Every run echoes its full spec into the emitted JSON report, so a run
directory is reproducible from its artifacts alone.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import click

from . import reporting
from .checkpoint import (
    CheckpointError,
    load_adapters,
    read_archive,
    save_adapters,
    save_backbone,
    storage_report,
)
from .model import CONFIG_KINDS, EncoderConfig, build_model, count_parameters
from .records import (
    DocumentFrequencies,
    Record,
    join_pair,
    record_from_json,
    serialize_record,
    tfidf_summarize,
)
from .synthetic import DEFAULT_KEYWORD, generate_pairs, write_jsonl
from .tokenizer import Vocabulary, build_vocab, encode
from .training import TrainConfig, evaluate, finetune, make_splits, train_mlm

DEFAULT_SEED = 7
OUT_DIR_ENVVAR = "GEMTUNE_OUT_DIR"

LabeledPair = tuple[Record, Record, "int | None"]


class DatasetError(ValueError):
    """Raised for malformed dataset files, with the offending line number."""


def ingest_dataset(path: str | Path) -> list[LabeledPair]:
    """Read a JSON-lines pair file into records with inferred kinds."""
    pairs: list[LabeledPair] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}: line {lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(row, dict):
                raise DatasetError(f"{path}: line {lineno}: expected a JSON object")
            for key in ("left", "right"):
                if key not in row:
                    raise DatasetError(f"{path}: line {lineno}: missing key {key!r}")
            label = row.get("label")
            if label not in (None, 0, 1):
                raise DatasetError(f"{path}: line {lineno}: label must be 0 or 1, got {label!r}")
            try:
                pair = (record_from_json(row["left"]), record_from_json(row["right"]), label)
            except ValueError as exc:
                raise DatasetError(f"{path}: line {lineno}: {exc}") from exc
            pairs.append(pair)
    return pairs


@dataclass
class RunSpec:
    """Everything one invocation needs; echoed into the report JSON."""

    subcommand: str
    out_dir: Path
    seed: int = DEFAULT_SEED
    paths: dict[str, str] = field(default_factory=dict)
    encoder_overrides: dict = field(default_factory=dict)
    train_overrides: dict = field(default_factory=dict)
    rate: float = 1.0
    summarize: bool = False
    summarize_budget: int | None = None
    options: dict = field(default_factory=dict)

    def echo(self) -> dict:
        spec = dataclasses.asdict(self)
        spec["out_dir"] = str(self.out_dir)
        return spec


def run(spec: RunSpec) -> int:
    """Execute one run; returns the process exit status."""
    try:
        for name, value in spec.paths.items():
            if not Path(value).exists():
                raise FileNotFoundError(f"{name} path does not exist: {value}")
        spec.out_dir.mkdir(parents=True, exist_ok=True)
        handler = _HANDLERS[spec.subcommand]
        handler(spec)
        return 0
    except (ValueError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1


def _labeled_examples(pairs: list[LabeledPair], vocab: Vocabulary, max_len: int, stats=None, budget=None):
    examples = []
    for left, right, label in pairs:
        if label is None:
            raise ValueError("dataset contains an unlabeled pair; labels are required here")
        left_text, right_text = serialize_record(left), serialize_record(right)
        if stats is not None:
            left_text = tfidf_summarize(left_text, stats, budget)
            right_text = tfidf_summarize(right_text, stats, budget)
        examples.append((encode(join_pair(left_text, right_text), vocab, max_len), label))
    return examples


def _entity_texts(pairs: list[LabeledPair]) -> list[str]:
    return [serialize_record(record) for pair in pairs for record in pair[:2]]


def _encoder_config(spec: RunSpec, vocab_size: int) -> EncoderConfig:
    return EncoderConfig(vocab_size=vocab_size, **spec.encoder_overrides)


def _train_config(spec: RunSpec) -> TrainConfig:
    return TrainConfig(seed=spec.seed, **spec.train_overrides)


def _load_frozen_stacks(spec: RunSpec, model) -> None:
    if "inv_adapters" in spec.paths:
        load_adapters(model, spec.paths["inv_adapters"], freeze=True)


def _build_model(spec: RunSpec, cfg: EncoderConfig):
    model = build_model(cfg, spec.seed, pretrained_adapters=spec.paths.get("pretrained_adapters"))
    _load_frozen_stacks(spec, model)
    return model


# ---------------------------------------------------------------------------
# subcommand bodies


def _run_gen_data(spec: RunSpec) -> None:
    opts = spec.options
    splits = {
        "train": generate_pairs(opts["num_train"], spec.seed, opts["positive_frac"], opts["keyword"]),
        "valid": generate_pairs(opts["num_valid"], spec.seed + 1, opts["positive_frac"], opts["keyword"]),
        "test": generate_pairs(opts["num_test"], spec.seed + 2, opts["positive_frac"], opts["keyword"]),
    }
    for name, pairs in splits.items():
        path = spec.out_dir / f"{name}.jsonl"
        write_jsonl(pairs, path)
        click.echo(f"wrote {len(pairs)} pairs to {path}")


def _run_build_vocab(spec: RunSpec) -> None:
    pairs = ingest_dataset(spec.paths["data"])
    if not pairs:
        raise ValueError("empty dataset")
    vocab = build_vocab(_entity_texts(pairs), spec.options["max_size"], spec.options["min_freq"])
    out_path = spec.out_dir / "vocab.txt"
    vocab.save(out_path)
    click.echo(f"wrote vocabulary of {len(vocab)} tokens to {out_path}")


def _run_finetune(spec: RunSpec) -> None:
    vocab = Vocabulary.load(spec.paths["vocab"])
    train_pairs = make_splits(ingest_dataset(spec.paths["train"]), spec.rate, spec.seed).train
    valid_pairs = ingest_dataset(spec.paths["valid"])
    cfg = _encoder_config(spec, len(vocab))

    stats = budget = None
    if spec.summarize:
        stats = DocumentFrequencies.from_texts(_entity_texts(train_pairs))
        budget = spec.summarize_budget or (cfg.max_len - 3) // 2
    train_examples = _labeled_examples(train_pairs, vocab, cfg.max_len, stats, budget)
    valid_examples = _labeled_examples(valid_pairs, vocab, cfg.max_len, stats, budget)

    model = _build_model(spec, cfg)
    report = finetune(model, train_examples, valid_examples, _train_config(spec))
    report["run_spec"] = spec.echo()
    report["encoder_config"] = dataclasses.asdict(cfg)
    if "test" in spec.paths:
        test_examples = _labeled_examples(ingest_dataset(spec.paths["test"]), vocab, cfg.max_len, stats, budget)
        report["test"] = evaluate(model, test_examples)

    adapter_bytes = save_adapters(model, spec.out_dir / "adapters.aem")
    backbone_bytes = save_backbone(model, spec.out_dir / "backbone.aem")
    report["checkpoint_bytes"] = {"adapters": adapter_bytes, "backbone": backbone_bytes}
    reporting.write_json(report, spec.out_dir / "report.json")
    reporting.write_finetune_csv(report, spec.out_dir / "metrics.csv")
    reporting.save_finetune_figure(report, spec.out_dir / "training_curves.png")
    selected = report["selected"]
    click.echo(
        f"best validation F1 {selected['f1']:.4f} at lr={selected['learning_rate']:g} "
        f"epoch {selected['epoch']}; artifacts in {spec.out_dir}"
    )
    if "test" in report:
        click.echo(f"test F1 {report['test']['f1']:.4f}")


def _run_train_mlm(spec: RunSpec) -> None:
    vocab = Vocabulary.load(spec.paths["vocab"])
    pairs = ingest_dataset(spec.paths["data"])
    if not pairs:
        raise ValueError("empty dataset")
    cfg = _encoder_config(spec, len(vocab))
    if not cfg.uses_invertible:
        raise ValueError(
            f"train-mlm needs an invertible configuration, got config_kind={cfg.config_kind!r}"
        )
    sequences = [encode(text, vocab, cfg.max_len) for text in _entity_texts(pairs)]
    model = build_model(cfg, spec.seed)
    report = train_mlm(model, sequences, _train_config(spec))
    report["run_spec"] = spec.echo()
    report["encoder_config"] = dataclasses.asdict(cfg)

    ckpt_bytes = save_adapters(model, spec.out_dir / "inv_adapters.aem", include_head=False, only_prefixes=("inv_adapter.",))
    report["checkpoint_bytes"] = {"inv_adapters": ckpt_bytes}
    reporting.write_json(report, spec.out_dir / "mlm_report.json")
    reporting.write_mlm_csv(report, spec.out_dir / "mlm_metrics.csv")
    reporting.save_mlm_figure(report, spec.out_dir / "mlm_curve.png")
    click.echo(
        f"held-out masked loss {report['initial_heldout_loss']:.4f} -> "
        f"{report['final_heldout_loss']:.4f}; artifacts in {spec.out_dir}"
    )


def _run_evaluate(spec: RunSpec) -> None:
    vocab = Vocabulary.load(spec.paths["vocab"])
    pairs = ingest_dataset(spec.paths["data"])
    if not pairs:
        raise ValueError("empty dataset")
    metadata, _ = read_archive(spec.paths["adapters"])
    cfg_dict = dict(metadata["config"])
    if cfg_dict["vocab_size"] != len(vocab):
        raise CheckpointError(
            f"checkpoint vocab_size {cfg_dict['vocab_size']} does not match vocabulary of {len(vocab)}"
        )
    cfg = EncoderConfig(**cfg_dict)
    model = build_model(cfg, metadata["seed"], pretrained_adapters=spec.paths.get("pretrained_adapters"))
    _load_frozen_stacks(spec, model)
    load_adapters(model, spec.paths["adapters"], freeze=False)

    examples = _labeled_examples(pairs, vocab, cfg.max_len)
    metrics = evaluate(model, examples)
    report = {"run_spec": spec.echo(), "encoder_config": cfg_dict, "metrics": metrics}
    reporting.write_json(report, spec.out_dir / "metrics.json")
    click.echo(
        f"precision {metrics['precision']:.4f} recall {metrics['recall']:.4f} "
        f"F1 {metrics['f1']:.4f} on {len(examples)} pairs"
    )


def _run_report_storage(spec: RunSpec) -> None:
    adapter_paths = spec.options["adapter_paths"]
    report = storage_report(spec.paths["backbone"], adapter_paths)
    report["run_spec"] = spec.echo()
    reporting.write_json(report, spec.out_dir / "storage.json")
    reporting.write_storage_csv(report, spec.out_dir / "storage.csv")
    reporting.save_storage_figure(report, spec.out_dir / "storage_contrast.png")
    click.echo(
        f"backbone {report['backbone_bytes']} bytes, "
        f"{len(report['per_adapter_bytes'])} adapter file(s), ratio {report['ratio']:.4f}"
    )


_HANDLERS = {
    "gen-data": _run_gen_data,
    "build-vocab": _run_build_vocab,
    "finetune": _run_finetune,
    "train-mlm": _run_train_mlm,
    "evaluate": _run_evaluate,
    "report-storage": _run_report_storage,
}


# ---------------------------------------------------------------------------
# click surface


def _out_dir_option():
    return click.option(
        "--out-dir",
        type=click.Path(path_type=Path),
        default="runs",
        envvar=OUT_DIR_ENVVAR,
        show_default=True,
        help=f"Output directory (env: {OUT_DIR_ENVVAR}).",
    )


def _seed_option():
    return click.option("--seed", type=int, default=DEFAULT_SEED, show_default=True, help="Global RNG seed.")


_ENCODER_OPTIONS = (
    click.option("--hidden-dim", type=int, default=None, help="Encoder hidden width."),
    click.option("--num-layers", type=int, default=None, help="Encoder block count."),
    click.option("--num-heads", type=int, default=None, help="Attention head count."),
    click.option("--ffn-dim", type=int, default=None, help="Feed-forward inner width."),
    click.option("--bottleneck-dim", type=int, default=None, help="Adapter bottleneck width."),
    click.option("--max-len", type=int, default=None, help="Maximum token-sequence length."),
)


def _with(options):
    def apply(func):
        for option in reversed(options):
            func = option(func)
        return func

    return apply


def _collect_encoder_overrides(kwargs: dict, config_kind: str | None = None) -> dict:
    names = ("hidden_dim", "num_layers", "num_heads", "ffn_dim", "bottleneck_dim", "max_len")
    overrides = {name: kwargs[name] for name in names if kwargs.get(name) is not None}
    if config_kind is not None:
        overrides["config_kind"] = config_kind
    return overrides


def _parse_learning_rates(text: str | None) -> tuple[float, ...] | None:
    if text is None:
        return None
    try:
        rates = tuple(float(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise click.BadParameter(f"cannot parse learning rates from {text!r}") from exc
    return rates


@click.group()
@click.version_option(package_name="gemtune")
def main() -> None:
    """Adapter-tuning toolkit for generalized entity matching.

    A frozen transformer backbone is adapted to a matching task by
    training only small bottleneck adapters and the classifier head.
    """


@main.command("gen-data")
@_out_dir_option()
@_seed_option()
@click.option("--num-train", type=int, default=320, show_default=True)
@click.option("--num-valid", type=int, default=80, show_default=True)
@click.option("--num-test", type=int, default=80, show_default=True)
@click.option("--positive-frac", type=float, default=0.5, show_default=True)
@click.option("--keyword", default=DEFAULT_KEYWORD, show_default=True, help="Planted match keyword.")
def gen_data_cmd(out_dir, seed, num_train, num_valid, num_test, positive_frac, keyword):
    """Generate the bundled synthetic matching dataset."""
    spec = RunSpec(
        subcommand="gen-data",
        out_dir=out_dir,
        seed=seed,
        options={
            "num_train": num_train,
            "num_valid": num_valid,
            "num_test": num_test,
            "positive_frac": positive_frac,
            "keyword": keyword,
        },
    )
    sys.exit(run(spec))


@main.command("build-vocab")
@_out_dir_option()
@click.option("--data", required=True, type=click.Path(path_type=Path), help="JSONL pair file.")
@click.option("--max-size", type=int, default=2000, show_default=True)
@click.option("--min-freq", type=int, default=1, show_default=True)
def build_vocab_cmd(out_dir, data, max_size, min_freq):
    """Build a word-level vocabulary from serialized entities."""
    spec = RunSpec(
        subcommand="build-vocab",
        out_dir=out_dir,
        paths={"data": str(data)},
        options={"max_size": max_size, "min_freq": min_freq},
    )
    sys.exit(run(spec))


@main.command("finetune")
@_out_dir_option()
@_seed_option()
@_with(_ENCODER_OPTIONS)
@click.option("--train", "train_path", required=True, type=click.Path(path_type=Path))
@click.option("--valid", "valid_path", required=True, type=click.Path(path_type=Path))
@click.option("--test", "test_path", type=click.Path(path_type=Path), default=None)
@click.option("--vocab", "vocab_path", required=True, type=click.Path(path_type=Path))
@click.option(
    "--config-kind",
    type=click.Choice([k for k in CONFIG_KINDS if k != "invertible_only"]),
    default="task_only",
    show_default=True,
)
@click.option("--pretrained-adapters", type=click.Path(path_type=Path), default=None, help="Frozen lower-stack adapter checkpoint.")
@click.option("--inv-adapters", type=click.Path(path_type=Path), default=None, help="Frozen invertible adapter checkpoint.")
@click.option("--learning-rates", default=None, help="Comma-separated grid, e.g. 1e-4,2e-4,3e-4.")
@click.option("--epochs", type=int, default=None, help="Fine-tuning epochs per grid entry.")
@click.option("--batch-size", type=int, default=None)
@click.option("--weight-decay", type=float, default=None)
@click.option("--rate", type=float, default=1.0, show_default=True, help="Low-resource training rate in (0, 1].")
@click.option("--summarize/--no-summarize", default=False, show_default=True, help="TF-IDF summarization of long entities.")
@click.option("--summarize-budget", type=int, default=None, help="Token budget per entity when summarizing.")
def finetune_cmd(
    out_dir, seed, train_path, valid_path, test_path, vocab_path, config_kind,
    pretrained_adapters, inv_adapters, learning_rates, epochs, batch_size,
    weight_decay, rate, summarize, summarize_budget, **encoder_kwargs,
):
    """Fine-tune adapters and head over the learning-rate grid."""
    paths = {"train": str(train_path), "valid": str(valid_path), "vocab": str(vocab_path)}
    if test_path is not None:
        paths["test"] = str(test_path)
    if pretrained_adapters is not None:
        paths["pretrained_adapters"] = str(pretrained_adapters)
    if inv_adapters is not None:
        paths["inv_adapters"] = str(inv_adapters)
    train_overrides = {}
    if learning_rates is not None:
        train_overrides["learning_rates"] = _parse_learning_rates(learning_rates)
    for name, value in (("epochs", epochs), ("batch_size", batch_size), ("weight_decay", weight_decay)):
        if value is not None:
            train_overrides[name] = value
    spec = RunSpec(
        subcommand="finetune",
        out_dir=out_dir,
        seed=seed,
        paths=paths,
        encoder_overrides=_collect_encoder_overrides(encoder_kwargs, config_kind),
        train_overrides=train_overrides,
        rate=rate,
        summarize=summarize,
        summarize_budget=summarize_budget,
    )
    sys.exit(run(spec))


@main.command("train-mlm")
@_out_dir_option()
@_seed_option()
@_with(_ENCODER_OPTIONS)
@click.option("--data", "data_path", required=True, type=click.Path(path_type=Path), help="JSONL pair file; labels optional.")
@click.option("--vocab", "vocab_path", required=True, type=click.Path(path_type=Path))
@click.option(
    "--config-kind",
    type=click.Choice(["invertible_only", "invertible_plus_task"]),
    default="invertible_only",
    show_default=True,
)
@click.option("--mask-prob", type=float, default=None, help="Masking probability in (0, 1).")
@click.option("--epochs", "mlm_epochs", type=int, default=None)
@click.option("--batch-size", "mlm_batch_size", type=int, default=None)
@click.option("--learning-rate", "mlm_learning_rate", type=float, default=None)
def train_mlm_cmd(
    out_dir, seed, data_path, vocab_path, config_kind, mask_prob,
    mlm_epochs, mlm_batch_size, mlm_learning_rate, **encoder_kwargs,
):
    """Train the invertible adapter on unlabeled task text."""
    train_overrides = {}
    for name, value in (
        ("mask_prob", mask_prob),
        ("mlm_epochs", mlm_epochs),
        ("mlm_batch_size", mlm_batch_size),
        ("mlm_learning_rate", mlm_learning_rate),
    ):
        if value is not None:
            train_overrides[name] = value
    spec = RunSpec(
        subcommand="train-mlm",
        out_dir=out_dir,
        seed=seed,
        paths={"data": str(data_path), "vocab": str(vocab_path)},
        encoder_overrides=_collect_encoder_overrides(encoder_kwargs, config_kind),
        train_overrides=train_overrides,
    )
    sys.exit(run(spec))


@main.command("evaluate")
@_out_dir_option()
@click.option("--data", "data_path", required=True, type=click.Path(path_type=Path))
@click.option("--vocab", "vocab_path", required=True, type=click.Path(path_type=Path))
@click.option("--adapters", "adapters_path", required=True, type=click.Path(path_type=Path))
@click.option("--pretrained-adapters", type=click.Path(path_type=Path), default=None)
@click.option("--inv-adapters", type=click.Path(path_type=Path), default=None)
def evaluate_cmd(out_dir, data_path, vocab_path, adapters_path, pretrained_adapters, inv_adapters):
    """Evaluate a saved adapter checkpoint on a labeled pair file."""
    paths = {"data": str(data_path), "vocab": str(vocab_path), "adapters": str(adapters_path)}
    if pretrained_adapters is not None:
        paths["pretrained_adapters"] = str(pretrained_adapters)
    if inv_adapters is not None:
        paths["inv_adapters"] = str(inv_adapters)
    spec = RunSpec(subcommand="evaluate", out_dir=out_dir, paths=paths)
    sys.exit(run(spec))


@main.command("report-storage")
@_out_dir_option()
@click.option("--backbone", "backbone_path", required=True, type=click.Path(path_type=Path))
@click.argument("adapter_paths", nargs=-1, required=True, type=click.Path(path_type=Path))
def report_storage_cmd(out_dir, backbone_path, adapter_paths):
    """Byte accounting for a backbone file and its adapter checkpoints."""
    spec = RunSpec(
        subcommand="report-storage",
        out_dir=out_dir,
        paths={"backbone": str(backbone_path), **{f"adapter_{i}": str(p) for i, p in enumerate(adapter_paths)}},
        options={"adapter_paths": [str(p) for p in adapter_paths]},
    )
    sys.exit(run(spec))


if __name__ == "__main__":
    main()
