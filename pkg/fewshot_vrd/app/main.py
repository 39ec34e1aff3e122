# app/main.py
"""Command-line entry point: ``python -m app.main <command> ...``.

Every command writes ``<primary output>.manifest.json`` recording its argv,
resolved configuration, seed and the sha256 digests of inputs and outputs.
``replay --manifest`` re-runs a recorded command and checks that the outputs
come out identical. Failures print one JSON line on stderr.
"""
import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence

import structlog

from app.core.config import (
    EpisodeConfig,
    ReconstructionConfig,
    SyntheticSpec,
    TrainConfig,
    build_config,
    settings,
    split_config_file,
)
from app.core.errors import ConfigurationError, ReplayMismatchError, UsageError, VRDError
from app.core.logging import setup_logging
from app.core.manifest import digests, read_manifest, write_manifest
from app.models.schemas import MetricPolarity, TemplateName
from app.services.caption_parser import format_triplets_tsv, load_lexicon, parse_corpus, read_triplets_tsv
from app.services.corpus_io import feature_paths, load_captions, load_dataset
from app.services.eval_metrics import REPORT_KS, read_report, render_report_table, write_report
from app.services.experiments import evaluate_model
from app.services.fewshot_trainer import (
    InstancePool,
    benchmark_relations,
    load_checkpoint,
    new_model,
    read_relation_list,
    sample_support,
    save_checkpoint,
    train,
    write_loss_curve,
)
from app.services.fusion_core import CandidateSet
from app.services.relation_kg import apply_filters, build_graph, filter_spec, read_anchor_classes, read_graph, write_graph
from app.services.synthetic import generate_synthetic, write_benchmark
from app.services.text_knowledge import load_embedding_table
from app.services.vrk_encoder import load_encoder, save_encoder, train_reconstruction

logger = structlog.get_logger(__name__)

CUSTOM_PREFIX = "custom:"


class CommandResult(NamedTuple):
    primary: Path
    config: Dict[str, Any]
    seed: Optional[int]
    inputs: List[Path]
    outputs: List[Path]


class CLIParser(argparse.ArgumentParser):
    """Raises UsageError instead of printing usage and exiting."""

    def error(self, message: str):  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


def _input(path: str) -> Path:
    resolved = Path(path)
    if not resolved.exists():
        raise UsageError(f"input not found: {resolved}")
    return resolved


def _dataset_files(path: Path) -> List[Path]:
    return [path, *(p for p in feature_paths(path) if p.exists())]


def _file_values(args: argparse.Namespace, *models) -> List[Dict[str, Any]]:
    if args.config is None:
        return [{} for _ in models]
    return split_config_file(_input(args.config), *models)


def _set(values: Dict[str, Any], **flags: Any) -> Dict[str, Any]:
    """Flags given on the command line override file values."""
    values.update({k: v for k, v in flags.items() if v is not None})
    return values


def _loss_path(primary: Path) -> Path:
    return primary.with_name(primary.stem + ".loss.csv")


# commands


def cmd_parse_captions(args: argparse.Namespace) -> CommandResult:
    captions_path = _input(args.input)
    lexicon_path = _input(args.lexicon) if args.lexicon else settings.lexicon_path
    triplets = parse_corpus(load_captions(captions_path), load_lexicon(lexicon_path), n_jobs=args.jobs)
    out = Path(args.out)
    out.write_text(format_triplets_tsv(triplets), encoding="utf-8")
    return CommandResult(out, {"lexicon": str(lexicon_path)}, None, [captions_path, lexicon_path], [out])


def cmd_build_kg(args: argparse.Namespace) -> CommandResult:
    sources = [_input(p) for p in args.input]
    graph = build_graph(t for path in sources for t in read_triplets_tsv(path))
    out = Path(args.out)
    write_graph(out, graph)
    return CommandResult(out, {}, None, sources, [out])


def cmd_filter_kg(args: argparse.Namespace) -> CommandResult:
    graph_path = _input(args.input)
    inputs = [graph_path]
    anchors: frozenset = frozenset()
    if args.anchors:
        inputs.append(_input(args.anchors))
        anchors = read_anchor_classes(inputs[-1])
    spec = filter_spec(args.mode, args.relations, anchors)
    out = Path(args.out)
    write_graph(out, apply_filters(read_graph(graph_path), spec))
    config = {"mode": spec.node_mode.value, "relations": args.relations, "anchors": sorted(anchors)}
    return CommandResult(out, config, None, inputs, [out])


def cmd_train_vrk(args: argparse.Namespace) -> CommandResult:
    graph_path = _input(args.graph)
    inputs = [graph_path]
    candidates: List[str] = []
    if args.candidates:
        inputs.append(_input(args.candidates))
        candidates = read_relation_list(inputs[-1])
    (values,) = _file_values(args, ReconstructionConfig)
    _set(values, seed=args.seed, epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch_size)
    config = build_config(ReconstructionConfig, **values)

    result = train_reconstruction(read_graph(graph_path), config, candidates)
    out = Path(args.out)
    save_encoder(out, result.encoder)
    write_loss_curve(_loss_path(out), result.loss_curve)
    return CommandResult(out, config.model_dump(mode="json"), config.seed, inputs, [out, _loss_path(out)])


def cmd_gen_synth(args: argparse.Namespace) -> CommandResult:
    (values,) = _file_values(args, SyntheticSpec)
    _set(values, seed=args.seed, holdout_fraction=args.holdout, noise=args.noise, distractor_classes=args.distractors)
    spec = build_config(SyntheticSpec, **values)
    paths = write_benchmark(Path(args.out), generate_synthetic(spec))
    outputs = [*paths.values(), *feature_paths(paths["train"]), *feature_paths(paths["test"])]
    inputs = [settings.vocabulary_path] + ([Path(args.config)] if args.config else [])
    return CommandResult(paths["partition"], spec.model_dump(mode="json"), spec.seed, inputs, outputs)


def _episode_values(args: argparse.Namespace, values: Dict[str, Any], inputs: List[Path]) -> Dict[str, Any]:
    if args.benchmark and args.benchmark.startswith(CUSTOM_PREFIX):
        relation_file = _input(args.benchmark[len(CUSTOM_PREFIX) :])
        inputs.append(relation_file)
        values.update(benchmark="custom", relations=read_relation_list(relation_file))
    elif args.benchmark:
        values["benchmark"] = args.benchmark
    return _set(values, shots=args.shots, negative_ratio=args.negative_ratio, seed=args.seed)


def cmd_train(args: argparse.Namespace) -> CommandResult:
    train_path, table_path = _input(args.train), _input(args.embeddings)
    inputs = _dataset_files(train_path) + [table_path]
    train_values, episode_values = _file_values(args, TrainConfig, EpisodeConfig)
    _set(
        train_values,
        seed=args.seed,
        template=args.template,
        metric_polarity=args.metric_polarity,
        epochs=args.epochs,
        learning_rate=args.lr,
        hidden_dim=args.hidden_dim,
        use_textual=False if args.no_textual else None,
        use_vrk=False if args.no_vrk else None,
    )
    config = build_config(TrainConfig, **train_values)
    episode = build_config(EpisodeConfig, **_episode_values(args, episode_values, inputs))

    vrk = None
    if config.use_vrk:
        if not args.vrk:
            raise UsageError("--vrk is required unless --no-vrk is given")
        inputs.append(_input(args.vrk))
        vrk = load_encoder(inputs[-1])

    dataset = load_dataset(train_path)
    if dataset.feature_dim is None:
        raise ConfigurationError(f"{train_path}: training split is empty")
    candidates = CandidateSet(benchmark_relations(episode))
    support = sample_support(InstancePool(dataset.records), episode, candidates)
    model = new_model(candidates, load_embedding_table(table_path), dataset.feature_dim, config, vrk)
    result = train(model, support, config)

    out = Path(args.out)
    save_checkpoint(out, result.model, support, extra={"train_accuracy": result.accuracy})
    write_loss_curve(_loss_path(out), result.loss_curve)
    run_config = {"train": config.model_dump(mode="json"), "episode": episode.model_dump(mode="json")}
    return CommandResult(out, run_config, config.seed, inputs, [out, _loss_path(out)])


def _ks(text: str) -> List[int]:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise UsageError(f"--ks expects comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise UsageError(f"--ks values must be positive, got {text!r}")
    return ks


def cmd_eval(args: argparse.Namespace) -> CommandResult:
    checkpoint_path, test_path = _input(args.checkpoint), _input(args.test)
    ks = _ks(args.ks)
    model, seen, _ = load_checkpoint(checkpoint_path)
    config = {
        "graph_constraint": args.graph_constraint,
        "ks": ks,
        "model": model.config.model_dump(mode="json"),
        "relations": list(model.candidates.relations),
    }
    report = evaluate_model(model, seen, load_dataset(test_path).records, args.graph_constraint, ks, config)
    out = Path(args.out)
    write_report(out, report)
    return CommandResult(out, config, model.config.seed, [checkpoint_path, *_dataset_files(test_path)], [out])


def cmd_report(args: argparse.Namespace) -> CommandResult:
    report_path = _input(args.input)
    table = render_report_table(read_report(report_path))
    out = Path(args.out)
    out.write_text(table + "\n", encoding="utf-8")
    print(table)
    return CommandResult(out, {}, None, [report_path], [out])


def cmd_replay(args: argparse.Namespace) -> None:
    manifest_file = _input(args.manifest)
    manifest = read_manifest(manifest_file)
    if manifest.command == "replay":
        raise UsageError("a replay manifest cannot be replayed")
    _execute(build_parser().parse_args(manifest.argv), manifest.argv)
    current = digests(Path(p) for p in manifest.outputs)
    mismatched = [p for p, digest in manifest.outputs.items() if current.get(p) != digest]
    if mismatched:
        raise ReplayMismatchError(str(manifest_file), mismatched)
    logger.info("replay.verified", manifest=str(manifest_file), outputs=len(manifest.outputs))


# parser


def build_parser() -> CLIParser:
    parser = CLIParser(prog="fewshot-vrd", description="Few-shot visual relation detection with caption knowledge")
    parser.add_argument("--log-level", default=None, help="override VRD_LOG_LEVEL")
    parser.add_argument("--log-json", action="store_true", default=None, help="render log events as JSON")
    commands = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = commands.add_parser("parse-captions", help="extract triplets from a caption corpus")
    p.add_argument("--in", dest="input", required=True, help="captions JSONL")
    p.add_argument("--out", required=True, help="triplet TSV")
    p.add_argument("--lexicon", help="word<TAB>TAG lexicon (default: bundled)")
    p.add_argument("--jobs", type=int, default=1, help="parallel parser workers")
    p.set_defaults(handler=cmd_parse_captions)

    p = commands.add_parser("build-kg", help="count triplets into a knowledge graph")
    p.add_argument("--in", dest="input", nargs="+", required=True, help="one or more triplet TSVs")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_build_kg)

    p = commands.add_parser("filter-kg", help="apply a node and relation regime to a graph")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["0hop", "1hop", "all"], default="all")
    p.add_argument("--anchors", help="benchmark class list, one per line")
    p.add_argument("--relations", default="all", help="all | top:<k>")
    p.set_defaults(handler=cmd_filter_kg)

    p = commands.add_parser("train-vrk", help="train the relation encoder by masked reconstruction")
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--candidates", help="relation list whose tokens join the encoder vocabulary")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--config", help="key=value file")
    p.set_defaults(handler=cmd_train_vrk)

    p = commands.add_parser("gen-synth", help="write a synthetic compositional benchmark")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--holdout", type=float, help="share of class pairs kept out of training")
    p.add_argument("--noise", type=float, help="feature noise around each class center")
    p.add_argument("--distractors", type=int, help="caption-only classes")
    p.add_argument("--config", help="key=value file")
    p.set_defaults(handler=cmd_gen_synth)

    p = commands.add_parser("train", help="sample an N-way K-shot support set and train the fusion head")
    p.add_argument("--train", required=True, help="training dataset JSONL")
    p.add_argument("--embeddings", required=True, help="token embedding table")
    p.add_argument("--vrk", help="trained relation encoder")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--benchmark", help="50way | 25way | 20way | custom:<file>")
    p.add_argument("--shots", type=int)
    p.add_argument("--negative-ratio", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--template", choices=[t.value for t in TemplateName])
    p.add_argument("--metric-polarity", choices=[m.value for m in MetricPolarity])
    p.add_argument("--no-textual", action="store_true", help="static word vectors for predicates")
    p.add_argument("--no-vrk", action="store_true", help="drop the knowledge prior")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--config", help="key=value file (training and episode keys)")
    p.set_defaults(handler=cmd_train)

    p = commands.add_parser("eval", help="rank test pairs and write the recall report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True, help="report JSON")
    p.add_argument("--graph-constraint", action="store_true", help="one predicate per pair")
    p.add_argument("--ks", default=",".join(str(k) for k in REPORT_KS))
    p.set_defaults(handler=cmd_eval)

    p = commands.add_parser("report", help="render a report as a table")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True, help="text table")
    p.set_defaults(handler=cmd_report)

    p = commands.add_parser("replay", help="re-run the command recorded in a manifest and verify its outputs")
    p.add_argument("--manifest", required=True)
    p.set_defaults(handler=cmd_replay)
    return parser


def _execute(args: argparse.Namespace, argv: Sequence[str]) -> None:
    result = args.handler(args)
    if result is None:
        return
    path = write_manifest(
        result.primary, args.command, list(argv), result.config, result.seed, result.inputs, result.outputs
    )
    logger.info("cli.done", command=args.command, output=str(result.primary), manifest=str(path))


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        setup_logging(args.log_level, args.log_json)
        _execute(args, argv)
    except VRDError as exc:
        print(json.dumps({"error": exc.kind, "message": str(exc)}), file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1
    except SystemExit as exc:
        # --help
        return exc.code if isinstance(exc.code, int) else 0
    return 0


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
