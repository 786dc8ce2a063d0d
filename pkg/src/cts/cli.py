"""Command-line surface.

Subcommands: compress, score, emit {sft|rm-prompts|rm-rows}, ablate, stats.
Config precedence: CLI flag > config file > environment > built-in default.
Progress and warnings go to stderr; data artifacts go to files; nothing is
printed to stdout unless asked for (--print-report, stats).

Exit codes: 0 success; 1 per-record failures without --lenient; 2 usage or
configuration error; 3 backend unreachable after retries; 130 interrupted.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from dataclasses import dataclass
from typing import Any, Iterator

from .backends import HttpBackend, HttpBackendConfig, LogprobBackend, ToyBackend, ToyLmSpec
from .dataset import (
    JsonlWriter,
    read_compressed_dataset,
    read_dataset,
    read_rm_examples,
    write_dataset,
    write_jsonl,
)
from .emitters import build_rm_training_rows, emit_rm_prompts, emit_sft
from .errors import BackendUnavailable, ConfigError, CtsError, DatasetError
from .report import ReportBuilder, RunReport, report_from_records
from .runner import map_ordered
from .selector import (
    DEFAULT_CONDITION_TEMPLATE,
    SelectionConfig,
    compress_instance,
    score_rows_to_dicts,
)

logger = logging.getLogger("cts")

ENV_BACKEND_URL = "CTS_BACKEND_URL"
ENV_BACKEND_TOKEN = "CTS_BACKEND_TOKEN"

EXIT_OK = 0
EXIT_FAILURES = 1
EXIT_USAGE = 2
EXIT_BACKEND = 3
EXIT_INTERRUPT = 130


@dataclass
class AblationMode:
    """One cell of the 2x2 grid: conditioning on/off x standard/tuned backend."""

    name: str
    conditional: bool
    rm_profile: str


ABLATION_MODES = (
    AblationMode("base", conditional=False, rm_profile="standard"),
    AblationMode("conditional", conditional=True, rm_profile="standard"),
    AblationMode("rm_tuned", conditional=False, rm_profile="tuned"),
    AblationMode("proposed", conditional=True, rm_profile="tuned"),
)

# settings that may come from a JSON config file
_CONFIG_KEYS = {
    "ratio",
    "conditional",
    "condition_template",
    "segment_budget",
    "boundary_slack",
    "scope",
    "score_space",
    "iterative_original_prefix",
    "backend",
    "backend_tuned",
    "workers",
    "lenient",
}

_DEFAULTS: dict[str, Any] = {
    "ratio": None,
    "conditional": True,
    "condition_template": DEFAULT_CONDITION_TEMPLATE,
    "segment_budget": 512,
    "boundary_slack": 32,
    "scope": "global",
    "score_space": "ppl-diff",
    "iterative_original_prefix": False,
    "backend": None,
    "backend_tuned": None,
    "workers": 1,
    "lenient": False,
}


def _load_config_file(path: str) -> dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path!r}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path!r} must hold a JSON object")
    unknown = set(data) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"config file {path!r} has unknown keys: {sorted(unknown)}")
    return data


def resolve_settings(args: argparse.Namespace, *, default_ratio: float | None = None) -> dict[str, Any]:
    """Merge defaults, environment, config file, and CLI flags (highest wins)."""
    settings = dict(_DEFAULTS)
    env_url = os.environ.get(ENV_BACKEND_URL)
    if env_url:
        settings["backend"] = env_url
    config_path = getattr(args, "config", None)
    if config_path:
        settings.update(_load_config_file(config_path))
    for key in _CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    if settings["ratio"] is None:
        settings["ratio"] = default_ratio
    if settings["ratio"] is None:
        raise ConfigError("a retention ratio is required (--ratio or config file)")
    return settings


def selection_config_from(settings: dict[str, Any]) -> SelectionConfig:
    config = SelectionConfig(
        alpha=float(settings["ratio"]),
        conditional=bool(settings["conditional"]),
        condition_template=settings["condition_template"],
        segment_budget=int(settings["segment_budget"]),
        boundary_slack=int(settings["boundary_slack"]),
        score_space=str(settings["score_space"]).replace("-", "_"),
        selection_scope=str(settings["scope"]).replace("-", "_"),
        iterative_original_prefix=bool(settings["iterative_original_prefix"]),
    )
    config.validate()
    return config


def build_backend(descriptor: str | None) -> LogprobBackend:
    """Parse ``toy:<spec.json>`` or ``http:<url>`` (plain URLs also accepted)."""
    if not descriptor:
        raise ConfigError(
            f"no backend configured (use --backend or the {ENV_BACKEND_URL} environment variable)"
        )
    if descriptor.startswith("toy:"):
        return ToyBackend(ToyLmSpec.from_file(descriptor[len("toy:") :]))
    url = None
    if descriptor.startswith(("http://", "https://")):
        url = descriptor
    elif descriptor.startswith("http:"):
        url = descriptor[len("http:") :]
    if url:
        token = os.environ.get(ENV_BACKEND_TOKEN) or None
        return HttpBackend(HttpBackendConfig(base_url=url, token=token))
    raise ConfigError(f"unrecognized backend descriptor {descriptor!r}")


def _schema_from(args: argparse.Namespace) -> dict[str, str]:
    schema = {}
    for canon, flag in (("problem", "problem_key"), ("thinking", "thinking_key"),
                        ("answer", "answer_key"), ("id", "id_key")):
        value = getattr(args, flag, None)
        if value:
            schema[canon] = value
    return schema


def _config_echo(settings: dict[str, Any], config: SelectionConfig, args: argparse.Namespace) -> dict[str, Any]:
    echo = dataclasses.asdict(config)
    echo["backend"] = settings["backend"]
    echo["workers"] = int(settings["workers"])
    echo["lenient"] = bool(settings["lenient"])
    echo["input"] = getattr(args, "input", None)
    echo["output"] = getattr(args, "output", None)
    return echo


def _emit_report(report: RunReport, args: argparse.Namespace) -> None:
    payload = report.to_dict()
    report_path = getattr(args, "report", None)
    if report_path:
        with open(report_path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, ensure_ascii=False, indent=2)
            fh.write("\n")
    if getattr(args, "print_report", False):
        print(json.dumps(payload, ensure_ascii=False))
    logger.info(
        "done: %d ok, %d failed, mean actual ratio %s",
        report.instances_ok,
        report.instances_failed,
        "n/a" if report.mean_actual_ratio is None else f"{report.mean_actual_ratio:.4f}",
    )


def _compress_stream(
    args: argparse.Namespace,
    config: SelectionConfig,
    backend: LogprobBackend,
    workers: int,
    output_path: str | None,
    dump_path: str | None,
) -> tuple[ReportBuilder, bool]:
    """Run the pipeline over the input file; returns (builder, interrupted)."""
    read_errors: list[DatasetError] = []
    instances = read_dataset(args.input, _schema_from(args), errors=read_errors)
    builder = ReportBuilder()

    def work(instance):
        try:
            return compress_instance(instance, config, backend), None
        except BackendUnavailable:
            raise
        except CtsError as exc:
            return None, (instance.id, exc)

    interrupted = False
    try:
        with (JsonlWriter(dump_path) if dump_path else nullcontext()) as dump:

            def results() -> Iterator:
                for outcome, failure in map_ordered(work, instances, workers):
                    if failure is not None:
                        instance_id, exc = failure
                        builder.add_failed()
                        logger.warning("instance %s failed: %s", instance_id, exc)
                        continue
                    record, rows, selection = outcome
                    builder.add_ok(record)
                    if dump is not None:
                        for row in score_rows_to_dicts(record.id, rows, selection.kept_mask):
                            dump.write(row)
                    yield record

            if output_path:
                write_dataset(results(), output_path)
            else:
                for _ in results():
                    pass
    except KeyboardInterrupt:
        interrupted = True
    for err in read_errors:
        logger.warning("skipped record: %s", err)
    builder.add_failed(len(read_errors))
    return builder, interrupted


def cmd_compress(args: argparse.Namespace) -> int:
    settings = resolve_settings(args)
    config = selection_config_from(settings)
    backend = build_backend(settings["backend"])
    workers = int(settings["workers"])
    started = time.monotonic()
    builder, interrupted = _compress_stream(
        args, config, backend, workers, args.output, getattr(args, "score_dump", None)
    )
    report = builder.build(time.monotonic() - started, _config_echo(settings, config, args))
    _emit_report(report, args)
    if interrupted:
        return EXIT_INTERRUPT
    if report.instances_failed and not settings["lenient"]:
        return EXIT_FAILURES
    return EXIT_OK


def cmd_score(args: argparse.Namespace) -> int:
    settings = resolve_settings(args, default_ratio=1.0)
    config = selection_config_from(settings)
    backend = build_backend(settings["backend"])
    workers = int(settings["workers"])
    started = time.monotonic()
    builder, interrupted = _compress_stream(args, config, backend, workers, None, args.output)
    report = builder.build(time.monotonic() - started, _config_echo(settings, config, args))
    _emit_report(report, args)
    if interrupted:
        return EXIT_INTERRUPT
    if report.instances_failed and not settings["lenient"]:
        return EXIT_FAILURES
    return EXIT_OK


def cmd_emit(args: argparse.Namespace) -> int:
    lenient = bool(args.lenient)
    errors: list[DatasetError] = []
    if args.target == "sft":
        failed = 0

        def records():
            nonlocal failed
            for instance in read_compressed_dataset(args.input, errors=errors):
                try:
                    rec = emit_sft(instance)
                except DatasetError as exc:
                    failed += 1
                    logger.warning("skipped instance: %s", exc)
                    continue
                yield {"prompt": rec.prompt, "completion": rec.completion}

        write_jsonl(records(), args.output)
        failed += len(errors)
        for err in errors:
            logger.warning("skipped record: %s", err)
        return EXIT_OK if (failed == 0 or lenient) else EXIT_FAILURES

    if args.target == "rm-prompts":
        examples = read_rm_examples(args.input, errors=errors)
        write_jsonl(
            ({"source_id": r.source_id, "instruction": r.instruction} for r in emit_rm_prompts(examples)),
            args.output,
        )
        for err in errors:
            logger.warning("skipped record: %s", err)
        return EXIT_OK if (not errors or lenient) else EXIT_FAILURES

    # rm-rows
    if not args.responses:
        raise ConfigError("emit rm-rows requires --responses")
    examples = list(read_rm_examples(args.input, errors=errors))
    responses = list(_read_responses(args.responses, errors))
    join_errors: list[DatasetError] = []
    rows = build_rm_training_rows(examples, responses, errors=join_errors)
    write_jsonl(
        (
            {
                "source_id": r.source_id,
                "instruction_context": r.instruction_context,
                "target": r.target,
                "flagged": r.flagged,
            }
            for r in rows
        ),
        args.output,
    )
    for err in errors + join_errors:
        logger.warning("%s", err)
    if join_errors or (errors and not lenient):
        return EXIT_FAILURES
    return EXIT_OK


def _read_responses(path: str, errors: list[DatasetError]) -> Iterator[tuple[str, str]]:
    from .dataset import _iter_json_lines  # same lenient line handling

    for line_no, obj in _iter_json_lines(path, False, errors):
        if "source_id" not in obj or "compressed_steps" not in obj:
            errors.append(DatasetError("missing source_id or compressed_steps", line_no, path))
            continue
        steps = obj["compressed_steps"]
        if isinstance(steps, list):
            steps = "\n".join(str(s) for s in steps)
        yield str(obj["source_id"]), str(steps)


def cmd_ablate(args: argparse.Namespace) -> int:
    settings = resolve_settings(args)
    workers = int(settings["workers"])
    backends = {
        "standard": build_backend(settings["backend"]),
        "tuned": build_backend(settings["backend_tuned"] or settings["backend"]),
    }
    os.makedirs(args.output, exist_ok=True)
    reports: dict[str, RunReport] = {}
    exit_code = EXIT_OK
    for mode in ABLATION_MODES:
        mode_settings = dict(settings)
        mode_settings["conditional"] = mode.conditional
        config = selection_config_from(mode_settings)
        out_path = os.path.join(args.output, f"{mode.name}.jsonl")
        started = time.monotonic()
        builder, interrupted = _compress_stream(
            args, config, backends[mode.rm_profile], workers, out_path, None
        )
        echo = _config_echo(mode_settings, config, args)
        echo["mode"] = mode.name
        echo["rm_profile"] = mode.rm_profile
        echo["output"] = out_path
        reports[mode.name] = builder.build(time.monotonic() - started, echo)
        if interrupted:
            return EXIT_INTERRUPT
        if builder.failed and not settings["lenient"]:
            exit_code = EXIT_FAILURES
    print(f"{'mode':<12} {'mean_actual_ratio':>18} {'kept_tokens_total':>18}", file=sys.stderr)
    for name, report in reports.items():
        mean = "n/a" if report.mean_actual_ratio is None else f"{report.mean_actual_ratio:.4f}"
        print(f"{name:<12} {mean:>18} {report.kept_tokens_total:>18}", file=sys.stderr)
    payload = {name: report.to_dict() for name, report in reports.items()}
    if getattr(args, "report", None):
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, ensure_ascii=False, indent=2)
            fh.write("\n")
    if getattr(args, "print_report", False):
        print(json.dumps(payload, ensure_ascii=False))
    return exit_code


def cmd_stats(args: argparse.Namespace) -> int:
    errors: list[DatasetError] = []
    report = report_from_records(read_compressed_dataset(args.input, errors=errors), source=args.input)
    for err in errors:
        logger.warning("skipped record: %s", err)
    print(json.dumps(report.to_dict(), ensure_ascii=False))
    return EXIT_OK


def _ratio_type(value: str) -> float:
    ratio = float(value)
    if not (0.0 < ratio <= 1.0):
        raise argparse.ArgumentTypeError(f"ratio must be in (0, 1], got {value}")
    return ratio


def _add_io_arguments(parser: argparse.ArgumentParser, *, output_required: bool = True) -> None:
    parser.add_argument("--input", "-i", required=True, help="input JSONL path")
    parser.add_argument("--output", "-o", required=output_required, help="output path")


def _add_selection_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--ratio", type=_ratio_type, default=None, help="retention ratio in (0, 1]")
    parser.add_argument(
        "--conditional",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="score against the answer-conditioned context (default: on)",
    )
    parser.add_argument("--condition-template", dest="condition_template", default=None,
                        help="conditioning text; {answer} required unless empty, {problem} optional")
    parser.add_argument("--segment-budget", dest="segment_budget", type=int, default=None)
    parser.add_argument("--boundary-slack", dest="boundary_slack", type=int, default=None)
    parser.add_argument("--scope", choices=["global", "per-segment"], default=None)
    parser.add_argument("--score-space", dest="score_space", choices=["ppl-diff", "bits-diff"], default=None)
    parser.add_argument(
        "--iterative-original-prefix",
        dest="iterative_original_prefix",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="per-segment scope: condition on the original instead of the compressed prefix",
    )


def _add_runtime_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--backend", default=None, help="toy:<spec.json> or http:<url>")
    parser.add_argument("--workers", type=int, default=None, help="concurrent scoring workers")
    parser.add_argument("--lenient", action="store_true", default=None,
                        help="exit 0 even when some records fail")
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--report", default=None, help="write the run report JSON here")
    parser.add_argument("--print-report", dest="print_report", action="store_true",
                        help="print the run report JSON to stdout")


def _add_schema_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--problem-key", dest="problem_key", default=None)
    parser.add_argument("--thinking-key", dest="thinking_key", default=None)
    parser.add_argument("--answer-key", dest="answer_key", default=None)
    parser.add_argument("--id-key", dest="id_key", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cts",
        description="Compress chain-of-thought training data by conditional token importance.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_compress = sub.add_parser("compress", help="write a compressed dataset")
    _add_io_arguments(p_compress)
    _add_selection_arguments(p_compress)
    _add_runtime_arguments(p_compress)
    _add_schema_arguments(p_compress)
    p_compress.add_argument("--score-dump", dest="score_dump", default=None,
                            help="also write the per-token score dump JSONL here")
    p_compress.set_defaults(func=cmd_compress)

    p_score = sub.add_parser("score", help="write the per-token score dump without a dataset")
    _add_io_arguments(p_score)
    _add_selection_arguments(p_score)
    _add_runtime_arguments(p_score)
    _add_schema_arguments(p_score)
    p_score.set_defaults(func=cmd_score)

    p_emit = sub.add_parser("emit", help="render training artifacts")
    p_emit.add_argument("target", choices=["sft", "rm-prompts", "rm-rows"])
    _add_io_arguments(p_emit)
    p_emit.add_argument("--responses", default=None,
                        help="rm-rows: JSONL of {source_id, compressed_steps}")
    p_emit.add_argument("--lenient", action="store_true", default=False)
    p_emit.set_defaults(func=cmd_emit)

    p_ablate = sub.add_parser("ablate", help="run the four ablation modes over one input")
    _add_io_arguments(p_ablate)
    _add_selection_arguments(p_ablate)
    _add_runtime_arguments(p_ablate)
    _add_schema_arguments(p_ablate)
    p_ablate.add_argument("--backend-tuned", dest="backend_tuned", default=None,
                          help="backend for the tuned profile (default: same as --backend)")
    p_ablate.set_defaults(func=cmd_ablate)

    p_stats = sub.add_parser("stats", help="recompute the report from a compressed dataset")
    p_stats.add_argument("--input", "-i", required=True)
    p_stats.set_defaults(func=cmd_stats)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BackendUnavailable as exc:
        print(f"error: backend unreachable: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except CtsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURES
    except KeyboardInterrupt:
        return EXIT_INTERRUPT


if __name__ == "__main__":
    sys.exit(main())
