"""``memcycle`` command line: construct, answer, evolve, evaluate, replay, render.

Settings come from flags, then the ``--config`` TOML file, then defaults.
Exit status is 0 on success, 1 on usage errors and 2 on runtime failures
(including a replay that does not reproduce its golden report).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from .config import RunConfig, build_config, load_config_file, parse_ablations
from .errors import ConfigError, MemcycleError
from .evaluation import (
    ConversationDataset,
    answer_question,
    build_memory,
    emit_report,
    ingest_dataset,
    load_report,
    render_markdown,
    render_svg,
    run_experiment,
    variant_label,
    write_traces,
)
from .evolution import evolve_session
from .memory import load_bank, save_bank
from .providers import Cassette, CassetteProvider, LiveProvider, Provider, map_in_order

log = logging.getLogger("memcycle")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        self.print_help(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML config file")
    parser.add_argument("--provider", choices=("live", "cassette"), help="model backend")
    parser.add_argument("--cassette", help="cassette JSON for offline replay")
    parser.add_argument("--k", type=int, help="entries per search")
    parser.add_argument("--H", type=int, help="maximum query refinements")
    parser.add_argument("--J", type=int, help="probe questions per session")
    parser.add_argument("--theta", type=float, help="consolidation similarity threshold")
    parser.add_argument("--ablate", help="comma-separated subset of C,R,E")
    parser.add_argument("--seed", type=int, help="hashed-embedding seed")
    parser.add_argument("--dimension", type=int, help="embedding dimension")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress records")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="memcycle", description="Memory-cycle engine for long-horizon dialogue QA.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("construct", help="build a bank from a dataset")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--bank", help="output bank JSONL")
    p.add_argument("--evolve", action="store_true", help="run self-evolution after each session")

    p = sub.add_parser("answer", help="answer dataset questions from an existing bank")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--bank", help="input bank JSONL")
    p.add_argument("--report-out", help="answers JSON")
    p.add_argument("--traces-dir")

    p = sub.add_parser("evolve", help="probe and repair a bank for one session")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--bank", help="input bank JSONL")
    p.add_argument("--session", required=True, help="session id in the dataset")
    p.add_argument("--bank-out", help="output bank (defaults to overwriting --bank)")

    p = sub.add_parser("evaluate", help="full benchmark run")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--report-out")
    p.add_argument("--traces-dir")

    p = sub.add_parser("replay", help="check a cassette run reproduces a golden report byte for byte")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--golden", required=True, help="golden report JSON")

    p = sub.add_parser("render", help="report JSON to markdown or SVG")
    p.add_argument("report")
    p.add_argument("--format", choices=("md", "svg"), default="md")
    p.add_argument("--out", help="output file (markdown defaults to stdout)")
    return parser


def _flag_layer(args: argparse.Namespace) -> dict[str, Any]:
    layer: dict[str, Any] = {
        "k": args.k, "H": args.H, "J": args.J, "theta": args.theta,
        "seed": args.seed, "dimension": args.dimension,
        "provider.mode": args.provider, "provider.cassette": args.cassette,
    }
    if args.ablate is not None:
        layer["ablations"] = parse_ablations(args.ablate)
    for name, key in (("dataset", "paths.dataset"), ("bank", "paths.bank"),
                      ("traces_dir", "paths.traces"), ("report_out", "paths.report")):
        layer[key] = getattr(args, name, None)
    # a cassette on the command line implies cassette mode unless --provider says otherwise
    if args.cassette and args.provider is None:
        layer["provider.mode"] = "cassette"
    return layer


def snapshot_layer(snapshot: dict[str, Any]) -> dict[str, Any]:
    """Config layer recreating the run recorded in a report's snapshot."""
    layer = {k: v for k, v in snapshot.items() if k != "provider"}
    provider = snapshot.get("provider") or {}
    for key in ("temperature", "max_tokens"):
        if key in provider:
            layer[f"provider.{key}"] = provider[key]
    return layer


def resolve_config(args: argparse.Namespace, *base: dict[str, Any]) -> RunConfig:
    file_layer = load_config_file(args.config) if args.config else {}
    return build_config(*base, file_layer, _flag_layer(args))


def make_provider(config: RunConfig) -> Provider:
    p = config.provider
    if p.mode == "cassette":
        if not p.cassette:
            raise UsageError("cassette mode needs --cassette (or provider.cassette in the config)")
        cassette = Cassette.load(p.cassette)
        if config.dimension is not None and config.dimension != cassette.dimension:
            raise ConfigError(f"dimension {config.dimension} disagrees with cassette dimension {cassette.dimension}")
        return CassetteProvider(cassette, seed=config.seed, temperature=p.temperature, max_tokens=p.max_tokens)
    return LiveProvider(p.base_url, p.models, p.embedding_model, dimension=config.dimension,
                        temperature=p.temperature, max_tokens=p.max_tokens, parallelism=p.parallelism,
                        min_interval=p.min_interval)


def _need(value: str | None, flag: str) -> str:
    if not value:
        raise UsageError(f"{flag} is required")
    return value


def _dataset(config: RunConfig) -> ConversationDataset:
    return ingest_dataset(_need(config.paths.dataset, "--dataset"))


def _write_json(path: str | Path, doc: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def cmd_construct(args, config: RunConfig, provider: Provider) -> int:
    out = _need(config.paths.bank, "--bank")
    bank = build_memory(_dataset(config), config, provider, evolve=args.evolve and not config.ablate_E)
    save_bank(bank, out)
    print(f"wrote {len(bank)} entries to {out}")
    return EXIT_OK


def cmd_answer(args, config: RunConfig, provider: Provider) -> int:
    dataset = _dataset(config)
    bank = load_bank(_need(config.paths.bank, "--bank"))
    items = list(enumerate(dataset.qa, start=1))
    answered = map_in_order(lambda pair: answer_question(bank, pair[0], pair[1], config, provider), items, provider)
    doc = {"conversation_id": dataset.conversation_id, "answers": [r.to_dict() for r, _ in answered]}
    if config.paths.report:
        _write_json(config.paths.report, doc)
    else:
        print(json.dumps(doc, indent=2, ensure_ascii=False))
    if config.paths.traces:
        write_traces({r.trace: t for r, t in answered}, config.paths.traces)
    return EXIT_OK


def cmd_evolve(args, config: RunConfig, provider: Provider) -> int:
    dataset = _dataset(config)
    source = _need(config.paths.bank, "--bank")
    session = next((s for s in dataset.sessions if s.session_id == args.session), None)
    if session is None:
        raise UsageError(f"session {args.session!r} not in dataset")
    bank = load_bank(source)
    evolved = evolve_session(bank, session, config, provider)
    out = args.bank_out or source
    save_bank(evolved, out)
    print(f"{len(bank)} -> {len(evolved)} entries, wrote {out}")
    return EXIT_OK


def cmd_evaluate(args, config: RunConfig, provider: Provider) -> int:
    report = run_experiment(_dataset(config), config, provider)
    if config.paths.report:
        emit_report(report, config.paths.report, config.paths.traces)
    else:
        sys.stdout.write(report.to_json())
        if config.paths.traces:
            write_traces(report.traces, config.paths.traces)
    print(render_markdown(report.to_dict(), variant_label(report.to_dict())), file=sys.stderr)
    return EXIT_RUNTIME if report.partial else EXIT_OK


def cmd_replay(args, config: RunConfig, provider: Provider) -> int:
    expected = Path(args.golden).read_bytes()
    report = run_experiment(_dataset(config), config, provider)
    actual = report.to_json().encode("utf-8")
    leftover = provider.remaining() if hasattr(provider, "remaining") else {}
    if actual != expected:
        first = next((i for i, (a, b) in enumerate(zip(actual, expected)) if a != b), min(len(actual), len(expected)))
        print(f"replay MISMATCH: first differing byte at offset {first} "
              f"({len(actual)} bytes produced, {len(expected)} expected)", file=sys.stderr)
        return EXIT_RUNTIME
    if leftover:
        print(f"replay MISMATCH: unconsumed cassette responses {leftover}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"replay OK: {len(actual)} bytes identical to {args.golden}")
    return EXIT_OK


def cmd_render(args) -> int:
    report = load_report(args.report)
    if args.format == "svg":
        out = args.out or str(Path(args.report).with_suffix(".svg"))
        render_svg(report, out)
        print(f"wrote {out}")
        return EXIT_OK
    text = render_markdown(report, variant_label(report))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"construct": cmd_construct, "answer": cmd_answer, "evolve": cmd_evolve,
            "evaluate": cmd_evaluate, "replay": cmd_replay}


def dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "render":
            return cmd_render(args)
        base: list[dict] = []
        if args.command == "replay":
            base.append(snapshot_layer(load_report(args.golden)["config"]))
        config = resolve_config(args, *base)
        provider = make_provider(config)
        try:
            return COMMANDS[args.command](args, config, provider)
        finally:
            close = getattr(provider, "close", None)
            if close:
                close()
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"memcycle: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MemcycleError, OSError) as exc:
        print(f"memcycle: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch())
