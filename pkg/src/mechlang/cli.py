"""Command-line entry point: check, run, kb, and report workflows.

Exit codes are stable: 0 success, 1 diagnostics with errors, 2 runtime
failure (deadlock or violated axiom), 3 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from fractions import Fraction
from pathlib import Path

from . import engine
from .compiler import DEFAULT_MAX_DEPTH, compile_document
from .diagnostics import ERROR
from .errors import MechError
from .kb import KbEntry, Knowledgebase, Provenance, evaluate_rules, slice_document
from .model import fraction_text
from .parser import parse_mech, parse_rules
from .serializer import render_expression

EXIT_OK = 0
EXIT_DIAGNOSTICS = 1
EXIT_RUNTIME = 2
EXIT_USAGE = 3


class UsageError(Exception):
    pass


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _ArgumentParser:
    parser = _ArgumentParser(prog="mech", description="mechanism model tooling")
    sub = parser.add_subparsers(dest="command")

    check = sub.add_parser("check", help="parse and validate model files")
    check.add_argument("files", nargs="*")
    check.add_argument("--json", action="store_true", dest="as_json")
    check.add_argument("--max-depth", type=int, default=DEFAULT_MAX_DEPTH)

    run = sub.add_parser("run", help="execute a model deterministically")
    run.add_argument("file")
    horizon = run.add_mutually_exclusive_group()
    horizon.add_argument("--until-termination", action="store_true")
    horizon.add_argument("--max-time", type=str, default=None)
    horizon.add_argument("--max-steps", type=int, default=None)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument(
        "--policy", choices=list(engine.POLICIES), default="lexicographic"
    )
    run.add_argument("--trace", type=str, default=None)
    run.add_argument("--max-depth", type=int, default=DEFAULT_MAX_DEPTH)

    kb = sub.add_parser("kb", help="knowledgebase operations")
    kb.add_argument("--dir", type=str, default=None)
    kb.add_argument("--init", action="store_true")
    kb_sub = kb.add_subparsers(dest="kb_command")

    kb_add = kb_sub.add_parser("add", help="register a model fragment")
    kb_add.add_argument("file")
    kb_add.add_argument("--kind", required=True,
                        choices=["aggregate-template", "transitional-unit", "mechanism"])
    kb_add.add_argument("--id", required=True, dest="entry_id")
    kb_add.add_argument("--tags", type=str, default="")
    kb_add.add_argument("--function", type=str, default="", dest="function_text")

    kb_sub.add_parser("list", help="list registered entries")

    kb_query = kb_sub.add_parser("query", help="search entries")
    kb_query.add_argument("--kind", default=None)
    kb_query.add_argument("--tag", default=None)
    kb_query.add_argument("--input", default=None, dest="input_signature")
    kb_query.add_argument("--output", default=None, dest="output_signature")
    kb_query.add_argument("--function", default=None, dest="function_substring")

    kb_usage = kb_sub.add_parser("usage", help="count mechanisms using an entry")
    kb_usage.add_argument("entry_id")
    kb_usage.add_argument("models", nargs="+")

    kb_prefer = kb_sub.add_parser("prefer", help="evaluate preference rules")
    kb_prefer.add_argument("--rules", required=True)
    kb_prefer.add_argument("--bind", action="append", default=[])

    report = sub.add_parser("report", help="print the full mechanism report")
    report.add_argument("file")
    report.add_argument("--max-depth", type=int, default=DEFAULT_MAX_DEPTH)
    return parser


def _load_and_compile(path: str, max_depth: int):
    """Returns (compiled, diagnostics); compiled is None on any error."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read '{path}': {exc}")
    parsed = parse_mech(text, path)
    if not parsed.ok:
        return None, list(parsed.diagnostics)
    result = compile_document(parsed.document, max_depth=max_depth)
    return result.model, list(result.diagnostics)


def _print_diagnostics(diags, as_json: bool, out):
    if as_json:
        print(json.dumps([d.to_json() for d in diags], indent=2), file=out)
        return
    for diag in diags:
        print(diag.render(), file=out)


def cmd_check(args, out=None) -> int:
    out = out or sys.stdout
    if not args.files:
        raise UsageError("check needs at least one file")
    all_diags = []
    for path in args.files:
        _model, diags = _load_and_compile(path, args.max_depth)
        all_diags.extend(diags)
    errors = sum(1 for d in all_diags if d.severity == ERROR)
    warnings = len(all_diags) - errors
    if args.as_json:
        _print_diagnostics(all_diags, True, out)
    else:
        _print_diagnostics(all_diags, False, out)
        print(f"{errors} errors, {warnings} warnings", file=out)
    return EXIT_DIAGNOSTICS if errors else EXIT_OK


def cmd_run(args, out=None) -> int:
    out = out or sys.stdout
    compiled, diags = _load_and_compile(args.file, args.max_depth)
    if compiled is None:
        _print_diagnostics(diags, False, out)
        return EXIT_DIAGNOSTICS
    if args.max_time is not None:
        horizon, limit = "max-time", Fraction(args.max_time)
    elif args.max_steps is not None:
        horizon, limit = "max-steps", args.max_steps
    else:
        horizon, limit = "until-termination", None
    try:
        world = engine.init_world(compiled, seed=args.seed)
        result = engine.run(world, compiled, horizon, limit, args.policy)
    except MechError as exc:
        print(f"runtime error: {exc}", file=out)
        return EXIT_RUNTIME
    if args.trace:
        engine.write_trace(result.events, args.trace)
    print(f"steps: {result.steps}", file=out)
    print(f"firings: {result.firings}", file=out)
    print(f"final clock: {fraction_text(result.world.clock)}", file=out)
    print(f"termination: {'yes' if result.status == engine.TERMINATED else 'no'}", file=out)
    if result.status == engine.DEADLOCKED:
        print("deadlock", file=out)
        return EXIT_RUNTIME
    return EXIT_OK


def _kb_root(args) -> Path:
    if args.dir:
        return Path(args.dir)
    return Path(os.environ.get("MECH_KB", "kb"))


def cmd_kb(args, out=None) -> int:
    out = out or sys.stdout
    store = Knowledgebase(_kb_root(args))
    if args.init:
        store.initialize()
    command = args.kb_command
    if command is None:
        raise UsageError("kb needs a subcommand (add, list, query, usage, prefer)")
    if command == "add":
        if not store.exists() and not args.init:
            raise UsageError(
                f"knowledgebase '{store.root}' does not exist (use --init to create it)"
            )
        text = Path(args.file).read_text(encoding="utf-8")
        parsed = parse_mech(text, args.file)
        if not parsed.ok:
            _print_diagnostics(parsed.diagnostics, False, out)
            return EXIT_DIAGNOSTICS
        payload = slice_document(parsed.document, args.kind, args.entry_id)
        entry = KbEntry(
            id=args.entry_id,
            kind=args.kind,
            payload=payload,
            function=args.function_text,
            tags=tuple(t for t in args.tags.split(",") if t),
            provenance=Provenance(source=args.file),
        )
        try:
            store.register(entry)
        except MechError as exc:
            print(f"error: {exc}", file=out)
            return EXIT_DIAGNOSTICS
        print(f"registered {args.entry_id}", file=out)
        return EXIT_OK
    if command == "list":
        for entry in store.entries():
            tags = ",".join(entry.tags)
            print(f"{entry.id}\t{entry.kind}" + (f"\t{tags}" if tags else ""), file=out)
        return EXIT_OK
    if command == "query":
        try:
            matches = store.query(
                kind=args.kind,
                tag=args.tag,
                input_signature=args.input_signature,
                output_signature=args.output_signature,
                function_substring=args.function_substring,
            )
        except MechError as exc:
            print(f"error: {exc}", file=out)
            return EXIT_USAGE
        for entry in matches:
            print(entry.id, file=out)
        return EXIT_OK
    if command == "usage":
        models = []
        for path in args.models:
            compiled, diags = _load_and_compile(path, DEFAULT_MAX_DEPTH)
            if compiled is None:
                _print_diagnostics(diags, False, out)
                return EXIT_DIAGNOSTICS
            models.append(compiled)
        try:
            count = store.usage_count(args.entry_id, models)
        except MechError as exc:
            print(f"error: {exc}", file=out)
            return EXIT_RUNTIME
        print(count, file=out)
        return EXIT_OK
    if command == "prefer":
        binding = {}
        for item in args.bind:
            if "=" not in item:
                raise UsageError(f"malformed binding '{item}' (expected NAME=SYMBOL)")
            name, _eq, symbol = item.partition("=")
            if not name or not symbol:
                raise UsageError(f"malformed binding '{item}' (expected NAME=SYMBOL)")
            binding[name] = symbol
        try:
            text = Path(args.rules).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read '{args.rules}': {exc}")
        parsed = parse_rules(text, args.rules)
        if not parsed.ok:
            _print_diagnostics(parsed.diagnostics, False, out)
            return EXIT_DIAGNOSTICS
        try:
            choice = evaluate_rules(parsed.document, binding)
        except MechError as exc:
            print(f"error: {exc}", file=out)
            return EXIT_RUNTIME
        print(choice if choice is not None else "no-match", file=out)
        return EXIT_OK
    raise UsageError(f"unknown kb subcommand '{command}'")


def _field(value: str) -> str:
    return value if value else "(absent)"


def cmd_report(args, out=None) -> int:
    out = out or sys.stdout
    compiled, diags = _load_and_compile(args.file, args.max_depth)
    if compiled is None:
        _print_diagnostics(diags, False, out)
        return EXIT_DIAGNOSTICS
    ctx = compiled.context
    for mech in ctx.execution_mechanisms():
        md = mech.metadata
        classification = compiled.classifications.get(mech.id)
        inferred = classification.describe() if classification else "unclassified"
        print(f"Mechanism: {mech.id}", file=out)
        print("  Metadata", file=out)
        print(
            f"    Type of Mechanism: {md.mechanism_type} (structure: {inferred})",
            file=out,
        )
        print(f"    Type of Model: {_field(md.model_type)}", file=out)
        print(f"    Function Type: {md.function_type}", file=out)
        print(f"    Dynamic Elements: {_field(md.dynamic_elements)}", file=out)
        print(f"    Context: {_field(md.context)}", file=out)
        print(f"    Author: {md.author}", file=out)
        print(f"    Date: {md.date}", file=out)
        print(f"    Version: {md.version}", file=out)
        print("  Core Components", file=out)
        print(f"    Phenomenon: {_field(mech.phenomenon.summary)}", file=out)
        for label, expr in (
            ("setup", mech.phenomenon.setup),
            ("termination", mech.phenomenon.termination),
        ):
            try:
                rendered = render_expression(expr)
            except MechError:
                rendered = "(none)"
            print(f"      {label}: {rendered}", file=out)
        parts = ", ".join(f"{p} ({role})" for p, role in mech.parts)
        print(f"    Parts: {_field(parts)}", file=out)
        organization = " -> ".join(mech.organization)
        print(f"    Organization: {_field(organization)}", file=out)
        print("  Additional Elements", file=out)
        print(f"    Explanations: {_field(md.explanations)}", file=out)
        print(
            f"    Variations, Analogs, and Contrasts: {_field(md.variations)}",
            file=out,
        )
        print(f"    Implications/Applications: {_field(md.implications)}", file=out)
        print(f"    Evidence: {_field(', '.join(md.evidence))}", file=out)
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required (check, run, kb, report)")
        if args.command == "check":
            return cmd_check(args)
        if args.command == "run":
            return cmd_run(args)
        if args.command == "kb":
            return cmd_kb(args)
        if args.command == "report":
            return cmd_report(args)
        raise UsageError(f"unknown command '{args.command}'")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        print("usage: mech {check,run,kb,report} ...", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
