"""Command line: run scenarios, list the bundled ones, verify chain dumps."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .encoding import DecodeError
from .errors import MedledgerError
from .ledger import export_chain, import_chain, verify_chain
from .scenarios import (
    ScenarioSpec,
    bundled_scenario_names,
    emit_report,
    load_scenario,
    run_scenario,
)
from .simulator import NetworkConfig


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="medledger",
        description="Desk-scale ledger-mediated health record exchange",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario (bundled name or spec path)")
    run.add_argument("scenario", help="bundled scenario name or path to a spec JSON")
    run.add_argument("--seed-override", type=int, default=None, help="replace the network seed")
    run.add_argument("--format", choices=("json", "text"), default="json")
    run.add_argument("--out", type=Path, default=None, help="write the report here")
    run.add_argument("--figures", type=Path, default=None,
                     help="directory for figures and CSV output")
    run.add_argument("--chain-dump", type=Path, default=None,
                     help="write the final canonical chain as a binary dump")
    run.add_argument("--trace-out", type=Path, default=None,
                     help="write the event trace as line-delimited JSON")

    sub.add_parser("list", help="list bundled scenarios")

    verify = sub.add_parser("verify-chain", help="validate a binary chain dump")
    verify.add_argument("dump", type=Path)

    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    spec = load_scenario(args.scenario)
    if args.seed_override is not None:
        network = NetworkConfig.from_json(
            {**spec.network.to_json(), "rng_seed": args.seed_override}
        )
        spec = ScenarioSpec(
            name=spec.name,
            network=network,
            actors=spec.actors,
            script=spec.script,
            assertions=spec.assertions,
            emit_epidemic_view=spec.emit_epidemic_view,
        )
    report, runtime = run_scenario(spec)
    rendered = emit_report(report, args.format)
    if args.out is not None:
        args.out.write_text(rendered, encoding="utf-8")
    else:
        sys.stdout.write(rendered)
    if args.chain_dump is not None:
        args.chain_dump.write_bytes(
            export_chain(runtime.canonical_chain(), spec.network.proposer_policy)
        )
    if args.trace_out is not None:
        args.trace_out.write_text(runtime.sim.trace.to_jsonl() + "\n", encoding="utf-8")
    if args.figures is not None:
        from . import figures  # matplotlib import deferred to first use

        for path in figures.emit_figures(report, runtime.sim.trace.entries, args.figures):
            print(f"wrote {path}", file=sys.stderr)
    return 0 if report["passed"] else 1


def _cmd_list() -> int:
    for name in bundled_scenario_names():
        print(name)
    return 0


def _cmd_verify_chain(args: argparse.Namespace) -> int:
    raw = args.dump.read_bytes()
    try:
        blocks, policy = import_chain(raw)
    except DecodeError as exc:
        print(f"REJECTED at decode: {exc}")
        return 1
    verdict = verify_chain(blocks, policy)
    if verdict:
        tip = blocks[-1]
        print(f"ACCEPTED height={tip.height} tip={tip.block_hash.hex()}")
        return 0
    print(f"REJECTED: {verdict.reason} {verdict.detail}")
    return 1


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "list":
            return _cmd_list()
        if args.command == "verify-chain":
            return _cmd_verify_chain(args)
    except MedledgerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
