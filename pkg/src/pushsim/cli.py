"""Command-line runner: ``pushsim run|check|compare``.

``run`` executes one configured simulation and writes the transcript
and report; exit status 0 iff every security check passed and no
unexpected error occurred. ``check`` re-derives the checks from the
artifacts and fails on any disagreement with the report. ``compare``
runs two configurations and prints a side-by-side table.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import ConfigError, RunConfig
from .runner import ParseError, VerdictMismatch, check, compare, run


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file; flags override its fields")
    parser.add_argument("--scenario", type=int, choices=(1, 2))
    parser.add_argument("--topology", choices=("centralised", "decentralised"))
    parser.add_argument("--messages", type=int)
    parser.add_argument("--bulk", action="store_true", default=None)
    parser.add_argument(
        "--independent-encryption",
        dest="independent_encryption",
        action=argparse.BooleanOptionalAction,
        default=None,
    )
    parser.add_argument(
        "--fresh-aik-per-push", dest="fresh_aik_per_push", action="store_true", default=None
    )
    parser.add_argument("--aik-prefetch", dest="aik_prefetch", action="store_true", default=None)
    parser.add_argument("--tamper-after", dest="tamper_after", type=int)
    parser.add_argument("--noc-down-after", dest="noc_down_after", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--output", dest="transcript_path", help="transcript file (JSON lines)")
    parser.add_argument("--report", dest="report_path", help="report file (JSON)")
    parser.add_argument("--keystore", dest="keystore_path", help="key-store directory")
    parser.add_argument(
        "--dump-noc", dest="dump_noc_path", help="write observer-captured payload bytes here"
    )
    parser.add_argument(
        "--marker",
        dest="noc_malicious_markers",
        action="append",
        help="extra plaintext marker the observer scans for (repeatable)",
    )


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    base = RunConfig.from_file(args.config) if args.config else RunConfig()
    flag_fields = (
        "scenario", "topology", "messages", "bulk", "independent_encryption",
        "fresh_aik_per_push", "aik_prefetch", "tamper_after", "noc_down_after",
        "seed", "transcript_path", "report_path", "keystore_path",
        "dump_noc_path", "noc_malicious_markers",
    )
    overrides = {name: getattr(args, name) for name in flag_fields}
    return base.with_overrides(**overrides).validate()


def _cmd_run(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    report = run(config)
    print(f"transcript: {config.transcript_path}")
    print(f"report:     {config.report_path}")
    print(f"simulated clock: {report.final_clock:.3f} s "
          f"(provisioning {report.provisioning_latency:.3f} s, "
          f"push {report.total_push_latency:.3f} s, "
          f"per-push mean {report.per_push_mean_latency:.3f} s)")
    for outcome in report.outcomes:
        reason = f" ({outcome['reason']})" if outcome["reason"] else ""
        print(f"message {outcome['index']}: {outcome['kind']}{reason}")
    ok = True
    for name, verdict in report.security_checks.items():
        status = "pass" if verdict["pass"] else "FAIL"
        ok = ok and verdict["pass"]
        print(f"check {name}: {status}")
    return 0 if ok else 1


def _cmd_check(args: argparse.Namespace) -> int:
    try:
        verdicts = check(args.transcript, args.report)
    except VerdictMismatch as exc:
        for name, verdict in exc.recomputed.items():
            status = "pass" if verdict["pass"] else "FAIL"
            print(f"check {name}: {status} (recomputed)")
        print(f"error: {exc}", file=sys.stderr)
        return 2
    ok = True
    for name, passed in verdicts.items():
        ok = ok and passed
        print(f"check {name}: {'pass' if passed else 'FAIL'}")
    return 0 if ok else 1


def _cmd_compare(args: argparse.Namespace) -> int:
    config_a = RunConfig.from_file(args.config_a).validate()
    config_b = RunConfig.from_file(args.config_b).validate()
    table = compare(config_a, config_b)
    if args.output:
        with open(args.output, "w") as fh:
            json.dump(table, fh, indent=2, sort_keys=True)
            fh.write("\n")
    rows = [
        ("per-push latency", "per_push_latency", "{:.3f}"),
        ("total push latency", "total_push_latency", "{:.3f}"),
        ("provisioning latency", "provisioning_latency", "{:.3f}"),
        ("final clock", "final_clock", "{:.3f}"),
    ]
    print(f"{'':24s} {'A':>12s} {'B':>12s}")
    for label, key, fmt in rows:
        print(f"{label:24s} {fmt.format(table['a'][key]):>12s} {fmt.format(table['b'][key]):>12s}")
    all_types = sorted(set(table["a"]["envelope_counts"]) | set(table["b"]["envelope_counts"]))
    for msg_type in all_types:
        a = table["a"]["envelope_counts"].get(msg_type, 0)
        b = table["b"]["envelope_counts"].get(msg_type, 0)
        print(f"envelopes {msg_type:14s} {a:>12d} {b:>12d}")
    all_charges = sorted(
        set(table["a"]["charges_by_label"]) | set(table["b"]["charges_by_label"])
    )
    for label in all_charges:
        a = table["a"]["charges_by_label"].get(label, 0.0)
        b = table["b"]["charges_by_label"].get(label, 0.0)
        print(f"charges {label:16s} {a:>12.3f} {b:>12.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pushsim",
        description="Simulate trusted-computing secured content-push protocols.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute one configured simulation")
    _add_run_flags(run_p)
    run_p.set_defaults(func=_cmd_run)

    check_p = sub.add_parser("check", help="recompute security checks from artifacts")
    check_p.add_argument("transcript")
    check_p.add_argument("report")
    check_p.set_defaults(func=_cmd_check)

    cmp_p = sub.add_parser("compare", help="run two configs and print a comparison")
    cmp_p.add_argument("config_a")
    cmp_p.add_argument("config_b")
    cmp_p.add_argument("--output", help="also write the comparison as JSON")
    cmp_p.set_defaults(func=_cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
