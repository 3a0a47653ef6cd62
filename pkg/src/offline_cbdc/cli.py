"""Command-line entry point: ``offline-cbdc``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .harness.scenario import MODES, VARIANTS, ScriptError, run_scenario


def _sizes(text: str) -> list[int]:
    try:
        sizes = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not sizes or min(sizes) < 0:
        raise argparse.ArgumentTypeError("sizes must be non-negative")
    return sizes


def cmd_scenario(args) -> int:
    script = Path(args.file).read_text()
    try:
        result = run_scenario(script, args.seed, variant=VARIANTS.get(args.variant), mode=MODES.get(args.mode))
    except ScriptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print("line|command|result")
    for e in result.events:
        print(f"{e.line}|{e.command}|{e.result}")
    a = result.audit
    print(f"# online {a.total_online} offline {a.total_offline} in_flight {a.in_flight} minted {a.grand_total}")
    if args.trace:
        Path(args.trace).write_text(result.world.net.export_trace() + "\n")
    if args.capture:
        Path(args.capture).write_bytes(result.world.net.export_binary())
    for line, v in result.violations:
        print(f"violation line {line}: {v}", file=sys.stderr)
    return 1 if result.violations else 0


def cmd_fuzz(args) -> int:
    from .harness.fuzz import fuzz

    report = fuzz(args.iters, args.seed)
    print(report.summary())
    return 0 if report.ok and not report.missing_coverage else 1


def cmd_bench(args) -> int:
    from .harness.bench import BENCH_VARIANTS, asym_table, bench, handshake_asym_ops, to_csv, to_table

    rows = bench(args.n, seed=args.seed)
    print(to_csv(rows) if args.format == "csv" else to_table(rows), end="\n" if args.format == "table" else "")
    print()
    print(asym_table(args.seed))
    if args.out:
        from .harness.plots import render_all

        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.csv").write_text(to_csv(rows))
        ops = {v.name: handshake_asym_ops(v, args.seed) for v in BENCH_VARIANTS}
        for path in render_all(rows, ops, out):
            print(f"wrote {path}", file=sys.stderr)
    return 0


def cmd_attack(args) -> int:
    from .harness import adversary

    if args.kind == "replay":
        r = adversary.replay_campaign(args.trials, args.seed)
        print(f"attempts {r.attempts} rejected {r.rejected} double_credits {r.double_credits}")
        for k, v in sorted(r.by_strategy.items()):
            print(f"  {k}: {v}")
        return 0 if r.ok else 1
    if args.kind == "forge":
        f = adversary.compromised_device_scenario(args.seed)
        print(f"cap {f.cap} credited {f.credited} settled {f.settled}/{f.attempts} "
              f"receiver sync consistent {f.receiver_sync_consistent}")
        return 0 if f.bounded else 1
    d = adversary.destroyed_money_scenario(args.seed)
    print(f"amount {d.amount} sender debited {d.sender_debited} receiver credited {d.receiver_credited} "
          f"in_flight {d.in_flight} detected {d.detected_at_sender_sync}")
    return 0 if d.detected_at_sender_sync else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="offline-cbdc", description="Offline CBDC payment simulator")
    sub = p.add_subparsers(dest="command", required=True)

    sc = sub.add_parser("scenario", help="run scenario scripts")
    sc_sub = sc.add_subparsers(dest="action", required=True)
    run = sc_sub.add_parser("run", help="run one script and audit every step")
    run.add_argument("file")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--variant", choices=sorted(VARIANTS))
    run.add_argument("--mode", choices=sorted(MODES))
    run.add_argument("--trace", help="write a human-readable capture trace here")
    run.add_argument("--capture", help="write the length-prefixed binary capture log here")
    run.set_defaults(func=cmd_scenario)

    fz = sub.add_parser("fuzz", help="randomised fault campaign")
    fz.add_argument("--iters", type=int, default=10_000)
    fz.add_argument("--seed", type=int, default=0)
    fz.set_defaults(func=cmd_fuzz)

    bn = sub.add_parser("bench", help="message and byte counts per operation")
    bn.add_argument("--n", type=_sizes, default=[0, 1, 4, 10])
    bn.add_argument("--format", choices=("table", "csv"), default="table")
    bn.add_argument("--seed", type=int, default=0)
    bn.add_argument("--out", help="directory for bench.csv and figures")
    bn.set_defaults(func=cmd_bench)

    at = sub.add_parser("attack", help="adversary demonstrations")
    at.add_argument("kind", choices=("replay", "forge", "destroy"))
    at.add_argument("--trials", type=int, default=1_000)
    at.add_argument("--seed", type=int, default=0)
    at.set_defaults(func=cmd_attack)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
