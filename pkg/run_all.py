# run_all.py
import argparse
import logging
import os
import sys
import time
from pathlib import Path

from dotenv import load_dotenv

from core_types import PickingError, Policy, load_config, parse_overrides
from harness import (
    Task,
    analyze,
    calibrate,
    make_task_spec,
    run_scenario,
    run_task,
    write_calibration,
    write_events_jsonl,
    write_attempts_jsonl,
    write_outputs,
)
from simulator import ObjectProfile, make_world_config

load_dotenv()

logging.basicConfig(
    level=os.getenv("LOG_LEVEL", "WARNING").upper(),
    format="%(asctime)s %(levelname)s %(name)s: %(message)s",
)


def default_out_dir() -> Path:
    return Path("data") / time.strftime("%Y%m%d_%H%M%S")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description="Closed-loop wire-harness bin picking: simulate, analyze, calibrate")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--config", default=os.getenv("PICKING_CONFIG"), help="controller config (key=value file)")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="controller config override")
        sp.add_argument("--world", dest="world", action="append", default=[], metavar="KEY=VALUE", help="world config override")
        sp.add_argument("--out-dir", default=None)

    run = sub.add_parser("run", help="run a picking task over seeded episodes")
    run.add_argument("--task", choices=[t.value for t in Task], default=Task.EMPTYING.value)
    run.add_argument("--policy", choices=[pl.value for pl in Policy], default=Policy.OURS_G.value)
    run.add_argument("--objects", type=int, default=8)
    run.add_argument("--profile", choices=[o.value for o in ObjectProfile], default=ObjectProfile.MEDIUM_74CM.value)
    run.add_argument("--episodes", type=int, default=1)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--max-attempts", type=int, default=None)
    run.add_argument("--workers", type=int, default=1)
    common(run)

    an = sub.add_parser("analyze", help="attempts.jsonl → summary.csv + thresholds.csv")
    an.add_argument("attempts")
    an.add_argument("--out-dir", default=None)

    sc = sub.add_parser("scenario", help="run a scripted scenario file")
    sc.add_argument("scenario")
    common(sc)

    cal = sub.add_parser("calibrate", help="sweep swing/slip gains and report the policy ordering")
    cal.add_argument("--objects", type=int, default=40)
    cal.add_argument("--profile", choices=[o.value for o in ObjectProfile], default=ObjectProfile.MEDIUM_74CM.value)
    cal.add_argument("--episodes", type=int, default=50)
    cal.add_argument("--seed", type=int, default=0)
    cal.add_argument("--max-attempts", type=int, default=1)
    cal.add_argument("--break-gains", type=float, nargs="+", default=[0.06, 0.12, 0.24])
    cal.add_argument("--slip-gains", type=float, nargs="+", default=[0.002, 0.004, 0.008])
    cal.add_argument("--workers", type=int, default=1)
    common(cal)
    return p


def _world(args, **fields):
    raw = parse_overrides(args.world)
    raw.update(fields)
    return make_world_config(raw)


def cmd_run(args) -> int:
    config = load_config(args.config, parse_overrides(args.overrides))
    world = _world(args, object_profile=args.profile, n_objects=args.objects, rng_seed=args.seed)
    spec = make_task_spec(
        task=args.task, policy=args.policy, world=world, episodes=args.episodes,
        max_attempts=args.max_attempts, workers=args.workers,
    )
    out_dir = Path(args.out_dir) if args.out_dir else default_out_dir()
    print(f"🚀 {spec.task.value} task | policy: {spec.policy.value} | objects: {world.n_objects} ({world.object_profile.value})")
    print(f"📂 Output dir: {out_dir}")
    print(f"🎲 Seed: {world.rng_seed} | episodes: {spec.episodes} | max attempts: {spec.max_attempts}")

    result = run_task(spec, config)
    paths = write_outputs(result, out_dir)
    s = result.summary
    print(f"📊 success rate {s.success_rate:.3f} ({s.successes}/{s.successes + s.failures}) | aborted: {s.aborted}")
    print(f"🧮 primitives: {s.attempts_by_primitive} | failures: {s.failure_histogram or '{}'}")
    print(f"\n✅ Done | {', '.join(str(p) for p in paths.values())}")
    return 0


def cmd_analyze(args) -> int:
    paths = analyze(args.attempts, args.out_dir)
    print(f"✅ Wrote {paths['summary']} and {paths['thresholds']}")
    return 0


def cmd_scenario(args) -> int:
    config = load_config(args.config, parse_overrides(args.overrides)) if (args.config or args.overrides) else None
    result = run_scenario(args.scenario, config)
    rec = result.record
    print(f"🎬 Scenario: {result.name}")
    print(f"   outcome: {rec.outcome.value} | failure: {rec.failure_mode.value if rec.failure_mode else '-'} | counts: {rec.counts.to_dict()}")
    if args.out_dir:
        out = Path(args.out_dir)
        write_attempts_jsonl([rec], out / "attempts.jsonl")
        write_events_jsonl(result.events, out / "events.jsonl")
        print(f"📂 Output dir: {out}")
    if not result.passed:
        for m in result.mismatches:
            print(f"❌ {m}", file=sys.stderr)
        return 1
    print("✅ Expectations met")
    return 0


def cmd_calibrate(args) -> int:
    config = load_config(args.config, parse_overrides(args.overrides))
    world = _world(args, object_profile=args.profile, n_objects=args.objects, rng_seed=args.seed)
    base = make_task_spec(task=Task.STANDARD, world=world, episodes=args.episodes, max_attempts=args.max_attempts, workers=args.workers)
    out_dir = Path(args.out_dir) if args.out_dir else default_out_dir()
    print(f"🚀 Calibrating over {len(args.break_gains)}x{len(args.slip_gains)} gains | episodes: {args.episodes}")
    report = calibrate(base, config, args.break_gains, args.slip_gains)
    paths = write_calibration(report, out_dir)
    chosen = report["chosen"]
    flag = "✅" if report["ordering_satisfied"] else "⚠️"
    print(f"{flag} chosen swing_break_gain={chosen['swing_break_gain']} slip_gain={chosen['slip_gain']} "
          f"(LiftG {chosen['LiftG']:.3f}, OursG {chosen['OursG']:.3f}, OursA {chosen['OursA']:.3f})")
    print(f"📂 {paths['csv']} | {paths['json']}")
    return 0


COMMANDS = {"run": cmd_run, "analyze": cmd_analyze, "scenario": cmd_scenario, "calibrate": cmd_calibrate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (PickingError, OSError, ValueError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
