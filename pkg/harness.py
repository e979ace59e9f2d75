# harness.py
"""
Experiment runner: emptying and standard picking tasks over seeded episodes,
success-rate metrics, deterministic JSONL/CSV outputs, gain calibration and
scripted scenarios.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from controller import EventLog, run_attempt, run_open_loop_attempt
from core_types import (
    AttemptRecord,
    ConfigError,
    ControllerConfig,
    FailureMode,
    LogicError,
    Outcome,
    ParameterError,
    Policy,
    format_validation_error,
    validate_config,
)
from simulator import BinState, WorldConfig, init_world, make_world_config

logger = logging.getLogger(__name__)

ATTEMPT_SCHEMA = "picking-attempt/1"
PRIMITIVES = ("lift", "swing", "regrasp", "transport", "spin")
FAILURE_LETTERS = tuple(m.letter for m in FailureMode)


def dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


# ──────────────────────────────────────────────────────────────────────────────
# Task spec
# ──────────────────────────────────────────────────────────────────────────────
class Task(str, Enum):
    EMPTYING = "Emptying"
    STANDARD = "Standard"


class TaskSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    task: Task = Task.EMPTYING
    policy: Policy = Policy.OURS_G
    world: WorldConfig = Field(default_factory=WorldConfig)
    episodes: int = Field(default=1, ge=1)
    max_attempts: Optional[int] = Field(default=None, ge=1)
    workers: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _default_attempts(self) -> "TaskSpec":
        if self.max_attempts is None:
            object.__setattr__(self, "max_attempts", max(3 * self.world.n_objects, 1))
        return self


def make_task_spec(**fields: Any) -> TaskSpec:
    try:
        return TaskSpec(**fields)
    except ValidationError as e:
        raise ConfigError(format_validation_error(e)) from None


def episode_seed(base_seed: int, index: int) -> int:
    digest = hashlib.blake2b(str(index).encode("ascii"), digest_size=8).digest()
    return (base_seed ^ int.from_bytes(digest, "little")) & (2**64 - 1)


# ──────────────────────────────────────────────────────────────────────────────
# Results
# ──────────────────────────────────────────────────────────────────────────────
@dataclass
class RunSummary:
    success_rate: float
    successes: int
    failures: int
    aborted: int
    attempts: int
    attempts_by_primitive: Dict[str, int]
    failure_histogram: Dict[str, int]
    threshold_trajectories: List[Dict[str, Any]] = field(default_factory=list)

    def failure_fractions(self) -> Dict[str, float]:
        return {k: v / self.attempts for k, v in self.failure_histogram.items()} if self.attempts else {}

    def to_row(self) -> Dict[str, Any]:
        row: Dict[str, Any] = {
            "attempts": self.attempts,
            "successes": self.successes,
            "failures": self.failures,
            "aborted": self.aborted,
            "success_rate": round(self.success_rate, 6),
        }
        row.update({p: self.attempts_by_primitive.get(p, 0) for p in PRIMITIVES})
        row.update({k: self.failure_histogram.get(k, 0) for k in FAILURE_LETTERS})
        return row


@dataclass
class EpisodeResult:
    index: int
    seed: int
    records: List[AttemptRecord]
    events: List[Dict[str, Any]]
    remaining: int
    delivered: int
    ejected: int
    complete: bool


@dataclass
class RunResult:
    spec: TaskSpec
    summary: RunSummary
    episodes: List[EpisodeResult]

    @property
    def records(self) -> List[AttemptRecord]:
        return [r for ep in self.episodes for r in ep.records]

    @property
    def events(self) -> List[Dict[str, Any]]:
        return [e for ep in self.episodes for e in ep.events]


def summarize(records: Sequence[AttemptRecord]) -> RunSummary:
    if not records:
        raise ParameterError("cannot summarize an empty record list")
    outcomes = Counter(r.outcome for r in records)
    successes = outcomes[Outcome.SUCCESS_SINGLE]
    failures = outcomes[Outcome.FAIL_NOTHING] + outcomes[Outcome.FAIL_MULTIPLE]
    by_primitive = {p: sum(getattr(r.counts, p) for r in records) for p in PRIMITIVES}
    histogram = Counter(
        r.failure_mode.letter for r in records if r.outcome in (Outcome.FAIL_NOTHING, Outcome.FAIL_MULTIPLE)
    )
    trajectories = [
        {
            "episode": r.episode,
            "attempt_id": r.attempt_id,
            "f_stop": r.thresholds_after.f_stop,
            "f_fail": r.thresholds_after.f_fail,
            "f_fail_converged": r.thresholds_after.f_fail_converged,
        }
        for r in records
    ]
    decided = successes + failures
    return RunSummary(
        success_rate=successes / decided if decided else 0.0,
        successes=successes,
        failures=failures,
        aborted=outcomes[Outcome.ABORTED],
        attempts=len(records),
        attempts_by_primitive=by_primitive,
        failure_histogram={k: histogram[k] for k in FAILURE_LETTERS if histogram[k]},
        threshold_trajectories=trajectories,
    )


# ──────────────────────────────────────────────────────────────────────────────
# Episodes
# ──────────────────────────────────────────────────────────────────────────────
def run_episode(spec: TaskSpec, config: ControllerConfig, index: int) -> EpisodeResult:
    seed = episode_seed(spec.world.rng_seed, index)
    world = init_world(spec.world.model_copy(update={"rng_seed": seed}))
    events = EventLog(episode=index)
    thresholds = config.initial_thresholds()
    records: List[AttemptRecord] = []
    delivered = ejected = 0

    for attempt_id in range(spec.max_attempts):
        if world.n_in_bin == 0:
            if spec.task == Task.EMPTYING or spec.world.n_objects == 0:
                break
            world.reshuffle()
        if spec.policy == Policy.LIFT_G:
            rec = run_open_loop_attempt(world, config, thresholds, attempt_id, events)
        else:
            rec = run_attempt(world, config, thresholds, attempt_id, events, spec.policy)
        thresholds = rec.thresholds_after
        records.append(rec)
        delivered += len(rec.delivered_ids)
        ejected += len(rec.ejected_ids)
        if not world.conservation_ok():
            raise LogicError(
                f"episode {index} attempt {attempt_id}: {world.n_in_bin} in bin + {len(world.delivered)} delivered"
                f" + {len(world.ejected)} ejected != {world.fill_size} filled"
            )
        if spec.task == Task.STANDARD and rec.outcome == Outcome.SUCCESS_SINGLE:
            world.reshuffle()

    complete = spec.task == Task.EMPTYING and world.n_in_bin == 0
    logger.info("episode %d: %d attempts, %d left in bin", index, len(records), world.n_in_bin)
    return EpisodeResult(index, seed, records, events.lines, world.n_in_bin, delivered, ejected, complete)


def _episode_job(args: Tuple[TaskSpec, ControllerConfig, int]) -> EpisodeResult:
    return run_episode(*args)


def run_task(spec: TaskSpec, config: Optional[ControllerConfig] = None) -> RunResult:
    config = config or validate_config({})
    jobs = [(spec, config, i) for i in range(spec.episodes)]
    if spec.workers > 1 and spec.episodes > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            episodes = list(pool.map(_episode_job, jobs))
    else:
        episodes = [_episode_job(j) for j in jobs]
    records = [r for ep in episodes for r in ep.records]
    if not records:
        raise ParameterError("run produced no attempts (empty bins?)")
    return RunResult(spec, summarize(records), episodes)


# ──────────────────────────────────────────────────────────────────────────────
# Output files
# ──────────────────────────────────────────────────────────────────────────────
def _write_jsonl(path: Path, rows: Iterable[Mapping[str, Any]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(dumps(row) + "\n")
    return path


def _write_csv(path: Path, rows: Sequence[Mapping[str, Any]], fieldnames: Sequence[str]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path


def attempt_line(record: AttemptRecord) -> Dict[str, Any]:
    return {"schema": ATTEMPT_SCHEMA, **record.to_dict()}


def write_attempts_jsonl(records: Sequence[AttemptRecord], path: str | Path) -> Path:
    return _write_jsonl(Path(path), (attempt_line(r) for r in records))


def write_events_jsonl(events: Sequence[Mapping[str, Any]], path: str | Path) -> Path:
    return _write_jsonl(Path(path), events)


def read_attempts_jsonl(path: str | Path) -> List[AttemptRecord]:
    p = Path(path)
    if not p.exists():
        raise ParameterError(f"attempts file not found: {p}")
    out = []
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        obj = json.loads(line)
        if obj.get("schema") != ATTEMPT_SCHEMA:
            raise ParameterError(f"{p}:{lineno}: unexpected schema {obj.get('schema')!r}")
        out.append(AttemptRecord.from_dict(obj))
    return out


def summary_rows(records: Sequence[AttemptRecord]) -> List[Dict[str, Any]]:
    """One row per policy present in the records, in first-seen order."""
    groups: Dict[str, List[AttemptRecord]] = defaultdict(list)
    for r in records:
        groups[r.policy].append(r)
    return [{"policy": policy, **summarize(group).to_row()} for policy, group in groups.items()]


SUMMARY_FIELDS = ("policy", "attempts", "successes", "failures", "aborted", "success_rate") + PRIMITIVES + FAILURE_LETTERS
THRESHOLD_FIELDS = ("episode", "attempt_id", "f_stop", "f_fail", "f_fail_converged")


def write_summary_csv(records: Sequence[AttemptRecord], path: str | Path) -> Path:
    return _write_csv(Path(path), summary_rows(records), SUMMARY_FIELDS)


def write_thresholds_csv(records: Sequence[AttemptRecord], path: str | Path) -> Path:
    return _write_csv(Path(path), summarize(records).threshold_trajectories, THRESHOLD_FIELDS)


def write_outputs(result: RunResult, out_dir: str | Path) -> Dict[str, Path]:
    out = Path(out_dir)
    records = result.records
    return {
        "attempts": write_attempts_jsonl(records, out / "attempts.jsonl"),
        "events": write_events_jsonl(result.events, out / "events.jsonl"),
        "summary": write_summary_csv(records, out / "summary.csv"),
        "thresholds": write_thresholds_csv(records, out / "thresholds.csv"),
    }


def analyze(attempts_path: str | Path, out_dir: Optional[str | Path] = None) -> Dict[str, Path]:
    """attempts.jsonl → summary.csv + thresholds.csv next to it (or in out_dir)."""
    records = read_attempts_jsonl(attempts_path)
    out = Path(out_dir) if out_dir else Path(attempts_path).parent
    return {
        "summary": write_summary_csv(records, out / "summary.csv"),
        "thresholds": write_thresholds_csv(records, out / "thresholds.csv"),
    }


# ──────────────────────────────────────────────────────────────────────────────
# Calibration
# ──────────────────────────────────────────────────────────────────────────────
CALIBRATION_FIELDS = ("swing_break_gain", "slip_gain", "LiftG", "OursG", "OursA", "ordering_ok")


def calibrate(
    base: TaskSpec,
    config: ControllerConfig,
    break_gains: Sequence[float] = (0.06, 0.12, 0.24),
    slip_gains: Sequence[float] = (0.002, 0.004, 0.008),
    min_gap: float = 0.2,
) -> Dict[str, Any]:
    """Grid over (swing_break_gain, slip_gain); pick the ordering-satisfying row with the best OursA."""
    rows = []
    for bg in break_gains:
        for sg in slip_gains:
            world = base.world.model_copy(update={"swing_break_gain": bg, "slip_gain": sg})
            rates = {}
            for policy in (Policy.LIFT_G, Policy.OURS_G, Policy.OURS_A):
                spec = base.model_copy(update={"world": world, "policy": policy})
                rates[policy.value] = run_task(spec, config).summary.success_rate
            ok = rates["OursA"] >= rates["OursG"] >= rates["LiftG"] + min_gap
            rows.append({"swing_break_gain": bg, "slip_gain": sg, **{k: round(v, 6) for k, v in rates.items()}, "ordering_ok": ok})
            logger.info("calibration bg=%s sg=%s → %s", bg, sg, rates)
    valid = [r for r in rows if r["ordering_ok"]]
    chosen = max(valid or rows, key=lambda r: (r["OursA"], r["OursG"]))
    return {"rows": rows, "chosen": chosen, "ordering_satisfied": bool(valid)}


def write_calibration(report: Mapping[str, Any], out_dir: str | Path) -> Dict[str, Path]:
    out = Path(out_dir)
    csv_path = _write_csv(out / "calibration.csv", report["rows"], CALIBRATION_FIELDS)
    json_path = out / "calibration.json"
    json_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"csv": csv_path, "json": json_path}


# ──────────────────────────────────────────────────────────────────────────────
# Scenarios
# ──────────────────────────────────────────────────────────────────────────────
@dataclass
class ScenarioResult:
    name: str
    record: AttemptRecord
    events: List[Dict[str, Any]]
    mismatches: List[str]

    @property
    def passed(self) -> bool:
        return not self.mismatches


def build_scenario_world(scenario: Mapping[str, Any]) -> BinState:
    world = init_world(make_world_config(scenario.get("world", {})))
    if "edges" in scenario:
        world.graph.remove_edges_from(list(world.graph.edges()))
        for e in scenario["edges"]:
            world.add_edge(int(e[0]), int(e[1]), int(e[2]) if len(e) > 2 else 1)
    if scenario.get("target") is not None:
        bid, s = scenario["target"]
        world.forced_target = (int(bid), None if s is None else float(s))
    for kind, values in scenario.get("forced", {}).items():
        world.rng.script(kind, values)
    return world


def check_expectations(record: AttemptRecord, expect: Mapping[str, Any]) -> List[str]:
    problems = []
    if "outcome" in expect and record.outcome.value != expect["outcome"]:
        problems.append(f"outcome {record.outcome.value} != {expect['outcome']}")
    if "failure_mode" in expect:
        got = record.failure_mode.value if record.failure_mode else None
        if got != expect["failure_mode"]:
            problems.append(f"failure_mode {got} != {expect['failure_mode']}")
    counts = record.counts.to_dict()
    for key, value in expect.get("counts", {}).items():
        if counts[key] != value:
            problems.append(f"counts.{key} {counts[key]} != {value}")
    for key, value in expect.get("min_counts", {}).items():
        if counts[key] < value:
            problems.append(f"counts.{key} {counts[key]} < {value}")
    return problems


def run_scenario(source: str | Path | Mapping[str, Any], config: Optional[ControllerConfig] = None) -> ScenarioResult:
    if isinstance(source, Mapping):
        scenario = dict(source)
    else:
        p = Path(source)
        if not p.exists():
            raise ParameterError(f"scenario file not found: {p}")
        scenario = json.loads(p.read_text(encoding="utf-8"))
    if config is None:
        config = validate_config(scenario.get("config", {}))
    world = build_scenario_world(scenario)
    events = EventLog()
    policy = Policy(scenario.get("policy", Policy.OURS_G.value))
    if policy == Policy.LIFT_G:
        record = run_open_loop_attempt(world, config, events=events)
    else:
        record = run_attempt(world, config, events=events, policy=policy)
    mismatches = check_expectations(record, scenario.get("expect", {}))
    return ScenarioResult(scenario.get("name", "scenario"), record, events.lines, mismatches)
