# controller.py
"""
Closed-loop picking policy.

One attempt is a small state machine:

    Idle → Grasping → Lifting → {Swinging | Regrasping | PreTransportSpin}
    Swinging / Regrasping → PreTransportSpin → Transporting → {Lifting | Done}

Force events from the lift decide the branch; the transport result either ends
the attempt or feeds the threshold tuner and loops back to the lift with larger
swing angles.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from core_types import (
    AttemptRecord,
    ControllerConfig,
    FailureMode,
    ForceTrace,
    LogicError,
    Outcome,
    Policy,
    SimulationError,
    SwingParams,
    ThresholdState,
    TracePhase,
)
from force_signal import (
    LiftEventKind,
    TransportEvent,
    TransportEventKind,
    detect_lift_event,
    detect_transport_event,
)
from grasp_planner import GraspCandidate, detect_grasps, make_gripper_template, rank_with_mid_bias
from simulator import BinState, RegraspOutcome, render_depth

logger = logging.getLogger(__name__)

EVENT_SCHEMA = "picking-event/1"


# ──────────────────────────────────────────────────────────────────────────────
# State machine
# ──────────────────────────────────────────────────────────────────────────────
class Phase(str, Enum):
    IDLE = "Idle"
    GRASPING = "Grasping"
    LIFTING = "Lifting"
    SWINGING = "Swinging"
    REGRASPING = "Regrasping"
    PRE_TRANSPORT_SPIN = "PreTransportSpin"
    TRANSPORTING = "Transporting"
    DONE = "Done"


class Event(str, Enum):
    START = "Start"
    GRASPED = "Grasped"
    GRASP_FAILED = "GraspFailed"
    LIFT_STOP = "LiftStop"
    REGRASP_NEEDED = "RegraspNeeded"
    LIFT_CLEAN = "LiftClean"
    SWING_DONE = "SwingDone"
    REGRASP_DONE = "RegraspDone"
    HANDOFF_FAILED = "HandoffFailed"
    SLIPPED = "Slipped"
    SPIN_DONE = "SpinDone"
    RETRY = "Retry"
    FINISHED = "Finished"
    ABORT = "Abort"


TRANSITIONS: Dict[Tuple[Phase, Event], Phase] = {
    (Phase.IDLE, Event.START): Phase.GRASPING,
    (Phase.GRASPING, Event.GRASPED): Phase.LIFTING,
    (Phase.GRASPING, Event.GRASP_FAILED): Phase.DONE,
    (Phase.LIFTING, Event.LIFT_STOP): Phase.SWINGING,
    (Phase.LIFTING, Event.REGRASP_NEEDED): Phase.REGRASPING,
    (Phase.LIFTING, Event.LIFT_CLEAN): Phase.PRE_TRANSPORT_SPIN,
    (Phase.SWINGING, Event.SWING_DONE): Phase.PRE_TRANSPORT_SPIN,
    (Phase.SWINGING, Event.SLIPPED): Phase.DONE,
    (Phase.REGRASPING, Event.REGRASP_DONE): Phase.PRE_TRANSPORT_SPIN,
    (Phase.REGRASPING, Event.HANDOFF_FAILED): Phase.DONE,
    (Phase.PRE_TRANSPORT_SPIN, Event.SPIN_DONE): Phase.TRANSPORTING,
    (Phase.PRE_TRANSPORT_SPIN, Event.SLIPPED): Phase.DONE,
    (Phase.TRANSPORTING, Event.RETRY): Phase.LIFTING,
    (Phase.TRANSPORTING, Event.FINISHED): Phase.DONE,
}
for _phase in Phase:
    if _phase != Phase.DONE:
        TRANSITIONS[(_phase, Event.ABORT)] = Phase.DONE


def next_phase(phase: Phase, event: Event) -> Phase:
    try:
        return TRANSITIONS[(phase, event)]
    except KeyError:
        raise LogicError(f"illegal transition {phase.value} --{event.value}-->") from None


class TuningContext(str, Enum):
    NO_STOP_EITHER = "NoStopEither"
    NO_STOP_LIFT_STOP_TRANSPORT = "NoStopLiftStopTransport"
    OTHER = "Other"


class End(str, Enum):
    A = "A"
    B = "B"


@dataclass(frozen=True)
class SpinCheckResult:
    torque_pose_a: float
    torque_pose_b: float
    chosen_end: End

    @classmethod
    def from_torques(cls, torque_a: float, torque_b: float) -> "SpinCheckResult":
        end = End.A if abs(torque_a) <= abs(torque_b) else End.B
        return cls(torque_a, torque_b, end)


@dataclass
class ControllerState:
    swing: SwingParams
    thresholds: ThresholdState
    record: AttemptRecord
    phase: Phase = Phase.IDLE
    n_transport: int = 0

    def advance(self, event: Event) -> Phase:
        self.phase = next_phase(self.phase, event)
        return self.phase


class EventLog:
    """Collects one dict per primitive execution."""

    def __init__(self, episode: int = 0):
        self.episode = episode
        self.lines: List[Dict[str, Any]] = []

    def emit(self, record: AttemptRecord, iteration: int, primitive: str, event: str, thresholds: ThresholdState, **params: Any) -> None:
        self.lines.append(
            {
                "schema": EVENT_SCHEMA,
                "episode": self.episode,
                "attempt_id": record.attempt_id,
                "iteration": iteration,
                "primitive": primitive,
                "event": event,
                "params": params,
                "thresholds": {"f_stop": thresholds.f_stop, "f_fail": thresholds.f_fail},
            }
        )


# ──────────────────────────────────────────────────────────────────────────────
# Scheduling / tuning
# ──────────────────────────────────────────────────────────────────────────────
def schedule_swing(current: SwingParams, delta_theta: float, config: ControllerConfig) -> SwingParams:
    """theta += delta_theta per joint, clamped to the angle and joint-speed limits."""
    limit = min(config.angle_max, config.joint_speed_max / current.omega)

    def step(theta: float) -> float:
        return theta if theta >= limit else min(theta + delta_theta, limit)

    return replace(current, theta3=step(current.theta3), theta4=step(current.theta4), theta5=step(current.theta5))


def update_thresholds(
    thresholds: ThresholdState,
    context: TuningContext,
    plateau_window: int = 3,
    plateau_eps: float = 0.05,
    fail_margin: float = 0.15,
) -> ThresholdState:
    if context == TuningContext.NO_STOP_LIFT_STOP_TRANSPORT:
        floor = thresholds.f_fail + thresholds.delta_f
        f_stop = min(thresholds.f_stop, max(thresholds.f_stop - thresholds.delta_f, floor))
        return replace(thresholds, f_stop=f_stop)

    if context == TuningContext.NO_STOP_EITHER and not thresholds.f_fail_converged:
        tail = thresholds.history[-plateau_window:]
        if len(tail) == plateau_window and max(tail) - min(tail) < plateau_eps:
            f_fail = min(float(np.mean(tail)) + fail_margin, thresholds.f_stop - thresholds.delta_f)
            logger.info("F_fail converged at %.3f N (plateau %s)", f_fail, tail)
            return replace(thresholds, f_fail=f_fail, f_fail_converged=True)
    return thresholds


def classify_outcome(result: TransportEvent, thresholds: ThresholdState) -> Optional[Outcome]:
    """Terminal verdict for a transport; None means the loop continues."""
    if result.kind == TransportEventKind.STOP_ENTANGLED:
        return None
    if result.terminal_force < thresholds.f_fail:
        return Outcome.SUCCESS_SINGLE
    return Outcome.FAIL_MULTIPLE


def regrasp(world: BinState, state: ControllerState) -> Tuple[SpinCheckResult, RegraspOutcome]:
    if world.held is None:
        raise LogicError("regrasp needs a grasped object")
    outcome = world.apply_regrasp_physics()
    return SpinCheckResult.from_torques(outcome.torque_a, outcome.torque_b), outcome


# ──────────────────────────────────────────────────────────────────────────────
# Grasp selection
# ──────────────────────────────────────────────────────────────────────────────
def plan_grasps(world: BinState, config: ControllerConfig, policy: Policy = Policy.OURS_G) -> List[GraspCandidate]:
    depth = render_depth(world)
    template = make_gripper_template(
        depth.resolution, config.gripper_open_width, config.gripper_finger_width, config.gripper_finger_length
    )
    pool = config.top_k * 5 if policy == Policy.OURS_A else config.top_k
    cands = detect_grasps(
        depth,
        template,
        config.n_rotations,
        config.n_heights,
        pool,
        config.gripper_insert_depth,
        config.grasp_smoothing_sigma,
    )
    if policy == Policy.OURS_A and cands:
        cands = rank_with_mid_bias(cands, depth, config.mid_bias_alpha)
    return cands[: config.top_k]


def _grasp(world: BinState, config: ControllerConfig, policy: Policy, state: ControllerState, events: EventLog) -> Optional[int]:
    cands = plan_grasps(world, config, policy)
    body = world.grasp(cands[0]) if cands else None
    top = cands[0] if cands else None
    events.emit(
        state.record,
        0,
        "grasp",
        "grasped" if body is not None else "failed",
        state.thresholds,
        candidates=len(cands),
        u=top.u if top else None,
        v=top.v if top else None,
        body=body,
    )
    return body


def _finish(state: ControllerState, outcome: Outcome, mode: Optional[FailureMode] = None) -> AttemptRecord:
    rec = state.record
    rec.outcome = outcome
    rec.failure_mode = mode
    rec.n_transport = state.n_transport
    rec.thresholds_after = state.thresholds
    return rec.validate()


def _keep(config: ControllerConfig, rec: AttemptRecord, trace: ForceTrace) -> None:
    if config.keep_traces:
        rec.traces.append(trace)


def _stop_time(config: ControllerConfig, index: Optional[int]) -> Optional[float]:
    return None if index is None else index * config.sample_period_s


def _delivered_outcome(ids: List[int]) -> Tuple[Outcome, Optional[FailureMode]]:
    if len(ids) > 1:
        return Outcome.FAIL_MULTIPLE, FailureMode.RECOVERY
    return Outcome.SUCCESS_SINGLE, None


# ──────────────────────────────────────────────────────────────────────────────
# Attempts
# ──────────────────────────────────────────────────────────────────────────────
def run_attempt(
    world: BinState,
    config: ControllerConfig,
    thresholds: Optional[ThresholdState] = None,
    attempt_id: int = 0,
    events: Optional[EventLog] = None,
    policy: Policy = Policy.OURS_G,
) -> AttemptRecord:
    events = events if events is not None else EventLog()
    thresholds = thresholds or config.initial_thresholds()
    state = ControllerState(
        swing=config.initial_swing(),
        thresholds=thresholds,
        record=AttemptRecord(attempt_id=attempt_id, thresholds_after=thresholds, policy=Policy(policy).value, episode=events.episode),
    )
    try:
        return _closed_loop(world, config, state, events, Policy(policy))
    except SimulationError as e:
        logger.warning("attempt %d aborted: %s", attempt_id, e)
        world.release()
        if state.phase != Phase.DONE:
            state.advance(Event.ABORT)
        events.emit(state.record, state.record.iterations, "abort", "error", state.thresholds, reason=str(e))
        return _finish(state, Outcome.ABORTED)


def _closed_loop(world: BinState, config: ControllerConfig, state: ControllerState, events: EventLog, policy: Policy) -> AttemptRecord:
    rec = state.record
    counts = rec.counts
    state.advance(Event.START)

    body = _grasp(world, config, policy, state, events)
    if body is None:
        state.advance(Event.GRASP_FAILED)
        return _finish(state, Outcome.FAIL_NOTHING, FailureMode.GRASP)
    state.advance(Event.GRASPED)

    while True:
        rec.iterations += 1
        it = rec.iterations

        # lift
        lift_trace = world.synth_lift_trace()
        _keep(config, rec, lift_trace)
        counts.lift += 1
        lift = detect_lift_event(
            lift_trace, state.thresholds, config.filter_window, config.grad_eps, config.tail_fraction, config.near_zero_ratio
        )
        lift_stopped = lift.kind == LiftEventKind.STOP_ENTANGLED
        events.emit(rec, it, "lift", lift.kind.value, state.thresholds,
            terminal_force=lift.terminal_force, stop_index=lift.stop_index, stop_time_s=_stop_time(config, lift.stop_index),
        )

        if lift.kind == LiftEventKind.GRADIENT_NEAR_ZERO or state.n_transport > 2:
            state.advance(Event.REGRASP_NEEDED)
            counts.regrasp += 1
            spin, phys = regrasp(world, state)
            tau_trace = ForceTrace.from_forces([lift.terminal_force] * 2, TracePhase.REGRASP, tau=[spin.torque_pose_a, spin.torque_pose_b])
            _keep(config, rec, tau_trace)
            events.emit(
                rec, it, "regrasp", "handoff_ok" if phys.handoff_ok else "handoff_failed", state.thresholds,
                torque_a=spin.torque_pose_a, torque_b=spin.torque_pose_b, chosen_end=spin.chosen_end.value,
                hang_angle=phys.hang_angle, edges_pulled=phys.edges_pulled,
            )
            if not phys.handoff_ok:
                state.advance(Event.HANDOFF_FAILED)
                return _finish(state, Outcome.FAIL_NOTHING, FailureMode.REGRASP)
            state.advance(Event.REGRASP_DONE)
        elif lift_stopped:
            state.advance(Event.LIFT_STOP)
            counts.swing += 1
            out = world.apply_swing(state.swing.check_limits(config.angle_max, config.omega_max))
            rec.ejected_ids.extend(out.ejected_ids)
            events.emit(
                rec, it, "swing", "slipped" if out.slipped else "done", state.thresholds,
                **state.swing.to_dict(), edges_broken=out.edges_broken, ejected=list(out.ejected_ids),
            )
            if out.slipped:
                state.advance(Event.SLIPPED)
                return _finish(state, Outcome.FAIL_NOTHING, FailureMode.SWING)
            state.advance(Event.SWING_DONE)
        else:
            state.advance(Event.LIFT_CLEAN)

        # pre-transport two-way spin
        counts.spin += 1
        spin_params = config.pre_spin().check_limits(config.angle_max, config.omega_max)
        out = world.apply_swing(spin_params)
        rec.ejected_ids.extend(out.ejected_ids)
        events.emit(
            rec, it, "spin", "slipped" if out.slipped else "done", state.thresholds,
            **spin_params.to_dict(), edges_broken=out.edges_broken, ejected=list(out.ejected_ids),
        )
        if out.slipped:
            state.advance(Event.SLIPPED)
            return _finish(state, Outcome.FAIL_NOTHING, FailureMode.SWING)
        state.advance(Event.SPIN_DONE)

        # transport
        transport_trace = world.synth_transport_trace()
        _keep(config, rec, transport_trace)
        counts.transport += 1
        state.n_transport += 1
        result = detect_transport_event(transport_trace, state.thresholds, config.filter_window)
        verdict = classify_outcome(result, state.thresholds)
        events.emit(
            rec, it, "transport", result.kind.value, state.thresholds,
            terminal_force=result.terminal_force, stop_index=result.stop_index, stop_time_s=_stop_time(config, result.stop_index),
            n_transport=state.n_transport,
        )

        if result.delivered:
            state.thresholds = state.thresholds.appended(result.terminal_force)
        if verdict == Outcome.SUCCESS_SINGLE:
            context = TuningContext.OTHER if lift_stopped else TuningContext.NO_STOP_EITHER
        elif result.kind == TransportEventKind.STOP_ENTANGLED and not lift_stopped:
            context = TuningContext.NO_STOP_LIFT_STOP_TRANSPORT
        else:
            context = TuningContext.OTHER
        state.thresholds = update_thresholds(
            state.thresholds, context, config.plateau_window, config.plateau_eps, config.fail_margin
        )

        if verdict == Outcome.SUCCESS_SINGLE:
            state.advance(Event.FINISHED)
            rec.delivered_ids = world.deliver()
            events.emit(rec, it, "deliver", "delivered", state.thresholds, ids=list(rec.delivered_ids))
            return _finish(state, *_delivered_outcome(rec.delivered_ids))

        if rec.iterations >= config.loop_cap:
            state.advance(Event.FINISHED)
            if verdict == Outcome.FAIL_MULTIPLE:
                rec.delivered_ids = world.deliver()
                events.emit(rec, it, "deliver", "loop_cap", state.thresholds, ids=list(rec.delivered_ids))
                return _finish(state, *_delivered_outcome(rec.delivered_ids))
            world.release()
            events.emit(rec, it, "release", "loop_cap", state.thresholds)
            return _finish(state, Outcome.ABORTED)

        state.swing = schedule_swing(state.swing, state.thresholds.delta_theta, config)
        state.advance(Event.RETRY)


def run_open_loop_attempt(
    world: BinState,
    config: ControllerConfig,
    thresholds: Optional[ThresholdState] = None,
    attempt_id: int = 0,
    events: Optional[EventLog] = None,
) -> AttemptRecord:
    """Grasp, lift, transport, drop; no force monitoring, no swing or regrasp."""
    events = events if events is not None else EventLog()
    thresholds = thresholds or config.initial_thresholds()
    state = ControllerState(
        swing=config.initial_swing(),
        thresholds=thresholds,
        record=AttemptRecord(attempt_id=attempt_id, thresholds_after=thresholds, policy=Policy.LIFT_G.value, episode=events.episode),
    )
    rec = state.record
    try:
        state.advance(Event.START)
        if _grasp(world, config, Policy.LIFT_G, state, events) is None:
            state.advance(Event.GRASP_FAILED)
            return _finish(state, Outcome.FAIL_NOTHING, FailureMode.GRASP)
        state.advance(Event.GRASPED)
        rec.iterations = 1
        _keep(config, rec, world.synth_lift_trace())
        rec.counts.lift += 1
        state.advance(Event.LIFT_CLEAN)
        state.advance(Event.SPIN_DONE)
        _keep(config, rec, world.synth_transport_trace())
        rec.counts.transport += 1
        state.n_transport += 1
        state.advance(Event.FINISHED)
        rec.delivered_ids = world.deliver()
        events.emit(rec, 1, "deliver", "delivered", state.thresholds, ids=list(rec.delivered_ids))
        return _finish(state, *_delivered_outcome(rec.delivered_ids))
    except SimulationError as e:
        logger.warning("open-loop attempt %d aborted: %s", attempt_id, e)
        world.release()
        if state.phase != Phase.DONE:
            state.advance(Event.ABORT)
        return _finish(state, Outcome.ABORTED)
