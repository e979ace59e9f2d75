# core_types.py
"""
Shared domain types for the wire-harness picking controller and simulator.

Units are fixed: forces in newtons, torques in newton-meters, angles in radians,
angular velocity in radians/second, time as a dimensionless sample tick.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

# ──────────────────────────────────────────────────────────────────────────────
# Errors
# ──────────────────────────────────────────────────────────────────────────────
class PickingError(Exception):
    """Base class for everything this package raises on purpose."""


class ConfigError(PickingError, ValueError):
    pass


class ParameterError(PickingError, ValueError):
    pass


class LogicError(PickingError, RuntimeError):
    pass


class CapacityError(PickingError, ValueError):
    pass


class SimulationError(PickingError, RuntimeError):
    """World-side failure during a primitive; the attempt is aborted."""


# ──────────────────────────────────────────────────────────────────────────────
# Enums
# ──────────────────────────────────────────────────────────────────────────────
class TracePhase(str, Enum):
    LIFT = "Lift"
    TRANSPORT = "Transport"
    REGRASP = "Regrasp"


class Outcome(str, Enum):
    SUCCESS_SINGLE = "SuccessSingle"
    FAIL_NOTHING = "FailNothing"
    FAIL_MULTIPLE = "FailMultiple"
    ABORTED = "Aborted"


class FailureMode(str, Enum):
    GRASP = "GraspFailure"
    SWING = "SwingFailure"
    REGRASP = "RegraspFailure"
    RECOVERY = "RecoveryFailure"

    @property
    def letter(self) -> str:
        return {"GraspFailure": "A", "SwingFailure": "B", "RegraspFailure": "C", "RecoveryFailure": "D"}[self.value]


class Policy(str, Enum):
    LIFT_G = "LiftG"
    OURS_G = "OursG"
    OURS_A = "OursA"


# ──────────────────────────────────────────────────────────────────────────────
# Force traces
# ──────────────────────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class ForceSample:
    t: int
    f_z: float
    tau: Optional[float] = None

    def __post_init__(self):
        if self.t < 0:
            raise ParameterError(f"sample tick must be non-negative, got {self.t}")
        if not math.isfinite(self.f_z):
            raise ParameterError(f"f_z must be finite, got {self.f_z}")
        if self.tau is not None and not math.isfinite(self.tau):
            raise ParameterError(f"tau must be finite, got {self.tau}")

    def to_dict(self) -> Dict[str, Any]:
        d: Dict[str, Any] = {"t": int(self.t), "f_z": float(self.f_z)}
        if self.tau is not None:
            d["tau"] = float(self.tau)
        return d


@dataclass(frozen=True, eq=False)
class ForceTrace:
    """Uniformly sampled vertical force (and optional wrist torque) for one phase.

    Stored column-wise as read-only numpy arrays; `samples` gives the row view.
    """

    t: np.ndarray
    f_z: np.ndarray
    phase: TracePhase
    tau: Optional[np.ndarray] = None

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.int64)
        f_z = np.asarray(self.f_z, dtype=np.float64)
        if t.ndim != 1 or f_z.ndim != 1:
            raise ParameterError("trace columns must be one-dimensional")
        if t.size == 0:
            raise ParameterError("trace must be non-empty")
        if t.size != f_z.size:
            raise ParameterError("t and f_z lengths differ")
        if t[0] < 0 or np.any(np.diff(t) <= 0):
            raise ParameterError("time indices must be non-negative and strictly increasing")
        if not np.all(np.isfinite(f_z)):
            raise ParameterError("f_z must be finite")
        tau = None
        if self.tau is not None:
            tau = np.asarray(self.tau, dtype=np.float64)
            if tau.shape != f_z.shape or not np.all(np.isfinite(tau)):
                raise ParameterError("tau channel must be finite and match f_z")
            tau.setflags(write=False)
        t.setflags(write=False)
        f_z.setflags(write=False)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "f_z", f_z)
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "phase", TracePhase(self.phase))

    @classmethod
    def from_forces(cls, f_z: Sequence[float], phase: TracePhase, tau: Optional[Sequence[float]] = None, t0: int = 0) -> "ForceTrace":
        f = np.asarray(f_z, dtype=np.float64)
        return cls(t=np.arange(t0, t0 + f.size, dtype=np.int64), f_z=f, phase=phase, tau=tau)

    @classmethod
    def from_samples(cls, samples: Iterable[ForceSample], phase: TracePhase) -> "ForceTrace":
        rows = list(samples)
        if not rows:
            raise ParameterError("trace must be non-empty")
        with_tau = [s.tau is not None for s in rows]
        if any(with_tau) and not all(with_tau):
            raise ParameterError("all samples must share the same channel layout")
        tau = [s.tau for s in rows] if all(with_tau) else None
        return cls(t=[s.t for s in rows], f_z=[s.f_z for s in rows], phase=phase, tau=tau)

    @property
    def samples(self) -> List[ForceSample]:
        if self.tau is None:
            return [ForceSample(int(t), float(f)) for t, f in zip(self.t, self.f_z)]
        return [ForceSample(int(t), float(f), float(q)) for t, f, q in zip(self.t, self.f_z, self.tau)]

    def with_forces(self, f_z: Sequence[float]) -> "ForceTrace":
        return ForceTrace(t=self.t, f_z=np.asarray(f_z, dtype=np.float64), phase=self.phase, tau=self.tau)

    def __len__(self) -> int:
        return int(self.t.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ForceTrace):
            return NotImplemented
        if self.phase != other.phase or not np.array_equal(self.t, other.t) or not np.array_equal(self.f_z, other.f_z):
            return False
        if self.tau is None or other.tau is None:
            return self.tau is None and other.tau is None
        return bool(np.array_equal(self.tau, other.tau))

    __hash__ = None

    def to_dict(self) -> Dict[str, Any]:
        return {"phase": self.phase.value, "samples": [s.to_dict() for s in self.samples]}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ForceTrace":
        rows = [ForceSample(int(s["t"]), float(s["f_z"]), s.get("tau")) for s in data["samples"]]
        return cls.from_samples(rows, TracePhase(data["phase"]))


# ──────────────────────────────────────────────────────────────────────────────
# Swing parameters / thresholds
# ──────────────────────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class SwingParams:
    """Swing action a = (theta, omega, n)."""

    theta3: float
    theta4: float
    theta5: float
    omega: float
    n: int

    def __post_init__(self):
        for name in ("theta3", "theta4", "theta5"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ParameterError(f"{name} must be a finite angle >= 0, got {value}")
        if not math.isfinite(self.omega) or self.omega <= 0:
            raise ParameterError(f"omega must be > 0, got {self.omega}")
        if int(self.n) != self.n or self.n < 1:
            raise ParameterError(f"n must be a positive integer, got {self.n}")

    @property
    def angles(self) -> tuple:
        return (self.theta3, self.theta4, self.theta5)

    @property
    def theta_sum(self) -> float:
        return self.theta3 + self.theta4 + self.theta5

    def check_limits(self, angle_max: float, omega_max: float) -> "SwingParams":
        if any(a > angle_max for a in self.angles):
            raise ParameterError(f"swing angles {self.angles} exceed angle_max={angle_max}")
        if self.omega > omega_max:
            raise ParameterError(f"omega={self.omega} exceeds omega_max={omega_max}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {"theta3": self.theta3, "theta4": self.theta4, "theta5": self.theta5, "omega": self.omega, "n": int(self.n)}


@dataclass(frozen=True)
class ThresholdState:
    """Force thresholds plus the list L of terminal transport forces."""

    f_stop: float
    f_fail: float
    delta_f: float
    delta_theta: float
    history: tuple = ()
    f_fail_converged: bool = False

    def __post_init__(self):
        values = (self.f_stop, self.f_fail, self.delta_f, self.delta_theta)
        if not all(math.isfinite(v) for v in values):
            raise ParameterError("thresholds must be finite")
        if not 0 < self.f_fail < self.f_stop:
            raise ParameterError(f"need 0 < f_fail < f_stop, got f_fail={self.f_fail}, f_stop={self.f_stop}")
        if self.delta_f <= 0 or self.delta_theta <= 0:
            raise ParameterError("delta_f and delta_theta must be > 0")
        history = tuple(float(v) for v in self.history)
        if any(not math.isfinite(v) or v < 0 for v in history):
            raise ParameterError("history values must be finite and >= 0")
        object.__setattr__(self, "history", history)

    def appended(self, force: float) -> "ThresholdState":
        return replace(self, history=self.history + (max(float(force), 0.0),))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "f_stop": self.f_stop,
            "f_fail": self.f_fail,
            "delta_f": self.delta_f,
            "delta_theta": self.delta_theta,
            "history": list(self.history),
            "f_fail_converged": self.f_fail_converged,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ThresholdState":
        return cls(
            f_stop=float(data["f_stop"]),
            f_fail=float(data["f_fail"]),
            delta_f=float(data["delta_f"]),
            delta_theta=float(data["delta_theta"]),
            history=tuple(data.get("history", ())),
            f_fail_converged=bool(data.get("f_fail_converged", False)),
        )


# ──────────────────────────────────────────────────────────────────────────────
# Attempt records
# ──────────────────────────────────────────────────────────────────────────────
@dataclass
class PrimitiveCounts:
    lift: int = 0
    swing: int = 0
    regrasp: int = 0
    transport: int = 0
    spin: int = 0

    def to_dict(self) -> Dict[str, int]:
        return {"lift": self.lift, "swing": self.swing, "regrasp": self.regrasp, "transport": self.transport, "spin": self.spin}


@dataclass
class AttemptRecord:
    attempt_id: int
    thresholds_after: ThresholdState
    outcome: Optional[Outcome] = None
    failure_mode: Optional[FailureMode] = None
    counts: PrimitiveCounts = field(default_factory=PrimitiveCounts)
    n_transport: int = 0
    traces: List[ForceTrace] = field(default_factory=list)
    delivered_ids: List[int] = field(default_factory=list)
    ejected_ids: List[int] = field(default_factory=list)
    iterations: int = 0
    policy: str = ""
    episode: int = 0

    def validate(self) -> "AttemptRecord":
        if self.outcome is None:
            raise ParameterError("attempt record has no outcome")
        if self.outcome == Outcome.SUCCESS_SINGLE and self.failure_mode is not None:
            raise ParameterError("SuccessSingle must not carry a failure mode")
        if self.outcome in (Outcome.FAIL_NOTHING, Outcome.FAIL_MULTIPLE) and self.failure_mode is None:
            raise ParameterError(f"{self.outcome.value} requires a failure mode")
        if self.counts.transport != self.n_transport:
            raise ParameterError("counts.transport must equal n_transport")
        if self.n_transport < 0:
            raise ParameterError("n_transport must be >= 0")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            "attempt_id": self.attempt_id,
            "episode": self.episode,
            "policy": self.policy,
            "outcome": self.outcome.value if self.outcome else None,
            "failure_mode": self.failure_mode.value if self.failure_mode else None,
            "counts": self.counts.to_dict(),
            "n_transport": self.n_transport,
            "iterations": self.iterations,
            "delivered_ids": list(self.delivered_ids),
            "ejected_ids": list(self.ejected_ids),
            "thresholds_after": self.thresholds_after.to_dict(),
            "traces": [tr.to_dict() for tr in self.traces],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AttemptRecord":
        return cls(
            attempt_id=int(data["attempt_id"]),
            episode=int(data.get("episode", 0)),
            policy=data.get("policy", ""),
            thresholds_after=ThresholdState.from_dict(data["thresholds_after"]),
            outcome=Outcome(data["outcome"]),
            failure_mode=FailureMode(data["failure_mode"]) if data.get("failure_mode") else None,
            counts=PrimitiveCounts(**data["counts"]),
            n_transport=int(data["n_transport"]),
            iterations=int(data.get("iterations", 0)),
            delivered_ids=list(data.get("delivered_ids", [])),
            ejected_ids=list(data.get("ejected_ids", [])),
            traces=[ForceTrace.from_dict(tr) for tr in data.get("traces", [])],
        ).validate()


# ──────────────────────────────────────────────────────────────────────────────
# Controller config
# ──────────────────────────────────────────────────────────────────────────────
_ANGLE_RE = re.compile(r"^\s*(?:(\d+(?:\.\d*)?|\.\d+)\s*\*?\s*)?(pi|π)\s*(?:/\s*(\d+(?:\.\d*)?))?\s*$", re.IGNORECASE)

# angles and angular rates both accept pi literals
ANGLE_KEYS = (
    "theta3", "theta4", "theta5", "delta_theta", "angle_max", "pre_spin_theta5",
    "omega", "omega_max", "joint_speed_max", "pre_spin_omega",
)


def parse_angle(value: Any) -> float:
    """Radians from a number or a literal like "pi/18", "3pi/4", "π"."""
    if isinstance(value, bool):
        raise ValueError(f"not an angle: {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    text = str(value).strip()
    m = _ANGLE_RE.match(text)
    if m:
        k = float(m.group(1)) if m.group(1) else 1.0
        d = float(m.group(3)) if m.group(3) else 1.0
        if d == 0:
            raise ValueError(f"division by zero in angle {text!r}")
        return k * math.pi / d
    try:
        return float(text)
    except ValueError:
        raise ValueError(f"not an angle: {text!r}") from None


class ControllerConfig(BaseModel):
    """Closed-loop controller parameters; defaults are the initial values of the picking experiments."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    # swing primitive
    theta3: float = math.pi / 4
    theta4: float = math.pi / 3
    theta5: float = math.pi / 3
    omega: float = Field(default=math.pi / 2, gt=0)
    n: int = Field(default=2, ge=1)
    angle_max: float = Field(default=math.pi, gt=0)
    omega_max: float = Field(default=math.pi, gt=0)
    joint_speed_max: float = Field(default=2 * math.pi, gt=0)
    pre_spin_theta5: float = math.pi / 3
    pre_spin_omega: float = Field(default=math.pi / 2, gt=0)

    # thresholds / tuning
    f_stop: float = Field(default=3.0, gt=0)
    f_fail: float = Field(default=1.0, gt=0)
    delta_f: float = Field(default=0.1, gt=0)
    delta_theta: float = Field(default=math.pi / 18, gt=0)
    plateau_window: int = Field(default=3, ge=2)
    plateau_eps: float = Field(default=0.05, gt=0)
    fail_margin: float = Field(default=0.15, ge=0)

    # signal processing
    filter_window: int = Field(default=5, ge=1)
    grad_eps: float = Field(default=0.02, gt=0)
    tail_fraction: float = Field(default=0.25, gt=0, le=1)
    near_zero_ratio: float = Field(default=0.4, gt=0, le=1)
    sample_period_s: float = Field(default=0.01, gt=0)

    # grasp planning
    n_rotations: int = Field(default=8, ge=1)
    n_heights: int = Field(default=4, ge=1)
    top_k: int = Field(default=10, ge=1)
    mid_bias_alpha: float = Field(default=0.5, ge=0, le=1)
    gripper_open_width: float = Field(default=0.04, gt=0)
    gripper_finger_width: float = Field(default=0.008, gt=0)
    gripper_finger_length: float = Field(default=0.024, gt=0)
    gripper_insert_depth: float = Field(default=0.02, ge=0)
    grasp_smoothing_sigma: float = Field(default=1.0, ge=0)

    # attempt loop
    loop_cap: int = Field(default=8, ge=1)
    keep_traces: bool = True

    @field_validator(*ANGLE_KEYS, mode="before")
    @classmethod
    def _angle(cls, v: Any) -> float:
        return parse_angle(v)

    @field_validator("filter_window")
    @classmethod
    def _odd_window(cls, v: int) -> int:
        if v % 2 == 0:
            raise ValueError("filter_window must be odd")
        return v

    @model_validator(mode="after")
    def _limits(self) -> "ControllerConfig":
        if self.f_fail >= self.f_stop:
            raise ValueError("f_fail must be < f_stop")
        for name in ("theta3", "theta4", "theta5", "pre_spin_theta5"):
            value = getattr(self, name)
            if value < 0 or value > self.angle_max:
                raise ValueError(f"{name}={value} outside [0, angle_max={self.angle_max}]")
        if self.omega > self.omega_max or self.pre_spin_omega > self.omega_max:
            raise ValueError(f"omega must be <= omega_max={self.omega_max}")
        return self

    def initial_swing(self) -> SwingParams:
        return SwingParams(self.theta3, self.theta4, self.theta5, self.omega, self.n)

    def pre_spin(self) -> SwingParams:
        return SwingParams(0.0, 0.0, self.pre_spin_theta5, self.pre_spin_omega, 2)

    def initial_thresholds(self) -> ThresholdState:
        return ThresholdState(f_stop=self.f_stop, f_fail=self.f_fail, delta_f=self.delta_f, delta_theta=self.delta_theta)


def format_validation_error(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e.get("loc", ())) or "config"
        msg = str(e.get("msg", "")).removeprefix("Value error, ")
        parts.append(f"{loc}: {msg}")
    return "; ".join(parts)


def validate_config(raw_config: Optional[Mapping[str, Any]] = None) -> ControllerConfig:
    raw = {str(k).strip().lower(): v for k, v in (raw_config or {}).items() if v is not None}
    try:
        return ControllerConfig(**raw)
    except ValidationError as e:
        raise ConfigError(format_validation_error(e)) from None
    except ValueError as e:
        raise ConfigError(str(e)) from None


def serialize_config(config: ControllerConfig) -> str:
    lines = []
    for key, value in config.model_dump().items():
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{key}={text}")
    return "\n".join(lines) + "\n"


def load_config(path: Optional[str | Path] = None, overrides: Optional[Mapping[str, Any]] = None) -> ControllerConfig:
    raw: Dict[str, Any] = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        raw.update({k: v for k, v in dotenv_values(p).items() if v is not None})
    raw.update(overrides or {})
    return validate_config(raw)


def parse_overrides(pairs: Optional[Sequence[str]]) -> Dict[str, str]:
    """`key=value` CLI pairs to a dict."""
    out: Dict[str, str] = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"expected key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip().lower()] = value.strip()
    return out
