# force_signal.py
"""
Force-trace processing: median filtering, gradients, and the lift/transport
event rules that drive the picking loop.

All detection runs on the median-filtered trace. Edge samples of the filter use
symmetrically shrunk windows, so the "final" force of a trace is read at the last
index whose full window fits.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from scipy.ndimage import median_filter as _nd_median

from core_types import ForceSample, ForceTrace, ParameterError, ThresholdState, TracePhase

logger = logging.getLogger(__name__)


class LiftEventKind(str, Enum):
    STOP_ENTANGLED = "StopEntangled"
    GRADIENT_NEAR_ZERO = "GradientNearZero"
    CLEAN_LIFT = "CleanLift"


class TransportEventKind(str, Enum):
    STOP_ENTANGLED = "StopEntangled"
    DELIVERED = "Delivered"


@dataclass(frozen=True)
class LiftEvent:
    kind: LiftEventKind
    terminal_force: float
    stop_index: Optional[int] = None

    def __post_init__(self):
        if (self.kind == LiftEventKind.STOP_ENTANGLED) != (self.stop_index is not None):
            raise ParameterError("stop_index must be present exactly for StopEntangled")

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind.value, "stop_index": self.stop_index, "terminal_force": self.terminal_force}


@dataclass(frozen=True)
class TransportEvent:
    kind: TransportEventKind
    terminal_force: float
    stop_index: Optional[int] = None

    def __post_init__(self):
        if (self.kind == TransportEventKind.STOP_ENTANGLED) != (self.stop_index is not None):
            raise ParameterError("stop_index must be present exactly for StopEntangled")

    @property
    def delivered(self) -> bool:
        return self.kind == TransportEventKind.DELIVERED

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind.value, "stop_index": self.stop_index, "terminal_force": self.terminal_force}


# ──────────────────────────────────────────────────────────────────────────────
# Filtering
# ──────────────────────────────────────────────────────────────────────────────
def _check_window(window: int, n: int) -> None:
    if int(window) != window or window < 1 or window % 2 == 0:
        raise ParameterError(f"filter window must be an odd positive integer, got {window}")
    if window > n:
        raise ParameterError(f"filter window {window} exceeds trace length {n}")


def median_values(values: np.ndarray, window: int) -> np.ndarray:
    """Centered running median; edge sample i uses radius min(i, n-1-i)."""
    x = np.asarray(values, dtype=np.float64)
    n = x.size
    _check_window(window, n)
    if window == 1:
        return x.copy()
    out = _nd_median(x, size=window, mode="nearest")
    r = window // 2
    for i in range(min(r, n)):
        out[i] = np.median(x[: 2 * i + 1])
        j = n - 1 - i
        out[j] = np.median(x[j - i:])
    return out


def median_filter(trace: ForceTrace, window: int) -> ForceTrace:
    return trace.with_forces(median_values(trace.f_z, window))


def gradient(trace: ForceTrace) -> np.ndarray:
    """dF/dt per tick: central differences inside, one-sided at the ends."""
    if len(trace) < 2:
        raise ParameterError("gradient needs at least two samples")
    return np.gradient(trace.f_z, trace.t.astype(np.float64))


def terminal_index(n: int, window: int) -> int:
    return max(n - 1 - window // 2, 0)


def _first_crossing(filtered: np.ndarray, level: float) -> Optional[int]:
    hits = np.flatnonzero(filtered >= level)
    return int(hits[0]) if hits.size else None


# ──────────────────────────────────────────────────────────────────────────────
# Event rules
# ──────────────────────────────────────────────────────────────────────────────
def detect_lift_event(
    trace: ForceTrace,
    thresholds: ThresholdState,
    filter_window: int = 5,
    grad_eps: float = 0.02,
    tail_fraction: float = 0.25,
    near_zero_ratio: float = 0.4,
) -> LiftEvent:
    if trace.phase != TracePhase.LIFT:
        raise ParameterError(f"expected a Lift trace, got {trace.phase.value}")
    if not 0 < tail_fraction <= 1:
        raise ParameterError(f"tail_fraction must be in (0, 1], got {tail_fraction}")
    filtered = median_filter(trace, filter_window)
    f = filtered.f_z

    idx = _first_crossing(f, thresholds.f_stop)
    if idx is not None:
        logger.debug("lift stop at %d (%.3f N >= %.3f N)", idx, f[idx], thresholds.f_stop)
        return LiftEvent(LiftEventKind.STOP_ENTANGLED, float(f[idx]), idx)

    terminal = float(f[terminal_index(f.size, filter_window)])
    if f.size >= 2:
        tail = max(1, math.ceil(tail_fraction * f.size))
        slope = float(np.mean(np.abs(gradient(filtered)[-tail:])))
    else:
        slope = 0.0
    if slope <= grad_eps and terminal < near_zero_ratio * thresholds.f_fail:
        logger.debug("lift near zero: slope=%.4f terminal=%.3f", slope, terminal)
        return LiftEvent(LiftEventKind.GRADIENT_NEAR_ZERO, terminal)
    return LiftEvent(LiftEventKind.CLEAN_LIFT, terminal)


def detect_transport_event(trace: ForceTrace, thresholds: ThresholdState, filter_window: int = 5) -> TransportEvent:
    if trace.phase != TracePhase.TRANSPORT:
        raise ParameterError(f"expected a Transport trace, got {trace.phase.value}")
    n = len(trace)
    window = min(filter_window, n if n % 2 else n - 1)
    f = median_values(trace.f_z, window)

    idx = _first_crossing(f, thresholds.f_stop)
    if idx is not None:
        logger.debug("transport stop at %d (%.3f N)", idx, f[idx])
        return TransportEvent(TransportEventKind.STOP_ENTANGLED, float(f[idx]), idx)
    return TransportEvent(TransportEventKind.DELIVERED, float(f[terminal_index(n, window)]))


# ──────────────────────────────────────────────────────────────────────────────
# JSON-lines IO
# ──────────────────────────────────────────────────────────────────────────────
def write_trace_jsonl(trace: ForceTrace, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", encoding="utf-8") as fh:
        for s in trace.samples:
            fh.write(json.dumps(s.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")
    return p


def read_trace_jsonl(path: str | Path, phase: TracePhase) -> ForceTrace:
    p = Path(path)
    rows: List[ForceSample] = []
    with p.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                obj = json.loads(line)
                rows.append(ForceSample(int(obj["t"]), float(obj["f_z"]), obj.get("tau")))
            except (ValueError, KeyError, TypeError) as e:
                raise ParameterError(f"{p}:{lineno}: bad sample ({e})") from None
    return ForceTrace.from_samples(rows, phase)


def load_corpus(manifest: str | Path) -> List[Dict[str, Any]]:
    """Load a trace corpus manifest: entries {name, file, phase, expected, stop_index?}."""
    m = Path(manifest)
    entries = json.loads(m.read_text(encoding="utf-8"))
    out = []
    for e in entries["traces"]:
        phase = TracePhase(e["phase"])
        out.append({**e, "trace": read_trace_jsonl(m.parent / e["file"], phase)})
    return out
