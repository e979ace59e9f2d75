# simulator.py
"""
Seeded stochastic bin of wire harnesses.

Bodies are 3D polylines dropped by a random walk and draped over what is already
in the bin. Entanglement is a weighted graph over body ids (edge weight = number
of locked crossings). Every random draw the controller's primitives cause goes
through one `ScriptedRng`, in a fixed order, so a seed replays bit-identically and
scenario files can force individual outcomes.

Draw order per primitive:
  grasp      grasp_miss
  lift       lift_snag, snag_magnitude (only with attached crossings), noise
  swing      per repetition: break (per neighbour, ascending id), slip, eject (per neighbour)
  regrasp    hang_angle, pull (on a successful handoff with attached crossings)
  transport  transport_snag, snag_magnitude (only with attached crossings), noise
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Deque, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from core_types import (
    CapacityError,
    ConfigError,
    ForceTrace,
    LogicError,
    ParameterError,
    SwingParams,
    TracePhase,
    format_validation_error,
    parse_angle,
)
from grasp_planner import DepthMap, GraspCandidate

logger = logging.getLogger(__name__)

SNAPSHOT_SCHEMA = "bin-state/1"
RNG_KINDS = (
    "grasp_miss",
    "lift_snag",
    "snag_magnitude",
    "break",
    "slip",
    "eject",
    "hang_angle",
    "pull",
    "transport_snag",
)
SNAG_TICKS = 6
_RAMP_STEEPNESS = 10.0
_HEIGHT_CELL = 0.02


# ──────────────────────────────────────────────────────────────────────────────
# Profiles / config
# ──────────────────────────────────────────────────────────────────────────────
class ObjectProfile(str, Enum):
    MEDIUM_74CM = "Medium74cm"
    LONG_120CM = "Long120cm"


@dataclass(frozen=True)
class ProfileSpec:
    length: float
    weight: float
    connector_masses: Tuple[float, float]


PROFILES: Dict[ObjectProfile, ProfileSpec] = {
    ObjectProfile.MEDIUM_74CM: ProfileSpec(0.74, 0.8, (0.12, 0.06)),
    ObjectProfile.LONG_120CM: ProfileSpec(1.2, 1.3, (0.18, 0.10)),
}


class WorldConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    object_profile: ObjectProfile = ObjectProfile.MEDIUM_74CM
    n_objects: int = Field(default=40, ge=0)
    rng_seed: int = Field(default=0, ge=0, lt=2**64)
    noise_sigma: float = Field(default=0.03, ge=0)

    # calibration knobs
    swing_break_gain: float = Field(default=0.12, ge=0, le=1)
    slip_gain: float = Field(default=0.004, ge=0, le=1)
    eject_gain: float = Field(default=0.05, ge=0, le=1)
    regrasp_vertical_tolerance: float = Field(default=math.pi / 12, ge=0)
    hang_angle_sigma: float = Field(default=0.15, ge=0)
    pull_prob: float = Field(default=0.5, ge=0, le=1)
    grasp_miss_rate: float = Field(default=0.02, ge=0, le=1)

    # bin geometry
    bin_capacity: int = Field(default=60, ge=0)
    bin_size_m: float = Field(default=0.64, gt=0)
    bin_depth: float = Field(default=0.3, gt=0)
    resolution: float = Field(default=0.008, gt=0)
    cable_radius: float = Field(default=0.008, gt=0)
    n_segments: int = Field(default=12, ge=1)
    entangle_prob: float = Field(default=0.04, ge=0, le=1)

    # force synthesis
    snag_rate: float = Field(default=1.2, ge=0)
    snag_force: float = Field(default=2.5, ge=0)
    dangle_relief: float = Field(default=0.1, ge=0, le=1)
    lift_height: float = Field(default=0.55, gt=0)
    transport_height: float = Field(default=1.0, gt=0)
    slack_ratio: float = Field(default=0.4, ge=0, lt=1)
    lift_ticks: int = Field(default=80, ge=SNAG_TICKS + 2)
    transport_ticks: int = Field(default=100, ge=SNAG_TICKS + 2)
    jaw_lever: float = Field(default=0.03, gt=0)

    @field_validator("regrasp_vertical_tolerance", mode="before")
    @classmethod
    def _angle(cls, v: Any) -> float:
        return parse_angle(v)

    @property
    def profile(self) -> ProfileSpec:
        return PROFILES[self.object_profile]

    @property
    def grid_size(self) -> int:
        return int(round(self.bin_size_m / self.resolution))


def make_world_config(raw: Optional[Mapping[str, Any]] = None, **kwargs: Any) -> WorldConfig:
    data = {str(k).strip().lower(): v for k, v in (raw or {}).items()}
    data.update(kwargs)
    try:
        return WorldConfig(**data)
    except ValidationError as e:
        raise ConfigError(format_validation_error(e)) from None


# ──────────────────────────────────────────────────────────────────────────────
# Randomness
# ──────────────────────────────────────────────────────────────────────────────
class ScriptedRng:
    """numpy Generator with per-kind queues of forced outcomes.

    A forced value replaces one draw of that kind: booleans for Bernoulli kinds,
    floats for uniform/normal kinds. Trace noise is never scripted.
    """

    def __init__(self, seed: int, forced: Optional[Mapping[str, Iterable[Any]]] = None):
        self.generator = np.random.default_rng(seed)
        self.forced: Dict[str, Deque[Any]] = {k: deque() for k in RNG_KINDS}
        self.draws = 0
        for kind, values in (forced or {}).items():
            self.script(kind, values)

    def script(self, kind: str, values: Iterable[Any]) -> None:
        if kind not in self.forced:
            raise ParameterError(f"unknown draw kind {kind!r}; expected one of {', '.join(RNG_KINDS)}")
        self.forced[kind].extend(values)

    def _pop(self, kind: str) -> Tuple[bool, Any]:
        self.draws += 1
        q = self.forced[kind]
        return (True, q.popleft()) if q else (False, None)

    def bernoulli(self, kind: str, p: float) -> bool:
        hit, value = self._pop(kind)
        if hit:
            return bool(value)
        return bool(self.generator.random() < p)

    def uniform(self, kind: str) -> float:
        hit, value = self._pop(kind)
        return float(value) if hit else float(self.generator.random())

    def normal(self, kind: str, sigma: float) -> float:
        hit, value = self._pop(kind)
        if hit:
            return float(value)
        return float(self.generator.normal(0.0, sigma)) if sigma > 0 else 0.0

    def noise(self, n: int, sigma: float) -> np.ndarray:
        if sigma <= 0:
            return np.zeros(n)
        self.draws += 1
        return self.generator.normal(0.0, sigma, n)

    def state(self) -> Dict[str, Any]:
        return {
            "bit_generator": self.generator.bit_generator.state,
            "draws": self.draws,
            "forced": {k: list(v) for k, v in self.forced.items() if v},
        }

    @classmethod
    def from_state(cls, state: Mapping[str, Any]) -> "ScriptedRng":
        rng = cls(0, state.get("forced"))
        rng.generator.bit_generator.state = state["bit_generator"]
        rng.draws = int(state.get("draws", 0))
        return rng


# ──────────────────────────────────────────────────────────────────────────────
# Bodies
# ──────────────────────────────────────────────────────────────────────────────
@dataclass(eq=False)
class HarnessBody:
    id: int
    polyline: np.ndarray
    length: float
    weight: float
    connector_masses: Tuple[float, float]
    grasp_point: Optional[float] = None

    def __post_init__(self):
        self.polyline = np.asarray(self.polyline, dtype=np.float64)
        if self.polyline.ndim != 2 or self.polyline.shape[1] != 3 or len(self.polyline) < 2:
            raise ParameterError("polyline must be an (n>=2, 3) array")
        if self.weight <= 0:
            raise ParameterError("weight must be > 0")
        if sum(self.connector_masses) >= self.weight:
            raise ParameterError("connector masses must be lighter than the whole body")
        if abs(self.polyline_length - self.length) > 0.01 * self.length:
            raise ParameterError(f"polyline length {self.polyline_length:.4f} differs from {self.length} by more than 1%")
        if self.grasp_point is not None and not 0.0 <= self.grasp_point <= 1.0:
            raise ParameterError("grasp_point must be in [0, 1]")

    @property
    def polyline_length(self) -> float:
        return float(np.linalg.norm(np.diff(self.polyline, axis=0), axis=1).sum())

    @property
    def linear_weight(self) -> float:
        return (self.weight - sum(self.connector_masses)) / self.length

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "polyline": self.polyline.tolist(),
            "length": self.length,
            "weight": self.weight,
            "connector_masses": list(self.connector_masses),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "HarnessBody":
        return cls(
            id=int(data["id"]),
            polyline=np.asarray(data["polyline"], dtype=np.float64),
            length=float(data["length"]),
            weight=float(data["weight"]),
            connector_masses=tuple(data["connector_masses"]),
        )


def straight_body(body_id: int, start: Sequence[float], end: Sequence[float], profile: ProfileSpec, n_segments: int = 12) -> HarnessBody:
    """Straight body between two 3D points; its length must match the profile."""
    a, b = np.asarray(start, dtype=float), np.asarray(end, dtype=float)
    pts = a + np.linspace(0.0, 1.0, n_segments + 1)[:, None] * (b - a)
    return HarnessBody(body_id, pts, profile.length, profile.weight, profile.connector_masses)


# ──────────────────────────────────────────────────────────────────────────────
# Outcome types
# ──────────────────────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class SwingOutcome:
    edges_broken: int
    slipped: bool
    ejected_ids: Tuple[int, ...] = ()


@dataclass(frozen=True)
class RegraspOutcome:
    torque_a: float
    torque_b: float
    handoff_ok: bool
    new_s: Optional[float]
    hang_angle: float
    edges_pulled: int = 0


# ──────────────────────────────────────────────────────────────────────────────
# Closed forms
# ──────────────────────────────────────────────────────────────────────────────
def lifted_fraction(length: float, s: float, height: float, slack_ratio: float = 0.4) -> float:
    reach = height / (length * max(s, 1.0 - s))
    return float(min(max((reach - slack_ratio) / (1.0 - slack_ratio), 0.0), 1.0))


def ramp_profile(n: int) -> np.ndarray:
    """Logistic ramp normalised to exactly 0 at the first and 1 at the last tick."""
    x = np.linspace(0.0, 1.0, n)
    sig = lambda z: 1.0 / (1.0 + np.exp(-z))
    lo, hi = sig(-_RAMP_STEEPNESS * 0.5), sig(_RAMP_STEEPNESS * 0.5)
    out = (sig(_RAMP_STEEPNESS * (x - 0.5)) - lo) / (hi - lo)
    out[0], out[-1] = 0.0, 1.0
    return out


def regrasp_torques(body: HarnessBody, s: float, jaw_lever: float) -> Tuple[float, float]:
    """Wrist torque with the A-side strand (pose 0) or B-side strand (pose pi) over the jaw.

    The strand lies along the lever for a = min(strand, jaw_lever) and hangs from
    its tip beyond that, end connector included.
    """
    w = body.linear_weight
    m_a, m_b = body.connector_masses

    def torque(strand: float, end_mass: float) -> float:
        a = min(strand, jaw_lever)
        return w * a * a / 2.0 + (w * (strand - a) + end_mass) * a

    return torque(s * body.length, m_a), torque((1.0 - s) * body.length, m_b)


def break_probability(gain: float, params: SwingParams, crossing_weight: float) -> float:
    return float(min(max(gain * params.theta_sum * params.omega / crossing_weight, 0.0), 1.0))


def slip_probability(gain: float, params: SwingParams) -> float:
    return float(min(max(gain * params.omega**2 * params.theta_sum, 0.0), 1.0))


def snag_probability(snag_rate: float, crossing_weight: float) -> float:
    return 0.0 if crossing_weight <= 0 else float(1.0 - math.exp(-snag_rate * crossing_weight))


def _segment_crossings(segs: np.ndarray, owner: np.ndarray, n_bodies: int) -> np.ndarray:
    """Pairwise count of proper 2D crossings between segments of different bodies."""
    a, b = segs[:, None, 0, :], segs[:, None, 1, :]
    c, d = segs[None, :, 0, :], segs[None, :, 1, :]

    def cross(p, q, r):
        return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0])

    o1, o2 = cross(a, b, c), cross(a, b, d)
    o3, o4 = cross(c, d, a), cross(c, d, b)
    hit = (o1 * o2 < 0) & (o3 * o4 < 0) & (owner[:, None] < owner[None, :])
    counts = np.zeros((n_bodies, n_bodies), dtype=np.int64)
    i, j = np.nonzero(hit)
    np.add.at(counts, (owner[i], owner[j]), 1)
    return counts


# ──────────────────────────────────────────────────────────────────────────────
# World
# ──────────────────────────────────────────────────────────────────────────────
@dataclass
class BinState:
    config: WorldConfig
    rng: ScriptedRng
    bodies: Dict[int, HarnessBody] = field(default_factory=dict)
    graph: nx.Graph = field(default_factory=nx.Graph)
    held: Optional[int] = None
    delivered: List[int] = field(default_factory=list)
    ejected: List[int] = field(default_factory=list)
    fill_size: int = 0
    fills: int = 0
    next_id: int = 0
    forced_target: Optional[Tuple[int, Optional[float]]] = None
    _raster: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default=None, repr=False)

    # ── bookkeeping ──────────────────────────────────────────────────────────
    @property
    def n_in_bin(self) -> int:
        return len(self.bodies)

    def conservation_ok(self) -> bool:
        return self.n_in_bin + len(self.delivered) + len(self.ejected) == self.fill_size

    def held_body(self) -> HarnessBody:
        if self.held is None:
            raise LogicError("no object is grasped")
        return self.bodies[self.held]

    def _check_grasped(self, grasped: Optional[int]) -> HarnessBody:
        body = self.held_body()
        if grasped is not None and grasped != body.id:
            raise LogicError(f"object {grasped} is not the grasped object ({body.id})")
        return body

    def _touch(self) -> None:
        self._raster = None

    def crossing_weight(self, body_id: int) -> int:
        return int(sum(d.get("weight", 1) for _, _, d in self.graph.edges(body_id, data=True)))

    def partners(self, body_id: int) -> List[int]:
        return sorted(self.graph.neighbors(body_id))

    def add_edge(self, a: int, b: int, weight: int = 1) -> None:
        if a == b:
            raise ParameterError("self-loops are not allowed")
        if a not in self.bodies or b not in self.bodies:
            raise ParameterError(f"edge ({a}, {b}) references a body not in the bin")
        if weight < 1:
            raise ParameterError("crossing weight must be >= 1")
        self.graph.add_edge(a, b, weight=int(weight))

    def _remove_bodies(self, ids: Iterable[int]) -> List[int]:
        removed = []
        for i in sorted(set(ids)):
            if i in self.bodies:
                del self.bodies[i]
                self.graph.remove_node(i)
                removed.append(i)
        self._touch()
        return removed

    # ── filling ──────────────────────────────────────────────────────────────
    def _surface_height(self, grid: np.ndarray, x: float, y: float) -> float:
        g = grid.shape[0]
        return float(grid[min(int(y / _HEIGHT_CELL), g - 1), min(int(x / _HEIGHT_CELL), g - 1)])

    def _drop_body(self, body_id: int, grid: np.ndarray) -> HarnessBody:
        cfg, prof = self.config, self.config.profile
        gen = self.rng.generator
        r, size = cfg.cable_radius, cfg.bin_size_m
        lo, hi = r, size - r
        n = cfg.n_segments
        seg = prof.length / n
        z_max = cfg.bin_depth - r
        center = np.array([size / 2.0, size / 2.0])

        xy = gen.uniform(lo + 0.1 * size, hi - 0.1 * size, 2)
        heading = float(gen.uniform(0.0, 2.0 * math.pi))
        z = min(self._surface_height(grid, *xy) + r, z_max)
        pts = [(xy[0], xy[1], z)]
        for _ in range(n):
            heading += float(gen.normal(0.0, 0.5))
            for _ in range(4):
                d = np.array([math.cos(heading), math.sin(heading)])
                p = xy + seg * d
                if lo <= p[0] <= hi and lo <= p[1] <= hi:
                    break
                if not lo <= p[0] <= hi:
                    heading = math.pi - heading
                if not lo <= p[1] <= hi:
                    heading = -heading
            else:
                heading = math.atan2(center[1] - xy[1], center[0] - xy[0])
                d = np.array([math.cos(heading), math.sin(heading)])
                p = xy + seg * d
            target = min(self._surface_height(grid, *p) + r, z_max)
            dz = float(np.clip(target - z, -0.5 * seg, 0.5 * seg))
            xy = xy + math.sqrt(seg * seg - dz * dz) * d
            z = z + dz
            pts.append((xy[0], xy[1], z))

        poly = np.array(pts)
        stamps = np.vstack([poly, (poly[1:] + poly[:-1]) / 2.0])
        g = grid.shape[0]
        for x, y, zz in stamps:
            cy, cx = min(int(y / _HEIGHT_CELL), g - 1), min(int(x / _HEIGHT_CELL), g - 1)
            grid[cy, cx] = max(grid[cy, cx], min(zz + r, z_max))
        return HarnessBody(body_id, poly, prof.length, prof.weight, prof.connector_masses)

    def fill(self, n_objects: int) -> None:
        """Drop n_objects new bodies into an emptied bin and rebuild entanglement."""
        if n_objects > self.config.bin_capacity:
            raise CapacityError(f"{n_objects} objects exceed bin capacity {self.config.bin_capacity}")
        self.bodies.clear()
        self.graph = nx.Graph()
        self.held = None
        self.delivered, self.ejected = [], []
        g = int(math.ceil(self.config.bin_size_m / _HEIGHT_CELL))
        grid = np.zeros((g, g))
        for _ in range(n_objects):
            body = self._drop_body(self.next_id, grid)
            self.bodies[body.id] = body
            self.graph.add_node(body.id)
            self.next_id += 1
        self.fill_size = n_objects
        self.fills += 1
        self._entangle()
        self._touch()
        logger.debug("fill %d: %d bodies, %d edges", self.fills, n_objects, self.graph.number_of_edges())

    def _entangle(self) -> None:
        ids = sorted(self.bodies)
        if len(ids) < 2:
            return
        segs = np.concatenate([np.stack([self.bodies[i].polyline[:-1, :2], self.bodies[i].polyline[1:, :2]], axis=1) for i in ids])
        owner = np.concatenate([np.full(len(self.bodies[i].polyline) - 1, k) for k, i in enumerate(ids)])
        counts = _segment_crossings(segs, owner, len(ids))
        rows, cols = np.nonzero(counts)
        if rows.size == 0:
            return
        locks = self.rng.generator.binomial(counts[rows, cols], self.config.entangle_prob)
        for a, b, w in zip(rows, cols, locks):
            if w > 0:
                self.graph.add_edge(ids[a], ids[b], weight=int(w))

    def reshuffle(self) -> None:
        """Standard-task reload: a fresh drop of n_objects from the same RNG stream."""
        self.fill(self.config.n_objects)

    # ── rendering ────────────────────────────────────────────────────────────
    def raster(self, width: Optional[int] = None, height: Optional[int] = None, resolution: Optional[float] = None):
        """(heights, label, arc) grids; label is -1 where no body is visible."""
        default = width is None and height is None and resolution is None
        if default and self._raster is not None:
            return self._raster
        cfg = self.config
        res = resolution or cfg.resolution
        w = width or cfg.grid_size
        h = height or cfg.grid_size
        r = cfg.cable_radius
        depth = np.zeros((h, w))
        label = np.full((h, w), -1, dtype=np.int64)
        arc = np.zeros((h, w))
        for bid in sorted(self.bodies):
            poly = self.bodies[bid].polyline
            n = len(poly) - 1
            for k in range(n):
                (x0, y0, z0), (x1, y1, z1) = poly[k], poly[k + 1]
                u0 = max(int(math.floor(min(x0, x1) / res - 1 - r / res)), 0)
                u1 = min(int(math.ceil(max(x0, x1) / res + 1 + r / res)), w)
                v0 = max(int(math.floor(min(y0, y1) / res - 1 - r / res)), 0)
                v1 = min(int(math.ceil(max(y0, y1) / res + 1 + r / res)), h)
                if u0 >= u1 or v0 >= v1:
                    continue
                X = (np.arange(u0, u1) + 0.5) * res
                Y = (np.arange(v0, v1) + 0.5) * res
                X, Y = np.meshgrid(X, Y)
                dx, dy = x1 - x0, y1 - y0
                len2 = dx * dx + dy * dy
                t = np.zeros_like(X) if len2 == 0 else np.clip(((X - x0) * dx + (Y - y0) * dy) / len2, 0.0, 1.0)
                d2 = (X - x0 - t * dx) ** 2 + (Y - y0 - t * dy) ** 2
                inside = d2 <= r * r
                top = np.minimum(z0 + t * (z1 - z0) + np.sqrt(np.maximum(r * r - d2, 0.0)), cfg.bin_depth)
                win = inside & (top > depth[v0:v1, u0:u1])
                depth[v0:v1, u0:u1][win] = top[win]
                label[v0:v1, u0:u1][win] = bid
                arc[v0:v1, u0:u1][win] = (k + t[win]) / n
        out = (depth, label, arc)
        if default:
            self._raster = out
        return out

    # ── primitives ───────────────────────────────────────────────────────────
    def hold(self, body_id: int, s: float) -> None:
        if body_id not in self.bodies:
            raise LogicError(f"object {body_id} is not in the bin")
        if not 0.0 <= s <= 1.0:
            raise ParameterError("grasp point must be in [0, 1]")
        self.held = body_id
        self.bodies[body_id].grasp_point = float(s)

    def release(self) -> None:
        """Drop the held object back into the bin."""
        if self.held is not None:
            self.bodies[self.held].grasp_point = None
        self.held = None

    def grasp(self, candidate: GraspCandidate) -> Optional[int]:
        if self.held is not None:
            raise LogicError("already holding an object")
        if self.rng.bernoulli("grasp_miss", self.config.grasp_miss_rate):
            logger.debug("grasp missed at (%d, %d)", candidate.u, candidate.v)
            return None
        if self.forced_target is not None:
            bid, s = self.forced_target
            if bid not in self.bodies:
                return None
            _, label, arc = self.raster()
            on_body = 0 <= candidate.v < label.shape[0] and 0 <= candidate.u < label.shape[1] and label[candidate.v, candidate.u] == bid
            self.hold(bid, s if s is not None else (float(arc[candidate.v, candidate.u]) if on_body else 0.5))
            return bid
        _, label, arc = self.raster()
        if not (0 <= candidate.v < label.shape[0] and 0 <= candidate.u < label.shape[1]):
            return None
        bid = int(label[candidate.v, candidate.u])
        if bid < 0:
            return None
        self.hold(bid, float(arc[candidate.v, candidate.u]))
        return bid

    def carried_weight(self, height: float) -> float:
        body = self.held_body()
        own = body.weight * lifted_fraction(body.length, body.grasp_point, height, self.config.slack_ratio)
        relief = 1.0 - self.config.dangle_relief
        return own + sum(self.bodies[p].weight * relief for p in self.partners(body.id))

    def _snag(self, kind: str) -> Optional[float]:
        cw = self.crossing_weight(self.held)
        if cw <= 0:
            return None
        if not self.rng.bernoulli(kind, snag_probability(self.config.snag_rate, cw)):
            return None
        return self.config.snag_force * (1.0 + 0.5 * self.rng.uniform("snag_magnitude"))

    def _trace(self, base: np.ndarray, snag: Optional[float], carried: float, start: int, phase: TracePhase) -> ForceTrace:
        f = base.copy()
        if snag is not None:
            f[start : start + SNAG_TICKS] = np.maximum(f[start : start + SNAG_TICKS], carried + snag)
        f = f + self.rng.noise(f.size, self.config.noise_sigma)
        return ForceTrace.from_forces(f, phase)

    def synth_lift_trace(self, grasped: Optional[int] = None) -> ForceTrace:
        self._check_grasped(grasped)
        carried = self.carried_weight(self.config.lift_height)
        n = self.config.lift_ticks
        snag = self._snag("lift_snag")
        return self._trace(carried * ramp_profile(n), snag, carried, int(0.45 * n), TracePhase.LIFT)

    def synth_transport_trace(self, grasped: Optional[int] = None) -> ForceTrace:
        self._check_grasped(grasped)
        carried = self.carried_weight(self.config.transport_height)
        n = self.config.transport_ticks
        snag = self._snag("transport_snag")
        return self._trace(np.full(n, carried), snag, carried, int(0.5 * n), TracePhase.TRANSPORT)

    def apply_swing(self, params: SwingParams, grasped: Optional[int] = None) -> SwingOutcome:
        body = self._check_grasped(grasped)
        cfg = self.config
        broken = 0
        slipped = False
        ejected: List[int] = []
        p_slip = slip_probability(cfg.slip_gain, params)
        for _ in range(int(params.n)):
            p_break: Dict[int, float] = {}
            degree: Dict[int, int] = {}
            for nb in self.partners(body.id):
                p = break_probability(cfg.swing_break_gain, params, self.graph[body.id][nb]["weight"])
                p_break[nb] = p
                degree[nb] = self.graph.degree(nb)
                if self.rng.bernoulli("break", p):
                    self.graph.remove_edge(body.id, nb)
                    broken += 1
            slipped = self.rng.bernoulli("slip", p_slip)
            for nb in sorted(p_break):
                if self.rng.bernoulli("eject", cfg.eject_gain * p_break[nb] / degree[nb]):
                    ejected.extend(self._remove_bodies([nb]))
            if slipped:
                break
        self.ejected.extend(ejected)
        if slipped:
            self.release()
        self._touch()
        logger.debug("swing %s: broken=%d slipped=%s ejected=%s", params.angles, broken, slipped, ejected)
        return SwingOutcome(broken, slipped, tuple(ejected))

    def apply_regrasp_physics(self, grasped: Optional[int] = None) -> RegraspOutcome:
        body = self._check_grasped(grasped)
        cfg = self.config
        torque_a, torque_b = regrasp_torques(body, body.grasp_point, cfg.jaw_lever)
        hang = self.rng.normal("hang_angle", cfg.hang_angle_sigma)
        if abs(hang) > cfg.regrasp_vertical_tolerance:
            self.release()
            return RegraspOutcome(torque_a, torque_b, False, None, hang)
        body.grasp_point = 0.5
        pulled = 0
        if self.graph.degree(body.id) > 0 and self.rng.bernoulli("pull", cfg.pull_prob):
            pulled = self.graph.degree(body.id)
            self.graph.remove_edges_from(list(self.graph.edges(body.id)))
        self._touch()
        return RegraspOutcome(torque_a, torque_b, True, 0.5, hang, pulled)

    def deliver(self, grasped: Optional[int] = None) -> List[int]:
        """Drop the held object and everything still attached into the goal bin."""
        body = self._check_grasped(grasped)
        ids = [body.id] + self.partners(body.id)
        self.held = None
        arrived = self._remove_bodies(ids)
        self.delivered.extend(arrived)
        return arrived

    # ── snapshots ────────────────────────────────────────────────────────────
    def to_snapshot(self) -> Dict[str, Any]:
        return {
            "schema": SNAPSHOT_SCHEMA,
            "config": self.config.model_dump(mode="json"),
            "bodies": [self.bodies[i].to_dict() for i in sorted(self.bodies)],
            "edges": [[a, b, d["weight"]] for a, b, d in sorted((min(a, b), max(a, b), d) for a, b, d in self.graph.edges(data=True))],
            "held": None if self.held is None else [self.held, self.bodies[self.held].grasp_point],
            "delivered": list(self.delivered),
            "ejected": list(self.ejected),
            "fill_size": self.fill_size,
            "fills": self.fills,
            "next_id": self.next_id,
            "rng": self.rng.state(),
        }

    @classmethod
    def from_snapshot(cls, data: Mapping[str, Any]) -> "BinState":
        if data.get("schema") != SNAPSHOT_SCHEMA:
            raise ParameterError(f"unsupported snapshot schema {data.get('schema')!r}")
        world = cls(config=make_world_config(data["config"]), rng=ScriptedRng.from_state(data["rng"]))
        for b in data["bodies"]:
            body = HarnessBody.from_dict(b)
            world.bodies[body.id] = body
            world.graph.add_node(body.id)
        for a, b, w in data["edges"]:
            world.add_edge(a, b, w)
        world.delivered = list(data.get("delivered", []))
        world.ejected = list(data.get("ejected", []))
        world.fill_size = int(data["fill_size"])
        world.fills = int(data.get("fills", 1))
        world.next_id = int(data["next_id"])
        if data.get("held"):
            world.hold(int(data["held"][0]), float(data["held"][1]))
        return world


# ──────────────────────────────────────────────────────────────────────────────
# Module-level operations
# ──────────────────────────────────────────────────────────────────────────────
def init_world(config: WorldConfig, forced: Optional[Mapping[str, Iterable[Any]]] = None) -> BinState:
    world = BinState(config=config, rng=ScriptedRng(config.rng_seed, forced))
    world.fill(config.n_objects)
    return world


def world_from_bodies(config: WorldConfig, bodies: Sequence[HarnessBody], edges: Sequence[Sequence[int]] = (), forced=None) -> BinState:
    """Hand-built world for fixtures and scenarios."""
    world = BinState(config=config, rng=ScriptedRng(config.rng_seed, forced))
    for body in bodies:
        if body.id in world.bodies:
            raise ParameterError(f"duplicate body id {body.id}")
        world.bodies[body.id] = body
        world.graph.add_node(body.id)
    for e in edges:
        world.add_edge(int(e[0]), int(e[1]), int(e[2]) if len(e) > 2 else 1)
    world.fill_size = len(bodies)
    world.fills = 1
    world.next_id = max((b.id for b in bodies), default=-1) + 1
    return world


def render_depth(world: BinState, width: Optional[int] = None, height: Optional[int] = None, resolution: Optional[float] = None) -> DepthMap:
    depth, _, _ = world.raster(width, height, resolution)
    return DepthMap(depth, resolution or world.config.resolution, world.config.bin_depth)


def synth_lift_trace(world: BinState, grasped: Optional[int] = None) -> ForceTrace:
    return world.synth_lift_trace(grasped)


def synth_transport_trace(world: BinState, grasped: Optional[int] = None) -> ForceTrace:
    return world.synth_transport_trace(grasped)


def apply_swing(world: BinState, params: SwingParams, grasped: Optional[int] = None) -> SwingOutcome:
    return world.apply_swing(params, grasped)


def apply_regrasp_physics(world: BinState, grasped: Optional[int] = None) -> RegraspOutcome:
    return world.apply_regrasp_physics(grasped)


def deliver(world: BinState, grasped: Optional[int] = None) -> List[int]:
    return world.deliver(grasped)


def grasp(world: BinState, candidate: GraspCandidate) -> Optional[int]:
    return world.grasp(candidate)


def reshuffle(world: BinState) -> None:
    world.reshuffle()
