# grasp_planner.py
"""
Collision-aware grasp detection on a single depth map (fast graspability
evaluation), plus a middle-of-object re-ranking heuristic.

For every gripper rotation and slice height the map is binarised into an object
region (above the slice) and a collision region (above the slice minus the finger
insertion depth). The contact mask is correlated with the object region, the
collision mask with the collision region; graspability is the smoothed contact
response wherever the fingers hit nothing.
"""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import networkx as nx
import numpy as np
from scipy import ndimage

from core_types import ParameterError

logger = logging.getLogger(__name__)

CANDIDATE_FIELDS = ("u", "v", "rotation", "height", "score", "mid_bias")


# ──────────────────────────────────────────────────────────────────────────────
# Types
# ──────────────────────────────────────────────────────────────────────────────
@dataclass(frozen=True, eq=False)
class DepthMap:
    """Heights in meters above the bin floor, indexed data[v, u] (row, column)."""

    data: np.ndarray
    resolution: float
    bin_depth: float = 0.3

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 2 or d.size == 0:
            raise ParameterError("depth map must be a non-empty 2D array")
        if self.resolution <= 0:
            raise ParameterError("resolution must be > 0")
        if not np.all(np.isfinite(d)) or d.min() < 0 or d.max() > self.bin_depth + 1e-12:
            raise ParameterError(f"heights must lie in [0, bin_depth={self.bin_depth}]")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    def shifted(self, offset: float) -> "DepthMap":
        return DepthMap(self.data + offset, self.resolution, self.bin_depth)


@dataclass(frozen=True, eq=False)
class GripperTemplate:
    contact_mask: np.ndarray
    collision_mask: np.ndarray
    open_width: float

    def __post_init__(self):
        contact = np.asarray(self.contact_mask, dtype=bool)
        collision = np.asarray(self.collision_mask, dtype=bool)
        if contact.shape != collision.shape or contact.ndim != 2:
            raise ParameterError("contact and collision masks must share a 2D shape")
        if np.any(contact & collision):
            raise ParameterError("contact and collision masks overlap")
        if not contact.any():
            raise ParameterError("contact mask is empty")
        contact.setflags(write=False)
        collision.setflags(write=False)
        object.__setattr__(self, "contact_mask", contact)
        object.__setattr__(self, "collision_mask", collision)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.contact_mask.shape


@dataclass(frozen=True)
class GraspCandidate:
    u: int
    v: int
    rotation: float
    grasp_height: float
    score: float
    mid_bias: float = 0.0
    slice_index: int = 0
    rotation_index: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ParameterError(f"score must be in [0, 1], got {self.score}")
        if not 0.0 <= self.mid_bias <= 1.0:
            raise ParameterError(f"mid_bias must be in [0, 1], got {self.mid_bias}")
        if not 0.0 <= self.rotation < math.pi:
            raise ParameterError(f"rotation must be in [0, pi), got {self.rotation}")

    def sort_key(self) -> tuple:
        return (-self.score, self.slice_index, self.u, self.v, self.rotation_index)

    def to_row(self) -> Dict[str, object]:
        return {
            "u": self.u,
            "v": self.v,
            "rotation": round(self.rotation, 6),
            "height": round(self.grasp_height, 6),
            "score": round(self.score, 6),
            "mid_bias": round(self.mid_bias, 6),
        }


# ──────────────────────────────────────────────────────────────────────────────
# Templates
# ──────────────────────────────────────────────────────────────────────────────
def _pad_odd(mask: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    return np.pad(mask, ((0, 1 - h % 2), (0, 1 - w % 2)))


def make_gripper_template(
    resolution: float,
    open_width: float = 0.04,
    finger_width: float = 0.008,
    finger_length: float = 0.024,
) -> GripperTemplate:
    """Parallel-jaw footprint: [finger | opening | finger] along u, finger_length along v."""
    ow = max(1, round(open_width / resolution))
    fw = max(1, round(finger_width / resolution))
    fl = max(1, round(finger_length / resolution))
    contact = np.zeros((fl, ow + 2 * fw), dtype=bool)
    collision = np.zeros_like(contact)
    contact[:, fw : fw + ow] = True
    collision[:, :fw] = True
    collision[:, fw + ow :] = True
    return GripperTemplate(_pad_odd(contact), _pad_odd(collision), open_width)


def rotated_templates(template: GripperTemplate, n_rotations: int) -> List[Tuple[float, np.ndarray, np.ndarray]]:
    """(angle, contact, collision) for angles k*pi/n_rotations, masks padded to odd size."""
    if n_rotations < 1:
        raise ParameterError("n_rotations must be >= 1")
    labels = template.contact_mask.astype(np.uint8) + 2 * template.collision_mask.astype(np.uint8)
    out = []
    for k in range(n_rotations):
        angle = k * math.pi / n_rotations
        rot = ndimage.rotate(labels, math.degrees(angle), reshape=True, order=0, mode="constant", cval=0)
        rot = _pad_odd(rot)
        out.append((angle, rot == 1, rot == 2))
    return out


# ──────────────────────────────────────────────────────────────────────────────
# Graspability
# ──────────────────────────────────────────────────────────────────────────────
def slice_levels(depth: DepthMap, n_heights: int) -> List[float]:
    """Slice heights relative to the lowest pixel, highest first."""
    if n_heights < 1:
        raise ParameterError("n_heights must be >= 1")
    top = float(depth.data.max() - depth.data.min())
    return [top * (n_heights - j) / (n_heights + 1) for j in range(n_heights)]


def slice_regions(depth: DepthMap, level: float, insert_depth: float) -> Tuple[np.ndarray, np.ndarray]:
    rel = depth.data - depth.data.min()
    return rel > level, rel > max(level - insert_depth, 0.0)


def graspability_map(
    obj: np.ndarray,
    coll: np.ndarray,
    contact: np.ndarray,
    collision: np.ndarray,
    sigma: float = 1.0,
) -> Tuple[np.ndarray, np.ndarray]:
    """Score map in [0, 1] and the raw collision counts for one slice and rotation."""
    contact_count = ndimage.correlate(obj.astype(np.int64), contact.astype(np.int64), mode="constant", cval=0)
    collision_count = ndimage.correlate(coll.astype(np.int64), collision.astype(np.int64), mode="constant", cval=0)
    return score_from_counts(contact_count, collision_count, obj, contact, sigma), collision_count


def score_from_counts(contact_count, collision_count, obj, contact, sigma: float = 1.0) -> np.ndarray:
    g = contact_count.astype(np.float64)
    if sigma > 0:
        g = ndimage.gaussian_filter(g, sigma)
    g = np.clip(g / float(contact.sum()), 0.0, 1.0)
    h, w = g.shape
    mh, mw = contact.shape[0] // 2, contact.shape[1] // 2
    valid = np.zeros_like(obj, dtype=bool)
    valid[mh : h - mh, mw : w - mw] = True
    g[~(valid & obj & (collision_count == 0))] = 0.0
    return g


def _local_maxima(g: np.ndarray) -> np.ndarray:
    return (g > 0) & (g == ndimage.maximum_filter(g, size=3, mode="constant", cval=0.0))


def _suppress(cands: List[GraspCandidate], min_separation: int, top_k: int) -> List[GraspCandidate]:
    kept: List[GraspCandidate] = []
    seen = set()
    for c in cands:
        if (c.u, c.v) in seen:
            continue
        seen.add((c.u, c.v))
        if any(max(abs(c.u - k.u), abs(c.v - k.v)) < min_separation for k in kept):
            continue
        kept.append(c)
        if len(kept) >= top_k:
            break
    return kept


def detect_grasps(
    depth: DepthMap,
    template: GripperTemplate,
    n_rotations: int = 8,
    n_heights: int = 4,
    top_k: int = 10,
    insert_depth: float = 0.02,
    sigma: float = 1.0,
    min_separation: int = 2,
) -> List[GraspCandidate]:
    if top_k < 1:
        raise ParameterError("top_k must be >= 1")
    rotations = rotated_templates(template, n_rotations)
    th = max(c.shape[0] for _, c, _ in rotations)
    tw = max(c.shape[1] for _, c, _ in rotations)
    if depth.height < th or depth.width < tw:
        raise ParameterError(f"depth map {depth.width}x{depth.height} smaller than gripper template {tw}x{th}")

    base = float(depth.data.min())
    levels = slice_levels(depth, n_heights)
    if levels[0] <= 0:
        logger.debug("flat depth map, no grasp candidates")
        return []

    cands: List[GraspCandidate] = []
    for j, level in enumerate(levels):
        obj, coll = slice_regions(depth, level, insert_depth)
        if not obj.any():
            continue
        for r, (angle, contact, collision) in enumerate(rotations):
            g, _ = graspability_map(obj, coll, contact, collision, sigma)
            for v, u in zip(*np.nonzero(_local_maxima(g))):
                cands.append(GraspCandidate(int(u), int(v), angle, base + level, float(g[v, u]), 0.0, j, r))

    cands.sort(key=GraspCandidate.sort_key)
    out = _suppress(cands, min_separation, top_k)
    logger.debug("detect_grasps: %d maxima, %d returned", len(cands), len(out))
    return out


# ──────────────────────────────────────────────────────────────────────────────
# Mid-bias ranking
# ──────────────────────────────────────────────────────────────────────────────
_NEIGHBOURS = ((0, 1), (1, -1), (1, 0), (1, 1))


def _component_graph(component: np.ndarray) -> nx.Graph:
    """8-connected pixel graph of one boolean component."""
    h, w = component.shape
    g = nx.Graph()
    g.add_nodes_from(zip(*(a.tolist() for a in np.nonzero(component))))
    for dv, du in _NEIGHBOURS:
        u0, u1 = max(0, -du), w - max(0, du)
        both = component[: h - dv, u0:u1] & component[dv:, u0 + du : u1 + du]
        vv, uu = np.nonzero(both)
        uu = uu + u0
        g.add_edges_from(zip(zip(vv.tolist(), uu.tolist()), zip((vv + dv).tolist(), (uu + du).tolist())))
    return g


class RidgeIndex:
    """Ridge ends and end distances of every component of one mask, built on first use.

    Ends come from a double sweep starting at the component's first pixel in
    raster order. Blobs whose geodesic length is under `elongation` times their
    mean width are degenerate.
    """

    def __init__(self, mask: np.ndarray, elongation: float = 3.0):
        self.labels, _ = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
        self.elongation = elongation
        self._sweeps: Dict[int, Optional[Tuple[Dict, Dict, int]]] = {}

    def _sweep(self, lab: int) -> Optional[Tuple[Dict, Dict, int]]:
        g = _component_graph(self.labels == lab)
        if g.number_of_nodes() < 2:
            return None
        d0 = nx.single_source_shortest_path_length(g, min(g.nodes))
        a = max(sorted(d0), key=lambda p: d0[p])
        da = nx.single_source_shortest_path_length(g, a)
        b = max(sorted(da), key=lambda p: da[p])
        length = da[b]
        width = g.number_of_nodes() / (length + 1)
        if length == 0 or length < self.elongation * width:
            return None
        return da, nx.single_source_shortest_path_length(g, b), length

    def position(self, v: int, u: int) -> float:
        lab = int(self.labels[v, u])
        if lab == 0:
            return 0.0
        if lab not in self._sweeps:
            self._sweeps[lab] = self._sweep(lab)
        sweep = self._sweeps[lab]
        if sweep is None:
            return 0.0
        da, db, length = sweep
        return float(min(1.0, min(da[(v, u)], db[(v, u)]) / (length / 2.0)))


def ridge_position(mask: np.ndarray, v: int, u: int, elongation: float = 3.0) -> float:
    """Geodesic distance to the nearest ridge end over half the ridge length, in [0, 1]."""
    return RidgeIndex(mask, elongation).position(v, u)


def rank_with_mid_bias(
    candidates: Sequence[GraspCandidate],
    depth: DepthMap,
    alpha: float,
) -> List[GraspCandidate]:
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must be in [0, 1], got {alpha}")
    if not candidates:
        return []
    base = float(depth.data.min())
    top = float(depth.data.max()) - base
    scored = []
    # one index per slice height, shared by all candidates on it
    indexes: Dict[float, RidgeIndex] = {}
    for c in candidates:
        level = c.grasp_height - base
        if c.grasp_height not in indexes:
            indexes[c.grasp_height] = RidgeIndex((depth.data - base) > level)
        mb = indexes[c.grasp_height].position(c.v, c.u)
        h_norm = min(max(level / top, 0.0), 1.0) if top > 0 else 0.0
        combined = (1.0 - alpha) * c.score + alpha * mb * h_norm
        scored.append((combined, replace(c, mid_bias=mb)))
    scored.sort(key=lambda item: -item[0])
    return [c for _, c in scored]


# ──────────────────────────────────────────────────────────────────────────────
# File formats
# ──────────────────────────────────────────────────────────────────────────────
_PGM_META = re.compile(r"(\w+)=([-+0-9.eE]+)")
_PGM_MAX = int(np.iinfo(np.uint16).max)


def _read_pgm(path: Path) -> Tuple[np.ndarray, Dict[str, float]]:
    """Pixels through OpenCV, key=value pairs from the header comments."""
    raw = path.read_bytes()
    if not raw.startswith(b"P2"):
        raise ParameterError(f"{path}: not an ASCII PGM (P2) file")
    values = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if values is None or values.ndim != 2:
        raise ParameterError(f"{path}: unreadable PGM")
    meta: Dict[str, float] = {}
    for line in raw.decode("ascii", errors="replace").splitlines():
        if line.startswith("#"):
            meta.update({k: float(v) for k, v in _PGM_META.findall(line)})
    return values.astype(np.int64), meta


def _write_pgm(path: Path, values: np.ndarray, comment: str) -> Path:
    """16-bit ASCII PGM; the `comment` line after the magic number carries the metadata readers need back."""
    path.parent.mkdir(parents=True, exist_ok=True)
    if values.size and (values.min() < 0 or values.max() > _PGM_MAX):
        raise ParameterError(f"{path}: pixel values outside [0, {_PGM_MAX}]")
    if not cv2.imwrite(str(path), values.astype(np.uint16), [cv2.IMWRITE_PXM_BINARY, 0]):
        raise ParameterError(f"{path}: OpenCV could not write the image")
    magic, rest = path.read_bytes().split(b"\n", 1)
    path.write_bytes(magic + f"\n# {comment}\n".encode("ascii") + rest)
    return path


def write_depth_pgm(depth: DepthMap, path: str | Path, scale: float = 1e-4) -> Path:
    """Heights stored as integers in units of `scale` meters."""
    values = np.rint(depth.data / scale).astype(np.int64)
    comment = f"resolution={depth.resolution!r} bin_depth={depth.bin_depth!r} scale={scale!r}"
    return _write_pgm(Path(path), values, comment)


def read_depth_pgm(path: str | Path) -> DepthMap:
    p = Path(path)
    values, meta = _read_pgm(p)
    if "resolution" not in meta:
        raise ParameterError(f"{p}: missing resolution comment")
    scale = meta.get("scale", 1e-4)
    return DepthMap(values * scale, meta["resolution"], meta.get("bin_depth", 0.3))


def write_template_pgm(template: GripperTemplate, contact_path: str | Path, collision_path: str | Path) -> Tuple[Path, Path]:
    comment = f"open_width={template.open_width!r}"
    return (
        _write_pgm(Path(contact_path), template.contact_mask.astype(np.int64), comment),
        _write_pgm(Path(collision_path), template.collision_mask.astype(np.int64), comment),
    )


def read_template_pgm(contact_path: str | Path, collision_path: str | Path) -> GripperTemplate:
    contact, meta = _read_pgm(Path(contact_path))
    collision, _ = _read_pgm(Path(collision_path))
    return GripperTemplate(contact > 0, collision > 0, meta.get("open_width", 0.04))


def write_candidates_csv(candidates: Sequence[GraspCandidate], path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CANDIDATE_FIELDS, lineterminator="\n")
        writer.writeheader()
        for c in candidates:
            writer.writerow(c.to_row())
    return p
