import csv

import cv2
import numpy as np
import pytest
from scipy import ndimage

import grasp_planner
from core_types import ParameterError
from grasp_planner import (
    DepthMap,
    GraspCandidate,
    detect_grasps,
    make_gripper_template,
    rank_with_mid_bias,
    read_depth_pgm,
    read_template_pgm,
    ridge_position,
    rotated_templates,
    slice_levels,
    slice_regions,
    write_candidates_csv,
    write_depth_pgm,
    write_template_pgm,
)

RES = 0.008
TEMPLATE = make_gripper_template(RES)


def shift_count(region, mask):
    """Zero-padded sliding count of region pixels under mask, one shift per mask pixel."""
    h, w = region.shape
    ch, cw = mask.shape[0] // 2, mask.shape[1] // 2
    padded = np.pad(region.astype(np.int64), ((ch, ch), (cw, cw)))
    out = np.zeros((h, w), dtype=np.int64)
    for dy, dx in zip(*np.nonzero(mask)):
        out += padded[dy : dy + h, dx : dx + w]
    return out


def random_map(seed, size=64):
    rng = np.random.default_rng(seed)
    d = np.zeros((size, size))
    for _ in range(rng.integers(2, 7)):
        v0, u0 = rng.integers(0, size - 4, 2)
        hh, ww = rng.integers(2, 20, 2)
        d[v0 : v0 + hh, u0 : u0 + ww] = np.maximum(d[v0 : v0 + hh, u0 : u0 + ww], rng.uniform(0.01, 0.12))
    return DepthMap(d, RES)


def oracle_score(contact_count, collision_count, obj, contact, sigma):
    """Smoothed contact fraction, zeroed off the object, under collisions and near the border."""
    g = ndimage.gaussian_filter(contact_count.astype(np.float64), sigma) if sigma > 0 else contact_count.astype(np.float64)
    g = np.clip(g / contact.sum(), 0.0, 1.0)
    mh, mw = contact.shape[0] // 2, contact.shape[1] // 2
    inside = np.zeros(g.shape, dtype=bool)
    inside[mh : g.shape[0] - mh, mw : g.shape[1] - mw] = True
    return np.where(inside & obj & (collision_count == 0), g, 0.0)


def oracle_maps(depth, n_rotations=8, n_heights=4, insert=0.02, sigma=1.0):
    """{(slice, rotation): (score map, collision counts)} built from shift sums."""
    out = {}
    rotations = rotated_templates(TEMPLATE, n_rotations)
    for j, level in enumerate(slice_levels(depth, n_heights)):
        obj, coll = slice_regions(depth, level, insert)
        for r, (_, contact, collision) in enumerate(rotations):
            cc = shift_count(obj, contact)
            kc = shift_count(coll, collision)
            out[(j, r)] = (oracle_score(cc, kc, obj, contact, sigma), kc)
    return out


def oracle_best(maps):
    """(u, v, rotation, slice) of the first 3x3 peak in (-score, slice, u, v, rotation) order."""
    best = None
    for (j, r), (g, _) in maps.items():
        padded = np.pad(g, 1)
        h, w = g.shape
        peak = g > 0
        for dv in range(3):
            for du in range(3):
                peak &= g >= padded[dv : dv + h, du : du + w]
        for v, u in zip(*np.nonzero(peak)):
            key = (-g[v, u], j, int(u), int(v), r)
            if best is None or key < best:
                best = key
    return None if best is None else (best[2], best[3], best[4], best[1])


def ridge_map(rows, u0=8, u1=56, size=64, height=0.016):
    d = np.zeros((size, size))
    for v in rows:
        d[v, u0:u1] = height
    return DepthMap(d, RES)


# ── template ────────────────────────────────────────────────────────────────
def test_default_template_shape():
    assert TEMPLATE.shape == (3, 7)
    assert TEMPLATE.contact_mask[:, 1:6].all()
    assert TEMPLATE.collision_mask[:, [0, 6]].all()
    assert not (TEMPLATE.contact_mask & TEMPLATE.collision_mask).any()


def test_rotated_templates_are_odd_and_disjoint():
    for angle, contact, collision in rotated_templates(TEMPLATE, 8):
        assert 0 <= angle < np.pi
        assert contact.shape[0] % 2 == 1 and contact.shape[1] % 2 == 1
        assert not (contact & collision).any()
        assert contact.any() and collision.any()


# ── detection against the oracle ────────────────────────────────────────────
@pytest.mark.parametrize("seed", range(50))
def test_detect_matches_shift_sum_oracle(seed):
    depth = random_map(seed)
    maps = oracle_maps(depth)
    best = max(float(g.max()) for g, _ in maps.values())
    cands = detect_grasps(depth, TEMPLATE)
    if best == 0.0:
        assert cands == []
        return
    assert cands[0].score == pytest.approx(best, abs=1e-12)
    top = cands[0]
    assert (top.u, top.v, top.rotation_index, top.slice_index) == oracle_best(maps)
    for c in cands:
        g, kc = maps[(c.slice_index, c.rotation_index)]
        assert kc[c.v, c.u] == 0
        assert g[c.v, c.u] == pytest.approx(c.score, abs=1e-12)
    keys = [c.sort_key() for c in cands]
    assert keys == sorted(keys)


def test_detect_is_deterministic():
    depth = random_map(123)
    assert detect_grasps(depth, TEMPLATE) == detect_grasps(depth, TEMPLATE)


def test_isolated_ridge_top_candidate_on_body():
    depth = ridge_map([30, 31])
    cands = detect_grasps(depth, TEMPLATE)
    assert cands
    top = cands[0]
    assert depth.data[top.v, top.u] > 0
    _, kc = oracle_maps(depth)[(top.slice_index, top.rotation_index)]
    assert kc[top.v, top.u] == 0


def test_empty_bin_has_no_candidates():
    assert detect_grasps(DepthMap(np.zeros((32, 32)), RES), TEMPLATE) == []


def test_no_candidate_between_close_parallel_harnesses():
    depth = ridge_map([30, 31, 34, 35])
    cands = detect_grasps(depth, TEMPLATE, top_k=500)
    assert all(c.v not in (32, 33) for c in cands)
    maps = oracle_maps(depth)
    assert all(maps[(c.slice_index, c.rotation_index)][1][c.v, c.u] == 0 for c in cands)


def test_ranking_invariant_under_depth_offset():
    d = np.zeros((48, 48))
    d[10:30, 12:15] = 0.05
    d[20:22, 5:40] = 0.021
    depth = DepthMap(d, RES)
    a = detect_grasps(depth, TEMPLATE, top_k=20)
    b = detect_grasps(depth.shifted(0.05), TEMPLATE, top_k=20)
    assert [(c.u, c.v, c.rotation_index, c.slice_index) for c in a] == [(c.u, c.v, c.rotation_index, c.slice_index) for c in b]
    assert [c.score for c in a] == pytest.approx([c.score for c in b])
    assert [c.grasp_height + 0.05 for c in a] == pytest.approx([c.grasp_height for c in b])


def test_depth_smaller_than_template():
    with pytest.raises(ParameterError):
        detect_grasps(DepthMap(np.zeros((2, 40)), RES), TEMPLATE)


@pytest.mark.parametrize("kwargs", [{"n_rotations": 0}, {"n_heights": 0}, {"top_k": 0}])
def test_detect_rejects_bad_counts(kwargs):
    with pytest.raises(ParameterError):
        detect_grasps(ridge_map([30, 31]), TEMPLATE, **kwargs)


def test_depth_map_rejects_out_of_range():
    with pytest.raises(ParameterError):
        DepthMap(np.full((8, 8), -0.01), RES)
    with pytest.raises(ParameterError):
        DepthMap(np.full((8, 8), 0.5), RES, bin_depth=0.3)


def test_candidate_rejects_bad_score():
    with pytest.raises(ParameterError):
        GraspCandidate(1, 1, 0.0, 0.01, 1.5)
    with pytest.raises(ParameterError):
        GraspCandidate(1, 1, np.pi, 0.01, 0.5)


# ── mid-bias ranking ────────────────────────────────────────────────────────
def test_alpha_zero_keeps_order():
    depth = random_map(7)
    cands = detect_grasps(depth, TEMPLATE, top_k=30)
    ranked = rank_with_mid_bias(cands, depth, 0.0)
    assert [(c.u, c.v, c.rotation_index) for c in ranked] == [(c.u, c.v, c.rotation_index) for c in cands]


def test_flat_blob_is_degenerate_and_keeps_order():
    # narrower than the jaw opening so it can be grasped at all
    d = np.zeros((40, 40))
    d[18:22, 18:22] = 0.03
    depth = DepthMap(d, RES)
    cands = detect_grasps(depth, TEMPLATE, top_k=20)
    assert cands
    ranked = rank_with_mid_bias(cands, depth, 0.5)
    assert all(c.mid_bias == 0.0 for c in ranked)
    assert [(c.u, c.v, c.rotation_index) for c in ranked] == [(c.u, c.v, c.rotation_index) for c in cands]


def test_straight_harness_alpha_one_grasps_middle_third():
    u0, u1 = 8, 56
    depth = ridge_map([30, 31], u0, u1)
    cands = detect_grasps(depth, TEMPLATE, top_k=500)
    best = rank_with_mid_bias(cands, depth, 1.0)[0]
    third = (u1 - u0) / 3.0
    assert u0 + third <= best.u <= u1 - third
    assert best.mid_bias > 0.6


def test_ridge_position_ends_and_middle():
    mask = np.zeros((10, 40), dtype=bool)
    mask[4:6, 2:38] = True
    assert ridge_position(mask, 4, 2) == pytest.approx(0.0, abs=0.06)
    assert ridge_position(mask, 4, 20) == pytest.approx(1.0, abs=0.06)
    assert ridge_position(mask, 0, 0) == 0.0


def test_mid_bias_builds_one_graph_per_component(monkeypatch):
    depth = random_map(11)
    cands = detect_grasps(depth, TEMPLATE, top_k=200)
    base = float(depth.data.min())
    components = set()
    for c in cands:
        labels, _ = ndimage.label((depth.data - base) > c.grasp_height - base, structure=np.ones((3, 3), dtype=int))
        if labels[c.v, c.u]:
            components.add((c.grasp_height, int(labels[c.v, c.u])))
    assert components

    calls = []
    build = grasp_planner._component_graph

    def counted(component):
        calls.append(int(component.sum()))
        return build(component)

    monkeypatch.setattr(grasp_planner, "_component_graph", counted)
    ranked = rank_with_mid_bias(cands, depth, 0.5)
    assert len(calls) <= len(components)
    monkeypatch.setattr(grasp_planner, "_component_graph", build)
    for c in ranked:
        mask = (depth.data - base) > c.grasp_height - base
        assert c.mid_bias == ridge_position(mask, c.v, c.u)


def test_rank_empty_and_bad_alpha():
    depth = ridge_map([30, 31])
    assert rank_with_mid_bias([], depth, 0.5) == []
    with pytest.raises(ParameterError):
        rank_with_mid_bias(detect_grasps(depth, TEMPLATE), depth, 1.5)


# ── file formats ────────────────────────────────────────────────────────────
def test_depth_pgm_round_trip(tmp_path):
    depth = random_map(3)
    back = read_depth_pgm(write_depth_pgm(depth, tmp_path / "bin.pgm"))
    assert back.resolution == RES
    assert np.allclose(back.data, depth.data, atol=5e-5)


def test_template_pgm_round_trip(tmp_path):
    back = read_template_pgm(*write_template_pgm(TEMPLATE, tmp_path / "contact.pgm", tmp_path / "collision.pgm"))
    assert np.array_equal(back.contact_mask, TEMPLATE.contact_mask)
    assert np.array_equal(back.collision_mask, TEMPLATE.collision_mask)
    assert back.open_width == TEMPLATE.open_width


def test_pgm_rejects_other_formats(tmp_path):
    path = tmp_path / "x.pgm"
    path.write_text("P5\n1 1\n255\n0\n", encoding="ascii")
    with pytest.raises(ParameterError):
        read_depth_pgm(path)


def test_depth_pgm_is_plain_opencv_image(tmp_path):
    depth = random_map(5)
    path = write_depth_pgm(depth, tmp_path / "bin.pgm")
    header = path.read_text(encoding="ascii").splitlines()
    assert header[0] == "P2"
    assert header[1].startswith("# resolution=")
    pixels = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    assert pixels.shape == depth.data.shape
    assert np.array_equal(pixels, np.rint(depth.data / 1e-4).astype(np.uint16))


def test_depth_pgm_without_resolution_comment(tmp_path):
    path = tmp_path / "bare.pgm"
    cv2.imwrite(str(path), np.zeros((4, 4), dtype=np.uint16), [cv2.IMWRITE_PXM_BINARY, 0])
    with pytest.raises(ParameterError, match="resolution"):
        read_depth_pgm(path)


def test_pgm_rejects_values_out_of_range(tmp_path):
    depth = DepthMap(np.full((4, 4), 0.2), RES)
    with pytest.raises(ParameterError):
        write_depth_pgm(depth, tmp_path / "deep.pgm", scale=1e-6)


def test_candidates_csv(tmp_path):
    cands = detect_grasps(ridge_map([30, 31]), TEMPLATE, top_k=3)
    path = write_candidates_csv(cands, tmp_path / "cands.csv")
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["u", "v", "rotation", "height", "score", "mid_bias"]
    assert [int(r["u"]) for r in rows] == [c.u for c in cands]
