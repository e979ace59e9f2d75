import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from core_types import CapacityError, LogicError, ParameterError, SwingParams, ThresholdState, TracePhase
from force_signal import LiftEventKind, detect_lift_event
from simulator import (
    PROFILES,
    BinState,
    HarnessBody,
    ObjectProfile,
    ScriptedRng,
    apply_regrasp_physics,
    apply_swing,
    break_probability,
    deliver,
    init_world,
    lifted_fraction,
    make_world_config,
    ramp_profile,
    regrasp_torques,
    render_depth,
    slip_probability,
    snag_probability,
    straight_body,
    synth_lift_trace,
    synth_transport_trace,
    world_from_bodies,
)

MEDIUM = PROFILES[ObjectProfile.MEDIUM_74CM]
LONG = PROFILES[ObjectProfile.LONG_120CM]
DEFAULT_SWING = SwingParams(math.pi / 4, math.pi / 3, math.pi / 3, math.pi / 2, 2)
THRESHOLDS = ThresholdState(f_stop=3.0, f_fail=1.0, delta_f=0.1, delta_theta=math.pi / 18)


def diagonal(body_id, profile=MEDIUM, z=0.008, anti=False, start=0.06):
    end = start + profile.length / math.sqrt(2.0)
    if anti:
        return straight_body(body_id, (start, end, z), (end, start, z), profile)
    return straight_body(body_id, (start, start, z), (end, end, z), profile)


def quiet(**kw):
    base = {"noise_sigma": 0.0, "grasp_miss_rate": 0.0}
    base.update(kw)
    return make_world_config(base)


def pair_world(weight=1, **kw):
    return world_from_bodies(quiet(**kw), [diagonal(0), diagonal(1, anti=True, z=0.024)], [[0, 1, weight]])


# ── init ────────────────────────────────────────────────────────────────────
def test_empty_world():
    world = init_world(make_world_config(n_objects=0))
    assert world.n_in_bin == 0
    assert world.graph.number_of_edges() == 0
    assert world.conservation_ok()


def test_single_object_has_no_edges():
    world = init_world(make_world_config(n_objects=1, rng_seed=4))
    assert world.n_in_bin == 1
    assert world.graph.number_of_edges() == 0


def test_capacity_exceeded():
    with pytest.raises(CapacityError):
        init_world(make_world_config(n_objects=61))


def test_bodies_keep_their_length():
    world = init_world(make_world_config(n_objects=20, rng_seed=9))
    for body in world.bodies.values():
        assert body.polyline_length == pytest.approx(MEDIUM.length, rel=0.01)
        assert body.polyline[:, :2].min() >= 0
        assert body.polyline[:, :2].max() <= world.config.bin_size_m


def test_same_seed_same_world():
    a = init_world(make_world_config(n_objects=15, rng_seed=21))
    b = init_world(make_world_config(n_objects=15, rng_seed=21))
    c = init_world(make_world_config(n_objects=15, rng_seed=22))
    assert a.to_snapshot() == b.to_snapshot()
    assert a.to_snapshot()["bodies"] != c.to_snapshot()["bodies"]


def test_edge_count_for_seed_7_is_typical():
    counts = [init_world(make_world_config(n_objects=40, rng_seed=s)).graph.number_of_edges() for s in range(100)]
    lo, hi = np.percentile(counts, [5, 95])
    assert lo < hi
    median = float(np.median(counts))
    seven = init_world(make_world_config(n_objects=40, rng_seed=7)).graph.number_of_edges()
    assert 0.25 * median <= seven <= 4 * median
    assert np.mean(counts) > 5


def test_graph_has_no_self_loops():
    world = init_world(make_world_config(n_objects=40, rng_seed=3))
    assert all(a != b for a, b in world.graph.edges())
    assert all(d["weight"] >= 1 for _, _, d in world.graph.edges(data=True))


def test_add_edge_validation():
    world = pair_world()
    with pytest.raises(ParameterError):
        world.add_edge(0, 0)
    with pytest.raises(ParameterError):
        world.add_edge(0, 9)


def test_body_length_mismatch_rejected():
    with pytest.raises(ParameterError):
        HarnessBody(0, np.array([[0, 0, 0], [0.5, 0, 0]]), 0.74, 0.8, (0.1, 0.1))


# ── rendering ───────────────────────────────────────────────────────────────
def test_render_empty_bin():
    depth = render_depth(init_world(make_world_config(n_objects=0)))
    assert depth.data.shape == (80, 80)
    assert not depth.data.any()


def test_render_straight_harness_is_constant_ridge():
    world = world_from_bodies(quiet(), [diagonal(0)])
    depth = render_depth(world)
    ridge = [depth.data[k, k] for k in range(8, 72)]
    assert ridge == pytest.approx([0.016] * len(ridge))
    assert depth.data.max() == pytest.approx(0.016)


def test_render_crossing_takes_upper_height():
    world = world_from_bodies(quiet(), [diagonal(0, z=0.008), diagonal(1, anti=True, z=0.024)])
    depth = render_depth(world).data
    res, r = world.config.resolution, world.config.cable_radius
    end = 0.06 + MEDIUM.length / math.sqrt(2.0)
    for v in range(34, 46):
        for u in range(34, 46):
            x, y = (u + 0.5) * res, (v + 0.5) * res
            expected = 0.0
            for z, dist in ((0.008, abs(x - y) / math.sqrt(2.0)), (0.024, abs(x + y - 0.06 - end) / math.sqrt(2.0))):
                if dist <= r:
                    expected = max(expected, z + math.sqrt(r * r - dist * dist))
            assert depth[v, u] == pytest.approx(expected, abs=1e-12)
    centre = int(0.5 * (0.06 + end) / res)
    assert depth[centre, centre] > 0.024


# ── lift / transport traces ─────────────────────────────────────────────────
def test_closed_forms():
    assert lifted_fraction(0.74, 0.5, 0.55) == 1.0
    assert lifted_fraction(1.2, 0.02, 0.55) == pytest.approx((0.55 / (1.2 * 0.98) - 0.4) / 0.6)
    assert lifted_fraction(1.2, 0.0, 0.1) == 0.0
    ramp = ramp_profile(80)
    assert ramp[0] == 0.0 and ramp[-1] == 1.0
    assert np.all(np.diff(ramp) > 0)


def test_isolated_lift_trace_is_exact():
    world = world_from_bodies(quiet(), [diagonal(0)])
    world.hold(0, 0.5)
    trace = synth_lift_trace(world, 0)
    assert trace.phase == TracePhase.LIFT
    assert np.array_equal(trace.f_z, 0.8 * ramp_profile(world.config.lift_ticks))
    assert trace.f_z[-1] == pytest.approx(0.8)


def test_long_end_grasp_barely_loads():
    world = world_from_bodies(quiet(object_profile="Long120cm"), [diagonal(0, LONG, start=0.02)])
    world.hold(0, 0.02)
    trace = synth_lift_trace(world)
    assert trace.f_z[-1] < 0.2
    assert detect_lift_event(trace, THRESHOLDS).kind == LiftEventKind.GRADIENT_NEAR_ZERO


def test_heavy_crossing_weight_snags_lift():
    hits = 0
    trials = 500
    for seed in range(trials):
        world = pair_world(weight=3, rng_seed=seed, noise_sigma=0.03)
        world.hold(0, 0.5)
        hits += synth_lift_trace(world).f_z.max() >= 3.0
    assert hits / trials >= 0.9


def test_untangled_object_never_snags():
    assert snag_probability(1.2, 0) == 0.0
    world = world_from_bodies(quiet(), [diagonal(0)])
    world.hold(0, 0.5)
    before = world.rng.draws
    assert np.array_equal(synth_transport_trace(world).f_z, np.full(world.config.transport_ticks, 0.8))
    assert world.rng.draws == before


def test_transport_with_attached_partner():
    world = pair_world()
    world.rng.script("transport_snag", [False])
    world.hold(0, 0.5)
    trace = synth_transport_trace(world)
    assert trace.phase == TracePhase.TRANSPORT
    assert trace.f_z[-1] == pytest.approx(0.8 + 0.8 * (1 - world.config.dangle_relief))
    assert trace.f_z[-1] >= 1.6 * (1 - world.config.dangle_relief)


def test_trace_needs_a_grasp():
    world = pair_world()
    with pytest.raises(LogicError):
        synth_lift_trace(world)
    world.hold(0, 0.5)
    with pytest.raises(LogicError):
        synth_transport_trace(world, 1)


# ── swing ───────────────────────────────────────────────────────────────────
def test_break_probability_clamps():
    assert DEFAULT_SWING.theta_sum * DEFAULT_SWING.omega == pytest.approx(4.5235, abs=1e-3)
    assert break_probability(1.0, DEFAULT_SWING, 1) == 1.0
    assert break_probability(0.0, DEFAULT_SWING, 1) == 0.0


@given(
    st.floats(min_value=0.0, max_value=1.0),
    st.floats(min_value=0.01, max_value=3.0),
    st.floats(min_value=0.0, max_value=1.0),
    st.integers(1, 6),
)
def test_break_probability_monotone_in_energy(gain, theta, extra, weight):
    lo = SwingParams(theta, theta, theta, 1.0, 1)
    hi = SwingParams(theta + extra, theta, theta, 1.0 + extra, 1)
    assert break_probability(gain, hi, weight) >= break_probability(gain, lo, weight)


def test_zero_break_gain_never_breaks():
    world = pair_world(weight=1, swing_break_gain=0.0, slip_gain=0.0)
    world.hold(0, 0.5)
    for _ in range(50):
        assert apply_swing(world, DEFAULT_SWING).edges_broken == 0
    assert world.graph.has_edge(0, 1)


def test_full_break_gain_always_breaks():
    world = pair_world(weight=1, swing_break_gain=1.0, slip_gain=0.0, eject_gain=0.0)
    world.hold(0, 0.5)
    out = apply_swing(world, DEFAULT_SWING)
    assert out.edges_broken == 1
    assert not world.graph.has_edge(0, 1)


def test_break_frequency_matches_formula():
    world = pair_world(weight=1, swing_break_gain=0.11, slip_gain=0.0, eject_gain=0.0, rng_seed=17)
    world.hold(0, 0.5)
    params = SwingParams(math.pi / 4, math.pi / 3, math.pi / 3, math.pi / 2, 1)
    p = break_probability(0.11, params, 1)
    trials, broken = 10000, 0
    for _ in range(trials):
        if not world.graph.has_edge(0, 1):
            world.add_edge(0, 1, 1)
        broken += world.apply_swing(params).edges_broken
    assert abs(broken / trials - p) < 0.02


def test_slip_frequency_matches_formula():
    world = pair_world(weight=1, swing_break_gain=0.0, slip_gain=0.02, eject_gain=0.0, rng_seed=23)
    params = SwingParams(math.pi / 4, math.pi / 3, math.pi / 3, math.pi / 2, 1)
    p = slip_probability(0.02, params)
    assert p == pytest.approx(0.142, abs=0.001)
    trials, slipped = 10000, 0
    for _ in range(trials):
        world.hold(0, 0.5)
        slipped += world.apply_swing(params).slipped
    assert world.graph.has_edge(0, 1)
    assert abs(slipped / trials - p) < 0.015


def test_eject_frequency_matches_formula():
    world = pair_world(weight=1, swing_break_gain=0.11, slip_gain=0.0, eject_gain=0.5, rng_seed=29)
    partner = world.bodies[1]
    world.hold(0, 0.5)
    params = SwingParams(math.pi / 4, math.pi / 3, math.pi / 3, math.pi / 2, 1)
    # partner has degree 1
    p = 0.5 * break_probability(0.11, params, 1) / 1
    trials, ejected = 10000, 0
    for _ in range(trials):
        if 1 not in world.bodies:
            world.bodies[1] = partner
            world.graph.add_node(1)
        if not world.graph.has_edge(0, 1):
            world.add_edge(0, 1, 1)
        out = world.apply_swing(params)
        ejected += out.ejected_ids == (1,)
    assert len(world.ejected) == ejected
    assert abs(ejected / trials - p) < 0.02


def test_random_primitives_conserve_objects():
    rng = np.random.default_rng(5)
    for episode in range(1000):
        world = init_world(
            make_world_config(
                n_objects=int(rng.integers(0, 6)), rng_seed=episode,
                swing_break_gain=0.3, slip_gain=0.03, eject_gain=0.8,
            )
        )
        for _ in range(8):
            if world.n_in_bin == 0:
                world.reshuffle()
                if world.n_in_bin == 0:
                    break
            if world.held is None:
                world.hold(int(rng.choice(sorted(world.bodies))), float(rng.uniform()))
            action = int(rng.integers(0, 5))
            if action == 0:
                world.apply_swing(DEFAULT_SWING)
            elif action == 1:
                world.apply_regrasp_physics()
            elif action == 2:
                world.synth_transport_trace()
            elif action == 3:
                world.release()
            else:
                world.deliver()
            assert world.conservation_ok(), (episode, action)
            assert world.held is None or world.held in world.bodies
            assert set(world.graph.nodes) == set(world.bodies)


def test_slip_releases_the_object():
    world = pair_world(weight=1, swing_break_gain=0.0)
    world.rng.script("slip", [True])
    world.hold(0, 0.5)
    out = apply_swing(world, DEFAULT_SWING)
    assert out.slipped
    assert world.held is None
    assert slip_probability(0.004, DEFAULT_SWING) == pytest.approx(0.004 * (math.pi / 2) ** 2 * DEFAULT_SWING.theta_sum)


def test_eject_moves_neighbour_out_of_bin():
    world = pair_world(weight=1, swing_break_gain=0.0, slip_gain=0.0)
    world.rng.script("eject", [True])
    world.hold(0, 0.5)
    out = apply_swing(world, SwingParams(0.1, 0.1, 0.1, 1.0, 1))
    assert out.ejected_ids == (1,)
    assert world.ejected == [1]
    assert world.conservation_ok()


def test_swing_needs_a_grasp():
    with pytest.raises(LogicError):
        apply_swing(pair_world(), DEFAULT_SWING)


# ── regrasp ─────────────────────────────────────────────────────────────────
def _body(masses):
    return HarnessBody(0, diagonal(0).polyline, 0.74, 0.8, masses)


def test_symmetric_torques_tie():
    a, b = regrasp_torques(_body((0.1, 0.1)), 0.5, 0.03)
    assert a == b


def test_heavier_b_end_prefers_a_side_over_the_jaw():
    a, b = regrasp_torques(_body((0.0, 0.1)), 0.1, 0.03)
    assert a < b


def test_regrasp_success_moves_to_middle_and_pulls():
    world = pair_world(weight=2)
    world.rng.script("hang_angle", [0.05])
    world.rng.script("pull", [True])
    world.hold(0, 0.1)
    out = apply_regrasp_physics(world)
    assert out.handoff_ok and out.new_s == 0.5
    assert out.edges_pulled == 1
    assert world.bodies[0].grasp_point == 0.5
    assert world.graph.degree(0) == 0


def test_zero_tolerance_always_fails_handoff():
    world = pair_world(regrasp_vertical_tolerance=0.0, rng_seed=8)
    for _ in range(20):
        world.hold(0, 0.3)
        out = world.apply_regrasp_physics()
        assert not out.handoff_ok
        assert world.held is None


# ── delivery / conservation ─────────────────────────────────────────────────
def test_deliver_isolated_from_five():
    world = init_world(make_world_config(n_objects=5, rng_seed=1))
    world.graph.remove_edges_from(list(world.graph.edges()))
    world.hold(2, 0.5)
    assert deliver(world) == [2]
    assert world.n_in_bin == 4
    assert world.conservation_ok()


def test_deliver_with_attached_partner():
    world = pair_world()
    world.hold(0, 0.5)
    assert deliver(world) == [0, 1]
    assert world.n_in_bin == 0
    assert world.graph.number_of_nodes() == 0


def test_deliver_last_object():
    world = world_from_bodies(quiet(), [diagonal(0)])
    world.hold(0, 0.5)
    deliver(world)
    assert world.n_in_bin == 0
    assert world.delivered == [0]


def test_reshuffle_refills():
    world = init_world(make_world_config(n_objects=6, rng_seed=2))
    world.hold(0, 0.5)
    world.deliver()
    world.reshuffle()
    assert world.n_in_bin == 6
    assert world.fills == 2
    assert world.conservation_ok()
    assert min(world.bodies) == 6


# ── scripting / snapshots / replay ──────────────────────────────────────────
def test_unknown_draw_kind():
    with pytest.raises(ParameterError):
        ScriptedRng(0, {"coin": [True]})


def _exercise(world):
    """A fixed primitive sequence; returns everything it observed."""
    seen = []
    for bid in sorted(world.bodies)[:4]:
        if bid not in world.bodies:
            continue
        world.hold(bid, 0.4)
        seen.append(world.synth_lift_trace().f_z.tolist())
        seen.append(world.apply_swing(DEFAULT_SWING).ejected_ids)
        if world.held is None:
            continue
        seen.append(world.apply_regrasp_physics().hang_angle)
        if world.held is None:
            continue
        seen.append(world.synth_transport_trace().f_z.tolist())
        seen.append(world.deliver())
        assert world.conservation_ok()
    return seen


def test_replay_is_bit_identical():
    cfg = make_world_config(n_objects=12, rng_seed=99)
    a, b = init_world(cfg), init_world(cfg)
    assert _exercise(a) == _exercise(b)
    assert a.to_snapshot() == b.to_snapshot()


def test_snapshot_round_trip_resumes_stream():
    world = init_world(make_world_config(n_objects=10, rng_seed=5))
    world.hold(3, 0.5)
    world.synth_lift_trace()
    snap = json.loads(json.dumps(world.to_snapshot()))
    clone = BinState.from_snapshot(snap)
    assert clone.to_snapshot() == world.to_snapshot()
    assert world.synth_transport_trace() == clone.synth_transport_trace()


def test_snapshot_schema_checked():
    with pytest.raises(ParameterError):
        BinState.from_snapshot({"schema": "other/9"})
