import math
from dataclasses import replace

import numpy as np
import pytest

from semistatic_vem.consistency import BetaState
from semistatic_vem.factors import pose_key
from semistatic_vem.geom import (
    Point2,
    Pose2,
    apply_points,
    compose,
    inverse,
    translation_error,
)
from semistatic_vem.sim import (
    Move,
    NoiseConfig,
    ObjectSpec,
    ScenarioConfig,
    generate_scene,
    preset,
    prior_map,
    simulate,
)
from semistatic_vem.vem import (
    ACTIVE,
    NEW_LANDMARK,
    PENDING,
    REMOVED,
    VARIANTS,
    ConfigError,
    FrameSolver,
    ObjectModel,
    Observation,
    VEMConfig,
    assign_points,
    associate,
    e_step,
    initial_state,
    m_step,
    process_frame,
    run_vem,
)

SQUARE = np.array([[0.5, 0.3], [-0.5, 0.3], [-0.5, -0.3], [0.5, -0.3]])


def _lib(centers, prior=BetaState(1, 1)):
    return {i + 1: ObjectModel.from_points(i + 1, SQUARE + c, prior) for i, c in enumerate(centers)}


def _obs(pose, centers, frame=1):
    return [Observation(frame, apply_points(inverse(pose), SQUARE + c)) for c in centers]


# -- association -------------------------------------------------------------

def test_unchanged_scene_matches_generating_objects():
    centers = [np.array(c) for c in ((3, 0), (0, 3), (-3, -1), (1, -3))]
    pose = Pose2(0.2, -0.1, 0.4)
    res = associate(_obs(pose, centers), _lib(centers), pose, 5.0)
    assert [o.assoc_object for o in res.observations] == [1, 2, 3, 4]
    assert res.proposals == []
    for o in res.observations:
        assert o.assoc_landmark_indices == (0, 1, 2, 3)


def test_object_beyond_gate_becomes_proposal():
    lib = _lib([np.array([3.0, 0.0])])
    res = associate(_obs(Pose2(), [np.array([9.0, 0.0])]), lib, Pose2(), 5.0)
    assert res.observations[0].assoc_object is None
    assert res.proposals == [0]


def test_swapped_objects_take_nearest_centroid():
    a, b = np.array([2.0, 0.0]), np.array([3.0, 0.0])
    lib = _lib([a, b])
    # Object 1 moved next to object 2's old place and vice versa; the greedy
    # matcher pairs each cluster with the nearest centroid, not the identity.
    seen = [b + [0.1, 0.0], a - [0.1, 0.0]]
    res = associate(_obs(Pose2(), seen), lib, Pose2(), 5.0)
    assert [o.assoc_object for o in res.observations] == [2, 1]


def test_one_to_one_assignment():
    lib = _lib([np.array([3.0, 0.0])])
    res = associate(_obs(Pose2(), [np.array([3.0, 0.1]), np.array([3.2, 0.0])]), lib, Pose2(), 5.0)
    assert sorted(o.assoc_object or 0 for o in res.observations) == [0, 1]
    assert len(res.proposals) == 1


def test_removed_objects_are_not_matched():
    lib = _lib([np.array([3.0, 0.0])])
    lib[1].status = REMOVED
    res = associate(_obs(Pose2(), [np.array([3.0, 0.0])]), lib, Pose2(), 5.0)
    assert res.proposals == [0]


def test_assign_points_permuted_and_offset():
    L = SQUARE + [4.0, 1.0]
    perm = [2, 0, 3, 1]
    assert assign_points(L[perm] + [0.25, -0.2], L, 5.0, 0.3) == tuple(perm)


def test_assign_points_marks_extra_points_new():
    L = (SQUARE + [4.0, 1.0])[:3]
    P = SQUARE + [4.0, 1.0]
    assert assign_points(P, L, 5.0, 0.3) == (0, 1, 2, NEW_LANDMARK)
    assert assign_points(P, np.zeros((0, 2)), 5.0, 0.3) == (NEW_LANDMARK,) * 4
    assert assign_points(np.zeros((0, 2)), L, 5.0, 0.3) == ()


def test_assign_points_greedy_fallback():
    rng = np.random.default_rng(0)
    L = rng.uniform(-3, 3, (10, 2))
    perm = rng.permutation(10)[:7]
    assert assign_points(L[perm] + rng.normal(0, 1e-3, (7, 2)), L, 5.0, 0.3) == tuple(perm)


# -- E- and M-steps ------------------------------------------------------------

def _zero_noise_state(name="all_static", **cfg):
    scn = preset(name).replace(noise=NoiseConfig.zero())
    scene = generate_scene(scn)
    config = VEMConfig(**{"init_search": 0, **cfg})
    state = initial_state(config, prior_map(scene, config.prior))
    return scene, state, list(simulate(scene))


def _solver_for_first_frame(state, frame):
    from semistatic_vem.vem import _window_frame

    cfg = state.config
    assoc = associate(list(frame.observations), state.object_library, frame.init_pose, cfg.e_max)
    state.window_frames = [_window_frame(frame, frame.init_pose, None, assoc)]
    return FrameSolver(state, (frame.init_pose, cfg.init_sigma_xy, cfg.init_sigma_theta))


def test_known_start_unchanged_objects_are_static():
    # Closed form at the tight keypoint noise: one E-step from the flat prior.
    _, state, frames = _zero_noise_state(sigma_keypt=0.05)
    solver = _solver_for_first_frame(state, frames[0])
    w = e_step(solver, solver.problem.x0)
    assert w and all(ew.w_static > 0.99 for ew in w)


def test_known_start_static_weights_default_noise():
    # The looser default keypoint noise needs the q(v) update to feed back.
    _, state, frames = _zero_noise_state()
    solver = _solver_for_first_frame(state, frames[0])
    first = e_step(solver, solver.problem.x0)
    again = e_step(solver, solver.problem.x0)
    assert all(ew.w_static > 0.95 for ew in first)
    assert all(ew.w_static > 0.99 for ew in again)


def test_moved_object_gets_changed_weight():
    scn = preset("all_static").replace(noise=NoiseConfig.zero(),
                                       moves=(Move(1, 1, Pose2(2.0, 0.0, 0.0)),))
    scene = generate_scene(scn)
    config = VEMConfig(init_search=0, sigma_keypt=0.05)
    state = initial_state(config, prior_map(scene, config.prior))
    frame = next(simulate(scene))
    solver = _solver_for_first_frame(state, frame)
    solver.e_step(solver.problem.x0)
    w = solver.w
    moved = solver.cur_obj == solver.obj_ids.index(1)
    assert np.all(1.0 - w[moved] > 0.99)
    assert np.all(w[~moved] > 0.99)


def test_m_step_recovers_truth_in_static_zero_noise_scene():
    scene, state, frames = _zero_noise_state()
    frame = frames[0]
    solver = _solver_for_first_frame(state, frame)
    x = solver.with_pose(solver.problem.x0, compose(frame.gt_pose, Pose2(0.1, -0.08, 0.04)))
    for _ in range(5):
        solver.e_step(x)
        vars, report, x = m_step(solver, x)
    assert translation_error(vars.window_poses[1], frame.gt_pose) < 1e-6


def test_run_vem_static_fixed_point():
    _, state, frames = _zero_noise_state()
    solver = _solver_for_first_frame(state, frames[0])
    x, trace = run_vem(solver, 30, frames[0].gt_pose, 1e-6)
    # The state is already exact after one iteration; the remaining ones only
    # finish the q(v) ascent, with shrinking bound increments.
    assert all(it.pose_error < 1e-9 for it in trace)
    steps = np.diff([it.elbo for it in trace])
    assert np.all(steps >= 0.0) and np.all(np.diff(steps) <= 0.0)
    assert len(trace) <= 6 and steps[-1] < 1e-6
    with pytest.raises(ValueError):
        run_vem(solver, 0)


def test_elbo_trace_non_decreasing():
    scene = generate_scene(preset("baseline_6m4s", seed=3))
    config = VEMConfig()
    state = initial_state(config, prior_map(scene, config.prior))
    for frame in list(simulate(scene))[:4]:
        process_frame(state, frame)
        elbo = [it.elbo for it in state.reports[-1].iterations]
        assert np.all(np.diff(elbo) >= -1e-9)


# -- pipeline ------------------------------------------------------------------

def test_no_visible_objects_follows_odometry():
    cfg = ScenarioConfig((ObjectSpec(1, Point2(50.0, 0.0), (0.5, 0.3)),),
                         tuple(Pose2(0.5 * k, 0.0, 0.1 * k) for k in range(5)))
    scene = generate_scene(cfg)
    state = initial_state(VEMConfig(), prior_map(scene))
    frames = list(simulate(scene))
    for fr in frames:
        assert fr.observations == ()
        process_frame(state, fr)
    expected = frames[0].init_pose
    for fr in frames:
        if fr.frame_id > 1:
            expected = compose(expected, fr.odometry_meas)
        got = state.trajectory[fr.frame_id]
        assert translation_error(got, expected) < 1e-9
        assert abs(math.remainder(got.theta - expected.theta, 2 * math.pi)) < 1e-9


def _replay(scene, n):
    config = VEMConfig()
    state = initial_state(config, prior_map(scene, config.prior))
    first = next(simulate(scene))
    process_frame(state, first)
    for k in range(2, n + 1):
        process_frame(state, replace(first, frame_id=k, odometry_meas=Pose2(), init_pose=None))
    return [state.trajectory[k] for k in range(1, n + 1)]


def test_replay_is_idempotent_without_noise():
    poses = _replay(generate_scene(preset("all_static").replace(noise=NoiseConfig.zero())), 5)
    for p in poses[1:]:
        assert translation_error(p, poses[0]) < 1e-9


def test_replay_settles_with_noise():
    # Map refinement moves the estimate slightly with every replay; the
    # steps contract geometrically down to the solver tolerance.
    poses = _replay(generate_scene(preset("all_static", seed=2)), 15)
    steps = [translation_error(a, b) for a, b in zip(poses, poses[1:])]
    assert steps[0] < 0.01
    assert all(b < 0.5 * a for a, b in zip(steps[:8], steps[1:8]))
    assert max(steps[9:]) < 1e-8


def test_trajectory_and_window_lengths():
    scene = generate_scene(preset("baseline_6m4s"))
    config = VEMConfig(window=3, em_iters=5)
    state = initial_state(config, prior_map(scene, config.prior))
    for k, frame in enumerate(simulate(scene), start=1):
        process_frame(state, frame)
        assert state.frames_processed == k
        assert len(state.window_frames) == min(3, k)
        if k > 1:
            assert pose_key(state.window_frames[0].frame_id) in state.window.fixed


def test_consistent_object_accumulates_evidence():
    _, state, frames = _zero_noise_state()
    means = []
    for frame in frames[:4]:
        process_frame(state, frame)
        means.append(state.object_library[1].consistency.mean)
    assert all(a < b for a, b in zip(means, means[1:]))
    # Four corners per frame, each a near-certain static outcome.
    assert means[0] == pytest.approx(5 / 6, abs=0.01)
    assert means[3] == pytest.approx(17 / 18, abs=0.01)


def test_moved_objects_removed_and_relocalized():
    scene = generate_scene(preset("baseline_6m4s"))
    config = VEMConfig()
    state = initial_state(config, prior_map(scene, config.prior))
    removed_at = {}
    for frame in list(simulate(scene))[:3]:
        process_frame(state, frame)
        for oid in state.reports[-1].removed:
            removed_at[oid] = frame.frame_id
    moved = set(scene.moved_objects())
    assert set(removed_at) == moved
    lib = state.object_library
    fresh = [o for o in lib.values() if o.id > 10]
    assert len(fresh) == len(moved)
    for o in fresh:
        truth = [scene.corners(m, 1).mean(axis=0) for m in moved]
        assert min(np.linalg.norm(o.centroid - t) for t in truth) < 0.1
    # Removed objects never come back into the graph.
    for frame in list(simulate(scene))[3:6]:
        process_frame(state, frame)
        assert moved.isdisjoint(state.last_solver.obj_ids)
        assert all(lib[m].status == REMOVED for m in moved)


def test_unobserved_object_in_view_gets_pseudo_change():
    _, state, frames = _zero_noise_state()
    frame = frames[0]
    hidden = replace(frame, observations=frame.observations[1:])
    process_frame(state, hidden)
    o = state.object_library[1]
    assert 1 in state.reports[-1].pseudo_changed
    assert (o.consistency.alpha, o.consistency.beta_) == (1.0, 5.0)
    assert o.status == PENDING
    process_frame(state, replace(frames[1], observations=frames[1].observations[1:]))
    assert o.status == REMOVED


def test_status_recovers_when_consistent_again():
    _, state, frames = _zero_noise_state()
    state.object_library[1].consistency = BetaState(1.0, 5.0)
    state.object_library[1].status = PENDING
    process_frame(state, frames[0])
    assert state.object_library[1].status == ACTIVE


@pytest.mark.parametrize("variant", VARIANTS)
def test_variants_run(variant):
    scene = generate_scene(preset("baseline_6m4s"))
    config = VEMConfig(variant=variant, em_iters=10)
    state = initial_state(config, prior_map(scene, config.prior))
    for frame in list(simulate(scene))[:3]:
        process_frame(state, frame)
    assert len(state.trajectory) == 3


# -- config and types ----------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError) as info:
        VEMConfig(window=0, sigma_keypt=-1.0, theta_consist=1.5, variant="x").validate()
    assert len(info.value.problems) == 4
    with pytest.raises(ConfigError):
        VEMConfig.from_dict({"window": 4, "bogus": 1})
    assert VEMConfig.from_dict({"window": 4}).window == 4


def test_observation_validation():
    with pytest.raises(ValueError):
        Observation(1, np.zeros((3, 2)), 1, (0, 1))
    assert Observation(1, [1.0, 2.0]).points_body.shape == (1, 2)


def test_object_model_from_points():
    o = ObjectModel.from_points(3, SQUARE + [2.0, 1.0], BetaState(1, 1))
    np.testing.assert_allclose(o.centroid, [2.0, 1.0])
    np.testing.assert_allclose(np.array(o.template), SQUARE, atol=1e-12)
    j = o.add_landmark((2.0, 2.0))
    assert j == 4
    np.testing.assert_allclose(o.template[j], (0.0, 1.0), atol=1e-12)
    with pytest.raises(ValueError):
        ObjectModel(1, 0, Pose2(), [Point2(0, 0)], [], BetaState())


def test_initial_state_ids():
    state = initial_state(None, _lib([np.zeros(2), np.ones(2)]).values())
    assert state.next_object_id == 3
    assert state.frames_processed == 0
