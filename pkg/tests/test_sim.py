import json
import math

import numpy as np
import pytest

from semistatic_vem.geom import Point2, Pose2, apply_points, between, inverse
from semistatic_vem.sim import (
    PRESETS,
    FieldOfView,
    Move,
    NoiseConfig,
    ObjectSpec,
    ScenarioConfig,
    frame_rng,
    generate_scene,
    preset,
    prior_map,
    rectangle_corners,
    simulate,
    simulate_frame,
)
from semistatic_vem.vem import ConfigError


def _tiny(**kw):
    objs = (ObjectSpec(1, Point2(3.0, 0.0), (0.5, 0.3)), ObjectSpec(2, Point2(-3.0, 0.0), (0.5, 0.3)))
    path = (Pose2(0, 0, 0), Pose2(0.5, 0, 0), Pose2(1.0, 0, 0))
    return ScenarioConfig(objs, path, **kw)


def test_no_moves_constant_poses():
    scene = generate_scene(preset("all_static"))
    for f in range(1, scene.config.n_frames + 1):
        for o in scene.config.objects:
            assert scene.object_pose(o.id, f) == scene.object_pose(o.id, 0)


def test_move_is_step_function():
    cfg = _tiny(moves=(Move(2, 1, Pose2(0.5, 0.0, 0.1)),))
    scene = generate_scene(cfg)
    assert scene.object_pose(1, 1) == scene.object_pose(1, 0)
    assert scene.object_pose(1, 2) == scene.object_pose(1, 3) != scene.object_pose(1, 1)
    assert scene.object_pose(2, 3) == scene.object_pose(2, 0)
    assert scene.moved_objects() == {1: 2}


def test_baseline_preset_counts():
    cfg = preset("baseline_6m4s")
    scene = generate_scene(cfg)
    assert len(cfg.objects) == 10
    last = cfg.n_frames
    moved = [o.id for o in cfg.objects if scene.object_pose(o.id, last) != scene.object_pose(o.id, 0)]
    assert len(moved) == 6
    assert cfg.robot_path[0] == cfg.robot_path[-1]


def test_coherent_shift_shares_delta():
    cfg = preset("coherent_shift")
    assert len(cfg.moves) == 6
    assert len({m.delta for m in cfg.moves}) == 1


def test_all_static_has_no_moves():
    assert preset("all_static").moves == ()


def test_stress_dense_moves_happen_out_of_view():
    cfg = preset("stress_dense")
    scene = generate_scene(cfg)
    assert len(cfg.objects) == 20 and cfg.moves
    for m in cfg.moves:
        assert len(scene.visible_corners(m.object_id, m.frame)[0]) == 0


def test_unknown_preset():
    with pytest.raises(KeyError):
        preset("nope")
    assert set(PRESETS) == {"baseline_6m4s", "coherent_shift", "all_static", "stress_dense"}


def test_zero_noise_vertices_are_exact():
    cfg = _tiny(noise=NoiseConfig.zero())
    scene = generate_scene(cfg)
    fd = simulate_frame(scene, 2, frame_rng(0, 2))
    gt = cfg.robot_path[1]
    for obs, o in zip(fd.observations, sorted(cfg.objects, key=lambda o: o.id)):
        expected = apply_points(inverse(gt), rectangle_corners(o.pose, o.half_extents))
        np.testing.assert_allclose(obs.points_body, expected, atol=1e-12)
    assert fd.odometry_meas == between(cfg.robot_path[0], gt)


def test_object_behind_robot_not_seen():
    cfg = _tiny(fov=FieldOfView(8.0, math.pi / 2))
    fd = simulate_frame(generate_scene(cfg), 1, frame_rng(0, 1))
    assert len(fd.observations) == 1
    assert np.all(fd.observations[0].points_body[:, 0] > 0)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_fov_soundness(name):
    cfg = preset(name, seed=3)
    scene = generate_scene(cfg)
    for f in range(1, cfg.n_frames + 1):
        for o in cfg.objects:
            _, body = scene.visible_corners(o.id, f)
            if len(body):
                assert np.all(np.hypot(body[:, 0], body[:, 1]) <= cfg.fov.max_range)
                assert np.all(np.abs(np.arctan2(body[:, 1], body[:, 0])) <= cfg.fov.half_angle)


def test_measurement_noise_std():
    cfg = preset("baseline_6m4s")
    scene = generate_scene(cfg)
    errs = []
    rng = np.random.default_rng(99)
    while sum(len(e) for e in errs) < 10_000:
        fd = simulate_frame(scene, 1, rng)
        for obs, o in zip(fd.observations, sorted(cfg.objects, key=lambda o: o.id)):
            errs.append(obs.points_body - scene.visible_corners(o.id, 1)[1])
    e = np.concatenate(errs)
    assert len(e) >= 10_000
    for axis in range(2):
        assert abs(e[:, axis].std() - 0.02) < 0.05 * 0.02


def test_odometry_noise_std():
    cfg = preset("baseline_6m4s")
    scene = generate_scene(cfg)
    rng = np.random.default_rng(1)
    rel = between(cfg.robot_path[0], cfg.robot_path[1]).to_array()
    d = np.array([simulate_frame(scene, 2, rng).odometry_meas.to_array() - rel for _ in range(4000)])
    assert abs(d[:, 0].std() - 0.01) < 0.05 * 0.01
    assert abs(d[:, 2].std() - 0.005) < 0.05 * 0.005


def test_first_frame_has_init_pose():
    frames = list(simulate(generate_scene(preset("baseline_6m4s"))))
    assert frames[0].init_pose is not None and frames[0].odometry_meas == Pose2.identity()
    assert all(f.init_pose is None for f in frames[1:])
    assert [f.frame_id for f in frames] == list(range(1, 18))


def test_determinism():
    a = list(simulate(generate_scene(preset("baseline_6m4s", seed=5))))
    b = list(simulate(generate_scene(preset("baseline_6m4s", seed=5))))
    c = list(simulate(generate_scene(preset("baseline_6m4s", seed=6))))
    for fa, fb in zip(a, b):
        assert fa.odometry_meas == fb.odometry_meas and fa.init_pose == fb.init_pose
        for oa, ob in zip(fa.observations, fb.observations):
            assert np.array_equal(oa.points_body, ob.points_body)
    assert not np.array_equal(a[1].observations[0].points_body, c[1].observations[0].points_body)


def test_observations_are_read_only():
    fd = simulate_frame(generate_scene(_tiny()), 1, frame_rng(0, 1))
    with pytest.raises(ValueError):
        fd.observations[0].points_body[0, 0] = 1.0


def test_frame_out_of_range():
    with pytest.raises(IndexError):
        simulate_frame(generate_scene(_tiny()), 4, frame_rng(0, 4))


def test_config_validation_lists_all_problems():
    bad = ScenarioConfig(
        (ObjectSpec(1, Point2(0, 0), (0.5, -1.0)), ObjectSpec(1, Point2(1, 1), (0.5, 0.3))),
        (Pose2(),), (Move(5, 9, Pose2()),), FieldOfView(-1.0, 4.0), NoiseConfig(meas_sigma=-0.1))
    with pytest.raises(ConfigError) as info:
        generate_scene(bad)
    text = str(info.value)
    for needle in ("unique", "half_extents", "unknown object id", "frame 5", "meas_sigma",
                   "max_range", "half_angle"):
        assert needle in text
    assert len(info.value.problems) == 7


def test_json_roundtrip():
    for name in PRESETS:
        cfg = preset(name, seed=4)
        back = ScenarioConfig.from_json(cfg.to_json())
        assert back == cfg


def test_json_errors():
    with pytest.raises(ConfigError):
        ScenarioConfig.from_json("{not json")
    with pytest.raises(ConfigError):
        ScenarioConfig.from_json("[1, 2]")
    with pytest.raises(ConfigError) as info:
        ScenarioConfig.from_json(json.dumps({"seed": 1}))
    assert len(info.value.problems) == 2
    with pytest.raises(ConfigError):
        ScenarioConfig.from_json(json.dumps({"objects": [{"id": 1}], "robot_path": [[0, 0, 0]]}))


def test_load(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(preset("all_static").to_json())
    assert ScenarioConfig.load(p) == preset("all_static")


def test_prior_map_matches_frame_zero():
    scene = generate_scene(preset("baseline_6m4s"))
    lib = prior_map(scene)
    assert [o.id for o in lib] == list(range(1, 11))
    for o in lib:
        np.testing.assert_allclose(np.sort(o.landmarks_world, axis=0),
                                   np.sort(scene.corners(o.id, 0), axis=0), atol=1e-12)
    assert prior_map(generate_scene(preset("baseline_6m4s").replace(prior_map=False))) == []
