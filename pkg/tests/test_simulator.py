import json

import numpy as np
import pytest

from objba import graph as G
from objba import simulator as S
from objba.camera import StereoObservation, project_stereo
from objba.manifold import Pose, Twist, delta_transform

from .conftest import small_scene


def test_generate_is_deterministic():
    a = S.dataset_to_text(S.generate(small_scene(seed=5)))
    b = S.dataset_to_text(S.generate(small_scene(seed=5)))
    c = S.dataset_to_text(S.generate(small_scene(seed=6)))
    assert a == b and a != c


def test_zero_noise_residuals_vanish_for_every_family(zero_noise_dataset):
    p = S.build_problem(zero_noise_dataset)
    worst = {}
    for f in p.factors:
        ev = f.evaluate(p.values, p)
        assert ev.valid
        worst[type(f).__name__] = max(worst.get(type(f).__name__, 0.0), np.abs(ev.residual).max())
    assert set(worst) == {c.__name__ for c in G.FACTOR_TYPES.values()}
    assert max(worst.values()) < 1e-9


def test_observations_match_projection(zero_noise_dataset):
    ds = zero_noise_dataset
    for o in ds.observations[::37]:
        if o.object_id < 0:
            X = ds.camera_poses[o.frame].apply(ds.static_points[o.point_id])
        else:
            ob = ds.objects[o.object_id]
            X = (ds.camera_poses[o.frame] @ ob.poses[o.frame]).apply(ob.points[o.point_id])
        np.testing.assert_allclose(o.obs.as_array(), project_stereo(X, ds.intrinsics).as_array(), atol=1e-9)


def test_acceptance_scene_shape(zero_noise_dataset):
    ds = zero_noise_dataset
    assert len(ds.timestamps) == 10 and len(ds.static_points) == 200
    assert [len(ob.points) for ob in ds.objects.values()] == [30, 30]
    assert all(ds.object_frames(k) == list(range(10)) for k in ds.objects)
    assert len(ds.boxes2d) == 20


def test_static_object_with_zero_twist():
    obj = S.ObjectSpec([0, 0, 0], [0, 0.5, 12.0], [S.TwistSegment(0, [0, 0, 0], [0, 0, 0])], n_points=10)
    ds = S.generate(S.SceneConfig(n_frames=4, n_static=5, objects=[obj]))
    ob = ds.objects[0]
    for T in ob.poses:
        assert T.allclose(ob.poses[0], atol=0)
    p = S.build_problem(ds)
    assert G.total_cost(p) < 1e-18


def test_twist_integration_matches_delta_transform():
    ds = S.generate(small_scene())
    ob = ds.objects[0]
    for i in range(len(ob.poses) - 1):
        assert (ob.poses[i] @ delta_transform(ob.twists[i], 0.1)).allclose(ob.poses[i + 1], atol=1e-12)


def test_noise_level_matches_config():
    cfg = S.acceptance_scene(sigma_px=1.5, seed=3)
    noisy = S.generate(cfg)
    clean = S.generate(S.acceptance_scene(0.0, seed=3))
    # same seed draws the same points, so observation lists align
    assert len(noisy.observations) == len(clean.observations)
    d = np.array([a.obs.as_array() - b.obs.as_array() for a, b in zip(noisy.observations, clean.observations)])
    assert d.std() == pytest.approx(1.5, rel=0.05)


def test_outliers_keep_disparity():
    cfg = small_scene(sigma_px=0.0)
    cfg.outlier_fraction = 0.5
    ds = S.generate(cfg)
    flagged = [o for o in ds.observations if o.is_outlier]
    assert 0 < len(flagged) < len(ds.observations)
    clean = {(o.frame, o.point_id, o.object_id): o for o in S.generate(small_scene(sigma_px=0.0)).observations}
    for o in flagged:
        ref = clean.get((o.frame, o.point_id, o.object_id))
        if ref is not None:
            assert o.obs.disparity == pytest.approx(ref.obs.disparity, abs=1e-9)


def test_id_dropout_marks_instances():
    cfg = small_scene()
    cfg.id_dropout = 0.5
    ds = S.generate(cfg)
    obj = [o for o in ds.observations if o.object_id >= 0]
    assert any(not o.instance_visible for o in obj) and any(o.instance_visible for o in obj)
    assert all(o.instance_visible for o in ds.observations if o.object_id < 0)


@pytest.mark.parametrize("field,value", [("n_frames", 1), ("frame_dt", 0.0), ("sigma_px", -1.0),
                                         ("outlier_fraction", 1.0), ("n_static", -2)])
def test_config_errors_name_field(field, value):
    d = S.acceptance_scene().to_dict()
    d[field] = value
    with pytest.raises(S.ConfigError, match=field):
        S.SceneConfig.from_dict(d)


def test_config_unknown_field_and_json_roundtrip():
    with pytest.raises(S.ConfigError, match="bogus"):
        S.SceneConfig.from_dict({"bogus": 1})
    cfg = S.acceptance_scene(0.5, seed=2)
    assert S.SceneConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(S.ConfigError):
        S.SceneConfig.from_json("[1, 2]")


def test_no_visible_points_is_an_error():
    cfg = S.SceneConfig(n_static=3, static_bounds=[[-1, -1, -30], [1, 1, -20]])
    with pytest.raises(S.SceneError):
        S.generate(cfg)


def test_dataset_text_roundtrip():
    ds = S.generate(small_scene(seed=2))
    text = S.dataset_to_text(ds)
    back = S.dataset_from_text(text)
    assert S.dataset_to_text(back) == text
    assert G.problem_to_text(S.build_problem(back)) == G.problem_to_text(S.build_problem(ds))
    with pytest.raises(S.SceneError):
        S.dataset_from_text("hello\n")


# -- track initialization and matching ------------------------------------------------

def test_initialize_track_roundtrip(zero_noise_dataset):
    ds = zero_noise_dataset
    obs = [o for o in ds.frame_observations(0) if o.object_id == 0]
    T_wo, pts = S.initialize_object_track([o.obs for o in obs], ds.camera_poses[0], ds.intrinsics)
    np.testing.assert_allclose(T_wo.R, np.eye(3))
    world = np.array([ds.objects[0].poses[0].apply(ds.objects[0].points[o.point_id]) for o in obs])
    np.testing.assert_allclose(T_wo.t, world.mean(axis=0), atol=1e-9)
    np.testing.assert_allclose(pts.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(np.array([T_wo.apply(x) for x in pts]), world, atol=1e-9)


def test_initialize_track_needs_enough_points(zero_noise_dataset):
    obs = [o.obs for o in zero_noise_dataset.frame_observations(0) if o.object_id == 0][:7]
    with pytest.raises(S.TrackNotCreated):
        S.initialize_object_track(obs, zero_noise_dataset.camera_poses[0], zero_noise_dataset.intrinsics)


def test_initialize_track_centroid_under_noise():
    errs = []
    for seed in range(30):
        ds = S.generate(S.acceptance_scene(0.5, seed=seed))
        obs = [o for o in ds.frame_observations(0) if o.object_id == 0]
        T_wo, _ = S.initialize_object_track([o.obs for o in obs], ds.camera_poses[0], ds.intrinsics)
        ob = ds.objects[0]
        truth = np.mean([ob.poses[0].apply(ob.points[o.point_id]) for o in obs], axis=0)
        errs.append(T_wo.t - truth)
    errs = np.array(errs)
    assert np.linalg.norm(errs.mean(axis=0)) < 0.05
    assert np.abs(errs).max() < 0.5


def _match_setup(ds, k=0, i=0):
    ob = ds.objects[k]
    pts = {j: x for j, x in ob.points.items()}
    nxt = [o for o in ds.frame_observations(i + 1) if o.object_id == k]
    return ob, pts, nxt


def test_predict_and_match_exact(zero_noise_dataset):
    ds = zero_noise_dataset
    for k in ds.objects:
        ob, pts, nxt = _match_setup(ds, k)
        m = S.predict_and_match(ob.poses[0], ob.twists[0], 0.1, pts, ds.camera_poses[1],
                                [o.obs for o in nxt], ds.intrinsics)
        assert len(m) == len(nxt)
        assert all(j == nxt[n].point_id for j, n in m)


def test_predict_and_match_gate_zero(zero_noise_dataset):
    ds = zero_noise_dataset
    ob, pts, nxt = _match_setup(ds)
    assert S.predict_and_match(ob.poses[0], ob.twists[0], 0.1, pts, ds.camera_poses[1],
                               [o.obs for o in nxt], ds.intrinsics, gate_px=0.0) == []


def test_predict_and_match_stationary(intr):
    pts = {j: np.array([j * 0.3 - 1.0, 0.1 * j, 0.0]) for j in range(8)}
    T_wo = Pose(np.eye(3), [0, 0, 10.0])
    obs = [project_stereo(T_wo.apply(x), intr) for x in pts.values()][::-1]
    m = S.predict_and_match(T_wo, Twist(), 0.1, pts, Pose.identity(), obs, intr, gate_px=1.0)
    assert m == [(j, 7 - j) for j in range(8)]


def test_predict_and_match_is_one_to_one(intr):
    pts = {0: np.zeros(3), 1: np.array([0.001, 0, 0])}
    T_wo = Pose(np.eye(3), [0, 0, 10.0])
    obs = [project_stereo([0, 0, 10.0], intr)]
    m = S.predict_and_match(T_wo, Twist(), 0.1, pts, Pose.identity(), obs, intr)
    assert m == [(0, 0)]
    far = [StereoObservation(0.0, 0.0, -10.0)]
    assert S.predict_and_match(T_wo, Twist(), 0.1, pts, Pose.identity(), far, intr) == []


# -- perturbation ---------------------------------------------------------------------

def test_zero_perturbation_leaves_cost():
    ds = S.generate(small_scene(seed=1))
    gt = S.build_problem(ds)
    p = S.perturb(ds, S.PerturbMagnitudes.zero(), seed=9)
    assert G.total_cost(p) == G.total_cost(gt)


def test_perturb_seeded_and_gauge_exact():
    ds = S.generate(small_scene(seed=1))
    a, b = S.perturb(ds, seed=3), S.perturb(ds, seed=3)
    assert G.problem_to_text(a) == G.problem_to_text(b)
    gt = S.build_problem(ds)
    for k in a.fixed:
        assert a.values[k] is gt.values[k] or a.values[k].allclose(gt.values[k], atol=0)
    assert G.total_cost(a) > G.total_cost(gt)


def test_perturb_respects_magnitudes():
    ds = S.generate(small_scene(seed=1))
    gt = S.build_problem(ds)
    p = S.perturb(ds, seed=4)
    for k, v in p.values.items():
        if k.kind is G.VarKind.MapPoint or k.kind is G.VarKind.ObjectPoint:
            assert np.abs(v - gt.values[k]).max() <= 0.1
        elif k.kind is G.VarKind.CameraPose:
            assert np.abs(v.inverse().t - gt.values[k].inverse().t).max() <= 0.1 + 1e-12


def test_build_problem_structure(zero_noise_dataset):
    p = S.build_problem(zero_noise_dataset)
    counts = {}
    for f in p.factors:
        counts[type(f).__name__] = counts.get(type(f).__name__, 0) + 1
    n_f, n_obj, n_pts = 10, 2, 30
    assert counts["ConstantVelocityFactor"] == n_obj * (n_f - 2)
    assert counts["VelocityCouplingFactor"] == n_obj * (n_f - 1) * n_pts
    assert p.fixed == {G.camera_key(0), G.object_pose_key(0, 0), G.object_pose_key(1, 0)}
    assert json.loads(json.dumps(G.cost_breakdown(p)))["invalid"] == 0


def test_keyframe_trigger_from_counts(zero_noise_dataset):
    ds = zero_noise_dataset
    assert S.keyframe_trigger(ds, 1) is None
    assert S.keyframe_trigger(ds, 1, min_static=10 ** 6) == "camera_weak"
    assert S.keyframe_trigger(ds, 1, min_object_points=31) == "object_weak"
    assert S.keyframe_trigger(ds, 1, min_static=10 ** 6, min_object_points=31) == "both"
    # nothing to lose in the first frame
    assert S.keyframe_trigger(ds, 0, min_object_points=31) is None


def test_keyframe_trigger_counts_only_labelled_points():
    cfg = S.acceptance_scene()
    cfg.id_dropout = 0.9
    ds = S.generate(cfg)
    assert S.keyframe_trigger(ds, 1) in ("object_weak", "both")
    assert S.keyframe_trigger(ds, 1) in G.TRIGGERS
