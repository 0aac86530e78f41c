import numpy as np
import pytest

from objba import factors as F
from objba import graph as G
from objba import simulator as S
from objba.camera import StereoIntrinsics, StereoObservation, project_stereo
from objba.manifold import Pose

from .conftest import small_scene


def long_scene() -> S.SceneConfig:
    """5 s of an object driving alongside a slow camera."""
    obj = S.ObjectSpec([0.0, -np.pi / 2, 0.0], [-2.5, 0.8, 15.0],
                       [S.TwistSegment(0, [1.0, 0.0, 0.0], [0.0, 0.0, 0.0])], n_points=20)
    return S.SceneConfig(n_frames=11, frame_dt=0.5, n_static=30, objects=[obj],
                         camera_twists=[S.TwistSegment(0, [0.0, 0.0, 1.0], [0.0, 0.0, 0.0])])


def test_zero_noise_cost_is_zero(zero_noise_dataset):
    p = S.build_problem(zero_noise_dataset)
    assert G.total_cost(p) < 1e-16 * len(p.factors)
    br = G.cost_breakdown(p)
    assert br["invalid"] == 0
    assert set(br) >= set(G.FACTOR_TYPES)


def test_single_static_factor_cost():
    intr = StereoIntrinsics(100, 100, 50, 50, 0.5)
    p = G.Problem(intr, loss=F.NO_LOSS)
    p.add_variable(G.camera_key(0), Pose.identity())
    p.add_variable(G.map_point_key(0), np.array([1.0, 2.0, 4.0]))
    r = np.array([0.3, -1.2, 2.0])
    obs = StereoObservation.from_array(np.array([75.0, 100.0, 62.5]) + r)
    p.add_factor(G.StaticReprojectionFactor(G.camera_key(0), G.map_point_key(0), obs, 1.0))
    assert G.total_cost(p) == pytest.approx(r @ r, rel=1e-12)


def test_outlier_growth_is_huber_bounded(zero_noise_dataset):
    p = S.build_problem(zero_noise_dataset)
    base = G.total_cost(p)
    f = p.factors[0]
    bad = StereoObservation(f.obs.u_l + 500.0, f.obs.v_l - 300.0, f.obs.u_r + 500.0)
    p.add_factor(G.StaticReprojectionFactor(f.camera, f.point, bad, f.sigma_px))
    s = (500.0 ** 2 + 300.0 ** 2 + 500.0 ** 2) / f.sigma_px ** 2
    d = p.loss.delta
    grow = G.total_cost(p) - base
    assert grow <= 2 * d * np.sqrt(s) - d * d + 1e-9
    assert grow < s


@pytest.mark.parametrize("n_c,n_o,n_op,N,Np", [(10, 10, 50, 15060, 2160), (1, 1, 1, 9, 15)])
def test_parameter_counts_worked(n_c, n_o, n_op, N, Np):
    pc = G.parameter_counts(n_c, n_o, n_op)
    assert (pc.N_baseline, pc.N_object_centric) == (N, Np)


def test_parameter_ratio_examples():
    assert G.parameter_counts(10, 10, 50).ratio == pytest.approx(2160 / 15060)
    assert round(G.parameter_counts(10, 10, 50).ratio, 4) == 0.1434
    assert G.parameter_counts(1, 1, 1).ratio > 1
    for n_c in (2, 5, 10):
        assert G.parameter_counts(n_c, 3, 10 ** 9).ratio == pytest.approx(1 / n_c, rel=1e-6)


def test_parameter_counts_validation():
    with pytest.raises(ValueError):
        G.parameter_counts(-1, 1, 1)


def test_parameter_counts_match_enumeration(rng):
    for _ in range(10):
        n_c, n_o, n_op = (int(v) for v in rng.integers(1, 6, 3))
        pc = G.parameter_counts(n_c, n_o, n_op)
        oc = G.build_parameter_skeleton(n_c, n_o, n_op, "object_centric")
        bl = G.build_parameter_skeleton(n_c, n_o, n_op, "baseline")
        # twists: one per consecutive camera pair and object; the prose formula counts 6 per (camera, object)
        n_tw = G.count_dofs(oc, [G.VarKind.ObjectTwist])
        assert n_tw == 6 * n_o * (n_c - 1)
        assert G.count_dofs(oc, [G.VarKind.CameraPose, G.VarKind.ObjectPose, G.VarKind.ObjectPoint]) \
            == pc.N_object_centric
        assert G.count_dofs(bl, list(G.VarKind)) == pc.N_baseline


def test_problem_validation():
    intr = StereoIntrinsics(100, 100, 50, 50, 0.5)
    p = G.Problem(intr)
    p.add_variable(G.camera_key(0), Pose.identity())
    with pytest.raises(G.ProblemError):
        p.add_variable(G.camera_key(0), Pose.identity())
    with pytest.raises(G.ProblemError):
        p.add_factor(G.StaticReprojectionFactor(G.camera_key(0), G.map_point_key(3), StereoObservation(1, 1, 0)))
    p.timestamps = {0: 0.0, 1: 0.0}
    with pytest.raises(G.ProblemError):
        p.validate()
    p.timestamps = {0: 0.0}
    p.add_variable(G.object_pose_key(0, 0), Pose.identity())
    p.add_variable(G.object_pose_key(0, 1), Pose.identity())
    with pytest.raises(G.ProblemError):
        p.validate()


def test_simulated_problem_is_valid(zero_noise_dataset):
    S.build_problem(zero_noise_dataset).validate()


def test_key_text_roundtrip():
    for key in (G.camera_key(3), G.object_pose_key(1, 4), G.twist_key(0, 2), G.map_point_key(7),
                G.object_point_key(5, 1)):
        assert G.VariableKey.parse(str(key)) == key
    assert G.object_point_key(5, 1).track == 1
    assert G.twist_key(0, 2).frame == 2


def test_problem_text_roundtrip():
    ds = S.generate(small_scene(seed=3))
    p = S.perturb(ds, seed=4)
    text = G.problem_to_text(p)
    q = G.problem_from_text(text)
    assert G.problem_to_text(q) == text
    assert G.total_cost(q) == G.total_cost(p)
    assert q.fixed == p.fixed


def test_problem_text_rejects_garbage():
    with pytest.raises(G.ProblemError):
        G.problem_from_text("NOT-A-PROBLEM\n")
    with pytest.raises(G.ProblemError):
        G.problem_from_text(G.PROBLEM_HEADER + "\nVAR CameraPose:0 0 1 0 0 0 1 0 0 0 1 0 0 0\n")


# -- windows --------------------------------------------------------------------

def test_window_frees_only_recent_object_states():
    ds = S.generate(long_scene())
    p = S.build_problem(ds)
    t_now = ds.timestamps[-1]
    assert t_now == pytest.approx(5.0)
    sub = G.build_local_window(p, "object_weak", t_now, window=2.0)
    free = [k for k in sub.values if k not in sub.fixed]
    for k in free:
        if k.kind in (G.VarKind.ObjectPose, G.VarKind.ObjectTwist):
            assert p.timestamps[k.frame] > t_now - 2.0
    assert any(k.kind is G.VarKind.ObjectPose for k in free)
    assert any(k.kind is G.VarKind.ObjectPoint for k in free)
    # object points keep their full observation history through fixed poses/cameras
    assert any(k.kind is G.VarKind.ObjectPose and k in sub.fixed for k in sub.values)


def test_window_both_inside_keeps_all_but_gauge():
    ds = S.generate(small_scene(seed=1))
    p = S.build_problem(ds)
    p.fixed.clear()
    sub = G.build_local_window(p, "both", ds.timestamps[-1], window=100.0)
    assert set(sub.values) == set(p.values)
    assert sub.fixed == G.gauge_anchors(p)


def test_window_single_camera_is_fixed_objects_free():
    ds = S.generate(long_scene())
    p = S.build_problem(ds)
    t_now = ds.timestamps[-1]
    sub = G.build_local_window(p, "both", t_now, window=0.25)
    cams = [k for k in sub.values if k.kind is G.VarKind.CameraPose]
    in_window = [k for k in cams if p.timestamps[k.frame] > t_now - 0.25]
    assert len(in_window) == 1 and in_window[0] in sub.fixed
    assert any(k.kind is G.VarKind.ObjectPose and k not in sub.fixed for k in sub.values)


def test_window_never_frees_unconstrained_variables():
    ds = S.generate(long_scene())
    p = S.build_problem(ds)
    p.add_variable(G.map_point_key(10 ** 6), np.zeros(3))
    for trig in G.TRIGGERS:
        sub = G.build_local_window(p, trig, ds.timestamps[-1], 2.0)
        by_var = sub.factors_by_variable()
        assert all(by_var[k] for k in sub.values if k not in sub.fixed)


def test_window_errors():
    ds = S.generate(small_scene())
    p = S.build_problem(ds)
    with pytest.raises(G.EmptyWindowError):
        G.build_local_window(p, "both", -10.0, 2.0)
    with pytest.raises(ValueError):
        G.build_local_window(p, "sometimes", 1.0)


def test_window_trigger_camera_weak_excludes_objects():
    ds = S.generate(small_scene())
    p = S.build_problem(ds)
    sub = G.build_local_window(p, "camera_weak", ds.timestamps[-1], 100.0)
    free = {k.kind for k in sub.values if k not in sub.fixed}
    assert free <= {G.VarKind.CameraPose, G.VarKind.MapPoint}


def test_factor_evaluation_honours_numeric_mode(zero_noise_dataset):
    p = S.build_problem(zero_noise_dataset)
    f = next(f for f in p.factors if isinstance(f, G.ObjectReprojectionFactor))
    a = f.evaluate(p.values, p)
    p.numeric_jacobians = True
    n = f.evaluate(p.values, p)
    for Ja, Jn in zip(a.jacobians, n.jacobians):
        np.testing.assert_allclose(Ja, Jn, rtol=1e-4, atol=1e-4)
    obs = project_stereo(p.values[f.camera].apply(p.values[f.object_pose].apply(p.values[f.point])), p.intrinsics)
    np.testing.assert_allclose(obs.as_array(), f.obs.as_array(), atol=1e-9)
