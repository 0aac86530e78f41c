"""Command line: ``objba simulate | solve | eval | bench``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import graph as G
from . import metrics as M
from . import simulator as S
from .bbox import Box3D, RansacConfig, fit_box_ransac, project_box, refine_box
from .camera import BehindCameraError
from .factors import RobustLoss
from .manifold import Pose
from .solver import LMConfig, complexity_probe, format_table, levenberg_marquardt

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
ESTIMATE_HEADER = "OBJBA-ESTIMATE 1"


class UsageError(Exception):
    pass


# -- configuration ------------------------------------------------------------------

@dataclass
class SolverSection:
    max_iters: int = 50
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    tol: float = 1e-12
    huber_delta: float = float(np.sqrt(7.815))
    robust: bool = True
    sigma_v: float = 0.5
    sigma_w: float = 0.1
    window: float = 2.0


@dataclass
class EvalSection:
    min_iou: float = 0.25
    rpe_mode: str = "per_frame"
    rpe_delta: float = 1.0
    object_rpe_delta: float = 1.0


@dataclass
class PerturbSection:
    cam_trans: float = 0.1
    cam_rot_deg: float = 2.0
    point: float = 0.1
    obj_trans: float = 0.1
    obj_rot_deg: float = 2.0
    twist_frac: float = 0.2


@dataclass
class BenchSection:
    reduce_sizes: list = field(default_factory=lambda: [[20, 2000], [20, 4000]])
    solve_sizes: list = field(default_factory=lambda: [[150, 10], [300, 10]])
    repeats: int = 5


@dataclass
class RunConfig:
    scene: str | None = None
    seed: int = 0
    solver: SolverSection = field(default_factory=SolverSection)
    eval: EvalSection = field(default_factory=EvalSection)
    perturb: PerturbSection = field(default_factory=PerturbSection)
    bench: BenchSection = field(default_factory=BenchSection)

    def validate(self):
        s, e = self.solver, self.eval
        checks = [
            (s.max_iters >= 0, "solver.max_iters", "must be >= 0"),
            (s.lambda_init > 0, "solver.lambda_init", "must be > 0"),
            (s.lambda_up > 1, "solver.lambda_up", "must be > 1"),
            (0 < s.lambda_down < 1, "solver.lambda_down", "must be in (0, 1)"),
            (s.huber_delta > 0, "solver.huber_delta", "must be > 0"),
            (s.sigma_v > 0, "solver.sigma_v", "must be > 0"),
            (s.sigma_w > 0, "solver.sigma_w", "must be > 0"),
            (s.window > 0, "solver.window", "must be > 0"),
            (0 < e.min_iou <= 1, "eval.min_iou", "must be in (0, 1]"),
            (e.rpe_mode in ("per_frame", "per_distance"), "eval.rpe_mode", "per_frame or per_distance"),
            (e.rpe_delta > 0, "eval.rpe_delta", "must be > 0"),
            (e.object_rpe_delta > 0, "eval.object_rpe_delta", "must be > 0"),
            (self.bench.repeats >= 1, "bench.repeats", "must be >= 1"),
        ]
        for ok, name, msg in checks:
            if not ok:
                raise S.ConfigError(f"{name}: {msg}")
        for name, v in asdict(self.perturb).items():
            if v < 0:
                raise S.ConfigError(f"perturb.{name}: must be >= 0")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        sections = {"solver": SolverSection, "eval": EvalSection, "perturb": PerturbSection,
                    "bench": BenchSection}
        kw = {}
        for key, val in d.items():
            if key in sections:
                if not isinstance(val, dict):
                    raise S.ConfigError(f"{key}: must be an object")
                allowed = {f.name: f.type for f in fields(sections[key])}
                for sub in val:
                    if sub not in allowed:
                        raise S.ConfigError(f"{key}.{sub}: unknown field")
                kw[key] = sections[key](**val)
            elif key in ("scene", "seed"):
                kw[key] = val
            else:
                raise S.ConfigError(f"{key}: unknown field")
        cfg = cls(**kw)
        for sec in sections:
            for f in fields(getattr(cfg, sec)):
                v = getattr(getattr(cfg, sec), f.name)
                if f.type in ("float", "int") and (isinstance(v, bool) or not isinstance(v, (int, float))):
                    raise S.ConfigError(f"{sec}.{f.name}: expected a number, got {v!r}")
                if f.type == "str" and not isinstance(v, str):
                    raise S.ConfigError(f"{sec}.{f.name}: expected a string, got {v!r}")
        if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool):
            raise S.ConfigError(f"seed: expected an integer, got {cfg.seed!r}")
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise S.ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise S.ConfigError(f"{path}: top level must be an object")
        cfg = cls.from_dict(d)
        if cfg.scene is not None and not Path(cfg.scene).is_absolute():
            cfg.scene = str(Path(path).parent / cfg.scene)
        return cfg

    def lm(self) -> LMConfig:
        s = self.solver
        return LMConfig(max_iters=s.max_iters, lambda_init=s.lambda_init, lambda_up=s.lambda_up,
                        lambda_down=s.lambda_down, tol=s.tol)

    def loss(self) -> RobustLoss:
        return RobustLoss("huber" if self.solver.robust else "none", self.solver.huber_delta)


def bundled(name: str) -> str:
    return resources.files("objba.data").joinpath(name).read_text()


def _load_scene(path: str | None) -> S.SceneConfig:
    if path is None:
        return S.SceneConfig.from_json(bundled("scene_zero_noise.json"))
    p = Path(path)
    if not p.exists():
        raise UsageError(f"scene config {path} does not exist")
    return S.SceneConfig.from_json(p.read_text())


def _run_config(args) -> RunConfig:
    if args.config is None:
        return RunConfig()
    if not Path(args.config).exists():
        raise UsageError(f"config {args.config} does not exist")
    return RunConfig.load(args.config)


# -- estimate file ------------------------------------------------------------------

def _f(x) -> str:
    return f"{float(x):.17g}"


def estimate_to_text(problem: G.Problem, boxes: dict) -> str:
    out = [ESTIMATE_HEADER]
    for k in sorted(boxes):
        b = boxes[k]
        out.append(f"BOX {k} " + " ".join(_f(v) for v in [*b.pose.R.ravel(), *b.pose.t, *b.dims]))
    out.append(G.problem_to_text(problem).rstrip("\n"))
    return "\n".join(out) + "\n"


def estimate_from_text(text: str):
    lines = text.splitlines()
    if not lines or lines[0].strip() != ESTIMATE_HEADER:
        raise S.SceneError("missing or unsupported estimate header")
    boxes = {}
    i = 1
    while i < len(lines) and lines[i].startswith("BOX "):
        tok = lines[i].split()
        v = [float(x) for x in tok[2:17]]
        boxes[int(tok[1])] = Box3D(Pose(np.array(v[:9]).reshape(3, 3), v[9:12]), v[12:15])
        i += 1
    return G.problem_from_text("\n".join(lines[i:]) + "\n"), boxes


# -- commands -----------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _run_config(args)
    scene = _load_scene(cfg.scene)
    if args.seed is not None:
        scene.seed = args.seed
    ds = S.generate(scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "dataset.txt").write_text(S.dataset_to_text(ds))
    print(f"wrote {out / 'dataset.txt'}: {len(ds.timestamps)} frames, {len(ds.observations)} observations")
    return EXIT_OK


def estimate_boxes(problem: G.Problem, ds: S.Dataset, seed: int = 0) -> dict:
    """RANSAC box per track from its estimated points, refined over all detected frames."""
    boxes = {}
    for k, ob in ds.objects.items():
        pts = np.array([problem.values[key] for key in sorted(problem.values, key=G.sort_key)
                        if key.kind is G.VarKind.ObjectPoint and key.track == k]).reshape(-1, 3)
        views = [(problem.values[G.object_pose_key(k, i)], problem.values[G.camera_key(i)], ds.boxes2d[(i, k)])
                 for i in range(len(ds.timestamps))
                 if (i, k) in ds.boxes2d and G.object_pose_key(k, i) in problem.values]
        if len(pts) < 10 or not views:
            continue
        prior = S.class_prior_for(ob.label)
        T_wo, T_cw, det = views[0]
        box = fit_box_ransac(pts, prior, T_wo, T_cw, det, ds.intrinsics, RansacConfig(seed=seed))
        if box is None:
            continue
        if len(views) >= 3:
            box = refine_box(box, views, ds.intrinsics, prior).box
        boxes[k] = box
    return boxes


def cmd_solve(args) -> int:
    cfg = _run_config(args)
    path = Path(args.dataset)
    if not path.exists():
        raise UsageError(f"dataset {path} does not exist")
    ds = S.dataset_from_text(path.read_text())
    if not ds.observations:
        raise S.SceneError("dataset contains no observations")
    seed = cfg.seed if args.seed is None else args.seed
    problem = S.perturb(ds, S.PerturbMagnitudes(**asdict(cfg.perturb)), seed=seed, loss=cfg.loss(),
                        sigma_v=cfg.solver.sigma_v, sigma_w=cfg.solver.sigma_w)
    problem.numeric_jacobians = bool(args.numeric_jacobians)
    result, stats = levenberg_marquardt(problem, cfg.lm())
    boxes = estimate_boxes(result, ds, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "estimate.txt").write_text(estimate_to_text(result, boxes))
    (out / "stats.json").write_text(stats.to_json(timings=False) + "\n")
    print(f"solve: {stats.iterations} iterations, cost {stats.initial_cost:.6g} -> {stats.final_cost:.6g}"
          f" ({stats.reason})")
    return EXIT_OK


def _object_trajectory(values: dict, k: int, timestamps) -> M.Trajectory:
    frames = sorted(key.frame for key in values if key.kind is G.VarKind.ObjectPose and key.track == k)
    return M.Trajectory([timestamps[i] for i in frames], [values[G.object_pose_key(k, i)] for i in frames])


def evaluate(problem: G.Problem, boxes: dict, ds: S.Dataset, cfg: RunConfig) -> tuple:
    """Per-track rows (camera first) and a structured summary."""
    ts = ds.timestamps
    cams = [problem.values[G.camera_key(i)] for i in range(len(ts))]
    est_cam = M.Trajectory.from_camera_poses(ts, cams)
    gt_cam = M.Trajectory.from_camera_poses(ts, ds.camera_poses)
    e = cfg.eval
    rows = []
    cam_rpe = M.rpe(est_cam, gt_cam, e.rpe_mode, e.rpe_delta)
    rows.append({"track": "camera", "ATE": M.ate(est_cam, gt_cam), "RPE_t": cam_rpe[0], "RPE_R": cam_rpe[1]})
    for k, ob in sorted(ds.objects.items()):
        est_o = _object_trajectory(problem.values, k, ts)
        if len(est_o) < 2:
            continue
        gt_o = M.Trajectory(ts, ob.poses)
        row = {"track": f"object{k}", "ATE": M.ate(est_o, gt_o)}
        try:
            row["RPE_t"], row["RPE_R"] = M.rpe(est_o, gt_o, "per_distance", e.object_rpe_delta)
        except M.MetricError:
            row["RPE_t"] = row["RPE_R"] = float("nan")
        est2d, gt2d, est3d, gt3d = {}, {}, {}, {}
        for i in range(len(ts)):
            if (i, k) not in ds.boxes2d:
                continue
            gt2d[i] = [ds.boxes2d[(i, k)]]
            gt3d[i] = [ob.box.placed(ob.poses[i])]
            key = G.object_pose_key(k, i)
            if k in boxes and key in problem.values:
                T_wo = problem.values[key]
                est3d[i] = [boxes[k].placed(T_wo)]
                try:
                    est2d[i] = [project_box(boxes[k], T_wo, cams[i], ds.intrinsics)]
                except (BehindCameraError, ValueError):
                    pass
        for flavor, tag, est_b, gt_b in (("2d", "2D", est2d, gt2d), ("bev", "BV", est3d, gt3d),
                                         ("3d", "3D", est3d, gt3d)):
            rep = M.mot_evaluate(est_b, gt_b, flavor, e.min_iou)
            row[f"TP_{tag}"] = rep.tp_percent
            row[f"MOTP_{tag}"] = rep.motp_percent
        rows.append(row)
    return rows


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    for p in (args.estimate, args.dataset):
        if not Path(p).exists():
            raise UsageError(f"{p} does not exist")
    problem, boxes = estimate_from_text(Path(args.estimate).read_text())
    ds = S.dataset_from_text(Path(args.dataset).read_text())
    rows = evaluate(problem, boxes, ds, cfg)
    table = M.per_track_csv(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(table)
    tracks = [{k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in r.items()}
              for r in M.read_track_csv(table)]
    summary = {"cost": G.total_cost(problem), "tracks": tracks}
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True, allow_nan=False) + "\n")
    sys.stdout.write(table)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _run_config(args)
    b = cfg.bench
    rows = complexity_probe([tuple(s) for s in b.reduce_sizes], [tuple(s) for s in b.solve_sizes],
                            repeats=b.repeats, threads=args.threads or 1)
    table = format_table(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.txt").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


# -- entry point --------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON)")
    common.add_argument("--seed", type=int, help="override the seed")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread limit; 1 is deterministic")
    common.add_argument("--numeric-jacobians", action="store_true",
                        help="use central-difference Jacobians (diagnostic)")
    parser = _Parser(prog="objba", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset").set_defaults(fn=cmd_simulate)
    p = sub.add_parser("solve", parents=[common], help="bundle-adjust a dataset")
    p.add_argument("dataset")
    p.set_defaults(fn=cmd_solve)
    p = sub.add_parser("eval", parents=[common], help="score an estimate against ground truth")
    p.add_argument("estimate")
    p.add_argument("dataset")
    p.set_defaults(fn=cmd_eval)
    sub.add_parser("bench", parents=[common], help="reduce/solve timing sweep").set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None and args.threads < 1:
        print("objba: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=args.threads):
            return args.fn(args)
    except (UsageError, S.ConfigError) as exc:
        print(f"objba: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # any module error is a runtime failure
        print(f"objba: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
