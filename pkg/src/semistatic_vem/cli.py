"""Command-line runner, metrics and ablation harness.

Exit statuses: 0 success, 1 pipeline failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import statistics
import sys
import time
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sim, vem
from .geom import Pose2

log = logging.getLogger("semistatic_vem")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
FLOAT_FMT = "{:.10g}"


@dataclass
class RunMetrics:
    ate: float
    mpe: float
    change_precision: float
    change_recall: float
    runtime: float = 0.0
    mode_flips: int = 0

    def __post_init__(self) -> None:
        for name in ("change_precision", "change_recall"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass
class AblationSpec:
    variants: tuple[str, ...]
    seeds: tuple[int, ...]
    preset: str | None = None
    config: sim.ScenarioConfig | None = None

    def __post_init__(self) -> None:
        if not self.seeds:
            raise vem.ConfigError(["ablation needs at least one seed"])
        bad = [v for v in self.variants if v not in vem.VARIANTS]
        if bad or not self.variants:
            raise vem.ConfigError([f"unknown variant {v!r}" for v in bad] or ["no variants given"])
        if (self.preset is None) == (self.config is None):
            raise vem.ConfigError(["give exactly one of preset or config"])

    def scenario(self, seed: int) -> sim.ScenarioConfig:
        if self.preset is not None:
            return sim.preset(self.preset, seed)
        return self.config.replace(seed=seed)


# ---------------------------------------------------------------------------
# metrics


def metrics(traj_est: Sequence[Pose2], traj_gt: Sequence[Pose2], object_truth: dict[int, int | None],
            status_history: dict[int, list[tuple[int, str]]]) -> RunMetrics:
    """Trajectory error and change-detection scores.

    ``object_truth`` maps every mapped object id to the frame at which it was
    moved (``None`` if it never moved).  ``status_history`` lists
    ``(frame, status)`` per object.  An object counts as detected-changed if
    it was ever flagged (pending or removed) at or after its move frame;
    unmoved objects flagged at any frame are false positives.
    """
    if len(traj_est) != len(traj_gt):
        raise ValueError(f"trajectory lengths differ: {len(traj_est)} vs {len(traj_gt)}")
    if traj_est:
        err = np.array([math.hypot(a.x - b.x, a.y - b.y) for a, b in zip(traj_est, traj_gt)])
        ate, mpe = float(np.sqrt(np.mean(err * err))), float(err.max())
    else:
        ate = mpe = 0.0
    tp = fp = 0
    moved = [o for o, f in object_truth.items() if f is not None]
    for oid, move_frame in object_truth.items():
        hist = status_history.get(oid, [])
        if move_frame is None:
            fp += any(s != vem.ACTIVE for _, s in hist)
        else:
            tp += any(s != vem.ACTIVE and f >= move_frame for f, s in hist)
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / len(moved) if moved else 1.0
    return RunMetrics(ate, mpe, precision, recall)


# ---------------------------------------------------------------------------
# running


@dataclass
class RunResult:
    metrics: RunMetrics
    state: vem.PipelineState
    scene: sim.Scene
    frames: list[sim.FrameData]
    snapshots: list[list[tuple]] = field(default_factory=list)


def vem_config_for(scenario: sim.ScenarioConfig, **overrides) -> vem.VEMConfig:
    """Pipeline defaults with the sensor footprint taken from the scenario."""
    base = dict(fov_max_range=scenario.fov.max_range, fov_half_angle=scenario.fov.half_angle)
    base.update(overrides)
    return vem.VEMConfig.from_dict(base)


def _snapshot(state: vem.PipelineState) -> list[tuple]:
    rows = []
    for oid in sorted(state.object_library):
        o = state.object_library[oid]
        rows.append((oid, o.consistency.mean, o.mean_responsibility, o.consistency.alpha,
                     o.consistency.beta_, o.status, o.pose))
    return rows


def run_scenario(scenario: sim.ScenarioConfig, config: vem.VEMConfig | None = None,
                 dump_path: Path | None = None) -> RunResult:
    scene = sim.generate_scene(scenario)
    config = config or vem_config_for(scenario)
    state = vem.initial_state(config, sim.prior_map(scene, config.prior), scenario.seed)
    frames, snapshots = [], []
    history: dict[int, list[tuple[int, str]]] = {}
    dump = open(dump_path, "w") if dump_path is not None else None
    t0 = time.perf_counter()
    try:
        for fd in sim.simulate(scene):
            vem.process_frame(state, fd, dump)
            frames.append(fd)
            snapshots.append(_snapshot(state))
            for oid, status in state.reports[-1].statuses.items():
                history.setdefault(oid, []).append((fd.frame_id, status))
    finally:
        if dump is not None:
            dump.close()
    runtime = time.perf_counter() - t0
    truth = {o.id: None for o in scenario.objects} if scenario.prior_map else {}
    for oid, f in scene.moved_objects().items():
        if oid in truth:
            truth[oid] = f
    est = [state.trajectory[fd.frame_id] for fd in frames]
    m = metrics(est, [fd.gt_pose for fd in frames], truth, history)
    m.runtime = runtime
    m.mode_flips = sum(it.mode_flips for r in state.reports for it in r.iterations)
    return RunResult(m, state, scene, frames, snapshots)


# ---------------------------------------------------------------------------
# outputs


def _f(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return FLOAT_FMT.format(float(v))


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_f(v) for v in row])


TRAJECTORY_COLUMNS = ("frame", "est_x", "est_y", "est_theta", "gt_x", "gt_y", "gt_theta")
OBJECTS_COLUMNS = ("frame", "object_id", "expected_v", "expected_pi_mean", "alpha", "beta",
                   "status", "pose_x", "pose_y", "pose_theta")
ELBO_COLUMNS = ("frame", "em_iter", "elbo", "pose_error", "rot_error", "mode_flips")
CONSISTENCY_COLUMNS = ("frame", "em_iter", "object_id", "expected_v", "expected_pi")
METRICS_COLUMNS = ("ate", "mpe", "change_precision", "change_recall", "mode_flips")
OUTPUT_FILES = ("trajectory.csv", "objects.csv", "elbo_trace.csv", "consistency_trace.csv",
                "metrics.csv")


def write_outputs(result: RunResult, out_dir: Path, svg: bool = False) -> list[Path]:
    out_dir = Path(out_dir)
    st = result.state
    _write_csv(out_dir / "trajectory.csv", TRAJECTORY_COLUMNS,
               ((fd.frame_id, *st.trajectory[fd.frame_id].to_array(), *fd.gt_pose.to_array())
                for fd in result.frames))
    _write_csv(out_dir / "objects.csv", OBJECTS_COLUMNS,
               ((fd.frame_id, oid, ev, epi, a, b, status, *pose.to_array())
                for fd, snap in zip(result.frames, result.snapshots)
                for oid, ev, epi, a, b, status, pose in snap))
    iters = [it for r in st.reports for it in r.iterations]
    _write_csv(out_dir / "elbo_trace.csv", ELBO_COLUMNS,
               ((it.frame_id, it.em_iter, it.elbo, it.pose_error, it.rot_error, it.mode_flips)
                for it in iters))
    _write_csv(out_dir / "consistency_trace.csv", CONSISTENCY_COLUMNS,
               ((it.frame_id, it.em_iter, oid, it.expected_v[oid], it.expected_pi[oid])
                for it in iters for oid in sorted(it.expected_v)))
    m = result.metrics
    _write_csv(out_dir / "metrics.csv", METRICS_COLUMNS,
               [(m.ate, m.mpe, m.change_precision, m.change_recall, m.mode_flips)])
    written = [out_dir / f for f in OUTPUT_FILES]
    if svg:
        first = [it for it in iters if it.frame_id == result.frames[0].frame_id]
        path = out_dir / "frame1_traces.svg"
        path.write_text(traces_svg(first))
        written.append(path)
    return written


def _polyline(xs, ys, x0, y0, w, h, xr, yr, color) -> str:
    (xa, xb), (ya, yb) = xr, yr
    sx = w / (xb - xa or 1.0)
    sy = h / (yb - ya or 1.0)
    pts = " ".join(f"{x0 + (x - xa) * sx:.2f},{y0 + h - (y - ya) * sy:.2f}" for x, y in zip(xs, ys))
    return f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>'


def traces_svg(iters: list[vem.EMIteration]) -> str:
    """Two stacked panels: per-object E[v] and pose error over EM iterations."""
    W, H, pad = 480, 170, 40
    palette = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
               "#7f7f7f", "#bcbd22", "#17becf")
    xs = [it.em_iter for it in iters]
    xr = (min(xs, default=0), max(xs, default=1))
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W + 2 * pad}" '
             f'height="{2 * H + 3 * pad}" font-family="sans-serif" font-size="11">']
    oids = sorted({o for it in iters for o in it.expected_v})
    parts.append(f'<text x="{pad}" y="{pad - 10}">E[v] per object</text>')
    parts.append(f'<rect x="{pad}" y="{pad}" width="{W}" height="{H}" fill="none" stroke="#999"/>')
    for k, oid in enumerate(oids):
        ys = [it.expected_v.get(oid, float("nan")) for it in iters]
        parts.append(_polyline(xs, ys, pad, pad, W, H, xr, (0.0, 1.0), palette[k % len(palette)]))
    errs = [it.pose_error for it in iters]
    top = 2 * pad + H
    ymax = max([e for e in errs if math.isfinite(e)], default=1.0) or 1.0
    parts.append(f'<text x="{pad}" y="{top - 10}">pose error [m] (max {ymax:.3g})</text>')
    parts.append(f'<rect x="{pad}" y="{top}" width="{W}" height="{H}" fill="none" stroke="#999"/>')
    if all(math.isfinite(e) for e in errs):
        parts.append(_polyline(xs, errs, pad, top, W, H, xr, (0.0, ymax), "#000"))
    parts.append("</svg>\n")
    return "\n".join(parts)


# ---------------------------------------------------------------------------
# ablation


ABLATION_COLUMNS = ("variant", "seed", "ate", "mpe", "change_precision", "change_recall",
                    "mode_flips")


def _ablation_cell(args) -> tuple[str, int, RunMetrics]:
    spec, variant, seed, overrides, out_dir = args
    scenario = spec.scenario(seed)
    cfg = vem_config_for(scenario, **{**overrides, "variant": variant})
    result = run_scenario(scenario, cfg)
    if out_dir is not None:
        cell = Path(out_dir) / variant / f"seed_{seed}"
        cell.mkdir(parents=True, exist_ok=True)
        write_outputs(result, cell)
    return variant, seed, result.metrics


def ablate(spec: AblationSpec, out_dir: Path | None = None, overrides: dict | None = None,
           jobs: int = 1) -> list[tuple]:
    """Run every (variant, seed) cell; returns table rows incl. medians."""
    cells = [(spec, v, s, dict(overrides or {}), out_dir) for v in spec.variants for s in spec.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_ablation_cell, cells))
    else:
        results = [_ablation_cell(c) for c in cells]
    rows = []
    for variant in spec.variants:
        ms = [m for v, _, m in results if v == variant]
        for v, seed, m in results:
            if v == variant:
                rows.append((variant, seed, m.ate, m.mpe, m.change_precision, m.change_recall,
                             m.mode_flips))
        rows.append((variant, "median", statistics.median(m.ate for m in ms),
                     statistics.median(m.mpe for m in ms),
                     statistics.median(m.change_precision for m in ms),
                     statistics.median(m.change_recall for m in ms),
                     statistics.median(m.mode_flips for m in ms)))
    if out_dir is not None:
        _write_csv(Path(out_dir) / "ablation.csv", ABLATION_COLUMNS, rows)
    return rows


# ---------------------------------------------------------------------------
# argument handling


def _load_config_file(path: str) -> tuple[sim.ScenarioConfig, dict]:
    """Scenario JSON with an optional ``vem`` section of pipeline options."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise vem.ConfigError([f"cannot read {path}: {exc.strerror}"]) from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise vem.ConfigError([f"not valid JSON: {exc}"]) from exc
    if not isinstance(d, dict):
        raise vem.ConfigError(["top-level JSON value must be an object"])
    overrides = d.pop("vem", {}) or {}
    scenario = sim.ScenarioConfig.from_dict(d).validate()
    if not isinstance(overrides, dict):
        raise vem.ConfigError(["'vem' section must be an object"])
    vem_config_for(scenario, **overrides)
    return scenario, overrides


def _scenario_from_args(args) -> tuple[sim.ScenarioConfig, dict]:
    if args.config:
        scenario, overrides = _load_config_file(args.config)
        if args.seed is not None:
            scenario = scenario.replace(seed=args.seed)
    else:
        scenario, overrides = sim.preset(args.preset, args.seed or 0), {}
    if args.em_iters is not None:
        overrides["em_iters"] = args.em_iters
    if args.window is not None:
        overrides["window"] = args.window
    if getattr(args, "variant", None):
        overrides["variant"] = args.variant
    return scenario, overrides


def _out_dir(path: str) -> Path:
    out = Path(path)
    if not out.is_dir():
        raise vem.ConfigError([f"output directory {path} does not exist"])
    if not os.access(out, os.W_OK):
        raise vem.ConfigError([f"output directory {path} is not writable"])
    return out


def _parse_seeds(text: str) -> tuple[int, ...]:
    seeds = []
    for part in text.split(","):
        if "-" in part.strip("-"):
            a, b = part.split("-", 1)
            seeds.extend(range(int(a), int(b) + 1))
        elif part:
            seeds.append(int(part))
    return tuple(seeds)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semistatic-vem",
                                description="Object-consistency SLAM on simulated 2D scenes.")
    sub = p.add_subparsers(dest="command", required=True)

    def scenario_args(sp):
        src = sp.add_mutually_exclusive_group(required=True)
        src.add_argument("--preset", choices=sorted(sim.PRESETS))
        src.add_argument("--config", metavar="JSON")
        sp.add_argument("--em-iters", type=int)
        sp.add_argument("--window", type=int)
        sp.add_argument("--out", required=True, metavar="DIR")

    run = sub.add_parser("run", help="run one scenario and write CSV outputs")
    scenario_args(run)
    run.add_argument("--seed", type=int)
    run.add_argument("--variant", choices=vem.VARIANTS)
    run.add_argument("--svg", action="store_true", help="also write frame-1 trace chart")
    run.add_argument("--dump-graph", action="store_true", help="write graph.txt per EM iteration")

    ab = sub.add_parser("ablate", help="compare pipeline variants over seeds")
    scenario_args(ab)
    ab.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    ab.add_argument("--seeds", type=_parse_seeds, default=tuple(range(20)),
                    help="e.g. 0-19 or 1,4,7 (default 0-19)")
    ab.add_argument("--variants", default="full,point_estimate",
                    help=f"comma separated subset of {','.join(vem.VARIANTS)}")
    ab.add_argument("--jobs", type=int, default=1)

    pr = sub.add_parser("preset", help="preset scenarios")
    pr.add_argument("action", choices=["list", "show"])
    pr.add_argument("name", nargs="?")

    va = sub.add_parser("validate", help="check a scenario JSON file")
    va.add_argument("config")
    return p


def _configure_logging() -> None:
    level = os.environ.get("SEMISTATIC_VEM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: Sequence[str] | None = None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return _dispatch(args)
    except vem.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # pipeline failure
        log.debug("pipeline failure", exc_info=True)
        print(f"pipeline failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def _dispatch(args) -> int:
    if args.command == "preset":
        if args.action == "list":
            for name in sorted(sim.PRESETS):
                print(name)
            return EXIT_OK
        if not args.name:
            raise vem.ConfigError(["preset show needs a name"])
        print(sim.preset(args.name).to_json())
        return EXIT_OK
    if args.command == "validate":
        scenario, overrides = _load_config_file(args.config)
        print(f"ok: {scenario.name}, {len(scenario.objects)} objects, "
              f"{scenario.n_frames} frames, {len(scenario.moves)} moves")
        return EXIT_OK
    out = _out_dir(args.out)
    scenario, overrides = _scenario_from_args(args)
    if args.command == "run":
        cfg = vem_config_for(scenario, **overrides)
        result = run_scenario(scenario, cfg, out / "graph.txt" if args.dump_graph else None)
        write_outputs(result, out, svg=args.svg)
        m = result.metrics
        print(f"ate={m.ate:.4f} mpe={m.mpe:.4f} precision={m.change_precision:.3f} "
              f"recall={m.change_recall:.3f} runtime={m.runtime:.2f}s")
        return EXIT_OK
    variants = tuple(v for v in args.variants.split(",") if v)
    if args.config:
        spec = AblationSpec(variants, args.seeds, config=scenario)
    else:
        spec = AblationSpec(variants, args.seeds, preset=args.preset)
    rows = ablate(spec, out, overrides, max(1, args.jobs))
    for row in rows:
        if row[1] == "median":
            print(f"{row[0]:>16s}  median ate={row[2]:.4f} mpe={row[3]:.4f} "
                  f"precision={row[4]:.3f} recall={row[5]:.3f} mode_flips={row[6]:g}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
