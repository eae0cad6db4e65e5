"""``dynrecon`` command-line entry point.

Scene directory layout written by ``synth`` and read by ``align``::

    config.txt                    run configuration used to render
    intrinsics.txt                key-value intrinsics (one focal per frame)
    poses_gt.tum                  camera-to-world ground truth
    pairs/TTTT_SSSS_{self,other,conf_self,conf_other}.pmg
    flows/TTTT_SSSS.pmg           2-channel flow with validity plane
    depth_gt/TTTT.pmg             ground-truth depth
    mask_gt/TTTT.pmg              ground-truth dynamic mask (1 = dynamic)

Result directory written by ``align``: ``trajectory.tum``, ``intrinsics.txt``,
``depth/TTTT.pmg``, ``masks/TTTT.pmg``, ``pointcloud.ply`` and ``loss.csv``.

Log verbosity follows the ``DYNRECON_LOG_LEVEL`` environment variable.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..evalkit import EvaluationError, Trajectory, ate, evaluate_depth, rpe, umeyama_sim3
from ..geom import (ConfidenceMap, DepthMap, ImageSize, Intrinsics, Pointmap,
                    pointmap_from_depth)
from ..graph import build_window_graph
from ..optim import InitializationError, OptimizationError, run_global_optimization
from ..oracle import SceneError, make_scene, render_sequence
from ..pairwise import (EstimationError, PairEstimate, PoseEstimationError, default_alpha,
                        estimate_focal, estimate_relative_pose, induced_flow, static_mask)
from .config import ConfigError, RunConfig, load_config
from .formats import (FormatError, Grid, depth_to_grid, flow_to_grid, grid_from_csv, grid_to_csv,
                      grid_to_depth, grid_to_flow, read_grid, read_intrinsics, read_tum, write_grid,
                      write_intrinsics, write_loss_csv, write_ply, write_tum, format_key_values)

log = logging.getLogger("dynrecon")

LOG_ENV = "DYNRECON_LOG_LEVEL"
STATIC_RGB = (160, 160, 160)
DYNAMIC_RGB = (220, 40, 40)


class InputError(RuntimeError):
    """Missing or malformed input; the message names the offending path."""


# -- file naming --------------------------------------------------------------

def edge_stem(edge) -> str:
    return f"{edge[0]:04d}_{edge[1]:04d}"


def frame_stem(t: int) -> str:
    return f"{t:04d}"


def pointmap_to_grid(pm: Pointmap) -> Grid:
    return Grid(np.where(pm.valid[..., None], pm.points, np.nan), pm.valid)


def grid_to_pointmap(grid: Grid, name: str) -> Pointmap:
    if grid.data.shape[2] != 3:
        raise InputError(f"{name}: pointmap needs 3 channels, found {grid.data.shape[2]}")
    pts = grid.data.astype(np.float64)
    if grid.valid is not None:
        pts = np.where(grid.valid[..., None], pts, np.nan)
    return Pointmap(pts)


def mask_to_grid(mask: np.ndarray, valid: Optional[np.ndarray] = None) -> Grid:
    return Grid(np.asarray(mask, dtype=np.float32), valid)


def _read(path: Path) -> Grid:
    if not path.is_file():
        raise InputError(f"{path}: missing input file")
    return read_grid(path)


# -- scene directories --------------------------------------------------------

def write_scene(root: Path, seq, cfg: RunConfig) -> None:
    for sub in ("pairs", "flows", "depth_gt", "mask_gt"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    (root / "config.txt").write_text(cfg.to_text())
    size = seq.spec.resolution
    write_intrinsics(root / "intrinsics.txt", [k.focal for k in seq.intrinsics], size.height, size.width,
                     seq.intrinsics[0].principal_point)
    write_tum(root / "poses_gt.tum", [float(t) for t in range(len(seq.poses))],
              [p.inverse() for p in seq.poses])
    for e in seq.graph.edges:
        pair = seq.pairs[e]
        stem = edge_stem(e)
        write_grid(root / "pairs" / f"{stem}_self.pmg", pointmap_to_grid(pair.pointmap_self))
        write_grid(root / "pairs" / f"{stem}_other.pmg", pointmap_to_grid(pair.pointmap_other))
        write_grid(root / "pairs" / f"{stem}_conf_self.pmg", Grid(pair.conf_self.values))
        write_grid(root / "pairs" / f"{stem}_conf_other.pmg", Grid(pair.conf_other.values))
        write_grid(root / "flows" / f"{stem}.pmg", flow_to_grid(seq.flows[e]))
    for t, frame in enumerate(seq.frames):
        write_grid(root / "depth_gt" / f"{frame_stem(t)}.pmg", depth_to_grid(frame.depth))
        write_grid(root / "mask_gt" / f"{frame_stem(t)}.pmg", mask_to_grid(frame.dynamic))


def load_scene_inputs(root: Path, cfg: RunConfig):
    """Graph, pairs and flows of a scene directory, checked against the configured graph."""
    if not root.is_dir():
        raise InputError(f"{root}: input directory does not exist")
    intr_path = root / "intrinsics.txt"
    if not intr_path.is_file():
        raise InputError(f"{intr_path}: missing input file")
    intr = read_intrinsics(intr_path)
    n = len(intr["focals"])
    size = ImageSize(intr["height"], intr["width"])
    try:
        graph = build_window_graph(n, cfg.window, cfg.stride, cfg.symmetric)
    except ValueError as exc:
        raise InputError(f"{intr_path}: cannot build a graph for {n} frames: {exc}") from None
    pairs, flows = {}, {}
    for e in graph.edges:
        stem = edge_stem(e)
        grids = {}
        for part in ("self", "other", "conf_self", "conf_other"):
            path = root / "pairs" / f"{stem}_{part}.pmg"
            grids[part] = (_read(path), path)
            if grids[part][0].data.shape[:2] != size.shape:
                raise InputError(f"{path}: grid size {grids[part][0].data.shape[:2]} != {size.shape}")
        try:
            pairs[e] = PairEstimate(
                grid_to_pointmap(*grids["self"]), grid_to_pointmap(*grids["other"]),
                ConfidenceMap(grids["conf_self"][0].data[..., 0].astype(np.float64)),
                ConfidenceMap(grids["conf_other"][0].data[..., 0].astype(np.float64)), e)
        except ValueError as exc:
            raise InputError(f"{root / 'pairs' / stem}_*.pmg: {exc}") from None
        flow_path = root / "flows" / f"{stem}.pmg"
        try:
            flows[e] = grid_to_flow(_read(flow_path))
        except FormatError as exc:
            raise InputError(f"{flow_path}: {exc}") from None
    return graph, pairs, flows


def fused_cloud(result) -> tuple[np.ndarray, np.ndarray]:
    pts, cols = [], []
    for depth, k, pose, dyn in zip(result.depths, result.intrinsics, result.poses, result.dynamic_masks):
        pm = pointmap_from_depth(depth, k, pose)
        ok = pm.valid
        pts.append(pm.points[ok])
        c = np.where(dyn[ok][:, None], DYNAMIC_RGB, STATIC_RGB)
        cols.append(c)
    return np.concatenate(pts), np.concatenate(cols).astype(np.uint8)


def write_result(out: Path, result) -> None:
    (out / "depth").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    n = len(result.poses)
    write_tum(out / "trajectory.tum", [float(t) for t in range(n)], [p.inverse() for p in result.poses])
    size = result.state.size
    write_intrinsics(out / "intrinsics.txt", [k.focal for k in result.intrinsics], size.height, size.width)
    for t in range(n):
        write_grid(out / "depth" / f"{frame_stem(t)}.pmg", depth_to_grid(result.depths[t]))
        write_grid(out / "masks" / f"{frame_stem(t)}.pmg", mask_to_grid(result.dynamic_masks[t]))
    write_ply(out / "pointcloud.ply", *fused_cloud(result))
    write_loss_csv(out / "loss.csv", result.loss_trace)


# -- commands -----------------------------------------------------------------

def cmd_synth(cfg: RunConfig, output: Path) -> int:
    scene = make_scene(cfg.scene_preset, num_frames=cfg.scene_frames, height=cfg.scene_height,
                       width=cfg.scene_width, focal=cfg.scene_focal, dynamic=cfg.scene_dynamic,
                       depth_sigma=cfg.scene_depth_sigma, confidence_floor=cfg.scene_confidence_floor,
                       seed=cfg.seed)
    graph = build_window_graph(scene.num_frames, cfg.window, cfg.stride, cfg.symmetric)
    seq = render_sequence(scene, graph, dynamic_pairs=cfg.scene_dynamic_pairs)
    write_scene(output, seq, cfg)
    log.info("wrote %d frames and %d edges to %s", scene.num_frames, len(graph.edges), output)
    return 0


def cmd_align(cfg: RunConfig, input_dir: Path, output: Path) -> int:
    graph, pairs, flows = load_scene_inputs(input_dir, cfg)
    result = run_global_optimization(graph, pairs, flows, cfg.schedule(), seed=cfg.seed,
                                     ransac=cfg.ransac(), alpha=cfg.alpha)
    write_result(output, result)
    last = result.loss_trace[-1]
    print(format_key_values({"frames": graph.num_frames, "edges": len(graph.edges),
                             "iterations": cfg.iterations, "final_loss": repr(last.total),
                             "output": str(output)}), end="")
    return 0


def _trajectory(path: Path) -> Trajectory:
    if not path.is_file():
        raise InputError(f"{path}: missing input file")
    stamps, poses = read_tum(path)
    return Trajectory(tuple(range(len(poses))), tuple(poses))


def cmd_eval_pose(pred_path: Path, gt_path: Path, delta: int, output: Optional[Path]) -> int:
    pred, gt = _trajectory(pred_path), _trajectory(gt_path)
    if len(pred) != len(gt):
        raise InputError(f"{pred_path}: {len(pred)} poses but {gt_path} has {len(gt)}")
    rpe_t, rpe_r = rpe(pred, gt, delta)
    report = {"frames": len(gt), "ate": repr(ate(pred, gt)), "rpe_trans": repr(rpe_t),
              "rpe_rot_deg": repr(rpe_r), "sim3_scale": repr(umeyama_sim3(pred, gt).scale),
              "delta": delta}
    return _emit(report, output)


def _depth_dir(path: Path) -> dict:
    if not path.is_dir():
        raise InputError(f"{path}: not a directory")
    files = sorted(path.glob("*.pmg"))
    if not files:
        raise InputError(f"{path}: no .pmg depth files")
    return {f.name: f for f in files}


def cmd_eval_depth(pred_dir: Path, gt_dir: Path, mode: str, output: Optional[Path]) -> int:
    gt_files = _depth_dir(gt_dir)
    pred_files = _depth_dir(pred_dir)
    gts, preds = [], []
    for name, gpath in gt_files.items():
        if name not in pred_files:
            raise InputError(f"{pred_dir / name}: missing prediction for ground-truth frame")
        gts.append(grid_to_depth(read_grid(gpath)))
        preds.append(grid_to_depth(read_grid(pred_files[name])))
    rep = evaluate_depth(preds, gts, mode)
    report = {"frames": len(gts), "align": mode, "abs_rel": repr(rep.abs_rel),
              "delta_125": repr(rep.delta_125), "scale": repr(float(rep.scale)),
              "shift": repr(float(rep.shift)), "pixels": rep.pixel_count}
    return _emit(report, output)


def cmd_mask(self_path: Path, other_path: Path, flow_path: Path, output: Path, alpha: Optional[float],
             focal_other: Optional[float], cfg: RunConfig) -> int:
    pm_self = grid_to_pointmap(_read(self_path), str(self_path))
    pm_other = grid_to_pointmap(_read(other_path), str(other_path))
    flow = grid_to_flow(_read(flow_path))
    size = pm_self.size
    if pm_other.size != size or flow.flow.shape[:2] != size.shape:
        raise InputError(f"{other_path}: grid sizes of the pair and flow disagree")
    ones = ConfidenceMap(np.ones(size.shape))
    pair = PairEstimate(pm_self, pm_other, ones, ones, (0, 1))
    k_t = Intrinsics(estimate_focal(pm_self), size)
    k_t2 = k_t.with_focal(focal_other) if focal_other is not None else k_t
    rel = estimate_relative_pose(pair, k_t2, cfg.ransac(), np.random.default_rng(cfg.seed))
    depth = DepthMap(np.where(pm_self.valid, pm_self.points[..., 2], np.nan), pm_self.valid)
    alpha = default_alpha(size) if alpha is None else alpha
    mask = static_mask(induced_flow(depth, k_t, k_t2, rel.pose), flow, alpha)
    write_grid(output, mask_to_grid(mask.is_static, flow.valid))
    valid = flow.valid
    report = {"focal": repr(k_t.focal), "alpha": repr(float(alpha)), "pnp_inliers": rel.inlier_count,
              "valid_pixels": int(valid.sum()),
              "static_fraction": repr(float(mask.is_static[valid].mean()) if valid.any() else 0.0),
              "output": str(output)}
    return _emit(report, None)


def cmd_convert(src: Path, dst: Path) -> int:
    if src.suffix == ".pmg" and dst.suffix == ".csv":
        grid_to_csv(read_grid(src), dst)
    elif src.suffix == ".csv" and dst.suffix == ".pmg":
        if not src.is_file():
            raise InputError(f"{src}: missing input file")
        write_grid(dst, grid_from_csv(src))
    else:
        raise InputError(f"{src}: convert needs .pmg -> .csv or .csv -> .pmg")
    return 0


def _emit(report: dict, output: Optional[Path]) -> int:
    text = format_key_values(report)
    if output is not None:
        output.write_text(text)
    sys.stdout.write(text)
    return 0


# -- argument handling --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value run configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--window", type=int)
    common.add_argument("--stride", type=int)
    common.add_argument("--iterations", type=int)
    common.add_argument("--alpha", type=float, help="static-mask threshold in pixels")
    common.add_argument("--align", dest="align_mode",
                        choices=["scale_shift", "scale", "per_frame_median", "none"])

    parser = argparse.ArgumentParser(prog="dynrecon", description="Dynamic-scene reconstruction from pairwise pointmaps.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic oracle scene directory")
    p.add_argument("output", nargs="?", type=Path)

    p = sub.add_parser("align", parents=[common], help="optimize a scene directory")
    p.add_argument("input", nargs="?", type=Path)
    p.add_argument("output", nargs="?", type=Path)

    p = sub.add_parser("eval-pose", parents=[common], help="ATE and RPE between TUM trajectories")
    p.add_argument("pred", type=Path)
    p.add_argument("gt", type=Path)
    p.add_argument("--delta", type=int, default=1)
    p.add_argument("--output", type=Path)

    p = sub.add_parser("eval-depth", parents=[common], help="Abs Rel and delta<1.25 between depth directories")
    p.add_argument("pred", type=Path)
    p.add_argument("gt", type=Path)
    p.add_argument("--output", type=Path)

    p = sub.add_parser("mask", parents=[common], help="static mask for one pair")
    p.add_argument("--self", dest="self_path", type=Path, required=True)
    p.add_argument("--other", dest="other_path", type=Path, required=True)
    p.add_argument("--flow", dest="flow_path", type=Path, required=True)
    p.add_argument("--focal-other", type=float)
    p.add_argument("output", type=Path)

    p = sub.add_parser("convert", parents=[common], help="convert between .pmg and .csv")
    p.add_argument("src", type=Path)
    p.add_argument("dst", type=Path)
    return parser


def _configure_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _run(args, parser, cfg: RunConfig) -> int:
    if args.command == "synth":
        out = args.output or (Path(cfg.output) if cfg.output else None)
        if out is None:
            parser.error("synth needs an output directory")
        return cmd_synth(cfg, out)
    if args.command == "align":
        inp = args.input or (Path(cfg.input) if cfg.input else None)
        out = args.output or (Path(cfg.output) if cfg.output else None)
        if inp is None or out is None:
            parser.error("align needs an input and an output directory")
        return cmd_align(cfg, inp, out)
    if args.command == "eval-pose":
        return cmd_eval_pose(args.pred, args.gt, args.delta, args.output)
    if args.command == "eval-depth":
        return cmd_eval_depth(args.pred, args.gt, cfg.align_mode, args.output)
    if args.command == "mask":
        return cmd_mask(args.self_path, args.other_path, args.flow_path, args.output, cfg.alpha,
                        args.focal_other, cfg)
    return cmd_convert(args.src, args.dst)


def main(argv: Optional[Sequence[str]] = None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        import torch

        torch.set_num_threads(1)
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = cfg.updated(seed=args.seed, window=args.window, stride=args.stride,
                          iterations=args.iterations, alpha=args.alpha, align_mode=args.align_mode)
        return _run(args, parser, cfg)
    except (InputError, FormatError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OptimizationError as exc:
        print(f"error: optimization aborted: {exc}", file=sys.stderr)
        return 3
    except (InitializationError, EstimationError, PoseEstimationError, EvaluationError, SceneError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
