"""Trajectory and depth evaluation.

Trajectories hold camera-to-world poses (the camera position is the pose
translation), matching the TUM file convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geom import DepthMap, PoseSE3, Sim3, rotation_angle


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class Trajectory:
    frame_ids: tuple
    poses: tuple  # camera-to-world PoseSE3

    def __post_init__(self):
        ids = tuple(self.frame_ids)
        if len(ids) != len(self.poses):
            raise ValueError("frame_ids and poses differ in length")
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError("frame ids must be strictly increasing")
        object.__setattr__(self, "frame_ids", ids)
        object.__setattr__(self, "poses", tuple(self.poses))

    @classmethod
    def from_extrinsics(cls, extrinsics: Sequence[PoseSE3], frame_ids=None) -> "Trajectory":
        if frame_ids is None:
            frame_ids = range(len(extrinsics))
        return cls(tuple(frame_ids), tuple(p.inverse() for p in extrinsics))

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def subsample(self, count: int = 90, stride: int = 3) -> "Trajectory":
        """First ``count`` frames taken every ``stride`` frames."""
        idx = list(range(0, min(count, len(self)), stride))
        return Trajectory(tuple(self.frame_ids[i] for i in idx), tuple(self.poses[i] for i in idx))


def subsample_sequence(items: Sequence, count: int = 90, stride: int = 3) -> list:
    return list(items[:count:stride])


@dataclass(frozen=True)
class DepthEvalReport:
    abs_rel: float
    delta_125: float
    scale: float
    shift: float
    pixel_count: int


def _check_pair(pred: Trajectory, gt: Trajectory) -> None:
    if len(pred) != len(gt):
        raise EvaluationError(f"trajectory lengths differ: {len(pred)} vs {len(gt)}")


def umeyama_sim3(pred: Trajectory, gt: Trajectory) -> Sim3:
    """Similarity ``S`` minimizing ``sum ||gt_i - S(pred_i)||^2`` over camera positions."""
    _check_pair(pred, gt)
    return umeyama_points(pred.positions, gt.positions)


def umeyama_points(src: np.ndarray, dst: np.ndarray) -> Sim3:
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 3:
        raise EvaluationError("need at least 3 positions")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = (xs ** 2).sum() / len(src)
    cov = xd.T @ xs / len(src)
    u, d, vt = np.linalg.svd(cov)
    if var_s <= 1e-300 or d[1] <= 1e-12 * max(d[0], 1e-300):
        raise EvaluationError("positions are degenerate (collinear or coincident)")
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    rot = u @ s @ vt
    scale = np.trace(np.diag(d) @ s) / var_s
    trans = mu_d - scale * rot @ mu_s
    return Sim3(scale, rot, trans)


def ate(pred: Trajectory, gt: Trajectory) -> float:
    """RMSE of camera positions after Sim(3) alignment of the prediction."""
    sim = umeyama_sim3(pred, gt)
    err = gt.positions - sim.apply(pred.positions)
    return float(np.sqrt((err ** 2).sum(axis=1).mean()))


def rpe(pred: Trajectory, gt: Trajectory, delta: int = 1) -> tuple[float, float]:
    """Relative pose error ``(translation RMSE, rotation RMSE in degrees)``.

    Predicted translations are first multiplied by the Umeyama scale.
    """
    _check_pair(pred, gt)
    if len(gt) <= delta:
        raise EvaluationError(f"trajectory of length {len(gt)} too short for delta={delta}")
    scale = umeyama_sim3(pred, gt).scale
    p = [PoseSE3(x.rotation, scale * x.translation) for x in pred.poses]
    g = gt.poses
    trans, rot = [], []
    for i in range(len(g) - delta):
        rel_g = g[i].inverse().compose(g[i + delta])
        rel_p = p[i].inverse().compose(p[i + delta])
        e = rel_g.inverse().compose(rel_p)
        trans.append(np.linalg.norm(e.translation))
        rot.append(np.degrees(rotation_angle(e.rotation)))
    trans, rot = np.array(trans), np.array(rot)
    return float(np.sqrt((trans ** 2).mean())), float(np.sqrt((rot ** 2).mean()))


# -- depth --------------------------------------------------------------------

def _overlap(pred: Sequence[DepthMap], gt: Sequence[DepthMap]) -> list:
    if len(pred) != len(gt):
        raise EvaluationError("depth sequences differ in length")
    masks = []
    for i, (p, g) in enumerate(zip(pred, gt)):
        if p.depth.shape != g.depth.shape:
            raise EvaluationError(f"frame {i}: shape mismatch")
        m = p.valid & g.valid
        if not m.any():
            raise EvaluationError(f"frame {i}: no valid overlapping pixels")
        masks.append(m)
    return masks


def align_depth(pred: Sequence[DepthMap], gt: Sequence[DepthMap], mode: str = "scale_shift"):
    """Align predicted depth to ground truth.

    Modes: ``scale_shift`` (one least-squares ``(s, b)`` per sequence),
    ``scale`` (one least-squares ``s``), ``per_frame_median`` and ``none``.

    Returns:
        ``(aligned, params)`` where ``params`` is ``{"scale", "shift"}``; for
        the per-frame mode ``scale`` is a list.
    """
    masks = _overlap(pred, gt)
    if mode == "none":
        return list(pred), {"scale": 1.0, "shift": 0.0}
    if mode == "per_frame_median":
        out, scales = [], []
        for p, g, m in zip(pred, gt, masks):
            s = float(np.median(g.depth[m]) / np.median(p.depth[m]))
            scales.append(s)
            out.append(DepthMap(p.depth * s, p.valid))
        return out, {"scale": scales, "shift": 0.0}
    x = np.concatenate([p.depth[m] for p, m in zip(pred, masks)])
    y = np.concatenate([g.depth[m] for g, m in zip(gt, masks)])
    if mode == "scale":
        s, b = float(x @ y / (x @ x)), 0.0
    elif mode == "scale_shift":
        a = np.stack([x, np.ones_like(x)], axis=1)
        (s, b), *_ = np.linalg.lstsq(a, y, rcond=None)
        s, b = float(s), float(b)
    else:
        raise ValueError(f"unknown alignment mode {mode!r}")
    return [DepthMap(p.depth * s + b, p.valid) for p in pred], {"scale": s, "shift": b}


def depth_metrics(pred_aligned: Sequence[DepthMap], gt: Sequence[DepthMap], valid_mask=None,
                  scale: float = 1.0, shift: float = 0.0) -> DepthEvalReport:
    """Abs Rel and the ``delta < 1.25`` inlier ratio over valid pixels."""
    if isinstance(pred_aligned, DepthMap):
        pred_aligned, gt = [pred_aligned], [gt]
        if valid_mask is not None:
            valid_mask = [valid_mask]
    if len(pred_aligned) != len(gt):
        raise EvaluationError("depth sequences differ in length")
    ps, gs = [], []
    for i, (p, g) in enumerate(zip(pred_aligned, gt)):
        # aligned predictions may turn non-positive; they stay in and count as outliers
        m = g.valid & np.isfinite(p.depth)
        if valid_mask is not None:
            m &= np.asarray(valid_mask[i], bool)
        ps.append(p.depth[m])
        gs.append(g.depth[m])
    p = np.concatenate(ps)
    g = np.concatenate(gs)
    if p.size == 0:
        raise EvaluationError("no valid pixels to evaluate")
    abs_rel = float(np.mean(np.abs(p - g) / g))
    with np.errstate(divide="ignore"):
        ratio = np.where(p > 0, np.maximum(p / g, g / np.where(p > 0, p, 1.0)), np.inf)
    delta = float(np.mean(ratio < 1.25))
    return DepthEvalReport(abs_rel, delta, scale, shift, int(p.size))


def evaluate_depth(pred: Sequence[DepthMap], gt: Sequence[DepthMap], mode: str = "scale_shift") -> DepthEvalReport:
    aligned, params = align_depth(pred, gt, mode)
    s = params["scale"]
    s = float(np.mean(s)) if isinstance(s, list) else s
    return depth_metrics(aligned, gt, scale=s, shift=params["shift"])
