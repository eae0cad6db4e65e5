"""Per-pair geometry: focal recovery, robust relative pose, camera-induced
flow and the confident-static mask.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import cv2
import numpy as np
from scipy.optimize import least_squares

from .geom import (
    ConfidenceMap,
    DepthMap,
    FlowField,
    Intrinsics,
    Pointmap,
    PoseSE3,
    StaticMask,
    orthonormalize,
    pixel_grid,
)

log = logging.getLogger(__name__)

MIN_FOCAL_PIXELS = 32
SMOOTH_L1_BETA = 1.0


class EstimationError(RuntimeError):
    """Raised when focal estimation has too little or degenerate support."""


class PoseEstimationError(RuntimeError):
    """Raised when RANSAC cannot find a pose with enough inliers."""


@dataclass(frozen=True)
class PairEstimate:
    """Two pointmaps predicted for frames ``(t, t2)``, both in camera ``t`` coordinates."""

    pointmap_self: Pointmap
    pointmap_other: Pointmap
    conf_self: ConfidenceMap
    conf_other: ConfidenceMap
    frame_ids: tuple

    def __post_init__(self):
        sizes = {self.pointmap_self.size, self.pointmap_other.size, self.conf_self.size, self.conf_other.size}
        if len(sizes) != 1:
            raise ValueError("pair grids disagree on image size")
        if self.frame_ids[0] == self.frame_ids[1]:
            raise ValueError("pair frame ids must differ")

    @property
    def size(self):
        return self.pointmap_self.size


@dataclass(frozen=True)
class RansacParams:
    iterations: int = 200
    threshold: float = 2.0
    confidence_weighted: bool = True
    confidence: float = 0.999


@dataclass(frozen=True)
class RelativePoseResult:
    pose: PoseSE3
    inlier_mask: np.ndarray
    inlier_count: int
    failed: bool = False


def default_alpha(size) -> float:
    """Static-mask threshold: 1% of the image diagonal, in pixels."""
    return 0.01 * size.diagonal


# -- focal --------------------------------------------------------------------

def estimate_focal(pm: Pointmap, principal_point: Optional[tuple] = None,
                   max_iter: int = 50, tol: float = 1e-6) -> float:
    """Focal length of a pointmap expressed in its own camera frame.

    Minimizes ``sum_i ||p_i - f * q_i||`` where ``p_i`` is the pixel offset
    from the principal point and ``q_i = (x/z, y/z)``, by Weiszfeld
    reweighting from the median of the per-pixel closed-form focals.
    """
    size = pm.size
    if principal_point is None:
        principal_point = ((size.width - 1) / 2.0, (size.height - 1) / 2.0)
    pts = pm.points
    ok = pm.valid & (np.where(pm.valid, pts[..., 2], -1.0) > 0)
    if ok.sum() < MIN_FOCAL_PIXELS:
        raise EstimationError(f"need {MIN_FOCAL_PIXELS} valid pixels, got {int(ok.sum())}")

    pix = pixel_grid(size)[ok] - np.asarray(principal_point)
    p3 = pts[ok]
    q = p3[:, :2] / p3[:, 2:3]
    qn = np.linalg.norm(q, axis=1)
    pn = np.linalg.norm(pix, axis=1)
    usable = (qn > 1e-12) & (pn > 0)
    if not usable.any():
        raise EstimationError("all points lie on the optical axis")

    f = float(np.median(pn[usable] / qn[usable]))
    qq = (q * q).sum(axis=1)
    pq = (pix * q).sum(axis=1)
    for _ in range(max_iter):
        r = np.linalg.norm(pix - f * q, axis=1)
        w = 1.0 / np.maximum(r, 1e-8)
        f_new = float((w * pq).sum() / (w * qq).sum())
        if not f_new > 0:
            raise EstimationError("focal estimate became non-positive")
        done = abs(f_new - f) < tol * f
        f = f_new
        if done:
            break
    return f


# -- relative pose ------------------------------------------------------------

def _reproject(rvec, tvec, pts3d, k: Intrinsics):
    rot, _ = cv2.Rodrigues(rvec)
    cam = pts3d @ rot.T + tvec.reshape(3)
    z = cam[:, 2]
    zs = np.where(z > 0, z, 1.0)
    uv = np.stack([k.focal * cam[:, 0] / zs + k.cx, k.focal * cam[:, 1] / zs + k.cy], axis=1)
    return uv, z > 0


def _errors(rvec, tvec, pts3d, pix, k):
    uv, front = _reproject(rvec, tvec, pts3d, k)
    err = np.linalg.norm(uv - pix, axis=1)
    return np.where(front, err, np.inf)


def _refine(rvec, tvec, pts3d, pix, k, threshold):
    """Nonlinear refinement of the reprojection residual over the inliers.

    A Cauchy loss with scale ``threshold / 4`` keeps dynamic pixels that
    happen to land inside the inlier threshold from dragging the pose.
    """
    def residual(x):
        uv, _ = _reproject(x[:3], x[3:], pts3d, k)
        return (uv - pix).ravel()

    x0 = np.concatenate([rvec.ravel(), tvec.ravel()])
    sol = least_squares(residual, x0, method="trf", loss="cauchy", f_scale=0.25 * threshold,
                        xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=200)
    return sol.x[:3].copy(), sol.x[3:].copy()


def estimate_relative_pose(pair: PairEstimate, k_other: Intrinsics,
                           ransac: RansacParams = RansacParams(),
                           rng: Optional[np.random.Generator] = None) -> RelativePoseResult:
    """Pose of camera ``t2`` relative to camera ``t`` by RANSAC + PnP.

    Correspondences are the pixel grid of frame ``t2`` and the points of
    ``pointmap_other`` (frame ``t2`` geometry in camera ``t`` coordinates).
    The returned pose maps camera-``t`` coordinates into camera ``t2``.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    pm = pair.pointmap_other
    valid = pm.valid
    n = int(valid.sum())
    if n < 6:
        raise PoseEstimationError(f"need at least 6 valid points, got {n}")
    pts3d = pm.points[valid].astype(np.float64)
    pix = pixel_grid(pm.size)[valid]
    kmat = k_other.matrix()

    weights = None
    if ransac.confidence_weighted:
        c = pair.conf_other.values[valid]
        if c.sum() > 0:
            weights = c / c.sum()

    best_inl, best_count, best_model = None, -1, None
    needed = ransac.iterations
    it = 0
    while it < min(needed, ransac.iterations):
        it += 1
        idx = rng.choice(n, size=4, replace=False, p=weights)
        try:
            ok, rvec, tvec = cv2.solvePnP(pts3d[idx], pix[idx], kmat, None, flags=cv2.SOLVEPNP_SQPNP)
        except cv2.error:
            continue
        if not ok:
            continue
        err = _errors(rvec, tvec, pts3d, pix, k_other)
        inl = err < ransac.threshold
        count = int(inl.sum())
        if count > best_count:
            best_inl, best_count, best_model = inl, count, (rvec, tvec)
            ratio = count / n
            if ratio >= 1.0:
                needed = 0
            else:
                # log1p keeps tiny inlier ratios from rounding the denominator to zero
                denom = math.log1p(-ratio ** 4)
                if denom < 0:
                    needed = math.ceil(math.log(1 - ransac.confidence) / denom)

    if best_count < 4:
        raise PoseEstimationError(f"only {max(best_count, 0)} inliers after {it} iterations")

    rvec, tvec = best_model
    inl = best_inl
    for _ in range(2):
        rvec, tvec = _refine(rvec, tvec, pts3d[inl], pix[inl], k_other, ransac.threshold)
        new_inl = _errors(rvec, tvec, pts3d, pix, k_other) < ransac.threshold
        if new_inl.sum() < 4:
            break
        same = np.array_equal(new_inl, inl)
        inl = new_inl
        if same:
            break

    rot, _ = cv2.Rodrigues(rvec)
    mask = np.zeros(pm.size.shape, dtype=bool)
    mask[valid] = inl
    return RelativePoseResult(PoseSE3(orthonormalize(rot), tvec.ravel()), mask, int(mask.sum()))


# -- flow and masks -----------------------------------------------------------

def induced_flow(depth_t: DepthMap, k_t: Intrinsics, k_t2: Intrinsics, rel: PoseSE3) -> FlowField:
    """Flow caused by camera motion alone: backproject, move the camera, reproject."""
    grid = pixel_grid(depth_t.size)
    d = np.where(depth_t.valid, depth_t.depth, 1.0)
    ray = np.stack([(grid[..., 0] - k_t.cx) / k_t.focal, (grid[..., 1] - k_t.cy) / k_t.focal,
                    np.ones(depth_t.size.shape)], axis=-1)
    cam2 = d[..., None] * (ray @ rel.rotation.T) + rel.translation
    z = cam2[..., 2]
    valid = depth_t.valid & (z > 0)
    zs = np.where(valid, z, 1.0)
    uv = np.stack([k_t2.focal * cam2[..., 0] / zs + k_t2.cx, k_t2.focal * cam2[..., 1] / zs + k_t2.cy], axis=-1)
    return FlowField(np.where(valid[..., None], uv - grid, np.nan), valid)


def smooth_l1(residual: np.ndarray, beta: float = SMOOTH_L1_BETA) -> np.ndarray:
    """Smooth-L1 of 2-vectors, applied per component and summed over the last axis."""
    a = np.abs(residual)
    per = np.where(a < beta, 0.5 * a * a / beta, a - 0.5 * beta)
    return per.sum(axis=-1)


def static_mask(f_cam: FlowField, f_est: FlowField, alpha: float, beta: float = SMOOTH_L1_BETA) -> StaticMask:
    """Pixels whose estimated flow is explained by camera motion.

    Pixels where either flow is invalid are never marked static.
    """
    if f_cam.size != f_est.size:
        raise ValueError("flow fields disagree on image size")
    both = f_cam.valid & f_est.valid
    cost = smooth_l1(f_cam.flow - f_est.flow, beta)
    return StaticMask(both & (alpha > cost))


# -- whole-graph driver -------------------------------------------------------

@dataclass
class PairwiseResult:
    focals: dict
    poses: dict
    masks: dict
    failed_edges: list = field(default_factory=list)


def _edge_rng(seed: int, edge) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, int(edge[0]), int(edge[1])]))


def estimate_frame_focals(graph, pairs: Mapping, shared_focal: bool = False) -> dict:
    """Median self-pointmap focal per frame; frames never seen as a pair's
    first frame borrow the nearest frame's value."""
    per_frame = {}
    for e in graph.edges:
        try:
            f = estimate_focal(pairs[e].pointmap_self)
        except EstimationError as exc:
            log.warning("focal estimation failed on edge %s: %s", e, exc)
            continue
        per_frame.setdefault(e[0], []).append(f)
    if not per_frame:
        raise EstimationError("no edge produced a focal estimate")
    focals = {t: float(np.median(v)) for t, v in per_frame.items()}
    if shared_focal:
        shared = float(np.median([x for v in per_frame.values() for x in v]))
        return {t: shared for t in range(graph.num_frames)}
    known = sorted(focals)
    for t in range(graph.num_frames):
        if t not in focals:
            nearest = min(known, key=lambda s: (abs(s - t), s))
            focals[t] = focals[nearest]
    return focals


def analyze_pairs(graph, pairs: Mapping, flows: Optional[Mapping] = None,
                  ransac: RansacParams = RansacParams(), alpha: Optional[float] = None,
                  seed: int = 0, shared_focal: bool = False) -> PairwiseResult:
    """Run focal, pose and static-mask estimation over every graph edge."""
    first = pairs[graph.edges[0]]
    size = first.size
    if alpha is None:
        alpha = default_alpha(size)
    focals = estimate_frame_focals(graph, pairs, shared_focal)
    ks = {t: Intrinsics(f, size) for t, f in focals.items()}

    poses, masks, failed = {}, {}, []
    for e in graph.edges:
        t, t2 = e
        try:
            poses[e] = estimate_relative_pose(pairs[e], ks[t2], ransac, _edge_rng(seed, e))
        except PoseEstimationError as exc:
            log.warning("relative pose failed on edge %s: %s", e, exc)
            poses[e] = RelativePoseResult(PoseSE3.identity(), np.zeros(size.shape, bool), 0, failed=True)
            failed.append(e)
        if flows is not None and e in flows:
            if poses[e].failed:
                masks[e] = StaticMask(np.zeros(size.shape, bool))
                continue
            pm = pairs[e].pointmap_self
            depth = DepthMap(np.where(pm.valid, pm.points[..., 2], np.nan), pm.valid)
            f_cam = induced_flow(depth, ks[t], ks[t2], poses[e].pose)
            masks[e] = static_mask(f_cam, flows[e], alpha)
    return PairwiseResult(focals, poses, masks, failed)
