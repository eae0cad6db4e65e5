"""Procedural dynamic scenes with exact ground truth.

Scenes are built from analytic surfaces (planes and spheres) so depth,
correspondence and occlusion are computed in closed form by ray casting.
The products stand in for a pairwise pointmap network: for every graph
edge ``(t, t2)`` the sequence carries the two pointmaps in frame ``t``'s
camera coordinates, their confidences and the ground-truth flow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from .geom import (
    ConfidenceMap,
    DepthMap,
    FlowField,
    ImageSize,
    Intrinsics,
    Pointmap,
    PoseSE3,
    camera_points,
    pixel_grid,
)
from .graph import VideoGraph
from .pairwise import PairEstimate

_HIT_RTOL = 1e-7


class SceneError(ValueError):
    """Raised when a scene description cannot be rendered."""


@dataclass(frozen=True)
class Plane:
    point: tuple
    normal: tuple


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float


@dataclass(frozen=True)
class LinearMotion:
    start: tuple
    velocity: tuple  # scene units per frame

    def center(self, frame: float) -> np.ndarray:
        return np.asarray(self.start, float) + frame * np.asarray(self.velocity, float)


@dataclass(frozen=True)
class CircularMotion:
    """Center moving on a circle in the plane spanned by ``axis_u`` and ``axis_v``."""

    pivot: tuple
    radius: float
    angular_speed: float  # radians per frame
    phase: float = 0.0
    axis_u: tuple = (1.0, 0.0, 0.0)
    axis_v: tuple = (0.0, 0.0, 1.0)

    def center(self, frame: float) -> np.ndarray:
        a = self.phase + self.angular_speed * frame
        return (
            np.asarray(self.pivot, float)
            + self.radius * math.cos(a) * np.asarray(self.axis_u, float)
            + self.radius * math.sin(a) * np.asarray(self.axis_v, float)
        )


@dataclass(frozen=True)
class DynamicSphere:
    radius: float
    motion: Union[LinearMotion, CircularMotion]


@dataclass(frozen=True)
class NoiseSpec:
    depth_sigma: float = 0.0
    confidence_floor: float = 0.05


@dataclass(frozen=True)
class SceneSpec:
    static_surfaces: tuple
    dynamic_objects: tuple
    camera_poses: tuple  # per-frame extrinsics (world -> camera)
    intrinsics: Intrinsics
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0

    def __post_init__(self):
        if not self.static_surfaces and not self.dynamic_objects:
            raise SceneError("scene needs at least one surface")
        if len(self.camera_poses) < 1:
            raise SceneError("scene needs at least one camera pose")

    @property
    def num_frames(self) -> int:
        return len(self.camera_poses)

    @property
    def resolution(self) -> ImageSize:
        return self.intrinsics.size


# -- camera trajectories ------------------------------------------------------

def look_at(center, target, down=(0.0, 1.0, 0.0)) -> PoseSE3:
    """Extrinsic of a camera at ``center`` looking at ``target`` with image-y along ``down``."""
    c = np.asarray(center, float)
    z = np.asarray(target, float) - c
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(down, float), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    r_c2w = np.stack([x, y, z], axis=1)
    return PoseSE3(r_c2w.T, -r_c2w.T @ c)


def path_length(poses: Sequence[PoseSE3]) -> float:
    centers = np.array([p.center for p in poses])
    return float(np.linalg.norm(np.diff(centers, axis=0), axis=1).sum())


def camera_trajectory(preset: str, num_frames: int, target=(0.0, 0.0, 4.0)) -> list[PoseSE3]:
    """Nominal (un-normalized) camera extrinsics for a named preset.

    ``static`` keeps the camera fixed; ``dolly`` moves forward with a lateral
    drift; ``orbit`` circles ``target``; ``arc`` follows a circular path
    while looking along its tangent; ``dolly_orbit`` orbits while closing in.
    """
    target = np.asarray(target, float)
    s = np.linspace(0.0, 1.0, num_frames)
    poses = []
    for u in s:
        if preset == "static":
            poses.append(PoseSE3.identity())
        elif preset == "dolly":
            c = np.array([0.5 * u, -0.1 * u, 1.0 * u])
            poses.append(look_at(c, c + np.array([0.05, 0.0, 1.0])))
        elif preset == "orbit":
            phi = -0.15 + 0.3 * u
            radius = float(target[2])
            c = target + radius * np.array([math.sin(phi), 0.0, -math.cos(phi)])
            poses.append(look_at(c, target))
        elif preset == "dolly_orbit":
            phi = -0.2 + 0.4 * u
            radius = float(target[2]) * (1.0 - 0.15 * u)
            c = target + radius * np.array([math.sin(phi), -0.1 * u, -math.cos(phi)])
            poses.append(look_at(c, target))
        elif preset == "arc":
            phi = 0.3 * u
            c = np.array([2.0 * (1 - math.cos(phi)), 0.0, 2.0 * math.sin(phi)])
            heading = np.array([math.sin(phi), 0.0, math.cos(phi)])
            poses.append(look_at(c, c + heading))
        else:
            raise SceneError(f"unknown camera preset {preset!r}")
    return poses


def _scale_pose(pose: PoseSE3, s: float) -> PoseSE3:
    return PoseSE3(pose.rotation, s * pose.translation)


def make_scene(
    preset: str = "dolly_orbit",
    num_frames: int = 30,
    height: int = 48,
    width: int = 64,
    focal: float = 60.0,
    dynamic: bool = True,
    depth_sigma: float = 0.0,
    confidence_floor: float = 0.05,
    seed: int = 0,
    keyframes: Optional[Sequence[PoseSE3]] = None,
    normalize: bool = True,
    dynamic_radius: float = 0.75,
) -> SceneSpec:
    """Standard test scene: ground, back wall, two static spheres and optionally
    one moving sphere covering roughly a fifth of the image (``dynamic_radius``
    in un-normalized scene units sets its size).

    With ``normalize`` the whole world is rescaled so the camera path has unit
    length (no-op for a static camera).
    """
    size = ImageSize(height, width)
    k = Intrinsics(float(focal), size)
    if keyframes is not None:
        poses = list(keyframes)
    else:
        poses = camera_trajectory(preset, num_frames)
    length = path_length(poses) if len(poses) > 1 else 0.0
    s = 1.0 / length if (normalize and length > 1e-12) else 1.0

    statics = (
        Plane((0.0, 1.0 * s, 0.0), (0.0, -1.0, 0.0)),
        Plane((0.0, 0.0, 9.0 * s), (0.0, 0.0, -1.0)),
        Sphere((-1.3 * s, 0.3 * s, 5.0 * s), 0.6 * s),
        Sphere((1.4 * s, 0.1 * s, 5.5 * s), 0.8 * s),
    )
    movers = ()
    if dynamic:
        movers = (
            DynamicSphere(
                dynamic_radius * s,
                CircularMotion(
                    pivot=(0.0, 0.1 * s, 3.4 * s),
                    radius=0.45 * s,
                    angular_speed=2.0 * math.pi / max(num_frames, 2) * 0.9,
                    phase=0.3,
                ),
            ),
        )
    return SceneSpec(
        static_surfaces=statics,
        dynamic_objects=movers,
        camera_poses=tuple(_scale_pose(p, s) for p in poses),
        intrinsics=k,
        noise=NoiseSpec(depth_sigma, confidence_floor),
        seed=seed,
    )


# -- ray casting --------------------------------------------------------------

def _hit_plane(origin, dirs, plane: Plane) -> np.ndarray:
    n = np.asarray(plane.normal, float)
    p0 = np.asarray(plane.point, float)
    denom = dirs @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((p0 - origin) @ n) / denom
    t = np.where((np.abs(denom) > 1e-15) & (t > 0), t, np.inf)
    return t


def _hit_sphere(origin, dirs, center, radius) -> np.ndarray:
    oc = origin - np.asarray(center, float)
    a = np.einsum("...i,...i->...", dirs, dirs)
    b = 2.0 * dirs @ oc
    c = oc @ oc - radius * radius
    disc = b * b - 4 * a * c
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    t = np.where(t0 > 0, t0, np.where(t1 > 0, t1, np.inf))
    return np.where(disc >= 0, t, np.inf)


def cast_rays(spec: SceneSpec, frame: int, origin, dirs) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit parameter along ``dirs`` and the id of the surface hit.

    Surface ids: ``0..S-1`` static, ``S..S+D-1`` dynamic; ``-1`` for a miss.
    """
    best = np.full(dirs.shape[:-1], np.inf)
    ids = np.full(dirs.shape[:-1], -1, dtype=np.int64)
    surfaces = list(spec.static_surfaces)
    for i, surf in enumerate(surfaces):
        if isinstance(surf, Plane):
            t = _hit_plane(origin, dirs, surf)
        else:
            t = _hit_sphere(origin, dirs, surf.center, surf.radius)
        closer = t < best
        best = np.where(closer, t, best)
        ids = np.where(closer, i, ids)
    for j, obj in enumerate(spec.dynamic_objects):
        t = _hit_sphere(origin, dirs, obj.motion.center(frame), obj.radius)
        closer = t < best
        best = np.where(closer, t, best)
        ids = np.where(closer, len(surfaces) + j, ids)
    return best, ids


def _camera_rays(pose: PoseSE3, k: Intrinsics, pixels: np.ndarray):
    d_cam = np.stack(
        [(pixels[..., 0] - k.cx) / k.focal, (pixels[..., 1] - k.cy) / k.focal, np.ones(pixels.shape[:-1])],
        axis=-1,
    )
    # z component of d_cam is 1, so the hit parameter equals camera depth
    return pose.center, d_cam @ pose.rotation


# -- sequences ----------------------------------------------------------------

@dataclass
class OracleFrame:
    depth: DepthMap
    pose: PoseSE3
    intrinsics: Intrinsics
    dynamic: np.ndarray  # ground-truth dynamic mask
    surface_ids: np.ndarray
    world: np.ndarray  # HxWx3 world points at this frame's time


@dataclass
class OracleSequence:
    spec: SceneSpec
    graph: VideoGraph
    frames: list
    pairs: dict  # edge -> PairEstimate (possibly noisy)
    flows: dict  # edge -> ground-truth FlowField
    relative_poses: dict  # edge -> PoseSE3 mapping frame-t camera coords to frame-t2
    clean_pairs: dict = field(default_factory=dict)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    dynamic_pairs: str = "timestep"

    @property
    def poses(self) -> list:
        return [f.pose for f in self.frames]

    @property
    def depths(self) -> list:
        return [f.depth for f in self.frames]

    @property
    def intrinsics(self) -> list:
        return [f.intrinsics for f in self.frames]

    def dynamic_masks(self) -> list:
        return [f.dynamic for f in self.frames]


def render_frame(spec: SceneSpec, frame: int) -> OracleFrame:
    k = spec.intrinsics
    pose = spec.camera_poses[frame]
    origin, dirs = _camera_rays(pose, k, pixel_grid(k.size))
    t, ids = cast_rays(spec, frame, origin, dirs)
    if np.any(ids < 0):
        raise SceneError(f"frame {frame}: {int((ids < 0).sum())} pixel rays hit nothing; add a background plane")
    world = origin + t[..., None] * dirs
    dynamic = ids >= len(spec.static_surfaces)
    return OracleFrame(DepthMap(t), pose, k, dynamic, ids, world)


def _moved(spec: SceneSpec, frame: OracleFrame, src: int, dst: int) -> np.ndarray:
    """World position at time ``dst`` of each surface point seen in frame ``src``."""
    pts = frame.world.copy()
    n_static = len(spec.static_surfaces)
    for j, obj in enumerate(spec.dynamic_objects):
        sel = frame.surface_ids == n_static + j
        if sel.any():
            pts[sel] += obj.motion.center(dst) - obj.motion.center(src)
    return pts


def _flow(spec: SceneSpec, frames: list, src: int, dst: int) -> FlowField:
    k = spec.intrinsics
    f_src, f_dst = frames[src], frames[dst]
    target = _moved(spec, f_src, src, dst)
    cam = f_dst.pose.apply(target)
    z = cam[..., 2]
    in_front = z > 0
    zs = np.where(in_front, z, 1.0)
    uv = np.stack([k.focal * cam[..., 0] / zs + k.cx, k.focal * cam[..., 1] / zs + k.cy], axis=-1)
    # visibility: the target must be the first hit along its own ray at time dst
    origin, dirs = _camera_rays(f_dst.pose, k, uv)
    t_hit, _ = cast_rays(spec, dst, origin, dirs)
    visible = in_front & (np.abs(t_hit - zs) <= _HIT_RTOL * zs)
    flow = uv - pixel_grid(k.size)
    return FlowField(np.where(visible[..., None], flow, np.nan), visible)


def _pair(spec, frames, depths, t, t2, dynamic_pairs: str) -> PairEstimate:
    k = spec.intrinsics
    p_t, p_t2 = frames[t].pose, frames[t2].pose
    self_pts = camera_points(depths[0], k)
    if dynamic_pairs == "frozen":
        # the other frame's movers are reported where they were at time t
        world_t2 = _moved(spec, frames[t2], t2, t)
        cam_t2 = p_t2.apply(world_t2)
        scale = depths[1].depth / frames[t2].depth.depth
        other_world = p_t2.inverse().apply(cam_t2 * scale[..., None])
    else:
        other_world = p_t2.inverse().apply(camera_points(depths[1], k))
    other_pts = p_t.apply(other_world)
    return PairEstimate(
        Pointmap(self_pts, depths[0].valid),
        Pointmap(other_pts, depths[1].valid),
        depths[2],
        depths[3],
        (t, t2),
    )


def _noisy(depth: DepthMap, sigma: float, floor: float, rng) -> tuple[DepthMap, ConfidenceMap]:
    d = depth.depth
    if sigma <= 0:
        return depth, ConfidenceMap(np.ones_like(d))
    eps = rng.normal(size=d.shape) * sigma * d
    noisy = d + eps
    conf = np.maximum(1.0 / (1.0 + np.abs(eps) / d), floor)
    return DepthMap(noisy, depth.valid & (noisy > 0)), ConfidenceMap(conf)


def _make_pairs(spec, graph, frames, noise: NoiseSpec, seed: int, dynamic_pairs: str) -> dict:
    pairs = {}
    for t, t2 in graph.edges:
        rng = np.random.default_rng(np.random.SeedSequence([seed, t, t2]))
        d_t, c_t = _noisy(frames[t].depth, noise.depth_sigma, noise.confidence_floor, rng)
        d_t2, c_t2 = _noisy(frames[t2].depth, noise.depth_sigma, noise.confidence_floor, rng)
        pairs[(t, t2)] = _pair(spec, frames, (d_t, d_t2, c_t, c_t2), t, t2, dynamic_pairs)
    return pairs


def render_sequence(spec: SceneSpec, graph: VideoGraph, dynamic_pairs: str = "timestep") -> OracleSequence:
    """Render every frame and every graph edge of ``spec``.

    ``dynamic_pairs`` selects how the second pointmap of a pair reports
    moving objects: ``"timestep"`` places them where they are at that
    frame's own time (consistent per-timestep geometry); ``"frozen"``
    reports them where they were at the first frame's time, as a model
    blind to motion would, which makes them PnP outliers.
    """
    if graph.num_frames != spec.num_frames:
        raise SceneError(f"graph has {graph.num_frames} frames, scene has {spec.num_frames}")
    if dynamic_pairs not in ("timestep", "frozen"):
        raise ValueError(f"unknown dynamic_pairs mode {dynamic_pairs!r}")
    frames = [render_frame(spec, t) for t in range(spec.num_frames)]
    flows, rel = {}, {}
    for t, t2 in graph.edges:
        flows[(t, t2)] = _flow(spec, frames, t, t2)
        rel[(t, t2)] = frames[t2].pose.compose(frames[t].pose.inverse())
    clean = _make_pairs(spec, graph, frames, NoiseSpec(0.0, spec.noise.confidence_floor), spec.seed, dynamic_pairs)
    if spec.noise.depth_sigma > 0:
        pairs = _make_pairs(spec, graph, frames, spec.noise, spec.seed, dynamic_pairs)
    else:
        pairs = clean
    return OracleSequence(spec, graph, frames, pairs, flows, rel, clean, spec.noise, dynamic_pairs)


def perturb(seq: OracleSequence, noise: NoiseSpec, seed: int) -> OracleSequence:
    """Re-noise the pairwise pointmaps of a sequence; ground truth is untouched."""
    pairs = _make_pairs(seq.spec, seq.graph, seq.frames, noise, seed, seq.dynamic_pairs)
    return replace(seq, pairs=pairs, noise=noise)


def relative_depth_perturbation(seq: OracleSequence) -> np.ndarray:
    """``|noisy - clean| / clean`` over all self pointmap depths of the sequence."""
    out = []
    for e, pair in seq.pairs.items():
        clean = seq.clean_pairs[e].pointmap_self.points[..., 2]
        noisy = pair.pointmap_self.points[..., 2]
        ok = pair.pointmap_self.valid
        out.append(np.abs(noisy[ok] - clean[ok]) / clean[ok])
    return np.concatenate(out)
