"""Global dynamic point-cloud and camera-pose optimization.

Every frame is parameterized by its extrinsic (unit quaternion + translation),
a log-depth map and a log-focal; every graph edge by a log-scale and one rigid
transform taking the pair's camera frame into the world. The objective is::

    L_align + w_smooth * L_smooth + w_flow * L_flow

and is minimized with Adam. Gradients come from torch autograd in float64.

Gauge: frame 0's extrinsic is pinned to identity and the edge log-scales are
re-centered to zero mean after every step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np
import torch

from .geom import DepthMap, ImageSize, Intrinsics, PoseSE3, StaticMask, orthonormalize, rotmat_to_quat
from .graph import VideoGraph
from ._kernels import AlignL1, FlowL1
from .pairwise import PairwiseResult, RansacParams, analyze_pairs

log = logging.getLogger(__name__)

DTYPE = torch.float64


class InitializationError(RuntimeError):
    pass


class OptimizationError(RuntimeError):
    def __init__(self, iteration: int, term: str, what: str = "loss"):
        super().__init__(f"non-finite {what} in term {term!r} at iteration {iteration}")
        self.iteration = iteration
        self.term = term


@dataclass(frozen=True)
class OptimSchedule:
    iterations: int = 300
    learning_rate: float = 0.01
    w_smooth: float = 0.01
    w_flow: float = 0.01
    flow_enable_threshold: float = 20.0
    mask_update_threshold: float = 50.0
    mask_update_interval: int = 10
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    lr_schedule: str = "cosine"
    lr_min: float = 1e-6
    shared_focal: bool = False


@dataclass(frozen=True)
class FrameVariables:
    pose: PoseSE3
    log_depth: np.ndarray
    log_focal: float


@dataclass(frozen=True)
class EdgeVariables:
    log_scale: float
    align_pose: PoseSE3


@dataclass
class IterationContext:
    iteration: int = 0
    flow_active: bool = False


# -- torch geometry -----------------------------------------------------------

def quat_to_rot(q: torch.Tensor) -> torch.Tensor:
    """Batched ``(..., 4)`` quaternions ``(w, x, y, z)`` to rotations; normalizes first."""
    q = q / torch.linalg.vector_norm(q, dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(q.shape[:-1] + (3, 3))


def _safe_norm(x: torch.Tensor, dim) -> torch.Tensor:
    # zero-gradient at the origin instead of NaN
    sq = (x * x).sum(dim=dim)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


# -- state --------------------------------------------------------------------

@dataclass
class GlobalState:
    """All optimization variables, stored as packed float64 tensors.

    ``quats``/``trans`` are per-frame extrinsics, ``log_depth`` is ``(F, H, W)``,
    ``log_focal`` is ``(F,)`` (or ``(1,)`` when the focal is shared), and the
    ``edge_*`` tensors follow ``graph.edges`` order.
    """

    graph: VideoGraph
    size: ImageSize
    quats: torch.Tensor
    trans: torch.Tensor
    log_depth: torch.Tensor
    log_focal: torch.Tensor
    edge_log_scale: torch.Tensor
    edge_quats: torch.Tensor
    edge_trans: torch.Tensor
    depth_valid: torch.Tensor
    masks: dict = field(default_factory=dict)

    def parameters(self) -> dict:
        return {
            "quats": self.quats, "trans": self.trans, "log_depth": self.log_depth,
            "log_focal": self.log_focal, "edge_log_scale": self.edge_log_scale,
            "edge_quats": self.edge_quats, "edge_trans": self.edge_trans,
        }

    def clone(self) -> "GlobalState":
        return replace(self, **{k: v.detach().clone() for k, v in self.parameters().items()},
                       masks=dict(self.masks))

    @property
    def num_frames(self) -> int:
        return self.quats.shape[0]

    def focal(self, t: int) -> float:
        lf = self.log_focal
        return float(torch.exp(lf[t if lf.numel() > 1 else 0]))

    def pose(self, t: int) -> PoseSE3:
        rot = quat_to_rot(self.quats[t].detach()).numpy()
        return PoseSE3(orthonormalize(rot), self.trans[t].detach().numpy())

    def frame(self, t: int) -> FrameVariables:
        return FrameVariables(self.pose(t), self.log_depth[t].detach().numpy().copy(),
                              math.log(self.focal(t)))

    def edge(self, e) -> EdgeVariables:
        i = self.graph.edges.index(tuple(e))
        rot = quat_to_rot(self.edge_quats[i].detach()).numpy()
        return EdgeVariables(float(self.edge_log_scale[i]),
                             PoseSE3(orthonormalize(rot), self.edge_trans[i].detach().numpy()))

    @property
    def frames(self) -> list:
        return [self.frame(t) for t in range(self.num_frames)]

    def poses(self) -> list:
        return [self.pose(t) for t in range(self.num_frames)]

    def intrinsics(self) -> list:
        return [Intrinsics(self.focal(t), self.size) for t in range(self.num_frames)]

    def depth_maps(self) -> list:
        d = torch.exp(self.log_depth.detach()).numpy()
        v = self.depth_valid.numpy()
        return [DepthMap(np.where(v[t], d[t], np.nan), v[t]) for t in range(self.num_frames)]

    def project_gauge(self) -> None:
        """Re-express the state so frame 0 is the identity and mean log-scale is 0.

        Both steps are gauge moves applied to every variable at once: a rigid
        transform of the world (all frame poses and edge align poses) and a
        global rescale (depths, camera translations, edge scales). Only the
        frame-0 variables are changed in the overwrite sense, and only by
        rounding. Quaternions are renormalized as well.
        """
        with torch.no_grad():
            self.quats /= torch.linalg.vector_norm(self.quats, dim=-1, keepdim=True)
            self.edge_quats /= torch.linalg.vector_norm(self.edge_quats, dim=-1, keepdim=True)
            q0 = self.quats[0].clone()
            t0 = self.trans[0].clone()
            r0 = quat_to_rot(q0)
            q0_inv = q0 * torch.tensor([1.0, -1.0, -1.0, -1.0], dtype=DTYPE)
            self.quats.copy_(_quat_mul(self.quats, q0_inv))
            self.trans -= quat_to_rot(self.quats) @ t0
            if self.edge_quats.numel():
                sigma = torch.exp(self.edge_log_scale)
                self.edge_trans.copy_(self.edge_trans @ r0.T + t0 / sigma[:, None])
                self.edge_quats.copy_(_quat_mul(q0.expand_as(self.edge_quats), self.edge_quats))
            self.quats[0] = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=DTYPE)
            self.trans[0] = 0.0
            if self.edge_log_scale.numel():
                m = self.edge_log_scale.mean()
                self.edge_log_scale -= m
                self.log_depth -= m
                self.trans *= torch.exp(-m)


def _quat_mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Hamilton product of ``(w, x, y, z)`` quaternions, so ``R(a*b) = R(a) R(b)``."""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], dim=-1)


def make_state(graph: VideoGraph, size: ImageSize, poses, depths, focals, edge_scales=None,
               edge_poses=None, masks=None) -> GlobalState:
    """Assemble a :class:`GlobalState` from per-frame / per-edge values.

    ``poses`` are extrinsics, ``depths`` DepthMaps, ``focals`` floats (one per
    frame, or a single value for a shared focal); ``edge_poses`` map each
    pair's camera frame into the world.
    """
    n_e = len(graph.edges)
    q = torch.tensor(np.array([rotmat_to_quat(p.rotation) for p in poses]), dtype=DTYPE)
    tr = torch.tensor(np.array([p.translation for p in poses]), dtype=DTYPE)
    valid = np.array([d.valid for d in depths])
    ld = np.log(np.where(valid, np.array([d.depth for d in depths]), 1.0))
    focals = np.atleast_1d(np.asarray(focals, dtype=np.float64))
    if edge_scales is None:
        edge_scales = np.ones(n_e)
    if edge_poses is None:
        edge_poses = [PoseSE3.identity()] * n_e
    return GlobalState(
        graph=graph, size=size, quats=q, trans=tr,
        log_depth=torch.tensor(ld, dtype=DTYPE),
        log_focal=torch.tensor(np.log(focals), dtype=DTYPE),
        edge_log_scale=torch.tensor(np.log(np.asarray(edge_scales, float)), dtype=DTYPE),
        edge_quats=torch.tensor(np.array([rotmat_to_quat(p.rotation) for p in edge_poses]).reshape(n_e, 4),
                                dtype=DTYPE),
        edge_trans=torch.tensor(np.array([p.translation for p in edge_poses]).reshape(n_e, 3), dtype=DTYPE),
        depth_valid=torch.tensor(valid),
        masks=dict(masks or {}),
    )


# -- packed problem data ------------------------------------------------------

@dataclass
class PairData:
    src: torch.Tensor
    dst: torch.Tensor
    x_self: torch.Tensor
    x_other: torch.Tensor
    c_self: torch.Tensor
    c_other: torch.Tensor


def pack_pairs(graph: VideoGraph, pairs: Mapping) -> PairData:
    xs, xo, cs, co = [], [], [], []
    for e in graph.edges:
        p = pairs[e]
        vs, vo = p.pointmap_self.valid, p.pointmap_other.valid
        xs.append(np.where(vs[..., None], p.pointmap_self.points, 0.0))
        xo.append(np.where(vo[..., None], p.pointmap_other.points, 0.0))
        # invalid pixels carry zero weight
        cs.append(np.where(vs, p.conf_self.values, 0.0))
        co.append(np.where(vo, p.conf_other.values, 0.0))
    src = torch.tensor([e[0] for e in graph.edges], dtype=torch.long)
    dst = torch.tensor([e[1] for e in graph.edges], dtype=torch.long)
    t = lambda a: torch.tensor(np.array(a), dtype=DTYPE)
    return PairData(src, dst, t(xs), t(xo), t(cs), t(co))


@dataclass
class FlowData:
    edges: list
    src: torch.Tensor
    dst: torch.Tensor
    flow: torch.Tensor
    valid: torch.Tensor


def pack_flows(graph: VideoGraph, flows: Mapping) -> FlowData:
    edges = [e for e in graph.edges if e in flows]
    if not edges:
        h, w = 1, 1
        return FlowData([], torch.zeros(0, dtype=torch.long), torch.zeros(0, dtype=torch.long),
                        torch.zeros((0, h, w, 2), dtype=DTYPE), torch.zeros((0, h, w), dtype=torch.bool))
    return FlowData(
        edges,
        torch.tensor([e[0] for e in edges], dtype=torch.long),
        torch.tensor([e[1] for e in edges], dtype=torch.long),
        torch.tensor(np.array([flows[e].flow for e in edges]), dtype=DTYPE),
        torch.tensor(np.array([flows[e].valid for e in edges])),
    )


def _mask_tensor(state: GlobalState, fd: FlowData) -> torch.Tensor:
    h, w = state.size.shape
    out = torch.zeros((len(fd.edges), h, w), dtype=torch.bool)
    for i, e in enumerate(fd.edges):
        if e in state.masks:
            out[i] = torch.from_numpy(np.asarray(state.masks[e].is_static))
    return out


# -- loss terms ---------------------------------------------------------------

def _rays(size: ImageSize, focal: torch.Tensor) -> torch.Tensor:
    """Camera rays with unit z for each focal: ``(F, H, W, 3)``."""
    h, w = size.shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    v, u = torch.meshgrid(torch.arange(h, dtype=DTYPE), torch.arange(w, dtype=DTYPE), indexing="ij")
    f = focal.reshape(-1, 1, 1)
    x = (u - cx) / f
    y = (v - cy) / f
    return torch.stack([x, y, torch.ones_like(x)], dim=-1)


def _focals(state: GlobalState) -> torch.Tensor:
    f = torch.exp(state.log_focal)
    return f.expand(state.num_frames) if f.numel() == 1 else f


def camera_pointmaps(state: GlobalState) -> torch.Tensor:
    return torch.exp(state.log_depth)[..., None] * _rays(state.size, _focals(state))


def global_pointmaps(state: GlobalState) -> torch.Tensor:
    """World pointmaps ``X^t = P_t^{-1}(D_t K_t^{-1} x)``, shape ``(F, H, W, 3)``."""
    rot = quat_to_rot(state.quats)
    cam = camera_pointmaps(state)
    # R^T (x - T), written row-vector style
    return torch.einsum("fhwi,fij->fhwj", cam - state.trans[:, None, None, :], rot)


def _pixel_grid_flat(size: ImageSize) -> tuple[np.ndarray, np.ndarray]:
    h, w = size.shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    return u.ravel(), v.ravel()


def align_term(state: GlobalState, pd: PairData) -> torch.Tensor:
    """Confidence-weighted L1 between global pointmaps and scaled, aligned pair pointmaps,
    summed over every edge and both of its frames."""
    if pd.src.numel() == 0:
        return torch.zeros((), dtype=DTYPE)
    n_f = state.num_frames
    n_e = pd.src.numel()
    world = global_pointmaps(state).reshape(n_f, -1, 3)
    valid = state.depth_valid.reshape(n_f, -1).to(DTYPE)
    sigma = torch.exp(state.edge_log_scale)
    rot = quat_to_rot(state.edge_quats)
    loss = torch.zeros((), dtype=DTYPE)
    for idx, pts, conf in ((pd.src, pd.x_self, pd.c_self), (pd.dst, pd.x_other, pd.c_other)):
        weight = conf.reshape(n_e, -1) * valid[idx]
        loss = loss + AlignL1.apply(world, sigma, rot, state.edge_trans, idx, pts.reshape(n_e, -1, 3), weight)
    return loss


def smooth_term(state: GlobalState) -> torch.Tensor:
    if state.num_frames < 2:
        return torch.zeros((), dtype=DTYPE)
    rot = quat_to_rot(state.quats)
    r0, r1 = rot[:-1], rot[1:]
    eye = torch.eye(3, dtype=DTYPE)
    rot_diff = r0.transpose(-1, -2) @ r1 - eye
    step = torch.einsum("fji,fj->fi", r0, state.trans[1:] - state.trans[:-1])
    return (_safe_norm(rot_diff, dim=(-2, -1)) + _safe_norm(step, dim=-1)).sum()


def _flow_eval(state: GlobalState, fd: FlowData, masks: Optional[torch.Tensor]):
    h, w = state.size.shape
    n_f, n_k = state.num_frames, len(fd.edges)
    rot = quat_to_rot(state.quats)
    r_rel = rot[fd.dst] @ rot[fd.src].transpose(-1, -2)
    t_rel = state.trans[fd.dst] - torch.einsum("eij,ej->ei", r_rel, state.trans[fd.src])
    focal = _focals(state)[fd.dst]
    cam = camera_pointmaps(state).reshape(n_f, -1, 3)
    defined = fd.valid & state.depth_valid[fd.src]
    sel = defined if masks is None else defined & masks
    out = {}
    loss = FlowL1.apply(cam, r_rel, t_rel, focal, fd.src, fd.flow.reshape(n_k, -1, 2),
                        sel.reshape(n_k, -1), _pixel_grid_flat(state.size),
                        ((w - 1) / 2.0, (h - 1) / 2.0), out)
    ok = out["ok"].reshape(n_k, h, w) & defined
    residual = torch.where(ok, out["residual"].reshape(n_k, h, w), torch.zeros((), dtype=DTYPE))
    return loss, residual, ok, sel


def flow_residuals(state: GlobalState, fd: FlowData) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-pixel L1 flow residual ``|F_cam_global - F_est|`` and where it is defined."""
    h, w = state.size.shape
    if not fd.edges:
        return torch.zeros((0, h, w), dtype=DTYPE), torch.zeros((0, h, w), dtype=torch.bool)
    with torch.no_grad():
        _, residual, ok, _ = _flow_eval(state, fd, torch.zeros_like(fd.valid))
    return residual, ok


def flow_term(state: GlobalState, fd: FlowData, masks: Optional[torch.Tensor] = None) -> tuple[torch.Tensor, int]:
    """Masked flow loss and the number of pixels it sums over."""
    if not fd.edges:
        return torch.zeros((), dtype=DTYPE), 0
    if masks is None:
        masks = _mask_tensor(state, fd)
    loss, _, ok, sel = _flow_eval(state, fd, masks)
    return loss, int((ok & sel).sum())


def objective_terms(state: GlobalState, pd: PairData, fd: Optional[FlowData] = None,
                    masks: Optional[torch.Tensor] = None) -> dict:
    terms = {"align": align_term(state, pd), "smooth": smooth_term(state)}
    if fd is not None:
        terms["flow"], terms["flow_pixels"] = flow_term(state, fd, masks)
    return terms


# -- public loss API ----------------------------------------------------------

def loss_align(state: GlobalState, pairs: Mapping) -> float:
    with torch.no_grad():
        return float(align_term(state, pack_pairs(state.graph, pairs)))


def loss_smooth(state: GlobalState) -> float:
    with torch.no_grad():
        return float(smooth_term(state))


def loss_flow(state: GlobalState, flows: Mapping) -> float:
    with torch.no_grad():
        return float(flow_term(state, pack_flows(state.graph, flows))[0])


def mean_flow_loss(state: GlobalState, flows: Mapping) -> float:
    with torch.no_grad():
        value, count = flow_term(state, pack_flows(state.graph, flows))
    return float(value) / count if count else 0.0


def total_objective(state: GlobalState, pairs: Mapping, flows: Mapping, schedule: OptimSchedule,
                    context: Optional[IterationContext] = None) -> float:
    """``L_align + w_smooth L_smooth + w_flow L_flow`` with the latching flow gate.

    The flow term counts only once its mean per-pixel value has dropped
    below ``schedule.flow_enable_threshold``; ``context.flow_active`` records
    the latch across calls.
    """
    if context is None:
        context = IterationContext()
    pd = pack_pairs(state.graph, pairs)
    fd = pack_flows(state.graph, flows)
    with torch.no_grad():
        terms = objective_terms(state, pd, fd)
    _update_gate(context, terms, schedule)
    return float(_combine(terms, schedule, context.flow_active))


def _update_gate(context: IterationContext, terms: dict, schedule: OptimSchedule) -> None:
    if context.flow_active or "flow" not in terms:
        return
    n = terms["flow_pixels"]
    mean = float(terms["flow"].detach()) / n if n else 0.0
    if mean < schedule.flow_enable_threshold:
        context.flow_active = True


def _combine(terms: dict, schedule: OptimSchedule, flow_active: bool):
    total = terms["align"] + schedule.w_smooth * terms["smooth"]
    if flow_active and "flow" in terms:
        total = total + schedule.w_flow * terms["flow"]
    return total


def update_masks(state: GlobalState, flows: Mapping, schedule: OptimSchedule) -> GlobalState:
    """Flip pixels whose flow residual exceeds ``mask_update_threshold`` to dynamic."""
    fd = pack_flows(state.graph, flows)
    masks = _mask_tensor(state, fd)
    new = _updated_masks(state, fd, masks, schedule.mask_update_threshold)
    out = state.clone()
    for i, e in enumerate(fd.edges):
        out.masks[e] = StaticMask(new[i].numpy().copy())
    return out


def _updated_masks(state, fd, masks, threshold) -> torch.Tensor:
    with torch.no_grad():
        res, ok = flow_residuals(state, fd)
    return masks & ~(ok & (res > threshold))


# -- initialization -----------------------------------------------------------

def _kabsch(src: np.ndarray, dst: np.ndarray, w: Optional[np.ndarray] = None) -> PoseSE3:
    """Rigid transform minimizing ``sum w ||R src + T - dst||^2``."""
    if w is None:
        w = np.ones(len(src))
    w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    cov = (dst - mu_d).T @ ((src - mu_s) * w[:, None])
    u, _, vt = np.linalg.svd(cov)
    s = np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt))])
    rot = u @ s @ vt
    return PoseSE3(orthonormalize(rot), mu_d - rot @ mu_s)


def _initial_depth(t: int, graph: VideoGraph, pairs: Mapping, poses: Mapping) -> DepthMap:
    candidates = [(t, t - 1), (t, t + 1)]
    for e in candidates:
        if e in pairs and graph.has_edge(*e):
            pm = pairs[e].pointmap_self
            return DepthMap(np.where(pm.valid, pm.points[..., 2], np.nan), pm.valid)
    for e in [(t - 1, t), (t + 1, t)]:
        if e in pairs and graph.has_edge(*e) and not poses[e].failed:
            pm = pairs[e].pointmap_other
            pts = poses[e].pose.apply(np.where(pm.valid[..., None], pm.points, 0.0))
            ok = pm.valid & (pts[..., 2] > 0)
            return DepthMap(np.where(ok, pts[..., 2], np.nan), ok)
    raise InitializationError(f"frame {t} has no adjacent pair to initialize its depth")


def init_global_state(graph: VideoGraph, pairs: Mapping, poses: Mapping, focals: Mapping,
                      masks: Optional[Mapping] = None, shared_focal: bool = False) -> GlobalState:
    """Initial state: chained adjacent relative poses, pairwise depths, rigid edge fits."""
    n = graph.num_frames
    if n < 2:
        raise InitializationError("need at least two frames")
    masks = dict(masks or {})

    broken = []
    extr = [PoseSE3.identity()]
    for t in range(n - 1):
        fwd, bwd = (t, t + 1), (t + 1, t)
        rel = None
        if graph.has_edge(*fwd) and fwd in poses and not poses[fwd].failed:
            rel = poses[fwd].pose
        elif graph.has_edge(*bwd) and bwd in poses and not poses[bwd].failed:
            log.warning("adjacent edge %s failed; chaining through reverse edge %s", fwd, bwd)
            rel = poses[bwd].pose.inverse()
        if rel is None:
            broken.append(t + 1)
            rel = PoseSE3.identity()
        extr.append(rel.compose(extr[-1]))
    if broken:
        raise InitializationError(f"no usable adjacent relative pose for frames {broken}")

    size = pairs[graph.edges[0]].size
    depths = [_initial_depth(t, graph, pairs, poses) for t in range(n)]
    if shared_focal:
        f = [float(np.median([focals[t] for t in range(n)]))]
    else:
        f = [focals[t] for t in range(n)]
    ks = [Intrinsics(focals[t], size) for t in range(n)]

    from .geom import pointmap_from_depth

    world = [pointmap_from_depth(depths[t], ks[t], extr[t]) for t in range(n)]
    edge_poses = []
    for e in graph.edges:
        pm = pairs[e].pointmap_self
        ok = pm.valid & world[e[0]].valid
        if e in masks:
            static = ok & masks[e].is_static
            if static.sum() >= 3:
                ok = static
        if ok.sum() < 3:
            edge_poses.append(extr[e[0]].inverse())
            continue
        conf = pairs[e].conf_self.values[ok]
        w = conf if conf.sum() > 0 else None
        edge_poses.append(_kabsch(pm.points[ok], world[e[0]].points[ok], w))
    return make_state(graph, size, extr, depths, f, None, edge_poses, masks)


# -- driver -------------------------------------------------------------------

@dataclass(frozen=True)
class LossRecord:
    iteration: int
    total: float
    align: float
    smooth: float
    flow: float
    flow_active: bool


@dataclass(frozen=True)
class GlobalResult:
    state: GlobalState
    poses: list  # extrinsics
    depths: list  # video depth
    intrinsics: list
    masks: dict  # edge -> StaticMask
    dynamic_masks: list  # per-frame boolean grids
    loss_trace: list
    pairwise: Optional[PairwiseResult] = None


def frame_dynamic_masks(graph: VideoGraph, masks: Mapping, flows: Mapping, size: ImageSize) -> list:
    """Per-frame dynamic mask: majority vote of the outgoing edges' masks over valid flow."""
    out = []
    for t in range(graph.num_frames):
        votes = np.zeros(size.shape)
        count = np.zeros(size.shape)
        for e in graph.outgoing(t):
            if e not in masks:
                continue
            v = flows[e].valid if e in flows else np.ones(size.shape, bool)
            votes += masks[e].is_dynamic & v
            count += v
        out.append(votes * 2 > count)
    return out


def _lr_at(schedule: OptimSchedule, it: int) -> float:
    if schedule.lr_schedule == "constant" or schedule.iterations <= 1:
        return schedule.learning_rate
    if schedule.lr_schedule == "cosine":
        frac = it / (schedule.iterations - 1)
        return schedule.lr_min + 0.5 * (schedule.learning_rate - schedule.lr_min) * (1 + math.cos(math.pi * frac))
    raise ValueError(f"unknown lr schedule {schedule.lr_schedule!r}")


def _check_finite(it: int, terms: dict, state: GlobalState, pd, fd, masks, schedule, flow_active):
    for name in ("align", "smooth", "flow"):
        if name in terms and not torch.isfinite(terms[name]):
            raise OptimizationError(it, name)
    for p in state.parameters().values():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            break
    else:
        return
    # find the offending term by differentiating each one alone
    for name in ("align", "smooth", "flow"):
        if name == "flow" and not flow_active:
            continue
        params = list(state.parameters().values())
        t = objective_terms(state, pd, fd, masks)[name]
        grads = torch.autograd.grad(t, params, allow_unused=True)
        if any(g is not None and not torch.isfinite(g).all() for g in grads):
            raise OptimizationError(it, name, "gradient")
    raise OptimizationError(it, "total", "gradient")


def optimize_state(state: GlobalState, pairs: Mapping, flows: Mapping,
                   schedule: OptimSchedule = OptimSchedule()) -> tuple[GlobalState, list]:
    """Run Adam from ``state``; returns the optimized copy and the loss trace.

    The trace has ``iterations + 1`` entries: the objective before each step
    and after the last one.
    """
    state = state.clone()
    state.project_gauge()
    pd = pack_pairs(state.graph, pairs)
    fd = pack_flows(state.graph, flows)
    masks = _mask_tensor(state, fd)
    ctx = IterationContext()
    params = list(state.parameters().values())
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=schedule.learning_rate, betas=tuple(schedule.adam_betas),
                           eps=schedule.adam_eps)
    trace = []

    def record(it, terms):
        total = _combine(terms, schedule, ctx.flow_active)
        val = lambda x: float(x.detach()) if torch.is_tensor(x) else float(x)
        trace.append(LossRecord(it, val(total), val(terms["align"]), val(terms["smooth"]),
                                val(terms.get("flow", 0.0)), ctx.flow_active))
        return total

    for it in range(schedule.iterations):
        ctx.iteration = it
        opt.zero_grad(set_to_none=True)
        terms = objective_terms(state, pd, fd if fd.edges else None, masks)
        _update_gate(ctx, terms, schedule)
        total = record(it, terms)
        total.backward()
        _check_finite(it, terms, state, pd, fd, masks, schedule, ctx.flow_active)
        for g in opt.param_groups:
            g["lr"] = _lr_at(schedule, it)
        opt.step()
        state.project_gauge()
        if ctx.flow_active and fd.edges and (it + 1) % schedule.mask_update_interval == 0:
            masks = _updated_masks(state, fd, masks, schedule.mask_update_threshold)

    with torch.no_grad():
        terms = objective_terms(state, pd, fd if fd.edges else None, masks)
        _update_gate(ctx, terms, schedule)
        record(schedule.iterations, terms)
    for p in params:
        p.requires_grad_(False)
    for i, e in enumerate(fd.edges):
        state.masks[e] = StaticMask(masks[i].numpy().copy())
    return state, trace


def run_global_optimization(graph: VideoGraph, pairs: Mapping, flows: Mapping,
                            schedule: OptimSchedule = OptimSchedule(), seed: int = 0,
                            ransac: RansacParams = RansacParams(),
                            alpha: Optional[float] = None) -> GlobalResult:
    """Pairwise analysis, initialization and global optimization of a whole sequence."""
    pw = analyze_pairs(graph, pairs, flows, ransac, alpha, seed, schedule.shared_focal)
    state = init_global_state(graph, pairs, pw.poses, pw.focals, pw.masks, schedule.shared_focal)
    state, trace = optimize_state(state, pairs, flows, schedule)
    dyn = frame_dynamic_masks(graph, state.masks, flows, state.size)
    return GlobalResult(state, state.poses(), state.depth_maps(), state.intrinsics(),
                        dict(state.masks), dyn, trace, pw)
