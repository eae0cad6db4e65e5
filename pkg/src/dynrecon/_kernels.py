"""Fused L1 residual kernels for the alignment and flow terms.

Each kernel evaluates its loss and the gradient of that loss in one serial
pass, so results are bit-reproducible. They are wrapped as torch autograd
functions; everything upstream (quaternions, depth, focal) is left to
autograd. ``sign(0)`` is taken as 0, matching ``torch.abs``.
"""

from __future__ import annotations

import numpy as np
import torch
from numba import njit


@njit(cache=True)
def _sign(x):
    if x > 0.0:
        return 1.0
    if x < 0.0:
        return -1.0
    return 0.0


@njit(cache=True)
def _align_kernel(world, frame_idx, pts, weight, sigma, rot, trans, want_grad,
                  g_world, g_sigma, g_rot, g_trans):
    loss = 0.0
    n_edges, n_pix = weight.shape
    for e in range(n_edges):
        f = frame_idx[e]
        s = sigma[e]
        r = rot[e]
        t = trans[e]
        for p in range(n_pix):
            w = weight[e, p]
            if w == 0.0:
                continue
            x0 = pts[e, p, 0]
            x1 = pts[e, p, 1]
            x2 = pts[e, p, 2]
            a0 = r[0, 0] * x0 + r[0, 1] * x1 + r[0, 2] * x2 + t[0]
            a1 = r[1, 0] * x0 + r[1, 1] * x1 + r[1, 2] * x2 + t[1]
            a2 = r[2, 0] * x0 + r[2, 1] * x1 + r[2, 2] * x2 + t[2]
            d0 = world[f, p, 0] - s * a0
            d1 = world[f, p, 1] - s * a1
            d2 = world[f, p, 2] - s * a2
            loss += w * (abs(d0) + abs(d1) + abs(d2))
            if want_grad:
                s0 = w * _sign(d0)
                s1 = w * _sign(d1)
                s2 = w * _sign(d2)
                g_world[f, p, 0] += s0
                g_world[f, p, 1] += s1
                g_world[f, p, 2] += s2
                g_sigma[e] -= s0 * a0 + s1 * a1 + s2 * a2
                b0 = -s * s0
                b1 = -s * s1
                b2 = -s * s2
                g_trans[e, 0] += b0
                g_trans[e, 1] += b1
                g_trans[e, 2] += b2
                g_rot[e, 0, 0] += b0 * x0
                g_rot[e, 0, 1] += b0 * x1
                g_rot[e, 0, 2] += b0 * x2
                g_rot[e, 1, 0] += b1 * x0
                g_rot[e, 1, 1] += b1 * x1
                g_rot[e, 1, 2] += b1 * x2
                g_rot[e, 2, 0] += b2 * x0
                g_rot[e, 2, 1] += b2 * x1
                g_rot[e, 2, 2] += b2 * x2
    return loss


@njit(cache=True)
def _flow_kernel(cam, src, rot, trans, focal, cx, cy, u, v, flow, mask, want_grad,
                 residual, ok, g_cam, g_rot, g_trans, g_focal):
    loss = 0.0
    n_pairs, n_pix = mask.shape
    for k in range(n_pairs):
        a = src[k]
        r = rot[k]
        t = trans[k]
        f = focal[k]
        for p in range(n_pix):
            x0 = cam[a, p, 0]
            x1 = cam[a, p, 1]
            x2 = cam[a, p, 2]
            q0 = r[0, 0] * x0 + r[0, 1] * x1 + r[0, 2] * x2 + t[0]
            q1 = r[1, 0] * x0 + r[1, 1] * x1 + r[1, 2] * x2 + t[1]
            q2 = r[2, 0] * x0 + r[2, 1] * x1 + r[2, 2] * x2 + t[2]
            if q2 <= 0.0:
                residual[k, p] = 0.0
                ok[k, p] = False
                continue
            ok[k, p] = True
            iz = 1.0 / q2
            du = f * q0 * iz + cx - u[p] - flow[k, p, 0]
            dv = f * q1 * iz + cy - v[p] - flow[k, p, 1]
            res = abs(du) + abs(dv)
            residual[k, p] = res
            if not mask[k, p]:
                continue
            loss += res
            if want_grad:
                su = _sign(du)
                sv = _sign(dv)
                gq0 = su * f * iz
                gq1 = sv * f * iz
                gq2 = -(su * f * q0 + sv * f * q1) * iz * iz
                g_focal[k] += (su * q0 + sv * q1) * iz
                g_trans[k, 0] += gq0
                g_trans[k, 1] += gq1
                g_trans[k, 2] += gq2
                g_rot[k, 0, 0] += gq0 * x0
                g_rot[k, 0, 1] += gq0 * x1
                g_rot[k, 0, 2] += gq0 * x2
                g_rot[k, 1, 0] += gq1 * x0
                g_rot[k, 1, 1] += gq1 * x1
                g_rot[k, 1, 2] += gq1 * x2
                g_rot[k, 2, 0] += gq2 * x0
                g_rot[k, 2, 1] += gq2 * x1
                g_rot[k, 2, 2] += gq2 * x2
                g_cam[a, p, 0] += r[0, 0] * gq0 + r[1, 0] * gq1 + r[2, 0] * gq2
                g_cam[a, p, 1] += r[0, 1] * gq0 + r[1, 1] * gq1 + r[2, 1] * gq2
                g_cam[a, p, 2] += r[0, 2] * gq0 + r[1, 2] * gq1 + r[2, 2] * gq2
    return loss


def _np(t: torch.Tensor) -> np.ndarray:
    return np.ascontiguousarray(t.detach().numpy())


class AlignL1(torch.autograd.Function):
    """``sum_e sum_p w_ep * |world[f_e, p] - sigma_e (R_e x_ep + T_e)|_1``."""

    @staticmethod
    def forward(ctx, world, sigma, rot, trans, frame_idx, pts, weight):
        want = any(ctx.needs_input_grad[:4])
        w_np = _np(world)
        g_world = np.zeros_like(w_np)
        g_sigma = np.zeros(sigma.shape[0])
        g_rot = np.zeros((sigma.shape[0], 3, 3))
        g_trans = np.zeros((sigma.shape[0], 3))
        loss = _align_kernel(w_np, _np(frame_idx), _np(pts), _np(weight), _np(sigma), _np(rot),
                             _np(trans), want, g_world, g_sigma, g_rot, g_trans)
        ctx.grads = tuple(torch.from_numpy(g) for g in (g_world, g_sigma, g_rot, g_trans))
        return torch.tensor(loss, dtype=world.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        gw, gs, gr, gt = (g * grad_out for g in ctx.grads)
        return gw, gs, gr, gt, None, None, None


class FlowL1(torch.autograd.Function):
    """Masked L1 between camera-induced flow and a target flow.

    Also exposes the per-pixel residual and the in-front mask through
    ``ctx`` so callers can read them without a second pass.
    """

    @staticmethod
    def forward(ctx, cam, rot, trans, focal, src, flow, mask, grid, center, out):
        want = any(ctx.needs_input_grad[:4])
        c_np = _np(cam)
        n_pairs, n_pix = mask.shape
        residual = np.zeros((n_pairs, n_pix))
        ok = np.zeros((n_pairs, n_pix), dtype=np.bool_)
        g_cam = np.zeros_like(c_np)
        g_rot = np.zeros((n_pairs, 3, 3))
        g_trans = np.zeros((n_pairs, 3))
        g_focal = np.zeros(n_pairs)
        loss = _flow_kernel(c_np, _np(src), _np(rot), _np(trans), _np(focal), float(center[0]),
                            float(center[1]), grid[0], grid[1], _np(flow), _np(mask), want,
                            residual, ok, g_cam, g_rot, g_trans, g_focal)
        ctx.grads = tuple(torch.from_numpy(g) for g in (g_cam, g_rot, g_trans, g_focal))
        if out is not None:
            out["residual"] = torch.from_numpy(residual)
            out["ok"] = torch.from_numpy(ok)
        return torch.tensor(loss, dtype=cam.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        gc, gr, gt, gf = (g * grad_out for g in ctx.grads)
        return gc, gr, gt, gf, None, None, None, None, None, None
