"""Shared oracle fixtures and the acceptance-criteria summary."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from dynrecon.graph import build_window_graph
from dynrecon.oracle import make_scene, render_sequence

torch.set_num_threads(1)

_ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = {}


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for an acceptance criterion."""
    results = request.config.stash[_ACCEPTANCE_KEY]

    def record(number: int, passed: bool, detail: str) -> bool:
        results[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


# -- oracle scenes ------------------------------------------------------------

@pytest.fixture(scope="session")
def small_seq():
    """Six frames at 32x24 with a moving sphere; every edge within gap 2."""
    spec = make_scene(num_frames=6, height=24, width=32, focal=30.0)
    return render_sequence(spec, build_window_graph(6, 2, 1))


@pytest.fixture(scope="session")
def static_camera_seq():
    spec = make_scene("static", num_frames=5, height=24, width=32, focal=30.0)
    return render_sequence(spec, build_window_graph(5, 2, 1))


@pytest.fixture(scope="session")
def scene30():
    """The acceptance scene: 30 frames at 64x48, w=9, stride 2, exact inputs."""
    spec = make_scene(num_frames=30)
    return render_sequence(spec, build_window_graph(30, 9, 2))


def gt_static_masks(seq) -> dict:
    """Per-edge ground-truth static masks: static surface in frame t with valid flow."""
    from dynrecon.geom import StaticMask

    return {e: StaticMask(~seq.frames[e[0]].dynamic & seq.flows[e].valid) for e in seq.graph.edges}


def gt_state(seq, masks=None):
    """Optimization state holding the oracle's true poses, depths and focals.

    Each edge's align pose maps camera ``t`` into the world, so the scaled
    pair pointmaps land exactly on the global pointmaps.
    """
    from dynrecon.optim import make_state

    edges = seq.graph.edges
    return make_state(
        seq.graph, seq.spec.resolution, seq.poses, seq.depths, [k.focal for k in seq.intrinsics],
        edge_scales=np.ones(len(edges)), edge_poses=[seq.poses[e[0]].inverse() for e in edges],
        masks=gt_static_masks(seq) if masks is None else masks,
    )


@pytest.fixture(scope="session")
def pnp_seq():
    """256x192 scene with a large mover reported where it was at time t ("frozen"),
    so its pixels are PnP outliers in the second pointmap."""
    spec = make_scene(num_frames=30, height=192, width=256, focal=240.0, dynamic_radius=0.9)
    return render_sequence(spec, build_window_graph(30, 9, 1), dynamic_pairs="frozen")


def true_outlier_fraction(seq, edge, threshold: float = 2.0) -> float:
    """Share of the second frame's pixels that reproject beyond ``threshold``
    under the true relative pose."""
    from dynrecon.geom import pixel_grid, project

    pair = seq.pairs[edge]
    k = seq.intrinsics[edge[1]]
    cam = seq.relative_poses[edge].apply(pair.pointmap_other.points)
    err = np.linalg.norm(project(cam, k) - pixel_grid(k.size), axis=-1)
    return float((err >= threshold).mean())


@pytest.fixture(scope="session")
def noisy30_run(scene30):
    """The acceptance scene with 2% depth noise, optimized once with defaults."""
    import time

    from dynrecon.oracle import NoiseSpec, perturb
    from dynrecon.optim import run_global_optimization

    noisy = perturb(scene30, NoiseSpec(0.02), seed=0)
    start = time.perf_counter()
    result = run_global_optimization(scene30.graph, noisy.pairs, scene30.flows)
    return noisy, result, time.perf_counter() - start
