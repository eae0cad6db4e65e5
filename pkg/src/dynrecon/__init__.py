"""Dynamic-scene reconstruction by global alignment of pairwise pointmaps.

Modules:
    geom      cameras, poses and per-pixel grids
    graph     sliding-window frame graphs
    pairwise  focal, relative pose and static-mask estimation per edge
    optim     global objective and its optimization
    oracle    ray-cast synthetic scenes with exact ground truth
    evalkit   trajectory and depth metrics
    cli       file formats and the ``dynrecon`` command
"""

__version__ = "0.1.0"
