"""Run configuration read from plain ``key = value`` text files."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from ..optim import OptimSchedule
from ..pairwise import RansacParams
from .formats import FormatError, parse_key_values


class ConfigError(ValueError):
    pass


_SCHEDULE = OptimSchedule()
_RANSAC = RansacParams()


@dataclass
class RunConfig:
    # graph
    window: int = 9
    stride: int = 2
    symmetric: bool = True
    # optimization
    iterations: int = _SCHEDULE.iterations
    learning_rate: float = _SCHEDULE.learning_rate
    w_smooth: float = _SCHEDULE.w_smooth
    w_flow: float = _SCHEDULE.w_flow
    flow_enable_threshold: float = _SCHEDULE.flow_enable_threshold
    mask_update_threshold: float = _SCHEDULE.mask_update_threshold
    mask_update_interval: int = _SCHEDULE.mask_update_interval
    adam_beta1: float = _SCHEDULE.adam_betas[0]
    adam_beta2: float = _SCHEDULE.adam_betas[1]
    adam_eps: float = _SCHEDULE.adam_eps
    lr_schedule: str = _SCHEDULE.lr_schedule
    lr_min: float = _SCHEDULE.lr_min
    shared_focal: bool = _SCHEDULE.shared_focal
    # pairwise
    ransac_iterations: int = _RANSAC.iterations
    ransac_threshold: float = _RANSAC.threshold
    ransac_confidence_weighted: bool = _RANSAC.confidence_weighted
    ransac_confidence: float = _RANSAC.confidence
    alpha: Optional[float] = None  # None: 1% of the image diagonal
    # evaluation
    align_mode: str = "scale_shift"
    # synthetic scenes
    scene_preset: str = "dolly_orbit"
    scene_frames: int = 30
    scene_height: int = 48
    scene_width: int = 64
    scene_focal: float = 60.0
    scene_dynamic: bool = True
    scene_depth_sigma: float = 0.0
    scene_confidence_floor: float = 0.05
    scene_dynamic_pairs: str = "timestep"
    # paths and randomness
    input: Optional[str] = None
    output: Optional[str] = None
    seed: int = 0

    def schedule(self) -> OptimSchedule:
        return OptimSchedule(
            iterations=self.iterations, learning_rate=self.learning_rate, w_smooth=self.w_smooth,
            w_flow=self.w_flow, flow_enable_threshold=self.flow_enable_threshold,
            mask_update_threshold=self.mask_update_threshold,
            mask_update_interval=self.mask_update_interval,
            adam_betas=(self.adam_beta1, self.adam_beta2), adam_eps=self.adam_eps,
            lr_schedule=self.lr_schedule, lr_min=self.lr_min, shared_focal=self.shared_focal,
        )

    def ransac(self) -> RansacParams:
        return RansacParams(self.ransac_iterations, self.ransac_threshold,
                            self.ransac_confidence_weighted, self.ransac_confidence)

    def updated(self, **overrides) -> "RunConfig":
        """Copy with the non-``None`` overrides applied."""
        return dataclasses.replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _convert(key: str, raw: str):
    default = getattr(RunConfig, key, None)
    kind = _FIELDS[key].type
    if raw.lower() in ("none", "auto", "") and ("Optional" in str(kind) or default is None):
        return None
    if "bool" in str(kind):
        try:
            return _BOOL[raw.lower()]
        except KeyError:
            raise ValueError(f"expected a boolean, got {raw!r}") from None
    if "int" in str(kind):
        return int(raw)
    if "float" in str(kind):
        return float(raw)
    return raw


def parse_config(text: str, name: str = "<config>") -> RunConfig:
    kv = parse_key_values(text, name)
    values = {}
    for key, raw in kv.items():
        if key not in _FIELDS:
            raise ConfigError(f"{name}: unknown key {key!r}")
        try:
            values[key] = _convert(key, raw)
        except ValueError as exc:
            raise ConfigError(f"{name}: bad value for {key!r}: {exc}") from None
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from None
    try:
        return parse_config(text, str(path))
    except FormatError as exc:
        raise ConfigError(str(exc)) from None
