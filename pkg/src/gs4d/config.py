"""Flat key-value run configuration: a small text format plus `--set`
overrides, resolved into the model / render / training dataclasses and echoed
into every output JSON for provenance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .model import ModelConfig
from .rasterizer import RenderSettings
from .trainer import TrainConfig


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ParameterError(f"not a boolean: {s!r}")


def _parse_triple(s: str):
    parts = [float(p) for p in s.split(",")]
    if len(parts) == 1:
        return (parts[0],) * 3
    if len(parts) != 3:
        raise ParameterError(f"expected one or three comma-separated numbers: {s!r}")
    return tuple(parts)


def _parse_optional_float(s: str):
    v = s.strip().lower()
    if v in ("none", "auto", ""):
        return None
    return float(s)


_MODEL_KEYS = {
    "plane_resolution": int,
    "plane_features": int,
    "embed_dim": int,
    "rank": int,
    "time_freqs": int,
    "hidden": int,
    "sh_degree": int,
    "use_time_encoding": _parse_bool,
    "bounds_min": _parse_triple,
    "bounds_max": _parse_triple,
}
_RENDER_KEYS = {
    "tile_size": int,
    "near_plane": float,
    "background": _parse_triple,
    "alpha_cutoff": float,
    "transmittance_floor": float,
    "max_alpha": float,
    "cull_sigma": _parse_optional_float,
}
_TRAIN_KEYS = {
    "chunk_length": int,
    "base_iterations": int,
    "delta_iterations": int,
    "lr_centers": float,
    "lr_centers_final": float,
    "lr_rotations": float,
    "lr_scales": float,
    "lr_opacities": float,
    "lr_sh": float,
    "lr_embeddings": float,
    "lr_planes": float,
    "lr_decoder": float,
    "lr_factors": float,
    "w_ssim": float,
    "densify_interval": int,
    "densify_start": int,
    "densify_end": int,
    "densify_grad_threshold": float,
    "densify_size_threshold": float,
    "split_scale_shrink": float,
    "prune_opacity": float,
    "max_gaussians": int,
    "n_init_gaussians": int,
    "init_scale": float,
    "init_opacity": float,
    "seed": int,
    "metrics_interval": int,
}


@dataclass
class RunConfig:
    model: ModelConfig
    render: RenderSettings
    train: TrainConfig

    @property
    def seed(self) -> int:
        return self.train.seed

    def to_flat(self) -> dict:
        """Resolved configuration as plain JSON-serializable key/values."""
        out = {}
        m = self.model
        out.update(
            plane_resolution=m.plane_resolution, plane_features=m.plane_features,
            embed_dim=m.embed_dim, rank=m.rank, time_freqs=m.time_freqs,
            hidden=m.hidden, sh_degree=m.sh_degree,
            use_time_encoding=m.use_time_encoding,
            bounds_min=list(map(float, m.bounds[0])),
            bounds_max=list(map(float, m.bounds[1])),
        )
        r = self.render
        out.update(
            tile_size=r.tile_size, near_plane=r.near_plane,
            background=list(map(float, r.background)), alpha_cutoff=r.alpha_cutoff,
            transmittance_floor=r.transmittance_floor, max_alpha=r.max_alpha,
            cull_sigma=r.cull_sigma,
        )
        for key in _TRAIN_KEYS:
            out[key] = getattr(self.train, key)
        return out


def parse_config_file(path: str) -> list:
    """`key = value` lines; '#' starts a comment. Returns (key, value) pairs."""
    pairs = []
    with open(path) as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParameterError(f"{path}:{ln}: expected 'key = value', got {raw!r}")
            key, value = line.split("=", 1)
            pairs.append((key.strip(), value.strip()))
    return pairs


def resolve_config(pairs) -> RunConfig:
    """Build a RunConfig from (key, value-string) pairs applied in order over
    the defaults. Unknown keys are rejected."""
    model_kw: dict = {}
    render_kw: dict = {}
    train_kw: dict = {}
    bounds = {"bounds_min": (-1.0, -1.0, -1.0), "bounds_max": (1.0, 1.0, 1.0)}
    for key, value in pairs:
        try:
            if key in ("bounds_min", "bounds_max"):
                bounds[key] = _parse_triple(value)
            elif key in _MODEL_KEYS:
                model_kw[key] = _MODEL_KEYS[key](value)
            elif key in _RENDER_KEYS:
                render_kw[key] = _RENDER_KEYS[key](value)
            elif key in _TRAIN_KEYS:
                train_kw[key] = _TRAIN_KEYS[key](value)
            else:
                raise ParameterError(f"unknown config key {key!r}")
        except ValueError as exc:
            raise ParameterError(f"bad value for {key!r}: {value!r} ({exc})") from exc
    model_kw["bounds"] = np.array([bounds["bounds_min"], bounds["bounds_max"]])
    return RunConfig(
        model=ModelConfig(**model_kw),
        render=RenderSettings(**render_kw),
        train=TrainConfig(**train_kw),
    )


def load_run_config(config_path: str | None, set_overrides) -> RunConfig:
    pairs = parse_config_file(config_path) if config_path else []
    for item in set_overrides or []:
        if "=" not in item:
            raise ParameterError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return resolve_config(pairs)
