"""Continual optimization: a full joint fit on chunk 0, then factor-only fits
for every later chunk. Chunk k >= 1 trains nothing but the low-rank plane
factors; Gaussians, embeddings, decoder and base planes stay bytewise frozen.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .datasets import MultiViewDataset, split_train_eval
from .deform import TriPlane, deform_backward, deform_forward
from .errors import ParameterError
from .gaussians import Gaussians, quaternion_to_rotation
from .losses import dssim, loss, psnr
from .lowrank import LowRankFactor, factor_init
from .model import ModelConfig, ModelState, init_model
from .rasterizer import RenderSettings, rasterize, rasterize_backward


@dataclass
class TrainConfig:
    chunk_length: int = 50
    base_iterations: int = 3000
    delta_iterations: int = 800
    # per-group learning rates; centers decay exponentially to lr_centers_final
    lr_centers: float = 1.6e-4
    lr_centers_final: float = 1.6e-6
    lr_rotations: float = 1e-3
    lr_scales: float = 5e-3
    lr_opacities: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_embeddings: float = 1e-3
    lr_planes: float = 1e-2
    lr_decoder: float = 1e-3
    lr_factors: float = 1e-2
    w_ssim: float = 0.2
    # density control (base chunk only)
    densify_interval: int = 200
    densify_start: int = 300
    densify_end: int = 1800
    densify_grad_threshold: float = 5e-5
    densify_size_threshold: float = 0.02
    split_scale_shrink: float = 1.6
    prune_opacity: float = 0.005
    max_gaussians: int = 3000
    n_init_gaussians: int = 400
    init_scale: float = 0.05
    init_opacity: float = 0.1
    seed: int = 0
    metrics_path: str | None = None
    metrics_interval: int = 100

    def __post_init__(self):
        if self.chunk_length < 1:
            raise ParameterError("chunk_length must be >= 1")
        if not 0.0 <= self.w_ssim <= 1.0:
            raise ParameterError("w_ssim must be in [0, 1]")
        for name in (
            "lr_centers", "lr_rotations", "lr_scales", "lr_opacities", "lr_sh",
            "lr_embeddings", "lr_planes", "lr_decoder", "lr_factors",
        ):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be > 0")


@dataclass
class MetricsRecord:
    per_view: list  # dicts: {camera, timestep, psnr, dssim}
    mean_psnr: float
    mean_dssim: float


class Adam:
    """Adaptive moment estimation over named parameter arrays."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t: dict = {}

    def step(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        if name not in self.m:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
            self.t[name] = 0
        self.t[name] += 1
        t = self.t[name]
        m = self.m[name]
        v = self.v[name]
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * grad * grad
        m_hat = m / (1 - self.beta1**t)
        v_hat = v / (1 - self.beta2**t)
        param -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def resize(self, name: str, keep: np.ndarray, n_new: int) -> None:
        """Keep optimizer rows for surviving splats, zero state for new ones."""
        if name not in self.m:
            return
        for store in (self.m, self.v):
            old = store[name]
            fresh = np.zeros((keep.size + n_new,) + old.shape[1:], dtype=old.dtype)
            fresh[: keep.size] = old[keep]
            store[name] = fresh


@dataclass
class BaseTrainResult:
    state: ModelState
    losses: list
    frame_start: int
    frame_count: int


@dataclass
class DeltaTrainResult:
    factors: list
    losses: list
    frame_start: int
    frame_count: int


def chunk_frame_range(chunk_index: int, chunk_length: int, total_frames: int):
    start = chunk_index * chunk_length
    if start >= total_frames:
        raise ParameterError(f"chunk {chunk_index} starts past the last frame")
    return start, min(chunk_length, total_frames - start)


def normalized_time(t: int, frame_start: int, frame_count: int) -> float:
    """Frames of one chunk map onto [0, 1]; a single frame maps to 0."""
    return (t - frame_start) / max(frame_count - 1, 1)


class _Run:
    """Shared per-chunk training scaffolding: view sampling, preloaded ground
    truth, metric emission."""

    def __init__(self, dataset: MultiViewDataset, config: TrainConfig,
                 settings: RenderSettings, frame_start: int, frame_count: int,
                 chunk_index: int):
        self.dataset = dataset
        self.config = config
        self.settings = settings
        self.frame_start = frame_start
        self.frame_count = frame_count
        self.chunk_index = chunk_index
        train, _ = split_train_eval(dataset)
        self.views = [
            (cid, t) for cid, t in train if frame_start <= t < frame_start + frame_count
        ]
        if not self.views:
            raise ParameterError("no training views in this chunk")
        self._gt = {}
        self._metrics_fh = None
        if config.metrics_path:
            self._metrics_fh = open(config.metrics_path, "a")
        self._t0 = time.perf_counter()

    def gt(self, cid: str, t: int) -> np.ndarray:
        key = (cid, t)
        if key not in self._gt:
            self._gt[key] = self.dataset.image(cid, t)
        return self._gt[key]

    def pick_view(self, rng: np.random.Generator):
        return self.views[int(rng.integers(len(self.views)))]

    def log(self, iteration: int, loss_value: float, render, gt) -> None:
        if self._metrics_fh is None:
            return
        if iteration % self.config.metrics_interval and iteration != 0:
            return
        rec = {
            "chunk": self.chunk_index,
            "iteration": iteration,
            "loss": loss_value,
            "psnr": psnr(render, gt),
            "dssim": dssim(render, gt),
            "wall_ms": (time.perf_counter() - self._t0) * 1e3,
        }
        self._metrics_fh.write(json.dumps(rec) + "\n")
        self._metrics_fh.flush()

    def close(self):
        if self._metrics_fh is not None:
            self._metrics_fh.close()


def _lr_centers(config: TrainConfig, it: int, total: int) -> float:
    if total <= 1:
        return config.lr_centers
    frac = it / max(total - 1, 1)
    return config.lr_centers * (config.lr_centers_final / config.lr_centers) ** frac


def train_base_chunk(
    dataset: MultiViewDataset,
    config: TrainConfig,
    model_config: ModelConfig,
    settings: RenderSettings | None = None,
    chunk_index: int = 0,
) -> BaseTrainResult:
    """Joint fit of Gaussians, embeddings, planes and decoder on chunk 0,
    with periodic density control. Deterministic given config.seed."""
    settings = settings or RenderSettings()
    frame_start, frame_count = chunk_frame_range(chunk_index, config.chunk_length, dataset.timesteps)
    rng = np.random.default_rng(config.seed)
    state = init_model(
        model_config, config.n_init_gaussians, rng,
        init_scale=config.init_scale, init_opacity=config.init_opacity,
    )
    run = _Run(dataset, config, settings, frame_start, frame_count, chunk_index)
    opt = Adam()
    losses = []
    grad_accum = np.zeros(len(state.gaussians))
    grad_count = 0

    try:
        for it in range(config.base_iterations):
            cid, t = run.pick_view(rng)
            gt = run.gt(cid, t)
            t_norm = normalized_time(t, frame_start, frame_count)
            g = state.gaussians
            deformed, cache = deform_forward(
                state.triplane, state.decoder, g, t_norm,
                model_config.time_freqs, model_config.use_time_encoding,
            )
            out = rasterize(deformed, dataset.cameras[cid], settings)
            lval, dimg = loss(out.color, gt, config.w_ssim)
            losses.append(lval)
            rgrads = rasterize_backward(deformed, dataset.cameras[cid], settings, dimg)
            dgrads = deform_backward(
                state.triplane, state.decoder, g, cache, rgrads, model_config.time_freqs
            )

            opt.step("centers", g.centers, dgrads.base.centers,
                     _lr_centers(config, it, config.base_iterations))
            opt.step("rotations", g.rotations, dgrads.base.rotations, config.lr_rotations)
            opt.step("log_scales", g.log_scales, dgrads.base.log_scales, config.lr_scales)
            opt.step("opacity_logits", g.opacity_logits, dgrads.base.opacity_logits,
                     config.lr_opacities)
            opt.step("sh_coeffs", g.sh_coeffs, dgrads.base.sh_coeffs, config.lr_sh)
            opt.step("embeddings", g.embeddings, dgrads.embeddings, config.lr_embeddings)
            for p in range(3):
                opt.step(f"plane{p}", state.triplane.planes[p], dgrads.planes[p],
                         config.lr_planes)
            for name, arr in state.decoder.param_arrays():
                opt.step(f"dec_{name}", arr, _decoder_grad(dgrads.decoder, name), config.lr_decoder)

            grad_accum += np.linalg.norm(dgrads.base.centers, axis=1)
            grad_count += 1
            run.log(it, lval, out.color, gt)

            due = (
                config.densify_start <= it <= config.densify_end
                and it % config.densify_interval == 0
                and it > 0
            )
            if due:
                state.gaussians, keep, n_new = densify_and_prune(
                    state.gaussians, grad_accum / max(grad_count, 1), config, rng
                )
                for name in ("centers", "rotations", "log_scales", "opacity_logits",
                             "sh_coeffs", "embeddings"):
                    opt.resize(name, keep, n_new)
                grad_accum = np.zeros(len(state.gaussians))
                grad_count = 0
    finally:
        run.close()
    return BaseTrainResult(state=state, losses=losses, frame_start=frame_start,
                           frame_count=frame_count)


def _decoder_grad(dec_grads, name: str) -> np.ndarray:
    for n, arr in dec_grads.param_arrays():
        if n == name:
            return arr
    raise KeyError(name)


def effective_planes(base: TriPlane, factors) -> TriPlane:
    planes = [np.asarray(p, dtype=np.float64).copy() for p in base.planes]
    for f in factors:
        planes[f.plane][f.channel] += f.u.astype(np.float64) @ f.v.astype(np.float64).T
    return TriPlane(planes=planes, bounds=base.bounds)


def train_delta_chunk(
    state: ModelState,
    dataset: MultiViewDataset,
    config: TrainConfig,
    chunk_index: int,
    settings: RenderSettings | None = None,
) -> DeltaTrainResult:
    """Optimize ONLY low-rank factor entries against chunk `chunk_index`.

    `state` is the reconstructed model after chunk_index - 1; none of its
    arrays are written. Time is re-normalized to [0, 1] over the new chunk.
    """
    if chunk_index < 1:
        raise ParameterError("delta chunks start at index 1")
    settings = settings or RenderSettings()
    cfg = state.config
    frame_start, frame_count = chunk_frame_range(chunk_index, config.chunk_length, dataset.timesteps)
    rng = np.random.default_rng(config.seed + chunk_index)
    run = _Run(dataset, config, settings, frame_start, frame_count, chunk_index)
    r = cfg.plane_resolution
    factors = [
        factor_init(r, r, cfg.rank, rng, plane=p, channel=c, chunk_index=chunk_index)
        for p in range(3)
        for c in range(cfg.plane_features)
    ]
    opt = Adam()
    losses = []
    g = state.gaussians
    try:
        for it in range(config.delta_iterations):
            cid, t = run.pick_view(rng)
            gt = run.gt(cid, t)
            t_norm = normalized_time(t, frame_start, frame_count)
            planes_eff = effective_planes(state.triplane, factors)
            deformed, cache = deform_forward(
                planes_eff, state.decoder, g, t_norm, cfg.time_freqs, cfg.use_time_encoding
            )
            out = rasterize(deformed, dataset.cameras[cid], settings)
            lval, dimg = loss(out.color, gt, config.w_ssim)
            losses.append(lval)
            rgrads = rasterize_backward(deformed, dataset.cameras[cid], settings, dimg)
            dgrads = deform_backward(planes_eff, state.decoder, g, cache, rgrads, cfg.time_freqs)
            for i, f in enumerate(factors):
                g_ch = dgrads.planes[f.plane][f.channel]
                opt.step(f"u{i}", f.u, g_ch @ f.v, config.lr_factors)
                opt.step(f"v{i}", f.v, g_ch.T @ f.u, config.lr_factors)
            run.log(it, lval, out.color, gt)
    finally:
        run.close()
    return DeltaTrainResult(factors=factors, losses=losses, frame_start=frame_start,
                            frame_count=frame_count)


def densify_and_prune(
    gaussians: Gaussians,
    avg_grad_norm: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator,
):
    """Clone small high-gradient splats, split large ones (children sampled
    inside the parent, scales shrunk), prune transparent ones.

    Returns (new gaussians, indices of surviving originals, number of added
    splats); the survivors keep their optimizer state.
    """
    n = len(gaussians)
    high = avg_grad_norm > config.densify_grad_threshold
    sizes = np.exp(gaussians.log_scales).max(axis=1)
    room = max(config.max_gaussians - n, 0)
    clone_mask = high & (sizes <= config.densify_size_threshold)
    split_mask = high & (sizes > config.densify_size_threshold)
    clone_idx = np.nonzero(clone_mask)[0]
    split_idx = np.nonzero(split_mask)[0]
    if clone_idx.size + 2 * split_idx.size > room:
        # densify only as many as the cap allows, highest gradient first
        order = np.argsort(-avg_grad_norm)
        budget = room
        keep_c, keep_s = [], []
        for i in order:
            if clone_mask[i] and budget >= 1:
                keep_c.append(i)
                budget -= 1
            elif split_mask[i] and budget >= 2:
                keep_s.append(i)
                budget -= 2
        clone_idx = np.array(sorted(keep_c), dtype=int)
        split_idx = np.array(sorted(keep_s), dtype=int)

    opacity = 1.0 / (1.0 + np.exp(-gaussians.opacity_logits))
    prune = opacity < config.prune_opacity
    prune[split_idx] = True  # split parents are replaced by their children
    keep = np.nonzero(~prune)[0]

    parts = {f: [getattr(gaussians, f)[keep]] for f in (
        "centers", "rotations", "log_scales", "opacity_logits", "sh_coeffs", "embeddings")}

    def append(idx, centers, log_scales):
        parts["centers"].append(centers)
        parts["rotations"].append(gaussians.rotations[idx])
        parts["log_scales"].append(log_scales)
        parts["opacity_logits"].append(gaussians.opacity_logits[idx])
        parts["sh_coeffs"].append(gaussians.sh_coeffs[idx])
        parts["embeddings"].append(gaussians.embeddings[idx])

    if clone_idx.size:
        append(clone_idx, gaussians.centers[clone_idx], gaussians.log_scales[clone_idx])
    n_new = clone_idx.size
    if split_idx.size:
        rot = quaternion_to_rotation(gaussians.rotations[split_idx])
        s = np.exp(gaussians.log_scales[split_idx])
        for _ in range(2):
            noise = rng.normal(size=(split_idx.size, 3))
            offsets = np.einsum("nij,nj->ni", rot, s * noise)
            append(
                split_idx,
                gaussians.centers[split_idx] + offsets,
                gaussians.log_scales[split_idx] - np.log(config.split_scale_shrink),
            )
        n_new += 2 * split_idx.size

    new = Gaussians(**{f: np.concatenate(v, axis=0) for f, v in parts.items()})
    return new, keep, n_new


def evaluate_views(
    state: ModelState,
    dataset: MultiViewDataset,
    views,
    frame_start: int,
    frame_count: int,
    settings: RenderSettings | None = None,
    factors=None,
) -> MetricsRecord:
    """Per-view PSNR/DSSIM of the (optionally factor-adapted) state."""
    settings = settings or RenderSettings()
    cfg = state.config
    planes = effective_planes(state.triplane, factors) if factors else state.triplane
    rows = []
    for cid, t in views:
        t_norm = normalized_time(t, frame_start, frame_count)
        deformed, _ = deform_forward(
            planes, state.decoder, state.gaussians, t_norm, cfg.time_freqs, cfg.use_time_encoding
        )
        out = rasterize(deformed, dataset.cameras[cid], settings)
        gt = dataset.image(cid, t)
        rows.append(
            {"camera": cid, "timestep": t, "psnr": psnr(out.color, gt), "dssim": dssim(out.color, gt)}
        )
    return MetricsRecord(
        per_view=rows,
        mean_psnr=float(np.mean([r["psnr"] for r in rows])) if rows else float("nan"),
        mean_dssim=float(np.mean([r["dssim"] for r in rows])) if rows else float("nan"),
    )
