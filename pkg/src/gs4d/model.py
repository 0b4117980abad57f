"""Model hyperparameters and the full scene state bundle
(Gaussians + tri-plane + deformation decoder)."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .deform import DeformDecoder, TriPlane, decoder_input_dim, init_decoder, init_triplane
from .errors import ParameterError
from .gaussians import Gaussians
from .sh import MAX_DEGREE, n_coeffs


@dataclass
class ModelConfig:
    plane_resolution: int = 64  # R
    plane_features: int = 8  # F
    embed_dim: int = 16  # d_e
    rank: int = 3  # low-rank factor width per plane channel
    time_freqs: int = 4  # L_t
    hidden: int = 256
    sh_degree: int = 1
    use_time_encoding: bool = True
    bounds: np.ndarray = field(
        default_factory=lambda: np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
    )

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=np.float64)
        if self.plane_resolution < 2:
            raise ParameterError("plane_resolution must be >= 2")
        if self.plane_features < 1:
            raise ParameterError("plane_features must be >= 1")
        if self.embed_dim < 1:
            raise ParameterError("embed_dim must be >= 1")
        if not 1 <= self.rank <= self.plane_resolution:
            raise ParameterError("rank must be in [1, plane_resolution]")
        if self.time_freqs < 0:
            raise ParameterError("time_freqs must be >= 0")
        if self.hidden < 1:
            raise ParameterError("hidden must be >= 1")
        if not 0 <= self.sh_degree <= MAX_DEGREE:
            raise ParameterError(f"sh_degree must be in [0, {MAX_DEGREE}]")

    @property
    def n_sh_coeffs(self) -> int:
        return n_coeffs(self.sh_degree)

    @property
    def decoder_in_dim(self) -> int:
        return decoder_input_dim(
            self.plane_features, self.embed_dim, self.time_freqs, self.use_time_encoding
        )


@dataclass
class ModelState:
    gaussians: Gaussians
    triplane: TriPlane
    decoder: DeformDecoder
    config: ModelConfig

    def copy(self) -> "ModelState":
        return ModelState(
            gaussians=self.gaussians.copy(),
            triplane=self.triplane.copy(),
            decoder=self.decoder.copy(),
            config=replace(self.config, bounds=self.config.bounds.copy()),
        )


def init_gaussians(
    config: ModelConfig,
    n: int,
    rng: np.random.Generator,
    init_scale: float = 0.05,
    init_opacity: float = 0.1,
) -> Gaussians:
    lo, hi = config.bounds
    sh = np.zeros((n, config.n_sh_coeffs, 3))
    sh[:, 0, :] = rng.normal(0.0, 0.3, (n, 3))
    return Gaussians(
        centers=rng.uniform(lo, hi, (n, 3)),
        rotations=np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1)),
        log_scales=np.full((n, 3), np.log(init_scale)),
        opacity_logits=np.full(n, np.log(init_opacity / (1.0 - init_opacity))),
        sh_coeffs=sh,
        embeddings=rng.normal(0.0, 0.01, (n, config.embed_dim)),
    )


def init_model(config: ModelConfig, n_gaussians: int, rng: np.random.Generator, **kw) -> ModelState:
    return ModelState(
        gaussians=init_gaussians(config, n_gaussians, rng, **kw),
        triplane=init_triplane(config.plane_resolution, config.plane_features, config.bounds, rng),
        decoder=init_decoder(config.decoder_in_dim, config.hidden, rng),
        config=config,
    )
