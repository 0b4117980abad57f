"""Streaming dynamic Gaussian-splat scenes with low-rank plane-adaptation
deltas: fit a splat set plus tri-plane deformation field on the first video
chunk, then stream only rank-limited factor updates for every later chunk."""

from .gaussians import Camera, Gaussians, build_covariance, compute_jacobian, project_covariance
from .sh import eval_sh
from .rasterizer import RenderOutput, RenderSettings, rasterize, rasterize_backward
from .deform import (
    DeformDecoder,
    DeformOutput,
    TriPlane,
    apply_deformation,
    decode_deformation,
    freq_encode,
    sample_triplane,
)
from .lowrank import LowRankFactor, SvdTruncation, compose_adaptation, factor_init, storage_saving, truncated_svd
from .model import ModelConfig, ModelState, init_model
from .stream_codec import (
    BandwidthReport,
    ChunkHeader,
    ChunkPayload,
    bandwidth_report,
    decode_chunk,
    encode_base_chunk,
    encode_delta_chunk,
    read_stream,
    reconstruct_state,
    write_stream,
)
from .losses import dssim, loss, psnr, ssim
from .trainer import MetricsRecord, TrainConfig, densify_and_prune, train_base_chunk, train_delta_chunk
from .datasets import MultiViewDataset, load_multiview, save_dataset, split_train_eval, synth_scene

__version__ = "0.1.0"
