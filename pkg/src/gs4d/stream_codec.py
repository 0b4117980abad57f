"""Binary chunk-stream codec: a full base model in chunk 0 and low-rank
factor deltas afterwards, plus cumulative state reconstruction and
bandwidth accounting.

The byte layout is specified bit-exactly in docs/format.md. Everything is
little-endian; floats are stored as f32 (factors optionally f16).
"""
from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .deform import DeformDecoder, TriPlane
from .errors import (
    BadMagicError,
    ChecksumError,
    MissingChunkError,
    ProtocolError,
    ShapeError,
    TruncatedChunkError,
    VersionMismatchError,
)
from .gaussians import Gaussians
from .lowrank import LowRankFactor
from .model import ModelConfig, ModelState

MAGIC = b"GS4D"
VERSION = 1
KIND_BASE = 0
KIND_DELTA = 1
KIND_NAMES = {KIND_BASE: "base", KIND_DELTA: "delta"}

HEADER = struct.Struct("<4sHIIIBQI")  # 31 bytes
CONFIG_BLOCK = struct.Struct("<IBHHHBHB6f")  # 39 bytes
FACTOR_RECORD = struct.Struct("<BHHII")  # 13 bytes
DELTA_PREAMBLE = struct.Struct("<BI")  # 5 bytes

PRECISIONS = {"f32": 0, "f16": 1}
PRECISION_NAMES = {v: k for k, v in PRECISIONS.items()}
PRECISION_DTYPES = {"f32": "<f4", "f16": "<f2"}


@dataclass
class ChunkHeader:
    chunk_index: int
    frame_start: int
    frame_count: int
    payload_kind: int
    payload_bytes: int
    checksum: int

    @property
    def kind_name(self) -> str:
        return KIND_NAMES[self.payload_kind]


@dataclass
class ChunkPayload:
    """Decoded chunk: a full model state (base) or a factor list (delta)."""

    header: ChunkHeader
    state: ModelState | None = None
    factors: list | None = None
    precision: str | None = None


def _pack(header_fields, payload: bytes) -> bytes:
    chunk_index, frame_start, frame_count, kind = header_fields
    head = HEADER.pack(
        MAGIC, VERSION, chunk_index, frame_start, frame_count, kind,
        len(payload), zlib.crc32(payload),
    )
    return head + payload


def _f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def encode_base_chunk(state: ModelState, frame_count: int, frame_start: int = 0) -> bytes:
    """Chunk 0: config block, Gaussian arrays (SoA), plane tensors, decoder weights."""
    cfg = state.config
    g = state.gaussians
    n = len(g)
    lo, hi = cfg.bounds
    parts = [
        CONFIG_BLOCK.pack(
            n, cfg.sh_degree, cfg.embed_dim, cfg.plane_resolution, cfg.plane_features,
            cfg.time_freqs, cfg.hidden, int(cfg.use_time_encoding),
            *[float(v) for v in lo], *[float(v) for v in hi],
        ),
        _f32_bytes(g.centers),
        _f32_bytes(g.rotations),
        _f32_bytes(g.log_scales),
        _f32_bytes(g.opacity_logits),
        _f32_bytes(g.sh_coeffs),
        _f32_bytes(g.embeddings),
    ]
    parts.extend(_f32_bytes(p) for p in state.triplane.planes)
    parts.extend(_f32_bytes(arr) for _, arr in state.decoder.param_arrays())
    return _pack((0, frame_start, frame_count, KIND_BASE), b"".join(parts))


def encode_delta_chunk(
    factors,
    chunk_index: int,
    frame_start: int,
    frame_count: int,
    precision: str = "f32",
) -> bytes:
    """Chunk k >= 1: per-factor records with the (U, V) pair for each target."""
    if chunk_index == 0:
        raise ProtocolError("chunk 0 must be a base chunk")
    if precision not in PRECISIONS:
        raise ProtocolError(f"unknown precision {precision!r}")
    dtype = PRECISION_DTYPES[precision]
    parts = [DELTA_PREAMBLE.pack(PRECISIONS[precision], len(factors))]
    for f in factors:
        m, rank = f.u.shape
        n = f.v.shape[0]
        parts.append(FACTOR_RECORD.pack(f.plane, f.channel, rank, m, n))
        parts.append(np.ascontiguousarray(f.u, dtype=dtype).tobytes())
        parts.append(np.ascontiguousarray(f.v, dtype=dtype).tobytes())
    return _pack((chunk_index, frame_start, frame_count, KIND_DELTA), b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise TruncatedChunkError(
                f"payload ends at byte {len(self.data)}, needed {self.pos + count}"
            )
        out = self.data[self.pos : self.pos + count]
        self.pos += count
        return out

    def array(self, dtype: str, shape) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        raw = self.take(count * np.dtype(dtype).itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def parse_header(data: bytes, offset: int = 0) -> ChunkHeader:
    if len(data) - offset < HEADER.size:
        raise TruncatedChunkError("chunk shorter than its header")
    magic, version, chunk_index, frame_start, frame_count, kind, payload_bytes, checksum = (
        HEADER.unpack_from(data, offset)
    )
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"stream version {version}, expected {VERSION}")
    if kind not in KIND_NAMES:
        raise ProtocolError(f"unknown payload kind {kind}")
    return ChunkHeader(chunk_index, frame_start, frame_count, kind, payload_bytes, checksum)


def split_chunks(data: bytes) -> list[bytes]:
    """Split a concatenated stream into chunk blobs (headers are self-delimiting)."""
    out = []
    pos = 0
    while pos < len(data):
        header = parse_header(data, pos)
        end = pos + HEADER.size + header.payload_bytes
        if end > len(data):
            raise TruncatedChunkError("payload extends past end of stream")
        out.append(data[pos:end])
        pos = end
    return out


def decode_chunk(chunk: bytes) -> ChunkPayload:
    header = parse_header(chunk)
    payload = chunk[HEADER.size :]
    if len(payload) < header.payload_bytes:
        raise TruncatedChunkError(
            f"payload has {len(payload)} bytes, header promises {header.payload_bytes}"
        )
    payload = payload[: header.payload_bytes]
    if zlib.crc32(payload) != header.checksum:
        raise ChecksumError("payload checksum mismatch")
    if header.payload_kind == KIND_BASE:
        if header.chunk_index != 0:
            raise ProtocolError("base payload must be chunk 0")
        return ChunkPayload(header=header, state=_decode_base(payload))
    if header.chunk_index == 0:
        raise ProtocolError("chunk 0 cannot be a delta")
    factors, precision = _decode_delta(payload, header.chunk_index)
    return ChunkPayload(header=header, factors=factors, precision=precision)


def parse_base_config(payload: bytes) -> tuple[ModelConfig, int]:
    if len(payload) < CONFIG_BLOCK.size:
        raise TruncatedChunkError("base payload shorter than its config block")
    (n, sh_degree, embed_dim, r, f, time_freqs, hidden, use_enc, *bounds) = (
        CONFIG_BLOCK.unpack_from(payload)
    )
    cfg = ModelConfig(
        plane_resolution=r,
        plane_features=f,
        embed_dim=embed_dim,
        time_freqs=time_freqs,
        hidden=hidden,
        sh_degree=sh_degree,
        use_time_encoding=bool(use_enc),
        bounds=np.array(bounds, dtype=np.float64).reshape(2, 3),
    )
    return cfg, n


def _decode_base(payload: bytes) -> ModelState:
    cfg, n = parse_base_config(payload)
    rd = _Reader(payload)
    rd.take(CONFIG_BLOCK.size)
    k = cfg.n_sh_coeffs
    gaussians = Gaussians(
        centers=rd.array("<f4", (n, 3)),
        rotations=rd.array("<f4", (n, 4)),
        log_scales=rd.array("<f4", (n, 3)),
        opacity_logits=rd.array("<f4", (n,)),
        sh_coeffs=rd.array("<f4", (n, k, 3)),
        embeddings=rd.array("<f4", (n, cfg.embed_dim)),
    )
    r, f = cfg.plane_resolution, cfg.plane_features
    planes = [rd.array("<f4", (f, r, r)) for _ in range(3)]
    triplane = TriPlane(planes=planes, bounds=cfg.bounds)
    in_dim, hidden = cfg.decoder_in_dim, cfg.hidden
    from .deform import HEAD_WIDTHS

    decoder = DeformDecoder(
        w1=rd.array("<f4", (in_dim, hidden)),
        b1=rd.array("<f4", (hidden,)),
        w2=rd.array("<f4", (hidden, hidden)),
        b2=rd.array("<f4", (hidden,)),
        head_w=[],
        head_b=[],
    )
    for w in HEAD_WIDTHS:
        decoder.head_w.append(rd.array("<f4", (hidden, w)))
        decoder.head_b.append(rd.array("<f4", (w,)))
    if rd.pos != len(payload):
        raise TruncatedChunkError(f"{len(payload) - rd.pos} unexpected trailing bytes")
    return ModelState(gaussians=gaussians, triplane=triplane, decoder=decoder, config=cfg)


def _decode_delta(payload: bytes, chunk_index: int):
    rd = _Reader(payload)
    prec_code, count = DELTA_PREAMBLE.unpack(rd.take(DELTA_PREAMBLE.size))
    if prec_code not in PRECISION_NAMES:
        raise ProtocolError(f"unknown precision code {prec_code}")
    precision = PRECISION_NAMES[prec_code]
    dtype = PRECISION_DTYPES[precision]
    factors = []
    for _ in range(count):
        plane, channel, rank, m, n = FACTOR_RECORD.unpack(rd.take(FACTOR_RECORD.size))
        u = rd.array(dtype, (m, rank)).astype(np.float32)
        v = rd.array(dtype, (n, rank)).astype(np.float32)
        factors.append(LowRankFactor(u=u, v=v, plane=plane, channel=channel, chunk_index=chunk_index))
    if rd.pos != len(payload):
        raise TruncatedChunkError(f"{len(payload) - rd.pos} unexpected trailing bytes")
    return factors, precision


# --- stream files ---

def write_stream(path, chunks) -> None:
    with open(path, "wb") as fh:
        for c in chunks:
            fh.write(c)


def append_chunk(path, chunk: bytes) -> None:
    with open(path, "ab") as fh:
        fh.write(chunk)


def read_stream(path) -> list[bytes]:
    """Chunk blobs from a stream file, or from every .gs4d file (sorted) in a
    directory."""
    if os.path.isdir(path):
        data = b""
        for name in sorted(os.listdir(path)):
            if name.endswith(".gs4d"):
                with open(os.path.join(path, name), "rb") as fh:
                    data += fh.read()
    else:
        with open(path, "rb") as fh:
            data = fh.read()
    return split_chunks(data)


# --- reconstruction ---

def reconstruct_state(chunks, k: int) -> ModelState:
    """Model state after applying delta chunks 1..k onto the base.

    `chunks` is a list of chunk blobs (or a stream path). Gaussians, decoder
    and embeddings come from the base; each targeted plane channel is the base
    channel plus the cumulative sum of its U V^T updates, in chunk order,
    accumulated in float64.
    """
    if isinstance(chunks, (str, os.PathLike)):
        chunks = read_stream(chunks)
    by_index = {}
    for blob in chunks:
        header = parse_header(blob)
        by_index.setdefault(header.chunk_index, blob)
    if 0 not in by_index:
        raise MissingChunkError("stream has no base chunk")
    base = decode_chunk(by_index[0])
    state = base.state
    planes = [p.astype(np.float64) for p in state.triplane.planes]
    for j in range(1, k + 1):
        if j not in by_index:
            raise MissingChunkError(f"chunk {j} missing; continual chain is order-dependent")
        payload = decode_chunk(by_index[j])
        if payload.factors is None:
            raise ProtocolError(f"chunk {j} is not a delta chunk")
        for f in payload.factors:
            target = planes[f.plane][f.channel]
            if target.shape != (f.u.shape[0], f.v.shape[0]):
                raise ShapeError("factor does not match plane channel shape")
            target += f.u.astype(np.float64) @ f.v.astype(np.float64).T
    state.triplane = TriPlane(planes=planes, bounds=state.triplane.bounds)
    return state


# --- bandwidth accounting ---

@dataclass
class BandwidthReport:
    chunks: list  # per-chunk dicts
    base_payload_bytes: int
    delta_payload_bytes_total: int
    mean_delta_payload_bytes: float | None
    full_plane_bytes: int | None
    reduction_ratio: float | None
    stream_bytes: int

    def to_dict(self) -> dict:
        return {
            "chunks": self.chunks,
            "base_payload_bytes": self.base_payload_bytes,
            "delta_payload_bytes_total": self.delta_payload_bytes_total,
            "mean_delta_payload_bytes": self.mean_delta_payload_bytes,
            "full_plane_bytes": self.full_plane_bytes,
            "reduction_ratio": self.reduction_ratio,
            "stream_bytes": self.stream_bytes,
        }


def bandwidth_report(chunks) -> BandwidthReport:
    """Byte accounting over a stream. Works from headers plus the base chunk's
    config block; delta payloads are never parsed, so synthetic or foreign
    payloads still get accounted.

    Per-chunk bytes are payload bytes (headers excluded); bytes per frame is
    payload_bytes / frame_count.
    """
    if isinstance(chunks, (str, os.PathLike)):
        chunks = read_stream(chunks)
    rows = []
    base_payload = 0
    delta_total = 0
    deltas = []
    full_plane_bytes = None
    stream_bytes = 0
    for blob in chunks:
        header = parse_header(blob)
        payload = blob[HEADER.size : HEADER.size + header.payload_bytes]
        if zlib.crc32(payload) != header.checksum:
            raise ChecksumError(f"chunk {header.chunk_index} payload checksum mismatch")
        stream_bytes += len(blob)
        per_frame = header.payload_bytes / header.frame_count
        rows.append(
            {
                "chunk_index": header.chunk_index,
                "kind": header.kind_name,
                "frame_start": header.frame_start,
                "frame_count": header.frame_count,
                "payload_bytes": header.payload_bytes,
                "total_bytes": len(blob),
                "bytes_per_frame": per_frame,
                "payload_mb": header.payload_bytes / 1e6,
                "mb_per_frame": per_frame / 1e6,
            }
        )
        if header.payload_kind == KIND_BASE:
            base_payload += header.payload_bytes
            cfg, _ = parse_base_config(payload)
            full_plane_bytes = 3 * cfg.plane_features * cfg.plane_resolution**2 * 4
        else:
            delta_total += header.payload_bytes
            deltas.append(header.payload_bytes)
    mean_delta = float(np.mean(deltas)) if deltas else None
    reduction = None
    if mean_delta is not None and full_plane_bytes:
        reduction = 1.0 - mean_delta / full_plane_bytes
    return BandwidthReport(
        chunks=rows,
        base_payload_bytes=base_payload,
        delta_payload_bytes_total=delta_total,
        mean_delta_payload_bytes=mean_delta,
        full_plane_bytes=full_plane_bytes,
        reduction_ratio=reduction,
        stream_bytes=stream_bytes,
    )
