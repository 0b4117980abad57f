import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gs4d.errors import (
    BadMagicError,
    ChecksumError,
    MissingChunkError,
    ProtocolError,
    TruncatedChunkError,
    VersionMismatchError,
)
from gs4d.lowrank import LowRankFactor
from gs4d.model import ModelConfig, ModelState, init_model
from gs4d.stream_codec import (
    HEADER,
    MAGIC,
    bandwidth_report,
    decode_chunk,
    encode_base_chunk,
    encode_delta_chunk,
    parse_header,
    read_stream,
    reconstruct_state,
    split_chunks,
    write_stream,
)


def small_config(**kw):
    args = dict(
        plane_resolution=6, plane_features=2, embed_dim=3, rank=2,
        time_freqs=1, hidden=4, sh_degree=1,
    )
    args.update(kw)
    return ModelConfig(**args)


def f32_state(seed=0, n=5, **cfg_kw) -> ModelState:
    """Random model whose arrays are all exactly f32-representable."""
    rng = np.random.default_rng(seed)
    state = init_model(small_config(**cfg_kw), n, rng)
    # randomize everything, then quantize to f32
    g = state.gaussians
    g.centers[:] = rng.normal(size=g.centers.shape)
    g.rotations[:] = rng.normal(size=g.rotations.shape)
    g.log_scales[:] = rng.normal(size=g.log_scales.shape)
    g.opacity_logits[:] = rng.normal(size=g.opacity_logits.shape)
    g.sh_coeffs[:] = rng.normal(size=g.sh_coeffs.shape)
    g.embeddings[:] = rng.normal(size=g.embeddings.shape)
    for (_, arr) in state.decoder.param_arrays():
        arr[:] = rng.normal(size=arr.shape)

    def q(a):
        return a.astype(np.float32)

    g.centers = q(g.centers)
    g.rotations = q(g.rotations)
    g.log_scales = q(g.log_scales)
    g.opacity_logits = q(g.opacity_logits)
    g.sh_coeffs = q(g.sh_coeffs)
    g.embeddings = q(g.embeddings)
    state.triplane.planes = [q(p) for p in state.triplane.planes]
    dec = state.decoder
    dec.w1, dec.b1, dec.w2, dec.b2 = q(dec.w1), q(dec.b1), q(dec.w2), q(dec.b2)
    dec.head_w = [q(w) for w in dec.head_w]
    dec.head_b = [q(b) for b in dec.head_b]
    return state


def random_factors(rng, cfg, chunk_index, scale=0.02):
    factors = []
    r = cfg.plane_resolution
    for plane in range(3):
        for ch in range(cfg.plane_features):
            factors.append(
                LowRankFactor(
                    u=rng.normal(0, scale, (r, cfg.rank)).astype(np.float32),
                    v=rng.normal(0, scale, (r, cfg.rank)).astype(np.float32),
                    plane=plane,
                    channel=ch,
                    chunk_index=chunk_index,
                )
            )
    return factors


def assert_states_equal(a: ModelState, b: ModelState, exact=True):
    eq = np.array_equal if exact else lambda x, y: np.allclose(x, y, atol=1e-6)
    assert eq(a.gaussians.centers, b.gaussians.centers)
    assert eq(a.gaussians.rotations, b.gaussians.rotations)
    assert eq(a.gaussians.log_scales, b.gaussians.log_scales)
    assert eq(a.gaussians.opacity_logits, b.gaussians.opacity_logits)
    assert eq(a.gaussians.sh_coeffs, b.gaussians.sh_coeffs)
    assert eq(a.gaussians.embeddings, b.gaussians.embeddings)
    for pa, pb in zip(a.triplane.planes, b.triplane.planes):
        assert eq(pa, pb)
    for (_, wa), (_, wb) in zip(a.decoder.param_arrays(), b.decoder.param_arrays()):
        assert eq(wa, wb)
    assert a.config.plane_resolution == b.config.plane_resolution
    assert a.config.sh_degree == b.config.sh_degree


class TestBaseChunk:
    def test_empty_scene_roundtrip(self):
        state = f32_state(n=0)
        blob = encode_base_chunk(state, frame_count=10)
        decoded = decode_chunk(blob)
        assert decoded.header.kind_name == "base"
        assert len(decoded.state.gaussians) == 0
        assert_states_equal(state, decoded.state)

    def test_bitwise_roundtrip_and_reencode(self):
        state = f32_state(seed=1)
        blob = encode_base_chunk(state, frame_count=50)
        decoded = decode_chunk(blob)
        assert_states_equal(state, decoded.state)
        blob2 = encode_base_chunk(decoded.state, frame_count=50)
        assert blob == blob2

    def test_payload_size_matches_closed_form(self):
        # formula from docs/format.md, written out independently here
        state = f32_state(seed=2, n=7)
        cfg = state.config
        blob = encode_base_chunk(state, frame_count=50)
        header = parse_header(blob)
        n, k, de = 7, cfg.n_sh_coeffs, cfg.embed_dim
        r, f, h = cfg.plane_resolution, cfg.plane_features, cfg.hidden
        in_dim = 3 * f + de + 2 * cfg.time_freqs
        decoder_params = in_dim * h + h + h * h + h + sum(h * w + w for w in (3, 4, 3, 1, 3))
        expect = 39 + 4 * n * (3 + 4 + 3 + 1 + 3 * k + de) + 3 * 4 * f * r * r + 4 * decoder_params
        assert header.payload_bytes == expect
        assert len(blob) == 31 + expect

    def test_header_promises_actual_payload_length(self):
        state = f32_state(seed=3)
        blob = encode_base_chunk(state, frame_count=50)
        header = parse_header(blob)
        assert header.payload_bytes == len(blob) - HEADER.size


class TestDeltaChunk:
    def test_zero_factors_header_only_payload(self):
        blob = encode_delta_chunk([], chunk_index=1, frame_start=50, frame_count=50)
        decoded = decode_chunk(blob)
        assert decoded.factors == []
        assert decoded.header.payload_bytes == 5  # precision byte + count

    def test_chunk_zero_rejected(self):
        with pytest.raises(ProtocolError):
            encode_delta_chunk([], chunk_index=0, frame_start=0, frame_count=50)

    def test_f32_payload_size_formula(self):
        rng = np.random.default_rng(4)
        cfg = small_config()
        factors = random_factors(rng, cfg, 1)
        blob = encode_delta_chunk(factors, 1, 50, 50)
        header = parse_header(blob)
        r = cfg.plane_resolution
        expect = 5 + sum(13 + 4 * cfg.rank * (r + r) for _ in factors)
        assert header.payload_bytes == expect

    def test_default_config_bandwidth_arithmetic(self):
        # R=64, F=8, rank 3, f32: factor data 24 * 4*3*128 bytes versus a full
        # plane retransmission of 24 * 4*4096 bytes -> 90.625% saved
        rng = np.random.default_rng(5)
        cfg = ModelConfig()  # defaults
        factors = random_factors(rng, cfg, 1)
        assert len(factors) == 24
        data_bytes = sum(4 * f.rank * (f.u.shape[0] + f.v.shape[0]) for f in factors)
        assert data_bytes == 24 * 4 * 3 * 128 == 36864
        full = 24 * 4 * 64 * 64
        assert full == 393216
        assert 1 - data_bytes / full == 0.90625

    def test_f32_bitwise_roundtrip(self):
        rng = np.random.default_rng(6)
        cfg = small_config()
        factors = random_factors(rng, cfg, 3)
        blob = encode_delta_chunk(factors, 3, 150, 50)
        decoded = decode_chunk(blob)
        assert decoded.precision == "f32"
        for a, b in zip(factors, decoded.factors):
            assert np.array_equal(a.u, b.u) and np.array_equal(a.v, b.v)
            assert (a.plane, a.channel) == (b.plane, b.channel)
            assert b.chunk_index == 3

    def test_f16_roundtrip_within_ulp_bound(self):
        rng = np.random.default_rng(7)
        cfg = small_config()
        factors = random_factors(rng, cfg, 1, scale=0.01)
        blob = encode_delta_chunk(factors, 1, 50, 50, precision="f16")
        decoded = decode_chunk(blob)
        assert decoded.precision == "f16"
        for a, b in zip(factors, decoded.factors):
            for x, y in ((a.u, b.u), (a.v, b.v)):
                bound = 2.0**-11 * np.max(np.abs(x))
                assert np.max(np.abs(x.astype(np.float64) - y.astype(np.float64))) <= bound


class TestCorruption:
    def make_blob(self):
        return encode_base_chunk(f32_state(seed=8), frame_count=50)

    def test_bad_magic(self):
        blob = bytearray(self.make_blob())
        blob[0:4] = b"NOPE"
        with pytest.raises(BadMagicError):
            decode_chunk(bytes(blob))

    def test_version_mismatch(self):
        blob = bytearray(self.make_blob())
        blob[4:6] = struct.pack("<H", 9)
        with pytest.raises(VersionMismatchError):
            decode_chunk(bytes(blob))

    def test_single_payload_byte_flip_fails_checksum(self):
        blob = bytearray(self.make_blob())
        blob[HEADER.size + 100] ^= 0x40
        with pytest.raises(ChecksumError):
            decode_chunk(bytes(blob))

    def test_truncated_payload(self):
        blob = self.make_blob()
        with pytest.raises(TruncatedChunkError):
            decode_chunk(blob[:-10])

    def test_truncated_header(self):
        with pytest.raises(TruncatedChunkError):
            decode_chunk(self.make_blob()[:20])

    def test_kind_index_mismatch(self):
        # base payload labelled as chunk 3
        blob = bytearray(self.make_blob())
        blob[6:10] = struct.pack("<I", 3)
        with pytest.raises(ProtocolError):
            decode_chunk(bytes(blob))


class TestStreamsAndReconstruction:
    def build_stream(self, tmp_path, n_chunks=4, seed=9):
        rng = np.random.default_rng(seed)
        state = f32_state(seed=seed)
        chunks = [encode_base_chunk(state, frame_count=50)]
        for k in range(1, n_chunks):
            chunks.append(
                encode_delta_chunk(random_factors(rng, state.config, k), k, 50 * k, 50)
            )
        path = tmp_path / "scene.gs4d"
        write_stream(path, chunks)
        return state, chunks, path

    def test_split_roundtrip(self, tmp_path):
        _, chunks, path = self.build_stream(tmp_path)
        blobs = read_stream(path)
        assert blobs == chunks

    def test_reconstruct_k0_is_base(self, tmp_path):
        state, chunks, _ = self.build_stream(tmp_path)
        rec = reconstruct_state(chunks, 0)
        for pa, pb in zip(rec.triplane.planes, state.triplane.planes):
            assert np.array_equal(pa, pb.astype(np.float64))
        assert np.array_equal(rec.gaussians.centers, state.gaussians.centers)

    def test_all_zero_factors_reproduce_base(self, tmp_path):
        state = f32_state(seed=10)
        cfg = state.config
        zero = [
            LowRankFactor(
                u=np.zeros((cfg.plane_resolution, cfg.rank), np.float32),
                v=np.zeros((cfg.plane_resolution, cfg.rank), np.float32),
                plane=p, channel=c, chunk_index=1,
            )
            for p in range(3)
            for c in range(cfg.plane_features)
        ]
        chunks = [
            encode_base_chunk(state, 50),
            encode_delta_chunk(zero, 1, 50, 50),
            encode_delta_chunk(zero, 2, 100, 50),
        ]
        rec = reconstruct_state(chunks, 2)
        for pa, pb in zip(rec.triplane.planes, state.triplane.planes):
            assert np.array_equal(pa, pb.astype(np.float64))

    def test_reconstruct_matches_direct_sum_oracle(self, tmp_path):
        state, chunks, _ = self.build_stream(tmp_path, n_chunks=4)
        rec = reconstruct_state(chunks, 3)
        # oracle: decode factors independently and add every delta at once
        deltas = [decode_chunk(c).factors for c in chunks[1:]]
        for p in range(3):
            for ch in range(state.config.plane_features):
                total = state.triplane.planes[p][ch].astype(np.float64)
                acc = np.zeros_like(total)
                for fs in deltas:
                    for f in fs:
                        if f.plane == p and f.channel == ch:
                            acc += f.u.astype(np.float64) @ f.v.astype(np.float64).T
                np.testing.assert_allclose(rec.triplane.planes[p][ch], total + acc, atol=1e-10)

    def test_prefix_consistency(self, tmp_path):
        state, chunks, _ = self.build_stream(tmp_path, n_chunks=4)
        rec2 = reconstruct_state(chunks, 2)
        # continue from rec2 by applying chunk 3 manually
        cont = [p.copy() for p in rec2.triplane.planes]
        for f in decode_chunk(chunks[3]).factors:
            cont[f.plane][f.channel] += f.u.astype(np.float64) @ f.v.astype(np.float64).T
        scratch = reconstruct_state(chunks, 3)
        for pa, pb in zip(cont, scratch.triplane.planes):
            np.testing.assert_allclose(pa, pb, atol=1e-10)

    def test_missing_intermediate_chunk(self, tmp_path):
        _, chunks, _ = self.build_stream(tmp_path, n_chunks=4)
        with pytest.raises(MissingChunkError):
            reconstruct_state([chunks[0], chunks[2]], 2)


class TestBandwidthReport:
    def test_single_base_chunk_per_frame(self, tmp_path):
        state = f32_state(seed=11)
        blob = encode_base_chunk(state, frame_count=50)
        rep = bandwidth_report([blob])
        header = parse_header(blob)
        assert rep.chunks[0]["bytes_per_frame"] == header.payload_bytes / 50
        assert rep.base_payload_bytes == header.payload_bytes
        assert rep.mean_delta_payload_bytes is None
        assert rep.reduction_ratio is None

    def test_mock_13mb_chunk_gives_exact_quarter_mb_plus(self):
        # 13 MB payload over 50 frames must report exactly 0.26 MB/frame
        payload = bytes(13_000_000)
        head = HEADER.pack(MAGIC, 1, 1, 50, 50, 1, len(payload), zlib.crc32(payload))
        rep = bandwidth_report([head + payload])
        row = rep.chunks[0]
        assert row["payload_bytes"] == 13_000_000
        assert row["bytes_per_frame"] == 260_000.0
        assert row["payload_mb"] == 13.0
        assert row["mb_per_frame"] == 0.26

    def test_default_config_reduction_ratio(self):
        rng = np.random.default_rng(12)
        state = f32_state(seed=12, n=2, plane_resolution=64, plane_features=8, rank=3)
        factors = random_factors(rng, state.config, 1)
        chunks = [
            encode_base_chunk(state, 50),
            encode_delta_chunk(factors, 1, 50, 50),
        ]
        rep = bandwidth_report(chunks)
        assert rep.full_plane_bytes == 24 * 4 * 64 * 64
        # payload = 5 + 24 * (13 + 4*3*128); reduction within 0.5pp of 0.90625
        assert abs(rep.reduction_ratio - 0.90625) <= 0.005
        assert 1 - rep.reduction_ratio <= 0.10

    def test_reported_bytes_match_actual_lengths(self):
        rng = np.random.default_rng(13)
        state = f32_state(seed=13)
        chunks = [
            encode_base_chunk(state, 50),
            encode_delta_chunk(random_factors(rng, state.config, 1), 1, 50, 50),
        ]
        rep = bandwidth_report(chunks)
        for row, blob in zip(rep.chunks, chunks):
            assert row["total_bytes"] == len(blob)
            assert row["payload_bytes"] == len(blob) - HEADER.size


@given(st.integers(0, 2**31 - 1), st.integers(0, 6), st.sampled_from(["f32", "f16"]))
@settings(max_examples=40, deadline=None)
def test_roundtrip_property(seed, n_gaussians, precision):
    rng = np.random.default_rng(seed)
    state = f32_state(seed=seed % 1000, n=n_gaussians)
    base = encode_base_chunk(state, frame_count=int(rng.integers(1, 100)))
    dec_base = decode_chunk(base)
    assert encode_base_chunk(dec_base.state, dec_base.header.frame_count) == base

    factors = random_factors(rng, state.config, 1)
    delta = encode_delta_chunk(factors, 1, 50, 50, precision=precision)
    dec = decode_chunk(delta)
    re_encoded = encode_delta_chunk(dec.factors, 1, 50, 50, precision=precision)
    if precision == "f32":
        assert re_encoded == delta
    else:
        # f16 payload re-encoded from the decoded f32 values is identical:
        # every decoded value is exactly representable in f16
        assert re_encoded == delta
