#!/usr/bin/env python3
"""Storage-saving sweep: how the streamed-factor fraction behaves over plane
resolution and factor rank, both in closed form and as actually encoded
bytes."""
import numpy as np

from gs4d.lowrank import storage_saving
from gs4d.model import ModelConfig, init_model
from gs4d.stream_codec import encode_delta_chunk, parse_header
from gs4d.lowrank import factor_init


def encoded_ratio(r: int, f: int, rank: int) -> float:
    rng = np.random.default_rng(0)
    factors = [
        factor_init(r, r, rank, rng, plane=p, channel=c)
        for p in range(3)
        for c in range(f)
    ]
    blob = encode_delta_chunk(factors, 1, 0, 50)
    payload = parse_header(blob).payload_bytes
    full = 3 * f * r * r * 4
    return payload / full


def main():
    f = 8
    print(f"plane_features = {f}; ratio = delta payload / full plane bytes")
    print(f"{'R':>5} {'rank':>5} {'saved (closed form)':>20} {'encoded ratio':>14}")
    for r in (32, 64, 128, 256):
        for rank in (1, 3, 8):
            if rank > r:
                continue
            _, saved = storage_saving(r, r, rank)
            print(f"{r:>5} {rank:>5} {saved:>20.5f} {encoded_ratio(r, f, rank):>14.5f}")


if __name__ == "__main__":
    main()
