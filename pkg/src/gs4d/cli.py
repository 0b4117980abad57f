"""Batch entry points: synthesize datasets, train chunk streams, render,
evaluate and report bandwidth. Exit codes: 0 success, 1 input error,
2 internal error; errors print one machine-readable JSON line on stderr.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from .config import load_run_config
from .datasets import load_multiview, save_dataset, split_train_eval, synth_scene, to_uint8
from .deform import deform_forward
from .errors import DatasetError, GS4DError
from .losses import dssim, psnr
from .rasterizer import rasterize
from .stream_codec import (
    bandwidth_report,
    encode_base_chunk,
    encode_delta_chunk,
    parse_header,
    read_stream,
    reconstruct_state,
    write_stream,
)
from .trainer import (
    evaluate_views,
    normalized_time,
    train_base_chunk,
    train_delta_chunk,
)


class _UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gs4d", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="materialize a synthetic multi-view dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gaussians", type=int, default=200)
    p.add_argument("--motion", choices=("static", "oscillate", "drift"), default="oscillate")
    p.add_argument("--cameras", type=int, default=6)
    p.add_argument("--timesteps", type=int, default=100)
    p.add_argument("--image-size", type=int, default=96)
    p.add_argument("--amplitude", type=float, default=0.08)
    p.add_argument("--holdout", default="0", help="comma-separated held-out camera ids")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a chunked stream from a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out-stream", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--chunks", type=int, default=None, help="limit the number of chunks")
    p.add_argument("--metrics", default=None, help="JSONL metrics path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render one view from a stream")
    p.add_argument("--stream", required=True)
    p.add_argument("--data", required=True, help="dataset supplying the camera")
    p.add_argument("--chunk", type=int, default=0)
    p.add_argument("--time", type=float, default=0.0, help="normalized chunk time in [0, 1]")
    p.add_argument("--camera", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="held-out-view metrics for a stream")
    p.add_argument("--stream", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="bandwidth accounting for a stream")
    p.add_argument("--stream", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_report)
    return parser


def cmd_synth(args) -> int:
    held = [h for h in str(args.holdout).split(",") if h != ""]
    _, dataset = synth_scene(
        seed=args.seed,
        n_gaussians=args.gaussians,
        motion=args.motion,
        n_cameras=args.cameras,
        timesteps=args.timesteps,
        image_size=args.image_size,
        amplitude=args.amplitude,
        held_out=held,
    )
    save_dataset(dataset, args.out)
    print(json.dumps({"out": str(args.out), "cameras": len(dataset.cameras),
                      "timesteps": dataset.timesteps, "held_out": dataset.held_out}))
    return 0


def cmd_train(args) -> int:
    run = load_run_config(args.config, args.set)
    dataset = load_multiview(args.data)
    total_chunks = math.ceil(dataset.timesteps / run.train.chunk_length)
    if args.chunks is not None:
        total_chunks = min(total_chunks, args.chunks)
    if total_chunks < 1:
        raise DatasetError("dataset has no frames to train on")
    if args.metrics:
        run.train.metrics_path = args.metrics
        open(args.metrics, "w").close()

    chunks = []
    chunk_reports = []
    base = train_base_chunk(dataset, run.train, run.model, run.render)
    chunks.append(encode_base_chunk(base.state, base.frame_count, base.frame_start))
    _, eval_views = split_train_eval(dataset)
    for k in range(1, total_chunks):
        state = reconstruct_state(chunks, k - 1)
        delta = train_delta_chunk(state, dataset, run.train, k, run.render)
        chunks.append(
            encode_delta_chunk(delta.factors, k, delta.frame_start, delta.frame_count)
        )
    write_stream(args.out_stream, chunks)

    for k in range(total_chunks):
        header = parse_header(chunks[k])
        views = [
            (c, t) for c, t in eval_views
            if header.frame_start <= t < header.frame_start + header.frame_count
        ]
        if not views:
            continue
        state = reconstruct_state(chunks, k)
        rec = evaluate_views(state, dataset, views, header.frame_start,
                             header.frame_count, run.render)
        chunk_reports.append(
            {"chunk": k, "mean_psnr": rec.mean_psnr, "mean_dssim": rec.mean_dssim,
             "views": len(rec.per_view)}
        )
    report = {
        "stream": str(args.out_stream),
        "chunks": total_chunks,
        "per_chunk_eval": chunk_reports,
        "config": run.to_flat(),
    }
    with open(str(args.out_stream) + ".report.json", "w") as fh:
        json.dump(report, fh, indent=1)
    print(json.dumps(report))
    return 0


def cmd_render(args) -> int:
    run = load_run_config(args.config, args.set)
    dataset = load_multiview(args.data)
    if args.camera not in dataset.cameras:
        raise DatasetError(f"camera {args.camera!r} not in dataset")
    if not 0.0 <= args.time <= 1.0:
        raise DatasetError("--time must be in [0, 1]")
    state = reconstruct_state(read_stream(args.stream), args.chunk)
    cfg = state.config
    deformed, _ = deform_forward(
        state.triplane, state.decoder, state.gaussians, args.time,
        cfg.time_freqs, cfg.use_time_encoding,
    )
    out = rasterize(deformed, dataset.cameras[args.camera], run.render)
    from PIL import Image

    Image.fromarray(to_uint8(out.color)).save(args.out)
    print(json.dumps({"out": str(args.out), "chunk": args.chunk, "time": args.time,
                      "camera": args.camera}))
    return 0


def cmd_eval(args) -> int:
    run = load_run_config(args.config, args.set)
    dataset = load_multiview(args.data)
    _, eval_views = split_train_eval(dataset)
    if not eval_views:
        raise DatasetError("dataset has no held-out cameras to evaluate")
    chunks = read_stream(args.stream)
    headers = sorted((parse_header(c) for c in chunks), key=lambda h: h.chunk_index)
    rows = []
    for header in headers:
        views = [
            (c, t) for c, t in eval_views
            if header.frame_start <= t < header.frame_start + header.frame_count
        ]
        if not views:
            continue
        state = reconstruct_state(chunks, header.chunk_index)
        cfg = state.config
        for cid, t in views:
            t_norm = normalized_time(t, header.frame_start, header.frame_count)
            deformed, _ = deform_forward(
                state.triplane, state.decoder, state.gaussians, t_norm,
                cfg.time_freqs, cfg.use_time_encoding,
            )
            render = rasterize(deformed, dataset.cameras[cid], run.render)
            quantized = to_uint8(render.color) / 255.0
            gt = dataset.image(cid, t)
            rows.append(
                {"camera": cid, "timestep": t, "chunk": header.chunk_index,
                 "psnr": psnr(quantized, gt), "dssim": dssim(quantized, gt)}
            )
    result = {
        "per_view": rows,
        "mean_psnr": float(np.mean([r["psnr"] for r in rows])),
        "mean_dssim": float(np.mean([r["dssim"] for r in rows])),
        "config": run.to_flat(),
    }
    with open(args.out, "w") as fh:
        json.dump(result, fh, indent=1)
    print(json.dumps({"out": str(args.out), "mean_psnr": result["mean_psnr"],
                      "mean_dssim": result["mean_dssim"]}))
    return 0


def cmd_report(args) -> int:
    run = load_run_config(args.config, args.set)
    rep = bandwidth_report(args.stream)
    payload = rep.to_dict()
    payload["config"] = run.to_flat()
    text = json.dumps(payload, indent=1)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    print(text)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        _emit_error("usage", str(exc))
        return 1
    try:
        return args.func(args)
    except (GS4DError, OSError, json.JSONDecodeError) as exc:
        _emit_error(type(exc).__name__, str(exc))
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        _emit_error(type(exc).__name__, str(exc))
        return 2


def _emit_error(kind: str, detail: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "detail": detail}) + "\n")


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
