#!/usr/bin/env python3
"""End-to-end demo driven through the CLI: synthesize an oscillating scene,
train a two-chunk stream, report bandwidth, evaluate held-out views and
render one frame.

Sized to finish in a couple of minutes on a laptop CPU; pass --full for the
acceptance-scale run (200 splats, 96 px, 100 frames).
"""
import argparse
import json
import pathlib
import subprocess
import sys


def run(*argv):
    print("$ gs4d", " ".join(argv), flush=True)
    proc = subprocess.run([sys.executable, "-m", "gs4d.cli", *argv],
                          capture_output=True, text=True)
    sys.stdout.write(proc.stdout)
    sys.stderr.write(proc.stderr)
    if proc.returncode != 0:
        raise SystemExit(proc.returncode)
    return proc.stdout


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="out/synth_pipeline")
    ap.add_argument("--full", action="store_true", help="acceptance-scale run")
    args = ap.parse_args()
    work = pathlib.Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    data = work / "data"
    stream = work / "scene.gs4d"

    if args.full:
        synth = ["--gaussians", "200", "--cameras", "6", "--timesteps", "100",
                 "--image-size", "96", "--amplitude", "0.1"]
        train_sets = [
            "--set", "chunk_length=50", "--set", "base_iterations=5000",
            "--set", "delta_iterations=2000", "--set", "hidden=128",
            "--set", "n_init_gaussians=400", "--set", "max_gaussians=2400",
            "--set", "lr_centers=5e-4", "--set", "lr_centers_final=5e-6",
            "--set", "lr_planes=2e-2", "--set", "lr_factors=3e-2",
            "--set", "densify_interval=250", "--set", "densify_start=400",
            "--set", "densify_end=3000", "--set", "densify_grad_threshold=2e-3",
            "--set", "bounds_min=-0.65", "--set", "bounds_max=0.65",
        ]
    else:
        synth = ["--gaussians", "40", "--cameras", "4", "--timesteps", "16",
                 "--image-size", "48", "--amplitude", "0.08"]
        train_sets = [
            "--set", "chunk_length=8", "--set", "base_iterations=600",
            "--set", "delta_iterations=300", "--set", "hidden=64",
            "--set", "plane_resolution=32", "--set", "n_init_gaussians=150",
            "--set", "max_gaussians=600", "--set", "lr_centers=5e-4",
            "--set", "lr_planes=2e-2", "--set", "lr_factors=3e-2",
            "--set", "densify_interval=150", "--set", "densify_start=150",
            "--set", "densify_end=450", "--set", "densify_grad_threshold=2e-3",
            "--set", "bounds_min=-0.65", "--set", "bounds_max=0.65",
        ]

    run("synth", "--out", str(data), "--seed", "42", "--motion", "oscillate", *synth)
    run("train", "--data", str(data), "--out-stream", str(stream),
        "--metrics", str(work / "metrics.jsonl"), *train_sets)
    run("report", "--stream", str(stream), "--out", str(work / "bandwidth.json"))
    run("eval", "--stream", str(stream), "--data", str(data),
        "--out", str(work / "eval.json"))
    run("render", "--stream", str(stream), "--data", str(data), "--chunk", "0",
        "--time", "0.5", "--camera", "0", "--out", str(work / "view.png"))

    metrics = json.loads((work / "eval.json").read_text())
    print(f"\nheld-out mean PSNR {metrics['mean_psnr']:.2f} dB, "
          f"mean DSSIM {metrics['mean_dssim']:.4f}")
    report = json.loads((work / "bandwidth.json").read_text())
    print(f"bandwidth reduction vs full plane retransmission: "
          f"{report['reduction_ratio']:.4f}")


if __name__ == "__main__":
    main()
