"""Command-line surface: simulate, reconstruct, evaluate, deskew.

Exit codes: 0 success, 1 usage error, 2 data error, 3 convergence failure.
SMORE_THREADS caps the worker count used by parallel sections.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dataio
from .errors import ConvergenceFailure, DataFormatError, DynsurfError
from .icp import IcpParams
from .metrics import (
    EvalReport,
    ate,
    evaluate_nvs,
    holdout_split,
    interpolation_trajectories,
    nn_accuracy,
)
from .optimize import OptimizerConfig, run
from .scene import BACKGROUND_ID
from .sim import load_sim_config, simulate
from .sweeps import Sweep, assign_points, deskew_ego
from .tsdf import ReconParams

log = logging.getLogger("dynsurf")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CONVERGENCE = 3


def worker_count() -> int:
    raw = os.environ.get("SMORE_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _cmd_simulate(args) -> int:
    config = load_sim_config(args.config)
    dataset = simulate(config)
    dataio.save_dataset(dataset, args.out)
    n = sum(len(s) for s in dataset.sweeps)
    log.info("wrote %d sweeps (%d points) to %s", len(dataset.sweeps), n, args.out)
    return EXIT_OK


def _optimizer_config(args) -> OptimizerConfig:
    return OptimizerConfig(
        max_outer_iterations=args.max_iters,
        icp=IcpParams(huber_k=args.huber_k, match_threshold=args.icp_threshold),
        min_points_per_view=args.min_points,
        object_recon=ReconParams(voxel_size=args.object_voxel),
        background_recon=ReconParams(voxel_size=args.background_voxel),
        deskew_actors=not args.no_deskew_actors,
        refine_poses=not args.no_refine,
    )


def _cmd_reconstruct(args) -> int:
    dataset = dataio.load_dataset(args.dataset)
    sweeps = dataset.sweeps
    if args.holdout > 0.0:
        train_idx, test_idx = holdout_split(len(sweeps), args.holdout, args.holdout_seed)
        sweeps = [sweeps[i] for i in train_idx]
        log.info("holding out sweeps %s", test_idx.tolist())
    config = _optimizer_config(args)
    result = run(dataset.tracks, dataset.ego, sweeps, config)
    out = Path(args.out)
    dataio.save_scene(result.scene, out)
    dataio.atomic_write_json(out / "report.json", result.report.to_json())
    log.info("scene written to %s", out)
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    dataset = dataio.load_dataset(args.dataset)
    scene = dataio.load_scene(args.scene)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    report = EvalReport()
    gt_tracks = dataset.gt_tracks if dataset.gt_tracks is not None else dataset.tracks

    train_idx, test_idx = holdout_split(len(dataset.sweeps), args.holdout, args.holdout_seed)
    if "nn" in metrics:
        train_sweeps = [dataset.sweeps[i] for i in train_idx]
        report.nn_mean, report.acc_relaxed, report.acc_strict = nn_accuracy(scene, train_sweeps)
    if "chamfer" in metrics or "depth" in metrics:
        test_sweeps = [dataset.sweeps[i] for i in test_idx]
        boxes = [
            (oid, obj.trajectory, _extent_for(dataset, oid))
            for oid, obj in scene.objects.items()
        ]
        labels = [assign_points(s, scene.ego, boxes) for s in test_sweeps]
        ch_sq, md_sq, ch_un, md_un = evaluate_nvs(
            scene, test_sweeps, labels, dataset.sensor, optimize_poses=not args.no_test_pose_opt
        )
        if "chamfer" in metrics:
            report.chamfer_sq, report.chamfer_unsquared = ch_sq, ch_un
        if "depth" in metrics:
            report.median_depth_sq, report.median_depth_unsquared = md_sq, md_un
    if "ate" in metrics:
        predicted = {oid: obj.trajectory for oid, obj in scene.objects.items()}
        res = ate(predicted, dataset.tracks, gt_tracks, filter_linear=args.filter_linear)
        report.ate = res.mean
    dataio.atomic_write_json(args.out, report.to_json())
    log.info("evaluation report written to %s", args.out)
    print(json.dumps(report.to_json(), indent=2, sort_keys=True))
    return EXIT_OK


def _extent_for(dataset, oid) -> np.ndarray:
    for track in dataset.tracks:
        if track.object_id == oid:
            return np.median(track.extents, axis=0)
    return np.array([4.0, 2.0, 1.6])


def _cmd_deskew(args) -> int:
    dataset = dataio.load_dataset(args.dataset)
    out_sweeps = []
    for sweep in dataset.sweeps:
        d = deskew_ego(sweep, dataset.ego)
        out_sweeps.append(
            Sweep(
                points=d.points,
                times=d.times,
                beam_ids=d.beam_ids,
                sweep_index=d.sweep_index,
                period_seconds=d.period_seconds,
                end_time=d.end_time,
            )
        )
    dataset.sweeps = out_sweeps
    dataset.gt_labels = None
    dataset.gt_origins = None
    dataio.save_dataset(dataset, args.out)
    log.info("deskewed dataset written to %s", args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dynsurf",
        description="Dynamic surface reconstruction of rigid multi-object scenes "
        "from rolling-shutter LiDAR",
    )
    p.add_argument("--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("simulate", help="render a synthetic dataset with ground truth")
    ps.add_argument("--config", required=True, help="scene config JSON")
    ps.add_argument("--out", required=True, help="output dataset directory")
    ps.set_defaults(func=_cmd_simulate)

    pr = sub.add_parser("reconstruct", help="optimize surfaces and poses from a dataset")
    pr.add_argument("--dataset", required=True)
    pr.add_argument("--out", required=True, help="output scene directory")
    pr.add_argument("--max-iters", type=int, default=100)
    pr.add_argument("--huber-k", type=float, default=0.2)
    pr.add_argument("--icp-threshold", type=float, default=1.5)
    pr.add_argument("--min-points", type=int, default=50)
    pr.add_argument("--object-voxel", type=float, default=0.05)
    pr.add_argument("--background-voxel", type=float, default=0.15)
    pr.add_argument("--no-deskew-actors", action="store_true",
                    help="ablation: ignore actor motion within each sweep")
    pr.add_argument("--no-refine", action="store_true",
                    help="ablation: skip pose refinement (single mesh step)")
    pr.add_argument("--holdout", type=float, default=0.0,
                    help="fraction of sweeps to exclude from training")
    pr.add_argument("--holdout-seed", type=int, default=0)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--deterministic", action="store_true",
                    help="single-threaded, bit-reproducible run")
    pr.set_defaults(func=_cmd_reconstruct)

    pe = sub.add_parser("evaluate", help="score a reconstructed scene against a dataset")
    pe.add_argument("--dataset", required=True)
    pe.add_argument("--scene", required=True)
    pe.add_argument("--holdout", type=float, default=0.1)
    pe.add_argument("--holdout-seed", type=int, default=0)
    pe.add_argument("--metrics", default="chamfer,depth,ate,nn")
    pe.add_argument("--filter-linear", action="store_true",
                    help="drop objects with straight-line ground truth from ATE")
    pe.add_argument("--no-test-pose-opt", action="store_true")
    pe.add_argument("--out", required=True, help="report JSON path")
    pe.set_defaults(func=_cmd_evaluate)

    pd = sub.add_parser("deskew", help="write an ego-deskewed copy of a dataset")
    pd.add_argument("--dataset", required=True)
    pd.add_argument("--out", required=True)
    pd.set_defaults(func=_cmd_deskew)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except ConvergenceFailure as e:
        log.error("convergence failure: %s", e)
        return EXIT_CONVERGENCE
    except (DataFormatError, FileNotFoundError) as e:
        log.error("data error: %s", e)
        return EXIT_DATA
    except DynsurfError as e:
        log.error("%s", e)
        return EXIT_DATA
    except ValueError as e:
        log.error("invalid arguments: %s", e)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
