"""Dataset and scene persistence.

Metadata lives in JSON/JSONL so it stays human-inspectable; bulk points go
into a compact little-endian binary format. All writes are atomic
(temp file + rename) so a killed run never leaves a half-written file.

Sweep file layout: magic "SMSW", u32 version (=1), u32 point count,
f64 period_seconds, then per point (f32 x, y, z, t, u16 beam, u16 pad).
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataFormatError
from .mesh import TriangleMesh, load_stl, save_stl
from .scene import SceneModel, SceneObject
from .se3 import RigidTransform
from .sweeps import BoundingBoxTrack, SensorSpec, Sweep
from .trajectory import BodyTrajectory

SWEEP_MAGIC = b"SMSW"
SWEEP_VERSION = 1
_HEADER = struct.Struct("<4sII d")
_POINT_DTYPE = np.dtype(
    [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("t", "<f4"), ("beam", "<u2"), ("pad", "<u2")]
)


def atomic_write_bytes(path, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Sweep binary format
# ---------------------------------------------------------------------------

def save_sweep(sweep: Sweep, path) -> None:
    rec = np.zeros(len(sweep), dtype=_POINT_DTYPE)
    rec["x"] = sweep.points[:, 0].astype(np.float32)
    rec["y"] = sweep.points[:, 1].astype(np.float32)
    rec["z"] = sweep.points[:, 2].astype(np.float32)
    rec["t"] = sweep.times.astype(np.float32)
    rec["beam"] = sweep.beam_ids
    header = _HEADER.pack(SWEEP_MAGIC, SWEEP_VERSION, len(sweep), sweep.period_seconds)
    atomic_write_bytes(path, header + rec.tobytes())


def load_sweep(path, *, sweep_index: int = 0, end_time: float | None = None) -> Sweep:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4 or data[:4] != SWEEP_MAGIC:
        raise DataFormatError(path, 0, f'magic "{SWEEP_MAGIC.decode()}"')
    if len(data) < _HEADER.size:
        raise DataFormatError(path, len(data), f"{_HEADER.size}-byte header")
    _, version, count, period = _HEADER.unpack(data[: _HEADER.size])
    if version != SWEEP_VERSION:
        raise DataFormatError(path, 4, f"version {SWEEP_VERSION}, found {version}")
    expected = _HEADER.size + count * _POINT_DTYPE.itemsize
    if len(data) < expected:
        raise DataFormatError(
            path, len(data), f"{expected} bytes for {count} points (file truncated)"
        )
    rec = np.frombuffer(data[_HEADER.size : expected], dtype=_POINT_DTYPE)
    points = np.stack(
        [rec["x"].astype(np.float64), rec["y"].astype(np.float64), rec["z"].astype(np.float64)], 1
    )
    return Sweep(
        points=points,
        times=rec["t"].astype(np.float64),
        beam_ids=rec["beam"].copy(),
        sweep_index=sweep_index,
        period_seconds=period,
        end_time=float(end_time) if end_time is not None else (sweep_index + 1) * period,
    )


# ---------------------------------------------------------------------------
# Poses and tracks (JSONL)
# ---------------------------------------------------------------------------

def save_ego_poses(traj: BodyTrajectory, path) -> None:
    lines = []
    for i, t in enumerate(traj.times):
        rec = {"time": float(t), "pose": traj.keyframe_pose(i).to_json()}
        lines.append(json.dumps(rec, sort_keys=True))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_ego_poses(path) -> BodyTrajectory:
    times, poses = [], []
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                times.append(float(rec["time"]))
                poses.append(RigidTransform.from_json(rec["pose"]))
            except (KeyError, ValueError, TypeError) as e:
                raise DataFormatError(path, line_no, f"ego pose record ({e})") from e
    if not times:
        raise DataFormatError(path, 0, "at least one ego pose record")
    return BodyTrajectory.from_poses(times, poses)


def save_tracks(tracks: Sequence[BoundingBoxTrack], path) -> None:
    lines = []
    for track in tracks:
        for j in range(len(track)):
            rec = {
                "object_id": int(track.object_id),
                "time": float(track.timestamps[j]),
                "center": [float(v) for v in track.centers[j]],
                "extent": [float(v) for v in track.extents[j]],
                "yaw": float(track.yaws[j]),
            }
            lines.append(json.dumps(rec, sort_keys=True))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def load_tracks(path) -> list[BoundingBoxTrack]:
    buckets: dict[int, list] = {}
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                buckets.setdefault(int(rec["object_id"]), []).append(
                    (float(rec["time"]), rec["center"], rec["extent"], float(rec["yaw"]))
                )
            except (KeyError, ValueError, TypeError) as e:
                raise DataFormatError(path, line_no, f"track record ({e})") from e
    tracks = []
    for oid in sorted(buckets):
        rows = sorted(buckets[oid], key=lambda r: r[0])
        tracks.append(
            BoundingBoxTrack(
                object_id=oid,
                timestamps=np.array([r[0] for r in rows]),
                centers=np.array([r[1] for r in rows], dtype=np.float64),
                extents=np.array([r[2] for r in rows], dtype=np.float64),
                yaws=np.array([r[3] for r in rows]),
            )
        )
    return tracks


# ---------------------------------------------------------------------------
# Dataset directory
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    sweeps: list[Sweep]
    tracks: list[BoundingBoxTrack]      # working annotations (possibly degraded)
    ego: BodyTrajectory                  # working ego keyframes (possibly degraded)
    sensor: SensorSpec
    gt_labels: list[np.ndarray] | None = None    # per-sweep true object id per point
    gt_origins: list[np.ndarray] | None = None   # per-sweep true emission origins
    gt_tracks: list[BoundingBoxTrack] | None = None
    gt_ego: BodyTrajectory | None = None

    @property
    def keyframe_times(self) -> np.ndarray:
        return np.array([s.end_time for s in self.sweeps])


def save_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    (root / "sweeps").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, sweep in enumerate(ds.sweeps):
        name = f"sweeps/{i:06d}.bin"
        save_sweep(sweep, root / name)
        entries.append(
            {"file": name, "index": sweep.sweep_index, "end_time": float(sweep.end_time)}
        )
    save_tracks(ds.tracks, root / "tracks.jsonl")
    save_ego_poses(ds.ego, root / "ego_poses.jsonl")
    manifest = {
        "format": "dynsurf-dataset",
        "version": 1,
        "units": {"length": "meters", "time": "seconds"},
        "period_seconds": float(ds.sensor.period_seconds),
        "sensor": ds.sensor.to_json(),
        "sweeps": entries,
        "tracks": "tracks.jsonl",
        "ego_poses": "ego_poses.jsonl",
    }
    if ds.gt_labels is not None:
        blob = np.concatenate([l.astype("<u2") for l in ds.gt_labels]).tobytes()
        atomic_write_bytes(root / "gt_labels.bin", blob)
        manifest["gt_labels"] = "gt_labels.bin"
    if ds.gt_origins is not None:
        blob = np.concatenate([o.astype("<f4") for o in ds.gt_origins]).tobytes()
        atomic_write_bytes(root / "gt_origins.bin", blob)
        manifest["gt_origins"] = "gt_origins.bin"
    if ds.gt_tracks is not None:
        save_tracks(ds.gt_tracks, root / "gt_tracks.jsonl")
        manifest["gt_tracks"] = "gt_tracks.jsonl"
    if ds.gt_ego is not None:
        save_ego_poses(ds.gt_ego, root / "gt_ego_poses.jsonl")
        manifest["gt_ego_poses"] = "gt_ego_poses.jsonl"
    atomic_write_json(root / "manifest.json", manifest)


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataFormatError(manifest_path, 0, "a dataset manifest")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("format") != "dynsurf-dataset":
        raise DataFormatError(manifest_path, 0, 'format "dynsurf-dataset"')
    if manifest.get("version") != 1:
        raise DataFormatError(manifest_path, 0, f"version 1, found {manifest.get('version')}")
    sensor = SensorSpec.from_json(manifest["sensor"])
    sweeps = []
    prev_end = -np.inf
    for entry in manifest["sweeps"]:
        p = root / entry["file"]
        if not p.exists():
            raise DataFormatError(p, 0, "sweep file referenced by the manifest")
        if entry["end_time"] <= prev_end:
            raise DataFormatError(manifest_path, 0, "strictly increasing sweep end times")
        prev_end = entry["end_time"]
        sweeps.append(load_sweep(p, sweep_index=entry["index"], end_time=entry["end_time"]))
    tracks = load_tracks(root / manifest["tracks"])
    ego = load_ego_poses(root / manifest["ego_poses"])
    counts = [len(s) for s in sweeps]
    gt_labels = gt_origins = None
    if "gt_labels" in manifest:
        raw = np.fromfile(root / manifest["gt_labels"], dtype="<u2")
        if len(raw) != sum(counts):
            raise DataFormatError(
                root / manifest["gt_labels"], len(raw) * 2, f"{sum(counts)} u16 labels"
            )
        gt_labels = list(np.split(raw.astype(np.int64), np.cumsum(counts)[:-1]))
    if "gt_origins" in manifest:
        raw = np.fromfile(root / manifest["gt_origins"], dtype="<f4")
        if len(raw) != 3 * sum(counts):
            raise DataFormatError(
                root / manifest["gt_origins"], len(raw) * 4, f"{3 * sum(counts)} f32 values"
            )
        gt_origins = list(
            np.split(raw.astype(np.float64).reshape(-1, 3), np.cumsum(counts)[:-1])
        )
    gt_tracks = load_tracks(root / manifest["gt_tracks"]) if "gt_tracks" in manifest else None
    gt_ego = load_ego_poses(root / manifest["gt_ego_poses"]) if "gt_ego_poses" in manifest else None
    return Dataset(sweeps, tracks, ego, sensor, gt_labels, gt_origins, gt_tracks, gt_ego)


# ---------------------------------------------------------------------------
# Scene directory
# ---------------------------------------------------------------------------

def save_scene(scene: SceneModel, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    save_stl(scene.background, root / "background.stl")
    (root / "objects").mkdir(exist_ok=True)
    lines = []
    for i, t in enumerate(scene.ego.times):
        lines.append(
            json.dumps(
                {"body": "ego", "time": float(t), "pose": scene.ego.keyframe_pose(i).to_json()},
                sort_keys=True,
            )
        )
    for oid in sorted(scene.objects):
        obj = scene.objects[oid]
        save_stl(obj.mesh, root / "objects" / f"{oid}.stl")
        for i, t in enumerate(obj.trajectory.times):
            lines.append(
                json.dumps(
                    {
                        "body": int(oid),
                        "time": float(t),
                        "pose": obj.trajectory.keyframe_pose(i).to_json(),
                    },
                    sort_keys=True,
                )
            )
    atomic_write_text(root / "trajectories.jsonl", "\n".join(lines) + "\n")
    lo, hi = scene.ego.span
    manifest = {
        "format": "dynsurf-scene",
        "version": 1,
        "units": {"length": "meters", "time": "seconds"},
        "object_ids": [int(k) for k in sorted(scene.objects)],
        "time_span": [lo, hi],
        "background": "background.stl",
        "trajectories": "trajectories.jsonl",
    }
    atomic_write_json(root / "manifest.json", manifest)


def load_scene(root) -> SceneModel:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataFormatError(manifest_path, 0, "a scene manifest")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("format") != "dynsurf-scene":
        raise DataFormatError(manifest_path, 0, 'format "dynsurf-scene"')
    background = load_stl(root / manifest["background"])
    body_records: dict = {}
    with open(root / manifest["trajectories"]) as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                body_records.setdefault(rec["body"], []).append(
                    (float(rec["time"]), RigidTransform.from_json(rec["pose"]))
                )
            except (KeyError, ValueError, TypeError) as e:
                raise DataFormatError(root / manifest["trajectories"], line_no, f"pose record ({e})") from e
    if "ego" not in body_records:
        raise DataFormatError(root / manifest["trajectories"], 0, "an ego trajectory")

    def build(rows):
        rows = sorted(rows, key=lambda r: r[0])
        return BodyTrajectory.from_poses([r[0] for r in rows], [r[1] for r in rows])

    ego = build(body_records["ego"])
    objects = {}
    for oid in manifest["object_ids"]:
        mesh = load_stl(root / "objects" / f"{oid}.stl")
        objects[int(oid)] = SceneObject(mesh=mesh, trajectory=build(body_records[int(oid)]))
    return SceneModel(background=background, ego=ego, objects=objects)
