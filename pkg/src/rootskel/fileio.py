"""Serialization of every artifact the pipeline reads or writes.

All files are plain JSON, binary PGM (P5), little-endian float32
tensors with a JSON shape header, ASCII PLY, or CSV — diffable and
independently parseable. Writes go through a temp file and an atomic
rename; JSON uses sorted keys so identical data yields identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
import os
from pathlib import Path

import numpy as np

from .bundle_adjustment import SbaReport
from .detection import Detection2D
from .errors import MissingInput, ValidationError
from .fusion import LateralRoot3D
from .geometry import CameraView, Intrinsics, Pose
from .mainroot import SkeletonGraph
from .matching import BoxPair, KeypointMatch
from .synthetic import GroundTruth, Lateral, SceneBundle


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_json(path: Path, data) -> None:
    text = json.dumps(_jsonable(data), sort_keys=True, indent=1)
    atomic_write_bytes(path, (text + "\n").encode())


def read_json(path: Path):
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"missing file: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------

def camera_to_dict(view: CameraView) -> dict:
    return {
        "fx": view.intrinsics.fx,
        "fy": view.intrinsics.fy,
        "cx": view.intrinsics.cx,
        "cy": view.intrinsics.cy,
        "width": view.width,
        "height": view.height,
        "rotation": [float(x) for x in view.pose.rotation.ravel()],
        "translation": [float(x) for x in view.pose.translation],
    }


def camera_from_dict(data: dict) -> CameraView:
    rotation = np.array(data["rotation"], dtype=float).reshape(3, 3)
    return CameraView(
        Intrinsics(data["fx"], data["fy"], data["cx"], data["cy"]),
        Pose(rotation, np.array(data["translation"], dtype=float)),
        int(data["width"]),
        int(data["height"]),
    )


def write_cameras(path: Path, views: list[CameraView]) -> None:
    write_json(path, [camera_to_dict(v) for v in views])


def read_cameras(path: Path) -> list[CameraView]:
    return [camera_from_dict(d) for d in read_json(path)]


# ---------------------------------------------------------------------------
# detections / matches / pairings
# ---------------------------------------------------------------------------

def detection_to_dict(det: Detection2D) -> dict:
    return {
        "box": [float(x) for x in det.box],
        "score": float(det.score),
        "keypoints": [
            [float(k[0]), float(k[1]), float(v)]
            for k, v in zip(det.keypoints, det.visibility)
        ],
    }


def detection_from_dict(data: dict) -> Detection2D:
    kps = np.array([[k[0], k[1]] for k in data["keypoints"]], dtype=float)
    vis = np.array([k[2] for k in data["keypoints"]], dtype=float)
    box = data["box"]
    return Detection2D(
        center=np.array(box[:2], dtype=float),
        size=np.array(box[2:], dtype=float),
        score=float(data["score"]),
        keypoints=kps,
        visibility=vis,
    )


def write_detections(path: Path, detections: list[Detection2D]) -> None:
    write_json(path, [detection_to_dict(d) for d in detections])


def read_detections(path: Path) -> list[Detection2D]:
    return [detection_from_dict(d) for d in read_json(path)]


def write_matches(path: Path, matches: list[KeypointMatch]) -> None:
    write_json(
        path,
        [
            {"p1": [float(m.p1[0]), float(m.p1[1])], "p2": [float(m.p2[0]), float(m.p2[1])], "conf": float(m.confidence)}
            for m in matches
        ],
    )


def read_matches(path: Path) -> list[KeypointMatch]:
    return [
        KeypointMatch(p1=np.array(d["p1"]), p2=np.array(d["p2"]), confidence=d.get("conf", 1.0))
        for d in read_json(path)
    ]


def write_pairings(path: Path, pairings: dict[tuple[int, int], list[BoxPair]]) -> None:
    data = {
        f"{a}-{b}": [{"a": p.a, "b": p.b, "votes": p.votes} for p in pairs]
        for (a, b), pairs in sorted(pairings.items())
    }
    write_json(path, data)


def read_pairings(path: Path) -> dict[tuple[int, int], list[BoxPair]]:
    out = {}
    for key, pairs in read_json(path).items():
        a, b = (int(x) for x in key.split("-"))
        out[(a, b)] = [BoxPair(p["a"], p["b"], p["votes"]) for p in pairs]
    return out


# ---------------------------------------------------------------------------
# masks (binary PGM, P5)
# ---------------------------------------------------------------------------

def write_mask_pgm(path: Path, mask: np.ndarray) -> None:
    mask = np.asarray(mask, dtype=bool)
    header = f"P5\n{mask.shape[1]} {mask.shape[0]}\n255\n".encode()
    atomic_write_bytes(path, header + (mask.astype(np.uint8) * 255).tobytes())


def read_mask_pgm(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"missing file: {path}")
    with open(path, "rb") as fh:
        data = fh.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ValidationError(f"not a binary PGM: {path}")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval > 255:
        raise ValidationError("16-bit PGM not supported")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    return pixels.reshape(height, width) > 0


# ---------------------------------------------------------------------------
# raw prediction grids (little-endian f32 + JSON shape header)
# ---------------------------------------------------------------------------

def write_raw_grids(header_path: Path, grids: dict[int, np.ndarray]) -> None:
    strides = sorted(grids)
    header = {
        "dtype": "<f4",
        "strides": strides,
        "shapes": {str(s): list(grids[s].shape) for s in strides},
        "data_file": Path(header_path).with_suffix(".bin").name,
    }
    write_json(header_path, header)
    payload = b"".join(grids[s].astype("<f4").tobytes(order="C") for s in strides)
    atomic_write_bytes(Path(header_path).with_suffix(".bin"), payload)


def read_raw_grids(header_path: Path) -> dict[int, np.ndarray]:
    header = read_json(header_path)
    if header.get("dtype") != "<f4":
        raise ValidationError("raw grids must be little-endian float32")
    bin_path = Path(header_path).with_name(header["data_file"])
    if not bin_path.exists():
        raise MissingInput(f"missing file: {bin_path}")
    raw = np.fromfile(bin_path, dtype="<f4")
    grids = {}
    offset = 0
    for s in header["strides"]:
        shape = tuple(header["shapes"][str(s)])
        count = int(np.prod(shape))
        grids[int(s)] = raw[offset : offset + count].reshape(shape).astype(float)
        offset += count
    if offset != raw.size:
        raise ValidationError("raw grid payload size does not match header")
    return grids


# ---------------------------------------------------------------------------
# roots / skeleton
# ---------------------------------------------------------------------------

def root_to_dict(root: LateralRoot3D, observations=None, boxes=None) -> dict:
    data = {
        "id": root.root_id,
        "start": [float(x) for x in root.start],
        "end": [float(x) for x in root.end],
        "err": float(root.reproj_error_total),
        "views": [int(v) for v in root.views_used],
    }
    if observations is not None:
        data["observations"] = {
            str(v): {"start": [float(s[0]), float(s[1])], "end": [float(e[0]), float(e[1])]}
            for v, (s, e) in sorted(observations.items())
        }
    if boxes is not None:
        data["boxes"] = {str(v): int(b) for v, b in sorted(boxes.items())}
    return data


def root_from_dict(data: dict) -> tuple[LateralRoot3D, dict, dict]:
    root = LateralRoot3D(
        root_id=int(data["id"]),
        start=np.array(data["start"]),
        end=np.array(data["end"]),
        reproj_error_total=float(data["err"]),
        views_used=[int(v) for v in data["views"]],
    )
    observations = {
        int(v): (np.array(o["start"]), np.array(o["end"]))
        for v, o in data.get("observations", {}).items()
    }
    boxes = {int(v): int(b) for v, b in data.get("boxes", {}).items()}
    return root, observations, boxes


def skeleton_to_dict(graph: SkeletonGraph) -> dict:
    return {
        "laterals": [root_to_dict(r) for r in graph.laterals],
        "adjacency": sorted([int(a), int(b)] for a, b in graph.adjacency),
        "components": [[int(i) for i in comp] for comp in graph.components],
        "main_root": [
            [[float(x) for x in p] for p in poly] for poly in graph.main_root_polylines()
        ],
    }


def skeleton_from_dict(data: dict) -> SkeletonGraph:
    laterals = [root_from_dict(d)[0] for d in data["laterals"]]
    return SkeletonGraph(
        laterals=laterals,
        adjacency={(int(a), int(b)) for a, b in data["adjacency"]},
        components=[[int(i) for i in comp] for comp in data["components"]],
    )


def write_skeleton_ply(path: Path, graph: SkeletonGraph) -> None:
    """ASCII PLY: lateral edges red, main-root edges green."""
    vertices = []
    index = {}
    for root in graph.laterals:
        index[("s", root.root_id)] = len(vertices)
        vertices.append(root.start)
        index[("e", root.root_id)] = len(vertices)
        vertices.append(root.end)
    edges = [
        (index[("s", r.root_id)], index[("e", r.root_id)], (255, 0, 0)) for r in graph.laterals
    ]
    for a, b in graph.main_root_edges():
        edges.append((index[("s", a)], index[("s", b)], (0, 255, 0)))

    buf = io.StringIO()
    buf.write("ply\nformat ascii 1.0\n")
    buf.write(f"element vertex {len(vertices)}\n")
    buf.write("property float x\nproperty float y\nproperty float z\n")
    buf.write(f"element edge {len(edges)}\n")
    buf.write("property int vertex1\nproperty int vertex2\n")
    buf.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
    buf.write("end_header\n")
    for v in vertices:
        buf.write(f"{v[0]!r} {v[1]!r} {v[2]!r}\n")
    for i, j, (r, g, b) in edges:
        buf.write(f"{i} {j} {r} {g} {b}\n")
    atomic_write_bytes(path, buf.getvalue().encode())


def write_sba_trace_csv(path: Path, report: SbaReport) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["iteration", "total_error", "lambda", "accepted"])
    for it, err, lam, accepted in report.trace_rows():
        writer.writerow([it, repr(err), repr(lam), int(accepted)])
    atomic_write_bytes(path, buf.getvalue().encode())


# ---------------------------------------------------------------------------
# scene bundles
# ---------------------------------------------------------------------------

def ground_truth_to_dict(gt: GroundTruth, root_ids_per_view=None) -> dict:
    data = {
        "main_root": [[float(x) for x in p] for p in gt.main_root],
        "laterals": [
            {
                "start": [float(x) for x in lat.start],
                "end": [float(x) for x in lat.end],
                "junction": int(lat.junction_index),
            }
            for lat in gt.laterals
        ],
        "adjacency": sorted([int(a), int(b)] for a, b in gt.adjacency),
    }
    if root_ids_per_view is not None:
        data["views"] = {
            str(k): {"root_ids": [int(i) for i in ids]}
            for k, ids in enumerate(root_ids_per_view)
        }
    return data


def ground_truth_from_dict(data: dict) -> tuple[GroundTruth, list[list[int]] | None]:
    gt = GroundTruth(
        main_root=np.array(data["main_root"], dtype=float),
        laterals=[
            Lateral(np.array(d["start"]), np.array(d["end"]), int(d["junction"]))
            for d in data["laterals"]
        ],
        adjacency={(int(a), int(b)) for a, b in data["adjacency"]},
    )
    root_ids = None
    if "views" in data:
        root_ids = [
            [int(i) for i in data["views"][k]["root_ids"]]
            for k in sorted(data["views"], key=int)
        ]
    return gt, root_ids


def write_scene_bundle(directory: Path, scene: SceneBundle) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_cameras(directory / "cameras.json", scene.views)
    for k, rv in enumerate(scene.rendered):
        write_mask_pgm(directory / f"view_{k}.mask.pgm", rv.mask)
        write_detections(directory / f"view_{k}.detections.json", rv.detections)
    for (a, b), matches in sorted(scene.matches.items()):
        write_matches(directory / f"matches_{a}_{b}.json", matches)
    write_json(
        directory / "ground_truth.json",
        ground_truth_to_dict(scene.ground_truth, [rv.root_ids for rv in scene.rendered]),
    )
