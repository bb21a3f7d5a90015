"""Image, raster, mesh and JSON file helpers."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

_REGION_PALETTE = [
    (128, 128, 128), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60),
]


def write_json(path, obj):
    path = Path(path)
    try:
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"failed to write {path}: {exc}") from exc


def to_uint8(img):
    return (np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(path, img):
    Image.fromarray(to_uint8(img)).save(path)


def read_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def write_labels(path, labels):
    im = Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="P")
    flat = [c for rgb in _REGION_PALETTE for c in rgb]
    im.putpalette(flat + [0] * (768 - len(flat)))
    im.save(path)


def read_labels(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.int64)


def write_depth(path, depth):
    np.ascontiguousarray(depth, dtype="<f4").tofile(path)


def read_depth(path, width, height) -> np.ndarray:
    data = np.fromfile(path, dtype="<f4")
    if data.size != width * height:
        raise ValueError(f"{path}: expected {width * height} floats, found {data.size}")
    return data.reshape(height, width)


def write_frame(frames_dir, rec):
    frames_dir = Path(frames_dir)
    t = rec.frame_id
    write_png(frames_dir / f"{t}.png", rec.rgb)
    write_png(frames_dir / f"{t}.mask.png", rec.mask)
    write_depth(frames_dir / f"{t}.depth.f32", rec.pseudo_depth)
    write_labels(frames_dir / f"{t}.region.png", rec.region_map)
    write_json(frames_dir / f"{t}.meta.json", {
        "frame_id": int(t),
        "expression": [float(x) for x in rec.expression],
        "camera": rec.camera.to_dict(),
    })


def read_frame(frames_dir, t, width, height):
    from .scene import CameraModel, FrameRecord

    frames_dir = Path(frames_dir)
    meta = json.loads((frames_dir / f"{t}.meta.json").read_text())
    mask = read_png(frames_dir / f"{t}.mask.png")
    return FrameRecord(
        frame_id=int(meta["frame_id"]),
        rgb=read_png(frames_dir / f"{t}.png")[..., :3],
        mask=(mask > 0.5).astype(np.float64),
        pseudo_depth=read_depth(frames_dir / f"{t}.depth.f32", width, height),
        region_map=read_labels(frames_dir / f"{t}.region.png"),
        expression=np.asarray(meta["expression"], dtype=np.float64),
        camera=CameraModel.from_dict(meta["camera"]),
    )


def write_obj(path, vertices, faces):
    with open(path, "w") as fh:
        for v in vertices:
            fh.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for f in faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def read_obj(path):
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)
