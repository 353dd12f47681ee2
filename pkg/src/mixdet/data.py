"""Deterministic synthetic detection scenes.

Scenes are colored geometric shapes (circle, square, triangle; the class id
is the shape type) rendered on a noisy background. Ground-truth boxes are
the tight pixel bounding boxes of each rendered shape, so a re-rasterization
oracle can verify them. Everything is a pure function of (master seed,
scene_id): each scene gets its own RNG stream, which makes generation
order-independent and byte-reproducible.

The archive format is a tar file holding one losslessly compressed PNG per
scene plus a single ``index.json`` with records
``{"scene_id": int, "objects": [{"class": int, "cx": .., "cy": .., "w": .., "h": ..}]}``.
"""

from __future__ import annotations

import io
import json
import tarfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .boxes import Box

CLASS_NAMES = ("circle", "square", "triangle")

# Per-class base colors; jittered per object so color alone is not a clean cue.
_PALETTE = ((0.85, 0.25, 0.20), (0.20, 0.75, 0.30), (0.25, 0.35, 0.85))


class DatasetError(ValueError):
    """Raised when a dataset archive cannot be parsed."""


@dataclass(frozen=True)
class DatasetSpec:
    seed: int = 0
    num_scenes: int = 100
    height: int = 64
    width: int = 64
    num_classes: int = 3
    max_objects: int = 5
    min_size: float = 0.05
    max_size: float = 0.35
    occlusion: bool = False
    noise: float = 0.10

    def __post_init__(self) -> None:
        if self.min_size > 1.0:
            raise ValueError(f"infeasible spec: min_size {self.min_size} > 1")
        if not 0 < self.min_size < self.max_size <= 1.0:
            raise ValueError(
                f"object sizes must satisfy 0 < min_size < max_size <= 1, "
                f"got [{self.min_size}, {self.max_size}]"
            )
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ValueError(f"num_classes must be in [1, {len(CLASS_NAMES)}]")
        if self.height < 16 or self.width < 16:
            raise ValueError("images must be at least 16x16")
        if self.max_objects < 0 or self.num_scenes < 0 or self.seed < 0:
            raise ValueError("seed, num_scenes and max_objects must be nonnegative")
        if self.noise < 0:
            raise ValueError("noise amplitude must be nonnegative")


@dataclass(frozen=True)
class Scene:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1], quantized to 8-bit levels
    objects: tuple[tuple[int, Box], ...]
    scene_id: int

    def target_tensors(self) -> tuple[torch.Tensor, torch.Tensor]:
        classes = torch.tensor([c for c, _ in self.objects], dtype=torch.long)
        boxes = torch.tensor(
            [b.as_tuple() for _, b in self.objects], dtype=torch.float32
        ).reshape(len(self.objects), 4)
        return classes, boxes


def scenes_equal(a: Scene, b: Scene) -> bool:
    return (
        a.scene_id == b.scene_id
        and a.objects == b.objects
        and np.array_equal(a.image, b.image)
    )


def _shape_mask(kind: int, cx: float, cy: float, size: float, xx, yy) -> np.ndarray:
    if kind == 0:  # circle
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= (size / 2) ** 2
    if kind == 1:  # square
        return np.maximum(np.abs(xx - cx), np.abs(yy - cy)) <= size / 2
    # triangle, apex up: half-width grows linearly from the apex
    y_top = cy - size / 2
    inside_rows = (yy >= y_top) & (yy <= cy + size / 2)
    half_width = (yy - y_top) / 2
    return inside_rows & (np.abs(xx - cx) <= half_width)


def _mask_bbox(mask: np.ndarray, height: int, width: int) -> Box | None:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    x0 = cols[0] / width
    x1 = (cols[-1] + 1) / width
    y0 = rows[0] / height
    y1 = (rows[-1] + 1) / height
    return Box.from_corners(x0, y0, x1, y1)


def _boxes_overlap(a: Box, b: Box) -> bool:
    ax0, ay0, ax1, ay1 = a.corners
    bx0, by0, bx1, by1 = b.corners
    return min(ax1, bx1) > max(ax0, bx0) and min(ay1, by1) > max(ay0, by0)


def render_shape(
    kind: int, cx: float, cy: float, size: float, height: int, width: int
) -> np.ndarray:
    """Boolean mask of one shape on the pixel-center grid."""
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    xx, yy = np.meshgrid(xs, ys)
    return _shape_mask(kind, cx, cy, size, xx, yy)


def _generate_scene(spec: DatasetSpec, scene_id: int) -> Scene:
    rng = np.random.default_rng([spec.seed, scene_id])
    h, w = spec.height, spec.width
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    xx, yy = np.meshgrid(xs, ys)

    base = rng.uniform(0.30, 0.55)
    image = np.full((h, w, 3), base, dtype=np.float64)
    image += rng.normal(0.0, spec.noise, size=(h, w, 3))

    count = int(rng.integers(1, spec.max_objects + 1)) if spec.max_objects > 0 else 0
    size_lo = max(spec.min_size * 1.3, 5.0 / min(h, w))
    size_hi = max(spec.max_size, size_lo * 1.01)

    objects: list[tuple[int, Box]] = []
    for _ in range(count):
        for _attempt in range(40):
            kind = int(rng.integers(0, spec.num_classes))
            size = float(rng.uniform(size_lo, size_hi))
            margin = size / 2 + 1.0 / min(h, w)
            if margin >= 0.5:
                continue
            cx = float(rng.uniform(margin, 1 - margin))
            cy = float(rng.uniform(margin, 1 - margin))
            mask = _shape_mask(kind, cx, cy, size, xx, yy)
            bbox = _mask_bbox(mask, h, w)
            if bbox is None or bbox.w < spec.min_size or bbox.h < spec.min_size:
                continue
            if not spec.occlusion and any(_boxes_overlap(bbox, b) for _, b in objects):
                continue
            color = np.clip(
                np.asarray(_PALETTE[kind]) + rng.uniform(-0.08, 0.08, size=3), 0, 1
            )
            brightness = float(rng.uniform(0.85, 1.1))
            image[mask] = np.clip(color * brightness, 0, 1)
            objects.append((kind, bbox))
            break

    quantized = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    return Scene(
        image=quantized.astype(np.float32) / 255.0,
        objects=tuple(objects),
        scene_id=scene_id,
    )


def generate(spec: DatasetSpec) -> list[Scene]:
    """Render all scenes of a spec; bit-identical for identical specs."""
    return [_generate_scene(spec, scene_id) for scene_id in range(spec.num_scenes)]


def _image_member_name(scene_id: int) -> str:
    return f"images/{scene_id:06d}.png"


def _tar_member(name: str, payload: bytes) -> tarfile.TarInfo:
    info = tarfile.TarInfo(name=name)
    info.size = len(payload)
    info.mtime = 0
    info.uid = info.gid = 0
    info.uname = info.gname = ""
    info.mode = 0o644
    return info


def save_scenes(scenes: list[Scene], path: str | Path) -> None:
    """Write the tar archive (PNG per scene + index.json); byte-deterministic."""
    index = [
        {
            "scene_id": scene.scene_id,
            "objects": [
                {"class": int(c), "cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h}
                for c, b in scene.objects
            ],
        }
        for scene in scenes
    ]
    with tarfile.open(path, "w") as tar:
        payload = json.dumps(index, indent=1).encode("utf-8")
        tar.addfile(_tar_member("index.json", payload), io.BytesIO(payload))
        for scene in scenes:
            u8 = np.clip(np.round(scene.image * 255.0), 0, 255).astype(np.uint8)
            buf = io.BytesIO()
            Image.fromarray(u8, mode="RGB").save(buf, format="PNG")
            png = buf.getvalue()
            tar.addfile(_tar_member(_image_member_name(scene.scene_id), png), io.BytesIO(png))


def load_scenes(path: str | Path) -> list[Scene]:
    """Read an archive back; exact inverse of save_scenes.

    Raises DatasetError (with the offending scene id where known) instead of
    crashing on malformed input; FileNotFoundError if the path is absent.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset archive not found: {path}")
    try:
        tar = tarfile.open(path, "r")
    except tarfile.TarError as err:
        raise DatasetError(f"corrupt dataset archive {path}: {err}") from err
    try:
        return _read_archive(tar, path)
    except tarfile.TarError as err:
        raise DatasetError(f"corrupt dataset archive {path}: {err}") from err
    finally:
        tar.close()


def _read_archive(tar: tarfile.TarFile, path: Path) -> list[Scene]:
    try:
        index_member = tar.extractfile("index.json")
    except KeyError:
        raise DatasetError(f"{path}: missing index.json") from None
    if index_member is None:
        raise DatasetError(f"{path}: index.json is not a regular file")
    try:
        index = json.loads(index_member.read().decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as err:
        raise DatasetError(f"{path}: cannot parse index.json: {err}") from err
    if not isinstance(index, list):
        raise DatasetError(f"{path}: index.json must be a list of scene records")

    scenes: list[Scene] = []
    for position, record in enumerate(index):
        try:
            scene_id = int(record["scene_id"])
            raw_objects = record["objects"]
        except (TypeError, KeyError) as err:
            raise DatasetError(f"{path}: malformed record at position {position}") from err
        try:
            member = tar.extractfile(_image_member_name(scene_id))
        except KeyError:
            member = None
        if member is None:
            raise DatasetError(f"scene {scene_id}: missing image member in {path}")
        try:
            with Image.open(io.BytesIO(member.read())) as img:
                u8 = np.asarray(img.convert("RGB"), dtype=np.uint8)
        except Exception as err:  # PIL raises various decode errors
            raise DatasetError(f"scene {scene_id}: cannot decode image: {err}") from err
        try:
            objects = tuple(
                (int(o["class"]), Box(o["cx"], o["cy"], o["w"], o["h"]))
                for o in raw_objects
            )
        except (TypeError, KeyError, ValueError) as err:
            raise DatasetError(f"scene {scene_id}: invalid object record: {err}") from err
        scenes.append(
            Scene(image=u8.astype(np.float32) / 255.0, objects=objects, scene_id=scene_id)
        )
    return scenes
