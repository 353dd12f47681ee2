"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

import numpy as np

from .boxes import Box
from .data import Scene


def check_image_batch(X) -> np.ndarray:
    """Coerce to a float32 (n, H, W, 3) array with values in [0, 1]."""
    if isinstance(X, (list, tuple)):
        X = np.stack([np.asarray(x) for x in X]) if len(X) else np.zeros((0, 0, 0, 3))
    X = np.asarray(X)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images of shape (n, H, W, 3), got {X.shape}")
    if X.dtype == np.uint8:
        X = X.astype(np.float32) / 255.0
    X = X.astype(np.float32, copy=False)
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")
    return X


def check_annotations(y, num_images: int, num_classes: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Normalize per-image annotations to (labels, center-form boxes) arrays.

    Accepts dicts with 'labels' and 'boxes' keys or (labels, boxes) pairs.
    """
    if len(y) != num_images:
        raise ValueError(f"got {len(y)} annotation entries for {num_images} images")
    out = []
    for index, entry in enumerate(y):
        if isinstance(entry, dict):
            labels, boxes = entry.get("labels"), entry.get("boxes")
            if labels is None or boxes is None:
                raise ValueError(f"annotation {index} must carry 'labels' and 'boxes'")
        else:
            labels, boxes = entry
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        if labels.shape[0] != boxes.shape[0]:
            raise ValueError(f"annotation {index}: {labels.shape[0]} labels vs {boxes.shape[0]} boxes")
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValueError(f"annotation {index}: class ids must be in [0, {num_classes})")
        if boxes.size:
            if boxes[:, 2:].min() < 0:
                raise ValueError(f"annotation {index}: negative box extent")
            corners = np.concatenate(
                [boxes[:, :2] - boxes[:, 2:] / 2, boxes[:, :2] + boxes[:, 2:] / 2], axis=1
            )
            if corners.min() < -1e-6 or corners.max() > 1 + 1e-6:
                raise ValueError(f"annotation {index}: boxes must lie inside [0, 1]^2")
        out.append((labels, boxes))
    return out


def scenes_from_arrays(
    X, y, num_classes: int, first_scene_id: int = 0
) -> list[Scene]:
    """Bundle validated images and annotations into Scene records."""
    images = check_image_batch(X)
    annotations = check_annotations(y, images.shape[0], num_classes)
    scenes = []
    for index, (image, (labels, boxes)) in enumerate(zip(images, annotations)):
        objects = tuple(
            (int(label), Box(*[float(v) for v in box])) for label, box in zip(labels, boxes)
        )
        scenes.append(Scene(image=image, objects=objects, scene_id=first_scene_id + index))
    return scenes
