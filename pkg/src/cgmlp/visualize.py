"""Conv-stem feature-map capture and per-channel grayscale export (binary PGM)."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .models import Model
from .tensor import Tensor


class VisualizationError(Exception):
    pass


@dataclass
class FeatureCapture:
    layer: str
    snapshot: np.ndarray  # [C, h, w], a pure copy of the activation
    image_index: int = -1


def capture_feature_maps(model: Model, img: Tensor, layers,
                         image_index: int = -1) -> list[FeatureCapture]:
    """Run one forward pass and snapshot the requested stem activations.

    Valid names are `stem.<i>.act` (post-GELU) and `stem.<i>.pool` (post-pool).
    Capturing never changes the forward result.
    """
    valid = model.capture_names()
    for name in layers:
        if name not in valid:
            raise VisualizationError(f"unknown layer {name!r}; valid layers: {valid}")
    sink = {name: None for name in layers}
    model.forward(img, capture=sink)
    out = []
    for name in layers:
        snap = sink[name]
        if snap is None:
            raise VisualizationError(f"layer {name!r} produced no capture")
        out.append(FeatureCapture(layer=name, snapshot=snap[0], image_index=image_index))
    return out


def to_pgm_bytes(gray: np.ndarray) -> bytes:
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + gray.astype(np.uint8).tobytes()


def parse_pgm(raw: bytes):
    """Parse the binary PGM (P5) layout emitted by to_pgm_bytes."""
    parts = raw.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise VisualizationError("not a P5 PGM produced by this tool")
    w, h = (int(x) for x in parts[1].split())
    pixels = np.frombuffer(parts[3], dtype=np.uint8)
    if pixels.size != w * h:
        raise VisualizationError(f"PGM payload has {pixels.size} bytes, expected {w * h}")
    return pixels.reshape(h, w)


def normalize_channel(ch: np.ndarray) -> np.ndarray:
    """Min-max scale one channel to [0,255]; a constant channel maps to 0."""
    lo, hi = float(ch.min()), float(ch.max())
    if hi <= lo:
        return np.zeros(ch.shape, dtype=np.uint8)
    return np.round((ch - lo) / (hi - lo) * 255.0).astype(np.uint8)


def export_channel_images(fc: FeatureCapture, out_dir) -> list[str]:
    """One PGM per channel, named {layer}_{channel:03}.pgm."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for c in range(fc.snapshot.shape[0]):
        path = os.path.join(out_dir, f"{fc.layer}_{c:03}.pgm")
        with open(path, "wb") as f:
            f.write(to_pgm_bytes(normalize_channel(fc.snapshot[c])))
        paths.append(path)
    return paths


def export_history_csv(reports, path) -> str:
    from .training import history_csv
    text = history_csv(reports)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return text
