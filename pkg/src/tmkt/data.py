"""Synthetic paired static/event data, static encoding, and sequence file I/O.

Event sequences are produced with a desk-scale DVS model: a parametric
shape translates across the canvas and any per-pixel intensity change
whose magnitude exceeds a contrast threshold emits an ON or OFF event
(two channels). The paired static sample is the rendered RGB image of
the same scene instance, encoded by duplicating the HSV value channel
into both polarity channels and repeating it across time steps.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, PairingError

STATIC = 1
EVENT = 0

SHAPE_FAMILIES = ("square", "circle", "triangle", "cross", "bar")

SEQ_MAGIC = b"TMKT"
SEQ_VERSION = 1


@dataclass
class FrameSeq:
    """A T-step frame sequence with per-frame modality tags and a label."""

    data: np.ndarray            # (T, C, H, W) float32
    modality: np.ndarray        # (T,) uint8, 1 = static, 0 = event
    label: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.modality = np.asarray(self.modality, dtype=np.uint8)
        if self.data.ndim != 4:
            raise DataError(f"frame sequence must be (T,C,H,W), got shape {self.data.shape}")
        if self.modality.shape != (self.data.shape[0],):
            raise DataError("modality tags must have one entry per time step")

    @property
    def timesteps(self) -> int:
        return self.data.shape[0]


# ---------------------------------------------------------------------------
# sequence file format
# ---------------------------------------------------------------------------
# magic "TMKT" | version u16 LE | rank u16 LE | dims u32 LE * rank | payload
# payload: float32 LE, row-major.

def save_tensor(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype="<f4")
    header = SEQ_MAGIC + struct.pack("<HH", SEQ_VERSION, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(array.tobytes())


def load_tensor(path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read sequence file {path}: {exc}") from exc
    if len(blob) < 8:
        raise FormatError(f"{path}: file too short ({len(blob)} bytes) for header")
    if blob[:4] != SEQ_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r} at offset 0, expected {SEQ_MAGIC!r}")
    version, rank = struct.unpack_from("<HH", blob, 4)
    if version != SEQ_VERSION:
        raise FormatError(f"{path}: unsupported format version {version} at offset 4")
    dims_end = 8 + 4 * rank
    if len(blob) < dims_end:
        raise FormatError(f"{path}: truncated dims block, need {dims_end} bytes, have {len(blob)}")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    expected = dims_end + 4 * int(np.prod(dims, dtype=np.int64))
    if len(blob) != expected:
        raise FormatError(
            f"{path}: payload size mismatch, expected {expected} bytes total, have {len(blob)}"
        )
    flat = np.frombuffer(blob, dtype="<f4", offset=dims_end)
    return flat.reshape(dims).copy()


def save_seq(path, seq: FrameSeq) -> None:
    save_tensor(path, seq.data)


def load_seq(path, modality: int, label: int) -> FrameSeq:
    data = load_tensor(path)
    tags = np.full(data.shape[0], modality, dtype=np.uint8)
    return FrameSeq(data=data, modality=tags, label=label)


# ---------------------------------------------------------------------------
# static encoding
# ---------------------------------------------------------------------------

def encode_static(image: np.ndarray, timesteps: int) -> np.ndarray:
    """Encode an RGB image as a (T, 2, H, W) static sequence.

    Keeps the HSV value channel (max over RGB), duplicates it into both
    polarity channels, and repeats it at every time step.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"expected (H,W,3) RGB image, got shape {image.shape}")
    if image.min() < 0.0 or image.max() > 1.0:
        warnings.warn("RGB values outside [0,1] clamped before encoding", stacklevel=2)
        image = np.clip(image, 0.0, 1.0)
    value = image.max(axis=2)                      # HSV V = max(R,G,B)
    frame = np.stack([value, value], axis=0)       # duplicate into ON/OFF slots
    return np.repeat(frame[None], timesteps, axis=0).astype(np.float32)


# ---------------------------------------------------------------------------
# scene rendering and event simulation
# ---------------------------------------------------------------------------

def render_shape(family: str, cx: float, cy: float, size: float, h: int, w: int) -> np.ndarray:
    """Rasterize one shape as an intensity image in [0,1] with soft 1px edges."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if family == "square":
        dist = np.maximum(np.abs(dx), np.abs(dy)) - size
    elif family == "circle":
        dist = np.hypot(dx, dy) - size
    elif family == "triangle":
        # upward triangle: inside when below the two slanted edges and above the base
        dist = np.maximum.reduce([dy - size, -dy - size + 2.0 * np.abs(dx)]) / 2.0
    elif family == "cross":
        arm = size / 2.5
        bar_h = np.maximum(np.abs(dx) - size, np.abs(dy) - arm)
        bar_v = np.maximum(np.abs(dy) - size, np.abs(dx) - arm)
        dist = np.minimum(bar_h, bar_v)
    elif family == "bar":
        dist = np.maximum(np.abs(dx) - size, np.abs(dy) - size / 3.0)
    else:
        raise ConfigError(f"unknown shape family {family!r}")
    return np.clip(0.5 - dist, 0.0, 1.0)


def simulate_events(
    family: str,
    start: tuple[float, float],
    velocity: tuple[float, float],
    size: float,
    h: int,
    w: int,
    timesteps: int,
    contrast: float = 0.1,
) -> np.ndarray:
    """Emit (T, 2, H, W) binary ON/OFF event frames from a translating shape."""
    frames = np.zeros((timesteps, 2, h, w), dtype=np.float32)
    prev = render_shape(family, start[0], start[1], size, h, w)
    for t in range(1, timesteps + 1):
        cur = render_shape(
            family, start[0] + velocity[0] * t, start[1] + velocity[1] * t, size, h, w
        )
        diff = cur - prev
        frames[t - 1, 0] = diff > contrast       # ON
        frames[t - 1, 1] = diff < -contrast      # OFF
        prev = cur
    return frames


def _sample_scene(rng: np.random.Generator, label: int, h: int, w: int):
    family = SHAPE_FAMILIES[label % len(SHAPE_FAMILIES)]
    size = rng.uniform(0.16, 0.24) * min(h, w)
    margin = size + 2.0
    cx = rng.uniform(margin, w - margin)
    cy = rng.uniform(margin, h - margin)
    speed = rng.uniform(0.5, 1.0)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    velocity = (speed * np.cos(angle), speed * np.sin(angle))
    # class-consistent brightness band, random hue-ish channel weighting
    color = rng.uniform(0.6, 1.0, size=3)
    color /= color.max()
    return family, (cx, cy), velocity, size, color


def gen_paired_dataset(
    out_dir,
    classes: int = 5,
    per_class: int = 20,
    size: int = 24,
    timesteps: int = 8,
    seed: int = 0,
    contrast: float = 0.1,
) -> dict:
    """Write paired static/event sequence files plus a JSON manifest.

    Deterministic in (seed, parameters): every sample gets its own
    generator spawned from (seed, sample id), so generation order does
    not matter.
    """
    if classes < 1 or classes > len(SHAPE_FAMILIES):
        raise ConfigError(f"classes must be in 1..{len(SHAPE_FAMILIES)}")
    if size < 8 or timesteps < 1:
        raise ConfigError("need size >= 8 and timesteps >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    samples = []
    for label in range(classes):
        for k in range(per_class):
            sample_id = label * per_class + k
            rng = np.random.default_rng([seed, sample_id])
            family, start, velocity, shape_size, color = _sample_scene(rng, label, size, size)

            intensity = render_shape(family, start[0], start[1], shape_size, size, size)
            rgb = intensity[:, :, None] * color[None, None, :]
            static = encode_static(rgb, timesteps)
            event = simulate_events(
                family, start, velocity, shape_size, size, size, timesteps, contrast
            )

            static_path = out_dir / f"static_{sample_id:04d}.seq"
            event_path = out_dir / f"event_{sample_id:04d}.seq"
            save_tensor(static_path, static)
            save_tensor(event_path, event)
            samples.append({
                "id": sample_id,
                "label": label,
                "static": static_path.name,
                "event": event_path.name,
                "shape": [timesteps, 2, size, size],
            })

    manifest = {
        "version": 1,
        "classes": list(SHAPE_FAMILIES[:classes]),
        "image_size": size,
        "timesteps": timesteps,
        "seed": seed,
        "contrast": contrast,
        "per_class": per_class,
        "samples": samples,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def load_dataset(manifest_path):
    """Load a generated dataset into memory.

    Returns (static, event, labels) with static/event of shape
    (N, T, 2, H, W) float32 and labels (N,) int64.
    """
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
    base = manifest_path.parent
    statics, events, labels = [], [], []
    for entry in manifest["samples"]:
        s = load_tensor(base / entry["static"])
        e = load_tensor(base / entry["event"])
        if s.shape != e.shape:
            raise PairingError(
                f"sample {entry['id']}: static shape {s.shape} != event shape {e.shape}"
            )
        if list(s.shape) != list(entry["shape"]):
            raise FormatError(
                f"sample {entry['id']}: manifest shape {entry['shape']} != file shape {list(s.shape)}"
            )
        statics.append(s)
        events.append(e)
        labels.append(entry["label"])
    return (
        np.stack(statics).astype(np.float32),
        np.stack(events).astype(np.float32),
        np.asarray(labels, dtype=np.int64),
        manifest,
    )
