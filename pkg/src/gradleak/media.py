"""Frame and feature I/O plus the image-side transforms of the pipeline:
resize + center-crop preprocessing, tensor/frame conversion, bicubic
upscaling, and feature-block max pooling.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import DimensionError, Tensor


class FormatError(ValueError):
    pass


@dataclass
class Frame:
    """8-bit sRGB image; pixels are (height, width, 3) uint8."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
            raise FormatError(f"frame pixels must be (h, w, 3) uint8, got {arr.shape} {arr.dtype}")
        self.pixels = arr

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    def __eq__(self, other):
        return isinstance(other, Frame) and np.array_equal(self.pixels, other.pixels)


@dataclass
class FrameSequence:
    frames: list = field(default_factory=list)
    fps: float = 30.0

    def __post_init__(self):
        if self.fps <= 0:
            raise FormatError("fps must be positive")
        dims = {(f.height, f.width) for f in self.frames}
        if len(dims) > 1:
            raise FormatError(f"mixed frame dimensions: {sorted(dims)}")

    def __len__(self):
        return len(self.frames)


@dataclass
class FeatureMatrix:
    shape: tuple
    values: np.ndarray

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if int(np.prod(self.shape)) != self.values.size:
            raise FormatError(
                f"shape {self.shape} does not match {self.values.size} values"
            )

    def as_array(self):
        return self.values.reshape(self.shape)


# ---------------------------------------------------------------------------
# frame directories


def load_frame_dir(path):
    """Frames from zero-padded numerically named images, sorted ascending."""
    path = Path(path)
    files = sorted(
        p for p in path.iterdir() if p.suffix.lower() in (".png", ".ppm")
    )
    frames = []
    for p in files:
        try:
            with Image.open(p) as im:
                frames.append(Frame(np.asarray(im.convert("RGB"))))
        except FormatError:
            raise
        except OSError as e:
            raise OSError(f"unreadable frame file {p}: {e}") from e
    fps = 30.0
    meta = path / "meta.json"
    if meta.exists():
        with open(meta) as f:
            fps = float(json.load(f).get("fps", 30.0))
    return FrameSequence(frames=frames, fps=fps)


def write_frame_dir(seq, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        Image.fromarray(frame.pixels, mode="RGB").save(path / f"frame_{i:06d}.png")
    with open(path / "meta.json", "w") as f:
        json.dump({"fps": seq.fps}, f)


# ---------------------------------------------------------------------------
# resampling


def _resize_axis_coords(n_out, n_in):
    """Source sample positions under half-pixel alignment."""
    scale = n_in / n_out
    return (np.arange(n_out) + 0.5) * scale - 0.5


def resize_bilinear(pixels, out_h, out_w):
    """Separable bilinear resample of a float (h, w, c) array, edge-clamped."""
    arr = np.asarray(pixels, dtype=np.float64)
    h, w = arr.shape[:2]
    ys = _resize_axis_coords(out_h, h)
    xs = _resize_axis_coords(out_w, w)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    fx = np.clip(xs - x0, 0.0, 1.0)
    top = arr[y0][:, x0] * (1 - fx)[None, :, None] + arr[y0][:, x1] * fx[None, :, None]
    bot = arr[y1][:, x0] * (1 - fx)[None, :, None] + arr[y1][:, x1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


def _catmull_rom_weights(t):
    """Cubic kernel weights (a = -0.5) for the 4 taps around fraction t."""
    a = -0.5
    t = np.asarray(t)
    w = np.empty(t.shape + (4,))
    for i, off in enumerate((-1.0, 0.0, 1.0, 2.0)):
        x = np.abs(t - off)
        w[..., i] = np.where(
            x <= 1,
            (a + 2) * x**3 - (a + 3) * x**2 + 1,
            np.where(x < 2, a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a, 0.0),
        )
    return w


def resize_bicubic(pixels, out_h, out_w):
    """Separable Catmull-Rom resample of a float (h, w, c) array, edge-clamped."""
    arr = np.asarray(pixels, dtype=np.float64)
    h, w = arr.shape[:2]

    def axis_taps(n_out, n_in):
        coords = _resize_axis_coords(n_out, n_in)
        base = np.floor(coords).astype(int)
        frac = coords - base
        taps = np.clip(base[:, None] + np.arange(-1, 3)[None, :], 0, n_in - 1)
        return taps, _catmull_rom_weights(frac)

    ty, wy = axis_taps(out_h, h)
    tx, wx = axis_taps(out_w, w)
    tmp = np.einsum("hkwc,hk->hwc", arr[ty, :, :], wy)
    return np.einsum("hwkc,wk->hwc", tmp[:, tx, :], wx)


def preprocess(frame, target=32):
    """Resize so the shorter side equals target, center-crop to a square,
    and scale to a float tensor in [0, 1] with channel-planar layout.
    """
    h, w = frame.height, frame.width
    if min(h, w) == target and h == w:
        arr = frame.pixels.astype(np.float64)
    else:
        if h <= w:
            new_h = target
            new_w = int(np.floor(w * target / h + 0.5))
        else:
            new_w = target
            new_h = int(np.floor(h * target / w + 0.5))
        arr = resize_bilinear(frame.pixels.astype(np.float64), new_h, new_w)
        top = (new_h - target) // 2
        left = (new_w - target) // 2
        arr = arr[top : top + target, left : left + target, :]
    return Tensor(np.transpose(arr / 255.0, (2, 0, 1)).copy())


def tensor_to_frame(t):
    """Clamp a (3, h, w) tensor to [0, 1] and quantize to 8-bit pixels."""
    arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DimensionError(f"expected (3, h, w) tensor, got {arr.shape}")
    arr = np.clip(arr, 0.0, 1.0) * 255.0
    # round half away from zero (values are non-negative here)
    pixels = np.floor(arr + 0.5).astype(np.uint8)
    return Frame(np.transpose(pixels, (1, 2, 0)).copy())


def upscale_bicubic(frame, factor):
    """Integer-factor Catmull-Rom upscale; output dims are exactly factor x."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return Frame(frame.pixels.copy())
    out = resize_bicubic(
        frame.pixels.astype(np.float64),
        frame.height * factor,
        frame.width * factor,
    )
    return Frame(np.floor(np.clip(out, 0.0, 255.0) + 0.5).astype(np.uint8))


def resize_frame(frame, out_h, out_w):
    """Bicubic resize of an 8-bit frame to arbitrary dimensions."""
    if (frame.height, frame.width) == (out_h, out_w):
        return Frame(frame.pixels.copy())
    out = resize_bicubic(frame.pixels.astype(np.float64), out_h, out_w)
    return Frame(np.floor(np.clip(out, 0.0, 255.0) + 0.5).astype(np.uint8))


# ---------------------------------------------------------------------------
# feature matrices

_FMAT_MAGIC = b"FMAT"


def write_feature_matrix(m, path):
    """FMAT binary: magic, u32 rank, u32 dims, little-endian f32 payload."""
    with open(path, "wb") as f:
        f.write(_FMAT_MAGIC)
        f.write(struct.pack("<I", len(m.shape)))
        f.write(struct.pack(f"<{len(m.shape)}I", *m.shape))
        f.write(m.values.astype("<f4").tobytes())


def feature_matrix_to_json(m):
    return {"shape": list(m.shape), "data": [float(v) for v in m.values]}


def load_feature_matrix(path):
    """FMAT binary or the JSON tensor form, detected by content."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == _FMAT_MAGIC:
        (rank,) = struct.unpack_from("<I", raw, 4)
        dims = struct.unpack_from(f"<{rank}I", raw, 8)
        off = 8 + 4 * rank
        n = int(np.prod(dims))
        payload = raw[off:]
        if len(payload) != 4 * n:
            raise FormatError(
                f"{path}: FMAT payload is {len(payload)} bytes, expected {4 * n}"
            )
        values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        return FeatureMatrix(shape=dims, values=values)
    try:
        obj = json.loads(raw.decode())
        return FeatureMatrix(shape=obj["shape"], values=np.asarray(obj["data"]))
    except (ValueError, KeyError) as e:
        raise FormatError(f"{path}: neither FMAT nor JSON tensor ({e})") from e


def max_pool_features(m, window):
    """Non-overlapping max over consecutive windows along the last axis."""
    last = m.shape[-1]
    if window < 1 or last % window != 0:
        divisors = [d for d in range(1, last + 1) if last % d == 0]
        raise DimensionError(
            f"window {window} does not divide last dimension {last}; "
            f"valid windows include {divisors[:8]}..."
        )
    arr = m.as_array()
    out = arr.reshape(m.shape[:-1] + (last // window, window)).max(axis=-1)
    return FeatureMatrix(shape=out.shape, values=out)
