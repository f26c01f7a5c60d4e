"""Procedural labelled shape images and image-grid serialization."""

from __future__ import annotations

import functools
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from pixelgen import rng as rngmod
from pixelgen.errors import ConfigError, PixelGenError

SHAPES = ("circle", "square", "triangle", "cross")
# class id = shape_index * 2 + color_index
PALETTES = {
    "warm": np.array([[0.95, 0.35, 0.10], [0.90, 0.75, 0.15], [0.85, 0.15, 0.30]]),
    "cool": np.array([[0.10, 0.40, 0.95], [0.15, 0.80, 0.75], [0.45, 0.25, 0.90]]),
}
NUM_CLASSES = 8
SIZE = 16
SUPERSAMPLE = 4


def class_spec(class_id: int) -> tuple[str, str]:
    return SHAPES[class_id // 2], ("warm", "cool")[class_id % 2]


def _coverage(shape: str, cx: float, cy: float, r: float, angle: float) -> np.ndarray:
    n = SIZE * SUPERSAMPLE
    # subpixel centres in pixel units
    coords = (np.arange(n) + 0.5) / SUPERSAMPLE
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = xx - cx, yy - cy
    if shape in ("triangle", "cross"):
        c, s = np.cos(angle), np.sin(angle)
        dx, dy = c * dx + s * dy, -s * dx + c * dy
    if shape == "circle":
        inside = dx * dx + dy * dy <= r * r
    elif shape == "square":
        h = r * 0.85
        inside = (np.abs(dx) <= h) & (np.abs(dy) <= h)
    elif shape == "triangle":
        inside = np.ones_like(dx, dtype=bool)
        # equilateral: three half-planes at inradius r/2 (circumradius r)
        for k in range(3):
            a = -np.pi / 2 + 2 * np.pi * k / 3
            inside &= dx * np.cos(a) + dy * np.sin(a) <= r * 0.5
    else:
        arm = r * 0.35
        inside = ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    cov = inside.astype(np.float64).reshape(SIZE, SUPERSAMPLE, SIZE, SUPERSAMPLE)
    return cov.mean(axis=(1, 3))


@functools.lru_cache(maxsize=16384)
def _gen_cached(dataset_seed: int, index: int) -> tuple[bytes, int]:
    img, label = _render(dataset_seed, index)
    return img.tobytes(), label


def _render(dataset_seed: int, index: int) -> tuple[np.ndarray, int]:
    label = index % NUM_CLASSES
    shape, tone = class_spec(label)
    g = rngmod.stream(dataset_seed, "dataset", 0, index)
    cx = SIZE / 2 + g.uniform(-2, 2)
    cy = SIZE / 2 + g.uniform(-2, 2)
    r = g.uniform(3, 6)
    angle = g.uniform(0, 2 * np.pi)
    palette = PALETTES[tone]
    color = palette[g.integers(len(palette))] * g.uniform(0.85, 1.0)
    bg_level = g.uniform(0.15, 0.35)
    noise = g.uniform(-0.05, 0.05, size=(SIZE, SIZE))
    background = np.clip(bg_level + noise, 0.0, 1.0)
    cov = _coverage(shape, cx, cy, r, angle)
    rgb = cov[None] * color[:, None, None] + (1 - cov[None]) * background[None]
    img = (rgb * 2.0 - 1.0).clip(-1.0, 1.0).astype(np.float32)
    return img, label


def gen_sample(dataset_seed: int, index: int) -> tuple[np.ndarray, int]:
    """Render sample ``index``: a 3×16×16 float32 image in [-1, 1] and its class id."""
    raw, label = _gen_cached(int(dataset_seed), int(index))
    return np.frombuffer(raw, dtype=np.float32).reshape(3, SIZE, SIZE).copy(), label


def gen_batch(dataset_seed: int, indices, threads: int = 1) -> tuple[np.ndarray, np.ndarray]:
    indices = list(indices)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            items = list(pool.map(lambda i: gen_sample(dataset_seed, i), indices))
    else:
        items = [gen_sample(dataset_seed, i) for i in indices]
    return np.stack([im for im, _ in items]), np.array([lb for _, lb in items], dtype=np.int64)


def batch_indices(seed: int, step: int, batch_size: int, epoch_size: int) -> np.ndarray:
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    return rngmod.stream(seed, "data_index", step).integers(0, epoch_size, size=batch_size)


def batch_iter(dataset_seed: int, batch_size: int, seed: int, epoch_size: int = 4096,
               start_step: int = 0, threads: int = 1):
    """Yield ``(step, images, labels)`` forever; batch ``k`` depends only on ``(seed, k)``."""
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    step = start_step
    while True:
        idx = batch_indices(seed, step, batch_size, epoch_size)
        images, labels = gen_batch(dataset_seed, idx, threads)
        yield step, images, labels
        step += 1


# ------------------------------------------------------------------ images


def to_bytes(images: np.ndarray) -> np.ndarray:
    """Map [-1, 1] to uint8 via ``(x + 1) * 127.5`` with round-half-even."""
    scaled = (np.clip(np.asarray(images, dtype=np.float64), -1.0, 1.0) + 1.0) * 127.5
    return np.rint(scaled).astype(np.uint8)


def make_grid(images: np.ndarray, columns: int, pad: int = 2) -> np.ndarray:
    """Tile N×3×H×W images into an H'×W'×3 uint8 canvas with black separators."""
    n, _, h, w = images.shape
    columns = max(1, min(columns, n))
    rows = -(-n // columns)
    canvas = np.zeros((pad + rows * (h + pad), pad + columns * (w + pad), 3), dtype=np.uint8)
    tiles = to_bytes(images).transpose(0, 2, 3, 1)
    for i, tile in enumerate(tiles):
        r, c = divmod(i, columns)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        canvas[y : y + h, x : x + w] = tile
    return canvas


def encode_ppm(canvas: np.ndarray) -> bytes:
    h, w, _ = canvas.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + canvas.tobytes()


def encode_png(canvas: np.ndarray) -> bytes:
    h, w, _ = canvas.shape
    raw = b"".join(b"\x00" + canvas[y].tobytes() for y in range(h))

    def chunk(kind: bytes, payload: bytes) -> bytes:
        body = kind + payload
        return struct.pack(">I", len(payload)) + body + struct.pack(">I", zlib.crc32(body))

    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr) + chunk(b"IDAT", zlib.compress(raw)) + chunk(b"IEND", b"")


def write_image_grid(images: np.ndarray, path, columns: int = 8, png: bool = False) -> Path:
    path = Path(path)
    canvas = make_grid(np.asarray(images), columns)
    try:
        path.write_bytes(encode_ppm(canvas))
        if png:
            path.with_suffix(".png").write_bytes(encode_png(canvas))
    except OSError as exc:
        raise PixelGenError(f"cannot write image grid to {path}: {exc}") from exc
    return path


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise PixelGenError(f"{path} is not a binary PPM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)
