"""Image loading, normalization to [-1, 1], random crops and batching.

Binary PGM (P5, maxval 255) is always supported.  8-bit PNG goes through
Pillow when it is installed.  Colour input is reduced to luma with BT.601
weights before normalization.
"""
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from blockcs.rng import Xoshiro256

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
SUPPORTED_SUFFIXES = (".pgm", ".png")


class ImageFormatError(ValueError):
    pass


class UnsupportedImageError(ImageFormatError):
    pass


class ConfigError(ValueError):
    pass


def normalize(values):
    """8-bit grey levels (any real value in 0..255) to [-1, 1]."""
    return np.asarray(values, dtype=np.float64) / 127.5 - 1.0


def denormalize(pixels):
    return (np.asarray(pixels, dtype=np.float64) + 1.0) * 127.5


def to_uint8(pixels):
    """Map [-1, 1] pixels back to clamped, rounded 8-bit values."""
    return np.clip(np.rint(denormalize(pixels)), 0, 255).astype(np.uint8)


def _pgm_header(data, path):
    # Tokens: magic, width, height, maxval; '#' starts a comment to end of line.
    tokens = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(data):
            raise ImageFormatError(f"{path}: truncated PGM header")
        ch = data[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        else:
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
                pos += 1
            tokens.append(data[start:pos])
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageFormatError(f"{path}: missing whitespace after PGM maxval")
    return tokens, pos + 1


def read_pgm(path):
    """Read a binary P5 PGM as an H x W uint8 array."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise ImageFormatError(f"{path}: not a binary PGM (P5) file")
    tokens, offset = _pgm_header(data, path)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageFormatError(f"{path}: malformed PGM header {tokens!r}") from None
    if width < 1 or height < 1:
        raise ImageFormatError(f"{path}: invalid PGM extents {width}x{height}")
    if maxval > 255:
        raise UnsupportedImageError(f"{path}: 16-bit PGM (maxval {maxval}) is not supported")
    if maxval != 255:
        raise UnsupportedImageError(f"{path}: PGM maxval must be 255, got {maxval}")
    body = data[offset:offset + width * height]
    if len(body) != width * height:
        raise ImageFormatError(f"{path}: expected {width * height} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(path, pixels):
    """Write an H x W uint8 array as binary PGM."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ValueError(f"write_pgm expects an H x W uint8 array, got {pixels.dtype} {pixels.shape}")
    height, width = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels).tobytes())


def _read_png(path):
    try:
        from PIL import Image
    except ImportError:
        raise UnsupportedImageError(f"{path}: PNG support needs Pillow installed") from None
    try:
        with Image.open(path) as im:
            if im.mode in ("I;16", "I;16B", "I", "F"):
                raise UnsupportedImageError(f"{path}: only 8-bit PNG is supported (mode {im.mode})")
            if im.mode == "L":
                return np.asarray(im, dtype=np.uint8)
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise ImageFormatError(f"{path}: cannot read PNG ({exc})") from None


def to_gray(values):
    """H x W or H x W x 3 array of 8-bit values to float64 grey levels."""
    values = np.asarray(values)
    if values.ndim == 2:
        return values.astype(np.float64)
    if values.ndim == 3 and values.shape[2] >= 3:
        rgb = values[..., :3].astype(np.float64)
        r, g, b = LUMA_WEIGHTS
        return r * rgb[..., 0] + g * rgb[..., 1] + b * rgb[..., 2]
    raise ImageFormatError(f"cannot convert array of shape {values.shape} to grey")


@dataclass
class ImageRecord:
    path: str
    pixels: np.ndarray  # 1 x 1 x H x W, float32 in [-1, 1]

    @property
    def height(self):
        return self.pixels.shape[2]

    @property
    def width(self):
        return self.pixels.shape[3]


def load_image(path, dtype=np.float32):
    path = os.fspath(path)
    suffix = Path(path).suffix.lower()
    if not os.path.exists(path):
        raise ImageFormatError(f"{path}: file not found")
    if suffix == ".png":
        raw = _read_png(path)
    elif suffix == ".pgm":
        raw = read_pgm(path)
    else:
        raise UnsupportedImageError(f"{path}: unsupported image format {suffix!r}")
    pixels = normalize(to_gray(raw)).astype(dtype)
    return ImageRecord(path, pixels[None, None])


def list_images(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"{directory}: not a directory")
    return sorted(str(p) for p in directory.iterdir() if p.suffix.lower() in SUPPORTED_SUFFIXES)


def load_directory(directory, dtype=np.float32):
    return [load_image(p, dtype) for p in list_images(directory)]


def crop_to_multiple(pixels, block_size):
    """Centre-crop an N x C x H x W array to the largest extents divisible by
    ``block_size``; returns ``(cropped, was_cropped)``."""
    H, W = pixels.shape[-2:]
    h, w = H - H % block_size, W - W % block_size
    if h == 0 or w == 0:
        raise ConfigError(f"image {H}x{W} is smaller than one {block_size}x{block_size} block")
    top, left = (H - h) // 2, (W - w) // 2
    return pixels[..., top:top + h, left:left + w], (h, w) != (H, W)


def random_crop(record, crop_size, rng):
    """Uniformly placed ``crop_size`` square from ``record`` (1 x 1 x c x c)."""
    H, W = record.height, record.width
    if H < crop_size or W < crop_size:
        raise ConfigError(f"{record.path}: image {H}x{W} is smaller than crop size {crop_size}")
    top = rng.below(H - crop_size + 1)
    left = rng.below(W - crop_size + 1)
    return record.pixels[:, :, top:top + crop_size, left:left + crop_size]


class BatchIterator:
    """Deterministic stream of T x 1 x crop x crop batches.

    Each pass over the records uses the order ``permutation`` drawn from the
    stream ``(seed, pass index)``; crop corners come from one generator
    seeded with ``seed`` whose state is part of ``state_dict``.  A pass ends
    with a short batch when T does not divide the record count.
    """

    def __init__(self, records, crop_size, batch_size, seed=0, block_size=None):
        if not records:
            raise ConfigError("dataset is empty")
        if batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {batch_size}")
        if block_size is not None and crop_size % block_size:
            raise ConfigError(f"crop size {crop_size} must be a multiple of block size {block_size}")
        for record in records:
            if record.height < crop_size or record.width < crop_size:
                raise ConfigError(
                    f"{record.path}: image {record.height}x{record.width} is smaller than crop size {crop_size}"
                )
        self.records = list(records)
        self.crop_size = crop_size
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = 0
        self.cursor = 0
        self.rng = Xoshiro256(seed)
        self._order = None

    @property
    def batches_per_epoch(self):
        return -(-len(self.records) // self.batch_size)

    def _epoch_order(self):
        if self._order is None:
            self._order = Xoshiro256.for_stream(self.seed, self.epoch).permutation(len(self.records))
        return self._order

    def next_batch(self):
        order = self._epoch_order()
        picked = order[self.cursor:self.cursor + self.batch_size]
        crops = [random_crop(self.records[i], self.crop_size, self.rng) for i in picked]
        self.cursor += len(picked)
        if self.cursor >= len(order):
            self.epoch += 1
            self.cursor = 0
            self._order = None
        return np.concatenate(crops, axis=0)

    def __iter__(self):
        return self

    def __next__(self):
        return self.next_batch()

    def state_dict(self):
        return {"epoch": self.epoch, "cursor": self.cursor, "rng": self.rng.to_bytes()}

    def load_state_dict(self, state):
        self.epoch = int(state["epoch"])
        self.cursor = int(state["cursor"])
        self.rng = Xoshiro256.from_bytes(state["rng"])
        self._order = None


def next_batch(iterator):
    return iterator.next_batch()
