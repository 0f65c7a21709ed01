"""Image loading and the convolutional patch-feature extractor."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, DataError
from .layers import Linear, Module, xavier_uniform
from .tensor import Tensor

# ---------------------------------------------------------------- image files

IMGF_MAGIC = b"IMGF"


def save_pgm(path, image):
    """Write a [0, 1] float image as 8-bit binary PGM (P5)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise DataError(f"PGM images are 2-D, got shape {img.shape}")
    px = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = px.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + px.tobytes())


def _pgm_header(data, path):
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        fields.append(data[start:pos])
    return fields, pos + 1  # exactly one whitespace byte before the raster


def load_pgm(path):
    """Read a binary PGM into float64 values ``pixel / maxval``."""
    data = Path(path).read_bytes()
    fields, pos = _pgm_header(data, path)
    if fields[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    try:
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError:
        raise DataError(f"{path}: bad PGM header") from None
    if not 0 < maxval < 65536:
        raise DataError(f"{path}: bad PGM maxval {maxval}")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    n = w * h * np.dtype(dtype).itemsize
    if len(data) - pos < n:
        raise DataError(f"{path}: PGM raster truncated")
    px = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return px.astype(np.float64) / maxval


def save_imgf(path, array):
    """Raw float32 tensor: ``IMGF`` | u32 ndim | u32 dims... | float32 LE data."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    head = IMGF_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(head + arr.tobytes())


def load_imgf(path):
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != IMGF_MAGIC:
        raise DataError(f"{path}: not an IMGF file")
    (ndim,) = struct.unpack_from("<I", data, 4)
    if len(data) < 8 + 4 * ndim:
        raise DataError(f"{path}: truncated IMGF header")
    shape = struct.unpack_from(f"<{ndim}I", data, 8)
    count = int(np.prod(shape, dtype=np.int64))
    off = 8 + 4 * ndim
    if len(data) != off + 4 * count:
        raise DataError(f"{path}: IMGF payload has wrong size for shape {shape}")
    return np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float64)


def load_image(path, size=None):
    """Load a grayscale image as float64 in [0, 1].

    PGM and IMGF are read natively; other formats go through Pillow and are
    resized to ``size`` if given.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image not found: {path}")
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        img = load_pgm(path)
    elif suffix in (".imgf", ".raw"):
        img = load_imgf(path)
    else:
        try:
            from PIL import Image
        except ImportError:
            raise DataError(f"{path}: reading {suffix} files needs Pillow") from None
        with Image.open(path) as im:
            im = im.convert("L")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            img = np.asarray(im, dtype=np.float64) / 255.0
    if img.ndim != 2:
        raise DataError(f"{path}: expected a single-channel 2-D image, got shape {img.shape}")
    return img


# ---------------------------------------------------------------- feature extractor


class PatchExtractor(Module):
    """Two conv(3x3)+ReLU+maxpool(2) stages, then a linear map per patch.

    A ``patch_size`` x ``patch_size`` pixel patch covers
    ``(patch_size / 4)**2`` cells of the pooled feature map; each patch's
    cells are flattened and projected to ``d_feature``.
    """

    POOL = 4  # total downsampling of the two pooling stages

    def __init__(self, image_size, patch_size, d_feature, rng, channels=(8, 16)):
        if patch_size % self.POOL:
            raise ConfigError(f"patch_size must be a multiple of {self.POOL}, got {patch_size}")
        if image_size % patch_size:
            raise ConfigError(f"image size {image_size} is not divisible by patch size {patch_size}")
        self.image_size, self.patch_size, self.d_feature = image_size, patch_size, d_feature
        c1, c2 = channels
        self.conv1_w = Tensor(xavier_uniform(rng, 9, 9 * c1, (3, 3, 1, c1)), requires_grad=True)
        self.conv1_b = Tensor(np.zeros(c1), requires_grad=True)
        self.conv2_w = Tensor(xavier_uniform(rng, 9 * c1, 9 * c2, (3, 3, c1, c2)), requires_grad=True)
        self.conv2_b = Tensor(np.zeros(c2), requires_grad=True)
        q = patch_size // self.POOL
        self.proj = Linear(q * q * c2, d_feature, rng)
        self._channels = c2

    @property
    def patches_per_image(self):
        return (self.image_size // self.patch_size) ** 2

    def __call__(self, images):
        """(N, H, W) pixel array -> Tensor (N, S, d_feature)."""
        images = np.asarray(images, dtype=np.float64)
        N, H, W = images.shape
        if H % self.patch_size or W % self.patch_size:
            raise ConfigError(f"image {H}x{W} is not divisible by patch size {self.patch_size}")
        x = Tensor(images[..., None])
        x = T.max_pool2d(T.relu(T.conv2d(x, self.conv1_w, self.conv1_b)))
        x = T.max_pool2d(T.relu(T.conv2d(x, self.conv2_w, self.conv2_b)))
        q = self.patch_size // self.POOL
        Hc, Wc, C = H // self.POOL, W // self.POOL, self._channels
        gh, gw = Hc // q, Wc // q
        x = T.reshape(x, (N, gh, q, gw, q, C))
        x = T.transpose(x, (0, 1, 3, 2, 4, 5))
        x = T.reshape(x, (N, gh * gw, q * q * C))
        return self.proj(x)

    def parameter_group(self):
        """The backbone's own parameters, trained at the visual learning rate."""
        return {"name": "visual", "params": self.parameters()}


def check_views(views, image_size):
    if not 1 <= len(views) <= 2:
        raise DataError(f"an example takes one or two images, got {len(views)}")
    out = []
    for img in views:
        img = np.asarray(img, dtype=np.float64)
        if img.shape != (image_size, image_size):
            raise DataError(f"image shape {img.shape} does not match configured {image_size}x{image_size}")
        if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
            raise DataError("pixel values must lie in [0, 1]")
        out.append(img)
    return out


def extract_patch_features(backbone, batch):
    """Features for a batch of examples, each a list of one or two views.

    Views of one example are concatenated along the sequence axis. Returns
    ``(features, keep)`` where ``features`` is (B, S_max, d) and ``keep`` marks
    the real (non-padding) positions.
    """
    batch = [check_views(views, backbone.image_size) for views in batch]
    flat = np.stack([img for views in batch for img in views])
    feats = backbone(flat)
    S = backbone.patches_per_image
    n_views = [len(v) for v in batch]
    max_views = max(n_views)
    B = len(batch)
    if all(nv == max_views for nv in n_views):
        feats = T.reshape(feats, (B, max_views * S, backbone.d_feature))
        return feats, np.ones((B, max_views * S), dtype=bool)
    keep = np.zeros((B, S * max_views), dtype=bool)
    rows, start = [], 0
    for b, nv in enumerate(n_views):
        seq = T.reshape(feats[start:start + nv], (1, nv * S, backbone.d_feature))
        if nv < max_views:
            pad = Tensor(np.zeros((1, (max_views - nv) * S, backbone.d_feature)))
            seq = T.concat([seq, pad], axis=1)
        rows.append(seq)
        keep[b, :nv * S] = True
        start += nv
    return T.concat(rows, axis=0), keep
