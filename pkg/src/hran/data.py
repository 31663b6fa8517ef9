"""Image I/O, colour conversion, MATLAB-compatible bicubic resampling and
training-patch sampling.

Float images are ``(1, 3, h, w)`` arrays with values in ``[0, 1]``.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ImageFormatError, ShapeError
from .rng import Rng
from .tensor import check4

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".ppm", ".png", ".bmp")
Y_COEFFS = (65.481, 128.553, 24.966)


@dataclass
class ImageU8:
    """8-bit RGB image; ``pixels`` has shape ``(height, width, 3)``."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 3 or p.shape[2] != 3 or p.dtype != np.uint8:
            raise ShapeError(f"ImageU8 needs a (h, w, 3) uint8 array, got {p.shape} {p.dtype}")
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise ShapeError(f"ImageU8 extents must be positive, got {p.shape[:2]}")
        self.pixels = np.ascontiguousarray(p)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other):
        return isinstance(other, ImageU8) and np.array_equal(self.pixels, other.pixels)


# -- PPM / PNG -------------------------------------------------------------------


def _ppm_token(buf: bytes, pos: int):
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError("truncated PPM header", start)
    return buf[start:pos], pos


def decode_ppm(buf: bytes) -> ImageU8:
    if buf[:2] != b"P6":
        raise ImageFormatError("not a binary PPM (expected magic 'P6')", 0)
    pos = 2
    values = []
    for field in ("width", "height", "maxval"):
        tok, end = _ppm_token(buf, pos)
        if not tok.isdigit():
            raise ImageFormatError(f"bad PPM {field} {tok!r}", pos)
        values.append(int(tok))
        pos = end
    width, height, maxval = values
    if width < 1 or height < 1:
        raise ImageFormatError(f"PPM dimensions must be positive, got {width}x{height}", pos)
    if maxval != 255:
        raise ImageFormatError(f"unsupported bit depth: maxval {maxval} (only 8-bit, maxval 255)", pos)
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise ImageFormatError("missing whitespace after PPM header", pos)
    pos += 1
    need = width * height * 3
    if len(buf) - pos < need:
        raise ImageFormatError(f"truncated PPM pixel data: need {need} bytes, have {len(buf) - pos}", len(buf))
    pixels = np.frombuffer(buf, np.uint8, need, pos).reshape(height, width, 3)
    return ImageU8(pixels.copy())


def encode_ppm(img: ImageU8) -> bytes:
    return f"P6\n{img.width} {img.height}\n255\n".encode("ascii") + img.pixels.tobytes()


def load_image(path) -> ImageU8:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc.strerror}") from None
    if buf[:2] == b"P6":
        try:
            return decode_ppm(buf)
        except ImageFormatError as exc:
            raise ImageFormatError(f"{path}: {exc}") from None
    try:
        from PIL import Image
    except ImportError:
        raise ImageFormatError(f"{path}: only binary PPM is supported without Pillow", 0) from None
    import io

    try:
        with Image.open(io.BytesIO(buf)) as im:
            if im.mode not in ("RGB", "L", "P", "RGBA"):
                raise ImageFormatError(f"{path}: unsupported image mode {im.mode}", 0)
            return ImageU8(np.asarray(im.convert("RGB"), dtype=np.uint8))
    except ImageFormatError:
        raise
    except Exception as exc:
        raise ImageFormatError(f"{path}: cannot decode image ({exc})", 0) from None


def save_image(path, img: ImageU8) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        data = encode_ppm(img)
    else:
        try:
            from PIL import Image
        except ImportError:
            raise DataError(f"{path}: writing {path.suffix} needs Pillow; use .ppm") from None
        import io

        bio = io.BytesIO()
        Image.fromarray(img.pixels, "RGB").save(bio, format=path.suffix.lstrip(".").upper())
        data = bio.getvalue()
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# -- float conversion and colour -------------------------------------------------------


def to_float(img: ImageU8, dtype=np.float32) -> np.ndarray:
    return (img.pixels.transpose(2, 0, 1)[None].astype(dtype) / dtype(255)).astype(dtype)


def quantize(x: np.ndarray) -> np.ndarray:
    """Round half away from zero and clamp to [0, 255] as uint8."""
    r = np.trunc(x + np.copysign(0.5, x))
    return np.clip(r, 0, 255).astype(np.uint8)


def to_u8(x: np.ndarray) -> ImageU8:
    check4(x, "to_u8 input")
    if x.shape[0] != 1 or x.shape[1] != 3:
        raise ShapeError(f"to_u8 expects shape (1, 3, h, w), got {x.shape}")
    v = x[0].astype(np.float64) * 255.0
    return ImageU8(quantize(v).transpose(1, 2, 0))


def rgb_to_y(x: np.ndarray) -> np.ndarray:
    """BT.601 studio-swing luma on the 8-bit scale [16, 235] for RGB in [0, 1]."""
    check4(x, "rgb_to_y input")
    if x.shape[1] != 3:
        raise ShapeError(f"rgb_to_y expects 3 channels, got {x.shape[1]}")
    x = x.astype(np.float64, copy=False)
    r, g, b = Y_COEFFS
    return 16.0 + (r * x[:, 0:1] + g * x[:, 1:2] + b * x[:, 2:3])


# -- bicubic resampling ---------------------------------------------------------------


def cubic(x, a: float = -0.5):
    """Keys cubic convolution kernel (support [-2, 2])."""
    ax = np.abs(np.asarray(x, dtype=np.float64))
    ax2 = ax * ax
    ax3 = ax2 * ax
    near = ((a + 2) * ax3 - (a + 3) * ax2 + 1) * (ax <= 1)
    far = (a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a) * ((ax > 1) & (ax <= 2))
    return near + far


def contributions(in_len: int, out_len: int, antialias: bool = True, boundary: str = "symmetric"):
    """Source indices (0-based) and normalised weights, one row per output sample.

    Sample centres map as ``src = (dst + 0.5) * in/out - 0.5``; when shrinking
    the kernel is stretched by ``in/out`` so it also low-pass filters.
    """
    if in_len < 1 or out_len < 1:
        raise ShapeError(f"resize extents must be positive, got {in_len} -> {out_len}")
    scale = out_len / in_len
    if scale < 1 and antialias:
        kernel = lambda t: scale * cubic(scale * t)
        width = 4.0 / scale
    else:
        kernel = cubic
        width = 4.0
    u = (np.arange(out_len, dtype=np.float64) + 0.5) / scale - 0.5
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    weights = kernel(u[:, None] - idx)
    weights /= weights.sum(axis=1, keepdims=True)
    idx = idx.astype(np.int64)
    if boundary == "symmetric":
        mirror = np.concatenate([np.arange(in_len), np.arange(in_len)[::-1]])
        idx = mirror[np.mod(idx, 2 * in_len)]
    elif boundary == "replicate":
        idx = np.clip(idx, 0, in_len - 1)
    else:
        raise ValueError(f"unknown boundary mode {boundary!r}")
    keep = np.any(weights != 0, axis=0)
    return idx[:, keep], weights[:, keep]


def _resize_axis(x, axis, out_len, antialias, boundary):
    idx, wts = contributions(x.shape[axis], out_len, antialias, boundary)
    gathered = np.take(x, idx, axis=axis)  # axis -> (out_len, taps)
    shape = [1] * gathered.ndim
    shape[axis] = out_len
    shape[axis + 1] = idx.shape[1]
    return (gathered * wts.reshape(shape)).sum(axis=axis + 1)


def bicubic_resize(x: np.ndarray, out_h: int, out_w: int, antialias: bool = True,
                   boundary: str = "symmetric") -> np.ndarray:
    """Separable bicubic resize of a ``(n, c, h, w)`` array, computed in float64.

    Dimensions are processed in order of increasing scale factor (height first
    on ties), as MATLAB's ``imresize`` does.
    """
    check4(x, "bicubic_resize input")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bicubic_resize: target extents must be positive, got {(out_h, out_w)}")
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    y = x.astype(np.float64)
    h, w = x.shape[2:]
    steps = [(2, out_h, out_h / h), (3, out_w, out_w / w)]
    steps.sort(key=lambda s: s[2])
    for axis, n, _ in steps:
        y = _resize_axis(y, axis, n, antialias, boundary)
    return y.astype(dtype, copy=False)


def resize_u8(img: ImageU8, out_h: int, out_w: int) -> ImageU8:
    """Bicubic resize on 0..255 values, re-quantised to 8 bits."""
    x = img.pixels.transpose(2, 0, 1)[None].astype(np.float64)
    y = bicubic_resize(x, out_h, out_w)
    return ImageU8(quantize(y[0]).transpose(1, 2, 0))


def crop_to_multiple(img: ImageU8, s: int) -> ImageU8:
    """Centre crop so both extents are multiples of ``s``."""
    h, w = img.height - img.height % s, img.width - img.width % s
    if h < 1 or w < 1:
        raise DataError(f"image {img.width}x{img.height} is smaller than scale {s}")
    top, left = (img.height - h) // 2, (img.width - w) // 2
    return ImageU8(img.pixels[top : top + h, left : left + w])


def degrade(hr: ImageU8, scale: int) -> ImageU8:
    """BI degradation: bicubic downscale by ``scale`` after cropping to a multiple of it."""
    hr = crop_to_multiple(hr, scale)
    return resize_u8(hr, hr.height // scale, hr.width // scale)


def bicubic_upscale(lr: ImageU8, scale: int) -> ImageU8:
    return resize_u8(lr, lr.height * scale, lr.width * scale)


# -- datasets and patch sampling ---------------------------------------------------------


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS and p.is_file())


@dataclass
class ImagePair:
    name: str
    lr: np.ndarray  # (3, h, w) float32
    hr: np.ndarray  # (3, s*h, s*w) float32


@dataclass
class PatchPair:
    lr: np.ndarray  # (1, 3, p, p)
    hr: np.ndarray  # (1, 3, s*p, s*p)
    source: str
    origin: tuple[int, int]  # LR crop origin (y, x)
    flip: bool
    rotation: int  # quarter turns


class PairedDataset:
    """HR images with their LR counterparts, held in memory as float arrays."""

    def __init__(self, pairs: list[ImagePair], scale: int):
        self.pairs = list(pairs)
        self.scale = scale
        for p in self.pairs:
            if p.hr.shape[1:] != (p.lr.shape[1] * scale, p.lr.shape[2] * scale):
                raise DataError(f"{p.name}: HR {p.hr.shape[1:]} is not {scale}x LR {p.lr.shape[1:]}")

    def __len__(self):
        return len(self.pairs)

    @classmethod
    def from_images(cls, images: dict[str, ImageU8], scale: int) -> "PairedDataset":
        pairs = []
        for name, img in images.items():
            hr = crop_to_multiple(img, scale)
            lr = degrade(hr, scale)
            pairs.append(ImagePair(name, to_float(lr)[0], to_float(hr)[0]))
        return cls(pairs, scale)

    @classmethod
    def from_dir(cls, hr_dir, scale: int, lr_dir=None, manifest=None) -> "PairedDataset":
        """Load ``hr_dir``; LR images come from ``lr_dir/<stem>x<scale>.<ext>`` when
        present and are generated with :func:`degrade` otherwise."""
        if manifest is not None:
            base = Path(manifest).parent
            lines = Path(manifest).read_text(encoding="utf-8").splitlines()
            paths = [base / ln.strip() for ln in lines if ln.strip()]
        else:
            paths = list_images(hr_dir)
        if not paths:
            raise DataError(f"no images found in {hr_dir}")
        pairs = []
        for path in paths:
            hr = crop_to_multiple(load_image(path), scale)
            lr = None
            if lr_dir is not None:
                for ext in IMAGE_EXTENSIONS:
                    cand = Path(lr_dir) / f"{path.stem}x{scale}{ext}"
                    if cand.exists():
                        lr = load_image(cand)
                        break
            if lr is None:
                lr = degrade(hr, scale)
            elif (lr.height * scale, lr.width * scale) != (hr.height, hr.width):
                raise DataError(f"{path.stem}: LR {lr.width}x{lr.height} does not match HR at scale {scale}")
            pairs.append(ImagePair(path.stem, to_float(lr)[0], to_float(hr)[0]))
        return cls(pairs, scale)


def augment(x: np.ndarray, flip: bool, rotation: int) -> np.ndarray:
    """Horizontal flip (optional) followed by ``rotation`` counter-clockwise quarter turns."""
    if flip:
        x = x[..., ::-1]
    return np.ascontiguousarray(np.rot90(x, rotation, axes=(-2, -1)))


def sample_batch(dataset: PairedDataset, rng: Rng, batch: int = 16, patch: int = 64) -> list[PatchPair]:
    """Random aligned LR/HR crops with a shared random flip and rotation."""
    if len(dataset) == 0:
        raise DataError("cannot sample from an empty dataset")
    usable = [p for p in dataset.pairs if min(p.lr.shape[1:]) >= patch]
    if len(usable) < len(dataset):
        skipped = [p.name for p in dataset.pairs if min(p.lr.shape[1:]) < patch]
        logger.warning("skipping %d image(s) smaller than the %dpx patch: %s", len(skipped), patch, skipped)
    if not usable:
        raise DataError(f"no image is at least {patch}x{patch} in LR resolution")
    s = dataset.scale
    out = []
    for _ in range(batch):
        pair = usable[rng.below(len(usable))]
        _, h, w = pair.lr.shape
        y = rng.below(h - patch + 1)
        x = rng.below(w - patch + 1)
        flip = bool(rng.below(2))
        rot = rng.below(4)
        lr = pair.lr[:, y : y + patch, x : x + patch]
        hr = pair.hr[:, s * y : s * (y + patch), s * x : s * (x + patch)]
        out.append(PatchPair(augment(lr, flip, rot)[None], augment(hr, flip, rot)[None],
                             pair.name, (y, x), flip, rot))
    return out


def stack_batch(patches: list[PatchPair]) -> tuple[np.ndarray, np.ndarray]:
    return (np.concatenate([p.lr for p in patches], axis=0),
            np.concatenate([p.hr for p in patches], axis=0))
