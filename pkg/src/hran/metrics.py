"""Y-channel PSNR/SSIM with border shaving, dihedral self-ensemble, and
dataset evaluation reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import (
    IMAGE_EXTENSIONS,
    ImageU8,
    crop_to_multiple,
    degrade,
    list_images,
    load_image,
    rgb_to_y,
    to_float,
    to_u8,
)
from .errors import DataError, ShapeError

INF = float("inf")
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _y_plane(img: ImageU8) -> np.ndarray:
    x = img.pixels.transpose(2, 0, 1)[None].astype(np.float64) / 255.0
    return rgb_to_y(x)[0, 0]


def shave(plane: np.ndarray, border: int) -> np.ndarray:
    h, w = plane.shape
    if 2 * border >= h or 2 * border >= w:
        raise ShapeError(f"border crop of {border}px exceeds the {w}x{h} image")
    return plane[border : h - border, border : w - border] if border else plane


def _planes(sr: ImageU8, hr: ImageU8, scale: int):
    if sr.pixels.shape != hr.pixels.shape:
        raise ShapeError(f"image sizes differ: {sr.width}x{sr.height} vs {hr.width}x{hr.height}")
    return shave(_y_plane(sr), scale), shave(_y_plane(hr), scale)


def psnr_planes(a: np.ndarray, b: np.ndarray, peak: float = 255.0) -> float:
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return INF
    return 10.0 * math.log10(peak * peak / mse)


def psnr_y(sr: ImageU8, hr: ImageU8, scale: int) -> float:
    """PSNR in dB of the luma planes after shaving ``scale`` pixels per border.

    Identical planes give ``inf``.
    """
    return psnr_planes(*_planes(sr, hr, scale))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    y = sliding_window_view(x, k, axis=0) @ g
    return sliding_window_view(y, k, axis=1) @ g


def ssim_planes(a: np.ndarray, b: np.ndarray, peak: float = 255.0) -> float:
    """Mean SSIM over all fully-covered 11x11 Gaussian windows."""
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs planes of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    g = gaussian_window()
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim_y(sr: ImageU8, hr: ImageU8, scale: int) -> float:
    return ssim_planes(*_planes(sr, hr, scale))


# -- self-ensemble -----------------------------------------------------------------------


@dataclass(frozen=True)
class GeomTransform:
    """Element of D4: optional horizontal flip, then ``rotation`` quarter turns."""

    rotation: int
    flip: bool

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.flip:
            x = x[..., ::-1]
        return np.ascontiguousarray(np.rot90(x, self.rotation, axes=(-2, -1)))

    def invert(self, x: np.ndarray) -> np.ndarray:
        x = np.rot90(x, -self.rotation, axes=(-2, -1))
        if self.flip:
            x = x[..., ::-1]
        return np.ascontiguousarray(x)


D4 = tuple(GeomTransform(k, f) for f in (False, True) for k in range(4))


def self_ensemble(model: Callable[[np.ndarray], np.ndarray], x: np.ndarray) -> np.ndarray:
    """Mean over the eight D4 transforms T of ``T^-1(model(T(x)))``, in float."""
    acc = None
    for tr in D4:
        y = tr.invert(model(tr.apply(x))).astype(np.float64)
        acc = y if acc is None else acc + y
    return (acc / len(D4)).astype(x.dtype)


# -- dataset evaluation ----------------------------------------------------------------------


@dataclass
class EvalReport:
    scale: int
    model_id: str
    rows: list[tuple[str, float, float]] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        finite = [p for _, p, _ in self.rows if math.isfinite(p)]
        if finite:
            return float(np.mean(finite))
        return INF if self.rows else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([s for _, _, s in self.rows])) if self.rows else float("nan")

    @property
    def complete(self) -> bool:
        return not self.missing

    def to_tsv(self) -> str:
        fmt = lambda v: "inf" if v == INF else f"{v:.4f}"
        lines = [f"{name}\t{fmt(p)}\t{s:.4f}" for name, p, s in self.rows]
        lines += [f"{name}\tMISSING\tMISSING" for name in self.missing]
        lines.append(f"MEAN\t{fmt(self.mean_psnr)}\t{self.mean_ssim:.4f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        enc = lambda v: "inf" if v == INF else v
        return json.dumps({
            "scale": self.scale,
            "model": self.model_id,
            "images": [{"name": n, "psnr": enc(p), "ssim": s} for n, p, s in self.rows],
            "missing": self.missing,
            "mean": {"psnr": enc(self.mean_psnr), "ssim": self.mean_ssim},
        }, indent=2)


def _find_sr(sr_dir: Path, stem: str, scale: int) -> Path | None:
    for cand in (f"{stem}_x{scale}", stem, f"{stem}x{scale}"):
        for ext in IMAGE_EXTENSIONS:
            p = sr_dir / f"{cand}{ext}"
            if p.exists():
                return p
    return None


def evaluate(source, hr_dir, scale: int, ensemble: bool = False, lr_dir=None,
             model_id: str | None = None) -> EvalReport:
    """Evaluate a model (callable on float tensors) or a directory of SR images.

    For a model the LR inputs are read from ``lr_dir`` (``<stem>x<scale>``) or
    produced with :func:`degrade`. HR images are centre-cropped to a multiple
    of ``scale``; SR images from a directory get the same crop. Rows are
    ordered by image name.
    """
    hr_paths = list_images(hr_dir)
    if not hr_paths:
        raise DataError(f"no HR images in {hr_dir}")
    is_model = callable(source)
    report = EvalReport(scale, model_id or ("model" if is_model else str(source)))
    for path in sorted(hr_paths, key=lambda p: p.stem):
        hr = crop_to_multiple(load_image(path), scale)
        if is_model:
            lr = None
            if lr_dir is not None:
                for ext in IMAGE_EXTENSIONS:
                    cand = Path(lr_dir) / f"{path.stem}x{scale}{ext}"
                    if cand.exists():
                        lr = load_image(cand)
                        break
            if lr is None:
                lr = degrade(hr, scale)
            x = to_float(lr)
            y = self_ensemble(source, x) if ensemble else source(x)
            sr = to_u8(y)
        else:
            sr_path = _find_sr(Path(source), path.stem, scale)
            if sr_path is None:
                report.missing.append(path.stem)
                continue
            sr = crop_to_multiple(load_image(sr_path), scale)
        report.rows.append((path.stem, psnr_y(sr, hr, scale), ssim_y(sr, hr, scale)))
    if not report.rows:
        raise DataError(f"no SR/HR pairs matched between {source} and {hr_dir}")
    return report
