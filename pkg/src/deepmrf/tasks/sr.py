"""Single-image super-resolution on the luminance channel."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..lattice import zigzag
from ..model import cap_infer, predict_means
from ..training import Checkpoint, TrainConfig, TrainImage, TrainResult, train
from .color import luminance, rgb_to_ycbcr, ycbcr_to_rgb
from .imageio import as_image
from .metrics import PsnrReport, psnr
from .resize import bicubic_resize

FACTORS = (2, 3, 4)


@dataclass
class SrExample:
    lowres_up: np.ndarray  # bicubic-upsampled low-res luminance on the target grid
    target: np.ndarray     # high-res luminance
    factor: int
    lowres: np.ndarray     # low-res luminance
    shave: int


def modcrop(img, factor: int) -> np.ndarray:
    h, w = img.shape[:2]
    return img[: h - h % factor, : w - w % factor]


def degrade(img, factor: int) -> tuple[np.ndarray, np.ndarray]:
    """Bicubic down- then up-sampling of the luminance; returns (lowres, lowres_up)."""
    y = modcrop(luminance(img), factor)
    h, w = y.shape[:2]
    lr = bicubic_resize(y, (h // factor, w // factor))
    return lr, bicubic_resize(lr, (h, w))


def make_sr_dataset(hires_images, factor: int) -> list[SrExample]:
    if factor not in FACTORS:
        raise ValueError(f"factor must be one of {FACTORS}, got {factor}")
    out = []
    for i, img in enumerate(hires_images):
        img = as_image(img)
        if min(img.shape[:2]) < 2 * factor:
            raise ValueError(f"image {i} ({img.shape[0]}x{img.shape[1]}) smaller than 2*factor")
        lr, up = degrade(img, factor)
        out.append(SrExample(up, modcrop(luminance(img), factor), factor, lr, factor))
    return out


def train_sr(dataset, cfg: TrainConfig | None = None, **kw) -> TrainResult:
    cfg = cfg or TrainConfig.for_sr()
    if cfg.K != 1 or cfg.fixed_var is None:
        raise ValueError("SR training uses a single component with fixed variance")
    corpus = [TrainImage(ex.target.astype(np.float32), ex.lowres_up.astype(np.float32))
              for ex in dataset]
    return train(corpus, cfg, **kw)


def infer_luminance(ck: Checkpoint, lowres_up) -> np.ndarray:
    """Model estimate of the high-res luminance given the upsampled low-res one."""
    params = ck.params
    c = as_image(lowres_up).astype(params.dtype)
    H, W = c.shape[:2]
    dec = zigzag(H, W)
    tape = cap_infer(np.zeros((H, W, params.p), params.dtype), c, dec, params, ck.n_cycles)
    y = predict_means(tape, params).reshape(H, W, params.p)
    return np.clip(y.astype(np.float64), 0.0, 1.0)


def super_resolve(ck: Checkpoint, lowres, factor: int) -> np.ndarray:
    """Upscale a low-res image by ``factor``; colour chroma is bicubic-upsampled."""
    if ck.params.d_c != 1:
        raise ValueError("checkpoint is not a super-resolution model")
    if ck.sr_factor and factor != ck.sr_factor:
        raise ValueError(f"checkpoint trained for x{ck.sr_factor}, asked for x{factor}")
    img = as_image(lowres)
    h, w = img.shape[:2]
    size = (h * factor, w * factor)
    if img.shape[2] == 1:
        return infer_luminance(ck, bicubic_resize(img, size))
    ycc = rgb_to_ycbcr(img)
    up = bicubic_resize(ycc, size)
    up[..., :1] = infer_luminance(ck, up[..., :1])
    return np.clip(ycbcr_to_rgb(up), 0.0, 1.0)


def evaluate_sr(hires_images, factor: int, ck: Checkpoint | None = None, names=None):
    """PSNR of bicubic (and the model, if given) against the high-res luminance.

    Returns ``{"bicubic": PsnrReport, "dmrf": PsnrReport}``.
    """
    data = make_sr_dataset(hires_images, factor)
    names = names or [f"img{i:03d}" for i in range(len(data))]
    reports = {"bicubic": PsnrReport(shave=factor)}
    if ck is not None:
        reports["dmrf"] = PsnrReport(shave=factor)
    for name, ex in zip(names, data):
        reports["bicubic"].add(name, psnr(ex.lowres_up, ex.target, factor))
        if ck is not None:
            out = super_resolve(ck, ex.lowres, factor)
            reports["dmrf"].add(name, psnr(out, ex.target, factor))
    return reports
