"""BT.601 full-range RGB <-> YCbCr (the JPEG convention), all channels in [0, 1]."""

import numpy as np

from .imageio import ImageFormatError, as_image

KR, KG, KB = 0.299, 0.587, 0.114


def _need3(img):
    img = as_image(img)
    if img.shape[2] != 3:
        raise ImageFormatError(f"expected 3 channels, got {img.shape[2]}")
    return img


def rgb_to_ycbcr(img) -> np.ndarray:
    img = _need3(img)
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    y = KR * r + KG * g + KB * b
    cb = 0.5 + (b - y) / (2 * (1 - KB))
    cr = 0.5 + (r - y) / (2 * (1 - KR))
    return np.stack([y, cb, cr], axis=-1)


def ycbcr_to_rgb(img) -> np.ndarray:
    img = _need3(img)
    y, cb, cr = img[..., 0], img[..., 1] - 0.5, img[..., 2] - 0.5
    r = y + 2 * (1 - KR) * cr
    b = y + 2 * (1 - KB) * cb
    g = (y - KR * r - KB * b) / KG
    return np.stack([r, g, b], axis=-1)


def luminance(img) -> np.ndarray:
    img = as_image(img)
    if img.shape[2] == 1:
        return img
    return rgb_to_ycbcr(img)[..., :1]
