from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .imageio import as_image


def psnr(a, b, shave: int = 0) -> float:
    """PSNR in dB for [0, 1] images over the interior left after removing a
    ``shave``-pixel border. Returns ``inf`` when the images agree exactly."""
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"size mismatch: {a.shape} vs {b.shape}")
    if shave:
        if 2 * shave >= min(a.shape[0], a.shape[1]):
            raise ValueError(f"shave {shave} leaves no interior in {a.shape[:2]} image")
        a = a[shave:-shave, shave:-shave]
        b = b[shave:-shave, shave:-shave]
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


@dataclass
class PsnrReport:
    names: list[str] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    shave: int = 0

    def add(self, name: str, value: float) -> None:
        self.names.append(name)
        self.values.append(value)

    @property
    def infinite(self) -> list[bool]:
        return [math.isinf(v) for v in self.values]

    @property
    def mean(self) -> float:
        return float(np.mean(self.values)) if self.values else math.nan
