from .color import luminance, rgb_to_ycbcr, ycbcr_to_rgb
from .imageio import read_image, write_image
from .metrics import PsnrReport, psnr
from .resize import bicubic_resize
from .sr import SrExample, evaluate_sr, make_sr_dataset, super_resolve, train_sr
from .texture import synthesize_texture, train_texture

__all__ = [
    "PsnrReport", "SrExample", "bicubic_resize", "evaluate_sr", "luminance",
    "make_sr_dataset", "psnr", "read_image", "rgb_to_ycbcr", "super_resolve",
    "synthesize_texture", "train_sr", "train_texture", "write_image", "ycbcr_to_rgb",
]
