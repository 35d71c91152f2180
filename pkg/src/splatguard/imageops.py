"""Small image resampling helpers (bilinear, HWC float images)."""
from __future__ import annotations

import numpy as np
from scipy import ndimage


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize with bilinear interpolation; pixel centres are aligned (half-pixel rule)."""
    image = np.asarray(image, dtype=np.float64)
    H, W = image.shape[:2]
    if (H, W) == (height, width):
        return image.copy()
    ys = (np.arange(height) + 0.5) * H / height - 0.5
    xs = (np.arange(width) + 0.5) * W / width - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return sample_bilinear(image, yy, xx, mode="nearest")


def sample_bilinear(image: np.ndarray, yy: np.ndarray, xx: np.ndarray, mode="nearest",
                    cval: float = 0.0) -> np.ndarray:
    """Sample ``image`` at fractional coordinates; ``mode`` as in ``scipy.ndimage``."""
    H, W = image.shape[:2]
    # snap round-off just outside the grid back onto the border pixel
    yy = np.where(np.abs(yy - np.clip(yy, 0, H - 1)) < 1e-9, np.clip(yy, 0, H - 1), yy)
    xx = np.where(np.abs(xx - np.clip(xx, 0, W - 1)) < 1e-9, np.clip(xx, 0, W - 1), xx)
    chans = [ndimage.map_coordinates(image[..., c], [yy, xx], order=1, mode=mode, cval=cval)
             for c in range(image.shape[2])]
    return np.stack(chans, axis=-1)


def area_downsample(image: np.ndarray, size: int) -> np.ndarray:
    """Average-pool to ``size x size`` when divisible, bilinear resize otherwise."""
    H, W = image.shape[:2]
    if H % size == 0 and W % size == 0:
        return image.reshape(size, H // size, size, W // size, -1).mean(axis=(1, 3))
    return resize_bilinear(image, size, size)
