import numpy as np
import pytest
from PIL import Image

from orthoseg.raster import ClassCatalog, RasterWindow, open_orthomap


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def catalog():
    return ClassCatalog([
        ("red", (255, 0, 0)),
        ("green", (0, 255, 0)),
        ("blue", (0, 0, 255)),
    ])


def make_map(tmp_path, rgb: np.ndarray, pixel_size_mm=1.0, name="map.png",
             map_id=None):
    path = tmp_path / name
    Image.fromarray(rgb, "RGB").save(path)
    return open_orthomap(path, pixel_size_mm, map_id=map_id)


def disk_image(size=256, center=(128, 128), radius=45,
               fg=(30, 60, 90), bg=(235, 235, 230), noise=6, seed=0):
    """High-contrast disk scene; returns (RasterWindow, truth mask)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    truth = (xx - center[0]) ** 2 + (yy - center[1]) ** 2 <= radius ** 2
    img = np.empty((size, size, 3), np.uint8)
    img[...] = bg
    img[truth] = fg
    if noise:
        img = np.clip(img.astype(int) + rng.integers(-noise, noise + 1, img.shape),
                      0, 255).astype(np.uint8)
    return RasterWindow((0, 0), img), truth


def blob_mask(shape, rng, n_disks=4, r_min=18, r_max=30, margin=None):
    """Union of random disks: smooth, solid shapes with min feature size r_min."""
    h, w = shape
    margin = margin if margin is not None else r_max + 4
    yy, xx = np.mgrid[0:h, 0:w]
    mask = np.zeros(shape, dtype=bool)
    cx0 = cy0 = margin
    for _ in range(n_disks):
        r = int(rng.integers(r_min, r_max + 1))
        cx = int(rng.integers(cx0, w - margin))
        cy = int(rng.integers(cy0, h - margin))
        mask |= (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    return mask
