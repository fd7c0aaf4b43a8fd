import json

import httpx
import numpy as np
import pytest

from orthoseg.clicks import (BackendError, BuiltinBackend, ClickSet,
                             ContractViolation, ExternalBackend,
                             ExtremeClicks, EXTREME_EPS_PX, EXTREME_MARGIN_PX,
                             PRIOR_BAND_PX, decode_mask_b64, encode_png_b64,
                             segment_clicks, segment_extreme)
from orthoseg.graphcut import band_distance
from orthoseg.raster import RasterWindow

from conftest import disk_image


def extreme_clicks_for_disk(center, radius):
    cx, cy = center
    return ExtremeClicks([(cx - radius + 0.5, cy + 0.5),
                          (cx + radius + 0.5, cy + 0.5),
                          (cx + 0.5, cy - radius + 0.5),
                          (cx + 0.5, cy + radius + 0.5)])


class TestClickTypes:
    def test_extreme_needs_four_distinct(self):
        with pytest.raises(ValueError):
            ExtremeClicks([(0, 0), (0, 0), (10, 0), (0, 10)])

    def test_extreme_bbox_floor(self):
        with pytest.raises(ValueError, match="9 px"):
            ExtremeClicks([(0, 0), (1, 0), (0, 1), (1, 1)])

    def test_clickset_needs_positive(self):
        with pytest.raises(ValueError):
            ClickSet(positives=np.zeros((0, 2)))

    def test_clickset_disjoint(self):
        with pytest.raises(ValueError):
            ClickSet(positives=[(1, 1)], negatives=[(1, 1)])


class TestBuiltinExtreme:
    def test_high_contrast_disk_iou(self):
        window, truth = disk_image(size=256, radius=45, seed=3)
        clicks = extreme_clicks_for_disk((128, 128), 45)
        mask = segment_extreme(window, clicks, BuiltinBackend())
        iou = (mask & truth).sum() / (mask | truth).sum()
        assert iou >= 0.95

    def test_mask_stays_in_dilated_bbox(self):
        window, _ = disk_image(size=256, radius=45, seed=4)
        clicks = extreme_clicks_for_disk((128, 128), 45)
        mask = segment_extreme(window, clicks, BuiltinBackend())
        ys, xs = np.nonzero(mask)
        x0, y0, x1, y1 = clicks.bbox()
        m = EXTREME_MARGIN_PX
        assert xs.min() >= x0 - m and xs.max() <= x1 + m
        assert ys.min() >= y0 - m and ys.max() <= y1 + m

    def test_constant_image_returns_clicked_box(self):
        window = RasterWindow((0, 0), np.full((64, 64, 3), 120, np.uint8))
        clicks = ExtremeClicks([(10.0, 11.5), (13.0, 11.5),
                                (11.5, 10.0), (11.5, 13.0)])
        mask = segment_extreme(window, clicks, BuiltinBackend())
        assert mask.sum() == 9
        assert mask[10:13, 10:13].all()

    def test_clicks_outside_window_rejected(self):
        window, _ = disk_image(size=64, center=(32, 32), radius=10)
        clicks = ExtremeClicks([(100, 32), (10, 32), (32, 10), (32, 54)])
        with pytest.raises(ValueError):
            segment_extreme(window, clicks, BuiltinBackend())

    def test_deterministic(self):
        window, _ = disk_image(size=128, center=(64, 64), radius=30, seed=5)
        clicks = extreme_clicks_for_disk((64, 64), 30)
        a = segment_extreme(window, clicks, BuiltinBackend())
        b = segment_extreme(window, clicks, BuiltinBackend())
        assert np.array_equal(a, b)

    def test_window_offset_coordinates(self):
        window, truth = disk_image(size=128, center=(64, 64), radius=30, seed=6)
        shifted = RasterWindow((1000, 2000), window.pixels)
        clicks = extreme_clicks_for_disk((1064, 2064), 30)
        mask = segment_extreme(shifted, clicks, BuiltinBackend())
        assert (mask & truth).sum() / (mask | truth).sum() >= 0.9


class TestBuiltinPosNeg:
    def test_single_click_high_contrast_blob(self):
        window, truth = disk_image(size=256, radius=50, seed=7)
        mask = segment_clicks(window, ClickSet(positives=[(128.5, 128.5)]),
                              BuiltinBackend())
        assert (mask & truth).sum() / (mask | truth).sum() >= 0.9

    def test_negative_carves_touching_blob(self):
        size = 200
        yy, xx = np.mgrid[0:size, 0:size]
        b1 = (xx - 80) ** 2 + (yy - 100) ** 2 <= 35 ** 2
        b2 = (xx - 135) ** 2 + (yy - 100) ** 2 <= 25 ** 2
        img = np.full((size, size, 3), 240, np.uint8)
        img[b1 | b2] = (40, 120, 40)
        window = RasterWindow((0, 0), img)
        mask = segment_clicks(window,
                              ClickSet(positives=[(80.5, 100.5)],
                                       negatives=[(135.5, 100.5)]),
                              BuiltinBackend())
        assert not mask[100, 135]
        assert (mask & b1).sum() / (mask | b1).sum() >= 0.85
        assert (mask & b2).sum() / b2.sum() <= 0.05

    def test_one_pixel_object_contained(self):
        img = np.full((32, 32, 3), 200, np.uint8)
        img[16, 16] = (0, 0, 0)
        mask = segment_clicks(RasterWindow((0, 0), img),
                              ClickSet(positives=[(16.5, 16.5)]),
                              BuiltinBackend())
        assert mask[16, 16]

    def test_prior_mask_band_respected(self):
        window, truth = disk_image(size=256, radius=50, seed=8)
        prior = np.zeros((256, 256), bool)
        prior[100:160, 100:160] = True
        mask = segment_clicks(window,
                              ClickSet(positives=[(128.5, 128.5)],
                                       prior_mask=prior),
                              BuiltinBackend())
        dist = band_distance(prior)
        assert not ((mask ^ prior) & (dist > PRIOR_BAND_PX)).any()

    def test_contract_suite_random_scenes(self):
        for seed in range(8):
            r = np.random.default_rng(seed)
            cx, cy = r.integers(80, 176, 2)
            rad = int(r.integers(25, 45))
            window, truth = disk_image(size=256, center=(int(cx), int(cy)),
                                       radius=rad, seed=seed + 100)
            pos = (cx + 0.5, cy + 0.5)
            neg = ((cx + rad + 20) % 250 + 0.5, (cy + rad + 25) % 250 + 0.5)
            clicks = ClickSet(positives=[pos], negatives=[neg])
            mask = segment_clicks(window, clicks, BuiltinBackend())
            assert mask[int(cy), int(cx)]
            assert not mask[int(neg[1]), int(neg[0])]


class FakeBackend:
    """Returns a canned mask; for engine-validation tests."""

    kind = "external"

    def __init__(self, mask):
        self.mask = mask

    def segment_extreme(self, window, clicks):
        return self.mask

    def segment_clicks(self, window, clicks):
        return self.mask


class TestEngineValidation:
    def test_positive_excluded_raises(self):
        window, _ = disk_image(size=64, center=(32, 32), radius=12)
        mask = np.zeros((64, 64), bool)
        mask[2:6, 2:6] = True
        with pytest.raises(ContractViolation, match="positive"):
            segment_clicks(window, ClickSet(positives=[(32.5, 32.5)]),
                           FakeBackend(mask))

    def test_negative_included_raises(self):
        window, _ = disk_image(size=64, center=(32, 32), radius=12)
        mask = np.ones((64, 64), bool)
        with pytest.raises(ContractViolation, match="negative"):
            segment_clicks(window,
                           ClickSet(positives=[(32.5, 32.5)],
                                    negatives=[(5.5, 5.5)]),
                           FakeBackend(mask))

    def test_extreme_escaping_bbox_raises(self):
        window, _ = disk_image(size=128, center=(64, 64), radius=20)
        mask = np.ones((128, 128), bool)  # escapes everywhere
        clicks = extreme_clicks_for_disk((64, 64), 20)
        with pytest.raises(ContractViolation, match="escapes"):
            segment_extreme(window, clicks, FakeBackend(mask))

    def test_extreme_far_click_raises(self):
        window, _ = disk_image(size=128, center=(64, 64), radius=20)
        mask = np.zeros((128, 128), bool)
        mask[58:70, 58:70] = True  # boundary far from the extreme clicks
        clicks = extreme_clicks_for_disk((64, 64), 20)
        with pytest.raises(ContractViolation, match="from the mask boundary"):
            segment_extreme(window, clicks, FakeBackend(mask))

    def test_empty_mask_raises(self):
        window, _ = disk_image(size=128, center=(64, 64), radius=20)
        clicks = extreme_clicks_for_disk((64, 64), 20)
        with pytest.raises(ContractViolation, match="empty"):
            segment_extreme(window, clicks, FakeBackend(np.zeros((128, 128), bool)))


def protocol_app(respond_mask=None, protocol=1, fail=False):
    """Minimal in-process protocol server via httpx.MockTransport."""

    def handler(request: httpx.Request) -> httpx.Response:
        if request.url.path == "/hello":
            return httpx.Response(200, json={"ok": True, "protocol": protocol})
        if request.url.path == "/segment":
            if fail:
                return httpx.Response(200, json={
                    "ok": False, "error": {"code": 3, "message": "boom"}})
            body = json.loads(request.content)
            shape = _shape_from_png(body["image_png"])
            mask = respond_mask if respond_mask is not None \
                else np.ones(shape, bool)
            return httpx.Response(200, json={
                "ok": True, "mask_png": encode_png_b64(mask)})
        return httpx.Response(404)

    return httpx.MockTransport(handler)


def _shape_from_png(b64):
    import base64
    import io

    from PIL import Image
    with Image.open(io.BytesIO(base64.b64decode(b64))) as im:
        return im.size[1], im.size[0]


class TestExternalBackend:
    def test_handshake(self):
        backend = ExternalBackend("http://backend", transport=protocol_app())
        assert backend.handshake() == {"ok": True, "protocol": 1}

    def test_handshake_version_mismatch(self):
        backend = ExternalBackend("http://backend",
                                  transport=protocol_app(protocol=2))
        with pytest.raises(BackendError, match="protocol"):
            backend.handshake()

    def test_all_ones_mask_accepted_for_posneg(self):
        window, _ = disk_image(size=64, center=(32, 32), radius=12)
        backend = ExternalBackend("http://backend", transport=protocol_app())
        mask = segment_clicks(window, ClickSet(positives=[(32.5, 32.5)]),
                              backend)
        assert mask.all()

    def test_violating_mask_surfaces_contract_error(self):
        window, _ = disk_image(size=64, center=(32, 32), radius=12)
        bad = np.zeros((64, 64), bool)
        bad[0:3, 0:3] = True
        backend = ExternalBackend("http://backend",
                                  transport=protocol_app(respond_mask=bad))
        with pytest.raises(ContractViolation):
            segment_clicks(window, ClickSet(positives=[(32.5, 32.5)]), backend)

    def test_backend_error_propagates(self):
        window, _ = disk_image(size=64, center=(32, 32), radius=12)
        backend = ExternalBackend("http://backend",
                                  transport=protocol_app(fail=True))
        with pytest.raises(BackendError, match="boom"):
            segment_clicks(window, ClickSet(positives=[(32.5, 32.5)]), backend)

    def test_mask_png_roundtrip(self):
        mask = np.zeros((16, 24), bool)
        mask[3:9, 5:15] = True
        assert np.array_equal(decode_mask_b64(encode_png_b64(mask), (16, 24)),
                              mask)
