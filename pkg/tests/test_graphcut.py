import itertools

import numpy as np
import pytest
from scipy import ndimage

from orthoseg.graphcut import (FlowNetwork, RefineError, RefineParams,
                               band_distance, boundary_pixels,
                               build_refine_network, build_seeded_network,
                               cut_labels, max_flow, refine)
from orthoseg.raster import RasterWindow
from orthoseg.regions import rasterize, region_area, vectorize

from conftest import disk_image


def brute_force_min_cut(n, s, t, arcs):
    """Enumerate every s/t bipartition; the independent oracle for max_flow."""
    others = [v for v in range(n) if v not in (s, t)]
    best = float("inf")
    for bits in itertools.product((0, 1), repeat=len(others)):
        side = {s: 0, t: 1}
        side.update(zip(others, bits))
        cap = sum(c for u, v, c in arcs if side[u] == 0 and side[v] == 1)
        best = min(best, cap)
    return best


def cut_capacity(arcs, source_side):
    return sum(c for u, v, c in arcs if source_side[u] and not source_side[v])


class TestMaxFlow:
    def test_single_arc(self):
        net = FlowNetwork(2, 0, 1)
        net.add_arc(0, 1, 7.0)
        flow, side = max_flow(net)
        assert flow == 7.0
        assert side.tolist() == [True, False]

    def test_diamond(self):
        net = FlowNetwork(4, 0, 3)
        arcs = [(0, 1, 3), (0, 2, 2), (1, 3, 2), (2, 3, 3), (1, 2, 1)]
        for u, v, c in arcs:
            net.add_arc(u, v, c)
        flow, side = max_flow(net)
        assert flow == brute_force_min_cut(4, 0, 3, arcs) == 5
        assert cut_capacity(arcs, side) == 5

    def test_no_path(self):
        net = FlowNetwork(3, 0, 2)
        net.add_arc(1, 2, 5.0)
        flow, side = max_flow(net)
        assert flow == 0.0
        assert side.tolist() == [True, False, False]

    def test_deterministic(self, rng):
        arcs = [(int(rng.integers(0, 8)), int(rng.integers(0, 8)),
                 float(rng.integers(1, 15))) for _ in range(24)]
        results = []
        for _ in range(3):
            net = FlowNetwork(8, 0, 7)
            for u, v, c in arcs:
                net.add_arc(u, v, c)
            flow, side = max_flow(net)
            results.append((flow, side.tolist()))
        assert results[0] == results[1] == results[2]

    def test_random_networks_match_brute_force(self, rng):
        for _ in range(80):
            n = int(rng.integers(2, 10))
            s, t = 0, n - 1
            arcs = []
            for _ in range(int(rng.integers(0, 3 * n))):
                u, v = int(rng.integers(0, n)), int(rng.integers(0, n))
                if u != v:
                    arcs.append((u, v, float(rng.integers(0, 21))))
            net = FlowNetwork(n, s, t)
            for u, v, c in arcs:
                net.add_arc(u, v, c)
            flow, side = max_flow(net)
            want = brute_force_min_cut(n, s, t, arcs)
            assert flow == pytest.approx(want, abs=1e-9)
            assert cut_capacity(arcs, side) == pytest.approx(want, abs=1e-9)
            assert side[s] and not side[t]

    def test_rejects_bad_capacity(self):
        net = FlowNetwork(2, 0, 1)
        with pytest.raises(ValueError):
            net.add_arc(0, 1, -1.0)
        with pytest.raises(ValueError):
            net.add_arc(0, 1, float("inf"))


class TestBuildNetwork:
    def test_band_node_count_matches_distance_transform(self):
        params = RefineParams(band_width=3)
        mask = np.zeros((40, 40), bool)
        mask[10:30, 10:30] = True
        img = np.zeros((40, 40, 3), np.uint8)
        build = build_refine_network(img, mask, params)
        # oracle: exact EDT to the boundary pixel set, thresholded as documented
        b = boundary_pixels(mask)
        d = ndimage.distance_transform_edt(~b)
        want = int((d <= params.band_width - 1).sum())
        assert build.band_count == want
        assert build.network.node_count == want + 2

    def test_constant_image_degenerate_beta(self):
        img = np.full((32, 32, 3), 77, np.uint8)
        mask = np.zeros((32, 32), bool)
        mask[8:24, 8:24] = True
        build = build_refine_network(img, mask, RefineParams(band_width=4))
        assert build.beta == 0.0

    def test_high_contrast_pairs_cheaper_than_flat_pairs(self):
        img = np.zeros((20, 20, 3), np.uint8)
        img[:, 10:] = 255
        mask = np.zeros((20, 20), bool)
        mask[4:16, 4:16] = True
        params = RefineParams(band_width=3, lam=50.0)
        build = build_refine_network(img, mask, params)
        # beta > 0 makes cross-boundary weights strictly below the flat-pair
        # weight lam * exp(0)
        assert build.beta > 0
        w_cross = params.lam * np.exp(-build.beta * 3 * 255.0 ** 2)
        w_flat = params.lam * np.exp(-build.beta * 0.0)
        assert w_cross < w_flat

    def test_errors(self):
        img = np.zeros((10, 10, 3), np.uint8)
        with pytest.raises(RefineError):
            build_refine_network(img, np.zeros((10, 10), bool))
        with pytest.raises(RefineError):
            build_refine_network(img, np.ones((10, 10), bool))


def _grow(mask, n):
    return ndimage.binary_dilation(mask, iterations=n)


def mask_hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Hausdorff distance between two masks' boundary pixel sets."""
    ba, bb = boundary_pixels(a), boundary_pixels(b)
    if not ba.any() or not bb.any():
        return float("inf")
    da = ndimage.distance_transform_edt(~ba)
    db = ndimage.distance_transform_edt(~bb)
    return max(float(da[bb].max()), float(db[ba].max()))


class TestRefine:
    def test_two_tone_disk_recovers_truth(self):
        window, truth = disk_image(size=256, radius=60, seed=1)
        yy, xx = np.mgrid[0:256, 0:256]
        dilated = (xx - 128) ** 2 + (yy - 128) ** 2 <= 70 ** 2
        build = build_refine_network(window.pixels, dilated,
                                     RefineParams(band_width=30))
        _, side = max_flow(build.network)
        out = cut_labels(build, side)
        iou = (out & truth).sum() / (out | truth).sum()
        assert iou >= 0.98

    def test_fixed_point(self):
        window, _ = disk_image(size=192, center=(96, 96), radius=50, seed=2, noise=0)
        yy, xx = np.mgrid[0:192, 0:192]
        start = (xx - 96) ** 2 + (yy - 96) ** 2 <= 58 ** 2
        params = RefineParams(band_width=20)
        build = build_refine_network(window.pixels, start, params)
        _, side = max_flow(build.network)
        once = cut_labels(build, side)
        build2 = build_refine_network(window.pixels, once, params)
        _, side2 = max_flow(build2.network)
        twice = cut_labels(build2, side2)
        assert np.array_equal(once, twice)

    def test_constant_image_stays_in_band(self):
        img = np.full((96, 96, 3), 120, np.uint8)
        mask = np.zeros((96, 96), bool)
        mask[24:72, 24:72] = True
        params = RefineParams(band_width=8)
        build = build_refine_network(img, mask, params)
        _, side = max_flow(build.network)
        out = cut_labels(build, side)
        d = band_distance(mask)
        assert not ((out != mask) & (d > params.band_width - 1)).any()
        # simply connected: one component, no holes
        regs = vectorize(out)
        assert len(regs) == 1 and not regs[0].holes

    def test_region_roundtrip_api(self):
        window, truth = disk_image(size=192, center=(96, 96), radius=55, seed=3)
        yy, xx = np.mgrid[0:192, 0:192]
        start = (xx - 96) ** 2 + (yy - 96) ** 2 <= 63 ** 2
        region = vectorize(start, class_index=2)[0]
        region.id = 17
        out = refine(window, region, RefineParams(band_width=15))
        assert out.id == 17
        assert out.class_index == 2
        assert out.provenance == "refined"
        out_mask = rasterize(out, (0, 0, 192, 192))
        assert (out_mask & truth).sum() / (out_mask | truth).sum() >= 0.98

    def test_hausdorff_bound_random_shapes(self, rng):
        from conftest import blob_mask
        params = RefineParams(band_width=12)
        for seed in range(5):
            r = np.random.default_rng(seed)
            mask = blob_mask((144, 144), r, n_disks=3, r_min=30, r_max=38)
            img = np.empty((144, 144, 3), np.uint8)
            img[...] = (220, 220, 210)
            img[mask] = (40, 80, 130)
            img = np.clip(img.astype(int) + r.integers(-10, 11, img.shape),
                          0, 255).astype(np.uint8)
            build = build_refine_network(img, mask, params)
            _, side = max_flow(build.network)
            out = cut_labels(build, side)
            assert mask_hausdorff(mask, out) <= params.band_width

    def test_huge_lambda_suppresses_islands(self):
        window, _ = disk_image(size=128, center=(64, 64), radius=40, seed=4, noise=20)
        yy, xx = np.mgrid[0:128, 0:128]
        start = (xx - 64) ** 2 + (yy - 64) ** 2 <= 44 ** 2
        build = build_refine_network(window.pixels, start,
                                     RefineParams(band_width=10, lam=1e6))
        _, side = max_flow(build.network)
        out = cut_labels(build, side)
        labels, n = ndimage.label(out)
        assert n == 1  # no floating band islands under extreme smoothing
