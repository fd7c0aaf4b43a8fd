import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from orthoseg.regions import (GeometryError, Region, compute_stats, merge,
                              rasterize, region_area, ring_area, subtract,
                              validate_region, vectorize)


def square(x0, y0, x1, y1, cls=1, rid=-1):
    return Region(id=rid, class_index=cls,
                  outer=[(x0, y0), (x1, y0), (x1, y1), (x0, y1)])


class TestRasterize:
    def test_axis_aligned_square_fills_all_centers(self):
        mask = rasterize(square(0.0, 0.0, 10.0, 10.0), (0, 0, 10, 10))
        assert mask.all()

    def test_square_with_hole(self):
        # oracle: count pixel centers inside the ring by direct evaluation
        r = Region(id=1, class_index=1,
                   outer=[(0, 0), (10, 0), (10, 10), (0, 10)],
                   holes=[np.array([(2, 2), (2, 8), (8, 8), (8, 2)], float)])
        mask = rasterize(r, (0, 0, 10, 10))
        yy, xx = np.mgrid[0:10, 0:10]
        cx, cy = xx + 0.5, yy + 0.5
        inside = (cx > 0) & (cx < 10) & (cy > 0) & (cy < 10)
        in_hole = (cx > 2) & (cx < 8) & (cy > 2) & (cy < 8)
        assert mask.sum() == 100 - 36
        assert np.array_equal(mask, inside & ~in_hole)

    def test_region_left_of_window_is_empty(self):
        mask = rasterize(square(-20, 0, -10, 10), (0, 0, 16, 16))
        assert not mask.any()

    def test_subpixel_triangle_matches_center_test(self):
        tri = Region(id=1, class_index=1,
                     outer=[(1.3, 1.1), (14.7, 2.2), (6.5, 13.9)])
        mask = rasterize(tri, (0, 0, 16, 16))
        # oracle: even-odd point-in-polygon on each pixel center
        pts = np.asarray(tri.outer)
        for y in range(16):
            for x in range(16):
                assert mask[y, x] == _point_in_poly(x + 0.5, y + 0.5, pts)


def _point_in_poly(px, py, poly):
    inside = False
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        if (y1 <= py) != (y2 <= py):
            cx = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            if px >= cx:
                inside = not inside
    return inside


class TestVectorize:
    def test_single_pixel(self):
        mask = np.zeros((10, 10), bool)
        mask[5, 5] = True
        regs = vectorize(mask)
        assert len(regs) == 1
        assert region_area(regs[0]) == 1.0
        assert sorted(map(tuple, regs[0].outer.tolist())) == \
            [[5, 5], [5, 6], [6, 5], [6, 6]] or len(regs[0].outer) == 4

    def test_ring_with_hole(self):
        mask = np.ones((3, 3), bool)
        mask[1, 1] = False
        regs = vectorize(mask)
        assert len(regs) == 1
        assert len(regs[0].holes) == 1
        assert region_area(regs[0]) == 8.0

    def test_diagonal_pixels_are_two_regions(self):
        mask = np.zeros((2, 2), bool)
        mask[0, 0] = mask[1, 1] = True
        assert len(vectorize(mask)) == 2

    def test_min_region_px_filter(self):
        mask = np.zeros((20, 20), bool)
        mask[2, 2] = True
        mask[10:14, 10:14] = True
        regs = vectorize(mask, min_region_px=4)
        assert len(regs) == 1
        assert region_area(regs[0]) == 16.0

    def test_orientation_invariants(self, rng):
        mask = rng.random((24, 24)) < 0.45
        for r in vectorize(mask):
            assert ring_area(r.outer) > 0
            for h in r.holes:
                assert ring_area(h) < 0
            validate_region(r)

    @pytest.mark.parametrize("p", [0.15, 0.5, 0.85])
    def test_roundtrip_exact(self, p):
        rng = np.random.default_rng(hash(p) % 2 ** 32)
        for _ in range(10):
            mask = rng.random((48, 48)) < p
            regs = vectorize(mask)
            out = np.zeros_like(mask)
            for r in regs:
                out |= rasterize(r, (0, 0, 48, 48))
            assert np.array_equal(out, mask)
            assert sum(region_area(r) for r in regs) == mask.sum()

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_roundtrip_property(self, seed):
        rng = np.random.default_rng(seed)
        mask = rng.random((16, 16)) < rng.uniform(0.1, 0.9)
        out = np.zeros_like(mask)
        for r in vectorize(mask):
            out |= rasterize(r, (0, 0, 16, 16))
        assert np.array_equal(out, mask)

    def test_window_origin_offsets_coordinates(self):
        mask = np.zeros((4, 4), bool)
        mask[1, 2] = True
        r = vectorize(mask, window_origin=(100, 200))[0]
        assert r.outer[:, 0].min() == 102
        assert r.outer[:, 1].min() == 201


class TestStats:
    def test_unit_square(self):
        s = compute_stats(square(0, 0, 1, 1), 1.0)
        assert s.area_px == pytest.approx(1.0)
        assert s.area_mm2 == pytest.approx(1.0)
        assert s.perimeter_px == pytest.approx(4.0)
        assert s.centroid == pytest.approx((0.5, 0.5))

    def test_pixel_size_scaling(self):
        s1 = compute_stats(square(0, 0, 1, 1), 1.0)
        s2 = compute_stats(square(0, 0, 1, 1), 2.0)
        assert s2.area_mm2 == pytest.approx(4 * s1.area_mm2)
        assert s2.perimeter_mm == pytest.approx(2 * s1.perimeter_mm)

    def test_disk_stats_close_to_analytic(self):
        yy, xx = np.mgrid[0:100, 0:100]
        mask = (xx - 50) ** 2 + (yy - 50) ** 2 <= 40 ** 2
        r = vectorize(mask)[0]
        s = compute_stats(r, 1.0)
        assert abs(s.area_px - np.pi * 40 ** 2) / (np.pi * 40 ** 2) < 0.01
        # pixel-boundary contours overshoot a smooth circle's length
        assert abs(s.perimeter_px - 2 * np.pi * 40) / (2 * np.pi * 40) < 0.30
        assert s.centroid == pytest.approx((50.5, 50.5), abs=0.1)

    def test_hole_subtracts_area(self):
        r = Region(id=1, class_index=1,
                   outer=[(0, 0), (10, 0), (10, 10), (0, 10)],
                   holes=[np.array([(2, 2), (2, 8), (8, 8), (8, 2)], float)])
        assert compute_stats(r, 1.0).area_px == pytest.approx(64.0)

    def test_degenerate_errors(self):
        line = Region(id=1, class_index=1, outer=[(0, 0), (5, 0), (10, 0)])
        with pytest.raises(GeometryError):
            compute_stats(line, 1.0)


class TestBooleans:
    def test_merge_overlapping_by_half(self):
        a = square(0, 0, 1, 1)
        b = square(0.5, 0, 1.5, 1)
        out = merge([a, b])
        assert len(out) == 1
        assert region_area(out[0]) == pytest.approx(1.5, abs=1e-6)

    def test_merge_disjoint_returns_both(self):
        a = square(0, 0, 1, 1)
        b = square(5, 5, 6, 6)
        out = merge([a, b])
        assert len(out) == 2
        assert sum(region_area(r) for r in out) == pytest.approx(2.0)

    def test_merge_inclusion_exclusion(self, rng):
        for _ in range(10):
            # booleans snap coordinates to the 1/1024 grid: snap the oracle too
            x, y = np.round(rng.uniform(0, 5, 2) * 1024) / 1024
            a = square(0, 0, 6, 6)
            b = square(x, y, x + 6, y + 6)
            out = merge([a, b])
            inter_w = max(0.0, 6 - abs(x))
            inter_h = max(0.0, 6 - abs(y))
            want = 72 - inter_w * inter_h
            assert sum(region_area(r) for r in out) == pytest.approx(want, abs=1e-6)

    def test_merge_requires_same_class(self):
        with pytest.raises(GeometryError):
            merge([square(0, 0, 1, 1, cls=1), square(0, 0, 1, 1, cls=2)])

    def test_subtract_self_is_empty(self):
        a = square(0, 0, 4, 4)
        assert subtract(a, a) == []

    def test_subtract_hole_punch(self):
        outer = square(0, 0, 10, 10)
        inner = square(3, 3, 7, 7)
        out = subtract(outer, inner)
        assert len(out) == 1
        assert len(out[0].holes) == 1
        assert region_area(out[0]) == pytest.approx(100 - 16)
