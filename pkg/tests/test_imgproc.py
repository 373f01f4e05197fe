import numpy as np
import pytest

from bmasklab import tensor as T
from bmasklab.errors import ShapeError
from bmasklab.imgproc import (Box, Shape, crop_resize_mask, extract_boundary,
                              mask_iou, paste_mask, rasterize_shape, sobel_xy,
                              tight_box)
from bmasklab.rng import SplitMix64

from helpers import fd_check


def random_mask(rng, h=24, w=24, blobs=2):
    m = np.zeros((h, w), dtype=np.uint8)
    for _ in range(blobs):
        cy, cx = rng.integers(3, h - 3), rng.integers(3, w - 3)
        ry, rx = rng.integers(2, 6), rng.integers(2, 6)
        yy, xx = np.ogrid[:h, :w]
        m |= ((yy - cy) ** 2 / ry**2 + (xx - cx) ** 2 / rx**2 <= 1).astype(np.uint8)
    return m


class TestExtractBoundary:
    def test_empty_mask(self):
        assert not extract_boundary(np.zeros((5, 5), dtype=np.uint8)).any()

    def test_single_pixel(self):
        m = np.zeros((5, 5), dtype=np.uint8)
        m[2, 3] = 1
        assert np.array_equal(extract_boundary(m), m)

    def test_solid_square_keeps_perimeter(self):
        m = np.zeros((7, 7), dtype=np.uint8)
        m[2:5, 2:5] = 1
        b = extract_boundary(m)
        expected = m.copy()
        expected[3, 3] = 0
        assert np.array_equal(b, expected)
        assert b.sum() == 8

    def test_all_ones_keeps_border_ring(self):
        m = np.ones((6, 9), dtype=np.uint8)
        b = extract_boundary(m)
        ring = np.ones((6, 9), dtype=np.uint8)
        ring[1:-1, 1:-1] = 0
        assert np.array_equal(b, ring)

    def test_invariants_on_random_masks(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            m = random_mask(rng)
            b = extract_boundary(m)
            assert np.all(b <= m), "boundary must be a subset of the mask"
            padded = np.pad(m, 1)
            h, w = m.shape
            neigh_min = np.min(
                [padded[di:di + h, dj:dj + w]
                 for di in range(3) for dj in range(3)], axis=0)
            # pixels with a zero 8-neighbor (or border) are exactly the boundary
            assert np.array_equal(b, ((m == 1) & (neigh_min == 0)).astype(np.uint8))

    def test_idempotent_on_thin_masks(self):
        m = np.zeros((9, 9), dtype=np.uint8)
        m[4, 1:8] = 1
        m[1:8, 4] = 1
        b = extract_boundary(m)
        assert np.array_equal(extract_boundary(b), b)


class TestSobel:
    def test_constant_map_zero_interior(self):
        out = sobel_xy(np.full((6, 6), 2.5))
        assert np.allclose(out[:, 1:-1, 1:-1], 0.0)

    def test_vertical_step_response(self):
        m = np.zeros((7, 8))
        m[:, 4:] = 1.0
        out = sobel_xy(m)
        assert np.allclose(out[0, 1:-1, 3], 4.0)
        assert np.allclose(out[0, 1:-1, 4], 4.0)
        assert np.allclose(out[1, 1:-1, 3:5], 0.0)

    def test_output_shape(self):
        assert sobel_xy(np.zeros((5, 9))).shape == (2, 5, 9)

    def test_tensor_path_matches_numpy_and_differentiates(self):
        rng = np.random.default_rng(1)
        m = rng.uniform(0, 1, (6, 7))
        mt = T.Tensor(m, requires_grad=True)
        out_t = sobel_xy(mt)
        assert np.allclose(out_t.data, sobel_xy(m))
        fd_check(lambda: T.sum_all(T.mul(sobel_xy(mt), sobel_xy(mt))),
                 [mt], rng, n_coords=10)


class TestCropResize:
    def test_all_ones(self):
        m = np.ones((8, 8), dtype=np.uint8)
        out = crop_resize_mask(m, Box(0, 0, 8, 8), 4)
        assert np.all(out == 1)

    def test_background_box(self):
        m = np.zeros((8, 8), dtype=np.uint8)
        m[0, 0] = 1
        out = crop_resize_mask(m, Box(4, 4, 8, 8), 4)
        assert not out.any()

    def test_exact_square_resize(self):
        m = np.zeros((10, 10), dtype=np.uint8)
        m[3:7, 2:6] = 1
        out = crop_resize_mask(m, Box(2, 3, 6, 7), 2)
        assert np.all(out == 1)

    def test_degenerate_box_rejected(self):
        m = np.ones((8, 8), dtype=np.uint8)
        with pytest.raises(ShapeError):
            crop_resize_mask(m, Box(-10, -10, -1, -1), 4)


class TestMaskIou:
    def test_identical(self):
        m = random_mask(np.random.default_rng(2))
        assert mask_iou(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), dtype=np.uint8)
        b = np.zeros((4, 4), dtype=np.uint8)
        a[0, 0] = 1
        b[3, 3] = 1
        assert mask_iou(a, b) == 0.0

    def test_partial_overlap(self):
        a = np.zeros((2, 6), dtype=np.uint8)
        b = np.zeros((2, 6), dtype=np.uint8)
        a[:, 0:4] = 1
        b[:, 2:6] = 1
        assert mask_iou(a, b) == pytest.approx(4 / 12)

    def test_both_empty(self):
        z = np.zeros((3, 3), dtype=np.uint8)
        assert mask_iou(z, z) == 1.0

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        a, b = random_mask(rng), random_mask(rng)
        assert mask_iou(a, b) == mask_iou(b, a)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            mask_iou(np.zeros((3, 3), dtype=np.uint8),
                     np.zeros((4, 4), dtype=np.uint8))


class TestRasterize:
    def test_rectangle_pixel_count(self):
        m = rasterize_shape(Shape("rectangle", (2, 1, 5, 3)), 8, 8)
        assert m.sum() == 6
        assert m[1:3, 2:5].all()

    def test_right_triangle_pixel_count(self):
        m = rasterize_shape(Shape("triangle", (0, 0, 4, 0, 0, 4)), 8, 8)
        assert m.sum() == 10

    def test_zero_area_ellipse_rejected(self):
        with pytest.raises(ShapeError, match="positive"):
            rasterize_shape(Shape("ellipse", (4, 4, 0, 2)), 8, 8)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ShapeError, match="unknown"):
            rasterize_shape(Shape("pentagon", (1, 2, 3)), 8, 8)

    def test_area_close_to_analytic(self):
        rng = SplitMix64(5)
        for _ in range(30):
            rx = rng.uniform(lo=3, hi=10)
            ry = rng.uniform(lo=3, hi=10)
            cx = rng.uniform(lo=12, hi=20)
            cy = rng.uniform(lo=12, hi=20)
            m = rasterize_shape(Shape("ellipse", (cx, cy, rx, ry)), 32, 32)
            area = np.pi * rx * ry
            # crude perimeter bound for an ellipse
            perimeter = 2 * np.pi * max(rx, ry)
            assert abs(m.sum() - area) <= perimeter


class TestBoxesAndPaste:
    def test_tight_box_is_tight(self):
        rng = np.random.default_rng(4)
        m = random_mask(rng)
        b = tight_box(m)
        sub = m[int(b.y0):int(b.y1), int(b.x0):int(b.x1)]
        assert sub.any()
        assert m.sum() == sub.sum()
        assert sub[0].any() and sub[-1].any()
        assert sub[:, 0].any() and sub[:, -1].any()

    def test_invalid_box_rejected(self):
        with pytest.raises(ShapeError):
            Box(3, 0, 3, 5)

    def test_paste_covers_box_for_full_mask(self):
        full = np.ones((28, 28), dtype=np.uint8)
        out = paste_mask(full, Box(3, 5, 9, 12), 20, 20)
        expected = np.zeros((20, 20), dtype=np.uint8)
        expected[5:12, 3:9] = 1
        assert np.array_equal(out, expected)

    def test_paste_empty_mask(self):
        out = paste_mask(np.zeros((28, 28), dtype=np.uint8),
                         Box(3, 5, 9, 12), 20, 20)
        assert not out.any()
