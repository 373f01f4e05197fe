"""Non-differentiable image and mask utilities.

Binary masks are plain uint8 numpy arrays with values in {0,1}. Boxes are
continuous image-coordinate rectangles where pixel (row i, col j) spans
[j, j+1) x [i, i+1), i.e. its center sits at (j+0.5, i+0.5).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from . import tensor as T

# 8-connected Laplacian: positive responses land on mask pixels that touch
# background or the border, which keeps boundary subset-of mask.
LAPLACIAN = np.array([[-1, -1, -1], [-1, 8, -1], [-1, -1, -1]], dtype=np.float64)
SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T.copy()


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in continuous image coordinates."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ShapeError(f"degenerate box {(self.x0, self.y0, self.x1, self.y1)}")

    @property
    def width(self):
        return self.x1 - self.x0

    @property
    def height(self):
        return self.y1 - self.y0

    @property
    def area(self):
        return self.width * self.height

    def intersects_image(self, height: int, width: int) -> bool:
        return self.x0 < width and self.x1 > 0 and self.y0 < height and self.y1 > 0


def _check_mask(m, name="mask"):
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name}: expected 2-d HxW array, got shape {m.shape}")
    return m


def extract_boundary(mask: np.ndarray) -> np.ndarray:
    """Width-1 boundary of a binary mask (Laplacian response > 0).

    Zero padding means border pixels of a solid region count as boundary.
    The result is always a subset of the mask.
    """
    m = _check_mask(mask).astype(np.float64)
    p = np.pad(m, 1)
    h, w = m.shape
    neighborhood = sum(
        p[di:di + h, dj:dj + w] for di in range(3) for dj in range(3)
    )
    response = 9.0 * m - neighborhood
    return (response > 0).astype(np.uint8)


def _correlate3(m: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    p = np.pad(m, 1)
    h, w = m.shape
    out = np.zeros((h, w))
    for di in range(3):
        for dj in range(3):
            out += kernel[di, dj] * p[di:di + h, dj:dj + w]
    return out


def sobel_xy(m):
    """Sobel-x / Sobel-y responses of an HxW map, stacked to 2xHxW.

    Accepts a numpy array (returns numpy) or a Tensor, in which case the
    result is differentiable: the fixed kernels run through conv2d as
    non-learned weights.
    """
    if isinstance(m, T.Tensor):
        if m.data.ndim != 2:
            raise ShapeError(f"sobel_xy: expected HxW map, got {m.data.shape}")
        h, w = m.data.shape
        k = T.Tensor(np.stack([SOBEL_X, SOBEL_Y])[:, None])
        z = T.Tensor(np.zeros(2))
        out = T.conv2d(T.reshape(m, (1, 1, h, w)), k, z, stride=1, pad=1)
        return T.reshape(out, (2, h, w))
    m = _check_mask(m).astype(np.float64)
    return np.stack([_correlate3(m, SOBEL_X), _correlate3(m, SOBEL_Y)])


def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample img at continuous points; out-of-image reads are zero.

    Pixel (i,j) holds the value at center (j+0.5, i+0.5); interpolation is
    between the four surrounding centers.
    """
    h, w = img.shape
    fx = np.asarray(xs, dtype=np.float64) - 0.5
    fy = np.asarray(ys, dtype=np.float64) - 0.5
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    tx = fx - x0
    ty = fy - y0
    out = np.zeros(np.broadcast(fx, fy).shape)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            wgt = (tx if dx else 1 - tx) * (ty if dy else 1 - ty)
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            out += np.where(valid, wgt * vals, 0.0)
    return out


def crop_resize_mask(mask: np.ndarray, box: Box, out: int) -> np.ndarray:
    """Bilinear resample of the mask restricted to the box, onto out x out.

    Samples outside the image read 0; the result is thresholded at 0.5
    with ties mapping to 1.
    """
    m = _check_mask(mask).astype(np.float64)
    h, w = m.shape
    if not box.intersects_image(h, w):
        raise ShapeError(f"box {box} does not intersect {h}x{w} image")
    cx0, cx1 = max(box.x0, 0.0), min(box.x1, float(w))
    cy0, cy1 = max(box.y0, 0.0), min(box.y1, float(h))
    if cx1 - cx0 <= 0 or cy1 - cy0 <= 0:
        raise ShapeError(f"box {box} has zero area after clipping to {h}x{w}")
    steps = (np.arange(out) + 0.5) / out
    xs = box.x0 + steps * box.width
    ys = box.y0 + steps * box.height
    grid = bilinear_sample(m, xs[None, :], ys[:, None])
    return (grid >= 0.5).astype(np.uint8)


def paste_mask(mask: np.ndarray, box: Box, height: int, width: int) -> np.ndarray:
    """Resize a RoI-frame mask to the box extents inside a full image.

    Inverse of crop_resize_mask: image pixels whose centers fall in the box
    sample the RoI mask bilinearly; threshold 0.5, ties to foreground.
    """
    m = _check_mask(mask).astype(np.float64)
    s_h, s_w = m.shape
    out = np.zeros((height, width), dtype=np.uint8)
    xlo = max(0, int(np.floor(box.x0 - 0.5)))
    xhi = min(width - 1, int(np.ceil(box.x1)))
    ylo = max(0, int(np.floor(box.y0 - 0.5)))
    yhi = min(height - 1, int(np.ceil(box.y1)))
    if xhi < xlo or yhi < ylo:
        return out
    cx = np.arange(xlo, xhi + 1) + 0.5
    cy = np.arange(ylo, yhi + 1) + 0.5
    in_x = (cx >= box.x0) & (cx < box.x1)
    in_y = (cy >= box.y0) & (cy < box.y1)
    u = (cx - box.x0) / box.width * s_w
    v = (cy - box.y0) / box.height * s_h
    vals = bilinear_sample(m, u[None, :], v[:, None])
    inside = in_y[:, None] & in_x[None, :]
    out[ylo:yhi + 1, xlo:xhi + 1] = ((vals >= 0.5) & inside).astype(np.uint8)
    return out


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    a = _check_mask(a, "a")
    b = _check_mask(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"mask_iou: {a.shape} vs {b.shape}")
    ab = a.astype(bool)
    bb = b.astype(bool)
    union = np.count_nonzero(ab | bb)
    if union == 0:
        return 1.0
    return np.count_nonzero(ab & bb) / union


# ---------------------------------------------------------------------------
# analytic shapes

ELLIPSE, RECTANGLE, TRIANGLE = "ellipse", "rectangle", "triangle"


@dataclass(frozen=True)
class Shape:
    """Analytic shape descriptor: kind plus kind-specific parameters.

    ellipse:   (cx, cy, rx, ry)
    rectangle: (x0, y0, x1, y1), half-open in both axes
    triangle:  (x0, y0, x1, y1, x2, y2), edges inclusive
    """

    kind: str
    params: tuple

    def bbox(self):
        if self.kind == ELLIPSE:
            cx, cy, rx, ry = self.params
            return cx - rx, cy - ry, cx + rx, cy + ry
        if self.kind == RECTANGLE:
            return self.params
        if self.kind == TRIANGLE:
            xs = self.params[0::2]
            ys = self.params[1::2]
            return min(xs), min(ys), max(xs), max(ys)
        raise ShapeError(f"unknown shape kind: {self.kind!r}")


def _validate_shape(shape: Shape, height: int, width: int):
    if shape.kind == ELLIPSE:
        cx, cy, rx, ry = shape.params
        if rx <= 0 or ry <= 0:
            raise ShapeError(f"ellipse radii must be positive, got rx={rx}, ry={ry}")
    elif shape.kind == RECTANGLE:
        x0, y0, x1, y1 = shape.params
        if not (x0 < x1 and y0 < y1):
            raise ShapeError(f"empty rectangle {shape.params}")
    elif shape.kind == TRIANGLE:
        x0, y0, x1, y1, x2, y2 = shape.params
        if (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0) == 0:
            raise ShapeError(f"degenerate triangle {shape.params}")
    else:
        raise ShapeError(f"unknown shape kind: {shape.kind!r}")
    bx0, by0, bx1, by1 = shape.bbox()
    if bx0 < 0 or by0 < 0 or bx1 > width or by1 > height:
        raise ShapeError(f"{shape.kind} extends outside {height}x{width} image")


def rasterize_shape(shape: Shape, height: int, width: int) -> np.ndarray:
    """Binary mask: pixel is 1 iff its center lies inside the shape."""
    _validate_shape(shape, height, width)
    cx = np.arange(width) + 0.5
    cy = np.arange(height) + 0.5
    px, py = np.meshgrid(cx, cy)
    if shape.kind == ELLIPSE:
        ex, ey, rx, ry = shape.params
        inside = ((px - ex) / rx) ** 2 + ((py - ey) / ry) ** 2 <= 1.0
    elif shape.kind == RECTANGLE:
        x0, y0, x1, y1 = shape.params
        inside = (px >= x0) & (px < x1) & (py >= y0) & (py < y1)
    else:
        x0, y0, x1, y1, x2, y2 = shape.params
        # orient counter-clockwise, then inside = left-of (or on) every edge
        if (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0) < 0:
            x1, y1, x2, y2 = x2, y2, x1, y1
        inside = np.ones((height, width), dtype=bool)
        for (ax, ay), (bx, by) in (((x0, y0), (x1, y1)),
                                   ((x1, y1), (x2, y2)),
                                   ((x2, y2), (x0, y0))):
            inside &= (bx - ax) * (py - ay) - (by - ay) * (px - ax) >= 0
    return inside.astype(np.uint8)


def tight_box(mask: np.ndarray) -> Box:
    """Tight bounding box of a nonempty mask, in continuous coordinates."""
    ys, xs = np.nonzero(_check_mask(mask))
    if len(xs) == 0:
        raise ShapeError("tight_box of an empty mask")
    return Box(float(xs.min()), float(ys.min()),
               float(xs.max() + 1), float(ys.max() + 1))
