"""Deterministic synthetic scenes: colored shapes over gradient backgrounds.

Each scene carries 1-6 instances (ellipse / rectangle / triangle) with
full-footprint binary masks, tight boxes and class ids. Instance masks may
overlap up to a configurable IoU cap; the image draws later instances over
earlier ones. Everything is derived from splitmix64 streams, so a spec
generates bit-identical data on any platform.

On-disk format (line oriented, diff-able):

    BMDS1 <H> <W>
    scene <n_instances>
    image <hex of 3*H*W bytes, planar RGB, row-major>
    inst <class> <x0> <y0> <x1> <y1>
    rle <n_runs> <run0> <run1> ...
    (one inst+rle pair per instance; scenes repeat until EOF)

Masks are run-length encoded over the row-major flattening, alternating
run lengths starting with the zero-run. Images are stored as 8-bit RGB,
which is exact because scenes are quantized to 8 bits when generated.
"""

from __future__ import annotations

import binascii
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetFormatError, ShapeError
from .imgproc import Box, Shape, mask_iou, rasterize_shape, tight_box
from .rng import SplitMix64

CLASS_NAMES = ("ellipse", "rectangle", "triangle")
NUM_CLASSES = 3
# per-class base fill colors (RGB)
PALETTE = np.array([[204, 64, 64], [64, 178, 77], [70, 105, 222]], dtype=np.float64)
COLOR_JITTER = 28.0
MAX_INSTANCES = 6
PLACEMENT_ATTEMPTS = 1000


@dataclass
class Instance:
    cls: int
    box: Box
    mask: np.ndarray


@dataclass
class SceneSample:
    image: np.ndarray            # 3xHxW float64 in [0,1], 8-bit quantized
    instances: list


@dataclass
class DatasetSpec:
    count: int
    height: int = 128
    width: int = 128
    seed: int = 0
    max_overlap_iou: float = 0.3
    noise: float = 0.04

    def validate(self):
        if self.count < 0 or self.height < 32 or self.width < 32:
            raise ShapeError(f"bad dataset spec: count={self.count}, "
                             f"{self.height}x{self.width}")
        if not (0 <= self.max_overlap_iou <= 1) or self.noise < 0:
            raise ShapeError("bad dataset spec: overlap cap or noise out of range")
        return self


def _random_shape(rng: SplitMix64, cls: int, h: int, w: int) -> Shape:
    margin = 2.0
    if cls == 0:
        rx = rng.uniform(lo=5.0, hi=18.0)
        ry = rng.uniform(lo=5.0, hi=18.0)
        cx = rng.uniform(lo=rx + margin, hi=w - rx - margin)
        cy = rng.uniform(lo=ry + margin, hi=h - ry - margin)
        return Shape("ellipse", (cx, cy, rx, ry))
    if cls == 1:
        bw = rng.uniform(lo=9.0, hi=34.0)
        bh = rng.uniform(lo=9.0, hi=34.0)
        x0 = rng.uniform(lo=margin, hi=w - bw - margin)
        y0 = rng.uniform(lo=margin, hi=h - bh - margin)
        return Shape("rectangle", (x0, y0, x0 + bw, y0 + bh))
    for _ in range(100):
        cx = rng.uniform(lo=16.0, hi=w - 16.0)
        cy = rng.uniform(lo=16.0, hi=h - 16.0)
        pts = []
        for _ in range(3):
            ang = rng.uniform(lo=0.0, hi=2 * np.pi)
            rad = rng.uniform(lo=7.0, hi=14.0)
            pts.extend((cx + rad * np.cos(ang), cy + rad * np.sin(ang)))
        x0, y0, x1, y1, x2, y2 = pts
        area2 = abs((x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0))
        if area2 >= 60.0:  # 2x analytic area; rejects slivers
            return Shape("triangle", tuple(pts))
    raise ShapeError("triangle sampling failed; image too small")


def _generate_scene(spec: DatasetSpec, index: int) -> SceneSample:
    rng = SplitMix64(spec.seed ^ index)
    h, w = spec.height, spec.width
    while True:  # whole-scene retry keeps drawing from the same stream
        n = 1 + rng.below(MAX_INSTANCES)
        placed = []
        ok = True
        for _ in range(n):
            for attempt in range(PLACEMENT_ATTEMPTS):
                cls = rng.below(NUM_CLASSES)
                mask = rasterize_shape(_random_shape(rng, cls, h, w), h, w)
                if not mask.any():
                    continue
                if all(mask_iou(mask, p[1]) <= spec.max_overlap_iou for p in placed):
                    placed.append((cls, mask))
                    break
            else:
                ok = False
                break
        if ok:
            break

    # background: linear gradient between two random colors
    c0 = rng.uniform((3,), 0.0, 255.0)
    c1 = rng.uniform((3,), 0.0, 255.0)
    theta = rng.uniform(lo=0.0, hi=2 * np.pi)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    proj = (xx * np.cos(theta) + yy * np.sin(theta))
    proj = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-9)
    img = c0[:, None, None] + (c1 - c0)[:, None, None] * proj[None]

    for cls, mask in placed:
        color = PALETTE[cls] + rng.uniform((3,), -COLOR_JITTER, COLOR_JITTER)
        img[:, mask.astype(bool)] = color[:, None]

    if spec.noise > 0:
        img = img + rng.uniform((3, h, w), -spec.noise * 255.0, spec.noise * 255.0)
    img = np.clip(np.rint(img), 0, 255) / 255.0

    instances = [Instance(cls=cls, box=tight_box(mask), mask=mask)
                 for cls, mask in placed]
    return SceneSample(image=img, instances=instances)


def generate(spec: DatasetSpec) -> list:
    spec.validate()
    return [_generate_scene(spec, i) for i in range(spec.count)]


# ---------------------------------------------------------------------------
# serialization


def rle_encode(mask: np.ndarray) -> list:
    flat = np.asarray(mask).ravel().astype(np.int64)
    if flat.size == 0:
        return [0]
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs = [0] + runs
    return runs


def rle_decode(runs, height: int, width: int) -> np.ndarray:
    total = sum(runs)
    if total != height * width:
        raise DatasetFormatError(f"rle covers {total} pixels, expected "
                                 f"{height * width}")
    flat = np.zeros(height * width, dtype=np.uint8)
    pos = 0
    value = 0
    for run in runs:
        if run < 0:
            raise DatasetFormatError("negative run length")
        if value:
            flat[pos:pos + run] = 1
        pos += run
        value ^= 1
    return flat.reshape(height, width)


def save(samples: list, path) -> None:
    heights = {s.image.shape[1] for s in samples}
    widths = {s.image.shape[2] for s in samples}
    if len(heights) > 1 or len(widths) > 1:
        raise ShapeError("all scenes in a dataset file must share dimensions")
    h = heights.pop() if heights else 0
    w = widths.pop() if widths else 0
    lines = [f"BMDS1 {h} {w}"]
    for s in samples:
        lines.append(f"scene {len(s.instances)}")
        raw = np.rint(s.image * 255.0).astype(np.uint8).tobytes()
        lines.append("image " + binascii.hexlify(raw).decode("ascii"))
        for inst in s.instances:
            b = inst.box
            lines.append(f"inst {inst.cls} {b.x0!r} {b.y0!r} {b.x1!r} {b.y1!r}")
            runs = rle_encode(inst.mask)
            lines.append(f"rle {len(runs)} " + " ".join(str(r) for r in runs))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load(path) -> list:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise DatasetFormatError("empty file", line=1)

    def fail(msg, ln):
        raise DatasetFormatError(msg, line=ln + 1)

    header = lines[0].split()
    if len(header) != 3 or header[0] != "BMDS1":
        fail(f"bad header {lines[0]!r}", 0)
    try:
        h, w = int(header[1]), int(header[2])
    except ValueError:
        fail(f"bad dimensions in header {lines[0]!r}", 0)

    samples = []
    i = 1
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        parts = lines[i].split()
        if parts[0] != "scene" or len(parts) != 2:
            fail(f"expected 'scene <n>', got {lines[i]!r}", i)
        try:
            n = int(parts[1])
        except ValueError:
            fail(f"bad instance count {parts[1]!r}", i)
        i += 1
        if i >= len(lines) or not lines[i].startswith("image "):
            fail("expected image line", i if i < len(lines) else i - 1)
        hexdata = lines[i][6:].strip()
        try:
            raw = binascii.unhexlify(hexdata)
        except (binascii.Error, ValueError):
            fail("bad image hex", i)
        if len(raw) != 3 * h * w:
            fail(f"image has {len(raw)} bytes, expected {3 * h * w}", i)
        image = np.frombuffer(raw, dtype=np.uint8).reshape(3, h, w) / 255.0
        i += 1
        instances = []
        for _ in range(n):
            if i >= len(lines) or not lines[i].startswith("inst "):
                fail("expected inst line", min(i, len(lines) - 1))
            fields = lines[i].split()
            if len(fields) != 6:
                fail(f"bad inst line {lines[i]!r}", i)
            try:
                cls = int(fields[1])
                coords = [float(v) for v in fields[2:]]
            except ValueError:
                fail(f"bad inst values {lines[i]!r}", i)
            i += 1
            if i >= len(lines) or not lines[i].startswith("rle "):
                fail("expected rle line", min(i, len(lines) - 1))
            rparts = lines[i].split()
            try:
                count = int(rparts[1])
                runs = [int(v) for v in rparts[2:]]
            except (IndexError, ValueError):
                fail(f"bad rle line start {lines[i][:40]!r}", i)
            if len(runs) != count:
                fail(f"rle declares {count} runs but has {len(runs)}", i)
            try:
                mask = rle_decode(runs, h, w)
            except DatasetFormatError as e:
                fail(str(e), i)
            instances.append(Instance(cls=cls, box=Box(*coords), mask=mask))
            i += 1
        samples.append(SceneSample(image=image, instances=instances))
    return samples
