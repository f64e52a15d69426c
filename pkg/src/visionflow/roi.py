"""Multi-scale pyramid assembly and per-box pooled feature extraction.

Stages from the high-resolution encoder are bilinearly upsampled to the
stride-4 grid and channel-concatenated; each detection is then read out of
that pyramid with quantization-free bilinear sampling (boxes mapped to grid
units by dividing by the pyramid stride, clipped, never rejected unless they
collapse to zero area) and average-pooled to one vector per box. Gradients
flow from pooled vectors back to pyramid values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sampling
from .boxes import Detection, DetectionSet
from .encoders import FeatureGrid
from .tensor import Tensor, bilinear_sample, concat


class PyramidError(ValueError):
    """The stage list cannot form a valid pyramid."""


class DegenerateBoxError(ValueError):
    """A box has zero area after clipping to the image."""

    def __init__(self, box: Detection, box_index: int | None = None):
        where = f" (box {box_index})" if box_index is not None else ""
        super().__init__(
            f"box ({box.x0:.3f}, {box.y0:.3f}, {box.x1:.3f}, {box.y1:.3f}) "
            f"has zero area after clipping{where}"
        )
        self.box = box
        self.box_index = box_index


@dataclass
class MultiScalePyramid:
    """All stages upsampled to stride 4 and concatenated along channels.

    ``image_height``/``image_width`` name the coordinate frame boxes live in
    (the original image); when that frame equals the encoder input, mapping a
    box onto the grid is exactly a division by the stride.
    """

    grid: np.ndarray  # [H/4, W/4, sum of stage widths]
    image_height: int
    image_width: int
    stride: int = 4

    @property
    def channels(self) -> int:
        return self.grid.shape[2]


def build_pyramid(
    stages: list[FeatureGrid],
    expected_strides: tuple[int, ...] | None = None,
    image_height: int | None = None,
    image_width: int | None = None,
) -> MultiScalePyramid:
    """Upsample every stage to the stride-4 extent and concat in stride order.

    Pass the original image extent when it differs from the encoder input
    (boxes are expressed in original pixels and must land on this grid).
    """
    if not stages:
        raise PyramidError("no stages given")
    if expected_strides is not None:
        have = sorted(g.stride for g in stages)
        want = sorted(expected_strides)
        if have != want:
            missing = sorted(set(want) - set(have))
            raise PyramidError(f"missing stages at strides {missing}: have {have}, expect {want}")
    ordered = sorted(stages, key=lambda g: g.stride)
    for g in ordered:
        if g.layout != "spatial":
            raise PyramidError(f"stage at stride {g.stride} must be spatial, got {g.layout}")
    extents = {g.stride * g.tokens.shape[0] for g in ordered}
    extents |= {g.stride * g.tokens.shape[1] for g in ordered}
    if len(extents) != 1:
        raise PyramidError(f"stages disagree on source image extent: {sorted(extents)}")
    image_extent = extents.pop()
    if image_extent % 4 != 0:
        raise PyramidError(f"image extent {image_extent} is not divisible by the pyramid stride 4")
    out_side = image_extent // 4
    planes = []
    for g in ordered:
        if g.tokens.shape[0] == out_side:
            planes.append(g.tokens)
        else:
            planes.append(sampling.resize(g.tokens, out_side, out_side))
    grid = np.concatenate(planes, axis=2)
    return MultiScalePyramid(
        grid=grid,
        image_height=image_height if image_height is not None else image_extent,
        image_width=image_width if image_width is not None else image_extent,
    )


@dataclass(frozen=True)
class RoiConfig:
    bins: tuple[int, int] = (7, 7)
    samples_per_bin: int = 2


def _clip_box_to_grid(pyramid: MultiScalePyramid, box: Detection) -> tuple[float, float, float, float]:
    gh, gw = pyramid.grid.shape[0], pyramid.grid.shape[1]
    sx = gw / float(pyramid.image_width)
    sy = gh / float(pyramid.image_height)
    x0 = min(max(box.x0 * sx, 0.0), float(gw))
    y0 = min(max(box.y0 * sy, 0.0), float(gh))
    x1 = min(max(box.x1 * sx, 0.0), float(gw))
    y1 = min(max(box.y1 * sy, 0.0), float(gh))
    return x0, y0, x1, y1


def roi_align(
    pyramid: MultiScalePyramid,
    box: Detection,
    cfg: RoiConfig = RoiConfig(),
    grid_tensor: Tensor | None = None,
) -> Tensor:
    """Continuous per-bin sampling of the pyramid under one box -> [b_h, b_w, C].

    Each bin averages samples_per_bin^2 bilinear reads at regularly spaced
    interior points; box edges are never quantized. Pass ``grid_tensor`` to
    reuse a tracked wrapper of ``pyramid.grid`` (e.g. during gradient checks).
    """
    x0, y0, x1, y1 = _clip_box_to_grid(pyramid, box)
    if x1 <= x0 or y1 <= y0:
        raise DegenerateBoxError(box)
    b_h, b_w = cfg.bins
    s = cfg.samples_per_bin
    points = sampling.box_sample_points(x0, y0, x1, y1, (b_h, b_w), s)
    grid = grid_tensor if grid_tensor is not None else Tensor(pyramid.grid)
    sampled = bilinear_sample(grid, points)  # [b_h*b_w*s*s, C]
    per_bin = sampled.reshape(b_h, b_w, s * s, pyramid.channels)
    return per_bin.mean(axis=2)


@dataclass
class ObjectFeatureSet:
    """One pooled row per surviving box, rows in detection order."""

    features: Tensor  # [k, C]

    @property
    def k(self) -> int:
        return self.features.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]


def extract_object_features(
    pyramid: MultiScalePyramid,
    dets: DetectionSet,
    cfg: RoiConfig = RoiConfig(),
    grid_tensor: Tensor | None = None,
) -> ObjectFeatureSet:
    """RoI-align each box then average-pool to a single vector per box."""
    c = pyramid.channels
    if len(dets) == 0:
        return ObjectFeatureSet(features=Tensor(np.zeros((0, c))))
    grid = grid_tensor if grid_tensor is not None else Tensor(pyramid.grid)
    rows = []
    for i, det in enumerate(dets.detections):
        try:
            aligned = roi_align(pyramid, det, cfg, grid_tensor=grid)
        except DegenerateBoxError as exc:
            raise DegenerateBoxError(exc.box, box_index=i) from exc
        rows.append(aligned.mean(axis=(0, 1)).reshape(1, c))
    return ObjectFeatureSet(features=concat(rows, axis=0))
