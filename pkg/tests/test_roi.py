"""Pyramid assembly and box feature extraction: upsample oracle, sampling
oracle, constant/convexity properties, ordering, and gradient flow."""

import numpy as np
import pytest

from visionflow import rng
from visionflow.boxes import Detection, DetectionSet
from visionflow.encoders import FeatureGrid
from visionflow.roi import (
    DegenerateBoxError,
    MultiScalePyramid,
    PyramidError,
    RoiConfig,
    build_pyramid,
    extract_object_features,
    roi_align,
)
from visionflow.tensor import Tensor
from visionflow.verify import fd_check, naive_bilinear, naive_roi_align


def spatial(tokens, stride):
    return FeatureGrid(tokens=tokens, stride=stride, layout="spatial")


def random_stages(gen, extent=64, widths=(2, 3, 4, 5)):
    return [
        spatial(gen.normal(size=(extent // s, extent // s, c)), s)
        for s, c in zip((4, 8, 16, 32), widths)
    ]


def test_single_stage_pyramid_is_identity():
    gen = rng.stream(0, "test.pyr.single")
    stage = spatial(gen.normal(size=(8, 8, 3)), 4)
    pyr = build_pyramid([stage])
    np.testing.assert_array_equal(pyr.grid, stage.tokens)
    assert (pyr.image_height, pyr.image_width) == (32, 32)


def test_constant_stages_give_constant_pyramid():
    stages = [spatial(np.full((32 // s, 32 // s, c), 1.5), s)
              for s, c in zip((4, 8, 16, 32), (2, 3, 4, 5))]
    pyr = build_pyramid(stages)
    assert pyr.grid.shape == (8, 8, 14)  # channels sum across stages
    np.testing.assert_allclose(pyr.grid, 1.5)


def test_pyramid_matches_naive_bilinear_oracle():
    gen = rng.stream(1, "test.pyr.oracle")
    stages = random_stages(gen)
    pyr = build_pyramid(stages)
    out_side = 16
    offset = 0
    for g in sorted(stages, key=lambda s: s.stride):
        h = g.tokens.shape[0]
        for i in range(out_side):
            for j in range(out_side):
                y = (i + 0.5) * h / out_side
                x = (j + 0.5) * h / out_side
                want = naive_bilinear(g.tokens, y, x)
                got = pyr.grid[i, j, offset: offset + g.channels]
                np.testing.assert_allclose(got, want, atol=1e-12)
        offset += g.channels


def test_pyramid_missing_stage_errors():
    gen = rng.stream(2, "test.pyr.missing")
    stages = random_stages(gen)[:3]
    with pytest.raises(PyramidError, match=r"missing stages at strides \[32\]"):
        build_pyramid(stages, expected_strides=(4, 8, 16, 32))


def test_pyramid_inconsistent_extents_error():
    a = spatial(np.zeros((8, 8, 2)), 4)
    b = spatial(np.zeros((8, 8, 2)), 8)  # implies a 64-pixel image, not 32
    with pytest.raises(PyramidError, match="extent"):
        build_pyramid([a, b])


def constant_pyramid(value, side=8, channels=3):
    return MultiScalePyramid(grid=np.full((side, side, channels), float(value)),
                             image_height=side * 4, image_width=side * 4)


def test_roi_align_constant_map():
    pyr = constant_pyramid(2.25)
    out = roi_align(pyr, Detection(3.0, 5.0, 27.0, 30.0, 0.9, "x"),
                    RoiConfig(bins=(7, 7), samples_per_bin=2))
    assert out.shape == (7, 7, 3)
    np.testing.assert_allclose(out.data, 2.25, atol=1e-12)


def test_roi_align_single_cell_center_sample():
    gen = rng.stream(3, "test.roi.cell")
    grid = gen.normal(size=(6, 6, 2))
    pyr = MultiScalePyramid(grid=grid, image_height=24, image_width=24)
    # box covering exactly cell (2, 4): pixels [16, 20) x [8, 12)
    det = Detection(16.0, 8.0, 20.0, 12.0, 0.9, "x")
    out = roi_align(pyr, det, RoiConfig(bins=(1, 1), samples_per_bin=1))
    np.testing.assert_allclose(out.data[0, 0], grid[2, 4], atol=1e-12)


@pytest.mark.parametrize("pair", range(25))
def test_roi_align_matches_naive_sampler(pair):
    gen = rng.stream(pair, "test.roi.oracle")
    h, w = int(gen.integers(4, 12)), int(gen.integers(4, 12))
    grid = gen.normal(size=(h, w, int(gen.integers(1, 5))))
    pyr = MultiScalePyramid(grid=grid, image_height=h * 4, image_width=w * 4)
    x0 = float(gen.uniform(0, w * 2)); y0 = float(gen.uniform(0, h * 2))
    x1 = float(min(x0 + gen.uniform(1, w * 2), w * 4))
    y1 = float(min(y0 + gen.uniform(1, h * 2), h * 4))
    bins = (int(gen.integers(1, 5)), int(gen.integers(1, 5)))
    s = int(gen.integers(1, 4))
    got = roi_align(pyr, Detection(x0, y0, x1, y1, 0.9, "x"),
                    RoiConfig(bins=bins, samples_per_bin=s)).data
    want = naive_roi_align(grid, (x0 / 4, y0 / 4, x1 / 4, y1 / 4), bins, s)
    np.testing.assert_allclose(got, want, atol=1e-9)


def test_roi_align_clips_but_never_rejects_partial_boxes():
    pyr = constant_pyramid(1.0)
    out = roi_align(pyr, Detection(-10.0, -10.0, 5.0, 5.0, 0.9, "x"))
    np.testing.assert_allclose(out.data, 1.0)


def test_roi_align_degenerate_box_error():
    pyr = constant_pyramid(1.0, side=8)  # image is 32x32
    fully_outside = Detection(40.0, 40.0, 50.0, 50.0, 0.9, "x")
    with pytest.raises(DegenerateBoxError):
        roi_align(pyr, fully_outside)


def test_extract_empty_detection_set():
    pyr = constant_pyramid(1.0)
    out = extract_object_features(pyr, DetectionSet("img", []))
    assert out.features.shape == (0, 3)
    assert out.k == 0


def test_extract_full_image_box_on_constant_pyramid():
    pyr = constant_pyramid(3.5)
    dets = DetectionSet("img", [Detection(0.0, 0.0, 32.0, 32.0, 0.9, "x")])
    out = extract_object_features(pyr, dets)
    assert out.features.shape == (1, 3)
    np.testing.assert_allclose(out.features.data, 3.5, atol=1e-12)


def test_extract_rows_match_per_box_oracle_and_order():
    gen = rng.stream(4, "test.roi.rows")
    grid = gen.normal(size=(10, 10, 4))
    pyr = MultiScalePyramid(grid=grid, image_height=40, image_width=40)
    dets = []
    for _ in range(5):
        x0 = float(gen.uniform(0, 20)); y0 = float(gen.uniform(0, 20))
        dets.append(Detection(x0, y0, x0 + float(gen.uniform(2, 18)),
                              y0 + float(gen.uniform(2, 18)), 0.9, "x"))
    cfg = RoiConfig(bins=(3, 3), samples_per_bin=2)
    out = extract_object_features(pyr, DetectionSet("img", dets), cfg)
    for i, det in enumerate(dets):
        x0, y0 = max(det.x0, 0) / 4, max(det.y0, 0) / 4
        x1, y1 = min(det.x1, 40) / 4, min(det.y1, 40) / 4
        want = naive_roi_align(grid, (x0, y0, x1, y1), (3, 3), 2).mean(axis=(0, 1))
        np.testing.assert_allclose(out.features.data[i], want, atol=1e-9)


def test_extract_degenerate_box_reports_index():
    pyr = constant_pyramid(1.0, side=8)
    dets = DetectionSet("img", [
        Detection(0.0, 0.0, 8.0, 8.0, 0.9, "x"),
        Detection(40.0, 40.0, 50.0, 50.0, 0.8, "x"),
    ])
    with pytest.raises(DegenerateBoxError, match=r"box 1"):
        extract_object_features(pyr, dets)


def test_translation_consistency_on_tiled_pyramid():
    # over a periodic pyramid, shifting a box by exactly one grid cell
    # (4 pixels) permutes the sampled values, leaving the pooled mean unchanged
    gen = rng.stream(5, "test.roi.shift")
    tile = gen.normal(size=(4, 4, 2))
    grid = np.tile(tile, (4, 4, 1))  # 16x16 grid, period 4 cells
    pyr = MultiScalePyramid(grid=grid, image_height=64, image_width=64)
    cfg = RoiConfig(bins=(2, 2), samples_per_bin=2)
    base = Detection(5.0, 9.0, 21.0, 25.0, 0.9, "x")
    moved = Detection(base.x0 + 16.0, base.y0 + 16.0, base.x1 + 16.0, base.y1 + 16.0, 0.9, "x")
    a = roi_align(pyr, base, cfg).data
    b = roi_align(pyr, moved, cfg).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_pooled_features_respect_convex_bounds():
    gen = rng.stream(6, "test.roi.bounds")
    grid = gen.normal(size=(9, 9, 3))
    pyr = MultiScalePyramid(grid=grid, image_height=36, image_width=36)
    dets = DetectionSet("img", [Detection(2.0, 3.0, 30.0, 33.0, 0.9, "x")])
    out = extract_object_features(pyr, dets)
    assert np.all(out.features.data <= grid.max() + 1e-12)
    assert np.all(out.features.data >= grid.min() - 1e-12)


def test_gradients_flow_to_pyramid_values():
    gen = rng.stream(7, "test.roi.grad")
    leaf = Tensor(gen.normal(size=(6, 6, 2)), requires_grad=True)
    pyr = MultiScalePyramid(grid=leaf.data, image_height=24, image_width=24)
    dets = DetectionSet("img", [
        Detection(1.0, 2.0, 15.0, 18.0, 0.9, "x"),
        Detection(6.0, 6.0, 22.0, 23.0, 0.8, "x"),
    ])
    weights = Tensor(gen.normal(size=(2, 2)))

    def loss_fn():
        feats = extract_object_features(pyr, dets, RoiConfig(bins=(2, 2), samples_per_bin=2),
                                        grid_tensor=leaf)
        return (feats.features * weights).sum()

    errors = fd_check(loss_fn, [("pyramid", leaf)], gen, max_coords=20)
    assert errors["pyramid"] < 1e-4
