"""Synthetic encoders: token counts, stage strides, determinism, the
resolution adjuster, the shared resize convention, and scene generation."""

import numpy as np
import pytest

from visionflow import rng, sampling
from visionflow.encoders import (
    EncoderConfig,
    EncoderConfigError,
    HighResEncoder,
    LowResEncoder,
    SceneDescriptor,
    SyntheticImage,
    TextEmbedder,
    generate_scene,
    render_scene,
)


def small_cfg(seed=0):
    return EncoderConfig(low_res=56, high_res=128, channels_low=6, channels_high=8,
                         stage_channels=(2, 3, 4, 8), seed=seed)


def zero_image(h=64, w=64):
    return SyntheticImage(h, w, np.zeros((h, w, 3)))


def test_default_config_yields_576_tokens():
    cfg = EncoderConfig()
    assert cfg.num_tokens == 576
    assert cfg.low_res // cfg.stride_low == cfg.high_res // cfg.stride_high == 24


def test_encode_low_token_count_and_shape():
    cfg = EncoderConfig()
    grid = LowResEncoder(cfg).encode(zero_image(100, 100))
    assert grid.tokens.shape == (576, cfg.channels_low)
    assert grid.stride == 14
    assert grid.layout == "flat"


def test_encode_low_zero_image_zero_bias_gives_zeros():
    enc = LowResEncoder(small_cfg())
    enc.bias[:] = 0.0
    grid = enc.encode(zero_image())
    np.testing.assert_array_equal(grid.tokens, 0.0)


def test_encoders_are_pure_and_seeded():
    cfg = small_cfg(seed=3)
    scene = generate_scene(11, n_objects=2)
    img = render_scene(scene)
    a = LowResEncoder(cfg).encode(img).tokens
    b = LowResEncoder(cfg).encode(img).tokens
    assert a.tobytes() == b.tobytes()
    other = LowResEncoder(small_cfg(seed=4)).encode(img).tokens
    assert a.tobytes() != other.tobytes()


def test_encode_high_stage_strides_and_extents():
    cfg = small_cfg()
    stages = HighResEncoder(cfg).encode(zero_image())
    assert [g.stride for g in stages] == [4, 8, 16, 32]
    for g in stages:
        assert g.tokens.shape[0] == cfg.high_res // g.stride
        assert g.tokens.shape[1] == cfg.high_res // g.stride
    assert stages[-1].num_tokens == cfg.num_tokens  # equality with the low branch


def test_encode_high_default_config_final_stage_24x24():
    cfg = EncoderConfig()  # 768 input, stride 32
    stages = HighResEncoder(cfg).encode(zero_image(32, 32))
    assert stages[-1].tokens.shape[:2] == (24, 24)
    assert stages[-1].num_tokens == 576


def test_encode_high_zero_image_zero_biases():
    cfg = small_cfg()
    enc = HighResEncoder(cfg)
    for b in enc.biases:
        b[:] = 0.0
    for g in enc.encode(zero_image()):
        np.testing.assert_array_equal(g.tokens, 0.0)


def test_high_stage_channels_follow_config():
    cfg = small_cfg()
    stages = HighResEncoder(cfg).encode(zero_image())
    assert tuple(g.channels for g in stages) == cfg.stage_channels


def test_adjuster_snaps_resolutions():
    cfg = EncoderConfig.adjusted(224, 448, channels_low=4, channels_high=4,
                                 stage_channels=(2, 2, 2, 4))
    assert (cfg.low_res, cfg.high_res) == (224, 512)  # 448 violates equality
    assert cfg.num_tokens == 256
    cfg2 = EncoderConfig.adjusted(336, 768, channels_low=4, channels_high=4,
                                  stage_channels=(2, 2, 2, 4))
    assert (cfg2.low_res, cfg2.high_res) == (336, 768)


def test_config_rejects_token_inequality_naming_constraint():
    with pytest.raises(EncoderConfigError, match="token-count equality"):
        EncoderConfig(low_res=224, high_res=448)


def test_config_rejects_indivisible_resolution():
    with pytest.raises(EncoderConfigError, match="not divisible"):
        EncoderConfig(low_res=100, high_res=768)


def test_embed_text_empty_and_lookup():
    emb = TextEmbedder(vocab_size=16, dim=8, seed=0)
    assert emb.embed([]).shape == (0, 8)
    rows = emb.embed([3, 3, 5])
    np.testing.assert_array_equal(rows[0], rows[1])
    with pytest.raises(ValueError, match="vocab"):
        emb.embed([16])


def test_embed_text_seed_changes_table():
    a = TextEmbedder(16, 8, seed=0).embed([0, 1, 2])
    b = TextEmbedder(16, 8, seed=1).embed([0, 1, 2])
    assert a.tobytes() != b.tobytes()


def test_resize_matches_naive_per_pixel_oracle():
    from visionflow.verify import naive_bilinear

    gen = rng.stream(0, "test.resize")
    src = gen.normal(size=(5, 7, 2))
    out = sampling.resize(src, 9, 4)
    for i in range(9):
        for j in range(4):
            y = (i + 0.5) * 5 / 9
            x = (j + 0.5) * 7 / 4
            np.testing.assert_allclose(out[i, j], naive_bilinear(src, y, x), atol=1e-12)


def test_resize_of_constant_is_constant():
    out = sampling.resize(np.full((6, 6, 3), 2.5), 11, 13)
    np.testing.assert_allclose(out, 2.5)


def test_scene_descriptor_roundtrip():
    scene = generate_scene(42, n_objects=3)
    back = SceneDescriptor.from_dict(scene.to_dict())
    assert back == scene
    assert back.image_id == "scene-00000042"


def test_scene_labels_distinct_and_render_in_range():
    scene = generate_scene(5, n_objects=4)
    labels = [o.label for o in scene.objects]
    assert len(set(labels)) == len(labels)
    img = render_scene(scene)
    assert img.data.min() >= 0.0 and img.data.max() <= 1.0
    again = render_scene(scene)
    assert img.data.tobytes() == again.data.tobytes()
