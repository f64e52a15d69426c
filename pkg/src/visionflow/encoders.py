"""Deterministic frozen stand-ins for the two vision encoders and the text embedder.

The low-resolution branch patch-pools at stride 14 and applies a fixed seeded
linear map; the high-resolution branch is a fixed seeded 4-stage strided
patch-conv stack with tanh, emitting grids at strides 4, 8, 16 and 32. Both
are pure functions of (image, config): no weight is ever trained, so all
downstream tests are reproducible without model downloads.

Also hosts the seeded procedural scene generator (colored rectangles on
noise) whose descriptors double as detection ground truth.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import rng, sampling

# Mix of detector-vocabulary names and novel ones, so restricting the tag
# list (fixed COCO-style tags vs scene ground truth) visibly drops boxes.
LABEL_POOL = (
    "person", "car", "dog", "cat", "chair", "bottle", "bicycle", "bird",
    "widget", "gadget", "sprocket", "flange", "crate", "beacon", "pylon", "gnome",
)


class EncoderConfigError(ValueError):
    """An encoder configuration violates a structural constraint."""


@dataclass(frozen=True)
class EncoderConfig:
    """Resolutions, strides and channel widths for the two vision branches."""

    low_res: int = 336
    high_res: int = 768
    stride_low: int = 14
    stride_high: int = 32
    channels_low: int = 32
    channels_high: int = 48
    stage_channels: tuple[int, ...] = (8, 16, 32, 48)
    seed: int = 0

    def __post_init__(self):
        if self.low_res <= 0 or self.high_res <= 0:
            raise EncoderConfigError("resolutions must be positive")
        if self.low_res % self.stride_low != 0:
            raise EncoderConfigError(
                f"low_res {self.low_res} not divisible by stride {self.stride_low}"
            )
        if self.high_res % self.stride_high != 0:
            raise EncoderConfigError(
                f"high_res {self.high_res} not divisible by stride {self.stride_high}"
            )
        low_side = self.low_res // self.stride_low
        high_side = self.high_res // self.stride_high
        if low_side != high_side:
            raise EncoderConfigError(
                "token-count equality violated: "
                f"(low_res/{self.stride_low})^2 = {low_side ** 2} but "
                f"(high_res/{self.stride_high})^2 = {high_side ** 2}"
            )
        if len(self.stage_channels) != 4:
            raise EncoderConfigError("high-res encoder has exactly four stages")
        if self.stage_channels[-1] != self.channels_high:
            raise EncoderConfigError(
                f"final stage width {self.stage_channels[-1]} must equal channels_high {self.channels_high}"
            )
        if self.high_res % 32 != 0:
            raise EncoderConfigError("high_res must be divisible by the deepest stage stride 32")

    @classmethod
    def adjusted(cls, low_res: int, high_res: int, **kwargs) -> EncoderConfig:
        """Snap nominal resolutions so both branches emit the same token count.

        The low resolution is rounded to the nearest stride-14 multiple; the
        high resolution is then forced to tokens_per_side * 32, whatever was
        requested (e.g. nominal 224/448 becomes effective 224/512).
        """
        stride_low = kwargs.get("stride_low", 14)
        stride_high = kwargs.get("stride_high", 32)
        side = max(1, round(low_res / stride_low))
        return cls(low_res=side * stride_low, high_res=side * stride_high, **kwargs)

    @property
    def tokens_per_side(self) -> int:
        return self.low_res // self.stride_low

    @property
    def num_tokens(self) -> int:
        return self.tokens_per_side ** 2

    @property
    def stage_strides(self) -> tuple[int, ...]:
        return (4, 8, 16, 32)


@dataclass(frozen=True)
class SyntheticImage:
    """Square-or-not RGB image with values in [0, 1]."""

    height: int
    width: int
    data: np.ndarray  # [H, W, 3]

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError("image extents must be positive")
        if self.data.shape != (self.height, self.width, 3):
            raise ValueError(f"image data shape {self.data.shape} != ({self.height}, {self.width}, 3)")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")


@dataclass
class FeatureGrid:
    """Feature tokens with a declared stride and layout."""

    tokens: np.ndarray  # flat [N, C] or spatial [h, w, C]
    stride: int
    layout: str  # "flat" | "spatial"

    def __post_init__(self):
        if self.layout not in ("flat", "spatial"):
            raise ValueError(f"unknown layout {self.layout!r}")
        expected = 2 if self.layout == "flat" else 3
        if self.tokens.ndim != expected:
            raise ValueError(f"{self.layout} grid must have {expected} dims, got {self.tokens.ndim}")

    @property
    def num_tokens(self) -> int:
        if self.layout == "flat":
            return self.tokens.shape[0]
        return self.tokens.shape[0] * self.tokens.shape[1]

    @property
    def channels(self) -> int:
        return self.tokens.shape[-1]

    def flat(self) -> np.ndarray:
        """Row-major flattened tokens [N, C]."""
        if self.layout == "flat":
            return self.tokens
        h, w, c = self.tokens.shape
        return self.tokens.reshape(h * w, c)


def resize_image(img: SyntheticImage, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear square resize with the shared corner convention, no antialias."""
    if img.height == out_h and img.width == out_w:
        return img.data
    return np.clip(sampling.resize(img.data, out_h, out_w), 0.0, 1.0)


class LowResEncoder:
    """Patch-mean pooling at stride 14 followed by a fixed seeded linear map."""

    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg
        gen = rng.stream(cfg.seed, "encoder.low")
        self.weight = gen.normal(0.0, 0.8, size=(3, cfg.channels_low))
        self.bias = gen.normal(0.0, 0.2, size=(cfg.channels_low,))

    def encode(self, img: SyntheticImage) -> FeatureGrid:
        cfg = self.cfg
        pixels = resize_image(img, cfg.low_res, cfg.low_res)
        side = cfg.tokens_per_side
        s = cfg.stride_low
        patches = pixels.reshape(side, s, side, s, 3).mean(axis=(1, 3))
        tokens = patches.reshape(side * side, 3) @ self.weight + self.bias
        return FeatureGrid(tokens=tokens, stride=cfg.stride_low, layout="flat")


class HighResEncoder:
    """Fixed seeded 4-stage strided patch-conv stack, strides 4/8/16/32."""

    STAGE_FACTORS = (4, 2, 2, 2)

    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        in_ch = 3
        for i, (k, out_ch) in enumerate(zip(self.STAGE_FACTORS, cfg.stage_channels)):
            gen = rng.stream(cfg.seed, f"encoder.high.stage{i}")
            fan_in = in_ch * k * k
            self.weights.append(gen.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, out_ch)))
            self.biases.append(gen.normal(0.0, 0.05, size=(out_ch,)))
            in_ch = out_ch

    def encode(self, img: SyntheticImage) -> list[FeatureGrid]:
        cfg = self.cfg
        x = resize_image(img, cfg.high_res, cfg.high_res)
        grids: list[FeatureGrid] = []
        stride = 1
        for i, k in enumerate(self.STAGE_FACTORS):
            h, w, c = x.shape
            hh, ww = h // k, w // k
            patches = x.reshape(hh, k, ww, k, c).transpose(0, 2, 1, 3, 4).reshape(hh, ww, k * k * c)
            x = np.tanh(patches @ self.weights[i] + self.biases[i])
            stride *= k
            grids.append(FeatureGrid(tokens=x, stride=stride, layout="spatial"))
        return grids


class TextEmbedder:
    """Seeded fixed embedding-table lookup; the frozen text-input stub."""

    def __init__(self, vocab_size: int, dim: int, seed: int):
        self.vocab_size = vocab_size
        self.dim = dim
        self.table = rng.stream(seed, "encoder.text").normal(0.0, 0.5, size=(vocab_size, dim))

    def embed(self, token_ids: list[int]) -> np.ndarray:
        ids = np.asarray(list(token_ids), dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ValueError(f"token id out of vocab [0, {self.vocab_size})")
        if ids.size == 0:
            return np.zeros((0, self.dim), dtype=np.float64)
        return self.table[ids]


# -- procedural scenes ---------------------------------------------------------


@dataclass(frozen=True)
class ObjectSpec:
    x0: float
    y0: float
    x1: float
    y1: float
    label: str


@dataclass(frozen=True)
class SceneDescriptor:
    """Ground truth for one synthetic image: seed, extent, placed objects."""

    seed: int
    height: int = 256
    width: int = 256
    objects: tuple[ObjectSpec, ...] = field(default_factory=tuple)

    @property
    def image_id(self) -> str:
        return f"scene-{self.seed:08d}"

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "height": self.height,
            "width": self.width,
            "objects": [
                {"x0": o.x0, "y0": o.y0, "x1": o.x1, "y1": o.y1, "label": o.label}
                for o in self.objects
            ],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> SceneDescriptor:
        objects = tuple(
            ObjectSpec(float(o["x0"]), float(o["y0"]), float(o["x1"]), float(o["y1"]), str(o["label"]))
            for o in obj.get("objects", [])
        )
        return cls(
            seed=int(obj["seed"]),
            height=int(obj.get("height", 256)),
            width=int(obj.get("width", 256)),
            objects=objects,
        )


def _boxes_overlap(a: ObjectSpec, b: ObjectSpec) -> float:
    ix = max(0.0, min(a.x1, b.x1) - max(a.x0, b.x0))
    iy = max(0.0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    area_a = (a.x1 - a.x0) * (a.y1 - a.y0)
    area_b = (b.x1 - b.x0) * (b.y1 - b.y0)
    return inter / (area_a + area_b - inter)


def generate_scene(
    seed: int,
    n_objects: int = 3,
    height: int = 256,
    width: int = 256,
    label_pool: tuple[str, ...] = LABEL_POOL,
) -> SceneDescriptor:
    """Seeded scene with well-separated rectangles and distinct labels."""
    if n_objects > len(label_pool):
        raise ValueError(f"at most {len(label_pool)} objects per scene")
    gen = rng.stream(seed, "scene.layout")
    labels = list(gen.choice(len(label_pool), size=n_objects, replace=False))
    objects: list[ObjectSpec] = []
    for li in labels:
        for _ in range(200):
            w = gen.uniform(0.12, 0.38) * width
            h = gen.uniform(0.12, 0.38) * height
            x0 = gen.uniform(0.0, width - w)
            y0 = gen.uniform(0.0, height - h)
            candidate = ObjectSpec(x0, y0, x0 + w, y0 + h, label_pool[li])
            if all(_boxes_overlap(candidate, o) <= 0.15 for o in objects):
                objects.append(candidate)
                break
        else:
            # crowded scene: accept the last candidate anyway
            objects.append(candidate)
    return SceneDescriptor(seed=seed, height=height, width=width, objects=tuple(objects))


def _label_color(label: str) -> np.ndarray:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return 0.25 + 0.7 * np.array([digest[0], digest[1], digest[2]]) / 255.0


def render_scene(desc: SceneDescriptor) -> SyntheticImage:
    """Render colored rectangles over low-amplitude noise, values in [0, 1]."""
    gen = rng.stream(desc.seed, "scene.render")
    canvas = 0.15 * gen.random((desc.height, desc.width, 3))
    for obj in desc.objects:
        x0, y0 = int(round(obj.x0)), int(round(obj.y0))
        x1, y1 = int(round(obj.x1)), int(round(obj.y1))
        color = _label_color(obj.label)
        canvas[y0:y1, x0:x1] = color + 0.05 * gen.random((max(0, y1 - y0), max(0, x1 - x0), 3))
    return SyntheticImage(desc.height, desc.width, np.clip(canvas, 0.0, 1.0))


def load_descriptor(path: str) -> SceneDescriptor:
    with open(path, "r", encoding="utf-8") as fh:
        return SceneDescriptor.from_dict(json.load(fh))


def save_descriptor(desc: SceneDescriptor, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(desc.to_dict(), fh, indent=2)
