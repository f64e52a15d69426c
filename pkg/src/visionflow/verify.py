"""Independent oracles and the invariant battery behind `visionflow verify`.

Each oracle re-implements its target's definition along a different path
(pure-Python greedy suppression, nested-loop bilinear sampling, central
finite differences) so a shared bug cannot hide. Suites report one named
check per property; `inject_fault` deliberately perturbs one analytic
gradient to prove the battery can fail.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng
from .assembly import assemble, assemble_video, score_answer
from .boxes import Detection, nms_indices
from .config import RunConfig, config_from_dict
from .datagen import generate_dataset, small_training_config
from .encoders import EncoderConfig, generate_scene, render_scene
from .fusion import fuse
from .pipeline import build_components, prepare_sample, run_image, scene_boxes
from .roi import MultiScalePyramid, RoiConfig, build_pyramid, roi_align
from .tensor import Tensor, affine, bilinear_sample, concat, conv1d, one_hot
from .training import PreparedSample, TrainConfig, train_two_stage

FD_TOLERANCE = 1e-4
FD_STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class SuiteResult:
    name: str
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, passed: bool, detail: str = "") -> None:
        self.checks.append(CheckResult(name, passed, detail))


# -- finite differences ---------------------------------------------------------


def numeric_gradient(f: Callable[[], float], t: Tensor, coords: list[tuple], h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of f with respect to t.data at coords."""
    out = np.empty(len(coords))
    for n, idx in enumerate(coords):
        orig = t.data[idx]
        t.data[idx] = orig + h
        up = f()
        t.data[idx] = orig - h
        down = f()
        t.data[idx] = orig
        out[n] = (up - down) / (2.0 * h)
    return out


def relative_error(analytic: np.ndarray, fd: np.ndarray) -> float:
    """Max elementwise |a - fd| / max(|a|, |fd|, 1e-3)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-3)
    return float(np.max(np.abs(analytic - fd) / denom)) if analytic.size else 0.0


def fd_check(
    loss_fn: Callable[[], Tensor],
    params: list[tuple[str, Tensor]],
    gen: np.random.Generator,
    max_coords: int = 16,
    h: float = FD_STEP,
    perturb: str | None = None,
) -> dict[str, float]:
    """Compare analytic grads of loss_fn against central differences.

    Returns max relative error per named parameter. ``perturb`` names one
    parameter whose analytic gradient is corrupted (fault-injection hook).
    """
    for _, t in params:
        t.zero_grad()
    loss = loss_fn()
    loss.backward()
    errors: dict[str, float] = {}
    for name, t in params:
        analytic_full = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat_indices = np.arange(t.size)
        if t.size > max_coords:
            flat_indices = gen.choice(t.size, size=max_coords, replace=False)
        coords = [np.unravel_index(i, t.shape) for i in sorted(flat_indices)]
        analytic = np.array([analytic_full[c] for c in coords])
        if perturb == name and analytic.size:
            analytic = analytic + 0.5
        fd = numeric_gradient(lambda: loss_fn().item(), t, coords, h=h)
        errors[name] = relative_error(analytic, fd)
    return errors


# -- independent oracles ----------------------------------------------------------


def naive_nms(dets: list[Detection], iou_threshold: float, class_aware: bool = True) -> list[int]:
    """Greedy suppression written directly from the definition, no numpy."""
    order = sorted(range(len(dets)),
                   key=lambda i: (-dets[i].score, dets[i].x0, dets[i].y0, i))
    kept: list[int] = []
    for i in order:
        a = dets[i]
        suppressed = False
        for j in kept:
            b = dets[j]
            if class_aware and a.label != b.label:
                continue
            ix = min(a.x1, b.x1) - max(a.x0, b.x0)
            iy = min(a.y1, b.y1) - max(a.y0, b.y0)
            if ix <= 0.0 or iy <= 0.0:
                continue
            inter = ix * iy
            area_a = (a.x1 - a.x0) * (a.y1 - a.y0)
            area_b = (b.x1 - b.x0) * (b.y1 - b.y0)
            if inter / (area_a + area_b - inter) > iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(i)
    return kept


def naive_bilinear(grid: np.ndarray, y: float, x: float) -> np.ndarray:
    """Scalar-path bilinear read; same documented convention, separate code."""
    h, w = grid.shape[0], grid.shape[1]
    py = min(max(y - 0.5, 0.0), float(h - 1))
    px = min(max(x - 0.5, 0.0), float(w - 1))
    i0 = min(int(math.floor(py)), h - 1)
    j0 = min(int(math.floor(px)), w - 1)
    i1 = min(i0 + 1, h - 1)
    j1 = min(j0 + 1, w - 1)
    fy = py - i0
    fx = px - j0
    return ((1 - fy) * (1 - fx) * grid[i0, j0] + (1 - fy) * fx * grid[i0, j1]
            + fy * (1 - fx) * grid[i1, j0] + fy * fx * grid[i1, j1])


def naive_roi_align(grid: np.ndarray, box: tuple[float, float, float, float],
                    bins: tuple[int, int], samples: int) -> np.ndarray:
    """Nested-loop sampler over (bin, sample) positions; box in grid units."""
    x0, y0, x1, y1 = box
    b_h, b_w = bins
    bin_h = (y1 - y0) / b_h
    bin_w = (x1 - x0) / b_w
    out = np.zeros((b_h, b_w, grid.shape[2]))
    for bi in range(b_h):
        for bj in range(b_w):
            acc = np.zeros(grid.shape[2])
            for si in range(samples):
                for sj in range(samples):
                    y = y0 + bin_h * (bi + (si + 0.5) / samples)
                    x = x0 + bin_w * (bj + (sj + 0.5) / samples)
                    acc += naive_bilinear(grid, y, x)
            out[bi, bj] = acc / (samples * samples)
    return out


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, kk = a.shape
    _, p = b.shape
    out = np.zeros((m, p))
    for i in range(m):
        for j in range(p):
            s = 0.0
            for k in range(kk):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def naive_conv1d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, c_in = x.shape
    c_out, _, k = w.shape
    pad = k // 2
    out = np.zeros((n, c_out))
    for t in range(n):
        for o in range(c_out):
            s = b[o]
            for j in range(k):
                src = t + j - pad
                if 0 <= src < n:
                    for c in range(c_in):
                        s += x[src, c] * w[o, c, j]
            out[t, o] = s
    return out


# -- reusable tiny fixtures --------------------------------------------------------


def tiny_config(seed: int = 0, fusion_strategy: str = "conv_gate",
                merge: str = "concat") -> RunConfig:
    """Smallest valid config: 4 tokens, narrow channels, 2x2 RoI bins."""
    return config_from_dict({
        "seed": seed,
        "encoder": {"low_res": 28, "high_res": 64, "channels_low": 6,
                    "channels_high": 8, "stage_channels": [2, 3, 4, 8]},
        "fusion": {"strategy": fusion_strategy, "channels_low": 6,
                   "channels_high": 8, "gate_channels": 4},
        "roi": {"bins": [2, 2], "samples_per_bin": 2},
        "assembly": {"merge": merge, "model_dim": 10, "vocab_size": 13, "scorer_hidden": 12},
    })


def random_detections(gen: np.random.Generator, n: int, extent: float = 100.0,
                      n_labels: int = 3, tie_fraction: float = 0.0) -> list[Detection]:
    dets = []
    scores = gen.uniform(0.05, 1.0, size=n)
    if tie_fraction > 0 and n > 1:
        # engineered ties: quantize scores so duplicates are common
        ties = max(2, int(1 / tie_fraction))
        scores = np.round(scores * ties) / ties
    for i in range(n):
        x0, y0 = gen.uniform(0, extent * 0.8, size=2)
        w, h = gen.uniform(extent * 0.05, extent * 0.4, size=2)
        dets.append(Detection(float(x0), float(y0), float(min(x0 + w, extent)),
                              float(min(y0 + h, extent)), float(scores[i]),
                              f"label{int(gen.integers(0, n_labels))}"))
    return dets


def full_pipeline_loss_builder(cfg: RunConfig, seed: int):
    """Differentiable closure over (model params + pyramid leaf) for FD checks.

    The frozen side runs for real: a rendered scene goes through both
    encoders and the box pipeline; the pyramid enters as a gradient-tracked
    leaf so the box feature path is part of the check.
    """
    comp = build_components(cfg)
    scene = generate_scene(seed, n_objects=3,
                           height=cfg.encoder.high_res, width=cfg.encoder.high_res)
    img = render_scene(scene)
    dets = scene_boxes(cfg, scene)
    e_low = comp.low_encoder.encode(img).flat()
    stages = comp.high_encoder.encode(img)
    e_high = stages[-1].flat()
    pyramid = build_pyramid(stages, expected_strides=cfg.encoder.stage_strides,
                            image_height=scene.height, image_width=scene.width)
    pyramid_leaf = Tensor(pyramid.grid, requires_grad=True)  # shares the grid array
    gen = rng.stream(seed, "verify.pipeline")
    text_emb = gen.normal(0.0, 1.0, size=(4, cfg.assembly.model_dim))
    answer = [int(v) for v in gen.integers(0, cfg.assembly.vocab_size, size=3)]
    model = comp.model

    def loss_fn() -> Tensor:
        rows = []
        for det in dets.detections:
            aligned = roi_align(pyramid, det, cfg.roi, grid_tensor=pyramid_leaf)
            rows.append(aligned.mean(axis=(0, 1)).reshape(1, pyramid.channels))
        e_objects = concat(rows, axis=0)
        fused = fuse(Tensor(e_low), Tensor(e_high), model.fusion)
        seq = assemble(model.proj_f.apply(fused), model.proj_b.apply(e_objects),
                       Tensor(text_emb), merge=cfg.assembly.merge,
                       merge_params=model.merge, text_first=cfg.assembly.text_first)
        return score_answer(seq, answer, model.scorer)

    params = model.named_tensors() + [("pyramid", pyramid_leaf)]
    return loss_fn, params


# -- suites -----------------------------------------------------------------------


def _op_gradient_cases(gen: np.random.Generator):
    """(name, loss builder, leaf tensors) triples covering every op."""
    def t(shape, scale=1.0, shift=0.0):
        return Tensor(gen.normal(shift, scale, size=shape), requires_grad=True)

    a = t((3, 4))
    b = t((3, 4))
    m1 = t((3, 5))
    m2 = t((5, 2))
    x = t((6, 3))
    w = t((4, 3, 3), scale=0.5)
    bias = t((4,), scale=0.1)
    pos = Tensor(np.abs(gen.normal(2.0, 0.5, size=(3, 4))) + 0.5, requires_grad=True)
    away = Tensor(gen.normal(0.0, 1.0, size=(3, 4)) + np.sign(gen.normal(size=(3, 4))) * 0.2,
                  requires_grad=True)
    grid = t((5, 6, 3))
    points = np.stack([gen.uniform(0.0, 5.0, size=8), gen.uniform(0.0, 6.0, size=8)], axis=1)
    aff_x, aff_w, aff_b = t((4, 3)), t((3, 5)), t((5,))
    row_w = Tensor(gen.normal(size=(4,)))  # constants: weights for reductions
    col_w = Tensor(gen.normal(size=(3,)))

    return [
        ("add", lambda: (a + b).sum(), [("a", a), ("b", b)]),
        ("mul", lambda: (a * b).sum(), [("a", a), ("b", b)]),
        ("neg_sub", lambda: (a - b * 2.0).mean(), [("a", a), ("b", b)]),
        ("matmul", lambda: (m1 @ m2).sum(), [("m1", m1), ("m2", m2)]),
        ("transpose", lambda: (m1.T @ a).sum(), [("m1", m1), ("a", a)]),
        ("conv1d", lambda: conv1d(x, w, bias).sum(), [("x", x), ("w", w), ("bias", bias)]),
        ("sigmoid", lambda: a.sigmoid().sum(), [("a", a)]),
        ("tanh", lambda: a.tanh().sum(), [("a", a)]),
        ("relu", lambda: (away.relu() * b).sum(), [("away", away), ("b", b)]),
        ("log", lambda: pos.log().sum(), [("pos", pos)]),
        ("softmax", lambda: (a.softmax(axis=-1) * b).sum(), [("a", a), ("b", b)]),
        ("log_softmax", lambda: (a.log_softmax(axis=-1) * b).sum(), [("a", a), ("b", b)]),
        ("sum_axis", lambda: (a.sum(axis=0) * row_w).sum(), [("a", a)]),
        ("mean_axis", lambda: (a.mean(axis=1) * col_w).sum(), [("a", a)]),
        ("reshape_narrow", lambda: a.reshape(12, 1).narrow(0, 2, 6).sum(), [("a", a)]),
        ("concat", lambda: concat([a, b], axis=1).mean(), [("a", a), ("b", b)]),
        ("bilinear_sample", lambda: bilinear_sample(grid, points).sum(), [("grid", grid)]),
        ("affine", lambda: affine(aff_x, aff_w, aff_b).sum(),
         [("x", aff_x), ("w", aff_w), ("b", aff_b)]),
        ("onehot_pick", lambda: (one_hot([1, 0, 2], 3) @ a).sum(), [("a", a)]),
    ]


def suite_gradients(instances: int = 20, seed: int = 0, inject_fault: bool = False,
                    strategies: tuple[str, ...] = ("conv_gate",),
                    merges: tuple[str, ...] = ("concat",)) -> SuiteResult:
    suite = SuiteResult("gradients")
    for inst in range(instances):
        gen = rng.stream(seed, f"verify.grad.ops.{inst}")
        worst = 0.0
        worst_name = ""
        for name, loss_fn, params in _op_gradient_cases(gen):
            errors = fd_check(loss_fn, params, gen)
            for pname, err in errors.items():
                if err > worst:
                    worst, worst_name = err, f"{name}/{pname}"
        suite.add(f"ops_instance_{inst}", worst < FD_TOLERANCE,
                  f"max rel err {worst:.3g} at {worst_name}")
    inst = 0
    for strategy in strategies:
        for merge in merges:
            for rep in range(max(1, instances // (len(strategies) * len(merges)))):
                cfg = tiny_config(seed=seed + 101 + inst, fusion_strategy=strategy, merge=merge)
                loss_fn, params = full_pipeline_loss_builder(cfg, seed + inst)
                gen = rng.stream(seed, f"verify.grad.pipe.{inst}")
                perturb = params[0][0] if (inject_fault and inst == 0) else None
                errors = fd_check(loss_fn, params, gen, max_coords=6, perturb=perturb)
                worst_name, worst = max(errors.items(), key=lambda kv: kv[1])
                suite.add(f"pipeline_{strategy}_{merge}_{rep}", worst < FD_TOLERANCE,
                          f"max rel err {worst:.3g} at {worst_name}")
                inst += 1
    return suite


def suite_nms(trials: int = 1000, max_boxes: int = 200, seed: int = 0) -> SuiteResult:
    suite = SuiteResult("nms")
    mismatches = 0
    first = ""
    for trial in range(trials):
        gen = rng.stream(seed, f"verify.nms.{trial}")
        n = int(gen.integers(1, max_boxes + 1))
        tie_fraction = 0.5 if trial % 5 == 0 else 0.0
        dets = random_detections(gen, n, tie_fraction=tie_fraction)
        thr = float(gen.uniform(0.2, 0.8))
        class_aware = bool(gen.integers(0, 2))
        fast = nms_indices(dets, thr, class_aware)
        slow = naive_nms(dets, thr, class_aware)
        if fast != slow:
            mismatches += 1
            if not first:
                first = f"trial {trial}: {fast[:5]}... vs {slow[:5]}..."
    suite.add("oracle_equivalence", mismatches == 0,
              f"{mismatches}/{trials} mismatches" + (f"; first: {first}" if first else ""))
    # idempotence spot check on a fresh batch
    gen = rng.stream(seed, "verify.nms.idem")
    dets = random_detections(gen, 150)
    keep = nms_indices(dets, 0.5)
    survivors = [dets[i] for i in keep]
    again = nms_indices(survivors, 0.5)
    suite.add("idempotent", again == list(range(len(survivors))),
              "nms(nms(X)) == nms(X)")
    return suite


def suite_roi(pairs: int = 500, seed: int = 0) -> SuiteResult:
    suite = SuiteResult("roi")
    worst = 0.0
    for pair in range(pairs):
        gen = rng.stream(seed, f"verify.roi.{pair}")
        h, w = int(gen.integers(4, 14)), int(gen.integers(4, 14))
        c = int(gen.integers(1, 6))
        grid = gen.normal(0.0, 1.0, size=(h, w, c))
        pyramid = MultiScalePyramid(grid=grid, image_height=h * 4, image_width=w * 4)
        bx0 = float(gen.uniform(0, w * 4 * 0.6))
        by0 = float(gen.uniform(0, h * 4 * 0.6))
        bx1 = float(min(bx0 + gen.uniform(1.0, w * 4 * 0.5), w * 4))
        by1 = float(min(by0 + gen.uniform(1.0, h * 4 * 0.5), h * 4))
        bins = (int(gen.integers(1, 5)), int(gen.integers(1, 5)))
        samples = int(gen.integers(1, 4))
        det = Detection(bx0, by0, bx1, by1, 0.9, "obj")
        got = roi_align(pyramid, det, RoiConfig(bins=bins, samples_per_bin=samples)).data
        want = naive_roi_align(grid, (bx0 / 4, by0 / 4, bx1 / 4, by1 / 4), bins, samples)
        worst = max(worst, float(np.max(np.abs(got - want))))
    suite.add("oracle_equivalence", worst < 1e-9, f"max abs diff {worst:.3g} over {pairs} pairs")
    # constant-map property
    gen = rng.stream(seed, "verify.roi.const")
    cval = float(gen.normal())
    pyramid = MultiScalePyramid(grid=np.full((8, 8, 3), cval), image_height=32, image_width=32)
    det = Detection(3.0, 5.0, 27.0, 29.0, 0.9, "obj")
    got = roi_align(pyramid, det, RoiConfig(bins=(7, 7), samples_per_bin=2)).data
    dev = float(np.max(np.abs(got - cval)))
    suite.add("constant_map", dev < 1e-9, f"max deviation from constant {dev:.3g}")
    return suite


def suite_tokens(seed: int = 0, draws: int = 60) -> SuiteResult:
    suite = SuiteResult("tokens")
    gen = rng.stream(seed, "verify.tokens")
    d = 8
    bad = ""
    ok = True
    for _ in range(draws):
        low = int(gen.choice([224, 336]))
        cfg_enc = EncoderConfig.adjusted(low, 2 * low, channels_low=4, channels_high=4,
                                         stage_channels=(2, 2, 2, 4))
        n = cfg_enc.num_tokens
        k = int(gen.integers(0, 101))
        l_t = int(gen.integers(1, 33))
        seq = assemble(Tensor(gen.normal(size=(n, d))), Tensor(gen.normal(size=(k, d))),
                       Tensor(gen.normal(size=(l_t, d))))
        if len(seq) != n + k + l_t:
            ok = False
            bad = f"N={n} k={k} L={l_t} -> {len(seq)}"
            break
    suite.add("image_accounting", ok, bad or f"{draws} draws, S == N + k + L_T")
    frames = []
    ks = []
    n = 576
    for _ in range(8):
        k = int(gen.integers(0, 12))
        ks.append(k)
        frames.append((Tensor(gen.normal(size=(n, d))), Tensor(gen.normal(size=(k, d)))))
    l_t = 4
    seq = assemble_video(frames, Tensor(gen.normal(size=(l_t, d))))
    expect = sum(n + k for k in ks) + l_t
    suite.add("video_accounting", len(seq) == expect,
              f"8 frames: S={len(seq)} expect {expect}")
    return suite


def suite_freeze(seed: int = 0, steps: int = 20) -> SuiteResult:
    suite = SuiteResult("freeze")
    cfg = tiny_config(seed=seed, merge="b_to_f_xattn")
    comp = build_components(cfg)
    gen = rng.stream(seed, "verify.freeze")
    dataset = []
    for _ in range(4):
        n = cfg.encoder.num_tokens
        dataset.append(PreparedSample(
            e_low=gen.normal(size=(n, cfg.encoder.channels_low)),
            e_high=gen.normal(size=(n, cfg.encoder.channels_high)),
            e_objects=gen.normal(size=(2, cfg.object_channels)),
            text_emb=gen.normal(size=(3, cfg.assembly.model_dim)),
            answer_ids=[1, 2],
        ))
    model = comp.model
    before = {g: model.group_bytes(g) for g in model.groups()}
    tc = TrainConfig(stage1_steps=steps, stage2_steps=0, batch_size=2)
    train_two_stage(model, dataset, tc, merge=cfg.assembly.merge)
    for group in ("scorer", "merge"):
        unchanged = model.group_bytes(group) == before[group]
        suite.add(f"stage1_frozen_{group}", unchanged, "bytes identical across stage 1")
    for group in ("fusion", "proj_F", "proj_B"):
        changed = model.group_bytes(group) != before[group]
        suite.add(f"stage1_trains_{group}", changed, "bytes moved during stage 1")
    before2 = {g: model.group_bytes(g) for g in model.groups()}
    tc2 = TrainConfig(stage1_steps=0, stage2_steps=steps, batch_size=2)
    train_two_stage(model, dataset, tc2, merge=cfg.assembly.merge)
    for group in ("fusion", "proj_F", "proj_B", "scorer", "merge"):
        changed = model.group_bytes(group) != before2[group]
        suite.add(f"stage2_trains_{group}", changed, "bytes moved during stage 2")
    return suite


def suite_determinism(seed: int = 0) -> SuiteResult:
    suite = SuiteResult("determinism")
    cfg = tiny_config(seed=seed)
    scene = generate_scene(seed + 7, n_objects=2)
    r1 = run_image(cfg, scene, text_ids=[1, 2, 3], answer_ids=[4, 5])
    r2 = run_image(cfg, scene, text_ids=[1, 2, 3], answer_ids=[4, 5])
    suite.add("infer_rerun", r1["result_hash"] == r2["result_hash"],
              f"hashes {r1['result_hash'][:12]} vs {r2['result_hash'][:12]}")

    def short_train() -> bytes:
        scfg = small_training_config(seed)
        comp = build_components(scfg)
        raw = generate_dataset(scfg, n_samples=4)
        prepared = [prepare_sample(comp, s.scene, s.text_ids, s.answer_ids) for s in raw]
        tc = TrainConfig(stage1_steps=3, stage2_steps=3, batch_size=2)
        curve = train_two_stage(comp.model, prepared, tc)
        blob = b"".join(comp.model.group_bytes(g) for g in sorted(comp.model.groups()))
        tail = ",".join(f"{p.loss:.17g}" for p in curve)
        return blob + tail.encode()

    suite.add("train_rerun", short_train() == short_train(), "params and curve bit-identical")
    return suite


SUITE_BUILDERS: dict[str, Callable[..., SuiteResult]] = {
    "gradients": suite_gradients,
    "nms": suite_nms,
    "roi": suite_roi,
    "tokens": suite_tokens,
    "freeze": suite_freeze,
    "determinism": suite_determinism,
}


def run_suites(names: list[str] | None = None, seed: int = 0, fast: bool = False,
               inject_fault: bool = False) -> list[SuiteResult]:
    chosen = names or list(SUITE_BUILDERS)
    unknown = [n for n in chosen if n not in SUITE_BUILDERS]
    if unknown:
        raise ValueError(f"unknown suite(s) {unknown}; available: {sorted(SUITE_BUILDERS)}")
    results = []
    for name in chosen:
        kwargs: dict = {"seed": seed}
        if name == "gradients":
            kwargs["instances"] = 4 if fast else 20
            kwargs["inject_fault"] = inject_fault
        elif name == "nms":
            kwargs["trials"] = 100 if fast else 1000
        elif name == "roi":
            kwargs["pairs"] = 50 if fast else 500
        results.append(SUITE_BUILDERS[name](**kwargs))
    return results
