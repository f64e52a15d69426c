"""Trainable parameter groups, the two-stage freeze schedule, and the loop.

Stage 1 ("pretrain") updates only the fusion network and the two projectors;
stage 2 ("finetune") unfreezes everything except the vision encoders, which
are never trainable (they live outside the parameter set entirely; the empty
"encoders" group records that contract). All updates are plain first-order
Adam steps with a fixed reduction order, so runs are bit-reproducible per
seed.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from . import rng
from .assembly import (
    AssemblyConfig,
    MergeMethod,
    ScorerParams,
    ProjectorParams,
    assemble,
    score_answer,
)
from .fusion import CrossAttentionParams, FusionConfig, FusionParams, fuse, fused_width
from .tensor import Tensor

GROUP_FUSION = "fusion"
GROUP_PROJ_F = "proj_F"
GROUP_PROJ_B = "proj_B"
GROUP_MERGE = "merge"
GROUP_SCORER = "scorer"
GROUP_ENCODERS = "encoders"

PRETRAIN_TRAINABLE = frozenset({GROUP_FUSION, GROUP_PROJ_F, GROUP_PROJ_B})


@dataclass
class ModelParams:
    """Every trainable tensor, partitioned into named groups."""

    fusion: FusionParams
    proj_f: ProjectorParams
    proj_b: ProjectorParams
    scorer: ScorerParams
    merge: CrossAttentionParams | None = None

    @classmethod
    def build(cls, fusion_cfg: FusionConfig, assembly_cfg: AssemblyConfig,
              object_channels: int, seed: int) -> ModelParams:
        d = assembly_cfg.model_dim
        fusion_params = FusionParams.build(fusion_cfg, seed)
        proj_f = ProjectorParams.build(fused_width(fusion_cfg), d, rng.stream(seed, "params.proj_F"))
        proj_b = ProjectorParams.build(object_channels, d, rng.stream(seed, "params.proj_B"))
        scorer = ScorerParams.build(assembly_cfg, rng.stream(seed, "params.scorer"))
        merge = None
        if assembly_cfg.merge is not MergeMethod.CONCAT:
            merge = CrossAttentionParams.build(d, rng.stream(seed, "params.merge"))
        return cls(fusion=fusion_params, proj_f=proj_f, proj_b=proj_b, scorer=scorer, merge=merge)

    def groups(self) -> dict[str, dict[str, Tensor]]:
        out = {
            GROUP_FUSION: self.fusion.tensors(),
            GROUP_PROJ_F: self.proj_f.tensors(),
            GROUP_PROJ_B: self.proj_b.tensors(),
            GROUP_SCORER: self.scorer.tensors(),
            GROUP_ENCODERS: {},
        }
        if self.merge is not None:
            out[GROUP_MERGE] = self.merge.tensors()
        return out

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        """(group/name, tensor) pairs in a fixed sorted order."""
        out = []
        for group in sorted(self.groups()):
            for name, t in sorted(self.groups()[group].items()):
                out.append((f"{group}/{name}", t))
        return out

    def group_bytes(self, group: str) -> bytes:
        """Concatenated little-endian value bytes, for freeze verification."""
        tensors = self.groups().get(group, {})
        chunks = [tensors[name].data.astype("<f8").tobytes() for name in sorted(tensors)]
        return b"".join(chunks)


@dataclass(frozen=True)
class FreezeMask:
    """Which parameter groups may move during one training stage."""

    stage: str
    trainable: frozenset[str]

    @classmethod
    def for_stage(cls, stage: str, model: ModelParams) -> FreezeMask:
        groups = set(model.groups())
        if stage == "pretrain":
            return cls(stage, frozenset(PRETRAIN_TRAINABLE & groups))
        if stage == "finetune":
            return cls(stage, frozenset(groups - {GROUP_ENCODERS}))
        raise ValueError(f"unknown stage {stage!r}")

    def apply(self, model: ModelParams) -> None:
        for group, tensors in model.groups().items():
            flag = group in self.trainable
            for t in tensors.values():
                t.requires_grad = flag
                t.grad = None


class Adam:
    """Deterministic Adam over an ordered tensor list."""

    def __init__(self, named: list[tuple[str, Tensor]], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.named = sorted(named, key=lambda kv: kv[0])
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in self.named}
        self.v = {name: np.zeros_like(t.data) for name, t in self.named}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, t in self.named:
            g = t.grad
            if g is None:
                continue
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            update = (self.m[name] / b1c) / (np.sqrt(self.v[name] / b2c) + self.eps)
            t.data = t.data - self.lr * update

    def zero_grad(self) -> None:
        for _, t in self.named:
            t.grad = None


@dataclass
class PreparedSample:
    """Frozen-encoder outputs for one sample; only downstream params train."""

    e_low: np.ndarray        # [N, C_L]
    e_high: np.ndarray       # [N, C_H], final-stage tokens
    e_objects: np.ndarray    # [k, C_B] pooled box features
    text_emb: np.ndarray     # [L_T, D]
    answer_ids: list[int]


@dataclass(frozen=True)
class TrainConfig:
    stage1_steps: int = 200
    stage2_steps: int = 300
    batch_size: int = 8
    lr_stage1: float = 3e-3
    lr_stage2: float = 3e-3


def sample_loss(model: ModelParams, sample: PreparedSample, merge: MergeMethod,
                text_first: bool = False) -> Tensor:
    e_fused = fuse(Tensor(sample.e_low), Tensor(sample.e_high), model.fusion)
    proj_fused = model.proj_f.apply(e_fused)
    proj_objects = model.proj_b.apply(Tensor(sample.e_objects))
    seq = assemble(proj_fused, proj_objects, Tensor(sample.text_emb),
                   merge=merge, merge_params=model.merge, text_first=text_first)
    return score_answer(seq, sample.answer_ids, model.scorer)


def mean_dataset_nll(model: ModelParams, dataset: list[PreparedSample], merge: MergeMethod) -> float:
    total = 0.0
    for sample in dataset:
        total += sample_loss(model, sample, merge).item()
    return total / len(dataset)


@dataclass
class CurvePoint:
    step: int
    stage: str
    loss: float


def _run_stage(model: ModelParams, dataset: list[PreparedSample], merge: MergeMethod,
               stage: str, steps: int, lr: float, batch_size: int,
               start_step: int) -> list[CurvePoint]:
    mask = FreezeMask.for_stage(stage, model)
    mask.apply(model)
    trainable = [(name, t) for name, t in model.named_tensors() if t.requires_grad]
    opt = Adam(trainable, lr=lr)
    n = len(dataset)
    curve: list[CurvePoint] = []
    for s in range(steps):
        opt.zero_grad()
        base = (s * batch_size) % n
        batch = [dataset[(base + j) % n] for j in range(min(batch_size, n))]
        losses = [sample_loss(model, sample, merge) for sample in batch]
        total = losses[0]
        for extra in losses[1:]:
            total = total + extra
        loss = total * (1.0 / len(batch))
        loss.backward()
        opt.step()
        curve.append(CurvePoint(step=start_step + s, stage=stage, loss=loss.item()))
    return curve


def train_two_stage(model: ModelParams, dataset: list[PreparedSample],
                    cfg: TrainConfig, merge: MergeMethod = MergeMethod.CONCAT) -> list[CurvePoint]:
    """Run both stages in place on ``model``; returns the per-step loss curve."""
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    curve = _run_stage(model, dataset, merge, "pretrain", cfg.stage1_steps,
                       cfg.lr_stage1, cfg.batch_size, start_step=0)
    curve += _run_stage(model, dataset, merge, "finetune", cfg.stage2_steps,
                        cfg.lr_stage2, cfg.batch_size, start_step=cfg.stage1_steps)
    return curve


def curve_to_csv(curve: list[CurvePoint]) -> str:
    lines = ["step,stage,loss"]
    lines += [f"{p.step},{p.stage},{p.loss:.17g}" for p in curve]
    return "\n".join(lines) + "\n"


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(model: ModelParams, directory: str, stage: str, seed: int,
                    config_hash: str) -> None:
    """Write manifest.json plus one raw little-endian float64 blob file."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for name, t in model.named_tensors():
        raw = t.data.astype("<f8").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format": "visionflow-checkpoint-v1",
        "stage": stage,
        "seed": seed,
        "config_hash": config_hash,
        "dtype": "<f8",
        "tensors": entries,
    }
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    with open(os.path.join(directory, "params.bin"), "wb") as fh:
        fh.write(b"".join(blobs))


def load_checkpoint_state(directory: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Read back (manifest, {qualified name: array})."""
    with open(os.path.join(directory, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    with open(os.path.join(directory, "params.bin"), "rb") as fh:
        raw = fh.read()
    state: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        buf = raw[entry["offset"]: entry["offset"] + entry["nbytes"]]
        state[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(entry["shape"]).copy()
    return manifest, state


def restore_model(model: ModelParams, state: dict[str, np.ndarray]) -> None:
    """Load checkpoint arrays into a structurally matching model."""
    for name, t in model.named_tensors():
        if name not in state:
            raise KeyError(f"checkpoint missing tensor {name!r}")
        if tuple(state[name].shape) != t.shape:
            raise ValueError(f"checkpoint tensor {name!r} has shape {state[name].shape}, expected {t.shape}")
        t.data = state[name]


def checkpoint_hash(directory: str) -> str:
    h = hashlib.sha256()
    for fname in ("manifest.json", "params.bin"):
        with open(os.path.join(directory, fname), "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()
