"""Three-stage training: pre-training, fine-tuning and contrastive distillation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .data import TrainingSample, assemble_batch, read_jsonl, write_jsonl
from .encoder import Encoder, save_checkpoint
from .errors import ConfigError, DataError, NumericError
from .numerics import SeededRng, cosine_sim
from .objectives import (
    LossConfig,
    contrastive_objective,
    distill_terms,
    infonce_loss,
    mrl_wrap,
    student_score_rows,
)

logger = logging.getLogger(__name__)

STAGES = ("pretrain", "finetune", "distill")

# Values as reported for the 0.5B model, kept for reference output.
PAPER_DEFAULTS = {
    "pretrain": {"batch_size": 512, "learning_rate": 1e-4, "warmup_steps": "10%", "epochs": 1,
                 "gpus": 48, "steps": "19k", "data_size": "470M", "hard_negatives": "in-batch only"},
    "finetune": {"batch_size": 120, "learning_rate": 2e-5, "warmup_steps": 200, "epochs": 1,
                 "gpus": 4, "steps": "12k", "data_size": "6M", "hard_negatives": "M=7, ranks 50-100"},
    "distill": {"batch_size": 120, "learning_rate": 1e-5, "warmup_steps": 200, "epochs": 1,
                "gpus": 2, "steps": "24k", "data_size": "6M", "teacher": "Qwen3-Embedding-8B"},
    "common": {"embedding_dim": 896, "max_input_length": 512, "pooling": "mean",
               "attention": "bidirectional", "mrl_dims": [896, 512, 256, 128, 64],
               "mrl_weights": [1.0, 0.3, 0.2, 0.1, 0.1], "gamma": 0.5, "tau_cl": 0.01,
               "tau_kl": 0.05, "cl_weight": 0.3, "kl_weight": 0.7, "optimizer": "Adam",
               "precision": "bfloat16"},
}

DESK_MRL = {"mrl_dims": [64, 32, 16, 8], "mrl_weights": [1.0, 0.3, 0.2, 0.1]}

DESK_DEFAULTS = {
    # From random init the sharp temperature collapses every embedding onto one
    # direction, so pre-training runs warmer and fine-tuning restores 0.01.
    "pretrain": {"stage": "pretrain", "batch_size": 32, "learning_rate": 3e-3, "warmup_steps": 0.1,
                 "epochs": 1, "seed": 0,
                 "loss": {"enable_pairwise_mix": False, "enable_listwise_mix": False, "tau_cl": 0.05,
                          **DESK_MRL}},
    "finetune": {"stage": "finetune", "batch_size": 16, "learning_rate": 3e-4, "warmup_steps": 20,
                 "epochs": 1, "seed": 0, "loss": dict(DESK_MRL)},
    "distill": {"stage": "distill", "batch_size": 16, "learning_rate": 1e-4, "warmup_steps": 20,
                "epochs": 1, "seed": 0, "loss": dict(DESK_MRL)},
}


# -- optimizer -------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor], **kw) -> "OptimizerState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params], **kw)


def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: OptimizerState, lr: float):
    """One bias-corrected Adam update, in place. Rejects non-finite gradients untouched."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ConfigError("params, grads and optimizer state disagree in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ConfigError(f"parameter {i}: shape {tuple(p.shape)} vs grad {tuple(g.shape)}")
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {i}; step {state.step + 1} aborted")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1 - b1**state.step, 1 - b2**state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    return params, state


# -- configuration ----------------------------------------------------------------


@dataclass
class StageConfig:
    stage: str
    batch_size: int
    learning_rate: float
    warmup_steps: float = 0
    epochs: int = 1
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if isinstance(self.loss, Mapping):
            self.loss = LossConfig(**self.loss)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.batch_size == 1:
            logger.warning("batch_size 1 leaves no in-batch negatives")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.warmup_steps < 0 or self.epochs < 1:
            raise ConfigError("warmup_steps must be >= 0 and epochs >= 1")
        if self.stage == "pretrain":
            # in-batch negatives only
            self.loss.enable_pairwise_mix = False
            self.loss.enable_listwise_mix = False

    @classmethod
    def from_dict(cls, d: Mapping) -> "StageConfig":
        unknown = set(d) - {"stage", "batch_size", "learning_rate", "warmup_steps", "epochs", "loss", "seed"}
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def read(cls, path) -> "StageConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None

    @classmethod
    def desk(cls, stage: str, **overrides) -> "StageConfig":
        d = json.loads(json.dumps(DESK_DEFAULTS[stage]))
        loss = {**d.pop("loss"), **overrides.pop("loss", {})}
        d.update(overrides)
        return cls(loss=loss, **d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        return d

    def warmup_for(self, total_steps: int) -> int:
        if 0 < self.warmup_steps < 1:
            return max(1, math.ceil(self.warmup_steps * total_steps))
        return int(self.warmup_steps)


def lr_at(step: int, base_lr: float, warmup: int) -> float:
    """Linear warmup over ``warmup`` steps, then constant."""
    if warmup <= 0:
        return base_lr
    return base_lr * min(1.0, (step + 1) / warmup)


# -- teacher cache ----------------------------------------------------------------------


def sample_ids(samples: Sequence[TrainingSample]) -> list[str]:
    return [s.sample_id if s.sample_id is not None else str(i) for i, s in enumerate(samples)]


@dataclass
class TeacherCache:
    """Frozen teacher cosine rows ``[s(q, pos), s(q, neg_1), ...]`` keyed by sample id."""

    rows: dict[str, np.ndarray]

    def __post_init__(self):
        for key, row in self.rows.items():
            row = np.array(row, dtype=np.float64)
            row.setflags(write=False)
            self.rows[key] = row

    def __len__(self) -> int:
        return len(self.rows)

    def check(self, samples: Sequence[TrainingSample]) -> None:
        ids = sample_ids(samples)
        missing = [i for i in ids if i not in self.rows]
        if missing:
            raise DataError(f"teacher cache missing {len(missing)} sample ids: {missing[:10]}")
        bad = [i for i, s in zip(ids, samples) if self.rows[i].shape != (1 + len(s.hard_negatives),)]
        if bad:
            raise DataError(f"teacher rows have the wrong width for sample ids: {bad[:10]}")

    def batch_rows(self, ids: Sequence[str]) -> np.ndarray:
        try:
            return np.stack([self.rows[i] for i in ids])
        except KeyError as e:
            raise DataError(f"teacher cache missing sample id {e}") from None

    def save(self, path) -> None:
        write_jsonl(path, ({"sample_id": k, "scores": [float(x) for x in v]} for k, v in self.rows.items()))

    @classmethod
    def load(cls, path) -> "TeacherCache":
        try:
            return cls({str(r["sample_id"]): r["scores"] for r in read_jsonl(path)})
        except KeyError as e:
            raise DataError(f"teacher cache record missing field {e}") from None


def read_teacher_embeddings(path) -> dict[str, dict]:
    """External teacher file: one JSON object per sample with q/pos/negs vectors."""
    out = {}
    for r in read_jsonl(path):
        try:
            out[str(r["sample_id"])] = {"q": r["q"], "pos": r["pos"], "negs": r.get("negs", [])}
        except KeyError as e:
            raise DataError(f"teacher embedding record missing field {e}") from None
    return out


def build_teacher_cache(source, samples: Sequence[TrainingSample], chunk: int = 64) -> TeacherCache:
    """Cache teacher rows from an :class:`Encoder` or a mapping of precomputed embeddings."""
    ids = sample_ids(samples)
    rows = {}
    if isinstance(source, Encoder):
        with torch.no_grad():
            for start in range(0, len(samples), chunk):
                part = samples[start : start + chunk]
                by_m: dict[int, list[int]] = {}
                for j, s in enumerate(part):
                    by_m.setdefault(len(s.hard_negatives), []).append(j)
                for js in by_m.values():
                    batch = assemble_batch([part[j] for j in js], source)
                    scores = student_score_rows(batch).double().numpy()
                    for j, row in zip(js, scores):
                        rows[ids[start + j]] = row
        return TeacherCache(rows)

    missing = [i for i in ids if i not in source]
    if missing:
        raise DataError(f"teacher embeddings missing {len(missing)} sample ids: {missing[:10]}")
    for i, s in zip(ids, samples):
        e = source[i]
        if len(e["negs"]) != len(s.hard_negatives):
            raise DataError(f"sample {i}: teacher has {len(e['negs'])} negatives, data has {len(s.hard_negatives)}")
        q = torch.as_tensor(e["q"], dtype=torch.float64)
        cands = torch.as_tensor([e["pos"], *e["negs"]], dtype=torch.float64)
        rows[i] = cosine_sim(q, cands).numpy()
    return TeacherCache(rows)


# -- stage runner ---------------------------------------------------------------------------


@dataclass
class StageResult:
    encoder: Encoder
    log: list[dict]


def run_stage(
    cfg: StageConfig,
    samples: Sequence[TrainingSample],
    encoder: Encoder,
    teacher: TeacherCache | None = None,
    checkpoint_path=None,
    log_path=None,
    on_step: Callable[[dict], None] | None = None,
) -> StageResult:
    """Train ``encoder`` in place for one stage and return it with the per-step log."""
    if not samples:
        raise DataError("no training samples")
    ids = sample_ids(samples)
    if cfg.stage == "distill":
        if teacher is None:
            raise ConfigError("distill stage needs a teacher cache")
        teacher.check(samples)

    params = [p for p in encoder.parameters()]
    state = OptimizerState.zeros_like(params)
    root = SeededRng(cfg.seed)
    mix_rng = root.child(1)
    steps_per_epoch = math.ceil(len(samples) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    warmup = cfg.warmup_for(total)
    pretrain_loss = mrl_wrap(infonce_loss, cfg.loss.mrl_dims, cfg.loss.mrl_weights)

    log, step = [], 0
    for epoch in range(cfg.epochs):
        order = root.child(1000 + epoch).permutation(len(samples))
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            part = [samples[i] for i in idx]
            kl = None
            if cfg.stage == "pretrain":
                batch = assemble_batch(part, encoder, with_negatives=False)
                loss = cl = pretrain_loss(batch, cfg.loss.tau_cl)
            elif cfg.stage == "finetune":
                batch = assemble_batch(part, encoder)
                loss = cl = contrastive_objective(batch, cfg.loss, rng=mix_rng)
            else:
                batch = assemble_batch(part, encoder)
                rows = teacher.batch_rows([ids[i] for i in idx])
                loss, cl, kl = distill_terms(batch, torch.as_tensor(rows, dtype=batch.queries.dtype),
                                             cfg.loss, rng=mix_rng)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at step {step}")
            grads = torch.autograd.grad(loss, params)
            lr = lr_at(step, cfg.learning_rate, warmup)
            adam_step(params, grads, state, lr)
            rec = {"step": step, "loss": float(loss.detach()), "cl": float(cl.detach()),
                   "kl": None if kl is None else float(kl.detach()), "lr": lr}
            log.append(rec)
            if on_step:
                on_step(rec)
            step += 1

    if checkpoint_path is not None:
        save_checkpoint(encoder, checkpoint_path)
    if log_path is not None:
        write_jsonl(log_path, log)
    return StageResult(encoder, log)
