"""End-to-end incremental training: initial fit, then expand / replay / alternate."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .data import IncrementalStream, augment
from .errors import InputContractError, TrainingDivergenceError
from .losses import (
    Batch,
    ClassCounts,
    LossConfig,
    class_balanced_focal_from_logits,
    composite_new,
    composite_old,
)
from .memory import ExemplarMemory, build_training_set, rebuild_memory
from .metrics import AccuracyMatrix, record, summarize
from .model import BackboneSpec, ExpandingNet, Phase, save_checkpoint, snapshot_for_distillation

__all__ = [
    "TrainPlan",
    "Learner",
    "RunResult",
    "VARIANTS",
    "LEARNERS",
    "variant_settings",
    "run_stream",
    "run_ablation",
]

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_old_objective", "no_aux", "no_dist", "no_margin", "no_expansion")
LEARNERS = ("proposed", "finetune_only", "replay_only")


@dataclass
class TrainPlan:
    epochs: int = 20
    lr: float = 0.03
    lr_min: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    seed: int = 0
    alternation: str = "epoch"  # or "batch"
    grad_clip: float | None = None
    augment: bool = True  # image inputs only
    memory_budget: int = 20
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.epochs < 1:
            raise InputContractError("epochs must be >= 1")
        if self.batch_size < 1:
            raise InputContractError("batch_size must be >= 1")
        if not self.lr > 0:
            raise InputContractError("learning rate must be > 0")
        if self.lr_min < 0 or self.lr_min > self.lr:
            raise InputContractError("lr_min must lie in [0, lr]")
        if self.alternation not in ("epoch", "batch"):
            raise InputContractError(f"unknown alternation {self.alternation!r}")
        if self.memory_budget < 1:
            raise InputContractError("memory_budget must be >= 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise InputContractError("grad_clip must be positive when set")

    def lr_at(self, epoch: int) -> float:
        """Cosine decay from ``lr`` (epoch 0) to ``lr_min`` (last epoch)."""
        if self.epochs == 1:
            return self.lr
        frac = epoch / (self.epochs - 1)
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + math.cos(math.pi * frac))


def variant_settings(variant: str, loss: LossConfig) -> tuple[LossConfig, bool, bool]:
    """Map an ablation name to ``(loss config, use OLD phase, expand branches)``."""
    if variant not in VARIANTS:
        raise InputContractError(f"unknown ablation variant {variant!r}; expected one of {VARIANTS}")
    if variant == "no_aux":
        loss = replace(loss, lambda1=0.0)
    elif variant == "no_dist":
        loss = replace(loss, lambda2=0.0, lambda4=0.0)
    elif variant == "no_margin":
        loss = replace(loss, lambda3=0.0, lambda5=0.0)
    return loss, variant != "no_old_objective", variant != "no_expansion"


@dataclass
class RunResult:
    matrix: AccuracyMatrix
    metrics: dict
    learner: str
    variant: str
    seed: int
    memory_manifests: list[dict]
    logs: list[dict]


class Learner:
    """Owns the model and memory of one run and trains it step by step.

    ``kind`` selects the proposed method or one of the reference learners:
    ``finetune_only`` trains everything on the new data with plain
    cross-entropy; ``replay_only`` does the same on memory plus new data.
    Neither expands branches.
    """

    def __init__(
        self,
        spec: BackboneSpec,
        plan: TrainPlan,
        kind: str = "proposed",
        variant: str = "full",
        *,
        init_temperature: float = 1.0,
        dtype: torch.dtype = torch.float32,
        on_record: Callable[[dict], None] | None = None,
    ):
        if kind not in LEARNERS:
            raise InputContractError(f"unknown learner {kind!r}; expected one of {LEARNERS}")
        self.spec = spec
        self.plan = plan
        self.kind = kind
        self.variant = variant
        self.loss_cfg, self.use_old_phase, expand = variant_settings(variant, plan.loss)
        if kind != "proposed":
            expand = False
        self.expand_branches = expand
        self.init_temperature = init_temperature
        self.dtype = dtype
        self.model: ExpandingNet | None = None
        self.memory: ExemplarMemory | None = None
        self._recent = None
        self._recent_step = 0
        self.logs: list[dict] = []
        self.memory_manifests: list[dict] = []
        self._on_record = on_record

    # -- plumbing ----------------------------------------------------------
    def _emit(self, rec: dict) -> None:
        self.logs.append(rec)
        if self._on_record is not None:
            self._on_record(rec)

    def _generator(self, step: int) -> torch.Generator:
        return torch.Generator().manual_seed(self.plan.seed * 1_000_003 + step)

    def _batches(self, n: int, gen: torch.Generator) -> list[torch.Tensor]:
        perm = torch.randperm(n, generator=gen)
        return list(perm.split(self.plan.batch_size))

    def _inputs(self, x: np.ndarray, idx: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
        xb = x[idx.numpy()]
        if self.plan.augment and xb.ndim == 4:
            xb = np.stack([augment(s, rng) for s in xb])
        return torch.as_tensor(xb, dtype=self.dtype)

    def _optimizer(self, params) -> torch.optim.SGD:
        params = list(params)
        rho = self.model.rho
        groups = [{"params": [p for p in params if p is not rho]}]
        if any(p is rho for p in params):
            groups.append({"params": [rho], "weight_decay": 0.0})  # temperature is not decayed
        return torch.optim.SGD(
            groups, lr=self.plan.lr, momentum=self.plan.momentum, weight_decay=self.plan.weight_decay
        )

    def _update(self, opt, loss: torch.Tensor, phase: str, epoch: int, step: int) -> None:
        if not torch.isfinite(loss):
            raise TrainingDivergenceError(phase, epoch, step, loss.item())
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if self.plan.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(
                [p for p in self.model.parameters() if p.grad is not None], self.plan.grad_clip
            )
        opt.step()

    def _plain_epochs(self, train_x, labels, step: int) -> None:
        """N epochs of a single classification objective over all trainable parameters."""
        model = self.model
        rows = torch.as_tensor([model.label_to_row[int(v)] for v in labels], dtype=torch.long)
        counts = ClassCounts.from_labels(labels)
        n = counts.per_sample(labels, dtype=self.dtype)
        if self.kind == "proposed":
            beta, gamma = self.loss_cfg.beta_new, self.loss_cfg.gamma_new
        else:
            beta, gamma = 0.0, 0.0
        opt = self._optimizer(p for p in model.parameters() if p.requires_grad)
        gen = self._generator(step)
        rng = np.random.default_rng([self.plan.seed, step])
        for epoch in range(self.plan.epochs):
            lr = self.plan.lr_at(epoch)
            for g in opt.param_groups:
                g["lr"] = lr
            total, count = 0.0, 0
            for idx in self._batches(len(rows), gen):
                logits = model(self._inputs(train_x, idx, rng))
                loss = class_balanced_focal_from_logits(logits, rows[idx], n[idx], beta, gamma)
                self._update(opt, loss, "initial" if step == 1 else "plain", epoch, step)
                total += loss.item() * len(idx)
                count += len(idx)
            self._emit({"step": step, "epoch": epoch, "phase": "class", "lr": lr, "loss": total / count})

    # -- algorithm -----------------------------------------------------------
    def train_initial(self, step_data) -> ExpandingNet:
        """Fit extractor, first branch and classifier on the first step's data."""
        if len(step_data.y) == 0:
            raise InputContractError("the first step has no training data")
        self.model = ExpandingNet(
            self.spec,
            step_data.classes,
            expand_branches=self.expand_branches,
            init_temperature=self.init_temperature,
            seed=self.plan.seed,
            dtype=self.dtype,
        )
        self.model.unfreeze_all()
        self._plain_epochs(step_data.x, step_data.y, step=1)
        self._recent, self._recent_step = step_data, 1
        return self.model

    def train_incremental_step(self, step_data) -> ExpandingNet:
        if self.model is None:
            raise InputContractError("train_initial must run before incremental steps")
        model = self.model
        step = model.step_index + 1
        use_memory = self.kind != "finetune_only"
        teacher = snapshot_for_distillation(model)
        model.expand(step_data.classes)
        if use_memory:
            self.memory = rebuild_memory(
                teacher, self.memory, self._recent, self.plan.memory_budget, self._recent_step
            )
            self.memory_manifests.append({"step": step, **self.memory.manifest()})
        train = build_training_set(self.memory if use_memory else None, step_data)
        if self.kind == "proposed":
            self._alternate(train, teacher, step)
        else:
            model.unfreeze_all()
            self._plain_epochs(train.x, train.y, step)
        self._recent, self._recent_step = step_data, step
        return model

    def _alternate(self, train, teacher, step: int) -> None:
        model = self.model
        cfg = self.loss_cfg
        rows = torch.as_tensor([model.label_to_row[int(v)] for v in train.y], dtype=torch.long)
        n = train.counts.per_sample(train.y, dtype=self.dtype)
        is_mem = torch.as_tensor(train.is_memory)
        phases = [Phase.NEW, Phase.OLD] if self.use_old_phase else [Phase.NEW]
        objective = {Phase.NEW: composite_new, Phase.OLD: composite_old}
        opt = self._optimizer(model.phase_parameters(Phase.NEW).values())
        gen = self._generator(step)
        rng = np.random.default_rng([self.plan.seed, step])

        def one_batch(phase, idx, acc):
            batch = Batch(self._inputs(train.x, idx, rng), rows[idx], is_mem[idx], n[idx])
            loss, parts = objective[phase](batch, model, teacher, cfg, return_parts=True)
            self._update(opt, loss, phase.value, epoch, step)
            acc.setdefault(phase, []).append((len(idx), loss.item(), {k: v.item() for k, v in parts.items()}))

        for epoch in range(self.plan.epochs):
            lr = self.plan.lr_at(epoch)
            for g in opt.param_groups:
                g["lr"] = lr
            acc: dict = {}
            if self.plan.alternation == "epoch":
                for phase in phases:
                    model.set_phase(phase)
                    for idx in self._batches(len(rows), gen):
                        one_batch(phase, idx, acc)
            else:
                for idx in self._batches(len(rows), gen):
                    for phase in phases:
                        model.set_phase(phase)
                        one_batch(phase, idx, acc)
            for phase, items in acc.items():
                weight = sum(k for k, _, _ in items)
                rec = {"step": step, "epoch": epoch, "phase": phase.value, "lr": lr,
                       "loss": sum(k * v for k, v, _ in items) / weight}
                for name in items[0][2]:
                    rec[name] = sum(k * p[name] for k, _, p in items) / weight
                self._emit(rec)
        model.set_phase(Phase.NEW)

    def evaluate(self, matrix: AccuracyMatrix, stream: IncrementalStream) -> AccuracyMatrix:
        return record(matrix, self.model, stream.test_sets, self.model.step_index)

    def run(self, stream: IncrementalStream, checkpoint_dir: str | Path | None = None) -> RunResult:
        matrix = AccuracyMatrix(stream.T)
        for t, step_data in enumerate(stream.steps, start=1):
            if t == 1:
                self.train_initial(step_data)
            else:
                self.train_incremental_step(step_data)
            self.evaluate(matrix, stream)
            log.info("%s/%s seed %d step %d: %s", self.kind, self.variant, self.plan.seed, t,
                     [round(matrix.get(i, t), 4) for i in range(1, t + 1)])
            if checkpoint_dir is not None:
                save_checkpoint(self.model, Path(checkpoint_dir) / f"step{t}.ckpt",
                                extra={"learner": self.kind, "variant": self.variant})
        return RunResult(
            matrix=matrix,
            metrics=summarize(matrix),
            learner=self.kind,
            variant=self.variant,
            seed=self.plan.seed,
            memory_manifests=self.memory_manifests,
            logs=self.logs,
        )


def run_stream(
    stream: IncrementalStream,
    spec: BackboneSpec,
    plan: TrainPlan,
    learner: str = "proposed",
    variant: str = "full",
    **kwargs,
) -> RunResult:
    checkpoint_dir = kwargs.pop("checkpoint_dir", None)
    return Learner(spec, plan, learner, variant, **kwargs).run(stream, checkpoint_dir=checkpoint_dir)


def run_ablation(variant: str, stream: IncrementalStream, spec: BackboneSpec, plan: TrainPlan, **kwargs) -> dict:
    """Run one lesioned configuration and report ``acc``, ``acc_new``, ``acc_old`` (plus ``fgt``)."""
    variant_settings(variant, plan.loss)
    result = run_stream(stream, spec, plan, "proposed", variant, **kwargs)
    return {"variant": variant, **result.metrics, "matrix": result.matrix}
