"""Loss components and the two alternating objectives.

Every function takes tensors and returns a scalar tensor, so gradients flow
through whatever produced the inputs. Probabilities are floored at 1e-12
inside logarithms.
"""
from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F

from .errors import IllegalStateError, InputContractError

__all__ = [
    "LossConfig",
    "ClassCounts",
    "Batch",
    "class_balanced_weight",
    "class_balanced_focal",
    "class_balanced_focal_from_logits",
    "auxiliary_loss",
    "distillation_loss",
    "distillation_from_logits",
    "margin_loss",
    "composite_new",
    "composite_old",
]

PROB_FLOOR = 1e-12
_LOG_FLOOR = math.log(PROB_FLOOR)


@dataclass
class LossConfig:
    lambda1: float = 1.0  # auxiliary, NEW objective
    lambda2: float = 1.0  # distillation, NEW objective
    lambda3: float = 1.0  # margin, NEW objective
    lambda4: float = 1.0  # distillation, OLD objective
    lambda5: float = 1.0  # margin, OLD objective
    beta_new: float = 0.9
    gamma_new: float = 1.0
    beta_old: float = 0.99
    gamma_old: float = 2.0
    margin_m: float = 0.5
    top_k: int = 2

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4", "lambda5", "margin_m"):
            if getattr(self, name) < 0:
                raise InputContractError(f"{name} must be >= 0")
        for name in ("beta_new", "beta_old"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise InputContractError(f"{name} must lie in [0, 1)")
        for name in ("gamma_new", "gamma_old"):
            if getattr(self, name) < 0:
                raise InputContractError(f"{name} must be >= 0")
        if int(self.top_k) < 1:
            raise InputContractError("top_k must be >= 1")


class ClassCounts(Mapping):
    """Per-class sample counts of the current training set."""

    def __init__(self, counts: Mapping[int, int]):
        self._counts = {int(k): int(v) for k, v in counts.items()}
        bad = [k for k, v in self._counts.items() if v < 1]
        if bad:
            raise InputContractError(f"classes with count < 1: {bad}")

    @classmethod
    def from_labels(cls, labels: Sequence[int]) -> "ClassCounts":
        out: dict[int, int] = {}
        for y in labels:
            out[int(y)] = out.get(int(y), 0) + 1
        return cls(out)

    def __getitem__(self, key):
        return self._counts[int(key)]

    def __iter__(self):
        return iter(self._counts)

    def __len__(self):
        return len(self._counts)

    def per_sample(self, labels, dtype=torch.float64) -> torch.Tensor:
        labels = torch.as_tensor(labels).tolist()
        missing = sorted({y for y in labels if y not in self._counts})
        if missing:
            raise InputContractError(f"no class count for labels {missing}")
        return torch.tensor([self._counts[y] for y in labels], dtype=dtype)

    def total(self) -> int:
        return sum(self._counts.values())


def class_balanced_weight(n: torch.Tensor, beta: float) -> torch.Tensor:
    """``(1 - beta) / (1 - beta**n)``; exactly 1 when ``beta == 0``."""
    n = torch.as_tensor(n)
    if not n.is_floating_point():
        n = n.to(torch.get_default_dtype())
    if beta == 0:
        return torch.ones_like(n)
    return (1.0 - beta) / (1.0 - torch.pow(beta, n))


def _cb_focal_from_log_p(log_p: torch.Tensor, n: torch.Tensor, beta: float, gamma: float) -> torch.Tensor:
    log_p = log_p.clamp(_LOG_FLOOR, 0.0)
    p = log_p.exp()
    weight = class_balanced_weight(n, beta).to(log_p.dtype)
    if gamma == 0:
        focal = torch.ones_like(p)
    else:
        focal = (1.0 - p).clamp_min(0.0).pow(gamma)
    return (-weight * focal * log_p).mean()


def class_balanced_focal(p_true: torch.Tensor, n: torch.Tensor, beta: float, gamma: float) -> torch.Tensor:
    """Mean class-balanced focal loss given each sample's true-class probability.

    ``n`` holds, per sample, the number of training samples of its class.
    """
    p_true = torch.as_tensor(p_true)
    n = torch.as_tensor(n)
    if p_true.shape != n.shape:
        raise InputContractError("p_true and n must have the same shape")
    if bool((p_true < 0).any()) or bool((p_true > 1).any()):
        raise InputContractError("probabilities must lie in [0, 1]")
    if bool((n < 1).any()):
        raise InputContractError("class counts must be >= 1")
    return _cb_focal_from_log_p(torch.log(p_true.clamp_min(PROB_FLOOR)), n, beta, gamma)


def class_balanced_focal_from_logits(
    logits: torch.Tensor, targets: torch.Tensor, n: torch.Tensor, beta: float, gamma: float
) -> torch.Tensor:
    """Same loss computed from logits with a stable log-softmax."""
    log_p = F.log_softmax(logits, dim=-1).gather(1, targets.view(-1, 1)).squeeze(1)
    return _cb_focal_from_log_p(log_p, n, beta, gamma)


def auxiliary_loss(model, h: torch.Tensor, targets: torch.Tensor, n: torch.Tensor, beta: float, gamma: float):
    """Class-balanced focal loss on the newest branch's features and ``U`` weights.

    ``targets`` are classifier row indices.
    """
    if model.step_index < 2:
        raise IllegalStateError("auxiliary loss is defined only from step 2 on")
    return class_balanced_focal_from_logits(model.aux_logits(h), targets, n, beta, gamma)


def _check_distribution(p: torch.Tensor, name: str) -> None:
    if bool((p.detach() < 0).any()):
        raise InputContractError(f"{name} has negative entries")
    err = (p.detach().sum(dim=-1) - 1).abs().max().item()
    if err > 1e-5:
        raise InputContractError(f"{name} is not normalised (max deviation {err:.3g})")


def _kl(old_probs: torch.Tensor, new_log_probs: torch.Tensor, n_old: int) -> torch.Tensor:
    old_log = torch.log(old_probs.clamp_min(PROB_FLOOR))
    per_sample = (old_probs * (old_log - new_log_probs.clamp_min(_LOG_FLOOR))).sum(dim=-1)
    return n_old * per_sample.mean()


def distillation_loss(old_probs: torch.Tensor, new_probs: torch.Tensor, n_old: int) -> torch.Tensor:
    """``n_old``-weighted KL(old || new), averaged over the batch."""
    old_probs = torch.as_tensor(old_probs)
    new_probs = torch.as_tensor(new_probs)
    if old_probs.shape != new_probs.shape:
        raise InputContractError("old and new distributions differ in shape")
    if old_probs.shape[-1] != n_old:
        raise InputContractError(f"distributions cover {old_probs.shape[-1]} classes, n_old={n_old}")
    _check_distribution(old_probs, "old_probs")
    _check_distribution(new_probs, "new_probs")
    old_probs = old_probs.reshape(-1, n_old)
    new_probs = new_probs.reshape(-1, n_old)
    return _kl(old_probs, torch.log(new_probs.clamp_min(PROB_FLOOR)), n_old)


def distillation_from_logits(old_probs: torch.Tensor, new_logits_old: torch.Tensor) -> torch.Tensor:
    """Distillation with the student distribution renormalised over old classes."""
    n_old = new_logits_old.shape[-1]
    return _kl(old_probs, F.log_softmax(new_logits_old, dim=-1), n_old)


def margin_loss(
    sims: torch.Tensor,
    targets: torch.Tensor,
    new_rows: Sequence[int],
    m: float,
    k: int,
    is_memory: torch.Tensor | None = None,
) -> torch.Tensor:
    """Hinge keeping each memory sample's true-class cosine ``m`` above its top-``k`` new classes.

    ``sims`` are raw cosine similarities (batch x classes), ``targets`` row
    indices, ``new_rows`` the rows of the current step's classes. Only rows
    flagged by ``is_memory`` contribute (all rows when it is None); the result
    is their mean, or 0 when there are none. ``k`` is capped at the number of
    new classes; ties in the ranking go to the lower row index.
    """
    if sims.ndim != 2:
        raise InputContractError("sims must be batch x classes")
    targets = torch.as_tensor(targets, dtype=torch.long).view(-1)
    if is_memory is None:
        is_memory = torch.ones(len(targets), dtype=torch.bool)
    if not bool(is_memory.any()):
        return sims.sum() * 0.0
    new_idx = torch.as_tensor(list(new_rows), dtype=torch.long)
    if len(new_idx) == 0:
        raise InputContractError("margin loss needs at least one new class")
    mem_targets = targets[is_memory]
    if bool(torch.isin(mem_targets, new_idx).any()):
        raise InputContractError("margin loss applies to memory samples of old classes only")
    s = sims[is_memory]
    gt = s.gather(1, mem_targets.view(-1, 1))
    new_sims = s[:, new_idx]
    kk = min(int(k), len(new_idx))
    order = torch.sort(new_sims.detach(), dim=1, descending=True, stable=True).indices[:, :kk]
    top = new_sims.gather(1, order)
    return torch.clamp(top - gt + m, min=0.0).sum(dim=1).mean()


@dataclass
class Batch:
    """A training minibatch. ``y`` holds classifier row indices."""

    x: torch.Tensor
    y: torch.Tensor
    is_memory: torch.Tensor
    n: torch.Tensor  # per-sample class count in the training set

    def __post_init__(self):
        self.y = torch.as_tensor(self.y, dtype=torch.long)
        self.is_memory = torch.as_tensor(self.is_memory, dtype=torch.bool)


def _components(batch: Batch, model, snapshot, beta: float, gamma: float, cfg: LossConfig, with_aux: bool):
    if model.step_index < 2:
        raise IllegalStateError("composite objectives are defined only from step 2 on")
    z, h = model.features(batch.x)
    sims = model.similarities(z)
    logits = model.temperature * sims
    n = batch.n.to(logits.dtype)
    parts = {"class": class_balanced_focal_from_logits(logits, batch.y, n, beta, gamma)}
    if with_aux:
        parts["aux"] = auxiliary_loss(model, h, batch.y, n, beta, gamma)
    n_old = len(snapshot.seen_classes)
    old_probs = snapshot.probabilities(batch.x).to(logits.dtype)
    parts["dist"] = distillation_from_logits(old_probs, logits[:, :n_old])
    new_rows = range(n_old, model.num_classes)
    parts["marg"] = margin_loss(sims, batch.y, new_rows, cfg.margin_m, cfg.top_k, batch.is_memory)
    return parts


def composite_new(batch: Batch, model, snapshot, cfg: LossConfig, *, return_parts: bool = False):
    """``L_class + l1*L_aux + l2*L_dist + l3*L_marg`` with the NEW-phase (beta, gamma)."""
    parts = _components(batch, model, snapshot, cfg.beta_new, cfg.gamma_new, cfg, with_aux=cfg.lambda1 > 0)
    total = parts["class"]
    if cfg.lambda1 > 0:
        total = total + cfg.lambda1 * parts["aux"]
    total = total + cfg.lambda2 * parts["dist"] + cfg.lambda3 * parts["marg"]
    return (total, parts) if return_parts else total


def composite_old(batch: Batch, model, snapshot, cfg: LossConfig, *, return_parts: bool = False):
    """``L_class + l4*L_dist + l5*L_marg`` with the OLD-phase (beta, gamma); no auxiliary term."""
    parts = _components(batch, model, snapshot, cfg.beta_old, cfg.gamma_old, cfg, with_aux=False)
    total = parts["class"] + cfg.lambda4 * parts["dist"] + cfg.lambda5 * parts["marg"]
    return (total, parts) if return_parts else total
