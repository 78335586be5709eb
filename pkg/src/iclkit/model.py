"""Dynamically expanding network with a block-structured cosine classifier.

A shared low-level extractor feeds one high-level branch per step. The
classifier weight matrix is stored as a grid of blocks: block ``(r, c)`` maps
features of branch ``c`` to the classes introduced at step ``r`` (0-based).
Expanding to step ``t`` adds row-group ``t-1`` for columns ``0..t-2`` (the
``V`` blocks) and column-group ``t-1`` for every row group (the ``U``
blocks). All earlier blocks form the frozen previous matrix.
"""
from __future__ import annotations

import copy
import enum
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import (
    DegenerateSimilarityError,
    IllegalStateError,
    InputContractError,
    StreamContractError,
)

__all__ = [
    "BackboneSpec",
    "ExpandingNet",
    "FrozenSnapshot",
    "Phase",
    "cosine_similarity_matrix",
    "snapshot_for_distillation",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = "ICLKIT-CKPT-v1"
COSINE_EPS = 1e-12


class Phase(str, enum.Enum):
    NEW = "new"
    OLD = "old"


@dataclass
class BackboneSpec:
    """Desk-scale backbone.

    ``kind="mlp"``: ``hidden`` lists layer widths; the first ``split`` layers
    form the shared extractor and the rest, plus a final projection to ``d``,
    form each branch. ``kind="conv"``: ``hidden`` lists channel counts of 3x3
    conv layers (stride 2 after the first), same split rule, and branches end
    in global average pooling before the projection.
    """

    input_shape: tuple[int, ...] = (16,)
    kind: str = "mlp"
    hidden: tuple[int, ...] = (64, 64)
    split: int = 1
    d: int = 16
    branch_init: str = "copy"  # "copy" of the previous branch or "random"

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.hidden = tuple(int(v) for v in self.hidden)
        if self.kind not in ("mlp", "conv"):
            raise InputContractError(f"unknown backbone kind {self.kind!r}")
        if not 1 <= self.split <= len(self.hidden):
            raise InputContractError("split must select between 1 and len(hidden) layers")
        if self.d < 1:
            raise InputContractError("feature dimension d must be >= 1")
        if self.branch_init not in ("copy", "random"):
            raise InputContractError(f"unknown branch_init {self.branch_init!r}")
        if self.kind == "conv" and len(self.input_shape) != 3:
            raise InputContractError("conv backbone needs input_shape (channels, height, width)")
        if self.kind == "mlp" and len(self.input_shape) != 1:
            raise InputContractError("mlp backbone needs input_shape (features,)")

    def build_low(self) -> nn.Module:
        if self.kind == "mlp":
            widths = (self.input_shape[0],) + self.hidden[: self.split]
            return _mlp(widths)
        channels = (self.input_shape[0],) + self.hidden[: self.split]
        return _convs(channels, first_stride=1)

    def build_branch(self) -> nn.Module:
        if self.kind == "mlp":
            widths = self.hidden[self.split - 1 :]
            layers = [_mlp(widths)] if len(widths) > 1 else []
            layers.append(nn.Linear(widths[-1], self.d))
            return nn.Sequential(*layers)
        channels = self.hidden[self.split - 1 :]
        layers = [_convs(channels, first_stride=2)] if len(channels) > 1 else []
        layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(channels[-1], self.d)]
        return nn.Sequential(*layers)


def _mlp(widths: Sequence[int]) -> nn.Module:
    layers: list[nn.Module] = []
    for a, b in zip(widths[:-1], widths[1:]):
        layers += [nn.Linear(a, b), nn.ReLU()]
    return nn.Sequential(*layers)


def _convs(channels: Sequence[int], first_stride: int) -> nn.Module:
    layers: list[nn.Module] = []
    for k, (a, b) in enumerate(zip(channels[:-1], channels[1:])):
        stride = first_stride if k == 0 else 2
        layers += [nn.Conv2d(a, b, 3, stride=stride, padding=1), nn.ReLU()]
    return nn.Sequential(*layers)


def cosine_similarity_matrix(a: torch.Tensor, b: torch.Tensor, *, check: bool = False) -> torch.Tensor:
    """Pairwise cosine similarity between rows of ``a`` and rows of ``b``.

    Norms are floored at ``1e-12``. With ``check=True`` an exactly-zero row
    raises :class:`DegenerateSimilarityError` instead.
    """
    na = a.norm(dim=-1, keepdim=True)
    nb = b.norm(dim=-1, keepdim=True)
    if check:
        if bool((na == 0).any()):
            raise DegenerateSimilarityError("zero-norm feature vector")
        if bool((nb == 0).any()):
            raise DegenerateSimilarityError("zero-norm classifier weight row")
    return (a / na.clamp_min(COSINE_EPS)) @ (b / nb.clamp_min(COSINE_EPS)).transpose(-1, -2)


def _block_key(row_group: int, col_group: int) -> str:
    return f"r{row_group}_c{col_group}"


class ExpandingNet(nn.Module):
    """Shared extractor, per-step branches and a unified cosine classifier.

    Classes are addressed by label; ``label_to_row`` maps a label to its row
    in the classifier (rows are ordered by the step that introduced them).
    With ``expand_branches=False`` the network keeps a single branch and the
    classifier only grows row-wise; this is the no-expansion lesion and the
    layout used by the reference learners.
    """

    def __init__(
        self,
        spec: BackboneSpec,
        initial_classes: Iterable[int],
        *,
        expand_branches: bool = True,
        init_temperature: float = 1.0,
        seed: int | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if init_temperature <= 0:
            raise InputContractError("init_temperature must be > 0")
        classes = [int(c) for c in initial_classes]
        if not classes:
            raise StreamContractError("the first step needs at least one class")
        if len(set(classes)) != len(classes):
            raise StreamContractError("duplicate labels in the first step")
        self.spec = spec
        self.expand_branches = bool(expand_branches)
        self.class_groups: list[list[int]] = [classes]
        self._generator = torch.Generator().manual_seed(seed) if seed is not None else None
        with _seeded(self._generator):
            self.low = spec.build_low()
            self.branches = nn.ModuleList([spec.build_branch()])
        self.blocks = nn.ParameterDict()
        self.rho = nn.Parameter(torch.tensor(math.log(init_temperature)))
        self.to(dtype)
        self._add_block(0, 0)

    # -- bookkeeping -------------------------------------------------------
    @property
    def step_index(self) -> int:
        return len(self.class_groups)

    @property
    def num_col_groups(self) -> int:
        return len(self.branches)

    @property
    def d(self) -> int:
        return self.spec.d

    @property
    def feature_dim(self) -> int:
        return self.num_col_groups * self.d

    @property
    def seen_classes(self) -> list[int]:
        return [c for g in self.class_groups for c in g]

    @property
    def num_classes(self) -> int:
        return len(self.seen_classes)

    @property
    def label_to_row(self) -> dict[int, int]:
        return {c: k for k, c in enumerate(self.seen_classes)}

    @property
    def temperature(self) -> torch.Tensor:
        return self.rho.exp()

    @property
    def dtype(self) -> torch.dtype:
        return self.rho.dtype

    def block_map(self) -> dict:
        """Row/column ranges of every block and the step that created it."""
        rows, start = [], 0
        for r, g in enumerate(self.class_groups):
            rows.append({"group": r, "step": r + 1, "start": start, "stop": start + len(g)})
            start += len(g)
        cols = [{"group": c, "start": c * self.d, "stop": (c + 1) * self.d} for c in range(self.num_col_groups)]
        blocks = {}
        for key in self.blocks:
            r, c = (int(v[1:]) for v in key.split("_"))
            blocks[key] = {"row_group": r, "col_group": c, "created_at_step": max(r, c) + 1}
        return {"rows": rows, "cols": cols, "blocks": blocks}

    def _add_block(self, row_group: int, col_group: int) -> None:
        rows = len(self.class_groups[row_group])
        # uniform(-1/sqrt(d), 1/sqrt(d)), the nn.Linear default fan-in scale
        bound = 1.0 / math.sqrt(self.d)
        w = torch.empty(rows, self.d, dtype=self.dtype)
        with _seeded(self._generator):
            nn.init.uniform_(w, -bound, bound)
        self.blocks[_block_key(row_group, col_group)] = nn.Parameter(w)

    def block(self, row_group: int, col_group: int) -> nn.Parameter:
        return self.blocks[_block_key(row_group, col_group)]

    def weight(self) -> torch.Tensor:
        """The assembled classifier matrix, ``num_classes x feature_dim``."""
        rows = []
        for r in range(len(self.class_groups)):
            parts = [self._block_or_zeros(r, c) for c in range(self.num_col_groups)]
            rows.append(torch.cat(parts, dim=1))
        return torch.cat(rows, dim=0)

    def _block_or_zeros(self, r: int, c: int) -> torch.Tensor:
        key = _block_key(r, c)
        if key in self.blocks:
            return self.blocks[key]
        return torch.zeros(len(self.class_groups[r]), self.d, dtype=self.dtype)

    def u_weight(self) -> torch.Tensor:
        """Newest column block for every class: the weights read by the auxiliary head."""
        c = self.num_col_groups - 1
        return torch.cat([self._block_or_zeros(r, c) for r in range(len(self.class_groups))], dim=0)

    # -- named parameter groups -------------------------------------------
    def old_parameters(self) -> dict[str, nn.Parameter]:
        """Parameters that must stay fixed during the current step (empty at step 1).

        Shared extractor, every branch but the newest, and the previous
        classifier matrix. Without branch expansion the single branch is
        trainable, so only the extractor and old blocks are listed.
        """
        t = self.step_index
        if t < 2:
            return {}
        out = {n: p for n, p in self.named_parameters() if n.startswith("low.")}
        if self.expand_branches:
            for b in range(self.num_col_groups - 1):
                out.update({n: p for n, p in self.named_parameters() if n.startswith(f"branches.{b}.")})
        for key, p in self.blocks.items():
            r, c = (int(v[1:]) for v in key.split("_"))
            if r < t - 1 and c < t - 1 or (not self.expand_branches and r < t - 1):
                out[f"blocks.{key}"] = p
        return out

    def new_branch_parameters(self) -> dict[str, nn.Parameter]:
        b = self.num_col_groups - 1
        return {n: p for n, p in self.named_parameters() if n.startswith(f"branches.{b}.")}

    def u_parameters(self) -> dict[str, nn.Parameter]:
        if not self.expand_branches:
            return {}
        c = self.num_col_groups - 1
        return {f"blocks.{_block_key(r, c)}": self.block(r, c) for r in range(self.step_index)}

    def v_parameters(self) -> dict[str, nn.Parameter]:
        r = self.step_index - 1
        last = self.num_col_groups - 1 if self.expand_branches else self.num_col_groups
        return {f"blocks.{_block_key(r, c)}": self.block(r, c) for c in range(last)}

    def phase_parameters(self, phase: Phase | str) -> dict[str, nn.Parameter]:
        phase = Phase(phase)
        params = dict(self.v_parameters())
        params["rho"] = self.rho
        if phase is Phase.NEW:
            params.update(self.new_branch_parameters())
            params.update(self.u_parameters())
        return params

    def set_phase(self, phase: Phase | str) -> None:
        """Make exactly the phase's parameter set trainable.

        NEW: newest branch, ``U`` and ``V`` blocks, temperature.
        OLD: ``V`` blocks and temperature.
        """
        if self.step_index < 2:
            raise IllegalStateError("phases exist only from step 2 on")
        self.set_trainable(self.phase_parameters(phase).values())

    def set_trainable(self, params: Iterable[nn.Parameter]) -> None:
        keep = {id(p) for p in params}
        for p in self.parameters():
            p.requires_grad_(id(p) in keep)

    def unfreeze_all(self) -> None:
        for p in self.parameters():
            p.requires_grad_(True)

    def trainable_names(self) -> set[str]:
        return {n for n, p in self.named_parameters() if p.requires_grad}

    # -- forward -----------------------------------------------------------
    def _check_input(self, x: torch.Tensor) -> None:
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise InputContractError(
                f"input shape {tuple(x.shape[1:])} does not match backbone {self.spec.input_shape}"
            )

    def features(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(z, h_last)``: concatenated branch outputs and the newest branch output."""
        if len(self.branches) == 0:
            raise IllegalStateError("model has no branches")
        x = torch.as_tensor(x, dtype=self.dtype)
        self._check_input(x)
        low = self.low(x)
        hs = [branch(low) for branch in self.branches]
        return torch.cat(hs, dim=1), hs[-1]

    def forward_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)[0]

    def similarities(self, z: torch.Tensor, *, check: bool = False) -> torch.Tensor:
        return cosine_similarity_matrix(z, self.weight(), check=check)

    def logits(self, z: torch.Tensor, *, check: bool = False) -> torch.Tensor:
        return self.temperature * self.similarities(z, check=check)

    def aux_logits(self, h: torch.Tensor, *, check: bool = False) -> torch.Tensor:
        """Cosine similarities of the newest-branch features to the ``U`` blocks (no temperature)."""
        if self.step_index < 2:
            raise IllegalStateError("auxiliary head exists only from step 2 on")
        return cosine_similarity_matrix(h, self.u_weight(), check=check)

    def class_probabilities(self, z: torch.Tensor) -> torch.Tensor:
        z = torch.as_tensor(z, dtype=self.dtype)
        squeeze = z.ndim == 1
        z = z.reshape(1, -1) if squeeze else z
        if z.shape[-1] != self.feature_dim:
            raise InputContractError(f"feature length {z.shape[-1]} != {self.feature_dim}")
        p = torch.softmax(self.logits(z, check=True), dim=-1)
        return p[0] if squeeze else p

    def aux_probabilities(self, h: torch.Tensor) -> torch.Tensor:
        h = torch.as_tensor(h, dtype=self.dtype)
        squeeze = h.ndim == 1
        h = h.reshape(1, -1) if squeeze else h
        if h.shape[-1] != self.d:
            raise InputContractError(f"branch feature length {h.shape[-1]} != {self.d}")
        p = torch.softmax(self.aux_logits(h, check=True), dim=-1)
        return p[0] if squeeze else p

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.logits(self.forward_features(x))

    @torch.no_grad()
    def predict(self, x, batch_size: int = 1024) -> np.ndarray:
        """Predicted labels (argmax over seen classes only)."""
        labels = np.asarray(self.seen_classes)
        out = []
        for start in range(0, len(x), batch_size):
            xb = torch.as_tensor(np.asarray(x[start : start + batch_size]), dtype=self.dtype)
            out.append(self.forward(xb).argmax(dim=1).numpy())
        return labels[np.concatenate(out)] if out else labels[:0]

    # -- growth ------------------------------------------------------------
    def expand(self, new_classes: Iterable[int]) -> None:
        """Grow to the next step: new branch (unless disabled), new rows and columns.

        Everything that existed before is frozen and left untouched.
        """
        new = [int(c) for c in new_classes]
        if not new:
            raise StreamContractError("a step must introduce at least one class")
        if len(set(new)) != len(new):
            raise StreamContractError("duplicate labels in new step")
        overlap = set(new) & set(self.seen_classes)
        if overlap:
            raise StreamContractError(f"labels already seen: {sorted(overlap)}")
        for p in self.parameters():
            p.requires_grad_(False)
        self.class_groups.append(new)
        r_new = len(self.class_groups) - 1
        if self.expand_branches:
            if self.spec.branch_init == "copy":
                branch = copy.deepcopy(self.branches[-1])
            else:
                with _seeded(self._generator):
                    branch = self.spec.build_branch().to(self.dtype)
            for p in branch.parameters():
                p.requires_grad_(True)
            self.branches.append(branch)
            c_new = self.num_col_groups - 1
            for c in range(c_new):
                self._add_block(r_new, c)
            for r in range(r_new + 1):
                self._add_block(r, c_new)
        else:
            self._add_block(r_new, 0)
            for p in self.branches[0].parameters():
                p.requires_grad_(True)
        self.rho.requires_grad_(True)


class _seeded:
    """Context manager routing torch's global RNG through a private generator."""

    def __init__(self, generator: torch.Generator | None):
        self.generator = generator

    def __enter__(self):
        if self.generator is not None:
            self._saved = torch.random.get_rng_state()
            torch.random.set_rng_state(self.generator.get_state())

    def __exit__(self, *exc):
        if self.generator is not None:
            self.generator.set_state(torch.random.get_rng_state())
            torch.random.set_rng_state(self._saved)
        return False


class FrozenSnapshot:
    """Inference-only deep copy of a model, used as the distillation teacher."""

    def __init__(self, model: ExpandingNet):
        self._model = copy.deepcopy(model).eval()
        for p in self._model.parameters():
            p.requires_grad_(False)
        self.step_index = self._model.step_index
        self.class_groups = [list(g) for g in self._model.class_groups]
        self.seen_classes = self._model.seen_classes
        self.feature_dim = self._model.feature_dim

    @torch.no_grad()
    def features(self, x) -> torch.Tensor:
        return self._model.forward_features(torch.as_tensor(x, dtype=self._model.dtype))

    @torch.no_grad()
    def probabilities(self, x) -> torch.Tensor:
        """Class distribution over the snapshot's own classes."""
        return torch.softmax(self._model.logits(self.features(x)), dim=-1)

    @torch.no_grad()
    def class_probabilities(self, z) -> torch.Tensor:
        return self._model.class_probabilities(z)

    def predict(self, x) -> np.ndarray:
        return self._model.predict(x)


def snapshot_for_distillation(model: ExpandingNet) -> FrozenSnapshot:
    return FrozenSnapshot(model)


# -- checkpoints -------------------------------------------------------------
def save_checkpoint(model: ExpandingNet, path: str | Path, extra: dict | None = None) -> None:
    """Write a self-describing checkpoint archive (``torch.save`` zip format)."""
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "step_index": model.step_index,
        "class_groups": [list(g) for g in model.class_groups],
        "backbone": asdict(model.spec),
        "expand_branches": model.expand_branches,
        "params": {n: p.detach().clone() for n, p in model.named_parameters()},
        "frozen": {n: not p.requires_grad for n, p in model.named_parameters()},
        "block_map": model.block_map(),
        "eta": model.temperature.item(),
        "dtype": str(model.dtype).replace("torch.", ""),
        "extra": extra or {},
    }
    torch.save(payload, Path(path))


def load_checkpoint(path: str | Path) -> ExpandingNet:
    payload = torch.load(Path(path), weights_only=False)
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise InputContractError(f"{path}: not an {CHECKPOINT_MAGIC} checkpoint")
    spec = BackboneSpec(**payload["backbone"])
    groups = payload["class_groups"]
    model = ExpandingNet(
        spec,
        groups[0],
        expand_branches=payload["expand_branches"],
        dtype=getattr(torch, payload["dtype"]),
    )
    for g in groups[1:]:
        model.expand(g)
    named = dict(model.named_parameters())
    if set(named) != set(payload["params"]):
        raise InputContractError(f"{path}: parameter layout mismatch")
    with torch.no_grad():
        for n, value in payload["params"].items():
            named[n].copy_(value)
    for n, frozen in payload["frozen"].items():
        named[n].requires_grad_(not frozen)
    return model
