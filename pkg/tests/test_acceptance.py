"""Acceptance suite: one test per primary criterion, each reporting a PASS/FAIL line.

The lines are collected in ``VERDICTS`` and echoed in the terminal summary
(see ``conftest.py``), so ``pytest -v`` shows them without ``-s``.
"""
from __future__ import annotations

import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from gradcheck_util import analytic_and_fd, relative_error, ten_scalars, toy_model
from iclkit.data import SkewSpec, generate_skewed, make_stream
from iclkit.herding import BACKEND, herding_select
from iclkit.losses import (
    LossConfig,
    class_balanced_focal_from_logits,
    distillation_loss,
    margin_loss,
)
from iclkit.metrics import AccuracyMatrix, acc_new_old, forgetting, overall_acc
from iclkit.model import BackboneSpec, Phase
from iclkit.trainer import Learner, TrainPlan, run_stream
from test_herding import brute_force_greedy
from test_losses import _batch, _component_fns
from test_metrics import oracle as metric_oracle

VERDICTS: list[str] = []

SEEDS = (0, 1, 2)
DESK_EPOCHS = 20
DESK_SPEC = BackboneSpec(input_shape=(16,), hidden=(64, 64), split=1, d=16)


def verdict(name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    VERDICTS.append(line)
    print(line)
    assert ok, line


# -- shared desk-scale runs ------------------------------------------------------
_DATA = {}
_RUNS: dict[tuple[str, str], list] = {}
_ELAPSED: dict[tuple[str, str], float] = {}


def desk_stream(seed: int):
    if "data" not in _DATA:
        _DATA["data"] = generate_skewed(SkewSpec(), seed=0)  # 8 skewed classes, 16-D
    return make_stream(_DATA["data"], 4, 1, class_order_seed=seed)


def desk_runs(learner: str, variant: str = "full") -> list:
    key = (learner, variant)
    if key not in _RUNS:
        start = time.perf_counter()
        _RUNS[key] = [
            run_stream(desk_stream(s), DESK_SPEC, TrainPlan(epochs=DESK_EPOCHS, seed=s), learner, variant)
            for s in SEEDS
        ]
        _ELAPSED[key] = time.perf_counter() - start
    return _RUNS[key]


def seed_mean(results, metric: str) -> float:
    return float(np.mean([r.metrics[metric] for r in results]))


# -- criteria --------------------------------------------------------------------------
def test_gradient_correctness():
    start = time.perf_counter()
    cfg = LossConfig(margin_m=1.0)
    worst = {}
    for point in range(20):
        m, teacher = toy_model(point)
        m.set_phase(Phase.NEW)
        fns = _component_fns(m, teacher, _batch(m, point), cfg)
        for name, fn in fns.items():
            analytic, fd = analytic_and_fd(fn, ten_scalars(m))
            worst[name] = max(worst.get(name, 0.0), relative_error(analytic, fd))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 30
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict("gradient correctness", ok, f"max rel err [{detail}] (< 1e-4), {elapsed:.1f}s (< 30s)")


def test_freezing_contract(toy_stream):
    spec = BackboneSpec(input_shape=(16,), hidden=(24, 24), split=1, d=16)
    learner = Learner(spec, TrainPlan(epochs=2, memory_budget=8))
    violations = []
    old_passes = 0
    original = Learner._update

    def guarded(self, opt, loss, phase, epoch, step):
        guard = {**self.model.new_branch_parameters(), **self.model.u_parameters()} if phase == "old" else {}
        before = {k: p.detach().numpy().tobytes() for k, p in guard.items()}
        original(self, opt, loss, phase, epoch, step)
        if any(guard[k].detach().numpy().tobytes() != v for k, v in before.items()):
            violations.append(("old pass", step, epoch))

    def state(model):
        return {k: p.detach().numpy().tobytes() for k, p in model.named_parameters() if k != "rho"}

    Learner._update = guarded
    try:
        learner.train_initial(toy_stream.steps[0])
        for t, step_data in enumerate(toy_stream.steps[1:], start=2):
            before = state(learner.model)
            learner.train_incremental_step(step_data)
            after = state(learner.model)
            if any(after[k] != v for k, v in before.items()):
                violations.append(("step", t))
            old_passes += sum(1 for r in learner.logs if r["step"] == t and r["phase"] == "old")
    finally:
        Learner._update = original
    ok = not violations and old_passes > 0
    verdict("freezing contract", ok,
            f"{toy_stream.T - 1} incremental steps, {old_passes} OLD passes, violations={violations}")


def test_shape_law(toy_stream):
    spec = BackboneSpec(input_shape=(16,), hidden=(24, 24), split=1, d=16)
    learner = Learner(spec, TrainPlan(epochs=1, memory_budget=8))
    shapes, expected = [], []
    for t, step_data in enumerate(toy_stream.steps, start=1):
        if t == 1:
            learner.train_initial(step_data)
        else:
            learner.train_incremental_step(step_data)
        shapes.append(tuple(learner.model.weight().shape))
        expected.append((4 + (t - 1), t * 16))
    verdict("shape law", shapes == expected, f"observed {shapes}, expected {expected}")


def test_metric_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        T = int(rng.integers(1, 7))
        rows = [rng.random(t).tolist() for t in range(1, T + 1)]
        m = AccuracyMatrix.from_rows(rows)
        got = (overall_acc(m), forgetting(m), *acc_new_old(m))
        worst = max(worst, max(abs(a - b) for a, b in zip(got, metric_oracle(rows))))
    hand = AccuracyMatrix.from_rows([[0.9], [0.8, 0.7], [0.85, 0.6, 0.9]])
    got = (overall_acc(hand), forgetting(hand), *acc_new_old(hand))
    want = (0.81111, 0.05833, 0.83333, 0.85)
    hand_err = max(abs(a - b) for a, b in zip(got, want))
    # the hand targets are printed to 5 decimals; compare the exact fractions at 1e-9
    exact = (73 / 90, 7 / 120, 5 / 6, 0.85)
    exact_err = max(abs(a - b) for a, b in zip(got, exact))
    ok = worst < 1e-12 and exact_err < 1e-9 and hand_err < 1e-5
    verdict("metric oracle", ok,
            f"100 random matrices max err {worst:.1e} (< 1e-12); T=3 example {tuple(round(v, 5) for v in got)}, "
            f"err vs exact fractions {exact_err:.1e} (< 1e-9)")


def test_herding_oracle():
    rng = np.random.default_rng(99)
    mismatches = 0
    prefix_failures = 0
    for _ in range(200):
        n = int(rng.integers(1, 9))
        d = int(rng.integers(1, 5))
        feats = rng.normal(size=(n, d))
        budget = int(rng.integers(1, n + 1))
        if herding_select(feats, budget) != brute_force_greedy(feats.tolist(), budget):
            mismatches += 1
        full = herding_select(feats, n)
        if any(herding_select(feats, b) != full[:b] for b in range(1, n + 1)):
            prefix_failures += 1
    ok = mismatches == 0 and prefix_failures == 0
    verdict("herding oracle", ok,
            f"backend={BACKEND}, 200 trials, {mismatches} oracle mismatches, {prefix_failures} prefix failures")


def test_loss_reductions():
    gen = torch.Generator().manual_seed(5)
    ce_err = 0.0
    for _ in range(50):
        logits = torch.randn(16, 6, generator=gen, dtype=torch.float64) * 3
        y = torch.randint(0, 6, (16,), generator=gen)
        n = torch.randint(1, 50, (16,), generator=gen).to(torch.float64)
        focal = class_balanced_focal_from_logits(logits, y, n, 0.0, 0.0)
        ce_err = max(ce_err, abs(focal.item() - F.cross_entropy(logits, y).item()))
    dist_max = 0.0
    for _ in range(50):
        p = torch.softmax(torch.randn(16, 5, generator=gen, dtype=torch.float64) * 2, dim=1)
        dist_max = max(dist_max, abs(distillation_loss(p, p.clone(), 5).item()))
    marg_max = 0.0
    m = 0.5
    for _ in range(50):
        sims = torch.rand(12, 7, generator=gen, dtype=torch.float64) * 1.4 - 0.9
        y = torch.randint(0, 4, (12,), generator=gen)
        new_rows = [4, 5, 6]
        gt = sims[:, new_rows].max(dim=1).values + m + torch.rand(12, generator=gen, dtype=torch.float64) * 0.3
        sims[torch.arange(12), y] = gt
        marg_max = max(marg_max, margin_loss(sims, y, new_rows, m, 2, torch.ones(12, dtype=torch.bool)).item())
    ok = ce_err < 1e-8 and dist_max < 1e-10 and marg_max == 0.0
    verdict("loss reductions", ok,
            f"|focal - CE| {ce_err:.1e} (< 1e-8), dist(identical) {dist_max:.1e} (< 1e-10), "
            f"margin with gap >= m {marg_max:.1e} (== 0)")


@pytest.mark.slow
def test_desk_scale_efficacy():
    full = desk_runs("proposed")
    ft = desk_runs("finetune_only")
    rp = desk_runs("replay_only")
    elapsed = sum(_ELAPSED[k] for k in (("proposed", "full"), ("finetune_only", "full"), ("replay_only", "full")))
    acc = {k: seed_mean(v, "acc") for k, v in (("full", full), ("ft", ft), ("rp", rp))}
    fgt = {k: seed_mean(v, "fgt") for k, v in (("full", full), ("ft", ft), ("rp", rp))}
    a = acc["full"] - acc["ft"] >= 0.20
    b = fgt["ft"] - fgt["full"] >= 0.10
    c = acc["full"] > acc["rp"]
    ok = a and b and c and elapsed < 600
    verdict(
        "desk-scale efficacy", ok,
        f"Acc full {acc['full']:.4f} / finetune {acc['ft']:.4f} / replay {acc['rp']:.4f}; "
        f"Fgt full {fgt['full']:.4f} / finetune {fgt['ft']:.4f}; "
        f"(a) {'ok' if a else 'no'} (b) {'ok' if b else 'no'} (c) {'ok' if c else 'no'}; {elapsed:.0f}s (< 600s)",
    )


@pytest.mark.slow
def test_ablation_ordering():
    full = desk_runs("proposed", "full")
    runs = {v: desk_runs("proposed", v) for v in
            ("no_old_objective", "no_aux", "no_dist", "no_margin", "no_expansion")}
    mean = lambda res, k: seed_mean(res, k)  # noqa: E731

    noold_new = mean(runs["no_old_objective"], "acc_new") >= mean(full, "acc_new")
    noold_old = mean(runs["no_old_objective"], "acc_old") <= mean(full, "acc_old")

    lesions = ("no_aux", "no_dist", "no_margin")
    largest = []
    for s in range(len(SEEDS)):
        drops = {v: full[s].metrics["acc_old"] - runs[v][s].metrics["acc_old"] for v in lesions}
        largest.append(max(drops, key=drops.get))
    margin_ok = sum(v == "no_margin" for v in largest) >= 2

    noexp = mean(runs["no_expansion"], "acc_old") < mean(full, "acc_old")

    detail = (
        f"no_old_objective Acc_new {mean(runs['no_old_objective'], 'acc_new'):.4f} vs full "
        f"{mean(full, 'acc_new'):.4f} ({'ok' if noold_new else 'no'}), Acc_old "
        f"{mean(runs['no_old_objective'], 'acc_old'):.4f} vs {mean(full, 'acc_old'):.4f} "
        f"({'ok' if noold_old else 'no'}); largest single-loss Acc_old drop per seed {largest} "
        f"({'ok' if margin_ok else 'no'}); no_expansion Acc_old {mean(runs['no_expansion'], 'acc_old'):.4f} "
        f"vs full {mean(full, 'acc_old'):.4f} ({'ok' if noexp else 'no'})"
    )
    verdict("ablation ordering", noold_new and noold_old and margin_ok and noexp, detail)


@pytest.mark.slow
def test_end_to_end_determinism(tmp_path):
    first = desk_runs("proposed")[0]
    again = run_stream(desk_stream(SEEDS[0]), DESK_SPEC, TrainPlan(epochs=DESK_EPOCHS, seed=SEEDS[0]))
    first.matrix.to_csv(tmp_path / "a.csv")
    again.matrix.to_csv(tmp_path / "b.csv")
    same = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    verdict("end-to-end determinism", same, "accuracy_matrix.csv byte-identical across two executions"
            if same else "accuracy matrices differ between executions")
