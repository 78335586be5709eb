import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from gradcheck_util import analytic_and_fd, relative_error, ten_scalars, toy_model
from iclkit.errors import IllegalStateError, InputContractError
from iclkit.losses import (
    Batch,
    ClassCounts,
    LossConfig,
    auxiliary_loss,
    class_balanced_focal,
    class_balanced_focal_from_logits,
    class_balanced_weight,
    composite_new,
    composite_old,
    distillation_from_logits,
    distillation_loss,
    margin_loss,
)
from iclkit.model import BackboneSpec, ExpandingNet, Phase

f64 = dict(dtype=torch.float64)


# -- class-balanced focal -----------------------------------------------------
def test_focal_reduces_to_cross_entropy_at_half():
    loss = class_balanced_focal(torch.tensor([0.5], **f64), torch.tensor([7.0], **f64), 0.0, 0.0)
    assert loss.item() == pytest.approx(math.log(2), abs=1e-12)
    assert loss.item() == pytest.approx(0.69315, abs=1e-5)


def test_focal_gamma_two_hand_value():
    loss = class_balanced_focal(torch.tensor([0.5], **f64), torch.tensor([3.0], **f64), 0.0, 2.0)
    assert loss.item() == pytest.approx(0.25 * math.log(2), abs=1e-12)
    assert loss.item() == pytest.approx(0.17329, abs=1e-5)


def test_class_balanced_weight_hand_value():
    w = class_balanced_weight(torch.tensor([2.0], **f64), 0.9)
    assert w.item() == pytest.approx(0.1 / 0.19, abs=1e-12)
    assert w.item() == pytest.approx(0.52632, abs=1e-5)
    assert class_balanced_weight(torch.tensor([5.0]), 0.0).item() == 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_focal_reductions_on_random_batches(seed):
    gen = torch.Generator().manual_seed(seed)
    logits = torch.randn(16, 5, generator=gen, **f64) * 3
    y = torch.randint(0, 5, (16,), generator=gen)
    n = torch.randint(1, 200, (16,), generator=gen).double()
    ce = torch.nn.functional.cross_entropy(logits, y)
    assert abs(class_balanced_focal_from_logits(logits, y, n, 0.0, 0.0).item() - ce.item()) < 1e-8
    p = torch.softmax(logits, dim=1).gather(1, y.view(-1, 1)).squeeze(1)
    focal = (-(1 - p) ** 2 * torch.log(p)).mean()
    assert abs(class_balanced_focal_from_logits(logits, y, n, 0.0, 2.0).item() - focal.item()) < 1e-8
    assert abs(class_balanced_focal(p, n, 0.0, 2.0).item() - focal.item()) < 1e-8
    assert class_balanced_focal(p, n, 0.9, 1.0).item() >= 0


def test_focal_guards():
    assert math.isfinite(class_balanced_focal(torch.tensor([0.0], **f64), torch.tensor([1.0], **f64), 0.5, 1.0).item())
    with pytest.raises(InputContractError):
        class_balanced_focal(torch.tensor([0.5]), torch.tensor([0.0]), 0.5, 1.0)
    counts = ClassCounts({0: 3, 1: 4})
    with pytest.raises(InputContractError):
        counts.per_sample([0, 2])
    assert counts.per_sample([1, 0, 1]).tolist() == [4.0, 3.0, 4.0]


def test_loss_config_invariants():
    with pytest.raises(InputContractError):
        LossConfig(beta_new=1.0)
    with pytest.raises(InputContractError):
        LossConfig(gamma_old=-0.1)
    with pytest.raises(InputContractError):
        LossConfig(top_k=0)
    with pytest.raises(InputContractError):
        LossConfig(lambda3=-1)


# -- auxiliary ----------------------------------------------------------------
def _aux_model():
    spec = BackboneSpec(input_shape=(2,), hidden=(2,), split=1, d=2)
    m = ExpandingNet(spec, [0], dtype=torch.float64, seed=1)
    m.expand([1])
    with torch.no_grad():
        m.block(0, 1).copy_(torch.tensor([[1.0, 0.0]]))
        m.block(1, 1).copy_(torch.tensor([[-1.0, 0.0]]))
    return m


def test_aux_hand_value_and_isolation():
    m = _aux_model()
    h = torch.tensor([[1.0, 0.0]], **f64)
    y = torch.tensor([0])
    n = torch.tensor([10.0], **f64)
    loss = auxiliary_loss(m, h, y, n, 0.0, 0.0)
    assert loss.item() == pytest.approx(-math.log(1 / (1 + math.exp(-2))), abs=1e-12)
    assert loss.item() == pytest.approx(0.12693, abs=1e-5)
    with torch.no_grad():
        m.block(0, 0).mul_(7)
        m.block(1, 0).add_(1)
    assert auxiliary_loss(m, h, y, n, 0.0, 0.0).item() == loss.item()


def test_aux_matches_focal_on_same_probabilities():
    m = _aux_model()
    h = torch.randn(9, 2, **f64)
    y = torch.randint(0, 2, (9,))
    n = torch.randint(1, 50, (9,)).double()
    p = m.aux_probabilities(h).gather(1, y.view(-1, 1)).squeeze(1)
    a = auxiliary_loss(m, h, y, n, 0.9, 2.0).item()
    b = class_balanced_focal(p, n, 0.9, 2.0).item()
    assert abs(a - b) < 1e-12


def test_aux_rejected_at_step_one():
    m = ExpandingNet(BackboneSpec(input_shape=(2,), hidden=(2,), d=2), [0, 1])
    with pytest.raises(IllegalStateError):
        auxiliary_loss(m, torch.ones(1, 2), torch.tensor([0]), torch.tensor([1.0]), 0.0, 0.0)


# -- distillation --------------------------------------------------------------
def test_distillation_hand_value_and_scaling():
    old = torch.tensor([[0.7, 0.3]], **f64)
    new = torch.tensor([[0.6, 0.4]], **f64)
    expected = 2 * (0.7 * math.log(7 / 6) + 0.3 * math.log(3 / 4))
    got = distillation_loss(old, new, 2).item()
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(0.043202, abs=1e-6)
    old4 = torch.tensor([[0.7, 0.3, 0.0, 0.0]], **f64)
    new4 = torch.tensor([[0.6, 0.4, 0.0, 0.0]], **f64)
    assert distillation_loss(old4, new4, 4).item() == pytest.approx(2 * got, abs=1e-12)


def test_distillation_zero_iff_equal():
    p = torch.softmax(torch.randn(8, 5, **f64), dim=1)
    assert distillation_loss(p, p, 5).item() < 1e-10
    q = torch.softmax(torch.randn(8, 5, **f64), dim=1)
    assert distillation_loss(p, q, 5).item() > 0
    logits = torch.randn(8, 5, **f64)
    assert distillation_from_logits(torch.softmax(logits, 1), logits).item() < 1e-10


def test_distillation_rejects_unnormalised():
    with pytest.raises(InputContractError):
        distillation_loss(torch.tensor([[0.7, 0.4]]), torch.tensor([[0.5, 0.5]]), 2)


# -- margin ---------------------------------------------------------------------
def _sims(gt, new):
    # row layout: [true old class, other old class, new classes...]
    return torch.tensor([[gt, 0.0] + list(new)], **f64)


def test_margin_hand_values():
    y = torch.tensor([0])
    assert margin_loss(_sims(0.9, [0.5, 0.3]), y, [2, 3], 0.2, 2).item() == 0.0
    assert margin_loss(_sims(0.4, [0.5, 0.3]), y, [2, 3], 0.2, 2).item() == pytest.approx(0.4, abs=1e-12)
    assert margin_loss(_sims(0.51, [0.5, 0.3]), y, [2, 3], 0.0, 2).item() == 0.0


def test_margin_topk_and_memory_mask():
    sims = torch.tensor([[0.1, 0.0, 0.5, 0.4, 0.3], [0.0, 0.2, 0.9, 0.9, 0.9]], **f64)
    y = torch.tensor([0, 1])
    # k=1: only the best new class counts
    assert margin_loss(sims[:1], y[:1], [2, 3, 4], 0.0, 1).item() == pytest.approx(0.4, abs=1e-12)
    # non-memory rows are ignored; no memory rows -> 0
    mask = torch.tensor([True, False])
    assert margin_loss(sims, y, [2, 3, 4], 0.0, 2, mask).item() == pytest.approx(0.4 + 0.3, abs=1e-12)
    assert margin_loss(sims, y, [2, 3, 4], 0.0, 2, torch.tensor([False, False])).item() == 0.0
    # k larger than the number of new classes is capped
    assert margin_loss(sims[:1], y[:1], [2], 0.0, 5).item() == pytest.approx(0.4, abs=1e-12)


def test_margin_rejects_new_class_targets():
    with pytest.raises(InputContractError):
        margin_loss(_sims(0.4, [0.5]), torch.tensor([2]), [2], 0.2, 1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1), st.floats(0, 1))
def test_margin_monotone_in_m(seed, m1, m2):
    gen = torch.Generator().manual_seed(seed)
    sims = torch.rand(6, 6, generator=gen, **f64) * 2 - 1
    y = torch.randint(0, 3, (6,), generator=gen)
    lo, hi = sorted((m1, m2))
    a = margin_loss(sims, y, [3, 4, 5], lo, 2).item()
    b = margin_loss(sims, y, [3, 4, 5], hi, 2).item()
    assert 0 <= a <= b + 1e-15


# -- composites -------------------------------------------------------------------
def _batch(m, seed, size=8):
    gen = torch.Generator().manual_seed(seed + 99)
    x = torch.randn(size, 3, generator=gen, **f64)
    y = torch.tensor([0, 1, 0, 1, 2, 2, 2, 2][:size])
    is_mem = y < 2
    n = torch.tensor([2.0 if v < 2 else 4.0 for v in y.tolist()], **f64)
    return Batch(x, y, is_mem, n)


def _oracle_components(m, teacher, b, beta, gamma, cfg):
    z, h = m.features(b.x)
    sims = m.similarities(z)
    logits = m.temperature * sims
    cls = class_balanced_focal(torch.softmax(logits, 1).gather(1, b.y.view(-1, 1)).squeeze(1), b.n, beta, gamma)
    aux = class_balanced_focal(m.aux_probabilities(h).gather(1, b.y.view(-1, 1)).squeeze(1), b.n, beta, gamma)
    dist = distillation_loss(teacher.probabilities(b.x), torch.softmax(logits[:, :2], 1), 2)
    marg = margin_loss(sims, b.y, [2], cfg.margin_m, cfg.top_k, b.is_memory)
    return cls, aux, dist, marg


def test_composites_equal_component_sums():
    m, teacher = toy_model(0)
    b = _batch(m, 0)
    cfg = LossConfig(margin_m=0.7)
    cls, aux, dist, marg = _oracle_components(m, teacher, b, cfg.beta_new, cfg.gamma_new, cfg)
    got = composite_new(b, m, teacher, cfg).item()
    assert abs(got - (cls + aux + dist + marg).item()) < 1e-9
    cls_o, _, dist_o, marg_o = _oracle_components(m, teacher, b, cfg.beta_old, cfg.gamma_old, cfg)
    assert abs(composite_old(b, m, teacher, cfg).item() - (cls_o + dist_o + marg_o).item()) < 1e-9


def test_composite_zero_weights_reduce_to_class_loss():
    m, teacher = toy_model(1)
    b = _batch(m, 1)
    cfg = LossConfig(lambda1=0, lambda2=0, lambda3=0, lambda4=0, lambda5=0)
    total, parts = composite_new(b, m, teacher, cfg, return_parts=True)
    assert abs(total.item() - parts["class"].item()) < 1e-12
    total, parts = composite_old(b, m, teacher, cfg, return_parts=True)
    assert abs(total.item() - parts["class"].item()) < 1e-12


def test_composite_old_ignores_new_phase_hyperparameters():
    m, teacher = toy_model(2)
    b = _batch(m, 2)
    a = composite_old(b, m, teacher, LossConfig(beta_new=0.1, gamma_new=0.0)).item()
    c = composite_old(b, m, teacher, LossConfig(beta_new=0.95, gamma_new=3.0)).item()
    assert a == c


def test_composite_vanishes_on_confident_correct_batch():
    spec = BackboneSpec(input_shape=(2,), hidden=(2,), split=1, d=2)
    m = ExpandingNet(spec, [0], dtype=torch.float64, seed=0)
    with torch.no_grad():
        m.low[0].weight.copy_(torch.eye(2))
        m.low[0].bias.zero_()
        m.branches[0][0].weight.copy_(torch.eye(2))
        m.branches[0][0].bias.zero_()
        m.rho.fill_(math.log(60.0))
    from iclkit.model import snapshot_for_distillation

    teacher = snapshot_for_distillation(m)
    m.expand([1])
    with torch.no_grad():
        m.block(0, 0).copy_(torch.tensor([[1.0, 0.0]]))
        m.block(0, 1).copy_(torch.tensor([[1.0, 0.0]]))
        m.block(1, 0).copy_(torch.tensor([[0.0, 1.0]]))
        m.block(1, 1).copy_(torch.tensor([[0.0, 1.0]]))
    x = torch.tensor([[5.0, 0.0], [0.0, 5.0]], **f64)
    b = Batch(x, torch.tensor([0, 1]), torch.tensor([True, False]), torch.tensor([1.0, 1.0], **f64))
    cfg = LossConfig(margin_m=0.5, gamma_new=2.0)
    total, parts = composite_new(b, m, teacher, cfg, return_parts=True)
    assert parts["marg"].item() == 0.0
    assert parts["dist"].item() < 1e-12
    assert parts["class"].item() < 1e-12
    # the auxiliary head has no temperature, so its loss is bounded away from 0
    assert abs(total.item() - parts["aux"].item()) < 1e-12
    assert composite_new(b, m, teacher, LossConfig(lambda1=0.0, margin_m=0.5)).item() < 1e-12


def test_composites_require_step_two():
    m = ExpandingNet(BackboneSpec(input_shape=(3,), hidden=(4,), d=2), [0, 1], dtype=torch.float64)
    from iclkit.model import snapshot_for_distillation

    b = Batch(torch.zeros(1, 3, **f64), [0], [False], torch.ones(1, **f64))
    with pytest.raises(IllegalStateError):
        composite_new(b, m, snapshot_for_distillation(m), LossConfig())


# -- gradients ----------------------------------------------------------------------
def _component_fns(m, teacher, b, cfg):
    def class_fn():
        z, _ = m.features(b.x)
        return class_balanced_focal_from_logits(m.logits(z), b.y, b.n, cfg.beta_new, cfg.gamma_new)

    def aux_fn():
        _, h = m.features(b.x)
        return auxiliary_loss(m, h, b.y, b.n, cfg.beta_new, cfg.gamma_new)

    def dist_fn():
        z, _ = m.features(b.x)
        return distillation_from_logits(teacher.probabilities(b.x), m.logits(z)[:, :2])

    def marg_fn():
        z, _ = m.features(b.x)
        return margin_loss(m.similarities(z), b.y, [2], cfg.margin_m, cfg.top_k, b.is_memory)

    return {
        "class": class_fn,
        "aux": aux_fn,
        "dist": dist_fn,
        "marg": marg_fn,
        "new": lambda: composite_new(b, m, teacher, cfg),
        "old": lambda: composite_old(b, m, teacher, cfg),
    }


@pytest.mark.parametrize("name", ["class", "aux", "dist", "marg", "new", "old"])
def test_gradients_match_central_differences(name):
    cfg = LossConfig(margin_m=1.0)
    worst = 0.0
    for point in range(20):
        m, teacher = toy_model(point)
        m.set_phase(Phase.NEW)  # all ten handles trainable; freezing is tested separately
        b = _batch(m, point)
        fn = _component_fns(m, teacher, b, cfg)[name]
        analytic, fd = analytic_and_fd(fn, ten_scalars(m))
        worst = max(worst, relative_error(analytic, fd))
    assert worst < 1e-4


def test_old_phase_gradients_absent_for_branch_and_u():
    m, teacher = toy_model(3)
    m.set_phase(Phase.OLD)
    composite_old(_batch(m, 3), m, teacher, LossConfig()).backward()
    for p in list(m.new_branch_parameters().values()) + list(m.u_parameters().values()):
        assert p.grad is None
    for p in m.old_parameters().values():
        assert p.grad is None
    assert m.rho.grad is not None and m.block(1, 0).grad is not None
