import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forgemorph.distill import (
    DistillParams,
    build_schedule,
    cross_entropy,
    global_objective,
    kd_grad,
    kd_loss,
    log_softmax,
    lr_decay,
    softmax,
    total_loss,
)
from forgemorph.exceptions import DimMismatch, EmptyBlocks
from forgemorph.morph import partition_blocks


def kl_oracle(t, s, tau):
    """Direct double-loop softmax and KL, no vectorisation."""
    def soft(x):
        m = max(x)
        e = [math.exp((v - m) / tau) for v in x]
        z = sum(e)
        return [v / z for v in e]
    p, q = soft(t), soft(s)
    return tau * tau * sum(pi * (math.log(pi) - math.log(qi)) for pi, qi in zip(p, q))


# -- losses ---------------------------------------------------------------------

def test_cross_entropy_limits():
    for c in (2, 5, 10, 1000):
        assert cross_entropy(np.eye(c)[0], np.zeros(c)) == pytest.approx(math.log(c), abs=1e-12)
    assert cross_entropy([0, 1, 0], [0.0, 800.0, 0.0]) < 1e-12
    assert cross_entropy([0, 1, 0], [0.0, 800.0, 0.0]) >= 0


def test_cross_entropy_direct_sum():
    rng = np.random.default_rng(1)
    for _ in range(20):
        z = rng.normal(size=5)
        y = np.eye(5)[rng.integers(5)]
        direct = -sum(yi * (zi - math.log(sum(math.exp(v) for v in z))) for yi, zi in zip(y, z))
        assert cross_entropy(y, z) == pytest.approx(direct, rel=1e-12)


def test_kd_three_class_example():
    assert kd_loss([1, 0, 0], [0, 0, 1], 2.0) == pytest.approx(kl_oracle([1, 0, 0], [0, 0, 1], 2.0), rel=1e-12)


def test_kd_identical_and_large_tau():
    rng = np.random.default_rng(2)
    x = rng.normal(size=7)
    assert kd_loss(x, x, 3.0) == 0.0
    t, s = rng.normal(size=(2, 7)) * 5
    tau = 1e6
    # the softened distributions go uniform, so the unscaled divergence vanishes
    assert np.abs(softmax(t, tau) - 1 / 7).max() < 1e-6
    assert kd_loss(t, s, tau) / tau ** 2 == pytest.approx(0.0, abs=1e-6)
    # the tau**2 factor keeps the loss finite: half the centred squared logit gap
    d = (t - s) - (t - s).mean()
    assert kd_loss(t, s, tau) == pytest.approx(0.5 * np.mean(d ** 2), rel=1e-3)


def test_kd_matches_oracle_1000_pairs():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        c = int(rng.integers(2, 12))
        t, s = rng.normal(scale=3, size=(2, c))
        tau = float(rng.uniform(0.5, 8))
        ref = kl_oracle(list(t), list(s), tau)
        got = kd_loss(t, s, tau)
        assert abs(got - ref) <= 1e-9 * max(abs(ref), 1e-300) or abs(got - ref) < 1e-15


def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        up, dn = x.copy(), x.copy()
        up.flat[i] += h
        dn.flat[i] -= h
        g.flat[i] = (f(up) - f(dn)) / (2 * h)
    return g


@pytest.mark.parametrize("batch", [None, 4])
def test_kd_gradient_check(batch):
    rng = np.random.default_rng(4)
    shape = (6,) if batch is None else (batch, 6)
    for tau in (0.7, 1.0, 4.0):
        t, s = rng.normal(size=(2, *shape))
        num = central_diff(lambda x: kd_loss(t, x, tau), s)
        ana = kd_grad(t, s, tau)
        assert np.allclose(ana, num, rtol=1e-5, atol=1e-10)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20), st.floats(0.1, 100))
def test_softmax_normalised(x, tau):
    assert softmax(x, tau).sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(log_softmax(x, tau) <= 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 8).flatmap(lambda c: st.tuples(
    st.lists(st.floats(-20, 20), min_size=c, max_size=c),
    st.lists(st.floats(-20, 20), min_size=c, max_size=c))), st.floats(0.1, 10))
def test_kd_non_negative(pair, tau):
    assert kd_loss(pair[0], pair[1], tau) >= 0


def test_dimension_checks():
    with pytest.raises(DimMismatch):
        kd_loss([1, 2], [1, 2, 3], 1.0)
    with pytest.raises(DimMismatch):
        cross_entropy([1, 0], [0.0, 1.0, 2.0])
    with pytest.raises(DimMismatch):
        cross_entropy([1, 0], [0.0, float("nan")])
    with pytest.raises(ValueError):
        kd_loss([1, 2], [1, 2], 0.0)


def test_total_loss_and_decay():
    assert total_loss(2.0, 4.0, 1.0) == 2.0
    assert total_loss(2.0, 4.0, 0.0) == 4.0
    assert total_loss(2.0, 4.0, 0.5) == 3.0
    with pytest.raises(ValueError):
        total_loss(1, 1, 1.5)
    assert lr_decay(0.3, 0.9, 0) == 0.3
    assert lr_decay(0.1, 0.5, 3) == pytest.approx(0.0125)
    seq = [lr_decay(0.1, 0.8, t) for t in range(10)]
    assert all(a > b for a, b in zip(seq, seq[1:]))
    with pytest.raises(ValueError):
        lr_decay(0.1, 1.0, 2)


def test_global_objective_literal_sum():
    assert global_objective([(1.0, 2.0), (0.5, 0.25)]) == 3.75


def test_params_validation():
    assert DistillParams().lam == 0.5 and DistillParams().tau == 4.0
    for bad in (dict(lam=1.2), dict(tau=0), dict(gamma=1.0), dict(alpha0=0), dict(epochs=0)):
        with pytest.raises(ValueError):
            DistillParams(**bad)


# -- schedules ------------------------------------------------------------------

def test_depth_schedule(mnist):
    sched = build_schedule(mnist, partition_blocks(mnist), "depth")
    assert [s.active_blocks for s in sched.stages] == [("A",), ("A", "B"), ("A", "B", "C")]
    assert [s.active_widths for s in sched.stages] == [(8,), (8, 16), (8, 16, 32)]
    assert [s.decayed_blocks for s in sched.stages] == [(), ("A",), ("A", "B")]
    assert sched.stages[-1].student_epochs == 0
    assert sched.stages[0].teacher_epochs == sched.stages[0].student_epochs == 10


def test_width_schedule(mnist):
    sched = build_schedule(mnist, partition_blocks(mnist), "width", fractions=(0.5, 1.0))
    assert [s.active_widths for s in sched.stages] == [(4, 8, 16), (8, 16, 32)]
    with pytest.raises(ValueError):
        build_schedule(mnist, partition_blocks(mnist), "width", fractions=(1.0, 0.5))
    with pytest.raises(ValueError):
        build_schedule(mnist, partition_blocks(mnist), "width", fractions=(0.25, 0.5))


def test_single_block_schedule(mnist):
    sched = build_schedule(mnist, partition_blocks(mnist, []), "depth")
    assert len(sched.stages) == 1
    assert sched.stages[0].student_epochs == 0


def test_schedule_errors(mnist):
    with pytest.raises(EmptyBlocks):
        build_schedule(mnist, [], "depth")
    with pytest.raises(ValueError):
        build_schedule(mnist, partition_blocks(mnist), "sideways")


def test_schedule_json(mnist):
    params = DistillParams(alpha0=0.2, gamma=0.5, epochs=3)
    doc = json.loads(build_schedule(mnist, partition_blocks(mnist), "depth", params).to_json())
    stage = doc["stages"][1]
    assert {"active_blocks", "active_widths", "teacher_epochs", "student_epochs",
            "lambda", "tau", "lr_plan"} <= set(stage)
    plan = stage["lr_plan"]
    assert [p["alpha"] for p in plan] == pytest.approx([0.2, 0.02, 0.002])
    assert [p["earlier_block_lr"] for p in plan] == pytest.approx([0.1, 0.05, 0.025])


# -- toy trainer executing a schedule --------------------------------------------

def test_toy_softmax_regression_follows_schedule(mnist):
    """A linear softmax model whose feature groups stand in for blocks.

    The teacher uses every group; the stage-i student is a copy of the first
    i groups, trained on total_loss with kd_grad from the teacher and merged
    back into the network when its stage ends.
    """
    rng = np.random.default_rng(0)
    groups, per, classes, n = 3, 4, 3, 300
    X = rng.normal(size=(n, groups * per))
    w_true = rng.normal(size=(groups * per, classes)) * 2
    y = np.eye(classes)[np.argmax(X @ w_true, axis=1)]
    params = DistillParams(alpha0=0.5, gamma=0.9, epochs=20)
    sched = build_schedule(mnist, partition_blocks(mnist), "depth", params)

    def student_total(W, S, cols, stage):
        zs = X[:, cols] @ S
        return total_loss(cross_entropy(y, zs), kd_loss(X @ W, zs, stage.tau), stage.lam)

    W = np.zeros((groups * per, classes))
    stage_losses = []
    for i, stage in enumerate(sched.stages, start=1):
        cols = slice(0, i * per)
        S = W[cols].copy()
        S0 = S.copy()
        for e in range(max(stage.teacher_epochs, stage.student_epochs)):
            if e < stage.teacher_epochs:
                W -= stage.lr_plan[e]["earlier_block_lr"] * 10 * X.T @ (softmax(X @ W) - y) / n
            if e < stage.student_epochs:
                zs = X[:, cols] @ S
                g = stage.lam * (softmax(zs) - y) / n + (1 - stage.lam) * kd_grad(X @ W, zs, stage.tau)
                S -= stage.lr_plan[e]["alpha"] * 10 * X[:, cols].T @ g
        if stage.student_epochs:
            # judged against the same, final teacher
            assert student_total(W, S, cols, stage) < student_total(W, S0, cols, stage)
            if stage.merge_after:
                W[cols] = S
        zs = X[:, cols] @ W[cols]
        l_gt = cross_entropy(y, zs)
        stage_losses.append((l_gt, total_loss(l_gt, kd_loss(X @ W, zs, stage.tau), stage.lam)))
    assert np.isfinite(global_objective(stage_losses))
    assert stage_losses[-1][0] < stage_losses[0][0]
    acc = np.mean(np.argmax(X @ W, axis=1) == np.argmax(y, axis=1))
    assert acc > 0.8
