import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stars import tensor as T
from stars.errors import ConfigError, ContractViolation, ParameterError, TrainingAbort
from stars.graph import Skeleton, chain_skeleton
from stars.objectives import (COMPONENTS, CappedVelocityPrior, LossWeights, Objectives, limb_lengths,
                              loss_diversity, loss_history, loss_limb, loss_multimodal, loss_reconstruction,
                              multimodal_ground_truth, pose_prior_penalty, total_loss)


def val(t):
    return float(T.as_tensor(t).data)


def _offset(Y, c):
    out = Y.copy()
    out[0, 0, 0] += c
    return out


Y = np.random.default_rng(0).normal(size=(3, 2, 3))


def test_reconstruction():
    assert val(loss_reconstruction(np.stack([Y, Y + 1]), Y)) == 0.0
    assert val(loss_reconstruction(np.stack([_offset(Y, 3), _offset(Y, 2)]), Y)) == pytest.approx(4.0, abs=1e-12)
    p = _offset(Y, 1.5)[None]
    assert val(loss_reconstruction(p, Y)) == pytest.approx(((p[0] - Y) ** 2).sum(), abs=1e-12)
    with pytest.raises(ContractViolation):
        loss_reconstruction(np.stack([Y]), Y[:2])


def test_multimodal():
    preds = np.stack([_offset(Y, 1), _offset(Y, 3)])
    assert val(loss_multimodal(preds, Y[None])) == pytest.approx(val(loss_reconstruction(preds, Y)))
    Y2 = Y + 5
    assert val(loss_multimodal(np.stack([Y, Y2]), np.stack([Y2, Y]))) == 0.0
    # best distances {1, 9} -> 5
    assert val(loss_multimodal(preds, np.stack([Y, _offset(Y, 6)]))) == pytest.approx(5.0, abs=1e-12)
    with pytest.raises(ContractViolation):
        loss_multimodal(preds, np.zeros((0, 3, 2, 3)))


def test_multimodal_padding_mask_ignores_padding():
    preds = np.stack([Y, Y + 1])[None]
    nb = np.stack([Y, Y + 100])[None]
    assert val(loss_multimodal(preds, nb, mask=np.array([[1.0, 0.0]]))) == 0.0


def test_history():
    assert val(loss_history(np.stack([Y, Y]), Y)) == 0.0
    h = np.stack([_offset(Y, math.sqrt(2)), _offset(Y, 2)])
    assert val(loss_history(h, Y)) == pytest.approx(3.0, abs=1e-12)
    r = np.random.default_rng(1).normal(size=(2,) + Y.shape)
    assert val(loss_history(Y + 2 * r, Y)) == pytest.approx(4 * val(loss_history(Y + r, Y)), rel=1e-12)


def test_diversity():
    assert val(loss_diversity(np.stack([Y] * 4), 3.0)) == 1.0
    alpha = 2.5
    assert val(loss_diversity(np.stack([Y, _offset(Y, alpha)]), alpha)) == pytest.approx(math.exp(-1), abs=1e-12)
    near, far = val(loss_diversity(np.stack([Y, Y + 0.1]), 1.0)), val(loss_diversity(np.stack([Y, Y + 0.2]), 1.0))
    assert far < near
    with pytest.raises(ContractViolation):
        loss_diversity(Y[None], 1.0)
    with pytest.raises(ParameterError):
        loss_diversity(np.stack([Y, Y]), 0.0)


def _bone_pose(length):
    return np.array([[[0.0, 0, 0], [length, 0, 0]]])


def test_limb():
    sk = Skeleton(("a", "b"), ((0, 1),))
    assert val(loss_limb(_bone_pose(2.0)[None], sk, _bone_pose(1.0))) == pytest.approx(1.0, abs=1e-12)
    rng = np.random.default_rng(2)
    Yc = rng.normal(size=(5, 3, 3))
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    rigid = Yc @ q.T + rng.normal(size=3)
    assert val(loss_limb(rigid[None], chain_skeleton(3), Yc)) == pytest.approx(0.0, abs=1e-20)
    sk3 = chain_skeleton(3)
    F = 4
    unit = np.zeros((F, 3, 3))
    unit[:, 1, 0], unit[:, 2, 0] = 1.0, 2.0
    np.testing.assert_allclose(limb_lengths(unit, sk3), np.ones((F, 2)))
    assert val(loss_limb(np.zeros((1, F, 3, 3)), sk3, unit)) == pytest.approx(2 * F, abs=1e-12)
    with pytest.raises(ContractViolation):
        loss_limb(unit[None], Skeleton(("a", "b", "c"), ()), unit)


def test_pose_prior():
    tau = 0.1
    hook = CappedVelocityPrior(tau)
    assert val(pose_prior_penalty(np.zeros((2, 6, 3, 3)), hook)) == 0.0
    F = 5
    p = np.zeros((1, F + 1, 3, 3))
    p[0, :, 1, 0] = 2 * tau * np.arange(F + 1)
    assert val(pose_prior_penalty(p, hook)) == pytest.approx(F * tau ** 2, abs=1e-12)
    assert val(pose_prior_penalty(p, None, weight=0.0)) == 0.0
    with pytest.raises(ConfigError):
        pose_prior_penalty(p, None, weight=1.0)


def test_mmgt_rules():
    X = np.zeros((3, 2, 1, 3))
    X[1, -1, 0, 0], X[2, -1, 0, 0] = 0.3, 0.9
    fut = np.arange(3.0).reshape(3, 1, 1, 1) * np.ones((3, 1, 1, 3))
    mm = multimodal_ground_truth(X, fut, 0.5)
    assert list(mm.neighbors[0]) == [0, 1]
    assert all(i in nb for i, nb in enumerate(mm.neighbors))
    tiny = multimodal_ground_truth(X, fut, 1e-9)
    assert [list(n) for n in tiny.neighbors] == [[0], [1], [2]]
    assert all(len(n) == 3 for n in multimodal_ground_truth(X, fut, math.inf).neighbors)
    with pytest.raises(ParameterError):
        multimodal_ground_truth(X, fut, 0.0)
    padded, mask = mm.padded([0, 2])
    assert padded.shape == (2, 2, 1, 1, 3) and mask.tolist() == [[1, 1], [1, 0]]


def test_total_loss():
    zero = {k: T.Tensor(0.0) for k in COMPONENTS}
    assert val(total_loss(LossWeights.human36m(), zero)) == 0.0
    unit = {k: T.Tensor(1.0) for k in COMPONENTS}
    assert val(total_loss(LossWeights.human36m(), unit)) == pytest.approx(813.01, abs=1e-9)
    bad = dict(unit, l=T.Tensor(float("nan")))
    with pytest.raises(TrainingAbort, match="l"):
        total_loss(LossWeights.human36m(), bad)


def test_zero_weight_removes_gradient():
    x = T.Tensor(np.array([2.0]), requires_grad=True)
    y = T.Tensor(np.array([3.0]), requires_grad=True)
    with T.Tape() as tape:
        comps = {k: T.Tensor(0.0) for k in COMPONENTS}
        comps["r"], comps["d"] = T.sum(T.mul(x, x)), T.sum(T.mul(y, y))
        g = tape.backward(total_loss(LossWeights(d=0.0), comps), [x, y])
    assert g[x][0] == 8.0 and g[y][0] == 0.0


def test_weights_reject_negative():
    with pytest.raises(ConfigError):
        LossWeights(r=-1)
    assert LossWeights.humaneva().as_dict() == dict(r=2, mm=1, h=10, d=32, nf=0.002, l=50, a=10)


def test_deterministic_objectives_keep_two_terms():
    obj = Objectives(LossWeights(), chain_skeleton(2), deterministic=True)
    p = np.zeros((1, 1, 3, 2, 3))
    comps = obj.components(p, p, np.zeros((1, 3, 2, 3)), np.ones((1, 3, 2, 3)))
    assert set(comps) == {"r", "h"}
    assert val(obj.total(comps)) == pytest.approx(2 * 18.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**31 - 1))
def test_losses_nonnegative_and_permutation_invariant(K, seed):
    rng = np.random.default_rng(seed)
    P = rng.normal(size=(K, 3, 2, 3))
    Yt = rng.normal(size=(3, 2, 3))
    nb = rng.normal(size=(3, 3, 2, 3))
    perm = rng.permutation(K)
    sk = chain_skeleton(2)
    fns = [lambda p: loss_reconstruction(p, Yt), lambda p: loss_multimodal(p, nb),
           lambda p: loss_history(p, Yt), lambda p: loss_diversity(p, 2.0),
           lambda p: loss_limb(p, sk, Yt), lambda p: CappedVelocityPrior()(p)]
    for f in fns:
        a, b = val(f(P)), val(f(P[perm]))
        assert a >= 0
        assert a == pytest.approx(b, rel=1e-12, abs=1e-15)
    d = val(loss_diversity(P, 2.0))
    assert 0 < d <= 1
    assert val(loss_reconstruction(P, Yt)) <= val(loss_multimodal(P, np.concatenate([Yt[None], nb]))) * 4 + 1e-12
