import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factorvid import numerics as nx
from factorvid.losses import (CurriculumConfig, FeatureExtractor, Stage, gdl_loss, l1_loss,
                              loss_components, perceptual_loss, select_stage, smooth_loss,
                              stage1_loss, stage2_loss, stage3_loss)

PHI = FeatureExtractor()


def _clip(rng, shape=(2, 3, 1, 16, 16)):
    return nx.Tensor(rng.random(shape).astype(np.float32))


def test_l1_hand_values():
    a = nx.Tensor(np.zeros((1, 1, 1, 2, 2)))
    b = nx.Tensor(np.array([0.0, 1.0, 2.0, 5.0]).reshape(1, 1, 1, 2, 2))
    assert l1_loss(a, b).item() == 2.0
    assert l1_loss(b, b).item() == 0.0


def test_gdl_hand_value():
    pred = nx.Tensor(np.array([[0.0, 1.0], [0.0, 1.0]]).reshape(1, 1, 1, 2, 2))
    zero = nx.Tensor(np.zeros((1, 1, 1, 2, 2)))
    # horizontal steps of 1 in both rows, no vertical change
    assert gdl_loss(pred, zero).item() == pytest.approx(1.0)


def test_gdl_needs_2x2():
    x = nx.Tensor(np.zeros((1, 1, 1, 1, 4)))
    with pytest.raises(nx.ShapeError):
        gdl_loss(x, x)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 31))
def test_gdl_invariant_to_constant_offsets(c1, c2, seed):
    rng = np.random.default_rng(seed)
    p, t = rng.random((1, 2, 1, 6, 6)), rng.random((1, 2, 1, 6, 6))
    with nx.precision(np.float64):
        base = gdl_loss(nx.Tensor(p), nx.Tensor(t)).item()
        moved = gdl_loss(nx.Tensor(p + c1), nx.Tensor(t + c2)).item()
    assert moved == pytest.approx(base, abs=1e-12)


def test_smooth_zero_on_static_and_single_frame(rng):
    frame = rng.random((2, 1, 1, 8, 8))
    assert smooth_loss(nx.Tensor(np.repeat(frame, 4, axis=1))).item() == 0.0
    assert smooth_loss(nx.Tensor(frame)).item() == 0.0


def test_smooth_hand_value():
    x = np.zeros((1, 3, 1, 2, 2))
    x[:, 1] = 1.0
    assert smooth_loss(nx.Tensor(x)).item() == 1.0


def test_perceptual_zero_on_equal_and_positive_otherwise(rng):
    a, b = _clip(rng), _clip(rng)
    assert perceptual_loss(a, a, PHI).item() == 0.0
    assert perceptual_loss(a, b, PHI).item() > 0


def test_feature_extractor_shape_and_frozen():
    out = PHI(nx.Tensor(np.zeros((3, 1, 16, 16), np.float32)))
    assert out.shape == (3, 32, 2, 2)
    assert not any(p.requires_grad for p in PHI.parameters())


def test_stage_compositions_exact(rng):
    cfg = CurriculumConfig(lambda_gdl=0.7, lambda_smooth=0.3, lambda_perc=2.0)
    with nx.precision(np.float64):
        phi = FeatureExtractor(dtype=np.float64)
        p = nx.Tensor(rng.random((2, 3, 1, 16, 16)))
        t = nx.Tensor(rng.random((2, 3, 1, 16, 16)))
        l1, g, s, f = (l1_loss(p, t).item(), gdl_loss(p, t).item(), smooth_loss(p).item(),
                       perceptual_loss(p, t, phi).item())
        assert abs(stage1_loss(p, t).item() - l1) < 1e-12
        assert abs(stage2_loss(p, t, cfg).item() - (l1 + 0.7 * g + 0.3 * s)) < 1e-12
        assert abs(stage3_loss(p, t, cfg, phi).item() - (l1 + 0.7 * g + 0.3 * s + 2.0 * f)) < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 5), st.floats(0, 5), st.floats(0, 5), st.integers(0, 2 ** 31))
def test_stage_losses_nest(lg, ls, lp, seed):
    rng = np.random.default_rng(seed)
    cfg = CurriculumConfig(lambda_gdl=lg, lambda_smooth=ls, lambda_perc=lp)
    p, t = _clip(rng, (1, 2, 1, 16, 16)), _clip(rng, (1, 2, 1, 16, 16))
    s1, s2, s3 = stage1_loss(p, t).item(), stage2_loss(p, t, cfg).item(), stage3_loss(p, t, cfg, PHI).item()
    assert s1 <= s2 <= s3


def test_stage_losses_reject_shape_mismatch(rng):
    with pytest.raises(nx.ShapeError):
        l1_loss(_clip(rng), _clip(rng, (2, 2, 1, 16, 16)))


def test_stage3_gradients_skip_feature_extractor(rng):
    p = nx.Tensor(rng.random((1, 2, 1, 16, 16)).astype(np.float32), requires_grad=True)
    t = _clip(rng, (1, 2, 1, 16, 16))
    with nx.GradTape() as tape:
        loss = stage3_loss(p, t, CurriculumConfig(), PHI)
    nx.backward(loss, tape)
    assert p.grad is not None
    assert all(k.grad is None for k in PHI.parameters())


def test_loss_components_keys(rng):
    comps = loss_components(_clip(rng), _clip(rng), PHI)
    assert set(comps) >= {"l1", "gdl", "smooth", "perc"}


def test_select_stage_boundaries():
    cfg = CurriculumConfig(2, 3, 1)
    stages = [select_stage(e, cfg) for e in range(7)]
    assert stages == [Stage.S1] * 2 + [Stage.S2] * 3 + [Stage.S3] * 2
    assert select_stage(0, CurriculumConfig(0, 1, 1)) == Stage.S2
    with pytest.raises(ValueError):
        select_stage(-1, cfg)


def test_curriculum_validation():
    with pytest.raises(ValueError):
        CurriculumConfig(lambda_gdl=-0.1)
    with pytest.raises(ValueError):
        CurriculumConfig(0, 0, 0)


def test_large_smoothness_weight_prefers_frozen_video():
    # the smoothness term has no target anchor: with a big enough weight a
    # frozen clip beats the exact moving ground truth
    truth = np.zeros((1, 4, 1, 8, 8))
    for t in range(4):
        truth[0, t, 0, 2:5, t:t + 3] = 1.0
    exact = nx.Tensor(truth)
    frozen = nx.Tensor(np.repeat(truth[:, :1], 4, axis=1))
    small, big = CurriculumConfig(lambda_smooth=0.1), CurriculumConfig(lambda_smooth=50.0)
    assert stage2_loss(exact, exact, small).item() < stage2_loss(frozen, exact, small).item()
    assert stage2_loss(exact, exact, big).item() > stage2_loss(frozen, exact, big).item()
