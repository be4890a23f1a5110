import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from conftest import fd_relative_error, randomize_bn
from mfeiqa.fusion import AFF, FFM, FFMPreprocess, aff_fuse, compute_fusion_weights

D = torch.float64


def _aff(c=4, r=2, seed=0, eval_mode=True):
    torch.manual_seed(seed)
    aff = AFF(c, r).double()
    with torch.no_grad():
        for m in aff.modules():
            if isinstance(m, torch.nn.Conv2d):
                m.bias.normal_(0, 0.3)
    randomize_bn(aff, seed)
    return aff.eval() if eval_mode else aff


def test_weights_half_at_zero():
    aff = AFF(4, 2).double().eval()
    w = compute_fusion_weights(torch.zeros(2, 4, 5, 5, dtype=D), aff)
    assert torch.equal(w, torch.full_like(w, 0.5))


def test_weights_open_unit_interval():
    w = compute_fusion_weights(torch.randn(3, 4, 6, 6, dtype=D), _aff())
    assert w.min() > 0 and w.max() < 1


def test_weights_shape_mismatch():
    with pytest.raises(ValueError):
        compute_fusion_weights(torch.zeros(1, 3, 4, 4), AFF(4, 2))
    with pytest.raises(ValueError):
        aff_fuse(torch.zeros(1, 4, 4, 4), torch.zeros(1, 4, 2, 2), AFF(4, 2))


def test_straight_line_oracle():
    aff = _aff()
    x, y = torch.randn(2, 4, 4, 4, dtype=D), torch.randn(2, 4, 4, 4, dtype=D)
    out = aff_fuse(x, y, aff).detach().numpy()
    np.testing.assert_allclose(out, oracles.aff_fuse(x.numpy(), y.numpy(), aff), atol=1e-10, rtol=0)


def test_swap_identity():
    aff = _aff()
    x, y = torch.randn(1, 4, 3, 3, dtype=D), torch.randn(1, 4, 3, 3, dtype=D)
    w = compute_fusion_weights(y + x, aff)
    assert torch.equal(w + (1 - w), torch.ones_like(w))
    # swapping operands keeps w (X + Y is symmetric), so Y's weight becomes w and X's 1 - w
    assert torch.allclose(aff_fuse(x, y, aff), w * x + (1 - w) * y, atol=1e-14)
    assert torch.allclose(aff_fuse(y, x, aff), (1 - w) * x + w * y, atol=1e-14)


def test_identical_inputs_returned_exactly():
    x = torch.randn(2, 4, 5, 5, dtype=D)
    assert torch.equal(aff_fuse(x, x.clone(), _aff()), x)


def test_ones_and_zeros_map_inside_interval():
    out = aff_fuse(torch.ones(1, 4, 3, 3, dtype=D), torch.zeros(1, 4, 3, 3, dtype=D), _aff())
    assert out.min() > 0 and out.max() < 1


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 100))
def test_convex_bound_property(seed, scale):
    g = torch.Generator().manual_seed(seed)
    aff = _aff(seed=seed % 50, eval_mode=bool(seed % 2))
    x = scale * torch.randn(2, 4, 3, 3, dtype=D, generator=g)
    y = scale * torch.randn(2, 4, 3, 3, dtype=D, generator=g)
    out = aff_fuse(x, y, aff)
    assert (out >= torch.minimum(x, y)).all() and (out <= torch.maximum(x, y)).all()


def test_weight_gradient_check():
    aff = _aff(4, 2, eval_mode=False)
    f_add = torch.randn(2, 4, 8, 8, dtype=D)
    convs = [m for m in aff.modules() if isinstance(m, torch.nn.Conv2d)]
    params = [p for c in convs for p in (c.weight, c.bias)]
    assert fd_relative_error(lambda: compute_fusion_weights(f_add, aff).sum(), params) < 1e-4


def test_preprocess_shapes_and_pooling():
    pre = FFMPreprocess(8, 64).eval()
    assert pre(torch.randn(1, 8, 56, 56), (28, 28)).shape == (1, 64, 28, 28)
    const = torch.full((1, 2, 8, 8), 1.7)
    assert torch.equal(FFMPreprocess.pool(const, (4, 4)), torch.full((1, 2, 4, 4), 1.7))
    x = torch.randn(1, 3, 8, 8)
    pooled = FFMPreprocess.pool(x, (2, 2))
    windows = x.reshape(1, 3, 2, 4, 2, 4)
    assert (pooled[:, :, :, None, :, None] >= windows).all()
    with pytest.raises(ValueError):
        FFMPreprocess.pool(x, (3, 3))


def test_ffm_shape_oracle_and_determinism():
    torch.manual_seed(1)
    m = FFM(8, 64, reduction=4).double()
    randomize_bn(m, 1)
    with torch.no_grad():
        m.pre.act.weight.uniform_(-0.5, 0.5)
    m.eval()
    hf, qf = torch.randn(1, 8, 56, 56, dtype=D), torch.randn(1, 64, 28, 28, dtype=D)
    out = m(hf, qf)
    assert out.shape == (1, 64, 28, 28)
    assert torch.equal(out, m(hf, qf))
    np.testing.assert_allclose(out.detach().numpy(), oracles.ffm(hf.numpy(), qf.numpy(), m), atol=1e-10, rtol=0)


def test_ffm_output_equals_qf_when_preprocessed_hf_matches():
    m = FFM(4, 4, reduction=2).double().eval()
    hf = torch.randn(1, 4, 8, 8, dtype=D)
    qf = m.pre(hf, (8, 8)).detach()
    assert torch.equal(m(hf, qf), qf)


def test_addition_ablation():
    m = FFM(4, 8, reduction=2, fusion="add").double().eval()
    hf, qf = torch.randn(1, 4, 8, 8, dtype=D), torch.randn(1, 8, 4, 4, dtype=D)
    assert m.aff is None
    assert torch.allclose(m(hf, qf), m.pre(hf, (4, 4)) + qf, atol=0)
