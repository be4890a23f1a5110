import numpy as np
import pytest
import torch

from mfeiqa.backbone import BackboneConfig, ModelConfig
from mfeiqa.data import build_toy_corpus
from mfeiqa.octave import HFENConfig
from mfeiqa.pipeline import TrainConfig


def fd_relative_error(loss_fn, tensors, eps=1e-6):
    """Relative error between autograd and central finite differences, over all ``tensors``.

    ``loss_fn`` takes no arguments and returns a 64-bit scalar that depends on ``tensors``.
    """
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = torch.cat([t.grad.reshape(-1).clone() for t in tensors])
    numeric = []
    with torch.no_grad():
        for t in tensors:
            flat = t.view(-1)
            for k in range(flat.numel()):
                old = flat[k].item()
                flat[k] = old + eps
                up = loss_fn().item()
                flat[k] = old - eps
                down = loss_fn().item()
                flat[k] = old
                numeric.append((up - down) / (2 * eps))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / scale


def randomize_bn(module, seed=0):
    """Give every BatchNorm non-trivial running statistics and affine params (useful in eval mode)."""
    g = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            with torch.no_grad():
                m.running_mean.copy_(torch.randn(m.num_features, generator=g, dtype=torch.float64))
                m.running_var.copy_(torch.rand(m.num_features, generator=g, dtype=torch.float64) + 0.5)
                m.weight.copy_(torch.randn(m.num_features, generator=g, dtype=torch.float64))
                m.bias.copy_(torch.randn(m.num_features, generator=g, dtype=torch.float64))
    return module


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(
        backbone=BackboneConfig(channels=(8, 16, 16, 32), dw_kernel=3, dilated_kernel=3, dilation=2,
                                mlp_ratio=2, layer_scale=1.0),
        hfen=HFENConfig(channels=8),
        embed_dim=16,
        head_hidden=8,
    )
    base.update(kw)
    return ModelConfig(**base)


def tiny_train_config(**kw) -> TrainConfig:
    base = dict(
        initial_lr=3e-3, epochs=1, patch_size=32, patches_per_image=4, test_patches=2, batch_size=16,
        channels=(8, 16, 16, 32), mlp_ratio=2, dw_kernel=3, dilated_kernel=3, dilation=2, hf_channels=8,
        layer_scale=1.0,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """4 references x 4 kinds x 2 levels at 64 px."""
    out = tmp_path_factory.mktemp("toy")
    return build_toy_corpus(4, levels=(1, 4), seed=3, out_dir=out, size=64)
