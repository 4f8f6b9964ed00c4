import pytest
import torch
import torch.nn as nn

from priordistill.errors import ConfigError, ShapeError
from priordistill.nets import ARCHITECTURES, ConvNet, StudentArch, build_eval_net, convnet_features, convnet_forward, init_params, unflatten


def reference_convnet(arch: StudentArch, flat: torch.Tensor) -> nn.Module:
    """The same network built from stock modules, loaded from the flat vector."""
    layers, cin = [], arch.in_channels
    for _ in range(arch.block_count):
        layers += [nn.Conv2d(cin, arch.width, 3, padding=1), nn.GroupNorm(arch.width, arch.width), nn.ReLU(), nn.AvgPool2d(2)]
        cin = arch.width
    net = nn.Sequential(*layers, nn.Flatten(), nn.Linear(arch.feature_dim(), arch.class_count))
    p = unflatten(arch, flat)
    convs = [m for m in net if isinstance(m, nn.Conv2d)]
    norms = [m for m in net if isinstance(m, nn.GroupNorm)]
    with torch.no_grad():
        for b, (conv, norm) in enumerate(zip(convs, norms)):
            conv.weight.copy_(p[f"conv{b}.weight"])
            conv.bias.copy_(p[f"conv{b}.bias"])
            norm.weight.copy_(p[f"norm{b}.weight"])
            norm.bias.copy_(p[f"norm{b}.bias"])
        net[-1].weight.copy_(p["fc.weight"])
        net[-1].bias.copy_(p["fc.bias"])
    return net


def test_functional_convnet_matches_module_reference():
    arch = StudentArch(5, in_channels=3, image_size=16, block_count=2, width=8)
    gen = torch.Generator().manual_seed(0)
    flat = init_params(arch, gen)
    flat += 0.1 * torch.randn(flat.shape, generator=gen)  # move norm affine away from identity
    x = torch.randn(4, 3, 16, 16, generator=gen)
    torch.testing.assert_close(convnet_forward(arch, flat, x), reference_convnet(arch, flat)(x), rtol=1e-5, atol=1e-5)


def test_param_count_matches_layout_and_module():
    arch = StudentArch(10, 1, 16, 2, 32)
    expected = (32 * 1 * 9 + 32 + 64) + (32 * 32 * 9 + 32 + 64) + (10 * 32 * 4 * 4 + 10)
    assert arch.param_count == expected == init_params(arch).numel()
    assert sum(p.numel() for p in ConvNet(arch).parameters()) == expected


def test_features_and_taps():
    arch = StudentArch(3, 1, 16, 2, 4)
    flat = init_params(arch)
    x = torch.randn(2, 1, 16, 16)
    assert convnet_features(arch, flat, x).shape == (2, arch.feature_dim())
    assert convnet_features(arch, flat, x, tap=0).shape == (2, 4 * 8 * 8)
    with pytest.raises(ConfigError):
        convnet_features(arch, flat, x, tap=2)


def test_shape_errors():
    arch = StudentArch(3, 1, 16, 2, 4)
    with pytest.raises(ShapeError):
        convnet_forward(arch, init_params(arch), torch.randn(2, 3, 16, 16))
    with pytest.raises(ShapeError):
        unflatten(arch, torch.zeros(5))
    with pytest.raises(ConfigError):
        StudentArch(3, 1, 20, 3)
    with pytest.raises(ConfigError):
        StudentArch(3, norm="batch")


@pytest.mark.parametrize("name", ARCHITECTURES)
@pytest.mark.parametrize("shape", [(16, 16, 1), (32, 32, 3)])
def test_eval_nets_accept_image_shapes(name, shape):
    net = build_eval_net(name, shape, 7, torch.Generator().manual_seed(0))
    out = net(torch.randn(3, shape[2], shape[0], shape[1]))
    assert out.shape == (3, 7)


def test_eval_net_seeding_is_deterministic():
    a = build_eval_net("resnet", (16, 16, 1), 4, torch.Generator().manual_seed(3))
    b = build_eval_net("resnet", (16, 16, 1), 4, torch.Generator().manual_seed(3))
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_unknown_arch_rejected():
    with pytest.raises(ConfigError):
        build_eval_net("vit", (16, 16, 1), 4)
