import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from hyperseg.hypernet import OUTPUT_BOUND, HyperNet, HyperNetConfig, init_hypernet, tensor_stds
from hyperseg.segnet import UNetConfig, param_count

TINY = UNetConfig(dim=2, levels=1, blocks_per_level=1, base_channels=2, num_classes=2)


@pytest.fixture(scope="module")
def default_net():
    return init_hypernet(HyperNetConfig(), UNetConfig(), seed=0)


def test_output_dim_validated():
    with pytest.raises(ValueError, match=f"{param_count(TINY)}"):
        HyperNet(HyperNetConfig(input_dim=2, output_dim=7), TINY)


def test_input_dim_validated():
    with pytest.raises(ValueError):
        HyperNet(HyperNetConfig(input_dim=3), TINY)


def test_output_length(default_net):
    assert default_net((1.0, 1.0, 1.0)).shape == (param_count(UNetConfig()),)


def test_spacing_length_checked(default_net):
    with pytest.raises(ValueError, match="length 3"):
        default_net((1.0, 1.0))


@given(st.integers(0, 1000), st.lists(st.floats(0.1, 20.0), min_size=2, max_size=2))
@settings(max_examples=25, deadline=None)
def test_bounded_for_any_weights(seed, r):
    net = init_hypernet(HyperNetConfig(input_dim=2), TINY, seed=seed)
    with torch.no_grad():
        for p in net.parameters():
            p.mul_(50.0)  # drive the head into saturation
    out = net(tuple(r))
    assert out.abs().max() < OUTPUT_BOUND


def test_bounded_at_init(default_net):
    for r in (0.5, 1.0, 3.0, 10.0):
        assert default_net((r,) * 3).abs().max() < OUTPUT_BOUND


def test_continuity(default_net):
    a = default_net((1.0, 1.0, 1.0))
    b = default_net((1.0 + 1e-9, 1.0, 1.0))
    assert (a - b).abs().max() < 1e-6


def test_deterministic_init():
    a = init_hypernet(HyperNetConfig(input_dim=2), TINY, seed=4)
    b = init_hypernet(HyperNetConfig(input_dim=2), TINY, seed=4)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_generated_std_band(default_net):
    """Every generated conv weight tensor starts within [0.5x, 2x] of its fan-in std."""
    for r in (1.0, 0.5, 3.0):
        with torch.no_grad():
            stds = tensor_stds(default_net((r,) * 3), UNetConfig())
        for name, (empirical, target) in stds.items():
            if name == "head.weight":
                continue  # 32 values: too few for a stable estimate
            assert 0.5 <= empirical / target <= 2.0, (r, name, empirical / target)


def test_gradient_matches_finite_differences():
    net = init_hypernet(HyperNetConfig(input_dim=2, hidden_width=8), TINY, seed=1, dtype=torch.float64)
    probe = torch.randn(param_count(TINY), dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    r = (1.3, 0.7)

    def scalar():
        out = net(r)
        return (out * probe).sum() + (out**2).sum()

    params = list(net.parameters())
    grads = torch.autograd.grad(scalar(), params)
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(20):
        i = int(rng.integers(len(params)))
        flat = params[i].data.view(-1)
        j = int(rng.integers(flat.numel()))
        with torch.no_grad():
            old = flat[j].item()
            flat[j] = old + h
            up = scalar().item()
            flat[j] = old - h
            down = scalar().item()
            flat[j] = old
        fd = (up - down) / (2 * h)
        g = grads[i].view(-1)[j].item()
        assert abs(g - fd) <= 1e-3 * max(abs(fd), 1e-6), (i, j, g, fd)


def test_differentiable_in_spacing():
    net = init_hypernet(HyperNetConfig(input_dim=2), TINY, seed=0, dtype=torch.float64)
    r = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)
    (g,) = torch.autograd.grad(net(r).sum(), r)
    assert torch.isfinite(g).all() and g.abs().sum() > 0


def test_lipschitz_on_box(default_net):
    grid = np.linspace(0.5, 3.5, 5)
    points = [(a, b, c) for a in grid for b in grid[::2] for c in grid[::2]]
    with torch.no_grad():
        outs = [default_net(p) for p in points]
    ratios = []
    for i in range(len(points)):
        for j in range(i + 1, len(points)):
            d = np.linalg.norm(np.subtract(points[i], points[j]))
            ratios.append(((outs[i] - outs[j]).norm() / d).item())
    assert np.isfinite(ratios).all() and max(ratios) < 1e3
