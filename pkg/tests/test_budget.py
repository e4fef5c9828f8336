"""FLOPs table and loss tests."""

import numpy as np
import pytest

from flexctl.backbone import TinyUNet, TinyUNetConfig
from flexctl.budget import (
    CostConfig,
    FlopsTable,
    conv_flops,
    cost_loss,
    count_block_flops,
    diffusion_loss,
    flops_ratio,
    linear_flops,
    total_loss,
)
from flexctl.diffusion import ConfigError
from flexctl.tensor import Tensor, UsageError, grad


def test_conv_and_linear_formulas():
    # 1x1 conv, 16 channels in/out, on a 16x16 map
    assert conv_flops(16, 16, 1, 256) == 131072
    assert linear_flops(64, 64) == 8192


def test_count_block_flops_unknown_kind():
    from flexctl.backbone import BlockSpec
    with pytest.raises(ConfigError):
        count_block_flops(BlockSpec(0, "mystery", (1,), (1,), False))


def test_block_specs_carry_their_own_count():
    net = TinyUNet(TinyUNetConfig(), np.random.default_rng(0))
    for spec in net.block_specs:
        assert count_block_flops(spec) > 0


def equal_table(n=8, f=10):
    return FlopsTable(per_block=[f] * n, base=0, router=0)


def test_flops_ratio_endpoints():
    t = FlopsTable(per_block=[100, 200, 300], base=40, router=10)
    assert t.large_total == 650
    assert flops_ratio([1, 1, 1], t) == 1.0
    assert flops_ratio([0, 0, 0], t) == 50 / 650


def test_flops_ratio_half():
    t = equal_table(8, 10)
    assert flops_ratio([1, 1, 1, 1, 0, 0, 0, 0], t) == 0.5


def test_flops_ratio_count_mismatch():
    with pytest.raises(UsageError):
        flops_ratio([1, 1], equal_table(3))


def test_flops_ratio_monotone_affine():
    t = FlopsTable(per_block=[5, 7, 9], base=3, router=1)
    base = flops_ratio([0.2, 0.4, 0.6], t)
    for l, f in enumerate(t.per_block):
        masks = [0.2, 0.4, 0.6]
        masks[l] += 0.1
        assert flops_ratio(masks, t) == pytest.approx(base + 0.1 * f / t.large_total)


def test_flops_table_negative_rejected():
    with pytest.raises(ConfigError):
        FlopsTable(per_block=[-1], base=0, router=0)


def test_cost_loss_values():
    assert cost_loss([0.5, 0.5], 0.5) == 0.0
    assert cost_loss([0.6, 0.4], 0.5) == pytest.approx(0.01)
    assert cost_loss([1.0], 0.5) == pytest.approx(0.25)
    with pytest.raises(UsageError):
        cost_loss([], 0.5)


def test_cost_loss_tensor_path():
    r = Tensor(np.array([0.6, 0.4], dtype=np.float64))
    assert cost_loss(r, 0.5).item() == pytest.approx(0.01)


def test_diffusion_loss_values():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((2, 3, 4)).astype(np.float32)
    assert diffusion_loss(a, a) == 0.0
    assert diffusion_loss(a + 2.0, a) == pytest.approx(4.0, rel=1e-6)
    b = rng.standard_normal((2, 3, 4)).astype(np.float32)
    # loop oracle
    acc = 0.0
    for x, y in zip(a.reshape(-1), b.reshape(-1)):
        acc += (float(x) - float(y)) ** 2
    want = acc / a.size
    assert abs(diffusion_loss(a, b) - want) <= 1e-6
    with pytest.raises(UsageError):
        diffusion_loss(a, b[:1])


def test_total_loss():
    assert total_loss(0.2, 0.04, 0.5) == pytest.approx(0.22)
    assert total_loss(0.7, 123.0, 0.0) == 0.7
    assert CostConfig().lambda_c == 0.5


def test_cost_gradient_sign_matches_ratio_deviation():
    # d L_C / d mask_l has the sign of (ratio - gamma) * f_l
    t = FlopsTable(per_block=[50, 100, 150], base=20, router=5)
    gamma = 0.5
    for start in ([0.9, 0.8, 0.9], [0.1, 0.05, 0.2]):
        masks = [Tensor(np.array(v, dtype=np.float64), requires_grad=True) for v in start]
        ratio = flops_ratio(masks, t)
        loss = cost_loss(ratio.reshape(1), gamma)
        gs = grad(loss, masks)
        r = flops_ratio([float(v) for v in start], t)
        for g, f in zip(gs, t.per_block):
            assert np.sign(g) == np.sign((r - gamma) * f)
        # finite differences on the same path
        eps = 1e-6
        for l in range(3):
            hi = [float(v) for v in start]
            lo = [float(v) for v in start]
            hi[l] += eps
            lo[l] -= eps
            fd = (cost_loss([flops_ratio(hi, t)], gamma) - cost_loss([flops_ratio(lo, t)], gamma)) / (2 * eps)
            assert abs(float(gs[l]) - fd) <= 1e-6


def test_gamma_one_gradient_vanishes_at_all_on():
    t = FlopsTable(per_block=[50, 100], base=10, router=0)
    masks = [Tensor(np.array(1.0), requires_grad=True) for _ in range(2)]
    loss = cost_loss(flops_ratio(masks, t).reshape(1), 1.0)
    gs = grad(loss, masks)
    for g in gs:
        assert abs(float(g)) <= 1e-12
    assert cost_loss([1.0, 1.0], 1.0) == 0.0
