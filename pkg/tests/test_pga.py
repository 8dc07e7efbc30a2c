import numpy as np
import pytest
import torch

from helpers import assert_gradients_match, finite_difference_check, randomize_
from sharecmp.config import PGAConfig
from sharecmp.errors import ConfigError, InvalidInputError
from sharecmp.params import count
from sharecmp.pga import PGA, ChannelAttention, angles_to_tensor, pga_concat, pga_forward, stack_representations
from sharecmp.polarization import PolarizedImageSet


def random_set(h=64, w=64, seed=0):
    rng = np.random.default_rng(seed)
    return PolarizedImageSet(*(rng.random((h, w, 3)) for _ in range(4)))


def test_concat_shape():
    out = pga_concat(random_set(), PGA())
    assert out.shape == (1, 128, 64, 64)


def test_forward_preserves_resolution():
    for h, w in [(64, 64), (37, 50)]:
        assert pga_forward(random_set(h, w), PGA()).shape == (1, 3, h, w)


def test_zero_weights_give_zero():
    pga = PGA()
    with torch.no_grad():
        for p in pga.parameters():
            p.zero_()
    assert torch.equal(pga_forward(random_set(), pga), torch.zeros(1, 3, 64, 64))


def test_block_permutation():
    """With identical per-angle kernels, permuting input blocks permutes the concat blocks."""
    pga = PGA(PGAConfig(mid_channels=4))
    with torch.no_grad():
        for name in ("conv45", "conv90", "conv135"):
            getattr(pga, name).load_state_dict(pga.conv0.state_dict())
    x = torch.rand(1, 12, 16, 16)
    perm = [2, 0, 3, 1]
    xp = torch.cat([x.chunk(4, dim=1)[i] for i in perm], dim=1)
    out, outp = pga.concat(x).chunk(4, dim=1), pga.concat(xp).chunk(4, dim=1)
    for k, i in enumerate(perm):
        assert torch.equal(outp[k], out[i])


def test_angle_order():
    pga = PGA(PGAConfig(mid_channels=2))
    x = torch.rand(1, 12, 8, 8)
    blocks = pga.concat(x).chunk(4, dim=1)
    for name, xi, b in zip(("conv0", "conv45", "conv90", "conv135"), x.chunk(4, dim=1), blocks):
        assert torch.equal(getattr(pga, name)(xi), b)


def test_channel_attention_zero_mlp_is_half():
    ca = ChannelAttention(8)
    with torch.no_grad():
        for p in ca.parameters():
            p.zero_()
    assert torch.equal(ca(torch.randn(2, 8, 5, 5)), torch.full((2, 8, 1, 1), 0.5))


def test_channel_attention_ignores_pixel_order():
    ca = ChannelAttention(8)
    x = torch.randn(1, 8, 6, 6, dtype=torch.float64)
    ca = ca.double()
    perm = torch.randperm(36)
    shuffled = x.flatten(2)[..., perm].view_as(x)
    torch.testing.assert_close(ca(x), ca(shuffled), atol=1e-14, rtol=0)


def test_channel_attention_monotonic():
    ca = ChannelAttention(4, reduction=4)
    with torch.no_grad():
        ca.fc1.weight.fill_(1.0)
        ca.fc1.bias.zero_()
        ca.fc2.weight.fill_(1.0)
        ca.fc2.bias.zero_()
    levels = torch.linspace(0, 3, 10)
    gates = [ca.gate(torch.full((1, 4), float(v)))[0, 0].item() for v in levels]
    assert all(b > a for a, b in zip(gates, gates[1:]))
    assert all(0.0 < g < 1.0 for g in gates)


def test_residual_form():
    pga = PGA(PGAConfig(mid_channels=4)).double()
    x = torch.rand(1, 12, 10, 10, dtype=torch.float64)
    feats = pga.features(x)
    expected = pga.act(pga.ffn(feats.f_p * (1 + feats.attn_p)))
    torch.testing.assert_close(pga.generate(x), expected, atol=1e-12, rtol=0)
    assert feats.attn_p.shape == (1, 16, 1, 1)


def test_bad_channel_count():
    with pytest.raises(InvalidInputError):
        PGA()(torch.rand(1, 10, 8, 8))


def test_bypass():
    pga = PGA(PGAConfig(bypass=True))
    with pytest.raises(ConfigError):
        pga(torch.rand(1, 12, 8, 8))
    reps = [torch.rand(1, 1, 8, 8) for _ in range(3)]
    assert torch.equal(pga(representations=reps), torch.cat(reps, dim=1))
    assert stack_representations(reps[0]).shape == (1, 3, 8, 8)
    with pytest.raises(ConfigError):
        stack_representations(reps[:2])


def test_angles_to_tensor_layout():
    s = random_set(4, 5)
    t = angles_to_tensor(s, torch.float64)
    assert t.shape == (1, 12, 4, 5)
    np.testing.assert_array_equal(t[0, 3:6].permute(1, 2, 0).numpy(), s.i45)


def test_parameter_budget():
    n = count(PGA())
    assert 0.12e6 <= n <= 0.20e6


def test_gradients():
    pga = PGA(PGAConfig(mid_channels=2)).double()
    randomize_(pga, torch.Generator().manual_seed(0))
    g = torch.Generator().manual_seed(1)
    x = torch.rand(1, 12, 6, 6, generator=g, dtype=torch.float64)
    w = torch.randn(1, 3, 6, 6, generator=g, dtype=torch.float64)
    errors = finite_difference_check(lambda: (w * pga.generate(x)).sum(), dict(pga.named_parameters()))
    assert_gradients_match(errors)


def test_ffn_structure():
    pga = PGA()
    pointwise, depthwise = pga.ffn
    assert pointwise.kernel_size == (1, 1) and (pointwise.in_channels, pointwise.out_channels) == (128, 3)
    assert depthwise.kernel_size == (3, 3) and depthwise.groups == 3
    assert pga.attn_dw[1].dilation == (2, 2)


def test_invalid_groups():
    with pytest.raises(ConfigError):
        PGA(PGAConfig(groups=0))
    with pytest.raises(ConfigError):
        PGA(PGAConfig(groups=3))
