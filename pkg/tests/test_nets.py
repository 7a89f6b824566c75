import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st

from coordgan.config import ModelConfig
from coordgan.coordspace import make_canonical
from coordgan.nets import (
    SQRT2,
    CoordMLP,
    Encoder,
    FeatureDisabledError,
    FourierEmbedding,
    MappingNetwork,
    PatchDiscriminator,
    build_models,
    modulated_conv,
    modulated_conv_reference,
)

from _oracles import analytic_grad, central_fd, relative_error

SMALL = ModelConfig(resolution=16, latent_dim=8, mapping_depth=2, warp_hidden=16, embed_dim=16,
                    channels=8, layers=4, d_channels=8, patch_channels=8, enc_channels=8)


def _zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


# -- mapping ---------------------------------------------------------------------------

def test_mapping_zero_params_gives_zero():
    m = _zero_(MappingNetwork(8, 3))
    assert torch.equal(m(torch.randn(5, 8)), torch.zeros(5, 8))


def test_mapping_is_deterministic():
    torch.manual_seed(0)
    m = MappingNetwork(8, 3)
    z = torch.randn(4, 8)
    assert torch.equal(m(z), m(z))


def test_mapping_gradient_matches_fd():
    torch.manual_seed(1)
    m = MappingNetwork(8, 3, lr_mul=1.0).double()
    f = lambda z: m(z).pow(2).sum()  # noqa: E731
    z = torch.randn(2, 8, dtype=torch.float64)
    assert relative_error(analytic_grad(f, z), central_fd(f, z)) < 1e-3


def test_mapping_rejects_wrong_dim():
    with pytest.raises(ValueError):
        MappingNetwork(8, 2)(torch.randn(2, 7))


# -- coordinate MLPs -----------------------------------------------------------------

def test_warp_zero_head_gives_zero_map():
    torch.manual_seed(0)
    mlp = CoordMLP(8, 16)
    _zero_(mlp.out)
    out = mlp(make_canonical(5, 5)[None].expand(3, 5, 5, 2), torch.randn(3, 8))
    assert torch.equal(out, torch.zeros_like(out))


def test_warp_depends_on_coordinate_value_not_index():
    torch.manual_seed(0)
    mlp = CoordMLP(8, 16).double()
    code = torch.randn(1, 8, dtype=torch.float64)
    a = make_canonical(4, 4, dtype=torch.float64)[None]
    b = torch.rand(1, 3, 5, 2, dtype=torch.float64) * 2 - 1
    b[0, 2, 1] = a[0, 1, 3]
    # equal up to BLAS blocking differences between batch shapes
    assert torch.allclose(mlp(a, code)[0, 1, 3], mlp(b, code)[0, 2, 1], rtol=0, atol=1e-14)


@given(st.integers(0, 1000))
def test_warp_output_strictly_inside_range(seed):
    torch.manual_seed(seed)
    mlp = CoordMLP(8, 16)
    with torch.no_grad():
        mlp.out.weight.mul_(50)  # drive tanh into saturation
    out = mlp(make_canonical(6, 6)[None].expand(2, 6, 6, 2), torch.randn(2, 8) * 10)
    assert out.abs().max() < 1


def _lipschitz_bound(mlp: CoordMLP) -> float:
    """Product of layer spectral norms; leaky-ReLU slope <= sqrt(2), tanh slope <= 1."""
    bound = 1.0
    for layer in mlp.hidden:
        bound *= torch.linalg.matrix_norm(layer.weight * layer.scale, ord=2).item() * SQRT2
    return bound * torch.linalg.matrix_norm(mlp.out.weight * mlp.out.scale, ord=2).item()


def test_warp_lipschitz_in_structure_code():
    torch.manual_seed(3)
    mlp = CoordMLP(8, 16).double()
    c = make_canonical(6, 6, dtype=torch.float64)[None]
    code = torch.randn(1, 8, dtype=torch.float64)
    bound = _lipschitz_bound(mlp)
    g = torch.Generator().manual_seed(4)
    for _ in range(20):
        delta = torch.randn(1, 8, generator=g, dtype=torch.float64)
        delta = delta / delta.norm() * 1e-3
        change = (mlp(c, code + delta) - mlp(c, code)).norm(dim=-1).max().item()
        assert change <= bound * 1e-3


def test_backward_mlp_zero_head():
    torch.manual_seed(0)
    mlp = CoordMLP(8, 16)
    _zero_(mlp.out)
    assert mlp(make_canonical(3, 3)[None], torch.randn(1, 8)).abs().max() == 0


def _fit(mlp, inputs, codes, target, steps, loss):
    # equalized-lr layers scale updates by 1/sqrt(fan_in), hence the large step size
    opt = torch.optim.Adam(mlp.parameters(), lr=0.1)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    for _ in range(steps):
        opt.zero_grad()
        loss(mlp(inputs, codes) - target).backward()
        opt.step()
        sched.step()


def test_backward_mlp_regression_recovers_canonical():
    # warp fitted to a near-identity map, then the inverse fitted by direct L1 regression
    torch.manual_seed(0)
    canon = make_canonical(8, 8)[None].expand(4, 8, 8, 2)
    codes = torch.randn(4, 8)
    warp, back = CoordMLP(8, 64), CoordMLP(8, 64)
    _fit(warp, canon, codes, canon * 0.9, 400, lambda d: d.pow(2).mean())
    with torch.no_grad():
        warped = warp(canon, codes)
    assert (warped - canon * 0.9).abs().mean() < 0.05
    _fit(back, warped, codes, canon, 1500, lambda d: d.abs().mean())
    with torch.no_grad():
        assert (back(warped, codes) - canon).abs().mean() < 1e-2


# -- Fourier embedding ---------------------------------------------------------------

def test_fourier_zero_params():
    e = _zero_(FourierEmbedding(16, 4.0))
    assert torch.equal(e(make_canonical(4, 4)[None]), torch.zeros(1, 16, 4, 4))


def test_fourier_range_and_pointwise():
    torch.manual_seed(0)
    e = FourierEmbedding(16, 4.0)
    out = e(torch.rand(2, 5, 5, 2) * 2 - 1)
    assert out.abs().max() <= 1
    const = e(torch.full((1, 5, 5, 2), 0.3))
    assert torch.equal(const, const[..., :1, :1].expand_as(const))


# -- modulated convolution ------------------------------------------------------------

def _conv_case(seed, k=3, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(3, 4, 6, 6, generator=g, dtype=dtype)
    w = torch.randn(5, 4, k, k, generator=g, dtype=dtype)
    s = torch.rand(3, 4, generator=g, dtype=dtype) + 0.5
    return x, w, s


@pytest.mark.parametrize("demod", [True, False])
@pytest.mark.parametrize("k", [1, 3])
def test_modulated_conv_matches_grouped_reference(demod, k):
    x, w, s = _conv_case(0, k)
    a = modulated_conv(x, w, s, demod, padding=k // 2)
    b = modulated_conv_reference(x, w, s, demod, padding=k // 2)
    assert torch.allclose(a, b, atol=1e-12)


def test_unit_styles_is_demodulated_plain_conv():
    x, w, _ = _conv_case(1)
    ones = torch.ones(3, 4, dtype=torch.float64)
    wd = w * torch.rsqrt(w.pow(2).sum(dim=(1, 2, 3), keepdim=True) + 1e-8)
    assert torch.allclose(modulated_conv(x, w, ones, True, 1), F.conv2d(x, wd, padding=1), atol=1e-12)


def test_demodulation_style_scale_invariance():
    x, w, s = _conv_case(2, dtype=torch.float32)
    a = modulated_conv(x, w, s, True, 1)
    b = modulated_conv(x, w, s * 10, True, 1)
    assert (a - b).abs().max() < 1e-4


def test_modulated_conv_zero_input():
    _, w, s = _conv_case(3)
    assert modulated_conv(torch.zeros(3, 4, 6, 6, dtype=torch.float64), w, s, True, 1).abs().max() == 0


# -- generator -----------------------------------------------------------------------------

def test_generator_bit_stable():
    m = build_models(SMALL, seed=0)
    z_s, z_t = torch.randn(2, 8), torch.randn(2, 8)
    a, b = m.generator(z_s, z_t), m.generator(z_s, z_t)
    assert all(torch.equal(x, y) for x, y in zip(a, b))


def test_build_models_is_seeded_and_isolated():
    torch.manual_seed(123)
    before = torch.randn(1)
    a, b = build_models(SMALL, seed=5), build_models(SMALL, seed=5)
    torch.manual_seed(123)
    assert torch.equal(torch.randn(1), before)  # global RNG untouched
    for (k, p), (_, q) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(p, q), k


def test_texture_changes_image_not_map():
    g = build_models(SMALL, seed=0).generator
    z_s = torch.randn(1, 8)
    x1, c1, _ = g(z_s, torch.randn(1, 8))
    x2, c2, _ = g(z_s, torch.randn(1, 8))
    assert torch.equal(c1, c2)
    assert (x1 - x2).abs().mean() > 0


def _late_swap(cfg):
    g = build_models(cfg, seed=0).generator
    z_s, z_t = torch.randn(2, 8), torch.randn(2, 8)
    w_s = g.structure_mapper(z_s)
    c = g.warp(w_s)
    w_t = g.texture_mapper(z_t)
    other = torch.rand_like(c) * 2 - 1
    return g.render(c, w_t), g.render(c, w_t, concat_coords=other)


def test_struc_mod_off_ignores_late_maps():
    a, b = _late_swap(ModelConfig(**{**SMALL.__dict__, "struc_mod": False}))
    assert torch.equal(a, b)


def test_struc_mod_on_uses_late_maps():
    a, b = _late_swap(SMALL)
    assert not torch.allclose(a, b)


def test_struc_mod_changes_only_layer_inputs():
    on = build_models(SMALL, seed=0).generator.synthesis
    off = build_models(ModelConfig(**{**SMALL.__dict__, "struc_mod": False}), seed=0).generator.synthesis
    for lon, loff in zip(on.layers, off.layers):
        assert lon.conv.weight.shape[1] == loff.conv.weight.shape[1] + 2


def test_render_checks_resolution():
    g = build_models(SMALL, seed=0).generator
    with pytest.raises(ValueError):
        g.render(make_canonical(8, 8)[None], torch.randn(1, 8))


def test_unwarp_disabled_raises():
    g = build_models(SMALL, seed=0).generator
    with pytest.raises(FeatureDisabledError):
        g.unwarp(g.canonical_batch(1), torch.randn(1, 8))


def test_w_plus_needs_one_code_per_layer():
    g = build_models(SMALL, seed=0).generator
    c = g.canonical_batch(1)
    g.render(c, torch.randn(1, SMALL.layers, 8))
    with pytest.raises(ValueError):
        g.render(c, torch.randn(1, SMALL.layers + 1, 8))


# -- critics & encoder --------------------------------------------------------------------

def test_patch_discriminator_reference_permutation_invariant():
    torch.manual_seed(0)
    d = PatchDiscriminator(8, 8).double()
    refs = torch.randn(2, 8, 3, 8, 8, dtype=torch.float64)
    q = torch.randn(2, 3, 3, 8, 8, dtype=torch.float64)
    perm = torch.randperm(8)
    assert torch.allclose(d(refs, q), d(refs[:, perm], q), atol=1e-12)


def test_patch_discriminator_zero_head():
    torch.manual_seed(0)
    d = PatchDiscriminator(8, 8)
    _zero_(d.head)
    out = d(torch.randn(2, 8, 3, 8, 8), torch.randn(2, 1, 3, 8, 8))
    assert out.shape == (2, 1) and torch.equal(out, torch.zeros(2, 1))


def test_patch_discriminator_needs_references():
    with pytest.raises(ValueError):
        PatchDiscriminator(8, 8)(torch.zeros(1, 0, 3, 8, 8), torch.zeros(1, 1, 3, 8, 8))


def test_patch_discriminator_can_learn_cooccurrence():
    # refs and real queries share a colour, fakes carry another: easy to separate
    torch.manual_seed(0)
    d = PatchDiscriminator(8, 8)
    opt = torch.optim.Adam(d.parameters(), lr=2e-3, betas=(0.0, 0.99))

    def batch():
        col_a = torch.rand(8, 1, 3, 1, 1) * 2 - 1
        col_b = torch.rand(8, 1, 3, 1, 1) * 2 - 1
        refs = col_a.expand(8, 8, 3, 8, 8) + 0.05 * torch.randn(8, 8, 3, 8, 8)
        real = col_a.expand(8, 1, 3, 8, 8) + 0.05 * torch.randn(8, 1, 3, 8, 8)
        fake = col_b.expand(8, 1, 3, 8, 8) + 0.05 * torch.randn(8, 1, 3, 8, 8)
        return refs, real, fake

    for _ in range(150):
        refs, real, fake = batch()
        loss = F.softplus(-d(refs, real)).mean() + F.softplus(d(refs, fake)).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    refs, real, fake = batch()
    with torch.no_grad():
        assert d(refs, real).mean() > d(refs, fake).mean() + 1.0


def test_encoder_shapes_and_determinism():
    torch.manual_seed(0)
    enc = Encoder(SMALL)
    x = torch.randn(3, 3, 16, 16)
    w_s, w_plus = enc(x)
    assert w_s.shape == (3, 8)
    assert w_plus.shape == (3, SMALL.layers, 8)
    w_s2, w_plus2 = enc(x)
    assert torch.equal(w_s, w_s2) and torch.equal(w_plus, w_plus2)
    with pytest.raises(ValueError):
        enc(torch.randn(1, 3, 32, 32))


def test_discriminator_outputs_one_logit_per_image():
    m = build_models(SMALL, seed=0)
    assert m.discriminator(torch.randn(5, 3, 16, 16)).shape == (5,)


def test_models_group_lookup():
    m = build_models(ModelConfig(**{**SMALL.__dict__, "backward_mlp": True}), seed=0)
    for name in m.GROUPS:
        assert m.group(name) is not None
    assert build_models(SMALL, seed=0).group("backward_mlp") is None


def test_lrelu_gain():
    assert math.isclose(SQRT2, math.sqrt(2))
