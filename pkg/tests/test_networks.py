import pytest
import torch
from hypothesis import given, settings, strategies as st

from contrast_translate.networks import (AdainResBlk, NetworkSpec, ResBlk, adain,
                                         build_discriminator, build_generator,
                                         build_style_encoder, ema_update, layer_output_shapes,
                                         make_shadow)

from conftest import grad_rel_error, small_spec, tiny_spec

# Expected layer outputs at 128x128: (H, W, C), or (C,) for vectors.
TRUNK_128 = [(128, 128, 64), (64, 64, 128), (32, 32, 256), (16, 16, 512), (8, 8, 512), (4, 4, 512)]
HEAD_128 = [(4, 4, 512), (1, 1, 512), (1, 1, 512), (512,)]
DISCRIMINATOR_128 = TRUNK_128 + HEAD_128 + [(256,)] + HEAD_128 + [(1,)]
STYLE_ENCODER_128 = TRUNK_128 + HEAD_128 + [(512,), (512,), (128,)]
GENERATOR_128 = [(128, 128, 64), (64, 64, 128), (32, 32, 256), (16, 16, 512),
                 (16, 16, 512), (16, 16, 512), (16, 16, 512), (16, 16, 512),
                 (32, 32, 256), (64, 64, 128), (128, 128, 64), (128, 128, 3)]


@pytest.fixture(scope="module")
def full_nets():
    torch.manual_seed(0)
    spec = NetworkSpec()
    return build_discriminator(spec), build_style_encoder(spec), build_generator(spec)


class TestArchitecture:
    def test_discriminator_rows(self, full_nets):
        d, _, _ = full_nets
        shapes = [s for _, s in layer_output_shapes(d, torch.zeros(1, 3, 128, 128))]
        assert shapes == DISCRIMINATOR_128

    def test_style_encoder_rows(self, full_nets):
        _, e, _ = full_nets
        shapes = [s for _, s in layer_output_shapes(e, torch.zeros(1, 3, 128, 128))]
        assert shapes == STYLE_ENCODER_128

    def test_generator_rows(self, full_nets):
        _, _, g = full_nets
        shapes = [s for _, s in layer_output_shapes(g, torch.zeros(1, 3, 128, 128),
                                                    torch.zeros(1, 128))]
        assert shapes == GENERATOR_128

    def test_generator_normalization_layout(self, full_nets):
        _, _, g = full_nets
        assert [b.normalize for b in g.encode] == [True] * 5
        assert [b.downsample for b in g.encode] == [True, True, True, False, False]
        assert all(isinstance(b, AdainResBlk) for b in g.decode)
        assert [b.upsample for b in g.decode] == [False, False, True, True, True]

    def test_no_normalization_in_discriminator_or_encoder(self, full_nets):
        d, e, _ = full_nets
        for net in (d, e):
            assert not any(isinstance(m, (torch.nn.InstanceNorm2d, torch.nn.BatchNorm2d))
                           for m in net.modules())

    def test_head_outputs(self, full_nets):
        d, e, g = full_nets
        x = torch.rand(8, 3, 128, 128) * 2 - 1
        with torch.no_grad():
            rep, logit = d(x)
            style = e(x[:4])
            out = g(x[:2], torch.randn(2, 128))
        assert rep.shape == (8, 256) and logit.shape == (8, 1)
        assert torch.allclose(rep.norm(dim=1), torch.ones(8), atol=1e-5)
        assert style.shape == (4, 128)
        assert out.shape == (2, 3, 128, 128)
        assert out.abs().max() <= 1

    def test_branches_differ_only_in_final_fan_out(self, full_nets):
        d, _, _ = full_nets
        ct = [p.shape for p in d.ct_head.parameters()]
        adv = [p.shape for p in d.adv_head.parameters()]
        assert ct[:-2] == adv[:-2]
        assert ct[-2:] == [(256, 512), (256,)] and adv[-2:] == [(1, 512), (1,)]
        diff = sum(p.numel() for p in d.ct_head.parameters()) - sum(
            p.numel() for p in d.adv_head.parameters())
        assert diff == (512 + 1) * (256 - 1)

    def test_he_initialization_scale(self, full_nets):
        d, _, _ = full_nets
        w = d.trunk.blocks[2].conv1.weight
        fan_in = w.shape[1] * w.shape[2] * w.shape[3]
        assert w.std().item() == pytest.approx((2 / fan_in) ** 0.5, rel=0.05)


class TestNetworkContracts:
    @pytest.mark.parametrize("res", [32, 64, 128])
    @pytest.mark.parametrize("batch", [1, 3])
    def test_shape_contract(self, res, batch):
        spec = NetworkSpec(resolution=res, base_channels=4, max_channels=16, style_dim=128,
                           rep_dim=256, gen_down=3)
        x = torch.rand(batch, 3, res, res) * 2 - 1
        with torch.no_grad():
            rep, logit = build_discriminator(spec)(x)
            style = build_style_encoder(spec)(x)
            out = build_generator(spec)(x, style)
        assert rep.shape == (batch, 256) and logit.shape == (batch, 1)
        assert style.shape == (batch, 128)
        assert out.shape == x.shape

    def test_bad_resolution(self):
        with pytest.raises(ValueError, match="4x4"):
            build_discriminator(NetworkSpec(resolution=96))

    def test_style_dimension_mismatch(self):
        g = build_generator(small_spec())
        with pytest.raises(ValueError, match="style code"):
            g(torch.zeros(2, 3, 32, 32), torch.zeros(2, 5))
        with pytest.raises(ValueError, match="batch"):
            g(torch.zeros(2, 3, 32, 32), torch.zeros(3, 8))

    def test_style_encoder_deterministic_and_finite_on_zero_image(self):
        e = build_style_encoder(small_spec()).eval()
        x = torch.rand(1, 3, 32, 32)
        with torch.no_grad():
            assert torch.equal(e(torch.cat([x, x]))[0], e(torch.cat([x, x]))[1])
            assert torch.isfinite(e(torch.zeros(1, 3, 32, 32))).all()

    def test_style_changes_output(self):
        torch.manual_seed(1)
        g = build_generator(small_spec())
        x = torch.rand(1, 3, 32, 32) * 2 - 1
        with torch.no_grad():
            diff = (g(x, torch.randn(1, 8)) - g(x, torch.randn(1, 8))).abs().mean()
        assert diff.item() > 0

    def test_finite_outputs_for_many_seeds(self):
        spec = tiny_spec()
        for seed in range(100):
            torch.manual_seed(seed)
            d, e, g = build_discriminator(spec), build_style_encoder(spec), build_generator(spec)
            x = torch.randn(2, 3, 8, 8)
            with torch.no_grad():
                rep, logit = d(x)
                out = g(x, e(x))
            assert torch.isfinite(rep).all() and torch.isfinite(logit).all()
            assert torch.isfinite(out).all()


class TestAdaIN:
    def test_standardization(self, gen):
        x = torch.randn(2, 3, 6, 6, generator=gen, dtype=torch.float64) * 4 + 2
        out = adain(x, torch.ones(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64))
        assert torch.allclose(out.mean(dim=(2, 3)), torch.zeros(2, 3, dtype=torch.float64), atol=1e-10)
        assert torch.allclose(out.std(dim=(2, 3), unbiased=False),
                              torch.ones(2, 3, dtype=torch.float64), atol=1e-5)

    def test_zero_scale(self, gen):
        x = torch.randn(1, 2, 4, 4, generator=gen)
        beta = torch.tensor([0.3, -2.0])
        out = adain(x, torch.zeros(2), beta)
        assert torch.equal(out, beta[None, :, None, None].expand_as(out))

    def test_target_moments(self, gen):
        x = torch.randn(1, 2, 4, 4, generator=gen, dtype=torch.float64)
        out = adain(x, torch.tensor([2.0, 3.0], dtype=torch.float64),
                    torch.tensor([-1.0, 5.0], dtype=torch.float64))
        assert torch.allclose(out.mean(dim=(2, 3))[0], torch.tensor([-1.0, 5.0], dtype=torch.float64), atol=1e-4)
        assert torch.allclose(out.std(dim=(2, 3), unbiased=False)[0],
                              torch.tensor([2.0, 3.0], dtype=torch.float64), atol=1e-4)

    def test_constant_channel_is_finite(self):
        out = adain(torch.ones(1, 1, 3, 3), torch.ones(1), torch.zeros(1))
        assert torch.isfinite(out).all()

    @given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0), st.floats(-5.0, 5.0))
    @settings(max_examples=50, deadline=None)
    def test_invariant_to_instance_affine(self, seed, a, b):
        g = torch.Generator().manual_seed(seed)
        x = torch.randn(2, 3, 5, 5, generator=g, dtype=torch.float64)
        s = torch.randn(2, 3, generator=g, dtype=torch.float64)
        beta = torch.randn(2, 3, generator=g, dtype=torch.float64)
        # the guard eps is absolute, so exact invariance rescales it by 1/a
        assert torch.allclose(adain(a * x + b, s, beta), adain(x, s, beta, eps=1e-5 / a),
                              atol=1e-10)
        assert torch.allclose(adain(a * x + b, s, beta), adain(x, s, beta), atol=1e-3)

    def test_gradient(self, gen):
        x = torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64, requires_grad=True)
        s = torch.randn(2, 3, generator=gen, dtype=torch.float64, requires_grad=True)
        b = torch.randn(2, 3, generator=gen, dtype=torch.float64, requires_grad=True)
        w = torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64)
        assert grad_rel_error(lambda: (adain(x, s, b) * w).sum(), [x, s, b]) < 1e-4


class TestBlockGradients:
    @pytest.mark.parametrize("normalize,downsample", [(False, True), (True, True), (True, False)])
    def test_resblk(self, gen, normalize, downsample):
        torch.manual_seed(0)
        blk = ResBlk(2, 3, normalize=normalize, downsample=downsample).double()
        x = torch.randn(2, 2, 4, 4, generator=gen, dtype=torch.float64, requires_grad=True)
        w = torch.randn_like(blk(x))
        params = [x] + list(blk.parameters())
        assert grad_rel_error(lambda: (blk(x) * w).sum(), params) < 1e-4

    def test_adain_resblk(self, gen):
        torch.manual_seed(0)
        blk = AdainResBlk(3, 2, style_dim=2, upsample=True).double()
        x = torch.randn(2, 3, 2, 2, generator=gen, dtype=torch.float64, requires_grad=True)
        s = torch.randn(2, 2, generator=gen, dtype=torch.float64, requires_grad=True)
        w = torch.randn_like(blk(x, s))
        params = [x, s] + list(blk.parameters())
        assert grad_rel_error(lambda: (blk(x, s) * w).sum(), params) < 1e-4

    def test_shortcut_pool_order_is_equivalent(self, gen):
        torch.manual_seed(0)
        blk = ResBlk(2, 4, downsample=True).double()
        x = torch.randn(1, 2, 6, 6, generator=gen, dtype=torch.float64)
        reference = torch.nn.functional.avg_pool2d(blk.conv1x1(x), 2)
        assert torch.allclose(blk._shortcut(x), reference, atol=1e-12)


class TestEMA:
    def pair(self, shadow_value, live_value):
        torch.manual_seed(0)
        live = torch.nn.Linear(3, 2).double()
        shadow = make_shadow(live)
        with torch.no_grad():
            for p in shadow.parameters():
                p.fill_(shadow_value)
            for p in live.parameters():
                p.fill_(live_value)
        return shadow, live

    def test_closed_form_after_100_steps(self):
        shadow, live = self.pair(0.0, 1.0)
        for _ in range(100):
            ema_update(shadow, live, 0.999)
        expected = 1 - 0.999 ** 100
        assert expected == pytest.approx(0.0952, abs=1e-4)
        for p in shadow.parameters():
            assert (p - expected).abs().max().item() < 1e-10

    def test_decay_zero_copies(self, gen):
        shadow, live = self.pair(0.0, 0.0)
        with torch.no_grad():
            for p in live.parameters():
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64))
        ema_update(shadow, live, 0.0)
        for s, l in zip(shadow.parameters(), live.parameters()):
            assert torch.equal(s, l)

    def test_decay_one_freezes(self):
        shadow, live = self.pair(0.25, 3.0)
        before = [p.clone() for p in shadow.parameters()]
        ema_update(shadow, live, 1.0)
        for b, p in zip(before, shadow.parameters()):
            assert torch.equal(b, p)

    def test_shadow_starts_equal(self):
        torch.manual_seed(0)
        live = build_generator(tiny_spec())
        shadow = make_shadow(live)
        for s, l in zip(shadow.parameters(), live.parameters()):
            assert torch.equal(s, l) and not s.requires_grad

    def test_structure_mismatch(self):
        with pytest.raises(ValueError, match="structure"):
            ema_update(torch.nn.Linear(2, 2), torch.nn.Sequential(torch.nn.Linear(2, 2)), 0.5)
        with pytest.raises(ValueError, match="shape"):
            ema_update(torch.nn.Linear(2, 2), torch.nn.Linear(2, 3), 0.5)
        with pytest.raises(ValueError, match="decay"):
            ema_update(torch.nn.Linear(2, 2), torch.nn.Linear(2, 2), 1.5)
