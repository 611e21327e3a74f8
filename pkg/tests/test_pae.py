import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from promptnoise import checkpoint as ckpt_io
from promptnoise.config import RunConfig
from promptnoise.data import load_paired_dataset, make_toy_dataset
from promptnoise.errors import ConfigError, ContractError
from promptnoise.pae import (
    Decoder,
    GlobalPromptBlock,
    LocalPromptBlock,
    PromptAutoencoder,
    PromptEncoder,
    correlation_features,
    cosine_lr,
    load_pae,
    pae_loss,
    train_pae,
)

from oracles import fixed_projection, perturb_parameters, sampled_gradcheck

torch.set_default_dtype(torch.float32)

SMALL = dict(channels=(8, 8, 16, 16), global_ch=4, local_ch=4, latent_ch=2, res_blocks=1, rho=3, base_size=16)


def small_pae(**kw):
    torch.manual_seed(0)
    return PromptAutoencoder(**{**SMALL, **kw})


class TestGlobalPromptBlock:
    def test_coefficients_sum_to_one(self):
        torch.manual_seed(0)
        gpb = GlobalPromptBlock(6, 5, 8)
        w = gpb.coefficients(torch.randn(3, 6, 8, 8))
        assert w.shape == (3, 5, 1, 1)
        np.testing.assert_allclose(w.sum(dim=1).detach().numpy(), 1.0, atol=1e-5)

    def test_permutation_invariance(self):
        torch.manual_seed(1)
        gpb = GlobalPromptBlock(4, 3, 8).double()
        f = torch.randn(2, 4, 8, 8, dtype=torch.float64)
        perm = torch.randperm(64)
        g = f.flatten(2)[:, :, perm].reshape(f.shape)
        w1, w2 = gpb.coefficients(f), gpb.coefficients(g)
        # the moments only differ by summation-order rounding
        assert torch.allclose(w1, w2, rtol=0, atol=1e-14)

    def test_output_shape_and_resample(self):
        gpb = GlobalPromptBlock(4, 3, 8)
        assert gpb(torch.randn(1, 4, 8, 8)).shape == (1, 3, 8, 8)
        assert gpb(torch.randn(1, 4, 12, 4)).shape == (1, 3, 12, 4)

    def test_channel_mismatch(self):
        with pytest.raises(ContractError):
            GlobalPromptBlock(4, 3, 8)(torch.randn(1, 5, 8, 8))

    def test_gradcheck(self):
        torch.manual_seed(2)
        gpb = perturb_parameters(GlobalPromptBlock(4, 6, 8).double())
        f = torch.randn(2, 4, 8, 8, dtype=torch.float64)
        proj = fixed_projection((2, 6, 8, 8))
        worst, nonzero, _ = sampled_gradcheck(gpb, lambda: (gpb(f) * proj).sum(), n=60)
        assert nonzero >= 50
        assert worst < 1e-3


class TestLocalPromptBlock:
    def test_constant_residual_uniform_weights(self):
        torch.manual_seed(0)
        lpb = LocalPromptBlock(4, 16, rho=3)
        n = torch.full((1, 3, 16, 16), 0.2)
        feats = correlation_features(n, 3)
        assert torch.count_nonzero(feats) == 0
        w = lpb.coefficients(feats, (16, 16))
        # away from the zero-padded 3x3 border the map is exactly uniform
        interior = w[..., 1:-1, 1:-1]
        assert torch.allclose(interior, interior[..., :1, :1].expand_as(interior))

    def test_weights_sum_to_one_everywhere(self):
        lpb = LocalPromptBlock(5, 16, rho=5)
        n = torch.randn(2, 3, 16, 16) * 0.1
        w = lpb.coefficients(correlation_features(n, 5), (16, 16))
        np.testing.assert_allclose(w.sum(dim=1).detach().numpy(), 1.0, atol=1e-5)

    @pytest.mark.parametrize("hw", [(16, 16), (24, 8), (8, 32)])
    def test_output_shape(self, hw):
        lpb = LocalPromptBlock(4, 16, rho=3)
        assert lpb(torch.randn(1, 3, *hw)).shape == (1, 4, *hw)

    def test_gradcheck(self):
        torch.manual_seed(3)
        lpb = perturb_parameters(LocalPromptBlock(4, 12, rho=3, mid_ch=6).double())
        n = torch.randn(2, 3, 12, 12, dtype=torch.float64) * 0.1
        feats = correlation_features(n, 3)
        proj = fixed_projection((2, 4, 12, 12))
        worst, nonzero, _ = sampled_gradcheck(lpb, lambda: (lpb(n, feats) * proj).sum(), n=60)
        assert nonzero >= 50
        assert worst < 1e-3


class TestEncoder:
    def test_latent_shape(self):
        enc = PromptEncoder((8, 8, 16, 16), 4, 4, 3, 1, 3, 64)
        z, prompts = enc(torch.randn(2, 3, 64, 64))
        assert z.shape == (2, 3, 8, 8)
        assert [tuple(g.shape) for g in prompts.global_] == [(2, 4, 64 >> l, 64 >> l) for l in range(4)]
        assert prompts.local.shape == (2, 4, 64, 64)

    @settings(max_examples=8, deadline=None)
    @given(h=st.integers(1, 5), w=st.integers(1, 5))
    def test_shape_contract_random_sizes(self, h, w):
        enc = PromptEncoder((4, 4, 8, 8), 2, 2, 2, 1, 3, 16)
        z, prompts = enc(torch.randn(1, 3, 8 * h, 8 * w))
        assert z.shape == (1, 2, h, w)
        for l, g in enumerate(prompts.global_):
            assert g.shape[-2:] == ((8 * h) >> l, (8 * w) >> l)

    def test_indivisible(self):
        enc = PromptEncoder((4, 4, 8, 8), 2, 2, 2, 1, 3, 16)
        with pytest.raises(ConfigError):
            enc(torch.randn(1, 3, 20, 16))

    def test_deterministic(self):
        m = small_pae().eval()
        n = torch.randn(1, 3, 16, 16) * 0.1
        with torch.no_grad():
            z1, p1 = m.encode(n)
            z2, p2 = m.encode(n)
        assert torch.equal(z1, z2) and torch.equal(p1.local, p2.local)


class TestDecoder:
    def test_shape_and_bounds(self):
        m = perturb_parameters(small_pae(), scale=0.5).eval()
        clean = torch.rand(2, 3, 16, 16)
        with torch.no_grad():
            out = m.decode(torch.randn(2, 2, 2, 2), clean)
        assert out.shape == clean.shape
        assert out.min() >= 0 and out.max() <= 1

    def test_zero_head_is_clean(self):
        m = small_pae().eval()
        clean = torch.rand(1, 3, 16, 16)
        with torch.no_grad():
            assert torch.equal(m.decode(torch.randn(1, 2, 2, 2), clean), clean)

    def test_signal_dependence(self):
        m = perturb_parameters(small_pae()).eval()
        z = torch.randn(1, 2, 2, 2)
        with torch.no_grad():
            a = m.decode(z, torch.full((1, 3, 16, 16), 0.3))
            b = m.decode(z, torch.full((1, 3, 16, 16), 0.6))
        assert ((a - 0.3) - (b - 0.6)).abs().mean() > 0

    def test_size_mismatch(self):
        with pytest.raises(ContractError):
            small_pae().decode(torch.randn(1, 2, 2, 2), torch.rand(1, 3, 24, 16))

    def test_unclamped_in_training(self):
        dec = perturb_parameters(Decoder((4, 4, 8, 8), 2), scale=2.0).train()
        out = dec(torch.randn(1, 2, 2, 2) * 10, torch.rand(1, 3, 16, 16))
        assert out.min() < 0 or out.max() > 1


def test_shortcut_can_be_lossless():
    m = small_pae(latent_ch=192, shortcut=True).eval()
    eye = torch.eye(192)[:, :, None, None]
    with torch.no_grad():
        m.encoder.out.weight.zero_()
        m.encoder.out.bias.zero_()
        m.encoder.skip.weight.copy_(eye)
        m.encoder.skip.bias.zero_()
        m.decoder.skip.weight.copy_(eye)
    clean = torch.rand(2, 3, 16, 16) * 0.5 + 0.25
    n = torch.randn(2, 3, 16, 16) * 0.05
    with torch.no_grad():
        recon, z, _ = m(clean, clean + n)
    assert z.shape == (2, 192, 2, 2)
    torch.testing.assert_close(recon, clean + n, atol=1e-6, rtol=0)
    # zero-initialised decoder path: a fresh model still decodes to the clean image
    fresh = small_pae(latent_ch=192, shortcut=True).eval()
    with torch.no_grad():
        assert torch.equal(fresh.decode(torch.randn(1, 192, 2, 2), clean[:1]), clean[:1])


def test_encode_decode_gradcheck():
    torch.manual_seed(4)
    m = perturb_parameters(PromptAutoencoder((4, 4, 6, 6), 3, 3, 2, 1, 3, 16).double())
    clean = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    noisy = clean + 0.1 * torch.randn(1, 3, 16, 16, dtype=torch.float64)
    feats = correlation_features(noisy - clean, 3)
    proj = fixed_projection((1, 3, 16, 16))
    m.train()  # unclamped output keeps the loss smooth

    def loss():
        recon, z, _ = m(clean, noisy, feats)
        return (recon * proj).sum() + (z**2).sum()

    # early-layer gradients are ~1e-8 here, so a wider step keeps roundoff in check
    worst, nonzero, _ = sampled_gradcheck(m, loss, n=60, h=1e-3)
    assert nonzero >= 50
    assert worst < 1e-3


class TestLoss:
    def test_examples(self):
        x = torch.rand(1, 3, 8, 8)
        z = torch.zeros(1, 2, 1, 1)
        assert pae_loss(x, x, z, 1e-4).item() == 0.0
        assert pae_loss(x + 0.1, x, z, 0.0).item() == pytest.approx(0.1, abs=1e-6)
        assert pae_loss(x, x, torch.ones_like(z), 1.0).item() == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            pae_loss(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 16), torch.zeros(1), 0.0)

    def test_cosine_endpoints(self):
        assert cosine_lr(0, 2000, 1e-4, 1e-6) == pytest.approx(1e-4, abs=1e-15)
        assert abs(cosine_lr(1999, 2000, 1e-4, 1e-6) - 1e-6) < 1e-9
        lrs = [cosine_lr(k, 100, 1e-3, 1e-5) for k in range(100)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    make_toy_dataset(4, 32, "heteroscedastic:a=0.01,b=0.0004", 0, root)
    return load_paired_dataset(root)


def _tiny_cfg(**over):
    cfg = RunConfig({
        "pae": {"channels": [8, 8, 16, 16], "global_channels": 4, "local_channels": 4, "latent_channels": 4,
                "rho": 3, "base_size": 32, "patch": 32, "batch": 4, "iterations": 150, "lr": 2e-3,
                "lr_min": 1e-5, "log_every": 0},
    })
    return cfg.override(over) if over else cfg


class TestTraining:
    def test_loss_decreases_and_roundtrip(self, toy, tmp_path):
        cfg = _tiny_cfg()
        ck = train_pae(toy, cfg, tmp_path)
        hist = ck.tensors["history.loss"]
        assert len(hist) == 150
        assert hist[-20:].mean() < hist[:20].mean()
        assert abs(ck.extra["final_lr"] - 1e-5) < 1e-9
        loaded = ckpt_io.load(tmp_path / "final", kind="pae", expect_fingerprint=cfg.fingerprint)
        m1, _ = load_pae(ck)
        m2, _ = load_pae(loaded)
        clean, noisy = toy.pair(0)
        c = torch.from_numpy(clean).permute(2, 0, 1)[None].float()
        n = torch.from_numpy(noisy).permute(2, 0, 1)[None].float()
        with torch.no_grad():
            assert torch.equal(m1(c, n)[0], m2(c, n)[0])

    def test_deterministic_trace(self, toy):
        cfg = _tiny_cfg(**{"pae.iterations": 10})
        a = train_pae(toy, cfg).tensors["history.loss"]
        b = train_pae(toy, cfg).tensors["history.loss"]
        np.testing.assert_array_equal(a, b)

    def test_empty_dataset(self, toy):
        from promptnoise.data import PairedDataset

        with pytest.raises(ConfigError):
            train_pae(PairedDataset([]), _tiny_cfg())

    def test_periodic_checkpoints(self, toy, tmp_path):
        cfg = _tiny_cfg(**{"pae.iterations": 6, "pae.checkpoint_every": 3})
        train_pae(toy, cfg, tmp_path)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["final", "iter_0000003", "iter_0000006"]
