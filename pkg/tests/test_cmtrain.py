import json
import math

import numpy as np
import pytest
import torch

from promptnoise import checkpoint as ckpt_io
from promptnoise.cmtrain import (
    CMSettings,
    EncodedBatcher,
    LatentStats,
    StreamingMoments,
    TrainState,
    compute_latent_stats,
    ct_loss,
    ct_step,
    denormalize,
    draw_noise_levels,
    ema_update,
    load_pdit,
    noisy_pair,
    normalize,
    train_pdit,
)
from promptnoise.config import RunConfig
from promptnoise.data import PairedDataset, load_paired_dataset, make_toy_dataset, save_image
from promptnoise.errors import ConfigError, ContractError, TrainingError
from promptnoise.pae import PromptAutoencoder, pae_checkpoint
from promptnoise.pdit import consistency_fn
from promptnoise.schedule import pseudo_huber

from oracles import perturb_parameters

TINY = {
    "seed": 5,
    "pae": {"channels": [8, 8, 16, 16], "global_channels": 4, "local_channels": 4, "latent_channels": 3,
            "rho": 3, "base_size": 32, "patch": 32},
    "pdit": {"num_blocks": 1, "hidden_dim": 16, "num_heads": 2, "cond_channels": 4},
    "cm": {"iterations": 12, "batch": 4, "patch": 32, "stats_batches": 2, "log_every": 0, "ema_decay": 0.9},
}


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    make_toy_dataset(4, 32, "heteroscedastic:a=0.01,b=0.0004", 1, root, gains=(0.5, 2.0))
    return load_paired_dataset(root, patch=32)


@pytest.fixture(scope="module")
def cfg():
    return RunConfig(TINY)


@pytest.fixture(scope="module")
def pae_ck(cfg):
    torch.manual_seed(0)
    return pae_checkpoint(PromptAutoencoder.from_config(cfg).eval(), cfg, 0)


@pytest.fixture(scope="module")
def pae(pae_ck):
    from promptnoise.pae import load_pae

    return load_pae(pae_ck)[0]


class TestNormalize:
    def test_inverse_and_examples(self):
        stats = LatentStats(torch.tensor([0.5, -1.0], dtype=torch.float64), torch.tensor([2.0, 0.1], dtype=torch.float64))
        z = torch.randn(3, 2, 4, 4)
        back = denormalize(normalize(z, stats), stats)
        np.testing.assert_allclose(back.numpy(), z.numpy(), rtol=1e-6, atol=1e-6)
        mean_field = stats.mean.float().view(1, 2, 1, 1).expand(1, 2, 4, 4)
        assert torch.equal(normalize(mean_field, stats), torch.zeros(1, 2, 4, 4))

    def test_std_maps_to_sigma_data(self):
        stats = LatentStats(torch.zeros(1, dtype=torch.float64), torch.tensor([3.0], dtype=torch.float64), 0.5)
        z = torch.tensor([-3.0, 3.0], dtype=torch.float64).view(1, 1, 1, 2)
        assert normalize(z, stats).std(unbiased=False).item() == pytest.approx(0.5)

    def test_channel_mismatch(self):
        stats = LatentStats(torch.zeros(2, dtype=torch.float64), torch.ones(2, dtype=torch.float64))
        with pytest.raises(ContractError):
            normalize(torch.zeros(1, 3, 2, 2), stats)


class TestLatentStats:
    def test_streaming_matches_direct_and_order(self):
        g = torch.Generator().manual_seed(0)
        zs = [torch.randn(4, 3, 5, 5, generator=g) * 2 + 1 for _ in range(6)]
        a, b = StreamingMoments(3), StreamingMoments(3)
        for z in zs:
            a.update(z)
        for z in reversed(zs):
            b.update(z)
        ma, sa = a.finalize()
        mb, sb = b.finalize()
        allz = torch.cat(zs).double().transpose(0, 1).reshape(3, -1)
        np.testing.assert_allclose(ma, allz.mean(1), atol=1e-10)
        np.testing.assert_allclose(sa, allz.std(1, unbiased=False), atol=1e-10)
        np.testing.assert_allclose(ma, mb, atol=1e-6)
        np.testing.assert_allclose(sa, sb, atol=1e-6)

    def test_renormalized_moments(self, toy, pae):
        stats = compute_latent_stats(pae, toy, n_batches=8, batch=8, seed=0)
        held = compute_latent_stats(pae, toy, n_batches=4, batch=8, seed=99)
        # re-measure normalized latents on other batches
        acc = StreamingMoments(3)
        from promptnoise.data import sample_patch_batch
        from promptnoise.pae import to_tensor

        ds = toy.with_patch(32, 1234)
        with torch.no_grad():
            for b in range(4):
                c, n = sample_patch_batch(ds, 8, b)
                acc.update(normalize(pae.encode(to_tensor(n - c))[0], stats))
        mean, std = acc.finalize()
        assert mean.abs().max() < 0.05
        np.testing.assert_allclose(std, 0.5, rtol=0.05)
        assert held.mean.shape == (3,)

    def test_degenerate_aborts(self, tmp_path, cfg):
        for sub in ("clean", "noisy"):
            for i in range(2):
                save_image(np.full((32, 32, 3), 0.4), tmp_path / sub / f"a{i}.png")
        ds = load_paired_dataset(tmp_path, patch=32)
        # learned prompt arrays vary with position, so a collapsed encoder is
        # what makes the latent constant
        m = PromptAutoencoder.from_config(cfg).eval()
        with torch.no_grad():
            m.encoder.out.weight.zero_()
        with pytest.raises(TrainingError, match="degenerate"):
            compute_latent_stats(m, ds, 1, 2)

    def test_bad_batches(self, toy, pae):
        with pytest.raises(ContractError):
            compute_latent_stats(pae, toy, 0)


class TestEMA:
    def _pair(self):
        torch.manual_seed(0)
        a, b = torch.nn.Linear(3, 2), torch.nn.Linear(3, 2)
        return a, b

    def test_decay_zero_copies(self):
        ema, st = self._pair()
        ema_update(ema, st, 0.0)
        assert all(torch.equal(p, q) for p, q in zip(ema.parameters(), st.parameters()))

    def test_near_one_unchanged(self):
        ema, st = self._pair()
        before = [p.clone() for p in ema.parameters()]
        ema_update(ema, st, 1 - 1e-12)
        for p, q in zip(ema.parameters(), before):
            assert (p - q).abs().max() < 1e-8

    def test_geometric(self):
        ema, st = self._pair()
        ema.double(), st.double()
        gap0 = [(p - q).detach().clone() for p, q in zip(ema.parameters(), st.parameters())]
        for _ in range(7):
            ema_update(ema, st, 0.8)
        for g0, p, q in zip(gap0, ema.parameters(), st.parameters()):
            np.testing.assert_allclose((p - q).detach(), g0 * 0.8**7, atol=1e-12)

    def test_bad_decay(self):
        with pytest.raises(ContractError):
            ema_update(*self._pair(), 1.0)


def test_shared_noise_contract():
    g = torch.Generator().manual_seed(1)
    z0 = torch.randn(4, 3, 2, 2, generator=g, dtype=torch.float64)
    eps = torch.randn(4, 3, 2, 2, generator=g, dtype=torch.float64)
    st = torch.tensor([0.1, 1.0, 2.0, 30.0], dtype=torch.float64)
    st1 = torch.tensor([0.2, 1.5, 3.0, 80.0], dtype=torch.float64)
    zt, zt1 = noisy_pair(z0, st, st1, eps)
    expected = (st1 - st).view(4, 1, 1, 1) * eps
    np.testing.assert_allclose((zt1 - zt).numpy(), expected.numpy(), rtol=1e-12, atol=1e-12)
    with pytest.raises(ContractError):
        noisy_pair(z0, st, st1, eps[:, :2])


class TestCTLoss:
    @pytest.fixture()
    def setup(self, cfg, toy, pae):
        stats = compute_latent_stats(pae, toy, 2, 4, 0)
        batcher = EncodedBatcher(pae, stats, toy)
        state = TrainState.create(cfg)
        perturb_parameters(state.student, 0.05)
        state.student.eval()
        return CMSettings.from_config(cfg), batcher, state

    def test_equal_sigmas_give_zero(self, setup):
        settings, batcher, state = setup
        clean, z0, pr = batcher.batch(4, 0)
        s = torch.full((4,), 1.3, dtype=torch.float64)
        eps = torch.randn_like(z0)
        cond = state.student.cond_embed(clean, pr)
        a = consistency_fn(state.student, z0 + 1.3 * eps, s, 0.002, cond)
        b = consistency_fn(state.student, z0 + 1.3 * eps, s, 0.002, cond)
        assert pseudo_huber(a, b).item() == 0.0

    def test_matches_pseudo_huber_per_sample(self, setup):
        settings, batcher, state = setup
        clean, z0, pr = batcher.batch(4, 1)
        t, st, st1 = draw_noise_levels(11, settings, 4, 0, 0)
        eps = torch.randn_like(z0)
        loss, per, w = ct_loss(state.student, clean, z0, pr, st, st1, eps, settings)
        zt, zt1 = noisy_pair(z0, st, st1, eps)
        cond = state.student.cond_embed(clean, pr)
        with torch.no_grad():
            a = consistency_fn(state.student, zt1, st1, 0.002, cond)
            b = consistency_fn(state.student, zt, st, 0.002, cond)
        for i in range(4):
            lam = 1.0 / (st1[i] - st[i]).item()
            assert w[i].item() == pytest.approx(lam, rel=1e-6)
            assert per[i].item() == pytest.approx(lam * pseudo_huber(a[i], b[i]).item(), rel=1e-4)
        assert loss.item() == pytest.approx(per.mean().item(), rel=1e-6)
        assert torch.all(per > 0)

    def test_stop_gradient(self, setup):
        settings, batcher, state = setup
        m = state.student.double()
        clean, z0, pr = batcher.batch(2, 2)
        clean, z0 = clean.double(), z0.double()
        pr = type(pr)([g.double() for g in pr.global_], pr.local.double())
        _, st, st1 = draw_noise_levels(11, settings, 2, 0, 1)
        eps = torch.randn_like(z0)
        m.zero_grad()
        ct_loss(m, clean, z0, pr, st, st1, eps, settings)[0].backward()
        g1 = [p.grad.clone() for p in m.parameters()]
        # teacher output as an explicit constant
        zt, zt1 = noisy_pair(z0, st, st1, eps)
        with torch.no_grad():
            target = consistency_fn(m, zt, st, 0.002, m.cond_embed(clean, pr)).clone()
        m.zero_grad()
        out = consistency_fn(m, zt1, st1, 0.002, m.cond_embed(clean, pr))
        c = 0.00054 * math.sqrt(z0[0].numel())
        d = (((out - target) ** 2).flatten(1).sum(1) + c * c).sqrt() - c
        ((1.0 / (st1 - st)) * d).mean().backward()
        for a, b in zip(g1, (p.grad for p in m.parameters())):
            torch.testing.assert_close(a, b, atol=1e-6, rtol=1e-6)


class TestTraining:
    def test_step_finite_and_ema_frozen(self, cfg, toy, pae):
        stats = compute_latent_stats(pae, toy, 2, 4, 0)
        batcher = EncodedBatcher(pae, stats, toy)
        state = TrainState.create(cfg)
        settings = CMSettings.from_config(cfg)
        ema_before = [p.clone() for p in state.ema.parameters()]
        for k in range(3):
            loss, state, rec = ct_step(batcher.batch(4, k), state, settings)
            assert math.isfinite(loss) and loss > 0
            assert rec["iteration"] == k and len(rec["t"]) == 4
        assert state.iteration == 3
        assert all(p.grad is None for p in state.ema.parameters())
        assert all(not p.requires_grad for p in state.ema.parameters())
        moved = [not torch.equal(a, b) for a, b in zip(ema_before, state.ema.parameters())]
        assert any(moved)

    def test_train_lifecycle(self, cfg, toy, pae_ck, tmp_path):
        ck = train_pdit(toy, pae_ck, cfg, tmp_path)
        lines = [json.loads(l) for l in (tmp_path / "train_log.jsonl").read_text().splitlines()]
        assert len(lines) == 12
        assert {"iteration", "N", "sigma_t", "loss", "lambda"} <= set(lines[0])
        Ns = [l["N"] for l in lines]
        assert Ns == sorted(Ns) and Ns[0] == 11 and Ns[-1] <= 161
        model, stats, _ = load_pdit(tmp_path / "final")
        assert stats.mean.shape == (3,)
        loaded = ckpt_io.load(tmp_path / "final", kind="pdit")
        assert loaded.extra["pae_fingerprint"] == pae_ck.fingerprint
        assert set(k.split(".")[0] for k in loaded.tensors) == {"ema", "student", "stats", "history"}

    def test_reproducible_trace(self, cfg, toy, pae_ck):
        a = train_pdit(toy, pae_ck, cfg).tensors["history.loss"]
        b = train_pdit(toy, pae_ck, cfg).tensors["history.loss"]
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-6)

    def test_pae_section_must_match(self, cfg, toy, pae_ck):
        other = cfg.override({"pae.latent_channels": 5})
        with pytest.raises(ConfigError):
            train_pdit(toy, pae_ck, other)

    def test_missing_stats(self, cfg, toy, pae_ck):
        with pytest.raises(ConfigError):
            train_pdit(toy, pae_ck, cfg.override({"cm.stats_batches": 0}))

    def test_checkpoint_without_stats(self, cfg):
        ck = ckpt_io.Checkpoint("pdit", {}, cfg)
        with pytest.raises(ConfigError):
            LatentStats.from_checkpoint(ck)
