import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptnoise import checkpoint as ckpt_io
from promptnoise import rng
from promptnoise.config import RunConfig
from promptnoise.data import (
    NoiseModel,
    dihedral,
    load_paired_dataset,
    make_toy_dataset,
    read_toy_metadata,
    sample_patch_batch,
    save_image,
)
from promptnoise.errors import ConfigError, ContractError


class TestRNG:
    def test_keyed_streams(self):
        a = rng.generator(1, "x", 3).random(4)
        assert np.array_equal(a, rng.generator(1, "x", 3).random(4))
        assert not np.array_equal(a, rng.generator(1, "x", 4).random(4))
        assert not np.array_equal(a, rng.generator(1, "y", 3).random(4))
        assert not np.array_equal(a, rng.generator(2, "x", 3).random(4))

    def test_env_seed(self, monkeypatch):
        monkeypatch.setenv("PROMPTNOISE_SEED", "42")
        assert rng.global_seed(0) == 42
        monkeypatch.delenv("PROMPTNOISE_SEED")
        assert rng.global_seed(7) == 7

    def test_derive_int_range(self):
        v = rng.derive_int(0, "t", 1, 2)
        assert 0 <= v < 2**63 and v == rng.derive_int(0, "t", 1, 2)


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            RunConfig({"pae": {"nope": 1}})
        with pytest.raises(ConfigError):
            RunConfig({"bogus": {}})

    def test_fingerprint_order_and_value(self, tmp_path):
        a = tmp_path / "a.toml"
        b = tmp_path / "b.toml"
        a.write_text("seed = 1\n[pae]\nlr = 0.001\nbatch = 4\n")
        b.write_text("[pae]\nbatch = 4\nlr = 0.001\n\n[data]\n\n[cm]\n")
        b.write_text("seed = 1\n" + b.read_text())
        assert RunConfig.load(a).fingerprint == RunConfig.load(b).fingerprint
        assert RunConfig.load(a).override({"pae.batch": 5}).fingerprint != RunConfig.load(a).fingerprint

    def test_roundtrip(self, tmp_path):
        c = RunConfig({"seed": 3}).override({"pae.channels": "8,8,16,16", "cm.floored_curriculum": "true"})
        assert c["pae"]["channels"] == [8, 8, 16, 16] and c["cm"]["floored_curriculum"] is True
        c.save(tmp_path / "c.toml")
        assert RunConfig.load(tmp_path / "c.toml") == c

    def test_bad_values(self, tmp_path):
        with pytest.raises(ConfigError):
            RunConfig().override({"pae.batch": "many"})
        with pytest.raises(ConfigError):
            RunConfig().override({"pae.batch": 2.5})
        (tmp_path / "bad.toml").write_text("[pae\n")
        with pytest.raises(ConfigError):
            RunConfig.load(tmp_path / "bad.toml")
        with pytest.raises(ConfigError):
            RunConfig(preset="huge")

    def test_preset(self):
        assert RunConfig(preset="paper")["pdit"]["hidden_dim"] == 384


class TestCheckpoint:
    def _ck(self):
        tensors = {"a.w": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1, 2], dtype=np.int64)}
        return ckpt_io.Checkpoint("pae", tensors, RunConfig({"seed": 9}), 12, {"note": "x"})

    def test_roundtrip(self, tmp_path):
        ck = self._ck()
        ckpt_io.save(ck, tmp_path)
        back = ckpt_io.load(tmp_path, kind="pae", expect_fingerprint=ck.fingerprint)
        assert back.iteration == 12 and back.extra == {"note": "x"} and back.config == ck.config
        for k in ck.tensors:
            assert np.array_equal(back.tensors[k], ck.tensors[k]) and back.tensors[k].dtype == ck.tensors[k].dtype

    def test_numpy_only_readable(self, tmp_path):
        ckpt_io.save(self._ck(), tmp_path)
        man = json.loads((tmp_path / "manifest.json").read_text())
        raw = (tmp_path / "params.bin").read_bytes()
        e = next(t for t in man["tensors"] if t["name"] == "a.w")
        arr = np.frombuffer(raw[e["offset"] : e["offset"] + e["nbytes"]], dtype="<f4").reshape(e["shape"])
        assert arr[1, 2] == 5

    def test_rejections(self, tmp_path):
        ck = self._ck()
        ckpt_io.save(ck, tmp_path)
        with pytest.raises(ConfigError):
            ckpt_io.load(tmp_path, kind="pdit")
        with pytest.raises(ConfigError):
            ckpt_io.load(tmp_path, expect_fingerprint="0" * 64)
        assert ckpt_io.load(tmp_path, expect_fingerprint="0" * 64, allow_mismatch=True).iteration == 12
        man = json.loads((tmp_path / "manifest.json").read_text())
        man["format_version"] = 99
        (tmp_path / "manifest.json").write_text(json.dumps(man))
        with pytest.raises(ConfigError):
            ckpt_io.load(tmp_path)
        with pytest.raises(ConfigError):
            ckpt_io.load(tmp_path / "missing")


class TestDataset:
    def test_empty(self, tmp_path):
        (tmp_path / "clean").mkdir()
        (tmp_path / "noisy").mkdir()
        with pytest.raises(ConfigError):
            load_paired_dataset(tmp_path)
        with pytest.raises(ConfigError):
            load_paired_dataset(tmp_path / "nowhere")

    def test_pairs_sorted(self, tmp_path):
        make_toy_dataset(5, 16, "gaussian:sigma=0.02", 0, tmp_path)
        a = load_paired_dataset(tmp_path)
        assert len(a) == 5 and a.names() == sorted(a.names()) == load_paired_dataset(tmp_path).names()

    def test_shape_mismatch_named(self, tmp_path):
        make_toy_dataset(2, 16, "gaussian:sigma=0.02", 0, tmp_path)
        save_image(np.zeros((8, 16, 3)), tmp_path / "noisy" / "toy_00001.png")
        with pytest.raises(ContractError, match="toy_00001"):
            load_paired_dataset(tmp_path)

    def test_unmatched_and_unreadable(self, tmp_path):
        make_toy_dataset(2, 16, "gaussian:sigma=0.02", 0, tmp_path)
        save_image(np.zeros((16, 16, 3)), tmp_path / "clean" / "extra.png")
        with pytest.raises(ContractError, match="extra.png"):
            load_paired_dataset(tmp_path)
        (tmp_path / "noisy" / "extra.png").write_bytes(b"not a png")
        with pytest.raises(ContractError, match="extra.png"):
            load_paired_dataset(tmp_path)

    def test_patch_batches(self, tmp_path):
        make_toy_dataset(3, 24, "gaussian:sigma=0.02", 0, tmp_path)
        ds = load_paired_dataset(tmp_path, patch=16, seed=4)
        a = sample_patch_batch(ds, 5, 11)
        b = sample_patch_batch(ds, 5, 11)
        assert a[0].shape == a[1].shape == (5, 16, 16, 3)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
        with pytest.raises(ConfigError):
            sample_patch_batch(ds.with_patch(32), 2, 0)

    def test_crops_in_bounds_fuzz(self, tmp_path):
        make_toy_dataset(2, 20, "gaussian:sigma=0.02", 0, tmp_path)
        ds = load_paired_dataset(tmp_path, patch=7, seed=1)
        for k in range(10_000):
            _, _, origins = sample_patch_batch(ds, 1, k, return_origins=True)
            i, y, x = origins[0]
            assert 0 <= y <= 13 and 0 <= x <= 13

    @settings(max_examples=8, deadline=None)
    @given(k=st.integers(0, 7))
    def test_dihedral_is_group_action(self, k):
        img = np.arange(4 * 4 * 3).reshape(4, 4, 3)
        out = dihedral(img, k)
        assert sorted(out.ravel()) == sorted(img.ravel())
        assert sum(np.array_equal(out, dihedral(img, j)) for j in range(8)) == 1


class TestToy:
    def test_gaussian_std(self, tmp_path):
        make_toy_dataset(6, 64, "gaussian:sigma=0.05", 0, tmp_path)
        ds = load_paired_dataset(tmp_path)
        # measure on pixels away from the clipping range and before 8-bit rounding dominates
        res = np.concatenate([(n - c).ravel() for c, n in (ds.pair(i) for i in range(len(ds)))])
        q = 1 / 255 / np.sqrt(12)  # uniform quantization adds this std in quadrature
        assert abs(np.sqrt(res.var() - q * q) - 0.05) <= 0.05 * 0.02

    def test_heteroscedastic_regression(self, tmp_path):
        make_toy_dataset(8, 64, "heteroscedastic:a=0.01,b=0.0004", 0, tmp_path)
        ds = load_paired_dataset(tmp_path)
        xs, vs = [], []
        for i in range(len(ds)):
            c, n = ds.pair(i)
            xs.append(c.ravel())
            vs.append(((n - c) ** 2).ravel())
        x, v = np.concatenate(xs), np.concatenate(vs)
        a, b = np.polyfit(x, v, 1)
        assert abs(a - 0.01) <= 0.001

    def test_same_seed_identical(self, tmp_path):
        make_toy_dataset(2, 16, "correlated:a=0.01,b=0.0004,kernel=5", 3, tmp_path / "a")
        make_toy_dataset(2, 16, "correlated:a=0.01,b=0.0004,kernel=5", 3, tmp_path / "b")
        for sub in ("clean", "noisy"):
            for p in (tmp_path / "a" / sub).iterdir():
                assert p.read_bytes() == (tmp_path / "b" / sub / p.name).read_bytes()
        meta = read_toy_metadata(tmp_path / "a")
        assert meta["model"] == {"kind": "correlated", "a": 0.01, "b": 0.0004, "kernel": 5.0, "width": 1.0}

    @pytest.mark.parametrize(
        "spec", ["gaussian:sigma=-1", "heteroscedastic:a=0.1", "poisson:lam=1", "gaussian:sigma=x",
                 "correlated:a=0.1,b=0.1,kernel=4", "gaussian:sigma=0.1,extra=2"]
    )
    def test_invalid_models(self, spec):
        with pytest.raises(ConfigError):
            NoiseModel.parse(spec)

    def test_correlated_kernel_unit_norm(self):
        m = NoiseModel.parse("correlated:a=0,b=0.01,kernel=5,width=1.5")
        assert np.sum(m.kernel() ** 2) == pytest.approx(1.0)
        noise = m.sample(np.full((64, 64, 3), 0.5), rng.generator(0, "c"))
        assert noise.std() == pytest.approx(0.1, rel=0.1)
        # neighbours are correlated
        assert np.corrcoef(noise[:, :-1, 0].ravel(), noise[:, 1:, 0].ravel())[0, 1] > 0.3
