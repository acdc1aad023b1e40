"""BSA attention/block semantics, model shapes, parameter count, checkpoints."""

import numpy as np
import pytest

from ecdbs import tensor as T
from ecdbs.graph import build_similarity, normalize_adjacency, spectral_cluster
from ecdbs.hsi import BadMagicError, FormatError, difference_image
from ecdbs.network import (
    BsaBlock,
    EcdbsModel,
    bsa_attention,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)
from ecdbs.tensor import constant, parameter
from ecdbs.training import synth_generate

from helpers import max_gradient_error


def _affines(groups, gamma=1.0, beta=0.0, dtype=np.float64):
    gammas = [parameter(np.asarray(gamma), dtype=dtype) for _ in range(groups)]
    betas = [parameter(np.asarray(beta), dtype=dtype) for _ in range(groups)]
    return gammas, betas


def _sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def _bsa_oracle(x, gammas, betas, groups, eps=1e-5):
    """Direct per-position evaluation of the attention definition."""
    c, h, w = x.shape
    e = c // groups
    m = h * w
    out = np.zeros_like(x)
    for gi in range(groups):
        block = x[gi * e : (gi + 1) * e].reshape(e, m)
        g = block.mean(axis=1)  # pooled group vector
        coeff = np.array([float(g @ block[:, j]) for j in range(m)])
        mu = coeff.mean()
        sigma = np.sqrt(((coeff - mu) ** 2).mean())
        a = (coeff - mu) / (sigma + eps) * gammas[gi] + betas[gi]
        gated = block * _sigmoid(a)[None, :]
        out[gi * e : (gi + 1) * e] = gated.reshape(e, h, w)
    return out


class TestBsaAttention:
    def test_spatially_constant_group_scales_uniformly(self):
        rng = np.random.default_rng(0)
        vec = rng.normal(size=3)
        x = np.tile(vec[:, None, None], (1, 5, 5))
        gammas, betas = _affines(1, beta=0.4)
        out = bsa_attention(constant(x, dtype=np.float64), gammas, betas, 1)
        assert np.allclose(out.data, x * _sigmoid(0.4))

    def test_group_independence(self):
        rng = np.random.default_rng(1)
        base = rng.normal(size=(6, 5, 5))
        gammas, betas = _affines(2, gamma=1.3, beta=-0.2)
        out0 = bsa_attention(constant(base, dtype=np.float64), gammas, betas, 2).data
        bumped = base.copy()
        bumped[3:] = 0.0  # zero group 1's input
        out1 = bsa_attention(constant(bumped, dtype=np.float64), gammas, betas, 2).data
        assert np.allclose(out0[:3], out1[:3])

    def test_matches_per_position_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(6, 5, 5))
        gammas, betas = _affines(2, gamma=0.8, beta=0.3)
        out = bsa_attention(constant(x, dtype=np.float64), gammas, betas, 2)
        expected = _bsa_oracle(x, [0.8, 0.8], [0.3, 0.3], 2)
        assert np.abs(out.data - expected).max() < 1e-6

    def test_gradient_check(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            x = parameter(rng.normal(size=(6, 4, 4)), dtype=np.float64)
            gammas, betas = _affines(3, gamma=rng.normal(), beta=rng.normal())
            coeff = constant(rng.normal(size=(6, 4, 4)), dtype=np.float64)

            def build():
                return T.sum_all(T.mul(bsa_attention(x, gammas, betas, 3), coeff))

            assert max_gradient_error(build, [x] + gammas + betas) < 1e-4


class TestBsaBlock:
    def test_zeroed_block_is_pure_skip(self):
        rng = np.random.default_rng(4)
        block = BsaBlock(6, 2, rng, np.float64)
        block.kernel.data[:] = 0.0
        x = constant(rng.normal(size=(6, 5, 5)), dtype=np.float64)
        out = block.forward(x)
        # conv output 0, relu 0, attention gates 0 by sigmoid(beta=0): skip only
        assert np.allclose(out.data, x.data)

    @pytest.mark.parametrize("size", [3, 5, 7])
    def test_shape_preserved(self, size):
        rng = np.random.default_rng(5)
        block = BsaBlock(4, 2, rng, np.float64)
        x = constant(rng.normal(size=(4, size, size)), dtype=np.float64)
        assert block.forward(x).shape == (4, size, size)

    def test_gradient_check(self):
        rng = np.random.default_rng(6)
        block = BsaBlock(4, 2, rng, np.float64)
        x = parameter(rng.normal(size=(4, 4, 4)), dtype=np.float64)
        coeff = constant(rng.normal(size=(4, 4, 4)), dtype=np.float64)
        leaves = [x, block.kernel, block.bias] + block.gammas + block.betas

        def build():
            return T.sum_all(T.mul(block.forward(x), coeff))

        assert max_gradient_error(build, leaves) < 1e-4


def _toy_model(bands=16, clusters=4, seed=0, dtype=np.float32, **kwargs):
    t1, t2, _, _ = synth_generate(seed, bands=bands, height=16, width=16)
    diff = difference_image(t1, t2)
    sim = build_similarity(diff, k=5)
    assignment = spectral_cluster(sim, clusters, seed=seed)
    return EcdbsModel(
        bands,
        clusters,
        normalize_adjacency(sim),
        assignment.values,
        seed=seed,
        dtype=dtype,
        **kwargs,
    )


class TestModelForward:
    def test_probabilities_sum_to_one(self):
        model = _toy_model()
        rng = np.random.default_rng(7)
        for _ in range(10):
            probs, _ = model.forward(rng.normal(size=(16, 5, 5)).astype(np.float32), tau=0.7)
            assert abs(probs.data.sum() - 1.0) < 1e-6
            assert (probs.data >= 0).all()

    def test_tap_shapes_for_river_like_config(self):
        model = _toy_model(bands=36, clusters=12)
        rng = np.random.default_rng(8)
        probs, taps = model.forward(rng.normal(size=(36, 5, 5)).astype(np.float32), tau=0.5)
        assert taps["block1"].shape == (36, 5, 5)
        assert taps["block2"].shape == (36, 3, 3)
        assert taps["final"].shape == (36, 1, 1)
        assert taps["fused"].shape == (108,)

    def test_forward_is_pure(self):
        model = _toy_model()
        patch = np.random.default_rng(9).normal(size=(16, 5, 5)).astype(np.float32)
        a, _ = model.forward(patch, tau=0.3)
        b, _ = model.forward(patch, tau=0.3)
        assert np.array_equal(a.data, b.data)

    def test_patch_size_below_five_rejected(self):
        with pytest.raises(ValueError, match="patch size"):
            _toy_model(patch_size=3)

    def test_hardened_inference_deterministic(self):
        model = _toy_model()
        patch = np.random.default_rng(10).normal(size=(16, 5, 5)).astype(np.float32)
        assert np.array_equal(model.infer(patch), model.infer(patch))


class TestParameterCount:
    def test_classifier_only_arithmetic(self):
        rng = np.random.default_rng(11)
        tensors = [
            parameter(rng.normal(size=(10, 4))),
            parameter(np.zeros(4)),
            parameter(rng.normal(size=(4, 2))),
            parameter(np.zeros(2)),
        ]
        assert count_parameters(tensors) == 54

    def test_count_invariant_under_forward(self):
        model = _toy_model()
        before = model.count_parameters()
        model.forward(np.zeros((16, 5, 5), dtype=np.float32), tau=1.0)
        assert model.count_parameters() == before

    def test_river_config_budget(self):
        # 198 bands, 12 clusters, 3x expansion, 5x5 patches, hidden 64
        a_hat = np.eye(198)
        labels = np.arange(198) % 12
        from ecdbs.graph import assignment_matrix

        model = EcdbsModel(
            198, 12, a_hat, assignment_matrix(labels, 12).values, hidden=64, seed=0
        )
        count = model.count_parameters()
        assert 30_000 <= count <= 60_000


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = _toy_model(seed=3)
        model.band_weights = np.random.default_rng(12).uniform(size=16)
        path = tmp_path / "model.ecdb"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.bands == model.bands
        assert loaded.clusters == model.clusters
        assert np.allclose(loaded.a_hat, model.a_hat, atol=1e-6)
        assert np.array_equal(loaded.assignment, model.assignment)
        assert np.allclose(loaded.band_weights, model.band_weights, atol=1e-7)
        for name, tensor in model.parameters().items():
            assert np.array_equal(loaded.parameters()[name].data, tensor.data), name
        patch = np.random.default_rng(13).normal(size=(16, 5, 5)).astype(np.float32)
        assert np.array_equal(model.infer(patch), loaded.infer(patch))

    def test_corrupted_magic(self, tmp_path):
        model = _toy_model()
        path = tmp_path / "model.ecdb"
        save_checkpoint(model, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            load_checkpoint(path)

    def test_truncated_checkpoint(self, tmp_path):
        model = _toy_model()
        path = tmp_path / "model.ecdb"
        save_checkpoint(model, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(FormatError):
            load_checkpoint(path)
