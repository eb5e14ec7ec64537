"""Autoencoder tests: layer oracles, finite-difference gradient checks,
training behavior, and the binary weight/embedding formats."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdl1wsi import cae
from pdl1wsi.cae import (
    REDUCED_ARCH,
    CaeArchitecture,
    TrainingDivergedError,
    _bn_forward,
    _conv_backward,
    _conv_forward,
    _im2col,
    _pool_backward,
    _pool_forward,
    _sigmoid,
    _upsample,
    _upsample_backward,
    cae_forward,
    cae_init,
    cae_train,
    encode_all,
    gradient_check,
    load_weights,
    read_embeddings,
    save_weights,
    write_embeddings,
)


def oracle_conv(x, w, b=None):
    """Direct sum over every kernel tap; zero padding outside the image."""
    bsz, h, wd, cin = x.shape
    k, _, _, cout = w.shape
    p = k // 2
    out = np.zeros((bsz, h, wd, cout), dtype=np.float64)
    for bi in range(bsz):
        for y in range(h):
            for xx in range(wd):
                for o in range(cout):
                    acc = 0.0
                    for i in range(k):
                        for j in range(k):
                            yy, xj = y + i - p, xx + j - p
                            if 0 <= yy < h and 0 <= xj < wd:
                                for c in range(cin):
                                    acc += x[bi, yy, xj, c] * w[i, j, c, o]
                    out[bi, y, xx, o] = acc + (0.0 if b is None else b[o])
    return out


def oracle_pool(x):
    bsz, h, wd, c = x.shape
    out = np.zeros((bsz, h // 2, wd // 2, c), dtype=x.dtype)
    for bi in range(bsz):
        for y in range(h // 2):
            for xx in range(wd // 2):
                for ch in range(c):
                    out[bi, y, xx, ch] = x[bi, 2 * y:2 * y + 2, 2 * xx:2 * xx + 2, ch].max()
    return out


class TestArchitecture:
    def test_defaults(self):
        arch = CaeArchitecture()
        assert arch.bottleneck_size == 8
        assert arch.flat_dim == 4096
        assert arch.embedding_dim == 32

    def test_reduced(self):
        assert REDUCED_ARCH.bottleneck_size == 1
        assert REDUCED_ARCH.flat_dim == 4

    @pytest.mark.parametrize("kwargs", [
        {"input_size": 12},
        {"input_size": 0},
        {"kernel_sizes": (4, 3, 3)},
        {"kernel_sizes": (3, 3)},
        {"channels": (16, 32)},
        {"channels": (0, 32, 64)},
        {"fc_hidden": 0},
        {"embedding_dim": 0},
    ])
    def test_rejects_bad_config(self, kwargs):
        with pytest.raises(ValueError):
            CaeArchitecture(**kwargs)


class TestInit:
    def test_deterministic(self):
        a = cae_init(11, arch=REDUCED_ARCH)
        b = cae_init(11, arch=REDUCED_ARCH)
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k])
        c = cae_init(12, arch=REDUCED_ARCH)
        assert not np.array_equal(a.params["enc_c1_w"], c.params["enc_c1_w"])

    def test_shapes_and_dtypes(self):
        w = cae_init(0)
        assert w.params["enc_c1_w"].shape == (5, 5, 3, 16)
        assert w.params["enc_f1_w"].shape == (4096, 256)
        assert w.params["enc_f2_w"].shape == (256, 32)
        assert w.params["dec_d3_w"].shape == (5, 5, 16, 3)
        assert all(v.dtype == np.float32 for v in w.params.values())

    def test_bn_init_is_identity_scale(self):
        w = cae_init(0, arch=REDUCED_ARCH)
        assert np.all(w.params["enc_bn1_g"] == 1.0)
        assert np.all(w.params["enc_bn1_b"] == 0.0)
        assert np.all(w.running["enc_bn1_mean"] == 0.0)
        assert np.all(w.running["enc_bn1_var"] == 1.0)

    def test_fan_in_scaling(self):
        w = cae_init(0)
        got = w.params["enc_c1_w"].std()
        expect = np.sqrt(2.0 / (5 * 5 * 3))
        assert abs(got - expect) / expect < 0.15


class TestConv:
    @settings(max_examples=25, deadline=None)
    @given(
        seed=st.integers(0, 10_000),
        k=st.sampled_from([1, 3, 5]),
        cin=st.integers(1, 4),
        cout=st.integers(1, 4),
        h=st.integers(2, 6),
        wd=st.integers(2, 6),
    )
    def test_matches_oracle(self, seed, k, cin, cout, h, wd):
        # both internal routes are exercised: cin <= cout and cin > cout
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1, 1, (2, h, wd, cin))
        w = rng.uniform(-1, 1, (k, k, cin, cout))
        b = rng.uniform(-1, 1, cout)
        got = _conv_forward(x, w, b)
        assert np.allclose(got, oracle_conv(x, w, b), atol=1e-10)

    @settings(max_examples=15, deadline=None)
    @given(
        seed=st.integers(0, 10_000),
        k=st.sampled_from([1, 3, 5]),
        cin=st.integers(1, 4),
        cout=st.integers(1, 4),
    )
    def test_dx_is_adjoint_of_forward(self, seed, k, cin, cout):
        # <conv(x), y> == <x, dx(y)> pins the backward input gradient
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1, 1, (2, 5, 4, cin))
        w = rng.uniform(-1, 1, (k, k, cin, cout))
        y = rng.uniform(-1, 1, (2, 5, 4, cout))
        fwd = _conv_forward(x, w, None)
        dx, _, _ = _conv_backward(x, w, y)
        assert np.isclose(np.sum(fwd * y), np.sum(x * dx), atol=1e-10)

    def test_dw_matches_finite_difference(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(-1, 1, (2, 4, 4, 3))
        w = rng.uniform(-1, 1, (3, 3, 3, 2))
        proj = rng.uniform(-1, 1, (2, 4, 4, 2))
        _, dw, db = _conv_backward(x, w, proj)
        # loss = sum(conv * proj); central differences per weight
        h = 1e-6
        for idx in [(0, 0, 0, 0), (1, 2, 1, 1), (2, 2, 2, 0)]:
            w[idx] += h
            lp = np.sum(_conv_forward(x, w, None) * proj)
            w[idx] -= 2 * h
            lm = np.sum(_conv_forward(x, w, None) * proj)
            w[idx] += h
            assert np.isclose(dw[idx], (lp - lm) / (2 * h), atol=1e-6)
        assert np.allclose(db, proj.reshape(-1, 2).sum(axis=0))

    def test_im2col_center_window(self):
        x = np.arange(2 * 3 * 3 * 1, dtype=np.float64).reshape(2, 3, 3, 1)
        cols = _im2col(x, 3).reshape(2, 3, 3, 9)
        # center pixel of image 0 sees the whole 3x3 patch in scan order
        assert np.array_equal(cols[0, 1, 1], x[0, :, :, 0].reshape(-1))
        # corner windows are zero padded
        assert cols[0, 0, 0, 0] == 0.0


class TestPoolUpsample:
    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000), h=st.sampled_from([2, 4, 6]), c=st.integers(1, 3))
    def test_pool_matches_oracle(self, seed, h, c):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1, 1, (2, h, h, c))
        got, _ = _pool_forward(x)
        assert np.array_equal(got, oracle_pool(x))

    def test_pool_backward_routes_to_argmax(self):
        x = np.zeros((1, 2, 2, 1))
        x[0, 1, 0, 0] = 5.0
        out, idx = _pool_forward(x)
        assert out[0, 0, 0, 0] == 5.0
        dout = np.ones((1, 1, 1, 1))
        dx = _pool_backward(dout, idx, x.shape, np.float64)
        expect = np.zeros_like(x)
        expect[0, 1, 0, 0] = 1.0
        assert np.array_equal(dx, expect)

    def test_upsample_nearest(self):
        x = np.array([[[[1.0], [2.0]], [[3.0], [4.0]]]])
        up = _upsample(x)
        assert up.shape == (1, 4, 4, 1)
        assert np.array_equal(up[0, :2, :2, 0], np.ones((2, 2)))
        assert np.array_equal(up[0, 2:, 2:, 0], 4 * np.ones((2, 2)))

    def test_upsample_adjoint(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, (2, 3, 3, 2))
        y = rng.uniform(-1, 1, (2, 6, 6, 2))
        assert np.isclose(
            np.sum(_upsample(x) * y), np.sum(x * _upsample_backward(y)), atol=1e-12
        )


class TestBatchNorm:
    def test_train_mode_formula(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-2, 2, (4, 3, 3, 2))
        gamma = np.array([1.5, 0.5])
        beta = np.array([0.1, -0.2])
        rm, rv = np.zeros(2), np.ones(2)
        out, _ = _bn_forward(x, gamma, beta, rm, rv, training=True, update_running=False)
        mu = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
        expect = gamma * (x - mu) / np.sqrt(var + cae.BN_EPS) + beta
        assert np.allclose(out, expect, atol=1e-12)
        assert np.all(rm == 0.0) and np.all(rv == 1.0)

    def test_running_stat_update(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(-2, 2, (4, 3, 3, 2))
        rm, rv = np.full(2, 0.3), np.full(2, 2.0)
        _bn_forward(x, np.ones(2), np.zeros(2), rm, rv, training=True, update_running=True)
        mu = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
        assert np.allclose(rm, 0.9 * 0.3 + 0.1 * mu)
        assert np.allclose(rv, 0.9 * 2.0 + 0.1 * var)

    def test_inference_uses_running_stats(self):
        x = np.ones((1, 2, 2, 1)) * 3.0
        rm, rv = np.array([1.0]), np.array([4.0])
        out, _ = _bn_forward(x, np.ones(1), np.zeros(1), rm, rv, False, False)
        assert np.allclose(out, (3.0 - 1.0) / np.sqrt(4.0 + cae.BN_EPS))


class TestSigmoid:
    def test_extreme_inputs_stay_finite(self):
        # naive 1/(1+exp(-x)) overflows at x = -600; the stable split must not
        with np.errstate(over="raise", invalid="raise"):
            out = _sigmoid(np.array([-600.0, -30.0, 0.0, 30.0, 600.0]))
        assert out[0] < 1e-250
        assert out[-1] == 1.0
        assert out[2] == 0.5
        assert np.all(np.isfinite(out))

    def test_matches_reference_midrange(self):
        x = np.linspace(-8, 8, 101)
        assert np.allclose(_sigmoid(x), 1.0 / (1.0 + np.exp(-x)), atol=1e-15)


class TestGradientCheck:
    def test_reduced_net_under_1e3(self):
        assert gradient_check(seed=0) < 1e-3

    def test_linear_variant_machine_precision(self):
        assert gradient_check(seed=0, linear=True) < 1e-6

    def test_zero_input_zero_weights_bias_grads(self):
        w = cae_init(0, arch=REDUCED_ARCH, dtype=np.float64)
        for k in w.params:
            w.params[k][...] = 0.0
        x = np.zeros((1, 8, 8, 3))
        assert gradient_check(weights=w, batch=x) < 1e-6
        # with everything zero the only live gradient is the output bias:
        # recon = sigmoid(b) = 0.5, d loss / d b_o = (1/3) * 2 * 0.5 * 0.25
        recon, _, cache = cae._forward(w, x, training=True)
        grads = cae._backward(w, cache, x)
        assert np.allclose(grads["dec_d3_b"], 1.0 / 12.0, atol=1e-12)
        for name, g in grads.items():
            if name != "dec_d3_b":
                assert np.allclose(g, 0.0, atol=1e-12), name


class TestTraining:
    def test_constant_tile_converges_to_zero(self):
        tile = np.full((1, 8, 8, 3), 0.4, dtype=np.float32)
        _, losses = cae_train(tile, epochs=400, lr=0.01, seed=1, arch=REDUCED_ARCH)
        assert losses[-1] < 1e-6
        assert losses[-1] <= losses[0]

    def test_loss_decreases_on_random_tiles(self):
        rng = np.random.default_rng(3)
        tiles = rng.integers(0, 256, size=(24, 8, 8, 3), dtype=np.uint8)
        _, losses = cae_train(tiles, epochs=30, lr=0.01, seed=4, arch=REDUCED_ARCH)
        assert len(losses) == 30
        assert all(np.isfinite(l) for l in losses)
        assert losses[-1] < losses[0]

    def test_bit_identical_across_runs(self):
        rng = np.random.default_rng(5)
        tiles = rng.integers(0, 256, size=(10, 8, 8, 3), dtype=np.uint8)
        w1, l1 = cae_train(tiles, epochs=3, seed=9, arch=REDUCED_ARCH)
        w2, l2 = cae_train(tiles, epochs=3, seed=9, arch=REDUCED_ARCH)
        assert l1 == l2
        for k in w1.params:
            assert np.array_equal(w1.params[k], w2.params[k]), k
        for k in w1.running:
            assert np.array_equal(w1.running[k], w2.running[k]), k

    def test_seed_changes_outcome(self):
        rng = np.random.default_rng(5)
        tiles = rng.integers(0, 256, size=(10, 8, 8, 3), dtype=np.uint8)
        w1, _ = cae_train(tiles, epochs=2, seed=9, arch=REDUCED_ARCH)
        w2, _ = cae_train(tiles, epochs=2, seed=10, arch=REDUCED_ARCH)
        assert not np.array_equal(w1.params["enc_c1_w"], w2.params["enc_c1_w"])

    def test_non_finite_loss_aborts_with_context(self):
        w = cae_init(0, arch=REDUCED_ARCH)
        w.params["enc_c1_w"][0, 0, 0, 0] = np.nan
        tiles = np.zeros((2, 8, 8, 3), dtype=np.uint8)
        with pytest.raises(TrainingDivergedError, match="epoch 1"):
            cae_train(tiles, epochs=1, weights=w)

    def test_empty_tile_set_rejected(self):
        with pytest.raises(ValueError, match="no tiles"):
            cae_train(np.zeros((0, 8, 8, 3), dtype=np.uint8), arch=REDUCED_ARCH)

    def test_bad_hyperparams_rejected(self):
        tiles = np.zeros((2, 8, 8, 3), dtype=np.uint8)
        with pytest.raises(ValueError):
            cae_train(tiles, epochs=0, arch=REDUCED_ARCH)
        with pytest.raises(ValueError):
            cae_train(tiles, batch_size=0, arch=REDUCED_ARCH)

    def test_log_callback_sees_every_epoch(self):
        tiles = np.zeros((2, 8, 8, 3), dtype=np.uint8)
        lines = []
        cae_train(tiles, epochs=3, arch=REDUCED_ARCH, log=lines.append)
        assert len(lines) == 3
        assert "epoch 1/3" in lines[0]


@pytest.fixture(scope="module")
def small_weights():
    rng = np.random.default_rng(6)
    tiles = rng.integers(0, 256, size=(12, 8, 8, 3), dtype=np.uint8)
    w, _ = cae_train(tiles, epochs=2, seed=7, arch=REDUCED_ARCH)
    return w


@pytest.fixture(scope="module")
def trained():
    rng = np.random.default_rng(10)
    tiles = rng.integers(0, 256, size=(9, 8, 8, 3), dtype=np.uint8)
    w, _ = cae_train(tiles, epochs=2, seed=11, arch=REDUCED_ARCH)
    return w, tiles


class TestForwardApi:
    def test_shape_validation(self, small_weights):
        with pytest.raises(ValueError, match="expected tiles"):
            cae_forward(small_weights, np.zeros((2, 8, 8, 4), dtype=np.uint8))
        with pytest.raises(ValueError, match="expected tiles"):
            cae_forward(small_weights, np.zeros((2, 16, 16, 3), dtype=np.uint8))

    def test_float_range_validation(self, small_weights):
        with pytest.raises(ValueError, match="0, 1"):
            cae_forward(small_weights, np.full((1, 8, 8, 3), 2.0))

    def test_empty_batch(self, small_weights):
        with pytest.raises(ValueError, match="empty"):
            cae_forward(small_weights, np.zeros((0, 8, 8, 3), dtype=np.uint8))

    def test_uint8_and_scaled_float_agree(self, small_weights):
        rng = np.random.default_rng(8)
        tiles = rng.integers(0, 256, size=(3, 8, 8, 3), dtype=np.uint8)
        r1, e1 = cae_forward(small_weights, tiles)
        r2, e2 = cae_forward(small_weights, tiles.astype(np.float32) / np.float32(255.0))
        assert np.array_equal(e1, e2)
        assert np.array_equal(r1, r2)

    def test_reconstruction_in_unit_range(self, small_weights):
        rng = np.random.default_rng(9)
        tiles = rng.integers(0, 256, size=(2, 8, 8, 3), dtype=np.uint8)
        recon, _ = cae_forward(small_weights, tiles)
        assert recon.min() >= 0.0 and recon.max() <= 1.0

    def test_inference_does_not_touch_running_stats(self, small_weights):
        before = {k: v.copy() for k, v in small_weights.running.items()}
        cae_forward(small_weights, np.zeros((2, 8, 8, 3), dtype=np.uint8))
        for k, v in small_weights.running.items():
            assert np.array_equal(v, before[k])


class TestEncodeAll:
    def test_one_embedding_per_tile(self, trained):
        w, tiles = trained
        emb = encode_all(w, tiles)
        assert emb.shape == (9, REDUCED_ARCH.embedding_dim)
        assert emb.dtype == np.float64

    def test_deterministic(self, trained):
        w, tiles = trained
        assert np.array_equal(encode_all(w, tiles), encode_all(w, tiles))

    def test_permutation_permutes_output(self, trained):
        w, tiles = trained
        perm = np.array([3, 1, 4, 0, 2, 8, 6, 7, 5])
        assert np.array_equal(encode_all(w, tiles[perm]), encode_all(w, tiles)[perm])

    def test_duplicate_tiles_duplicate_embeddings(self, trained):
        w, tiles = trained
        emb = encode_all(w, tiles[np.array([0, 0, 3, 3])])
        assert np.array_equal(emb[0], emb[1])
        assert np.array_equal(emb[2], emb[3])

    def test_batch_boundaries_do_not_matter(self, trained):
        # running-stat normalization makes each tile independent; float32
        # GEMM shapes still differ across batchings, hence the tolerance
        w, tiles = trained
        a = encode_all(w, tiles, batch_size=2)
        b = encode_all(w, tiles, batch_size=64)
        assert np.allclose(a, b, atol=1e-6)

    def test_empty_roi_rejected(self, trained):
        w, _ = trained
        with pytest.raises(ValueError, match="empty region"):
            encode_all(w, np.zeros((0, 8, 8, 3), dtype=np.uint8))

    def test_default_arch_width_is_32(self):
        w = cae_init(0)
        tiles = np.zeros((2, 64, 64, 3), dtype=np.uint8)
        assert encode_all(w, tiles).shape == (2, 32)


class TestWeightIo:
    @pytest.fixture()
    def weights(self):
        rng = np.random.default_rng(12)
        tiles = rng.integers(0, 256, size=(6, 8, 8, 3), dtype=np.uint8)
        w, _ = cae_train(tiles, epochs=2, seed=13, arch=REDUCED_ARCH)
        return w

    def test_roundtrip_bit_identical(self, weights, tmp_path):
        path = tmp_path / "w.bin"
        save_weights(weights, path)
        back = load_weights(path)
        assert back.arch == weights.arch
        assert back.seed == weights.seed
        for k in weights.params:
            assert np.array_equal(back.params[k], weights.params[k]), k
        for k in weights.running:
            assert np.array_equal(back.running[k], weights.running[k]), k

    def test_roundtrip_preserves_behavior(self, weights, tmp_path):
        path = tmp_path / "w.bin"
        save_weights(weights, path)
        back = load_weights(path)
        tiles = np.full((2, 8, 8, 3), 70, dtype=np.uint8)
        assert np.array_equal(encode_all(back, tiles), encode_all(weights, tiles))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTHING HERE")
        with pytest.raises(ValueError, match="bad magic"):
            load_weights(path)

    def test_unsupported_version(self, weights, tmp_path):
        path = tmp_path / "w.bin"
        save_weights(weights, path)
        raw = bytearray(path.read_bytes())
        raw[8:12] = struct.pack("<I", 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="version 99"):
            load_weights(path)

    def test_truncated_file(self, weights, tmp_path):
        path = tmp_path / "w.bin"
        save_weights(weights, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 10])
        with pytest.raises(ValueError, match="truncated"):
            load_weights(path)


class TestEmbeddingIo:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(14)
        emb = rng.normal(size=(7, 32))
        path = tmp_path / "e.bin"
        write_embeddings(path, "internal_003", emb)
        sid, back = read_embeddings(path)
        assert sid == "internal_003"
        # storage is float32, so the roundtrip equals the f4 quantization
        assert np.array_equal(back, emb.astype("<f4").astype(np.float64))

    def test_empty_rows_roundtrip(self, tmp_path):
        path = tmp_path / "e.bin"
        write_embeddings(path, "s", np.zeros((0, 32)))
        sid, back = read_embeddings(path)
        assert sid == "s" and back.shape == (0, 32)

    def test_rejects_non_2d(self, tmp_path):
        with pytest.raises(ValueError, match="2-d"):
            write_embeddings(tmp_path / "e.bin", "s", np.zeros(5))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "e.bin"
        path.write_bytes(b"\x00" * 40)
        with pytest.raises(ValueError, match="bad magic"):
            read_embeddings(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "e.bin"
        write_embeddings(path, "s", np.ones((4, 8)))
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 6])
        with pytest.raises(ValueError, match="truncated"):
            read_embeddings(path)
