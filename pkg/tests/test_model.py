import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labs import tensor as T
from labs.data import KIND_FORMULA, KIND_PAD, KIND_WORD, Batch
from labs.model import (
    LABSModel,
    ModelConfig,
    ModelError,
    Variant,
    confusion_distribution,
    encode,
    label_attention,
    loss_bce,
    loss_kl,
    pool,
    predict,
    simulate_labels,
)
from labs.nn import LSTMWeights
from labs.tensor import Tensor


def param(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def toy_batch(ids, n_labels, targets=None, formula_at=()):
    """Batch from (B, n) ids; id 0 is PAD, positions in ``formula_at`` are formulas."""
    ids = np.asarray(ids, dtype=np.int64)
    kinds = np.where(ids == 0, KIND_PAD, KIND_WORD).astype(np.int8)
    rows, slots = [], []
    for b, t in formula_at:
        kinds[b, t] = KIND_FORMULA
        rows += [(7 * b + t) % 5, (3 * t + 1) % 5]
        slots += [b * ids.shape[1] + t] * 2
    if targets is None:
        targets = np.zeros((ids.shape[0], n_labels))
        targets[np.arange(ids.shape[0]), np.arange(ids.shape[0]) % n_labels] = 1.0
    return Batch(
        ids=ids,
        kinds=kinds,
        mask=(kinds != KIND_PAD).astype(np.float64),
        formula_rows=np.asarray(rows, dtype=np.int64),
        formula_slots=np.asarray(slots, dtype=np.int64),
        targets=np.asarray(targets, dtype=np.float64),
    )


def toy_model(variant, hidden=8, labels=3, vocab=10, dim=5, seed=0):
    cfg = ModelConfig(
        variant=variant, vocab_size=vocab, n_labels=labels, embed_dim=dim, hidden_dim=hidden, formula_table_rows=5
    )
    return LABSModel.init(cfg, seed=seed)


def random_h(rng, b, n, k):
    return Tensor(rng.normal(size=(b, n, k)))


class TestEncode:
    def test_all_pad_gives_zero(self):
        rng = np.random.default_rng(0)
        fwd, bwd = LSTMWeights.init(4, 6, rng), LSTMWeights.init(4, 6, rng)
        x = Tensor(rng.normal(size=(1, 5, 4)))
        h_fwd, h_bwd = encode(x, np.zeros((1, 5)), fwd, bwd)
        assert not h_fwd.data.any() and not h_bwd.data.any()

    def test_palindrome_swaps_directions(self):
        rng = np.random.default_rng(1)
        w = LSTMWeights.init(4, 6, rng)
        seq = rng.normal(size=(3, 4))
        x = Tensor(np.concatenate([seq, seq[::-1][1:]])[None])  # length-5 palindrome
        h_fwd, h_bwd = encode(x, np.ones((1, 5)), w, w)
        np.testing.assert_allclose(h_fwd.data[0], h_bwd.data[0][::-1], atol=1e-14)

    def test_full_size_shape(self):
        rng = np.random.default_rng(2)
        fwd, bwd = LSTMWeights.init(3, 512, rng), LSTMWeights.init(3, 512, rng)
        h_fwd, h_bwd = encode(Tensor(rng.normal(size=(1, 120, 3))), np.ones((1, 120)), fwd, bwd)
        assert T.concat([h_fwd, h_bwd], axis=-1).shape == (1, 120, 1024)


class TestLabelAttention:
    def test_zero_matrix_gives_half(self):
        rng = np.random.default_rng(0)
        mask = np.array([[1, 1, 1, 0]], dtype=float)
        h = random_h(rng, 1, 4, 3) * Tensor(np.repeat(mask[:, :, None], 3, axis=2))
        _, a_fwd, a_bwd = label_attention(h, h, Tensor(np.zeros((5, 3))), mask)
        for a in (a_fwd, a_bwd):
            assert a.shape == (1, 5, 4)
            assert np.all(a.data[:, :, :3] == 0.5)
            assert np.all(a.data[:, :, 3] == 0.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_range_and_mask(self, seed):
        rng = np.random.default_rng(seed)
        n = 6
        length = int(rng.integers(1, n + 1))
        mask = (np.arange(n) < length).astype(float)[None]
        c = Tensor(rng.normal(size=(4, 3)))
        m, a_fwd, a_bwd = label_attention(random_h(rng, 1, n, 3), random_h(rng, 1, n, 3), c, mask)
        assert m.shape == (1, 4, 6)
        for a in (a_fwd, a_bwd):
            assert np.all((a.data[..., :length] > 0) & (a.data[..., :length] < 1))
            assert np.all(a.data[..., length:] == 0.0)

    def test_m_is_weighted_sum(self):
        rng = np.random.default_rng(4)
        hf, hb = random_h(rng, 1, 3, 2), random_h(rng, 1, 3, 2)
        c = Tensor(rng.normal(size=(2, 2)))
        m, af, ab = label_attention(hf, hb, c, np.ones((1, 3)))
        sig = lambda z: 1 / (1 + np.exp(-z))  # noqa: E731
        expected_af = sig(c.data @ hf.data[0].T)
        np.testing.assert_allclose(af.data[0], expected_af, atol=1e-14)
        np.testing.assert_allclose(m.data[0, :, :2], expected_af @ hf.data[0], atol=1e-14)
        np.testing.assert_allclose(m.data[0, :, 2:], sig(c.data @ hb.data[0].T) @ hb.data[0], atol=1e-14)

    def test_missing_matrix(self):
        h = Tensor(np.zeros((1, 2, 2)))
        with pytest.raises(ModelError):
            label_attention(h, h, None, np.ones((1, 2)))


class TestPool:
    def test_single_label(self):
        m = Tensor(np.arange(6.0).reshape(1, 1, 6))
        np.testing.assert_array_equal(pool(m, "LAB").data, [[0, 1, 2, 3, 4, 5]])

    def test_all_ones(self):
        np.testing.assert_array_equal(pool(Tensor(np.ones((2, 4, 6))), "LABS").data, np.ones((2, 6)))

    def test_basic_one_unmasked_row(self):
        h = np.random.default_rng(0).normal(size=(1, 4, 6))
        out = pool(Tensor(h), "Basic", np.array([[0, 0, 1, 0]], dtype=float))
        np.testing.assert_array_equal(out.data[0], h[0, 2])

    def test_basic_masked_mean(self):
        h = np.random.default_rng(1).normal(size=(1, 4, 2))
        out = pool(Tensor(h), Variant.LBS, np.array([[1, 1, 1, 0]], dtype=float))
        np.testing.assert_allclose(out.data[0], h[0, :3].mean(axis=0), atol=1e-15)


class TestPredict:
    def test_zero_weights(self):
        _, y = predict(Tensor(np.ones((1, 6))), Tensor(np.zeros((4, 6))), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(y.data, np.full((1, 4), 0.5))

    def test_bias_moves_only_its_label(self):
        m = Tensor(np.random.default_rng(0).normal(size=(1, 6)))
        w = Tensor(np.random.default_rng(1).normal(size=(4, 6)))
        _, y0 = predict(m, w, Tensor(np.zeros(4)))
        _, y1 = predict(m, w, Tensor(np.array([0.0, 0.7, 0.0, 0.0])))
        assert y1.data[0, 1] > y0.data[0, 1]
        np.testing.assert_array_equal(np.delete(y1.data, 1), np.delete(y0.data, 1))


class TestConfusionAndSimulation:
    def test_zero_matrix_uniform(self):
        y_c = confusion_distribution(Tensor(np.ones((1, 6))), Tensor(np.zeros((4, 6))))
        np.testing.assert_array_equal(y_c.data, np.full((1, 4), 0.25))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_probability_vector(self, seed):
        rng = np.random.default_rng(seed)
        y_c = confusion_distribution(Tensor(rng.normal(size=(3, 6))), Tensor(rng.normal(size=(5, 6))))
        assert np.all(y_c.data >= 0)
        np.testing.assert_allclose(y_c.data.sum(axis=1), 1.0, atol=1e-12)
        y_s = simulate_labels(y_c, np.eye(5)[:3], 4.0)
        np.testing.assert_allclose(y_s.data.sum(axis=1), 1.0, atol=1e-12)

    def test_identical_rows_equal_mass(self):
        rng = np.random.default_rng(3)
        c = rng.normal(size=(4, 6))
        c[2] = c[0]
        y_c = confusion_distribution(Tensor(rng.normal(size=(1, 6))), Tensor(c))
        assert y_c.data[0, 0] == y_c.data[0, 2]

    def test_missing_matrix(self):
        with pytest.raises(ModelError):
            confusion_distribution(Tensor(np.ones((1, 2))), None)

    def test_worked_example(self):
        y_s = simulate_labels(Tensor(np.array([0.2, 0.3, 0.5])), np.array([1.0, 0.0, 0.0]), 4.0)
        np.testing.assert_allclose(y_s.data, [0.9578, 0.0194, 0.0237], atol=1e-3)
        e = np.exp([4.2, 0.3, 0.5])
        np.testing.assert_allclose(y_s.data, e / e.sum(), atol=1e-15)

    def test_alpha_zero_is_softmax_of_confusion(self):
        y_c = Tensor(np.array([0.2, 0.3, 0.5]))
        np.testing.assert_array_equal(simulate_labels(y_c, [1, 0, 0], 0.0).data, T.softmax(y_c).data)

    def test_true_mass_increases_with_alpha(self):
        y_c = Tensor(np.array([0.1, 0.4, 0.2, 0.3]))
        y_t = np.array([1.0, 0.0, 1.0, 0.0])
        mass = [simulate_labels(y_c, y_t, a).data @ y_t for a in (0, 1, 4, 10, 100)]
        assert all(a < b for a, b in zip(mass, mass[1:]))

    def test_negative_alpha(self):
        with pytest.raises(ValueError):
            simulate_labels(Tensor(np.ones(2) / 2), [1, 0], -1.0)


class TestLosses:
    def test_kl_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            y = simulate_labels(Tensor(rng.dirichlet(np.ones(6))), rng.integers(0, 2, size=6), 4.0)
            assert abs(loss_kl(y, y).data) <= 1e-9

    def test_kl_log2(self):
        assert loss_kl(Tensor(np.array([1.0, 0.0])), Tensor(np.array([0.5, 0.5]))).data == pytest.approx(np.log(2))

    def test_kl_unnormalized_prediction_can_go_negative(self):
        # y_p from per-label sigmoids need not sum to one; the literal form is not a divergence then
        y_s = Tensor(np.array([0.5, 0.5]))
        y_p = Tensor(np.array([0.9, 0.9]))
        assert loss_kl(y_s, y_p).data < 0
        assert loss_kl(y_s, y_p, renormalize=True).data == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("renormalize", [False, True])
    def test_kl_gradient(self, renormalize):
        rng = np.random.default_rng(1)
        z_s, z_p = param(rng.normal(size=(2, 4))), param(rng.normal(size=(2, 4)))
        errs = T.gradient_check(lambda: loss_kl(T.softmax(z_s), T.sigmoid(z_p), renormalize), {"s": z_s, "p": z_p})
        assert max(errs.values()) < 1e-5

    def test_bce_exact(self):
        assert loss_bce(np.array([1.0, 0.0]), Tensor(np.array([1.0, 0.0]))).data == pytest.approx(0.0, abs=1e-11)

    def test_bce_log2(self):
        assert loss_bce(np.array([1.0]), Tensor(np.array([0.5]))).data == pytest.approx(np.log(2))

    def test_bce_gradient(self):
        rng = np.random.default_rng(2)
        z = param(rng.normal(size=(3, 4)))
        y = rng.integers(0, 2, size=(3, 4)).astype(float)
        assert T.gradient_check(lambda: loss_bce(y, T.sigmoid(z)), {"z": z})["z"] < 1e-5


GROUPS = {"attn.C": Variant.attention, "lcm.C": Variant.smoothing}


class TestForward:
    @pytest.mark.parametrize("variant", list(Variant))
    def test_variant_runs_and_owns_only_its_groups(self, variant):
        model = toy_model(variant)
        batch = toy_batch([[3, 4, 5, 0], [6, 2, 0, 0]], 3, formula_at=[(0, 1)])
        out = model.forward(batch)
        assert np.isfinite(out.loss.data)
        assert out.y_p.shape == (2, 3)
        assert ("attn.C" in model.params) == variant.attention
        assert ("lcm.C" in model.params) == variant.smoothing
        assert (out.a_fwd is not None) == variant.attention
        assert (out.y_s is not None) == variant.smoothing
        T.backward(out.loss)
        for name, p in model.params.items():
            assert p.grad is not None and np.all(np.isfinite(p.grad)), name

    def test_basic_ignores_label_matrices(self):
        # adding foreign groups to a Basic model must leave them untouched
        model = toy_model(Variant.BASIC)
        model.params["attn.C"] = param(np.ones((3, 8)))
        model.params["lcm.C"] = param(np.ones((3, 16)))
        T.backward(model.forward(toy_batch([[3, 4, 5, 0]], 3)).loss)
        for name in ("attn.C", "lcm.C"):
            grad = model.params[name].grad
            assert grad is None or not grad.any()

    def test_pad_row_gets_no_gradient(self):
        model = toy_model(Variant.LABS)
        T.backward(model.forward(toy_batch([[3, 4, 0, 0]], 3)).loss)
        assert not model.params["embed.word"].grad[0].any()

    def test_golden_loss(self):
        model = toy_model(Variant.LABS, seed=123)
        batch = toy_batch([[3, 4, 5, 0], [6, 2, 9, 1]], 3, formula_at=[(1, 0)])
        assert model.forward(batch).loss.data == pytest.approx(GOLDEN_LABS_LOSS, rel=1e-12)

    def test_literal_kl_option(self):
        model = toy_model(Variant.LABS, seed=123)
        model.config.renormalize_pred = False
        batch = toy_batch([[3, 4, 5, 0], [6, 2, 9, 1]], 3, formula_at=[(1, 0)])
        assert model.forward(batch).loss.data == pytest.approx(GOLDEN_LABS_LITERAL_LOSS, rel=1e-12)

    def test_trimmed_and_padded_batches_agree(self):
        model = toy_model(Variant.LABS)
        short = toy_batch([[3, 4, 5]], 3, formula_at=[(0, 1)])
        long = toy_batch([[3, 4, 5, 0, 0, 0]], 3, formula_at=[(0, 1)])
        a, b = model.forward(short), model.forward(long)
        np.testing.assert_allclose(a.logits.data, b.logits.data, atol=1e-14)
        assert a.loss.data == pytest.approx(b.loss.data, abs=1e-14)

    def test_seeded_init_deterministic(self):
        a, b = toy_model(Variant.LABS, seed=9), toy_model(Variant.LABS, seed=9)
        for name in a.params:
            assert a.params[name].data.tobytes() == b.params[name].data.tobytes()

    def test_state_dict_round_trip(self):
        a, b = toy_model(Variant.LAB, seed=1), toy_model(Variant.LAB, seed=2)
        b.load_state_dict(a.state_dict())
        batch = toy_batch([[3, 4, 5, 0]], 3)
        assert a.forward(batch).loss.data == b.forward(batch).loss.data
        with pytest.raises(ValueError):
            b.load_state_dict({"nope": np.zeros(1)})


def unit_scale_toy(seed):
    """4-token, 3-label, k=8 LABS model with unit-normal parameters.

    The default init keeps hidden states near 0.01, which leaves some w_h
    gradient entries around 1e-8, inside the noise of a 1e-5 central difference.
    """
    model = toy_model(Variant.LABS, hidden=8, labels=3, vocab=8, dim=4, seed=seed)
    rng = np.random.default_rng(seed)
    for name, p in model.params.items():
        p.data = rng.normal(size=p.shape)
    model.params["embed.word"].data[0] = 0.0
    targets = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    batch = toy_batch([[2, 3, 4, 5], [6, 7, 3, 0]], 3, targets=targets, formula_at=[(0, 2)])
    return model, batch


def test_end_to_end_gradient_check():
    model, batch = unit_scale_toy(0)
    errs = T.gradient_check(lambda: model.forward(batch).loss, model.params)
    worst = max(errs, key=errs.get)
    assert errs[worst] < 1e-4, (worst, errs[worst])


@pytest.mark.parametrize("seed", range(6))
def test_gradients_agree_above_noise_floor(seed):
    model, batch = unit_scale_toy(seed)

    def loss():
        return model.forward(batch).loss

    T.backward(loss())
    analytic = {name: p.grad.copy() for name, p in model.params.items()}
    for name, p in model.params.items():
        numeric = T.numerical_gradient(loss, p)
        scale = np.maximum(np.abs(analytic[name]), np.abs(numeric))
        big = scale >= 1e-6
        if big.any():
            assert np.max(np.abs(analytic[name] - numeric)[big] / scale[big]) < 1e-4, name
        # entries below the floor still agree in absolute terms
        assert np.max(np.abs(analytic[name] - numeric)) < 1e-9, name


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert (cfg.embed_dim, cfg.hidden_dim, cfg.max_len, cfg.alpha) == (300, 512, 120, 4.0)

    @pytest.mark.parametrize("bad", [{"alpha": -1.0}, {"hidden_dim": 0}, {"dtype": "float16"}, {"variant": "X"}])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            ModelConfig(**bad)

    def test_dict_round_trip(self):
        cfg = ModelConfig(variant="LBS", n_labels=7)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
        assert ModelConfig.from_dict(cfg.to_dict()).digest() == cfg.digest()


# recorded from the first implementation (seed 123)
GOLDEN_LABS_LOSS = 0.9067766239208302
GOLDEN_LABS_LITERAL_LOSS = 0.4907847592286125
