import json

import numpy as np
import pytest

from hid import autograd as ag
from hid.encoder import (
    SessionModel,
    cross_entropy,
    encode_session,
    l2_normalize,
    prediction_loss,
    score_items,
    softmax,
)
from tests.gradcheck import assert_grads_match


class TestAutograd:
    def test_dot_self(self):
        v = ag.parameter([1.0, 2.0])
        ag.dot(v, v).backward()
        np.testing.assert_allclose(v.grad, [2, 4])

    def test_constant_loss(self):
        v = ag.parameter([1.0, 2.0])
        loss = v * 0.0 + 3.0
        loss.sum().backward()
        np.testing.assert_array_equal(v.grad, [0, 0])

    def test_non_scalar_root(self):
        with pytest.raises(ValueError):
            ag.parameter([1.0, 2.0]).backward()

    def test_buffers_reset_between_calls(self):
        v = ag.parameter([1.0, 2.0])
        for _ in range(3):
            (v * v).sum().backward()
        np.testing.assert_allclose(v.grad, [2, 4])

    def test_shared_subgraph(self):
        x = ag.parameter(2.0)
        y = ag.parameter(-4.0)
        ((x + y) * (x + 1.0)).backward()
        assert x.grad == pytest.approx(1.0) and y.grad == pytest.approx(3.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_op_zoo_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        A = ag.parameter(rng.normal(size=(5, 8)))
        x = ag.parameter(rng.normal(size=8))
        E = ag.parameter(rng.normal(size=(6, 8)))
        idx = np.array([0, 2, 2, 5])

        def f():
            h = (A @ x).tanh() + (A @ x).sigmoid()
            rows = ag.gather_rows(E, idx)
            cos = ag.cosine(rows, ag.l2_normalize(x))
            v = (A @ x).relu().var() + h.mean() + cos.exp().log().sum() * 0.3
            m = ag.logsumexp(rows @ x, axis=0)
            return v + m + ag.dot(x, x) * 0.01

        assert_grads_match(f, {"A": A, "x": x, "E": E})

    def test_masked_logsumexp_empty_row(self):
        x = ag.parameter(np.array([[1.0, 2.0], [3.0, 4.0]]))
        mask = np.array([[True, False], [False, False]])
        out = ag.logsumexp(x, axis=1, mask=mask)
        np.testing.assert_allclose(out.data, [1.0, 0.0])
        out.sum().backward()
        np.testing.assert_allclose(x.grad, [[1, 0], [0, 0]])


class TestEncoders:
    def test_mean_pool_examples(self):
        E = np.array([[1, 0], [0, 1.0]])
        np.testing.assert_allclose(encode_session([0, 1], E), [0.5, 0.5])
        np.testing.assert_allclose(encode_session([1], E), [0, 1])

    def test_empty_session(self):
        with pytest.raises(ValueError):
            encode_session([], np.eye(2))
        with pytest.raises(ValueError):
            SessionModel(3, 2).encode([[]])

    def test_gru_carry(self):
        d = 3
        zeros = np.zeros((d, d))
        params = {"W_z": zeros, "U_z": zeros, "b_z": np.full(d, 40.0),
                  "W_r": zeros, "U_r": zeros, "b_r": np.zeros(d),
                  "W_n": zeros, "U_n": zeros, "b_n": np.zeros(d),
                  "h0": np.array([0.3, -0.2, 0.7])}
        E = np.random.default_rng(0).normal(size=(4, d))
        # z = sigmoid(40) = 1 - 4e-18: h' = z * h0 + (1 - z) * n == h0 to round-off
        np.testing.assert_allclose(encode_session([0, 3, 1], E, "gru", params), params["h0"], atol=1e-12)

    @pytest.mark.parametrize("kind", ["mean", "gru"])
    def test_batched_matches_single(self, kind):
        model = SessionModel(10, 4, kind, seed=1)
        sessions = [[1, 2, 3], [4], [5, 6]]
        batch = model.encode(sessions).data
        params = {k: p.data for k, p in model.params.items() if k != "item_embeddings"}
        for b, s in enumerate(sessions):
            np.testing.assert_allclose(batch[b], encode_session(s, model.item_embeddings.data, kind, params),
                                       atol=1e-12)

    def test_init_seeded_and_finite(self):
        a, b = SessionModel(20, 8, "gru", seed=3), SessionModel(20, 8, "gru", seed=3)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
            assert np.isfinite(a.params[k].data).all()
        assert a.item_embeddings.data.std() == pytest.approx(0.1, rel=0.2)

    def test_grad_shapes_mirror_params(self):
        model = SessionModel(10, 4, "gru")
        prediction_loss(model, model.encode([[1, 2], [3]]), [4, 5]).backward()
        for k, g in model.grads().items():
            assert g.shape == model.params[k].data.shape

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            SessionModel(3, 2, "lstm")


class TestScoring:
    def test_two_item_softmax(self):
        p = score_items([1.0, 0.0], np.array([[1.0, 0.0], [0.0, 0.0]]))
        np.testing.assert_allclose(p, [np.e / (np.e + 1), 1 / (np.e + 1)])
        np.testing.assert_allclose(p, [0.7311, 0.2689], atol=1e-4)

    def test_identical_items_uniform(self):
        p = score_items([0.3, -1.0], np.tile([1.0, 2.0], (5, 1)))
        np.testing.assert_allclose(p, 0.2)

    def test_shift_invariance_exact(self, rng):
        # dyadic logits and shift: max-subtraction cancels the shift without rounding
        logits = rng.integers(-64, 64, size=9) / 16.0
        for c in (3.0, -12.5, 1024.0):
            assert np.array_equal(softmax(logits), softmax(logits + c))

    def test_shift_invariance_general(self, rng):
        logits = rng.normal(size=20)
        np.testing.assert_allclose(softmax(logits + 7.3), softmax(logits), rtol=1e-13)
        assert softmax(logits).sum() == pytest.approx(1.0, abs=1e-9)

    def test_cross_entropy(self):
        assert cross_entropy(np.full(4, 0.25), 0) == pytest.approx(1.386294, abs=1e-5)
        assert cross_entropy([1.0, 0.0], 0) == 0.0
        assert cross_entropy([0.5, 0.5], 1) == pytest.approx(0.693147, abs=1e-6)
        assert cross_entropy([1.0, 0.0], 1) == pytest.approx(-np.log(1e-12))

    def test_graph_loss_matches_numpy(self, rng):
        model = SessionModel(6, 3, seed=2)
        emb = model.encode([[0, 1], [2]])
        loss = prediction_loss(model, emb, [3, 4]).item()
        probs = [score_items(emb.data[b], model.item_embeddings.data) for b in range(2)]
        assert loss == pytest.approx(np.mean([cross_entropy(probs[0], 3), cross_entropy(probs[1], 4)]))


class TestNormalize:
    def test_examples(self):
        np.testing.assert_allclose(l2_normalize([3, 4]), [0.6, 0.8])
        np.testing.assert_allclose(l2_normalize([0.6, 0.8]), [0.6, 0.8])
        with pytest.raises(ValueError):
            l2_normalize([0, 0])
        with pytest.raises(ValueError):
            ag.l2_normalize(ag.Tensor([[0.0, 0.0]]))

    def test_idempotent(self, rng):
        for _ in range(50):
            v = l2_normalize(rng.normal(size=5) * 10)
            np.testing.assert_allclose(l2_normalize(v), v, atol=1e-12)
            assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-9)


class TestGradients:
    @pytest.mark.parametrize("kind", ["mean", "gru"])
    @pytest.mark.parametrize("d", [4, 8])
    @pytest.mark.parametrize("seed", range(3))
    def test_prediction_loss(self, kind, d, seed):
        rng = np.random.default_rng(seed)
        model = SessionModel(7, d, kind, seed=seed)
        sessions = [rng.integers(0, 7, size=rng.integers(1, 5)).tolist() for _ in range(4)]
        labels = rng.integers(0, 7, size=4)
        assert_grads_match(lambda: prediction_loss(model, model.encode(sessions), labels), model.params)


class TestCheckpoint:
    @pytest.mark.parametrize("kind", ["mean", "gru"])
    def test_bit_exact_round_trip(self, tmp_path, kind):
        model = SessionModel(9, 5, kind, seed=4)
        model.item_embeddings.data[0, 0] = np.nextafter(0.1, 1)
        model.save(tmp_path / "m.json")
        back = SessionModel.load(tmp_path / "m.json")
        assert back.kind == kind and back.seed == 4
        for k in model.params:
            assert np.array_equal(model.params[k].data, back.params[k].data)
        header = json.loads((tmp_path / "m.json").read_text())["tensors"]["item_embeddings"]
        assert header["shape"] == [9, 5] and header["dtype"] == "float64"
