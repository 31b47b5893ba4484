import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sinerec import autodiff as ad
from sinerec.model import (
    ModelConfig,
    activate_concepts,
    baseline_forward,
    encode,
    forward,
    init_params,
    interest_embeddings,
    label_aware_aggregate,
    topk_indices,
)


def softmax(x, axis=-1):
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


def norm(x, g=1.0, b=0.0, eps=1e-8):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return g * (x - mu) / np.sqrt(var + eps) + b


def reference_sine(p, items, tau):
    """Single-window encoder written out step by step in plain numpy."""
    K, n_tab = p["Wk2"].shape[0], p["pos"].shape[0]
    X = p["H"][items]
    n = len(items)
    a = softmax(np.tanh(X @ p["W1"]) @ p["W2"])
    z = a @ X
    s = p["C"] @ z
    idx = sorted(range(len(s)), key=lambda i: (-s[i], i))[:K]
    Cu = p["C"][idx] * (1 / (1 + np.exp(-s[idx])))[:, None]
    P = softmax(norm(X @ p["W3_assign"]) @ norm(Cu).T)
    Xp = X + p["pos"][n_tab - n:]
    A = np.stack([softmax(np.tanh(Xp @ p["Wk1"][k]) @ p["Wk2"][k]) for k in range(K)])
    Phi = norm((P.T * A) @ X, p["LN3_gain"], p["LN3_bias"])
    Xh = P @ Cu
    b = softmax(np.tanh(Xh @ p["W3_agg"]) @ p["W4"])
    Capt = norm(b @ Xh, p["LN4_gain"], p["LN4_bias"])
    e = softmax(Phi @ Capt / tau)
    return dict(idx=np.array(idx), Cu=Cu, P=P, A=A, Phi=Phi, Capt=Capt, e=e, v=e @ Phi, a=a)


def make(seed=0, M=30, K=3, L=8, D=6, n=7, kind="sine", std=0.5):
    params = init_params(ModelConfig(num_items=M, K=K, L=L, D=D, n=n, kind=kind),
                         np.random.default_rng(seed), std=std)
    return params


def arrays(params):
    return {k: t.data for k, t in params.items()}


class TestReferenceEquality:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_straight_line_oracle(self, seed):
        params = make(seed)
        rng = np.random.default_rng(100 + seed)
        params["LN3_gain"].data[:] = rng.uniform(0.5, 1.5, 6)
        params["LN4_bias"].data[:] = rng.normal(0, 0.3, 6)
        items = rng.integers(1, 31, size=int(rng.integers(1, 8)))
        ref = reference_sine(arrays(params), items, tau=0.1)
        out = forward(params, items)
        np.testing.assert_array_equal(out.concept_indices, ref["idx"])
        for name, got in [("Cu", out.gated_prototypes), ("P", out.assignment), ("A", out.position_attention),
                          ("Phi", out.interests), ("Capt", out.next_intention), ("e", out.weights),
                          ("v", out.user_vector), ("a", out.attention)]:
            np.testing.assert_allclose(got.data, ref[name], rtol=1e-10, atol=1e-12, err_msg=name)

    def test_batched_equals_single(self):
        params = make(1)
        rng = np.random.default_rng(3)
        inputs = rng.integers(1, 31, size=(4, 7))
        mask = np.ones_like(inputs, bool)
        b = encode(params, inputs, mask)
        for i in range(4):
            np.testing.assert_allclose(b.user_vector.data[i], forward(params, inputs[i]).user_vector.data,
                                       rtol=1e-12, atol=1e-14)


class TestBundleInvariants:
    def test_shapes_and_distributions(self):
        params = make(2)
        items = np.array([0, 0, 3, 4, 5, 6, 7])
        out = forward(params, items)
        assert out.concept_indices.shape == (3,) and len(set(out.concept_indices)) == 3
        assert out.assignment.shape == (7, 3) and out.position_attention.shape == (3, 7)
        assert out.interests.shape == (3, 6) and out.user_vector.shape == (6,)
        np.testing.assert_allclose(out.assignment.data[2:].sum(1), 1, atol=1e-12)
        assert (out.assignment.data[:2] == 0).all() and (out.position_attention.data[:, :2] == 0).all()
        np.testing.assert_allclose(out.position_attention.data.sum(1), 1, atol=1e-12)
        np.testing.assert_allclose(out.weights.data.sum(), 1, atol=1e-12)
        assert (out.weights.data >= 0).all()

    def test_gated_rows_follow_scores(self):
        params = make(3)
        out = forward(params, [1, 2, 3])
        s = out.concept_scores.data
        expected = params["C"].data[out.concept_indices] / (1 + np.exp(-s[out.concept_indices]))[:, None]
        np.testing.assert_allclose(out.gated_prototypes.data, expected, rtol=1e-12)

    def test_single_item_sequence(self):
        out = forward(make(4), [9])
        np.testing.assert_allclose(out.assignment.data.sum(), 1, atol=1e-12)
        np.testing.assert_allclose(out.position_attention.data, 1.0)

    def test_all_masked_rejected(self):
        with pytest.raises(ValueError, match="degenerate"):
            forward(make(), [0, 0, 0])
        with pytest.raises(ValueError, match="degenerate"):
            encode(make(), np.zeros((2, 3), int), np.zeros((2, 3), bool))

    def test_window_longer_than_table(self):
        with pytest.raises(ValueError):
            forward(make(n=3), [1, 2, 3, 4])

    def test_k_equals_l(self):
        out = forward(make(K=4, L=4), [1, 2])
        assert sorted(out.concept_indices) == [0, 1, 2, 3]


class TestMaskingSoundness:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 7), st.integers(1, 6))
    def test_padding_is_invisible(self, seed, m, extra):
        params = make(seed % 7, n=13)
        rng = np.random.default_rng(seed)
        items = rng.integers(1, 31, size=m)
        a = forward(params, items)
        b = forward(params, np.concatenate([np.zeros(extra, int), items]))
        assert np.array_equal(a.user_vector.data, b.user_vector.data)
        assert np.array_equal(a.interests.data, b.interests.data)
        assert np.array_equal(a.assignment.data, b.assignment.data[extra:])
        assert np.array_equal(a.position_attention.data, b.position_attention.data[:, extra:])


class TestTopK:
    def test_ties_resolve_to_lower_index(self):
        np.testing.assert_array_equal(topk_indices(np.array([1.0, 3.0, 3.0, 2.0, 3.0]), 2), [1, 2])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(-3, 3), min_size=2, max_size=12), st.integers(1, 12))
    def test_against_sort(self, values, K):
        K = min(K, len(values))
        s = np.array(values, float)
        expected = sorted(range(len(s)), key=lambda i: (-s[i], i))[:K]
        np.testing.assert_array_equal(topk_indices(s, K), expected)

    def test_activate_rejects_bad_k(self):
        C = ad.constant(np.eye(3))
        with pytest.raises(ValueError):
            activate_concepts(ad.constant(np.ones(3)), C, 4)


class TestTemperature:
    def entropies(self, seed):
        params = make(seed)
        items = [1, 5, 9, 2, 7]
        hs = []
        for tau in (10, 1, 0.1, 1e-3):
            e = forward(params, items, tau=tau).weights.data
            hs.append(-(e[e > 0] * np.log(e[e > 0])).sum())
        return hs, params, items

    @pytest.mark.parametrize("seed", range(5))
    def test_entropy_non_increasing(self, seed):
        hs, _, _ = self.entropies(seed)
        assert all(a >= b - 1e-12 for a, b in zip(hs, hs[1:]))

    def test_low_temperature_picks_one_interest(self):
        _, params, items = self.entropies(0)
        out = forward(params, items, tau=1e-3)
        top = out.interests.data[np.argmax(out.interests.data @ out.next_intention.data)]
        assert np.linalg.norm(out.user_vector.data - top) / np.linalg.norm(top) < 1e-3


class TestSwapEquivariance:
    def test_permuting_slots_permutes_interests(self):
        rng = np.random.default_rng(0)
        X = ad.constant(rng.normal(size=(6, 5)))
        P = ad.constant(softmax(rng.normal(size=(6, 3))))
        A = ad.constant(softmax(rng.normal(size=(3, 6))))
        perm = [2, 0, 1]
        base = interest_embeddings(X, P, A).data
        swapped = interest_embeddings(X, ad.constant(P.data[:, perm]), ad.constant(A.data[perm])).data
        np.testing.assert_allclose(swapped, base[perm], rtol=1e-12)


class TestLabelAware:
    def test_picks_closest_interest(self):
        params = make(5)
        out = forward(params, [3, 4, 5], mode="label_aware", targets=7)
        Phi = out.interests.data
        k = np.argmax(Phi @ params["H"].data[7])
        np.testing.assert_array_equal(out.user_vector.data, Phi[k])

    def test_needs_target(self):
        with pytest.raises(RuntimeError):
            label_aware_aggregate(ad.constant(np.ones((2, 3))), None)
        with pytest.raises(RuntimeError):
            forward(make(), [1, 2], mode="label_aware")

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            forward(make(), [1, 2], mode="other")


class TestBaseline:
    def test_matches_reference(self):
        params = make(6, kind="baseline")
        p = arrays(params)
        items = np.array([4, 8, 15])
        Xp = p["H"][items] + p["pos"][-3:]
        a = softmax(np.tanh(Xp @ p["W1"]) @ p["W2"])
        np.testing.assert_allclose(baseline_forward(params, items).data, (a @ Xp) @ p["Wo"], rtol=1e-12)

    def test_padding_invisible(self):
        params = make(6, kind="baseline")
        a = baseline_forward(params, [4, 8, 15]).data
        b = baseline_forward(params, [0, 0, 4, 8, 15]).data
        assert np.array_equal(a, b)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(num_items=5, kind="rnn")
        with pytest.raises(ValueError):
            ModelConfig(num_items=5, K=9, L=4)
        with pytest.raises(ValueError):
            ModelConfig(num_items=5, tau=0)
