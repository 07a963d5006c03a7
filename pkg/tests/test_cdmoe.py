import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egm.autograd import Tensor, no_grad
from egm.cdmoe import (CdmoePolicy, ExpertBank, HistoryBuffer, HistoryEncoder, PlainMoE, StudentPolicy,
                       gram_schmidt, matched_plain_moe, topk_mask, topk_select)
from egm.errors import ConfigError, NumericalError, ShapeError
from egm.gradcheck import check_suite, max_relative_error
from egm.nn import load_archive, save_params


# -- Gram-Schmidt ----------------------------------------------------------------


def test_gs_identity_case():
    q, act = gram_schmidt(np.eye(2))
    assert np.allclose(q, np.eye(2)) and act.all()


def test_gs_hand_example():
    q, act = gram_schmidt(np.array([[1.0, 0.0], [1.0, 1.0]]))
    assert np.allclose(q, [[1, 0], [0, 1]], atol=1e-15) and act.all()


def test_gs_duplicate_is_inactive():
    v = np.array([[0.3, -1.2, 2.0], [0.3, -1.2, 2.0], [1.0, 0.0, 0.0]])
    q, act = gram_schmidt(v)
    assert list(act) == [True, False, True]
    assert np.all(q[1] == 0)


def test_gs_more_experts_than_dimensions():
    rng = np.random.default_rng(0)
    q, act = gram_schmidt(rng.standard_normal((5, 3)))
    assert act.sum() == 3 and np.all(q[~act] == 0)


def test_gs_zero_vector():
    q, act = gram_schmidt(np.array([[0.0, 0.0], [1.0, 2.0]]))
    assert list(act) == [False, True]
    assert np.linalg.norm(q[1]) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 8), st.integers(1, 10), st.integers(0, 2**31 - 1), st.sampled_from(["gen", "dup", "near"]))
def test_gs_orthonormality(M, d, seed, kind):
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((M, d)) * rng.uniform(0.01, 100)
    if kind == "dup" and M > 1:
        f[rng.integers(1, M)] = f[0]
    if kind == "near" and M > 1:
        f[1:] = f[0] + 1e-5 * rng.standard_normal((M - 1, d))
    q, act = gram_schmidt(f)
    a = q[act]
    gram = a @ a.T
    assert np.all(np.abs(gram - np.diag(np.diag(gram))) < 1e-6)
    assert np.allclose(np.diag(gram), 1.0, atol=1e-9, rtol=0)


# -- top-k ---------------------------------------------------------------------------


def test_topk_examples():
    idx, w = topk_select([0.1, 0.2, 0.3, 0.4], 2)
    assert list(idx) == [2, 3] and np.allclose(w, [3 / 7, 4 / 7])
    idx, w = topk_select([0.25] * 4, 2)
    assert list(idx) == [0, 1] and np.allclose(w, [0.5, 0.5])
    wv = np.array([0.1, 0.6, 0.3])
    idx, w = topk_select(wv, 3)
    assert list(idx) == [0, 1, 2] and np.allclose(w, wv)


def test_topk_bounds():
    with pytest.raises(ConfigError):
        topk_mask([0.5, 0.5], 3)
    with pytest.raises(ConfigError):
        topk_mask([0.5, 0.5], 0)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1), st.floats(-5, 5))
def test_topk_properties(M, seed, shift):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, M + 1))
    logits = rng.standard_normal(M)
    w = np.exp(logits) / np.exp(logits).sum()
    idx, what = topk_select(w, k)
    assert len(idx) == k and np.all(what >= 0) and abs(what.sum() - 1) < 1e-12
    assert idx[np.argmax(what)] == np.argmax(w)
    assert np.all(w[idx].min() >= np.delete(w, idx).max(initial=-1))
    w2 = np.exp(logits + shift) / np.exp(logits + shift).sum()
    assert np.argmax(w2) == np.argmax(w)


# -- bank and policy ------------------------------------------------------------------------


def _mlp_np(layers, x):
    for i, (W, b) in enumerate(layers):
        x = x @ W + b
        if i < len(layers) - 1:
            x = np.tanh(x)
    return x


def oracle_bank(bank, obs, eps=1e-6):
    """Loop-by-loop evaluation of experts, Gram-Schmidt, gating and the head."""
    sd = bank.state_dict()
    M = bank.n_experts
    n_layers = len([k for k in sd if k.startswith("experts.W")])
    shared = [(sd[f"shared.layers.{i}.W"], sd[f"shared.layers.{i}.b"])
              for i in range(len([k for k in sd if k.startswith("shared.layers") and k.endswith(".W")]))]
    gate = [(sd[f"gate.layers.{i}.W"], sd[f"gate.layers.{i}.b"])
            for i in range(len([k for k in sd if k.startswith("gate.layers") and k.endswith(".W")]))]
    head = [(sd[f"head.layers.{i}.W"], sd[f"head.layers.{i}.b"])
            for i in range(len([k for k in sd if k.startswith("head.layers") and k.endswith(".W")]))]
    out = []
    for x in obs:
        feats = []
        for m in range(M):
            layers = [(sd[f"experts.W{i}"][m], sd[f"experts.b{i}"][m][0]) for i in range(n_layers)]
            feats.append(_mlp_np(layers, x))
        basis = []
        q = []
        for f in feats:
            u = f.copy()
            for _ in range(2):
                for e in basis:
                    u = u - np.dot(u, e) * e
            n = np.sqrt(np.dot(u, u))
            if n >= eps:
                basis.append(u / n)
                q.append(u / n)
            else:
                q.append(np.zeros_like(u))
        logits = _mlp_np(gate, x)
        w = np.exp(logits - logits.max())
        w /= w.sum()
        order = sorted(range(M), key=lambda i: (-w[i], i))[: bank.k]
        total = sum(w[i] for i in order)
        p = np.zeros_like(feats[0])
        for i in order:
            p = p + (w[i] / total) * q[i]
        p = p + _mlp_np(shared, x)
        out.append(_mlp_np(head, p))
    return np.array(out)


@pytest.mark.parametrize("seed", range(6))
def test_bank_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    bank = ExpertBank("upper", 7, 3, 4, 2, rng, d_feat=5, hidden=(6, 6), head_gain=1.0)
    obs = rng.standard_normal((9, 7))
    if seed % 2:
        bank.experts.weights[0].data[2] = bank.experts.weights[0].data[0]
        for j in range(1, len(bank.experts.weights)):
            bank.experts.weights[j].data[2] = bank.experts.weights[j].data[0]
    with no_grad():
        got, routing = bank.forward(Tensor(obs))
    assert np.allclose(got.data, oracle_bank(bank, obs), atol=1e-10, rtol=0)
    if seed % 2:
        assert not routing.active[:, 2].any()


def test_shared_zeroed_reduces_to_orthogonal_path():
    rng = np.random.default_rng(1)
    bank = ExpertBank("upper", 4, 2, 3, 2, rng, d_feat=4, hidden=(5,), head_gain=1.0)
    obs = Tensor(rng.standard_normal((6, 4)))
    for p in bank.shared.parameters():
        p.data = np.zeros_like(p.data)
    with no_grad():
        action, routing = bank.forward(obs)
        feats = bank.experts(obs).data
        from egm.cdmoe import gram_schmidt_tensor
        q, _ = gram_schmidt_tensor(Tensor(feats))
        logits = bank.gate(obs).data
        w = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
        sel = routing.selected
        what = np.where(sel, w, 0) / np.where(sel, w, 0).sum(-1, keepdims=True)
        p = np.einsum("bm,mbd->bd", what * routing.active, q.data)
        expected = bank.head(Tensor(p)).data
    assert np.array_equal(action.data, expected) or np.allclose(action.data, expected, atol=1e-14)


def test_single_expert_reduction():
    rng = np.random.default_rng(2)
    bank = ExpertBank("upper", 5, 3, 1, 1, rng, d_feat=3, hidden=(8,), head_hidden=())
    for p in bank.shared.parameters():
        p.data = np.zeros_like(p.data)
    bank.head.layers[0].W.data = np.eye(3)
    bank.head.layers[0].b.data = np.zeros(3)
    obs = Tensor(rng.standard_normal((4, 5)))
    with no_grad():
        action, _ = bank.forward(obs)
        f = bank.experts(obs).data[0]
    assert np.allclose(action.data, f / np.linalg.norm(f, axis=-1, keepdims=True), atol=1e-14)


def test_shared_additivity_identity():
    rng = np.random.default_rng(3)
    bank = ExpertBank("lower", 4, 2, 3, 2, rng, d_feat=4, hidden=(5,), head_gain=1.0)
    obs = Tensor(rng.standard_normal((5, 4)))
    with no_grad():
        a_full, routing = bank.forward(obs)
        feats = bank.experts(obs)
        p_shared = bank.shared(obs).data
        saved = [p.data.copy() for p in bank.shared.parameters()]
        for p in bank.shared.parameters():
            p.data = np.zeros_like(p.data)
        a_zero, _ = bank.forward(obs, routing)
        p_shared_zero = bank.shared(obs).data
        for p, s in zip(bank.shared.parameters(), saved):
            p.data = s
        # recover P_orth through the head input: a_zero = head(P_orth + shared(0))
        from egm.cdmoe import gram_schmidt_tensor
        q, _ = gram_schmidt_tensor(feats)
        logits = bank.gate(obs).data
        w = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
        what = np.where(routing.selected, w, 0)
        what /= what.sum(-1, keepdims=True)
        p_orth = np.einsum("bm,mbd->bd", what * routing.active, q.data)
        lhs = a_full.data - a_zero.data
        rhs = bank.head(Tensor(p_orth + p_shared)).data - bank.head(Tensor(p_orth + p_shared_zero)).data
    assert np.allclose(lhs, rhs, atol=1e-13)


def test_policy_shapes_and_group_independence():
    rng = np.random.default_rng(4)
    pol = CdmoePolicy(10, (2, 3), rng, n_experts=(2, 3), d_feat=4, hidden=(6,))
    obs = Tensor(rng.standard_normal((3, 10)))
    with no_grad():
        a = pol(obs).data
        assert a.shape == (3, 5)
        for p in pol.lower.parameters():
            p.data = np.zeros_like(p.data)
        b = pol(obs).data
    assert np.array_equal(a[:, :2], b[:, :2])
    assert not np.array_equal(a[:, 2:], b[:, 2:])


def test_upper_unchanged_when_lower_perturbed_everywhere():
    rng = np.random.default_rng(5)
    pol = CdmoePolicy(6, (2, 3), rng, n_experts=(2, 3), d_feat=4, hidden=(5,))
    obs = Tensor(rng.standard_normal((4, 6)))
    with no_grad():
        ref = pol(obs).data
        for p in pol.lower.parameters():
            p.data = p.data + rng.standard_normal(p.data.shape)
            assert np.array_equal(pol(obs).data[:, :2], ref[:, :2])


def test_lower_needs_more_experts():
    with pytest.raises(ConfigError):
        CdmoePolicy(4, (2, 2), np.random.default_rng(0), n_experts=(3, 3))


def test_bank_rejects_wrong_obs_dim():
    bank = ExpertBank("upper", 4, 2, 2, 1, np.random.default_rng(0), d_feat=3, hidden=(4,))
    with pytest.raises(ShapeError):
        bank.forward(Tensor(np.zeros((1, 5))))


def test_non_finite_stage_is_named():
    bank = ExpertBank("upper", 4, 2, 2, 1, np.random.default_rng(0), d_feat=3, hidden=(4,))
    bank.gate.layers[0].W.data[0, 0] = np.nan
    with pytest.raises(NumericalError, match="upper.gate"):
        bank.forward(Tensor(np.ones((1, 4))))


def test_forward_is_deterministic():
    rng = np.random.default_rng(6)
    pol = CdmoePolicy(6, (2, 3), rng, n_experts=(2, 3), d_feat=4, hidden=(5,))
    obs = Tensor(rng.standard_normal((4, 6)))
    assert np.array_equal(pol(obs).data, pol(obs).data)


# -- gradients ----------------------------------------------------------------------------


def test_zero_parameters_give_zero_gradients():
    rng = np.random.default_rng(7)
    pol = CdmoePolicy(5, (2, 3), rng, n_experts=(2, 3), d_feat=4, hidden=(5,))
    for p in pol.parameters():
        p.data = np.zeros_like(p.data)
    obs = Tensor(rng.standard_normal((3, 5)))
    a = pol(obs)
    ((a * a).sum() * 0.5).backward()
    assert all(p.grad is None or np.all(p.grad == 0) for p in pol.parameters())


def test_unselected_gate_logits_get_no_gradient():
    rng = np.random.default_rng(8)
    bank = ExpertBank("upper", 4, 2, 4, 2, rng, d_feat=5, hidden=(6,), head_gain=1.0)
    obs = Tensor(rng.standard_normal((1, 4)))
    action, routing = bank.forward(obs)
    (action * action).sum().backward()
    g = bank.gate.layers[-1].b.grad  # d loss / d logits for a batch of one
    assert np.all(g[~routing.selected[0]] == 0)
    assert np.any(g[routing.selected[0]] != 0)


@pytest.mark.parametrize("seed", range(4))
def test_finite_difference_suite(seed):
    errs = check_suite(seed, duplicate=bool(seed % 2))
    assert max(errs.values()) < 1e-4


def test_finite_difference_linear_head():
    kw = dict(d_feat=4, hidden=(5,), gate_hidden=(4,), head_hidden=(), head_gain=1.0)
    assert max(check_suite(11, bank_kw=kw).values()) < 1e-4


def test_numerical_error_names_block():
    pol = CdmoePolicy(4, (1, 2), np.random.default_rng(0), n_experts=(1, 2), k=1, d_feat=3, hidden=(3,))
    pol.upper.head.layers[0].W.grad = np.array([[np.nan]])
    with pytest.raises(NumericalError, match="upper.head.layers.0.W"):
        pol.check_gradients()


# -- plain MoE baseline, history encoder ---------------------------------------------------------


def test_matched_plain_moe_budget():
    rng = np.random.default_rng(0)
    pol = CdmoePolicy(60, (2, 3), rng)
    moe = matched_plain_moe(pol.num_parameters(), 60, 5, rng)
    assert abs(moe.num_parameters() - pol.num_parameters()) / pol.num_parameters() < 0.02
    with no_grad():
        assert moe(Tensor(np.zeros((2, 60)))).shape == (2, 5)


def test_plain_moe_gradients():
    rng = np.random.default_rng(1)
    moe = PlainMoE(4, 3, rng, n_experts=3, hidden=(5,), head_gain=1.0)
    x = Tensor(rng.standard_normal((3, 4)))
    assert max_relative_error(lambda: (moe(x) ** 2).sum(), moe.parameters()) < 1e-6


def test_history_zero_input_is_constant():
    enc = HistoryEncoder(4, 3, np.random.default_rng(0))
    with no_grad():
        a = enc(np.zeros((2, 4, 3))).data
        b = enc(np.zeros((2, 4, 3))).data
    assert np.array_equal(a, b) and np.array_equal(a[0], a[1])


def test_history_order_sensitivity():
    rng = np.random.default_rng(1)
    enc = HistoryEncoder(4, 3, rng)
    h = rng.standard_normal((1, 4, 3))
    with no_grad():
        assert not np.allclose(enc(h).data, enc(h[:, ::-1]).data)


def test_history_single_frame_is_plain_map():
    rng = np.random.default_rng(2)
    enc = HistoryEncoder(1, 3, rng, d_hist=2)
    x = rng.standard_normal((5, 3))
    with no_grad():
        assert np.allclose(enc(x[:, None, :]).data, np.tanh(enc.mlp(Tensor(x)).data))


def test_history_shape_check():
    enc = HistoryEncoder(4, 3, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        enc(np.zeros((1, 3, 3)))
    with pytest.raises(ConfigError):
        HistoryEncoder(0, 3, np.random.default_rng(0))


def test_history_buffer_zero_pads_and_rolls():
    buf = HistoryBuffer(2, 3, 1)
    buf.push(np.array([[1.0], [2.0]]))
    h = buf.push(np.array([[3.0], [4.0]]))
    assert h[0, :, 0].tolist() == [0.0, 1.0, 3.0]
    buf.reset(1)
    assert buf.view()[1].sum() == 0 and buf.view()[0, -1, 0] == 3.0


def test_student_excludes_privileged_input():
    rng = np.random.default_rng(3)
    st_ = StudentPolicy(8, (2, 3), 4, 3, rng, d_hist=2, n_experts=(2, 3), d_feat=4, hidden=(5,))
    with no_grad():
        out = st_(np.zeros((2, 8)), np.zeros((2, 4, 3)))
    assert out.shape == (2, 5)
    assert st_.net.obs_dim == 8 + 2


# -- checkpoints -----------------------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    pol = CdmoePolicy(6, (2, 3), rng, n_experts=(2, 3), d_feat=4, hidden=(5,))
    save_params(tmp_path / "p.npz", pol, {"note": "x"})
    params, _, meta = load_archive(tmp_path / "p.npz")
    other = CdmoePolicy(6, (2, 3), np.random.default_rng(10), n_experts=(2, 3), d_feat=4, hidden=(5,))
    other.load_state_dict(params)
    x = Tensor(rng.standard_normal((2, 6)))
    with no_grad():
        assert np.array_equal(pol(x).data, other(x).data)
    assert meta == {"note": "x"}


def test_checkpoint_shape_mismatch(tmp_path):
    pol = CdmoePolicy(6, (2, 3), np.random.default_rng(0), n_experts=(2, 3), d_feat=4, hidden=(5,))
    save_params(tmp_path / "p.npz", pol)
    other = CdmoePolicy(6, (2, 3), np.random.default_rng(0), n_experts=(2, 3), d_feat=5, hidden=(5,))
    with pytest.raises(ConfigError):
        other.load_state_dict(load_archive(tmp_path / "p.npz")[0])
