"""Composite decoupled mixture-of-experts policy network.

Each body group (upper, lower) owns a bank of ``M`` orthogonal experts, one
shared expert, a gate and an output head. For an observation batch:

    F_i      = E_i(obs)                      expert features, i = 1..M
    Q, act   = gram_schmidt(F)               per-sample orthonormalization
    w        = softmax(gate(obs))
    S        = top-k indices of w,  w_hat_i = w_i / sum_{j in S} w_j
    P_orth   = sum_{i in S, act_i} w_hat_i * Q_i
    P_comb   = P_orth + E_shared(obs)
    action   = head(P_comb)

Both groups see the whole-body observation and emit only their own joints.
Top-k indices and the Gram-Schmidt active mask are constants of the
backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, concat, masked_softmax, no_grad, softmax
from .errors import ConfigError, NumericalError, ShapeError
from .nn import MLP, Module, StackedMLP

GS_EPS = 1e-6


# --------------------------------------------------------------------------
# Gram-Schmidt


def gram_schmidt_tensor(features, eps=GS_EPS, active=None):
    """Classical Gram-Schmidt over the leading expert axis of ``features``.

    ``features`` has shape ``(M, B, d)``. Each residual is projected against
    the previously accepted directions twice (the second pass restores
    orthogonality lost to rounding on near-parallel inputs). Residuals with
    norm below ``eps`` are zeroed and marked inactive. Pass ``active`` to
    reuse a mask from an earlier forward pass.

    Returns ``(Q, active)`` with ``Q`` of shape ``(M, B, d)`` and ``active``
    a boolean ``(M, B)`` array.
    """
    M, B, d = features.shape
    qs = []
    masks = []
    for i in range(M):
        u = features[i]
        if qs:
            basis = _stack_rows(qs)  # (B, i, d)
            for _ in range(2):
                coeff = u.reshape(B, 1, d) @ basis.swapaxes(-1, -2)  # (B, 1, i)
                u = u - (coeff @ basis).reshape(B, d)
        norm_sq = (u * u).sum(axis=-1, keepdims=True)  # (B, 1)
        if active is None:
            mask = np.sqrt(norm_sq.data[:, 0]) >= eps
        else:
            mask = np.asarray(active[i], dtype=bool)
        m = mask.astype(np.float64)[:, None]
        scale = (norm_sq + Tensor(1.0 - m)) ** -0.5 * Tensor(m)
        qs.append(u * scale)
        masks.append(mask)
    return _stack_rows(qs, axis=0), np.stack(masks)


def _stack_rows(rows, axis=1):
    from .autograd import stack

    return stack(rows, axis=axis)


def gram_schmidt(features, eps=GS_EPS):
    """Orthonormalize ``M`` vectors (rows of ``features``, shape ``(M, d)``).

    Returns ``(Q, active)``: unit rows for active experts, zero rows for
    residuals shorter than ``eps``.
    """
    f = np.asarray(features, dtype=np.float64)
    with no_grad():
        q, act = gram_schmidt_tensor(Tensor(f[:, None, :]), eps)
    return q.data[:, 0, :], act[:, 0]


# --------------------------------------------------------------------------
# top-k


def topk_mask(weights, k):
    """Boolean mask of the ``k`` largest entries along the last axis; ties go to the lowest index."""
    w = np.asarray(weights, dtype=np.float64)
    M = w.shape[-1]
    if not 1 <= k <= M:
        raise ConfigError(f"k must lie in [1, {M}], got {k}")
    order = np.argsort(-w, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(w.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def topk_select(weights, k):
    """Top-``k`` indices (ascending) of a weight vector and their renormalized weights."""
    w = np.asarray(weights, dtype=np.float64)
    mask = topk_mask(w, k)
    idx = np.flatnonzero(mask)
    sel = w[idx]
    return idx, sel / sel.sum()


# --------------------------------------------------------------------------
# networks


@dataclass
class Routing:
    """Per-sample routing decisions of one bank, reusable as graph constants."""

    gate_weights: np.ndarray  # (B, M) softmax of gate logits
    selected: np.ndarray  # (B, M) top-k mask
    active: np.ndarray  # (B, M) Gram-Schmidt active mask


def _check(t, stage):
    if not np.all(np.isfinite(t.data)):
        raise NumericalError("non-finite values", stage=stage)
    return t


class ExpertBank(Module):
    def __init__(self, group, obs_dim, act_dim, n_experts, k, rng, d_feat=32, hidden=(64, 64),
                 gate_hidden=(64,), head_hidden=(), head_gain=0.01, eps=GS_EPS):
        if not 1 <= k <= n_experts:
            raise ConfigError(f"{group}: k must lie in [1, {n_experts}]")
        self.group = group
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.n_experts, self.k, self.d_feat, self.eps = n_experts, k, d_feat, eps
        self.experts = StackedMLP(n_experts, obs_dim, hidden, d_feat, rng)
        self.shared = MLP(obs_dim, hidden, d_feat, rng)
        self.gate = MLP(obs_dim, gate_hidden, n_experts, rng, out_gain=0.1)
        self.head = MLP(d_feat, head_hidden, act_dim, rng, out_gain=head_gain)

    def forward(self, obs, routing=None):
        """Group action ``(B, act_dim)`` and the :class:`Routing` used."""
        if obs.shape[-1] != self.obs_dim:
            raise ShapeError(f"{self.group}: observation dim {obs.shape[-1]}, expected {self.obs_dim}")
        g = self.group
        feats = _check(self.experts(obs), f"{g}.experts")  # (M, B, d)
        q, active = gram_schmidt_tensor(feats, self.eps, None if routing is None else routing.active.T)
        _check(q, f"{g}.gram_schmidt")
        logits = _check(self.gate(obs), f"{g}.gate")  # (B, M)
        w = softmax(logits.detach()).data
        selected = topk_mask(w, self.k) if routing is None else routing.selected
        w_hat = masked_softmax(logits, selected)  # equals w_i / sum_{top-k} w_j
        coef = w_hat * Tensor(active.T.astype(np.float64))  # (B, M)
        p_orth = (coef.swapaxes(0, 1).reshape(self.n_experts, -1, 1) * q).sum(axis=0)
        p_comb = p_orth + _check(self.shared(obs), f"{g}.shared")
        action = _check(self.head(p_comb), f"{g}.head")
        return action, Routing(w, selected, active.T.copy())

    __call__ = forward


class CdmoePolicy(Module):
    """Upper- and lower-body expert banks over one shared observation."""

    def __init__(self, obs_dim, action_dims, rng, n_experts=(4, 6), k=2, d_feat=32,
                 hidden=(64, 64), **bank_kw):
        up_m, low_m = n_experts
        if low_m <= up_m:
            raise ConfigError("the lower body needs strictly more experts than the upper body")
        self.obs_dim = obs_dim
        self.action_dims = tuple(action_dims)
        self.upper = ExpertBank("upper", obs_dim, action_dims[0], up_m, k, rng, d_feat, hidden, **bank_kw)
        self.lower = ExpertBank("lower", obs_dim, action_dims[1], low_m, k, rng, d_feat, hidden, **bank_kw)

    @property
    def act_dim(self):
        return sum(self.action_dims)

    def forward(self, obs, routing=None):
        ru, rl = (None, None) if routing is None else routing
        a_up, r_up = self.upper.forward(obs, ru)
        a_low, r_low = self.lower.forward(obs, rl)
        return concat([a_up, a_low], axis=-1), (r_up, r_low)

    def __call__(self, obs):
        return self.forward(obs)[0]


class PlainMoE(Module):
    """Dense softmax-gated mixture of action experts over the whole body (baseline)."""

    def __init__(self, obs_dim, act_dim, rng, n_experts=4, hidden=(64, 64), gate_hidden=(64,),
                 head_gain=0.01):
        self.obs_dim, self._act_dim, self.n_experts = obs_dim, act_dim, n_experts
        self.experts = StackedMLP(n_experts, obs_dim, hidden, act_dim, rng, out_gain=head_gain)
        self.gate = MLP(obs_dim, gate_hidden, n_experts, rng, out_gain=0.1)

    @property
    def act_dim(self):
        return self._act_dim

    def forward(self, obs, routing=None):
        outs = self.experts(obs)  # (M, B, A)
        w = softmax(self.gate(obs))  # (B, M)
        mixed = (w.swapaxes(0, 1).reshape(self.n_experts, -1, 1) * outs).sum(axis=0)
        return _check(mixed, "moe"), None

    def __call__(self, obs):
        return self.forward(obs)[0]


def matched_plain_moe(target_params, obs_dim, act_dim, rng, n_experts=4, depth=2, gate_hidden=(64,)):
    """Plain MoE whose hidden width brings its parameter count closest to ``target_params``."""
    best = None
    for width in range(8, 1025):
        count = _moe_param_count(obs_dim, act_dim, n_experts, (width,) * depth, gate_hidden)
        if best is None or abs(count - target_params) < abs(best[1] - target_params):
            best = (width, count)
        if count > target_params:
            break
    return PlainMoE(obs_dim, act_dim, rng, n_experts, (best[0],) * depth, gate_hidden)


def _moe_param_count(obs_dim, act_dim, m, hidden, gate_hidden):
    def mlp(sizes):
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))

    return m * mlp([obs_dim, *hidden, act_dim]) + mlp([obs_dim, *gate_hidden, m])


class HistoryEncoder(Module):
    """Feed-forward encoder of the last ``H`` proprioceptive frames into a latent vector."""

    def __init__(self, H, proprio_dim, rng, d_hist=16, hidden=(64,)):
        if H < 1:
            raise ConfigError("history length H must be >= 1")
        self.H, self.proprio_dim, self.d_hist = H, proprio_dim, d_hist
        self.mlp = MLP(H * proprio_dim, hidden, d_hist, rng)

    def __call__(self, stacked):
        shape = stacked.shape
        if len(shape) != 3 or shape[1] != self.H or shape[2] != self.proprio_dim:
            raise ShapeError(f"history must be (B, {self.H}, {self.proprio_dim}), got {shape}")
        x = stacked if isinstance(stacked, Tensor) else Tensor(stacked)
        return self.mlp(x.reshape(shape[0], self.H * self.proprio_dim)).tanh()


class StudentPolicy(Module):
    """Deployable policy: history latent replaces the privileged observation."""

    def __init__(self, base_dim, action_dims, H, proprio_dim, rng, d_hist=16, **policy_kw):
        self.encoder = HistoryEncoder(H, proprio_dim, rng, d_hist)
        self.net = CdmoePolicy(base_dim + d_hist, action_dims, rng, **policy_kw)
        self.base_dim = base_dim

    @property
    def act_dim(self):
        return self.net.act_dim

    def __call__(self, base_obs, history):
        latent = self.encoder(history)
        x = base_obs if isinstance(base_obs, Tensor) else Tensor(base_obs)
        return self.net(concat([x, latent], axis=-1))


class HistoryBuffer:
    """Rolling window of the last ``H`` proprio vectors per instance, zero-padded at reset."""

    def __init__(self, n_envs, H, proprio_dim):
        self.buf = np.zeros((n_envs, H, proprio_dim))

    def reset(self, i):
        self.buf[i] = 0.0

    def push(self, proprio):
        self.buf = np.roll(self.buf, -1, axis=1)
        self.buf[:, -1] = proprio
        return self.buf.copy()

    def view(self):
        return self.buf.copy()
