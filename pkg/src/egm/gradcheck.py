"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np


def numeric_gradients(loss_fn, params, step=1e-5, entries=None, rng=None):
    """Central differences of ``loss_fn()`` with respect to ``params``.

    ``entries`` limits the check to that many randomly chosen coordinates
    per parameter block (all coordinates when ``None``). Returns a list of
    ``(flat_indices, numeric_values)`` per block.
    """
    out = []
    for p in params:
        flat = p.data.reshape(-1)
        if entries is None or entries >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = np.sort(rng.choice(flat.size, entries, replace=False))
        vals = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            plus = float(loss_fn().data)
            flat[i] = orig - step
            minus = float(loss_fn().data)
            flat[i] = orig
            vals[j] = (plus - minus) / (2 * step)
        out.append((idx, vals))
    return out


def analytic_gradients(loss_fn, params):
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def max_relative_error(loss_fn, params, step=1e-5, entries=None, rng=None, floor=1e-8):
    """Largest ``|analytic - numeric|`` over the checked coordinates, relative to the largest
    numeric gradient magnitude (floored at ``floor``)."""
    analytic = analytic_gradients(loss_fn, params)
    numeric = numeric_gradients(loss_fn, params, step, entries, rng)
    diff, scale = 0.0, floor
    for g, (idx, vals) in zip(analytic, numeric):
        if len(idx) == 0:
            continue
        diff = max(diff, float(np.max(np.abs(g.reshape(-1)[idx] - vals))))
        scale = max(scale, float(np.max(np.abs(vals))))
    return diff / scale


SMALL_BANK = dict(d_feat=4, hidden=(5,), gate_hidden=(4,), head_hidden=(3,), head_gain=1.0)


def check_suite(seed, obs_dim=6, action_dims=(2, 3), n_experts=(2, 3), k=2, batch=4, bank_kw=None,
                history=(3, 4), entries=None, step=1e-5, duplicate=False):
    """Relative finite-difference errors for the bank, the full policy, the history
    encoder and the PPO loss on randomly initialized networks.

    Routing (top-k selection and Gram-Schmidt activity) is computed once and
    held fixed, so every checked function is smooth in its parameters. With
    ``duplicate`` the second expert of each bank copies the first, which
    leaves it inactive after Gram-Schmidt.
    """
    from .autograd import Tensor
    from .cdmoe import CdmoePolicy, HistoryEncoder
    from .trainer import GaussianPolicy, PpoConfig, gaussian_log_prob, ppo_loss, value_net

    bank_kw = dict(SMALL_BANK if bank_kw is None else bank_kw)
    rng = np.random.default_rng(seed)
    pol = CdmoePolicy(obs_dim, action_dims, rng, n_experts=n_experts, k=k, **bank_kw)
    if duplicate:
        for bank in (pol.upper, pol.lower):
            for w in bank.experts.weights + bank.experts.biases:
                w.data[1] = w.data[0]
    x = Tensor(rng.standard_normal((batch, obs_dim)))
    w_up = rng.standard_normal((batch, action_dims[0]))
    w_all = rng.standard_normal((batch, sum(action_dims)))
    out = {}

    _, r_up = pol.upper.forward(x)
    out["bank_forward"] = max_relative_error(
        lambda: (pol.upper.forward(x, r_up)[0] * Tensor(w_up)).sum(),
        pol.upper.parameters(), step, entries, rng)

    _, routing = pol.forward(x)
    out["policy_forward"] = max_relative_error(
        lambda: (pol.forward(x, routing)[0] * Tensor(w_all)).sum(),
        pol.parameters(), step, entries, rng)

    H, p_dim = history
    enc = HistoryEncoder(H, p_dim, rng, d_hist=3, hidden=(5,))
    hist = rng.standard_normal((batch, H, p_dim))
    w_h = Tensor(rng.standard_normal((batch, 3)))
    out["history_encode"] = max_relative_error(lambda: (enc(hist) * w_h).sum(), enc.parameters(),
                                               step, entries, rng)

    gp = GaussianPolicy(pol, log_std_init=-0.5)
    val = value_net(obs_dim, rng, hidden=(5,))
    obs = x.data
    with_routing = _FrozenNet(pol, routing)
    gp.net = with_routing
    mean = with_routing(x).data
    acts = mean + 0.6 * rng.standard_normal(mean.shape)
    old = gaussian_log_prob(mean, gp.log_std.data, acts) + 0.2 * rng.standard_normal(batch)
    adv = rng.standard_normal(batch)
    ret = rng.standard_normal(batch)
    cfg = PpoConfig(ent_coef=0.01)
    params = gp.parameters() + val.parameters()
    out["ppo_loss"] = max_relative_error(lambda: ppo_loss(gp, val, obs, acts, old, adv, ret, cfg)[0],
                                         params, step, entries, rng)
    gp.net = pol
    return out


class _FrozenNet:
    """Policy network wrapper that replays a fixed routing."""

    def __init__(self, net, routing):
        self.net, self.routing = net, routing

    @property
    def act_dim(self):
        return self.net.act_dim

    def parameters(self):
        return self.net.parameters()

    def __call__(self, x):
        return self.net.forward(x, self.routing)[0]
