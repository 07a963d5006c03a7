"""Walk through one expert bank: raw expert features, Gram-Schmidt, top-k routing.

Run: python3 demos/orthogonal_experts.py
"""

import numpy as np

from egm.autograd import Tensor, no_grad
from egm.cdmoe import CdmoePolicy, ExpertBank, gram_schmidt, topk_select

rng = np.random.default_rng(0)

# Two nearly parallel features and an exact duplicate.
f = np.array([[1.0, 0.0, 0.0], [1.0, 1e-3, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 2.0]])
q, active = gram_schmidt(f)
print("features:\n", f)
print("orthonormalized:\n", np.round(q, 6))
print("active:", active)  # the duplicate drops out
print("gram of active rows:\n", np.round(q[active] @ q[active].T, 12))

# Top-k renormalizes the k largest gate weights; ties go to the lower index.
w = np.array([0.3, 0.3, 0.1, 0.3])
idx, sel = topk_select(w, 2)
print("\ntop-2 of", w, "->", idx, sel)

# A bank whose second expert duplicates the first keeps working, with that expert inactive.
bank = ExpertBank("upper", obs_dim=6, act_dim=2, n_experts=4, k=2, rng=rng, d_feat=8, hidden=(16,))
for p in bank.experts.weights + bank.experts.biases:
    p.data[1] = p.data[0]
obs = rng.standard_normal((5, 6))
with no_grad():
    action, routing = bank.forward(Tensor(obs))
print("\nbank action shape:", action.shape)
print("active experts per sample:\n", routing.active.astype(int))
print("selected experts per sample:\n", routing.selected.astype(int))

# The full policy runs separate upper and lower banks over one observation.
pol = CdmoePolicy(obs_dim=6, action_dims=(2, 3), rng=rng)
with no_grad():
    out, (r_up, r_low) = pol.forward(Tensor(obs))
print("\npolicy action shape:", out.shape, "| parameters:", pol.num_parameters())
print("mean gate weights, upper:", np.round(r_up.gate_weights.mean(0), 3))
print("mean gate weights, lower:", np.round(r_low.gate_weights.mean(0), 3))
