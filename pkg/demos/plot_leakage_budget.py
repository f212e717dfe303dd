"""
Why openings are rationed
=========================

Each proof reveals one random combination sᵀA of the committed rows.  After
r independent combinations the whole of A follows by linear algebra, so the
contributor caps openings below the rank.
"""

import random

import numpy as np

from zklora import DEFAULT_PROFILE
from zklora.commitments import commit_rows, pedersen_key
from zklora.lora_proof import BudgetExceeded, OpeningBudget, derive_challenges, prove_module, reconstruct_rows
from zklora.quantizer import delta_exact, quantize
from zklora.tensorio import LoraModule

p = DEFAULT_PROFILE.p
rng = np.random.default_rng(3)
module = LoraModule(0, "0.q", 4, 4, 4, 12, "A.0", "B.0")
A_q = quantize(rng.uniform(-1, 1, (4, 4)), 12)
B_q = quantize(rng.uniform(-1, 1, (4, 4)), 12)
X_q = quantize(rng.uniform(-1, 1, (4, 2)), 12)
D_q = delta_exact(A_q, B_q, X_q)
key = pedersen_key(DEFAULT_PROFILE, 4)
ca, cb = commit_rows(A_q, key, random.Random(0)), commit_rows(B_q, key, random.Random(1))

# an eavesdropper collects four proofs from four sessions
coeffs, openings = [], []
for k in range(4):
    pr = prove_module(module, A_q, B_q, ca, cb, X_q, D_q, DEFAULT_PROFILE, bytes([k]) * 16)
    h = pr.header
    s = derive_challenges(DEFAULT_PROFILE, h.session_id, module, h.m, h.commit_a_digest, h.commit_b_digest,
                          h.x_digest, h.delta_digest)[2]
    coeffs.append(s)
    openings.append(pr.opening_a.w)

print(np.array(reconstruct_rows(coeffs, openings, p)))
print(A_q.entries)

# with the default budget of floor(r/2) the third request is refused
budget = OpeningBudget()
budget.register(ca.digest(DEFAULT_PROFILE), 4)
budget.register(cb.digest(DEFAULT_PROFILE), 4)
for k in range(3):
    try:
        prove_module(module, A_q, B_q, ca, cb, X_q, D_q, DEFAULT_PROFILE, bytes([k]) * 16, budget)
        print("proof", k, "issued")
    except BudgetExceeded as e:
        print("proof", k, "refused:", e)
