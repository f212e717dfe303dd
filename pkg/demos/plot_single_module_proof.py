"""
Proving one LoRA update
=======================

A contributor commits to the rows of its quantized adapter matrices, then
proves that a returned update equals B·A·x without revealing A or B.
"""

import random

import numpy as np

from zklora import DEFAULT_PROFILE, quantize
from zklora.commitments import commit_rows, pedersen_key
from zklora.lora_proof import prove_module, verify_module
from zklora.quantizer import delta_exact
from zklora.tensorio import LoraModule

f = DEFAULT_PROFILE.scale_bits
rng = np.random.default_rng(0)

# a small adapter: x has n=64 features, the slot writes d=48 outputs, rank 8
n, r, d, m = 64, 8, 48, 15
module = LoraModule(0, "0.q_proj", n, r, d, f, "A.0", "B.0")
A = rng.uniform(-1, 1, (r, n))
B = rng.uniform(-1, 1, (d, r))
X = rng.uniform(-1, 1, (n, m))

# everything runs on fixed-point integers at scale 2^f
A_q, B_q, X_q = quantize(A, f), quantize(B, f), quantize(X, f)
D_q = delta_exact(A_q, B_q, X_q)
print("max |float delta - dequantized|:", np.abs(B @ A @ X - D_q.entries / 2.0 ** (3 * f)).max())

# one Pedersen commitment per row; only the points are published
key = pedersen_key(DEFAULT_PROFILE, max(n, d))
ca = commit_rows(A_q, key, random.SystemRandom())
cb = commit_rows(B_q, key, random.SystemRandom())

session_id = bytes(16)
proof = prove_module(module, A_q, B_q, ca, cb, X_q, D_q, DEFAULT_PROFILE, session_id)
print("proof size:", len(proof.to_bytes()), "bytes")

# the verifier sees the public commitments, x and the claimed delta
print(verify_module(proof, module, X_q, D_q, ca.public(), cb.public(), key, DEFAULT_PROFILE, session_id))

# changing a single output entry breaks the digest binding
D_bad = D_q.entries.copy()
D_bad[3, 2] += 1
print(verify_module(proof, module, X_q, type(D_q)(D_bad, 3), ca.public(), cb.public(), key, DEFAULT_PROFILE,
                    session_id))
