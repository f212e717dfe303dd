"""
Two-party inference over loopback
=================================

The user holds the base model, the contributor holds the adapters.  Each
adapted slot costs one round trip; proofs for the whole pass are requested
at the end and checked with reject-all semantics.
"""

import numpy as np

from zklora import gen_synthetic
from zklora.mpi import Contributor, run_user_inference, start_contributor
from zklora.mpi.reference import accumulated_error_bound, reference_exact

layers = [[("q", 32, 32)], [("q", 32, 24)], [("q", 24, 16)]]
config, tensors, manifest, weights = gen_synthetic(1, layers, [("0.q", 4), ("1.q", 8), ("2.q", 4)])

contributor = Contributor(manifest, weights)
server = start_contributor(contributor)
print("contributor on", server.address)

X = np.random.default_rng(2).uniform(-1, 1, (config.in_dim, 15))
res = run_user_inference(server.address, config, tensors, X)
print(res.report.overall, [(m.module_id, m.reason.value, round(m.verify_ms, 1)) for m in res.report.modules])

# distance to a single-process float run, against the analytic bound
exact = reference_exact(config, tensors, manifest, weights, X)
print("max error", np.abs(res.outputs - exact).max(),
      "bound", accumulated_error_bound(config, tensors, manifest, weights, X, 12))

# the contributor learns the verdict too
print(contributor.reports[-1]["overall"])

server.shutdown()
server.server_close()
