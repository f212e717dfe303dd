import random
from dataclasses import replace

import numpy as np
import pytest

from forge import TAMPER_KINDS, bump, forge_proof, tampered_case
from zklora.commitments import commit_rows, open_combination, pedersen_key
from zklora.field import DEFAULT_PROFILE
from zklora.lora_proof import (BudgetExceeded, CorruptProofFile, FailureReason, LoraProof, OpeningBudget,
                               OverflowBound, VerificationReport, VerifierContext, WitnessMismatch, check_budget,
                               derive_challenges, prove_module, reconstruct_rows, verify_bundle, verify_module)
from zklora.quantizer import QuantizedMatrix, delta_exact, quantize
from zklora.tensorio import LoraManifest, LoraModule

P = DEFAULT_PROFILE.p


def _prove(inst, budget=None):
    return prove_module(inst.module, inst.A_q, inst.B_q, inst.ca, inst.cb, inst.X_q, inst.D_q, inst.profile,
                        inst.session_id, budget)


def _verify(inst, proof, X_q=None, D_q=None, ca=None, cb=None):
    return verify_module(proof, inst.module, X_q or inst.X_q, D_q or inst.D_q, ca or inst.ca.public(),
                         cb or inst.cb.public(), inst.key, inst.profile, inst.session_id)


def test_smallest_instance():
    f = DEFAULT_PROFILE.scale_bits
    q = lambda a: QuantizedMatrix(np.asarray(a, np.int64), 1)
    A, B, X = q([[1, 2]]), q([[3]]), q([[1], [1]])
    D = delta_exact(A, B, X)
    assert D.entries.tolist() == [[9]]
    mod = LoraModule(0, "0.q", 2, 1, 1, f, "A.0", "B.0")
    key = pedersen_key(DEFAULT_PROFILE, 2)
    ca, cb = commit_rows(A, key), commit_rows(B, key)
    sid = bytes(16)
    pr = prove_module(mod, A, B, ca, cb, X, D, DEFAULT_PROFILE, sid)
    assert verify_module(pr, mod, X, D, ca.public(), cb.public(), key, DEFAULT_PROFILE, sid).ok
    with pytest.raises(WitnessMismatch):
        prove_module(mod, A, B, ca, cb, X, QuantizedMatrix(np.array([[10]]), 3), DEFAULT_PROFILE, sid)


def test_completeness_sweep(make_instance):
    rng = np.random.default_rng(0)
    for seed in range(200):
        n, r, d, m = (int(v) for v in rng.integers(1, 17, 4))
        inst = make_instance(n, r, d, m, seed=seed)
        assert _verify(inst, _prove(inst)) == FailureReason.NONE


def test_forger_is_honest_without_tamper(make_instance):
    inst = make_instance(6, 3, 5, 4, seed=1)
    assert forge_proof(inst).to_bytes() == _prove(inst).to_bytes()


@pytest.mark.parametrize("kind", TAMPER_KINDS)
def test_tampers_rejected(make_instance, kind):
    rng = np.random.default_rng(hash(kind) % 2**32)
    for seed in range(50):
        inst = make_instance(int(rng.integers(1, 10)), int(rng.integers(1, 6)), int(rng.integers(1, 10)),
                             int(rng.integers(1, 6)), seed=seed)
        proof, X_v, D_v = tampered_case(inst, kind, rng)
        assert _verify(inst, proof, X_v, D_v) != FailureReason.NONE


def test_specific_failure_reasons(make_instance):
    inst = make_instance(8, 4, 6, 3, seed=2)
    rng = np.random.default_rng(2)
    honest = _prove(inst)
    # delta changed after proving: the header digest no longer matches
    assert _verify(inst, honest, D_q=bump(inst.D_q, rng)) == FailureReason.DIGEST_MISMATCH
    # delta changed and re-bound by a cheating prover: outer product check
    assert _verify(inst, forge_proof(inst, D_bound=(D2 := bump(inst.D_q, rng))), D_q=D2) \
        == FailureReason.FREIVALDS_OUTER_FAIL
    # v computed from different activations than the ones bound
    X2 = bump(inst.X_q, rng)
    assert _verify(inst, forge_proof(inst, X_used=X2)) == FailureReason.FREIVALDS_OUTER_FAIL
    # ... and with a delta consistent with those activations the rank-side check catches it
    D_x = delta_exact(inst.A_q, inst.B_q, X2)
    assert _verify(inst, forge_proof(inst, X_used=X2, D_bound=D_x), D_q=D_x) == FailureReason.FREIVALDS_INNER_FAIL
    # a different committed A of the same shape
    other = make_instance(8, 4, 6, 3, seed=3)
    assert _verify(inst, honest, ca=other.ca.public()) == FailureReason.DIGEST_MISMATCH
    bad_a = replace(honest, opening_a=replace(honest.opening_a, blinder=(honest.opening_a.blinder + 1) % P))
    assert _verify(inst, bad_a) == FailureReason.OPENING_A_INVALID
    bad_b = replace(honest, opening_b=replace(honest.opening_b, w=(1,) + honest.opening_b.w[1:]))
    assert _verify(inst, bad_b) == FailureReason.OPENING_B_INVALID
    # commitment substitution with consistent digests: prover opens other weights
    sub = forge_proof(inst, A_used=other.A_q, D_bound=(D3 := delta_exact(other.A_q, inst.B_q, inst.X_q)))
    assert _verify(inst, sub, D_q=D3) == FailureReason.OPENING_A_INVALID
    wrong_session = replace(honest, header=replace(honest.header, session_id=b"\x01" * 16))
    assert _verify(inst, wrong_session) == FailureReason.DIGEST_MISMATCH
    wrong_dims = replace(honest, header=replace(honest.header, m=4))
    assert _verify(inst, wrong_dims) == FailureReason.HEADER_MISMATCH


def test_binding_to_float_bit(make_instance):
    inst = make_instance(8, 2, 4, 3, seed=4)
    # two inputs one ulp apart around a rounding tie: 2.5 / 4096 rounds to 2, the next float up to 3
    tie = np.float32(2.5 / 2**12)
    inst.X[0, 0] = tie
    inst.X_q = quantize(inst.X, 12)
    inst.D_q = delta_exact(inst.A_q, inst.B_q, inst.X_q)
    proof = _prove(inst)
    assert _verify(inst, proof) == FailureReason.NONE
    X = inst.X.copy()
    X[0, 0] = np.nextafter(tie, np.float32(1))
    X2 = quantize(X, 12)
    assert inst.X_q.entries[0, 0] == 2 and X2.entries[0, 0] == 3
    assert _verify(inst, proof, X_q=X2) == FailureReason.DIGEST_MISMATCH


def test_prover_overflow_refusal():
    mod = LoraModule(0, "0.q", 8, 1, 1, 12, "A.0", "B.0")
    big = lambda shape: QuantizedMatrix(np.full(shape, 2**61, np.int64), 1)
    key = pedersen_key(DEFAULT_PROFILE, 8)
    A, B, X = big((1, 8)), big((1, 1)), big((8, 1))
    D = QuantizedMatrix(np.zeros((1, 1), np.int64), 3)
    with pytest.raises(OverflowBound):
        prove_module(mod, A, B, commit_rows(A, key), commit_rows(B, key), X, D, DEFAULT_PROFILE, bytes(16))


def test_proof_size_is_succinct(make_instance):
    sizes = {}
    for n, r, d, m in [(8, 2, 4, 1), (8, 2, 64, 15), (8, 2, 4, 30), (16, 2, 4, 1), (8, 4, 4, 1)]:
        inst = make_instance(n, r, d, m)
        body = _prove(inst).to_bytes()
        hdr_len = int.from_bytes(body[6:10], "little")
        sizes[(n, r, d, m)] = len(body) - 10 - hdr_len
    assert sizes[(8, 2, 4, 1)] == sizes[(8, 2, 64, 15)] == sizes[(8, 2, 4, 30)] == 32 * (2 * 2 + 8 + 2)
    assert sizes[(16, 2, 4, 1)] == 32 * (2 * 2 + 16 + 2)
    assert sizes[(8, 4, 4, 1)] == 32 * (2 * 4 + 8 + 2)


def test_proof_file_roundtrip(make_instance, tmp_path):
    inst = make_instance(5, 3, 4, 2, seed=6)
    proof = _prove(inst)
    proof.write(tmp_path / "p.zklp")
    back = LoraProof.read(tmp_path / "p.zklp", P)
    assert back == proof and back.to_bytes() == proof.to_bytes()
    data = proof.to_bytes()
    assert data[:4] == b"ZKLP"
    for bad in (data[:3], b"ZKLQ" + data[4:], data[:4] + b"\x02\x00" + data[6:], data[:-1], data + b"\x00",
                data[:-32] + (P).to_bytes(32, "little")):
        with pytest.raises(CorruptProofFile):
            LoraProof.from_bytes(bad, P)


def test_challenges_depend_on_everything(make_instance):
    inst = make_instance(4, 2, 3, 2)
    args = dict(profile=DEFAULT_PROFILE, session_id=inst.session_id, module=inst.module, m=2,
                commit_a_digest=b"a" * 32, commit_b_digest=b"b" * 32, x_digest=b"x" * 32, delta_digest=b"d" * 32)
    base = derive_challenges(**args)
    assert [len(v) for v in base] == [2, 3, 2]
    for k, v in [("session_id", b"\x09" * 16), ("commit_a_digest", b"A" * 32), ("commit_b_digest", b"B" * 32),
                 ("x_digest", b"X" * 32), ("delta_digest", b"D" * 32),
                 ("module", replace(inst.module, module_id=9))]:
        assert derive_challenges(**(args | {k: v})) != base


def test_budget(make_instance, tmp_path):
    inst = make_instance(6, 8, 5, 2, seed=7)
    budget = OpeningBudget(tmp_path / "budget.json")
    da, db = inst.ca.digest(DEFAULT_PROFILE), inst.cb.digest(DEFAULT_PROFILE)
    budget.register(da, 8)
    budget.register(db, 8)
    for _ in range(4):
        assert check_budget(budget, da)
        _prove(inst, budget)
    assert not check_budget(budget, da)
    with pytest.raises(BudgetExceeded):
        _prove(inst, budget)
    assert budget.remaining(da) == budget.remaining(db) == 0
    # counters persist
    again = OpeningBudget(tmp_path / "budget.json")
    again.register(da, 8)
    assert again.remaining(da) == 0
    zero = OpeningBudget(default_limit=0)
    zero.register(da, 8)
    zero.register(db, 8)
    with pytest.raises(BudgetExceeded):
        _prove(inst, zero)


def test_budget_is_atomic(make_instance):
    inst = make_instance(6, 8, 5, 2, seed=8)
    budget = OpeningBudget()
    da, db = inst.ca.digest(DEFAULT_PROFILE), inst.cb.digest(DEFAULT_PROFILE)
    budget.register(da, 8)
    budget.register(db, 2)  # B allows one opening only
    _prove(inst, budget)
    with pytest.raises(BudgetExceeded):
        _prove(inst, budget)
    assert budget.remaining(da) == 3


def test_reconstruction_from_rank_many_openings():
    rng = np.random.default_rng(9)
    A = QuantizedMatrix(rng.integers(-2**12, 2**12, (4, 4)), 1)
    key = pedersen_key(DEFAULT_PROFILE, 4)
    ca = commit_rows(A, key, random.Random(9))
    coeffs, openings = [], []
    for sess in range(4):
        s = derive_challenges(DEFAULT_PROFILE, sess.to_bytes(16, "big"),
                              LoraModule(0, "0.q", 4, 4, 4, 12, "A.0", "B.0"), 1,
                              b"a" * 32, b"b" * 32, b"x" * 32, b"d" * 32)[2]
        coeffs.append(s)
        openings.append(open_combination(A, ca.blinders, s, P).w)
    assert reconstruct_rows(coeffs, openings, P) == A.entries.tolist()
    with pytest.raises(ValueError):
        reconstruct_rows(coeffs[:3], openings[:3], P)


def _bundle(make_instance, k):
    insts = [make_instance(6, 2, 5, 3, seed=100 + i, module_id=i) for i in range(k)]
    sid = insts[0].session_id if insts else bytes(16)
    for inst in insts:
        inst.session_id = sid
    manifest = LoraManifest("m", [i.module for i in insts])
    ctx = VerifierContext(DEFAULT_PROFILE, pedersen_key(DEFAULT_PROFILE, 6), manifest, sid,
                          {i.module.module_id: (i.ca.public(), i.cb.public()) for i in insts},
                          {i.module.module_id: (i.X_q, i.D_q) for i in insts})
    return insts, ctx, [_prove(i) for i in insts]


def test_bundle_semantics(make_instance):
    insts, ctx, proofs = _bundle(make_instance, 24)
    rep = verify_bundle(proofs, ctx)
    assert rep.overall == "Accept" and len(rep.modules) == 24 and all(m.verify_ms > 0 for m in rep.modules)
    bad = list(proofs)
    bad[7] = forge_proof(insts[7], D_bound=bump(insts[7].D_q, np.random.default_rng(0)))
    rep = verify_bundle(bad, ctx)
    assert rep.overall == "Reject" and rep.failing_modules == [7]
    rep = verify_bundle(proofs[:-1], ctx)
    assert rep.failing_modules == [23] and rep.modules[-1].reason == FailureReason.MISSING_PROOF
    rep = verify_bundle(proofs + [proofs[3]], ctx)
    assert rep.failing_modules == [3] and rep.modules[3].reason == FailureReason.DUPLICATE_MODULE
    rep = verify_bundle(proofs + [None], ctx)
    assert rep.overall == "Reject" and FailureReason.CORRUPT_PROOF in [m.reason for m in rep.modules]
    d = rep.to_dict()
    assert d["report_version"] == 1 and d["totals"]["num_modules"] == 25
    assert VerificationReport.from_dict(d).failing_modules == rep.failing_modules


def test_empty_bundle_accepts(make_instance):
    _, ctx, proofs = _bundle(make_instance, 0)
    assert verify_bundle([], ctx).overall == "Accept"
