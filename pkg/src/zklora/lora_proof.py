"""Committed-Freivalds proofs that a delivered delta equals B·A·X.

Per module the prover binds the public data (profile, manifest entry, weight
commitments, activation digests) into a transcript, squeezes challenges
c (batch), r (output rows) and s (rank), and reveals

* v = A·(X·c)
* an opening of s^T A against the A-row commitments
* an opening of r^T B against the B-row commitments

The verifier checks both openings homomorphically and the two field
identities  r^T·Δ·c == (r^T B)·v  and  s^T·v == (s^T A)·(X·c).
"""

from __future__ import annotations

import json
import struct
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .commitments import CommitmentSet, Opening, PedersenKey, combine, open_combination, verify_opening
from .field import DeploymentProfile, PrimeField
from .quantizer import ENTRY_LIMIT, Overflow, QuantizedMatrix, delta_exact, overflow_check
from .tensorio import LoraManifest, LoraModule, canonical_json, encode_wire_tensor
from .transcript import Transcript

__all__ = [
    "ProofError",
    "BudgetExceeded",
    "OverflowBound",
    "WitnessMismatch",
    "CorruptProofFile",
    "FailureReason",
    "ProofHeader",
    "LoraProof",
    "ModuleResult",
    "VerificationReport",
    "VerifierContext",
    "OpeningBudget",
    "check_budget",
    "witness_digest",
    "derive_challenges",
    "prove_module",
    "verify_module",
    "verify_bundle",
    "reconstruct_rows",
]

PROOF_MAGIC = b"ZKLP"
PROOF_VERSION = 1
REPORT_VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class ProofError(Exception):
    pass


class BudgetExceeded(ProofError):
    pass


class OverflowBound(ProofError):
    pass


class WitnessMismatch(ProofError):
    pass


class CorruptProofFile(ProofError):
    pass


class FailureReason(str, Enum):
    NONE = "None"
    HEADER_MISMATCH = "HeaderMismatch"
    OVERFLOW_BOUND = "OverflowBound"
    DIGEST_MISMATCH = "DigestMismatch"
    OPENING_A_INVALID = "OpeningAInvalid"
    OPENING_B_INVALID = "OpeningBInvalid"
    FREIVALDS_OUTER_FAIL = "FreivaldsOuterFail"
    FREIVALDS_INNER_FAIL = "FreivaldsInnerFail"
    MISSING_PROOF = "MissingProof"
    MISSING_WITNESS = "MissingWitness"
    DUPLICATE_MODULE = "DuplicateModule"
    UNKNOWN_MODULE = "UnknownModule"
    CORRUPT_PROOF = "CorruptProofFile"

    @property
    def ok(self) -> bool:
        return self is FailureReason.NONE


def witness_digest(profile: DeploymentProfile, q: QuantizedMatrix) -> bytes:
    """Digest of the i64 wire encoding of a quantized activation matrix."""
    return profile.hash(encode_wire_tensor(q.entries))


@dataclass(frozen=True)
class ProofHeader:
    profile_id: str
    session_id: bytes
    module_id: int
    n: int
    r: int
    d: int
    m: int
    scale_bits: int
    x_digest: bytes
    delta_digest: bytes
    commit_a_digest: bytes
    commit_b_digest: bytes

    def to_dict(self) -> dict:
        return {
            "profile_id": self.profile_id,
            "session_id": self.session_id.hex(),
            "module_id": self.module_id,
            "dims": {"n": self.n, "r": self.r, "d": self.d, "m": self.m},
            "scale_bits": self.scale_bits,
            "x_digest": self.x_digest.hex(),
            "delta_digest": self.delta_digest.hex(),
            "commit_a_digest": self.commit_a_digest.hex(),
            "commit_b_digest": self.commit_b_digest.hex(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProofHeader":
        dims = d["dims"]
        h = cls(
            str(d["profile_id"]), bytes.fromhex(d["session_id"]), int(d["module_id"]),
            int(dims["n"]), int(dims["r"]), int(dims["d"]), int(dims["m"]), int(d["scale_bits"]),
            bytes.fromhex(d["x_digest"]), bytes.fromhex(d["delta_digest"]),
            bytes.fromhex(d["commit_a_digest"]), bytes.fromhex(d["commit_b_digest"]),
        )
        if len(h.session_id) != 16:
            raise ValueError("session_id must be 16 bytes")
        if any(len(x) != 32 for x in (h.x_digest, h.delta_digest, h.commit_a_digest, h.commit_b_digest)):
            raise ValueError("digests must be 32 bytes")
        if min(h.n, h.r, h.d, h.m) < 1:
            raise ValueError("dims must be positive")
        return h


@dataclass(frozen=True)
class LoraProof:
    header: ProofHeader
    v: tuple[int, ...]
    opening_a: Opening
    opening_b: Opening

    def to_bytes(self) -> bytes:
        hdr = canonical_json(self.header.to_dict())
        enc = lambda xs: b"".join(int(x).to_bytes(32, "little") for x in xs)
        body = (enc(self.v) + enc(self.opening_a.w) + enc([self.opening_a.blinder])
                + enc(self.opening_b.w) + enc([self.opening_b.blinder]))
        return _PREFIX.pack(PROOF_MAGIC, PROOF_VERSION, len(hdr)) + hdr + body

    @classmethod
    def from_bytes(cls, data: bytes, p: int) -> "LoraProof":
        try:
            magic, version, hlen = _PREFIX.unpack_from(data)
        except struct.error:
            raise CorruptProofFile("truncated proof prefix") from None
        if magic != PROOF_MAGIC:
            raise CorruptProofFile(f"bad magic {magic!r}")
        if version != PROOF_VERSION:
            raise CorruptProofFile(f"unsupported proof version {version}")
        start = _PREFIX.size + hlen
        try:
            header = ProofHeader.from_dict(json.loads(data[_PREFIX.size:start]))
        except (ValueError, KeyError, TypeError) as e:
            raise CorruptProofFile(f"bad proof header: {e}") from None
        if canonical_json(header.to_dict()) != data[_PREFIX.size:start]:
            raise CorruptProofFile("proof header is not in canonical form")
        r, n = header.r, header.n
        counts = [r, n, 1, r, 1]
        if len(data) - start != 32 * sum(counts):
            raise CorruptProofFile("proof body length disagrees with header dims")
        F = PrimeField(p)
        parts = []
        off = start
        try:
            for k in counts:
                parts.append(F.decode_vector(data[off:off + 32 * k], k))
                off += 32 * k
        except ValueError as e:
            raise CorruptProofFile(str(e)) from None
        v, wa, (ra,), wb, (rb,) = parts
        return cls(header, tuple(v), Opening(tuple(wa), ra), Opening(tuple(wb), rb))

    def write(self, path) -> None:
        from .tensorio import _atomic_write
        _atomic_write(Path(path), self.to_bytes())

    @classmethod
    def read(cls, path, p: int) -> "LoraProof":
        return cls.from_bytes(Path(path).read_bytes(), p)


# -- leakage budget -----------------------------------------------------------


class OpeningBudget:
    """Counts openings issued per commitment set (keyed by its digest).

    Each proof opens one row-combination of A and one of B.  Once ``limit``
    combinations of a set are out, further proofs against it are refused.
    With ``path`` the counters survive restarts.
    """

    def __init__(self, path=None, default_limit: int | None = None):
        self.path = Path(path) if path else None
        self.default_limit = default_limit
        self.limits: dict[str, int] = {}
        self.counts: dict[str, int] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            self.counts = {k: int(v) for k, v in json.loads(self.path.read_text()).items()}

    def register(self, key: bytes | str, r: int) -> None:
        """Default limit for a commitment belonging to a rank-r module is floor(r/2)."""
        key = key.hex() if isinstance(key, bytes) else key
        limit = self.default_limit if self.default_limit is not None else r // 2
        with self._lock:
            self.limits[key] = limit
            self.counts.setdefault(key, 0)

    def remaining(self, key) -> int:
        key = key.hex() if isinstance(key, bytes) else key
        return self.limits[key] - self.counts.get(key, 0)

    def check(self, key, requested: int = 1) -> bool:
        key = key.hex() if isinstance(key, bytes) else key
        with self._lock:
            return self.counts.get(key, 0) + requested <= self.limits.get(key, 0)

    def consume(self, keys: Iterable, requested: int = 1) -> None:
        """Atomically charge every key or none of them."""
        keys = [k.hex() if isinstance(k, bytes) else k for k in keys]
        with self._lock:
            for k in keys:
                if self.counts.get(k, 0) + requested > self.limits.get(k, 0):
                    raise BudgetExceeded(
                        f"opening budget exhausted for commitment {k[:16]}... "
                        f"({self.counts.get(k, 0)}/{self.limits.get(k, 0)} used)")
            for k in keys:
                self.counts[k] = self.counts.get(k, 0) + requested
            if self.path:
                from .tensorio import write_json
                write_json(self.path, self.counts)


def check_budget(budget: OpeningBudget, key, requested: int = 1) -> bool:
    return budget.check(key, requested)


# -- prover / verifier ---------------------------------------------------------


def derive_challenges(profile: DeploymentProfile, session_id: bytes, module: LoraModule, m: int,
                      commit_a_digest: bytes, commit_b_digest: bytes,
                      x_digest: bytes, delta_digest: bytes):
    """Challenges (c, r, s) after absorbing every piece of bound data."""
    t = Transcript(profile, session_id)
    t.absorb(b"profile", profile.to_json())
    t.absorb(b"manifest", module.canonical_bytes())
    t.absorb(b"commit/A", commit_a_digest)
    t.absorb(b"commit/B", commit_b_digest)
    t.absorb(b"x-digest", x_digest)
    t.absorb(b"delta-digest", delta_digest)
    c = t.challenge_vector(b"chal/c", m)
    r = t.challenge_vector(b"chal/r", module.d)
    s = t.challenge_vector(b"chal/s", module.r)
    return c, r, s


def _matvec(M: np.ndarray, x: Sequence[int], p: int) -> list[int]:
    if M.shape[0] == 0:
        return []
    return [int(y) % p for y in M.astype(object) @ np.asarray(x, dtype=object)]


def _check_dims(module: LoraModule, A_q, B_q, X_q, delta_q):
    n, r, d = module.n, module.r, module.d
    m = X_q.cols
    if A_q.shape != (r, n) or B_q.shape != (d, r) or X_q.shape != (n, m) or delta_q.shape != (d, m):
        raise ValueError(
            f"module {module.module_id}: shapes A{A_q.shape} B{B_q.shape} X{X_q.shape} "
            f"delta{delta_q.shape} do not match n={n} r={r} d={d}")


def prove_module(module: LoraModule, A_q: QuantizedMatrix, B_q: QuantizedMatrix,
                 commit_a: CommitmentSet, commit_b: CommitmentSet,
                 X_q: QuantizedMatrix, delta_q: QuantizedMatrix,
                 profile: DeploymentProfile, session_id: bytes,
                 budget: OpeningBudget | None = None) -> LoraProof:
    """Prove delta_q = B_q·A_q·X_q for the weights behind commit_a / commit_b.

    The commitment sets must carry their blinders.  The prover trusts that
    they commit to A_q and B_q; a mismatch only surfaces at verification.
    """
    if commit_a.blinders is None or commit_b.blinders is None:
        raise ValueError("prover needs commitment sets with blinders")
    _check_dims(module, A_q, B_q, X_q, delta_q)
    p = profile.p
    n, r, m = module.n, module.r, X_q.cols
    report = overflow_check(n, r, m, profile.scale_bits, A_q.max_abs(), B_q.max_abs(), X_q.max_abs(), p)
    if not report.ok:
        raise OverflowBound(f"worst-case |delta| {report.bound} exceeds {report.limit}")
    try:
        expected = delta_exact(A_q, B_q, X_q)
    except Overflow as e:
        raise OverflowBound(f"module {module.module_id}: {e}") from None
    if expected != delta_q:
        raise WitnessMismatch(f"module {module.module_id}: delta does not equal B·A·X")

    da, db = commit_a.digest(profile), commit_b.digest(profile)
    if budget is not None:
        budget.consume([da, db])

    header = ProofHeader(profile.profile_id, session_id, module.module_id, n, r, module.d, m,
                         profile.scale_bits, witness_digest(profile, X_q),
                         witness_digest(profile, delta_q), da, db)
    c, rr, s = derive_challenges(profile, session_id, module, m, da, db,
                                 header.x_digest, header.delta_digest)
    xc = _matvec(X_q.entries, c, p)
    v = _matvec(A_q.entries, xc, p)
    opening_a = open_combination(A_q, commit_a.blinders, s, p)
    opening_b = open_combination(B_q, commit_b.blinders, rr, p)
    return LoraProof(header, tuple(v), opening_a, opening_b)


def verify_module(proof: LoraProof, module: LoraModule, X_q: QuantizedMatrix, delta_q: QuantizedMatrix,
                  commit_a: CommitmentSet, commit_b: CommitmentSet, key: PedersenKey,
                  profile: DeploymentProfile, session_id: bytes | None = None) -> FailureReason:
    """Check one module proof; returns FailureReason.NONE on acceptance.

    Exact field equality throughout; there is no tolerance parameter.
    """
    h = proof.header
    p = profile.p
    F = PrimeField(p)
    n, r, d = module.n, module.r, module.d
    m = X_q.cols
    if (h.profile_id != profile.profile_id or h.module_id != module.module_id
            or (h.n, h.r, h.d, h.m) != (n, r, d, m) or h.scale_bits != profile.scale_bits
            or module.scale_bits != profile.scale_bits
            or X_q.rows != n or delta_q.shape != (d, m)
            or len(proof.v) != r or len(proof.opening_a.w) != n or len(proof.opening_b.w) != r
            or (commit_a.rows, commit_a.cols) != (r, n) or (commit_b.rows, commit_b.cols) != (d, r)):
        return FailureReason.HEADER_MISMATCH

    # Hidden weights are only known to satisfy the serialization limit.
    bound = overflow_check(n, r, m, profile.scale_bits, ENTRY_LIMIT - 1, ENTRY_LIMIT - 1, X_q.max_abs(), p)
    if not bound.ok:
        return FailureReason.OVERFLOW_BOUND

    da, db = commit_a.digest(profile), commit_b.digest(profile)
    # a proof from another session is bound to data this verifier does not hold
    if (h.x_digest != witness_digest(profile, X_q) or h.delta_digest != witness_digest(profile, delta_q)
            or h.commit_a_digest != da or h.commit_b_digest != db
            or (session_id is not None and h.session_id != session_id)):
        return FailureReason.DIGEST_MISMATCH

    c, rr, s = derive_challenges(profile, h.session_id, module, m, da, db, h.x_digest, h.delta_digest)

    if not verify_opening(key, combine(commit_a.commitments, s), proof.opening_a):
        return FailureReason.OPENING_A_INVALID
    if not verify_opening(key, combine(commit_b.commitments, rr), proof.opening_b):
        return FailureReason.OPENING_B_INVALID

    delta_c = _matvec(delta_q.entries, c, p)
    if F.dot(rr, delta_c) != F.dot(proof.opening_b.w, proof.v):
        return FailureReason.FREIVALDS_OUTER_FAIL
    xc = _matvec(X_q.entries, c, p)
    if F.dot(s, proof.v) != F.dot(proof.opening_a.w, xc):
        return FailureReason.FREIVALDS_INNER_FAIL
    return FailureReason.NONE


# -- bundles and reports -------------------------------------------------------


@dataclass
class ModuleResult:
    module_id: int
    accepted: bool
    reason: FailureReason
    verify_ms: float = 0.0

    def to_dict(self) -> dict:
        return {"module_id": self.module_id, "accepted": self.accepted,
                "reason": self.reason.value, "verify_ms": round(self.verify_ms, 3)}


@dataclass
class VerificationReport:
    modules: list[ModuleResult] = field(default_factory=list)
    session_id: str = ""

    @property
    def overall(self) -> str:
        return "Accept" if all(m.accepted for m in self.modules) else "Reject"

    @property
    def accepted(self) -> bool:
        return self.overall == "Accept"

    @property
    def failing_modules(self) -> list[int]:
        return [m.module_id for m in self.modules if not m.accepted]

    @property
    def total_verify_ms(self) -> float:
        return sum(m.verify_ms for m in self.modules)

    def to_dict(self) -> dict:
        return {
            "report_version": REPORT_VERSION,
            "session_id": self.session_id,
            "overall": self.overall,
            "modules": [m.to_dict() for m in sorted(self.modules, key=lambda m: m.module_id)],
            "totals": {
                "num_modules": len(self.modules),
                "num_failed": len(self.failing_modules),
                "total_verify_ms": round(self.total_verify_ms, 3),
            },
        }

    def to_json(self) -> bytes:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "VerificationReport":
        if d.get("report_version") != REPORT_VERSION:
            raise ValueError("unsupported report version")
        mods = [ModuleResult(int(m["module_id"]), bool(m["accepted"]), FailureReason(m["reason"]),
                             float(m["verify_ms"])) for m in d["modules"]]
        return cls(mods, str(d.get("session_id", "")))


@dataclass
class VerifierContext:
    """Everything the base-model user holds after the forward pass."""

    profile: DeploymentProfile
    key: PedersenKey
    manifest: LoraManifest
    session_id: bytes
    commitments: Mapping[int, tuple[CommitmentSet, CommitmentSet]]
    witnesses: Mapping[int, tuple[QuantizedMatrix, QuantizedMatrix]]


def verify_bundle(proofs: Sequence[LoraProof | None], ctx: VerifierContext) -> VerificationReport:
    """Verify every module of the manifest; a single failure rejects the bundle.

    ``None`` entries stand for proofs that could not be parsed.
    """
    report = VerificationReport(session_id=ctx.session_id.hex())
    by_id: dict[int, LoraProof] = {}
    dupes = set()
    known = {m.module_id for m in ctx.manifest.modules}
    for pr in proofs:
        if pr is None:
            report.modules.append(ModuleResult(-1, False, FailureReason.CORRUPT_PROOF))
            continue
        mid = pr.header.module_id
        if mid not in known:
            report.modules.append(ModuleResult(mid, False, FailureReason.UNKNOWN_MODULE))
        elif mid in by_id:
            dupes.add(mid)
        else:
            by_id[mid] = pr
    for mod in ctx.manifest.modules:
        mid = mod.module_id
        if mid in dupes:
            report.modules.append(ModuleResult(mid, False, FailureReason.DUPLICATE_MODULE))
            continue
        if mid not in by_id:
            report.modules.append(ModuleResult(mid, False, FailureReason.MISSING_PROOF))
            continue
        if mid not in ctx.witnesses or mid not in ctx.commitments:
            report.modules.append(ModuleResult(mid, False, FailureReason.MISSING_WITNESS))
            continue
        X_q, delta_q = ctx.witnesses[mid]
        ca, cb = ctx.commitments[mid]
        t0 = time.perf_counter()
        reason = verify_module(by_id[mid], mod, X_q, delta_q, ca, cb, ctx.key, ctx.profile, ctx.session_id)
        ms = (time.perf_counter() - t0) * 1e3
        report.modules.append(ModuleResult(mid, reason.ok, reason, ms))
    return report


# -- leakage demonstration -----------------------------------------------------


def reconstruct_rows(coeffs: Sequence[Sequence[int]], openings: Sequence[Sequence[int]], p: int) -> list[list[int]]:
    """Solve S·M = W over GF(p) for M given k = rows independent openings.

    Shows why the opening budget stays below the rank: this many revealed
    combinations determine the committed matrix outright.  Returns M with
    entries lifted to signed integers.
    """
    k = len(coeffs)
    if k == 0 or len(openings) != k or any(len(s) != k for s in coeffs):
        raise ValueError("need a square system: one coefficient vector per row")
    aug = [[x % p for x in s] + [x % p for x in w] for s, w in zip(coeffs, openings)]
    for col in range(k):
        piv = next((i for i in range(col, k) if aug[i][col]), None)
        if piv is None:
            raise ValueError("openings are linearly dependent")
        aug[col], aug[piv] = aug[piv], aug[col]
        inv = pow(aug[col][col], -1, p)
        aug[col] = [x * inv % p for x in aug[col]]
        for i in range(k):
            if i != col and aug[i][col]:
                f = aug[i][col]
                aug[i] = [(x - f * y) % p for x, y in zip(aug[i], aug[col])]
    half = (p - 1) // 2
    return [[x - p if x > half else x for x in row[k:]] for row in aug]
