"""User side: runs the base model locally and routes LoRA slots to the contributor."""

from __future__ import annotations

import logging
import os
import socket
import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..commitments import CommitmentSet, pedersen_key
from ..field import DEFAULT_PROFILE, DeploymentProfile
from ..lora_proof import (CorruptProofFile, LoraProof, VerificationReport, VerifierContext, verify_bundle)
from ..quantizer import QuantizedMatrix, dequantize, quantize
from ..tensorio import LoraManifest, ManifestError, ModelConfig
from .records import write_proofs, write_user_records
from .reference import build_routes, forward
from .wire import (ActRequest, ActResponse, Channel, ErrorCode, Hello, ManifestMsg, ProofBundle, ProofRequest,
                   ProtocolError, Role, VerifyReportMsg)

log = logging.getLogger(__name__)

__all__ = ["ConnectFailed", "InferenceResult", "UserSession", "run_session", "run_user_inference"]


class ConnectFailed(ConnectionError):
    pass


@dataclass
class InferenceResult:
    outputs: np.ndarray
    report: VerificationReport
    session_id: bytes
    deltas: dict = field(default_factory=dict)  # module_id -> delta_q entries
    settings_ms: dict = field(default_factory=dict)
    generator_ms: float = 0.0
    prove_ms: dict = field(default_factory=dict)

    @property
    def rejected(self) -> bool:
        return not self.report.accepted


class UserSession:
    """One connection to a contributor; messages follow the forward pass order."""

    def __init__(self, channel: Channel, profile: DeploymentProfile = DEFAULT_PROFILE, session_id: bytes | None = None):
        self.ch = channel
        self.profile = profile
        self.session_id = session_id or os.urandom(16)
        self.manifest: LoraManifest | None = None
        self.commitments: dict[int, tuple[CommitmentSet, CommitmentSet]] = {}
        self.witnesses: dict[int, tuple[QuantizedMatrix, QuantizedMatrix]] = {}
        self.settings_ms: dict[int, float] = {}
        self.generator_ms = 0.0

    def handshake(self) -> LoraManifest:
        self.ch.send(Hello(Role.USER, self.session_id, self.profile))
        hello = self.ch.recv_expect(Hello)
        if hello.role != Role.CONTRIBUTOR or hello.session_id != self.session_id:
            raise ProtocolError("contributor HELLO does not match the session")
        if hello.profile != self.profile:
            raise ProtocolError(f"contributor serves profile {hello.profile.profile_id!r}",
                                ErrorCode.PROFILE_MISMATCH)
        body = self.ch.recv_expect(ManifestMsg).body
        if body["profile_id"] != self.profile.profile_id:
            raise ProtocolError("MANIFEST profile differs from the negotiated one")
        try:
            self.manifest = LoraManifest.from_dict(body["manifest"])
            self.commitments = {int(k): (CommitmentSet.from_hex(v["A"]), CommitmentSet.from_hex(v["B"]))
                                for k, v in body["commitments"].items()}
            self.settings_ms = {int(k): float(v) for k, v in body.get("settings_ms", {}).items()}
            self.generator_ms = float(body.get("generator_ms", 0.0))
        except (AttributeError, KeyError, TypeError, ValueError) as e:
            raise ProtocolError(f"bad MANIFEST: {e}") from None
        return self.manifest

    def exchange(self, module_id: int, x: np.ndarray) -> np.ndarray:
        """Send one slot input; returns the float delta after checking it against delta_q."""
        x32 = np.ascontiguousarray(x, dtype=np.float32)
        self.ch.send(ActRequest(module_id, x32))
        resp = self.ch.recv_expect(ActResponse)
        mod = self.manifest.module(module_id)
        if resp.module_id != module_id or resp.delta_q.shape != (mod.d, x32.shape[1]):
            raise ProtocolError(f"ACT_RESPONSE does not match request for module {module_id}")
        f = self.profile.scale_bits
        try:
            D_q = QuantizedMatrix(resp.delta_q, 3)
        except ValueError as e:
            raise ProtocolError(f"bad delta_q for module {module_id}: {e}") from None
        expected = dequantize(D_q, f).astype(np.float32)
        if expected.tobytes() != np.ascontiguousarray(resp.delta).tobytes():
            raise ProtocolError(f"module {module_id}: float delta disagrees with dequantized delta_q")
        self.witnesses[module_id] = (quantize(x32, f), D_q)
        return resp.delta

    def request_proofs(self, module_ids=()) -> tuple[list[LoraProof | None], dict]:
        self.ch.send(ProofRequest(list(module_ids)))
        bundle = self.ch.recv_expect(ProofBundle)
        proofs = []
        for raw in bundle.proofs:
            try:
                proofs.append(LoraProof.from_bytes(raw, self.profile.p))
            except CorruptProofFile:
                proofs.append(None)
        return proofs, bundle.prove_ms

    def context(self) -> VerifierContext:
        return VerifierContext(self.profile, pedersen_key(self.profile, self.manifest.max_dim), self.manifest,
                               self.session_id, self.commitments, self.witnesses)

    def send_report(self, report: VerificationReport) -> None:
        self.ch.send(VerifyReportMsg(report.to_dict()))


def _connect(address, timeout: float) -> socket.socket:
    if isinstance(address, str):
        host, _, port = address.rpartition(":")
        address = (host or "127.0.0.1", int(port))
    try:
        return socket.create_connection(address, timeout=timeout)
    except OSError as e:
        raise ConnectFailed(f"cannot connect to {address[0]}:{address[1]}: {e}") from None


def run_session(ch: Channel, config: ModelConfig, tensors: Mapping[str, np.ndarray], X,
                profile: DeploymentProfile = DEFAULT_PROFILE, *, session_dir=None, proof_dir=None,
                session_id: bytes | None = None) -> InferenceResult:
    """The user's side of one session over an open channel."""
    X = np.asarray(X, dtype=np.float64)
    sess = UserSession(ch, profile, session_id)
    manifest = sess.handshake()
    try:
        routes = build_routes(config, manifest)
    except ManifestError as e:
        raise ProtocolError(f"manifest does not fit the local model: {e}") from None

    def hook(path, x):
        mid = routes.get(path)
        if mid is None:
            return None
        return sess.exchange(mid, x).astype(np.float64)

    outputs = forward(config, tensors, X, hook)
    prove_ms = {}
    proofs = []
    if manifest.modules:
        proofs, prove_ms = sess.request_proofs()
    ctx = sess.context()
    if session_dir is not None:
        write_user_records(session_dir, profile, sess.session_id, manifest, sess.commitments, sess.witnesses)
    if proof_dir is not None:
        write_proofs(proof_dir, [p for p in proofs if p is not None])
    t0 = time.perf_counter()
    report = verify_bundle(proofs, ctx)
    log.debug("bundle verified in %.1f ms", (time.perf_counter() - t0) * 1e3)
    sess.send_report(report)
    return InferenceResult(outputs, report, sess.session_id,
                           {mid: dq.entries for mid, (_, dq) in sess.witnesses.items()},
                           sess.settings_ms, sess.generator_ms, prove_ms)


def run_user_inference(address, config: ModelConfig, tensors: Mapping[str, np.ndarray], X,
                       profile: DeploymentProfile = DEFAULT_PROFILE, *, session_dir=None, proof_dir=None,
                       timeout: float = 120.0, session_id: bytes | None = None) -> InferenceResult:
    """Forward pass with remote LoRA slots, then bulk proof request and verification.

    A rejected bundle does not abort: outputs are returned with the report.
    """
    config.validate(tensors)
    ch = Channel(_connect(address, timeout))
    try:
        return run_session(ch, config, tensors, X, profile, session_dir=session_dir, proof_dir=proof_dir,
                           session_id=session_id)
    finally:
        ch.close()
