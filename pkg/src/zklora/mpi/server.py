"""Contributor side: hosts the private LoRA weights and answers sessions."""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import threading
import time
from dataclasses import replace
from pathlib import Path
from typing import BinaryIO, Callable, Mapping

import numpy as np

from ..commitments import CommitmentSet, commit_rows, pedersen_key
from ..field import DEFAULT_PROFILE, DeploymentProfile
from ..lora_proof import BudgetExceeded, OpeningBudget, OverflowBound, WitnessMismatch, prove_module
from ..quantizer import QuantizedMatrix, delta_exact, dequantize, overflow_check, quantize
from ..tensorio import LoraManifest, LoraWeights, encode_wire_tensor, write_json
from .records import write_witness_cache
from .wire import (ActRequest, ActResponse, ErrorCode, ErrorMsg, Hello, ManifestMsg, MsgType, ProofBundle,
                   ProofRequest, ProtocolError, Role, VerifyReportMsg, decode_message, encode_message,
                   read_frame)

log = logging.getLogger(__name__)

__all__ = ["Contributor", "ContributorSession", "ContributorServer", "serve_contributor", "start_contributor"]


def _weights_digest(profile, A_q, B_q) -> str:
    return profile.hash(encode_wire_tensor(A_q.entries) + encode_wire_tensor(B_q.entries)).hex()


class Contributor:
    """Long-lived contributor state: quantized weights, commitments, budget.

    Construction is the "settings" phase: generator derivation (once) plus
    row commitments for every module, each timed.
    """

    def __init__(self, manifest: LoraManifest, weights: Mapping[int, LoraWeights],
                 profile: DeploymentProfile = DEFAULT_PROFILE, *, budget: OpeningBudget | None = None,
                 rng=None, witness_root=None, state_dir=None):
        manifest.validate()
        self.manifest = manifest
        self.profile = profile
        self.witness_root = Path(witness_root) if witness_root else None
        self.reports: list[dict] = []
        self.state_dir = Path(state_dir) if state_dir else None
        stored = {}
        if self.state_dir is not None:
            cpath = self.state_dir / "commitments.json"
            if cpath.exists():
                stored = json.loads(cpath.read_text())
                if stored.get("profile_id") != profile.profile_id:
                    stored = {}
            stored = stored.get("modules", {})
            if budget is None:
                budget = OpeningBudget(self.state_dir / "budget.json")
        self.budget = budget if budget is not None else OpeningBudget()
        f = profile.scale_bits
        t0 = time.perf_counter()
        self.key = pedersen_key(profile, manifest.max_dim)
        self.generator_ms = (time.perf_counter() - t0) * 1e3

        self.weights_q: dict[int, tuple[QuantizedMatrix, QuantizedMatrix]] = {}
        self.commitments: dict[int, tuple[CommitmentSet, CommitmentSet]] = {}
        self.settings_ms: dict[int, float] = {}
        for mod in manifest.modules:
            if mod.scale_bits != f:
                raise ValueError(f"module {mod.module_id} uses f={mod.scale_bits}, profile has f={f}")
            w = weights[mod.module_id]
            w.check(mod)
            t0 = time.perf_counter()
            A_q, B_q = quantize(w.A, f), quantize(w.B, f)
            saved = stored.get(str(mod.module_id))
            if saved and saved["weights"] == _weights_digest(profile, A_q, B_q):
                ca = replace(CommitmentSet.from_hex(saved["A"]), blinders=tuple(int(b, 16) for b in saved["blinders_A"]))
                cb = replace(CommitmentSet.from_hex(saved["B"]), blinders=tuple(int(b, 16) for b in saved["blinders_B"]))
            else:
                ca = commit_rows(A_q, self.key, rng)
                cb = commit_rows(B_q, self.key, rng)
            self.settings_ms[mod.module_id] = (time.perf_counter() - t0) * 1e3
            self.weights_q[mod.module_id] = (A_q, B_q)
            self.commitments[mod.module_id] = (ca, cb)
            self.budget.register(ca.digest(profile), mod.r)
            self.budget.register(cb.digest(profile), mod.r)
        if self.state_dir is not None:
            self._save_state()

    def _save_state(self) -> None:
        """Persist commitments and blinders so a restart reuses them.

        The opening budget is keyed by commitment digest; fresh blinders after
        a restart would otherwise reset it while the weights stay the same.
        """
        mods = {}
        for mid, (ca, cb) in self.commitments.items():
            A_q, B_q = self.weights_q[mid]
            mods[str(mid)] = {"weights": _weights_digest(self.profile, A_q, B_q), "A": ca.hex(), "B": cb.hex(),
                              "blinders_A": [format(b, "x") for b in ca.blinders],
                              "blinders_B": [format(b, "x") for b in cb.blinders]}
        write_json(self.state_dir / "commitments.json", {"profile_id": self.profile.profile_id, "modules": mods})

    def manifest_body(self) -> dict:
        return {
            "profile_id": self.profile.profile_id,
            "manifest": self.manifest.to_dict(),
            "commitments": {str(mid): {"A": a.hex(), "B": b.hex()} for mid, (a, b) in self.commitments.items()},
            "settings_ms": {str(mid): ms for mid, ms in self.settings_ms.items()},
            "generator_ms": self.generator_ms,
        }

    def activation(self, module_id: int, x: np.ndarray):
        """Quantize x and return (X_q, delta_q, delta as f32)."""
        try:
            mod = self.manifest.module(module_id)
        except KeyError:
            raise ProtocolError(f"unknown module {module_id}", ErrorCode.UNKNOWN_MODULE) from None
        if x.ndim != 2 or x.shape[0] != mod.n or x.shape[1] < 1:
            raise ProtocolError(f"module {module_id} expects {mod.n} x m input, got {x.shape}",
                                ErrorCode.DIM_MISMATCH)
        if not np.all(np.isfinite(x)):
            raise ProtocolError("non-finite activations", ErrorCode.DIM_MISMATCH)
        f = self.profile.scale_bits
        A_q, B_q = self.weights_q[module_id]
        try:
            X_q = quantize(x, f)
        except ValueError as e:
            raise ProtocolError(str(e), ErrorCode.OVERFLOW_BOUND) from None
        ob = overflow_check(mod.n, mod.r, X_q.cols, f, A_q.max_abs(), B_q.max_abs(), X_q.max_abs(), self.profile.p)
        if not ob.ok:
            raise ProtocolError(f"overflow bound {ob.bound} exceeds field range", ErrorCode.OVERFLOW_BOUND)
        try:
            D_q = delta_exact(A_q, B_q, X_q)
        except ValueError as e:
            raise ProtocolError(str(e), ErrorCode.OVERFLOW_BOUND) from None
        return X_q, D_q, dequantize(D_q, f).astype(np.float32)

    def prove(self, session_id: bytes, module_id: int, X_q, D_q):
        mod = self.manifest.module(module_id)
        A_q, B_q = self.weights_q[module_id]
        ca, cb = self.commitments[module_id]
        return prove_module(mod, A_q, B_q, ca, cb, X_q, D_q, self.profile, session_id, self.budget)


class ContributorSession:
    """Protocol state machine for one connection, independent of the socket."""

    def __init__(self, contributor: Contributor):
        self.c = contributor
        self.session_id: bytes | None = None
        self.cache: dict[int, tuple[QuantizedMatrix, QuantizedMatrix]] = {}
        self.persisted = False

    def _persist(self):
        if self.c.witness_root is None or not self.cache or self.session_id is None:
            return
        write_witness_cache(self.c.witness_root / self.session_id.hex(), self.c.profile, self.session_id,
                            self.c.manifest, self.c.commitments, self.c.weights_q, self.cache)
        self.persisted = True

    def handle(self, msg) -> tuple[list, bool]:
        """Replies to one decoded message and whether to close afterwards."""
        if self.session_id is None:
            if not isinstance(msg, Hello) or msg.role != Role.USER:
                raise ProtocolError("expected HELLO from a user")
            if msg.profile != self.c.profile:
                raise ProtocolError(f"profile {msg.profile.profile_id!r} not served", ErrorCode.PROFILE_MISMATCH)
            self.session_id = msg.session_id
            return [Hello(Role.CONTRIBUTOR, msg.session_id, self.c.profile),
                    ManifestMsg(self.c.manifest_body())], False

        if isinstance(msg, ActRequest):
            if msg.module_id in self.cache:
                raise ProtocolError(f"module {msg.module_id} already exchanged this session")
            X_q, D_q, delta = self.c.activation(msg.module_id, msg.x)
            self.cache[msg.module_id] = (X_q, D_q)
            self.persisted = False
            return [ActResponse(msg.module_id, D_q.entries, delta)], False

        if isinstance(msg, ProofRequest):
            ids = msg.module_ids or sorted(self.cache)
            missing = [i for i in ids if i not in self.cache]
            if missing:
                raise ProtocolError(f"no cached witness for modules {missing}")
            self._persist()
            proofs = []
            prove_ms = {}
            for mid in ids:
                t0 = time.perf_counter()
                pr = self.c.prove(self.session_id, mid, *self.cache[mid])
                prove_ms[mid] = (time.perf_counter() - t0) * 1e3
                proofs.append(pr.to_bytes())
            for mid in ids:
                del self.cache[mid]
            return [ProofBundle(proofs, prove_ms)], False

        if isinstance(msg, VerifyReportMsg):
            self.c.reports.append(msg.report)
            log.info("session %s: user reports %s", self.session_id.hex(), msg.report.get("overall"))
            return [], True

        raise ProtocolError(f"unexpected {MsgType(msg.TYPE).name} from user")

    def run(self, rfile: BinaryIO, send: Callable[[bytes], None]) -> None:
        """Serve frames from ``rfile`` until close; every failure ends in ERROR."""
        try:
            while True:
                frame = read_frame(rfile)
                if frame is None:
                    return
                replies, close = self.handle(decode_message(*frame))
                for r in replies:
                    send(encode_message(r))
                if close:
                    return
        except ProtocolError as e:
            self._error(send, e.code, str(e))
        except BudgetExceeded as e:
            self._error(send, ErrorCode.BUDGET_EXCEEDED, str(e))
        except OverflowBound as e:
            self._error(send, ErrorCode.OVERFLOW_BOUND, str(e))
        except (socket.timeout, ConnectionError):
            pass
        except WitnessMismatch as e:
            self._error(send, ErrorCode.INTERNAL, str(e))
        except Exception as e:  # never let a session take the server down
            log.exception("internal error in session")
            self._error(send, ErrorCode.INTERNAL, type(e).__name__)
        finally:
            if not self.persisted:
                try:
                    self._persist()
                except OSError:
                    log.exception("could not persist witness cache")

    @staticmethod
    def _error(send, code, message):
        try:
            send(encode_message(ErrorMsg(int(code), message)))
        except OSError:
            pass


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        self.request.settimeout(self.server.io_timeout)
        ContributorSession(self.server.contributor).run(self.rfile, self.request.sendall)


class ContributorServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, contributor: Contributor, io_timeout: float = 120.0):
        self.contributor = contributor
        self.io_timeout = io_timeout
        super().__init__(address, _Handler)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]


def _parse_addr(address) -> tuple[str, int]:
    if isinstance(address, str):
        host, _, port = address.rpartition(":")
        return host or "127.0.0.1", int(port)
    return address


def serve_contributor(address, manifest, weights, profile=DEFAULT_PROFILE, *, budget_limit=None,
                      state_dir=None, rng=None, witness_root=None, ready=None) -> None:
    """Blocking server loop for the CLI; ``ready`` is called with the bound address."""
    budget = None
    if budget_limit is not None or state_dir is None:
        budget = OpeningBudget(Path(state_dir) / "budget.json" if state_dir else None, budget_limit)
    contributor = Contributor(manifest, weights, profile, budget=budget, rng=rng,
                              witness_root=witness_root, state_dir=state_dir)
    with ContributorServer(_parse_addr(address), contributor) as server:
        log.info("contributor listening on %s:%d", *server.address)
        if ready is not None:
            ready(server.address)
        server.serve_forever()


def start_contributor(contributor: Contributor, address=("127.0.0.1", 0)) -> ContributorServer:
    """Run a server on a background thread; call ``shutdown()`` and ``server_close()`` when done."""
    server = ContributorServer(_parse_addr(address), contributor)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server
