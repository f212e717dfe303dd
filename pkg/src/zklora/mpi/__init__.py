"""Two-party inference: contributor server, user client, wire format, on-disk records."""

from .client import ConnectFailed, InferenceResult, UserSession, run_session, run_user_inference
from .records import (MissingWitness, load_user_context, offline_prove, offline_verify, proof_filename,
                      write_proofs, write_user_records, write_witness_cache)
from .reference import accumulated_error_bound, build_routes, forward, reference_exact, reference_quantized
from .server import Contributor, ContributorServer, ContributorSession, serve_contributor, start_contributor
from .wire import ErrorCode, MsgType, ProtocolError, RemoteError, Role

__all__ = [
    "ConnectFailed", "InferenceResult", "UserSession", "run_session", "run_user_inference",
    "MissingWitness", "load_user_context", "offline_prove", "offline_verify", "proof_filename",
    "write_proofs", "write_user_records", "write_witness_cache",
    "accumulated_error_bound", "build_routes", "forward", "reference_exact", "reference_quantized",
    "Contributor", "ContributorServer", "ContributorSession", "serve_contributor", "start_contributor",
    "ErrorCode", "MsgType", "ProtocolError", "RemoteError", "Role",
]
