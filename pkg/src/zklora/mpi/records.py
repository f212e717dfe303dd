"""On-disk session artifacts and the offline prove/verify paths.

Contributor witness cache (private)::

    session.json   session id, profile, manifest, commitments + blinders
    witness.zklt   X_q.<id>, delta_q.<id>
    weights.zklt   A_q.<id>, B_q.<id>

User activation records (public data only)::

    session.json   session id, profile, manifest, public commitments
    activations.zklt   X_q.<id>, delta_q.<id>

Proof directories hold one ``module_<id>.zklp`` file per module.
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path
from typing import Mapping

from ..commitments import CommitmentSet, pedersen_key
from ..field import DeploymentProfile
from ..lora_proof import (CorruptProofFile, LoraProof, OpeningBudget, VerificationReport, VerifierContext,
                          prove_module, verify_bundle)
from ..quantizer import QuantizedMatrix
from ..tensorio import LoraManifest, read_tensors, write_json, write_tensors

__all__ = [
    "MissingWitness",
    "proof_filename",
    "write_witness_cache",
    "write_user_records",
    "load_user_context",
    "write_proofs",
    "offline_prove",
    "offline_verify",
]


class MissingWitness(FileNotFoundError):
    pass


def proof_filename(module_id: int) -> str:
    return f"module_{module_id:04d}.zklp"


def write_witness_cache(path, profile: DeploymentProfile, session_id: bytes, manifest: LoraManifest,
                        commitments: Mapping[int, tuple[CommitmentSet, CommitmentSet]],
                        weights_q: Mapping[int, tuple[QuantizedMatrix, QuantizedMatrix]],
                        witnesses: Mapping[int, tuple[QuantizedMatrix, QuantizedMatrix]]) -> Path:
    path = Path(path)
    ids = sorted(witnesses)
    meta = {
        "session_id": session_id.hex(),
        "profile": profile.to_dict(),
        "manifest": manifest.to_dict(),
        "modules": ids,
        "commitments": {
            str(mid): {
                "A": commitments[mid][0].hex(),
                "B": commitments[mid][1].hex(),
                "blinders_A": [format(b, "x") for b in commitments[mid][0].blinders],
                "blinders_B": [format(b, "x") for b in commitments[mid][1].blinders],
            }
            for mid in ids
        },
    }
    wit = {}
    secret = {}
    for mid in ids:
        wit[f"X_q.{mid}"], wit[f"delta_q.{mid}"] = witnesses[mid][0].entries, witnesses[mid][1].entries
        secret[f"A_q.{mid}"], secret[f"B_q.{mid}"] = weights_q[mid][0].entries, weights_q[mid][1].entries
    write_tensors(path / "witness.zklt", wit)
    write_tensors(path / "weights.zklt", secret)
    write_json(path / "session.json", meta)
    return path


def write_user_records(path, profile: DeploymentProfile, session_id: bytes, manifest: LoraManifest,
                       commitments: Mapping[int, tuple[CommitmentSet, CommitmentSet]],
                       witnesses: Mapping[int, tuple[QuantizedMatrix, QuantizedMatrix]]) -> Path:
    path = Path(path)
    meta = {
        "session_id": session_id.hex(),
        "profile": profile.to_dict(),
        "manifest": manifest.to_dict(),
        "commitments": {str(mid): {"A": a.hex(), "B": b.hex()} for mid, (a, b) in commitments.items()},
    }
    acts = {}
    for mid, (xq, dq) in witnesses.items():
        acts[f"X_q.{mid}"], acts[f"delta_q.{mid}"] = xq.entries, dq.entries
    write_tensors(path / "activations.zklt", acts)
    write_json(path / "session.json", meta)
    return path


def load_user_context(path) -> VerifierContext:
    path = Path(path)
    try:
        meta = json.loads((path / "session.json").read_text())
        acts = read_tensors(path / "activations.zklt")
    except FileNotFoundError as e:
        raise MissingWitness(str(e)) from None
    profile = DeploymentProfile.from_dict(meta["profile"])
    manifest = LoraManifest.from_dict(meta["manifest"])
    commitments = {int(k): (CommitmentSet.from_hex(v["A"]), CommitmentSet.from_hex(v["B"]))
                   for k, v in meta["commitments"].items()}
    witnesses = {}
    for mod in manifest.modules:
        mid = mod.module_id
        if f"X_q.{mid}" in acts:
            witnesses[mid] = (QuantizedMatrix(acts[f"X_q.{mid}"], 1), QuantizedMatrix(acts[f"delta_q.{mid}"], 3))
    return VerifierContext(profile, pedersen_key(profile, manifest.max_dim), manifest,
                           bytes.fromhex(meta["session_id"]), commitments, witnesses)


def write_proofs(path, proofs) -> list[Path]:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    out = []
    for pr in proofs:
        p = path / proof_filename(pr.header.module_id)
        pr.write(p)
        out.append(p)
    return out


def offline_prove(witness_dir, out_dir, budget: OpeningBudget | None = None) -> list[Path]:
    """Re-create the proofs of a cached contributor session.

    Blinders come from the cache, so the files equal the ones streamed
    online.  Re-proving a session reveals nothing new (same challenges), so
    no budget is charged unless one is passed.
    """
    witness_dir = Path(witness_dir)
    try:
        meta = json.loads((witness_dir / "session.json").read_text())
        wit = read_tensors(witness_dir / "witness.zklt")
        secret = read_tensors(witness_dir / "weights.zklt")
    except FileNotFoundError as e:
        raise MissingWitness(str(e)) from None
    profile = DeploymentProfile.from_dict(meta["profile"])
    manifest = LoraManifest.from_dict(meta["manifest"])
    session_id = bytes.fromhex(meta["session_id"])
    proofs = []
    for mid in meta["modules"]:
        mod = manifest.module(mid)
        c = meta["commitments"][str(mid)]
        ca = replace(CommitmentSet.from_hex(c["A"]), blinders=tuple(int(b, 16) for b in c["blinders_A"]))
        cb = replace(CommitmentSet.from_hex(c["B"]), blinders=tuple(int(b, 16) for b in c["blinders_B"]))
        try:
            A_q = QuantizedMatrix(secret[f"A_q.{mid}"], 1)
            B_q = QuantizedMatrix(secret[f"B_q.{mid}"], 1)
            X_q = QuantizedMatrix(wit[f"X_q.{mid}"], 1)
            D_q = QuantizedMatrix(wit[f"delta_q.{mid}"], 3)
        except KeyError as e:
            raise MissingWitness(f"witness cache lacks {e}") from None
        proofs.append(prove_module(mod, A_q, B_q, ca, cb, X_q, D_q, profile, session_id, budget))
    return write_proofs(out_dir, proofs)


def offline_verify(proof_dir, session_dir) -> VerificationReport:
    """Verify a directory of proof files against the user's activation records."""
    ctx = load_user_context(session_dir)
    proofs = []
    for f in sorted(Path(proof_dir).glob("*.zklp")):
        try:
            proofs.append(LoraProof.read(f, ctx.profile.p))
        except CorruptProofFile:
            proofs.append(None)
    return verify_bundle(proofs, ctx)
