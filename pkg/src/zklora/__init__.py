"""Verifiable LoRA inference: a contributor proves that the deltas it returned
were computed from the adapter weights it committed to, without revealing them.
"""

from .commitments import CommitmentSet, commit_rows, pedersen_key
from .field import DEFAULT_PROFILE, DeploymentProfile, PrimeField
from .lora_proof import (FailureReason, LoraProof, OpeningBudget, VerificationReport, VerifierContext,
                         prove_module, verify_bundle, verify_module)
from .quantizer import QuantizedMatrix, delta_exact, dequantize, quantize
from .tensorio import LoraManifest, LoraModule, LoraWeights, ModelConfig, gen_synthetic
from .transcript import Transcript

__version__ = "0.1.0"

__all__ = [
    "CommitmentSet", "commit_rows", "pedersen_key",
    "DEFAULT_PROFILE", "DeploymentProfile", "PrimeField",
    "FailureReason", "LoraProof", "OpeningBudget", "VerificationReport", "VerifierContext",
    "prove_module", "verify_bundle", "verify_module",
    "QuantizedMatrix", "delta_exact", "dequantize", "quantize",
    "LoraManifest", "LoraModule", "LoraWeights", "ModelConfig", "gen_synthetic",
    "Transcript",
]
