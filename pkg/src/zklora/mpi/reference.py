"""Forward pass over the slot-chain base model, plus single-process references.

The distributed run and the references share :func:`forward`; only the LoRA
hook differs.  ``reference_exact`` adds B·A·x in float64,
``reference_quantized`` reproduces the contributor's integer pipeline locally,
and :func:`accumulated_error_bound` bounds the gap between the distributed
outputs and ``reference_exact``.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from ..quantizer import delta_exact, dequantize, quantization_error_bound, quantize
from ..tensorio import LoraManifest, LoraWeights, ModelConfig

__all__ = [
    "build_routes",
    "forward",
    "reference_exact",
    "reference_quantized",
    "accumulated_error_bound",
]

Hook = Callable[[str, np.ndarray], "np.ndarray | None"]

_U64 = 2.0**-53
_U32 = 2.0**-24


def build_routes(config: ModelConfig, manifest: LoraManifest) -> dict[str, int | None]:
    """target path -> module_id for remote slots, None for local ones."""
    manifest.validate(config)
    remote = manifest.by_target()
    return {path: (remote[path].module_id if path in remote else None) for path, _ in config.slots()}


def forward(config: ModelConfig, tensors: Mapping[str, np.ndarray], X, hook: Hook | None = None) -> np.ndarray:
    x = np.asarray(X, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != config.in_dim:
        raise ValueError(f"input must be {config.in_dim} x m, got {x.shape}")
    last = len(config.layers) - 1
    for li, layer in enumerate(config.layers):
        for slot in layer:
            h = tensors[slot.weight].astype(np.float64) @ x
            if hook is not None:
                delta = hook(f"{li}.{slot.name}", x)
                if delta is not None:
                    h = h + delta
            x = h
        if config.activation == "relu" and li != last:
            x = np.maximum(x, 0.0)
    return x


def reference_exact(config, tensors, manifest: LoraManifest, weights: Mapping[int, LoraWeights], X) -> np.ndarray:
    targets = manifest.by_target()

    def hook(path, x):
        mod = targets.get(path)
        if mod is None:
            return None
        w = weights[mod.module_id]
        return w.B.astype(np.float64) @ (w.A.astype(np.float64) @ x)

    return forward(config, tensors, X, hook)


def reference_quantized(config, tensors, manifest: LoraManifest, weights: Mapping[int, LoraWeights], X, f: int):
    """Local replay of the distributed integer pipeline.

    Returns (outputs, {module_id: delta_q entries}).
    """
    targets = manifest.by_target()
    deltas = {}

    def hook(path, x):
        mod = targets.get(path)
        if mod is None:
            return None
        w = weights[mod.module_id]
        dq = delta_exact(quantize(w.A, f), quantize(w.B, f), quantize(x.astype(np.float32), f))
        deltas[mod.module_id] = dq.entries
        return dequantize(dq, f).astype(np.float32).astype(np.float64)

    return forward(config, tensors, X, hook), deltas


def _gamma(k: int) -> float:
    return k * _U64 / (1 - k * _U64)


def _inf_norm(M: np.ndarray) -> float:
    return float(np.abs(M).sum(axis=1).max()) if M.size else 0.0


def accumulated_error_bound(config, tensors, manifest: LoraManifest, weights: Mapping[int, LoraWeights], X,
                            f: int) -> float:
    """Sup-norm bound on distributed outputs minus ``reference_exact``.

    Propagates slot by slot: the incoming error through W and B·A (inf-norm),
    quantization error of the remote delta, the f32 roundings on the wire, and
    float64 rounding of both runs.  ReLU does not expand the error.
    """
    targets = manifest.by_target()
    e = 0.0
    x = np.asarray(X, dtype=np.float64)
    last = len(config.layers) - 1
    for li, layer in enumerate(config.layers):
        for slot in layer:
            W = tensors[slot.weight].astype(np.float64)
            n = slot.n
            xmax = float(np.abs(x).max()) if x.size else 0.0
            nw = _inf_norm(W)
            h = W @ x
            e_new = nw * e + _gamma(n) * nw * (2 * xmax + e)
            mod = targets.get(f"{li}.{slot.name}")
            if mod is not None:
                w = weights[mod.module_id]
                A = w.A.astype(np.float64)
                B = w.B.astype(np.float64)
                x32 = x.astype(np.float32)
                dq = delta_exact(quantize(w.A, f), quantize(w.B, f), quantize(x32, f))
                deq = dequantize(dq, f)
                dmax = float(np.abs(deq).max()) if deq.size else 0.0
                nba = _inf_norm(B @ A)
                nbaa = _inf_norm(np.abs(B) @ np.abs(A))
                e_new += quantization_error_bound(float(np.abs(A).max()), float(np.abs(B).max()),
                                                  float(np.abs(x32).max()), n, mod.r, f)
                e_new += _U64 * dmax + _U32 * dmax * (1 + _U64)
                e_new += nba * _U32 * xmax + nba * e
                e_new += (_gamma(n) + _gamma(mod.r) + _gamma(n) * _gamma(mod.r)) * nbaa * (xmax + e)
                h = h + deq.astype(np.float32).astype(np.float64)
            hmax = float(np.abs(h).max()) if h.size else 0.0
            e_new += _U64 * (2 * hmax + e_new)
            e = e_new
            x = h
        if config.activation == "relu" and li != last:
            x = np.maximum(x, 0.0)
    return e
