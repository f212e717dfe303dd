"""Row-wise Pedersen vector commitments to quantized weight matrices."""

from __future__ import annotations

import functools
import secrets
import struct
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .field import DeploymentProfile, clear_generator_cache, derive_generators
from .group import FixedBaseTable, InvalidEncoding, Point, msm
from .quantizer import QuantizedMatrix

__all__ = [
    "PedersenKey",
    "pedersen_key",
    "CommitmentSet",
    "Opening",
    "RowTooLong",
    "LengthMismatch",
    "commit_rows",
    "combine",
    "open_combination",
    "verify_opening",
    "weighted_rows",
    "clear_key_cache",
]

GENERATOR_LABEL = b"zklora/pedersen"


class RowTooLong(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PedersenKey:
    profile: DeploymentProfile
    generators: tuple[Point, ...]
    h: Point
    h_table: FixedBaseTable

    @property
    def L(self) -> int:
        return len(self.generators)


@functools.lru_cache(maxsize=16)
def pedersen_key(profile: DeploymentProfile, L: int) -> PedersenKey:
    """Commitment key with L vector generators; keys for smaller L are prefixes."""
    gens, h = derive_generators(profile, GENERATOR_LABEL, L)
    return PedersenKey(profile, tuple(gens), h, FixedBaseTable(h))


def clear_key_cache() -> None:
    pedersen_key.cache_clear()
    clear_generator_cache()


@dataclass(frozen=True, eq=False)
class CommitmentSet:
    """Commitments C_i = h^rho_i * prod_j g_j^{M_ij}, one per matrix row.

    ``blinders`` is only populated on the contributor side; ``public()`` and
    ``to_bytes()`` never carry it.
    """

    rows: int
    cols: int
    commitments: tuple[Point, ...]
    blinders: tuple[int, ...] | None = None

    def public(self) -> "CommitmentSet":
        return replace(self, blinders=None)

    @functools.cached_property
    def _encoded(self) -> bytes:
        return struct.pack(">II", self.rows, self.cols) + b"".join(c.encode() for c in self.commitments)

    def to_bytes(self) -> bytes:
        return self._encoded

    def hex(self) -> str:
        return self._encoded.hex()

    def digest(self, profile: DeploymentProfile) -> bytes:
        return profile.hash(self._encoded)

    @classmethod
    def from_bytes(cls, data: bytes) -> "CommitmentSet":
        if len(data) < 8:
            raise ValueError("commitment set too short")
        rows, cols = struct.unpack_from(">II", data)
        if len(data) != 8 + 32 * rows:
            raise ValueError("commitment set length disagrees with its shape")
        try:
            pts = tuple(Point.decode(data[8 + 32 * i: 40 + 32 * i]) for i in range(rows))
        except InvalidEncoding as e:
            raise ValueError(f"invalid commitment: {e}") from None
        return cls(rows, cols, pts)

    @classmethod
    def from_hex(cls, s: str) -> "CommitmentSet":
        return cls.from_bytes(bytes.fromhex(s))


@dataclass(frozen=True)
class Opening:
    w: tuple[int, ...]
    blinder: int


def commit_rows(M_q: QuantizedMatrix, key: PedersenKey, rng=None) -> CommitmentSet:
    """Commit to every row of M_q with a fresh uniform blinder.

    ``rng`` needs a ``randrange`` method; it defaults to the OS CSPRNG.
    Seeded generators are for tests only.
    """
    rows, cols = M_q.shape
    if cols > key.L:
        raise RowTooLong(f"rows of length {cols} exceed key length {key.L}")
    rng = rng or secrets.SystemRandom()
    p = key.profile.p
    gens = key.generators[:cols]
    commits = []
    blinders = []
    for row in M_q.entries.tolist():
        rho = rng.randrange(p)
        commits.append(msm(row, gens) + key.h_table.mul(rho))
        blinders.append(rho)
    return CommitmentSet(rows, cols, tuple(commits), tuple(blinders))


def combine(commits: Sequence[Point], coeffs: Sequence[int]) -> Point:
    if len(commits) != len(coeffs):
        raise LengthMismatch(f"{len(commits)} commitments vs {len(coeffs)} coefficients")
    return msm(coeffs, commits)


def weighted_rows(coeffs: Sequence[int], M: np.ndarray, p: int) -> list[int]:
    """coeffs^T · M over GF(p) for an integer matrix M."""
    if len(coeffs) != M.shape[0]:
        raise LengthMismatch("coefficient count differs from row count")
    if M.shape[1] == 0:
        return []
    acc = np.asarray(coeffs, dtype=object) @ M.astype(object)
    return [int(x) % p for x in acc]


def open_combination(M_q: QuantizedMatrix, blinders: Sequence[int], s: Sequence[int], p: int) -> Opening:
    if len(blinders) != M_q.rows:
        raise LengthMismatch("one blinder per row required")
    w = weighted_rows(s, M_q.entries, p)
    rho = sum(si * bi for si, bi in zip(s, blinders)) % p
    return Opening(tuple(w), rho)


def verify_opening(key: PedersenKey, combined: Point, opening: Opening) -> bool:
    n = len(opening.w)
    if n > key.L:
        return False
    return msm(opening.w, key.generators[:n]) + key.h_table.mul(opening.blinder) == combined
