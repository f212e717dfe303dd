"""Deployment profile, scalar-field arithmetic and generator derivation."""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import asdict, dataclass
from typing import Sequence

import gmpy2

from .group import GROUP_ORDER, Point, hash_to_group

__all__ = [
    "DeploymentProfile",
    "DEFAULT_PROFILE",
    "ProfileMismatch",
    "OutOfRange",
    "NonCanonical",
    "PrimeField",
    "fe_from_signed",
    "fe_to_signed",
    "fe_encode",
    "fe_decode",
    "derive_generators",
    "clear_generator_cache",
]

SUPPORTED_GROUPS = {"ristretto255": GROUP_ORDER}
SUPPORTED_HASHES = {"sha256"}


class OutOfRange(ValueError):
    pass


class NonCanonical(ValueError):
    pass


class ProfileMismatch(ValueError):
    pass


@dataclass(frozen=True)
class DeploymentProfile:
    """Group, hash and fixed-point configuration shared by both parties."""

    profile_id: str
    group_id: str
    p: int
    hash_id: str
    scale_bits: int

    def __post_init__(self):
        if self.group_id not in SUPPORTED_GROUPS:
            raise ValueError(f"unsupported group {self.group_id!r}")
        if self.hash_id not in SUPPORTED_HASHES:
            raise ValueError(f"unsupported hash {self.hash_id!r}")
        if self.p != SUPPORTED_GROUPS[self.group_id]:
            raise ValueError("p must equal the order of the named group")
        if self.p <= 2**250 or not gmpy2.is_prime(self.p, 40):
            raise ValueError("p must be a prime above 2^250")
        if not 4 <= self.scale_bits <= 24:
            raise ValueError("scale_bits must lie in [4, 24]")
        if not self.profile_id or len(self.profile_id) > 64:
            raise ValueError("profile_id must be a short non-empty string")

    def hash(self, data: bytes) -> bytes:
        return hashlib.new(self.hash_id, data).digest()

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_dict(cls, d: dict) -> "DeploymentProfile":
        keys = {"profile_id", "group_id", "p", "hash_id", "scale_bits"}
        if set(d) != keys:
            raise ValueError(f"profile keys must be exactly {sorted(keys)}")
        return cls(**d)

    @classmethod
    def from_json(cls, data: bytes | str) -> "DeploymentProfile":
        return cls.from_dict(json.loads(data))

    def require_same(self, other: "DeploymentProfile") -> None:
        if self != other:
            raise ProfileMismatch(f"profile {other.profile_id!r} != {self.profile_id!r}")

    def with_scale_bits(self, f: int) -> "DeploymentProfile":
        return DeploymentProfile(f"r255-sha256-f{f}", self.group_id, self.p, self.hash_id, f)


DEFAULT_PROFILE = DeploymentProfile("r255-sha256-f12", "ristretto255", GROUP_ORDER, "sha256", 12)


def fe_from_signed(k: int, p: int) -> int:
    if abs(k) > (p - 1) // 2:
        raise OutOfRange(f"|{k}| exceeds (p-1)/2")
    return k % p


def fe_to_signed(e: int, p: int) -> int:
    return e if e <= (p - 1) // 2 else e - p


def fe_encode(e: int, p: int) -> bytes:
    if not 0 <= e < p:
        raise NonCanonical("field element out of [0, p)")
    return int(e).to_bytes(32, "little")


def fe_decode(data: bytes, p: int) -> int:
    if len(data) != 32:
        raise NonCanonical("field encoding must be 32 bytes")
    e = int.from_bytes(data, "little")
    if e >= p:
        raise NonCanonical("field encoding is not reduced")
    return e


class PrimeField:
    """Arithmetic on canonical residues (plain ints) modulo a prime."""

    def __init__(self, p: int):
        self.p = p

    def __repr__(self):
        return f"PrimeField({self.p:#x})"

    def add(self, a, b):
        return (a + b) % self.p

    def sub(self, a, b):
        return (a - b) % self.p

    def mul(self, a, b):
        return a * b % self.p

    def neg(self, a):
        return -a % self.p

    def inv(self, a):
        if a % self.p == 0:
            raise ZeroDivisionError("zero has no inverse")
        return pow(a, -1, self.p)

    def dot(self, xs: Sequence[int], ys: Sequence[int]) -> int:
        if len(xs) != len(ys):
            raise ValueError("length mismatch")
        return sum(x * y for x, y in zip(xs, ys)) % self.p

    def from_signed(self, k: int) -> int:
        return fe_from_signed(k, self.p)

    def to_signed(self, e: int) -> int:
        return fe_to_signed(e, self.p)

    def encode(self, e: int) -> bytes:
        return fe_encode(e, self.p)

    def decode(self, data: bytes) -> int:
        return fe_decode(data, self.p)

    def encode_vector(self, xs: Sequence[int]) -> bytes:
        return b"".join(fe_encode(x, self.p) for x in xs)

    def decode_vector(self, data: bytes, count: int) -> list[int]:
        if len(data) != 32 * count:
            raise NonCanonical("vector encoding has the wrong length")
        return [fe_decode(data[32 * i : 32 * i + 32], self.p) for i in range(count)]

    def random(self, rng) -> int:
        return rng.randrange(self.p)


# (profile_id, label) -> (generator list grown on demand, blinding generator)
_gen_cache: dict[tuple[str, bytes], tuple[list[Point], Point]] = {}
_gen_lock = threading.Lock()


def _seed(profile: DeploymentProfile, label: bytes, tail: bytes) -> bytes:
    return profile.profile_id.encode() + b"\x00" + label + b"\x00" + tail


def derive_generators(
    profile: DeploymentProfile, label: bytes, count: int
) -> tuple[list[Point], Point]:
    """Deterministic nothing-up-my-sleeve generators g_0..g_{count-1} and h."""
    if count < 1:
        raise ValueError("count must be >= 1")
    key = (profile.profile_id, bytes(label))
    with _gen_lock:
        if key not in _gen_cache:
            h = hash_to_group(_seed(profile, label, b"blind"), profile.hash_id)
            _gen_cache[key] = ([], h)
        gens, h = _gen_cache[key]
        while len(gens) < count:
            i = len(gens)
            gens.append(hash_to_group(_seed(profile, label, i.to_bytes(8, "big")), profile.hash_id))
        return gens[:count], h


def clear_generator_cache() -> None:
    """Forget derived generators (benchmarks time a cold derivation)."""
    with _gen_lock:
        _gen_cache.clear()
