"""Fiat-Shamir transcript with length-framed absorbs and chained challenges."""

from __future__ import annotations

from .field import DeploymentProfile

__all__ = ["Transcript", "LabelTooLong", "LABELS"]

# Every label the protocol absorbs or squeezes under.
LABELS = (
    b"zklora/v1",
    b"profile",
    b"manifest",
    b"commit/A",
    b"commit/B",
    b"x-digest",
    b"delta-digest",
    b"chal/c",
    b"chal/r",
    b"chal/s",
)


class LabelTooLong(ValueError):
    pass


def _len8(b: bytes) -> bytes:
    return len(b).to_bytes(8, "big")


class Transcript:
    """Running hash state shared (by reconstruction) between prover and verifier.

    The state starts as 32 zero bytes and immediately absorbs the protocol
    label ``zklora/v1`` with the session id as data.
    """

    def __init__(self, profile: DeploymentProfile, session_id: bytes = b""):
        self.profile = profile
        self.state = bytes(32)
        self.absorb(b"zklora/v1", session_id)

    def absorb(self, label: bytes, data: bytes) -> "Transcript":
        if not label:
            raise ValueError("label must be non-empty")
        if len(label) > 64:
            raise LabelTooLong(f"label of {len(label)} bytes")
        self.state = self.profile.hash(self.state + _len8(label) + label + _len8(data) + data)
        return self

    def challenge_vector(self, label: bytes, count: int) -> list[int]:
        """``count`` field elements from 512-bit hash outputs reduced mod p."""
        if count < 1:
            raise ValueError("count must be >= 1")
        h = self.profile.hash
        p = self.profile.p
        base = self.state + label
        out = []
        for i in range(count):
            ctr = i.to_bytes(8, "big")
            wide = h(base + ctr + b"\x00") + h(base + ctr + b"\x01")
            out.append(int.from_bytes(wide, "big") % p)
        self.absorb(label, b"")
        return out

    def fork(self) -> "Transcript":
        t = Transcript.__new__(Transcript)
        t.profile = self.profile
        t.state = self.state
        return t
