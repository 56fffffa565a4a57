"""Consistent-hash ring, virtual-node tokens and quorum arithmetic."""

from __future__ import annotations

import bisect
import hashlib
import random
from dataclasses import dataclass

from .crypto import EntityId

RING_BITS = 128
RING_SIZE = 1 << RING_BITS

DEFAULT_VNODES = 8


class ConfigurationError(Exception):
    pass


def key_position(key: bytes) -> int:
    """Ring coordinate of a key: SHA-256 truncated to 128 bits."""
    return int.from_bytes(hashlib.sha256(key).digest()[:16], "big")


@dataclass(frozen=True, slots=True)
class Token:
    position: int
    owner: EntityId
    vnode_index: int


@dataclass(frozen=True)
class QuorumSpec:
    mode: str  # strong | eventual
    f: int
    n: int
    r: int
    w: int


def quorum_spec(mode: str, f: int) -> QuorumSpec:
    if f < 0:
        raise ConfigurationError("f must be >= 0")
    if mode == "strong":
        n, r, w = 3 * f + 1, 2 * f + 1, 2 * f + 1
    elif mode == "eventual":
        n, r, w = 2 * f + 1, f + 1, f + 1
    else:
        raise ConfigurationError(f"unknown mode {mode!r}")
    assert r + w >= n + f + 1 or mode == "eventual"
    assert r <= n - f and w <= n - f
    return QuorumSpec(mode, f, n, r, w)


class Ring:
    """Sorted token list with successor-walk replica placement."""

    def __init__(self, tokens: list[Token], replication_factor: int):
        if not tokens:
            raise ConfigurationError("ring needs at least one token")
        self.tokens = sorted(tokens, key=lambda t: t.position)
        positions = [t.position for t in self.tokens]
        if len(set(positions)) != len(positions):
            raise ConfigurationError("token positions must be unique")
        self._positions = positions
        self.replication_factor = replication_factor
        self._nodes = sorted({t.owner for t in self.tokens}, key=lambda e: e.index)
        if len(self._nodes) < replication_factor:
            raise ConfigurationError(
                f"need >= {replication_factor} distinct nodes, have {len(self._nodes)}")
        self._rset_cache: dict[bytes, list[EntityId]] = {}

    @classmethod
    def generate(cls, nodes: list[EntityId], replication_factor: int, seed: int,
                 vnodes: int = DEFAULT_VNODES) -> "Ring":
        rng = random.Random(seed ^ 0x5EED0_7)
        tokens: list[Token] = []
        used = set()
        for node in nodes:
            for v in range(vnodes):
                pos = rng.getrandbits(RING_BITS)
                while pos in used:
                    pos = rng.getrandbits(RING_BITS)
                used.add(pos)
                tokens.append(Token(pos, node, v))
        return cls(tokens, replication_factor)

    def nodes(self) -> list[EntityId]:
        return list(self._nodes)

    def tokens_of(self, node: EntityId) -> tuple[int, ...]:
        return tuple(t.position for t in self.tokens if t.owner == node)

    def successor_index(self, position: int) -> int:
        i = bisect.bisect_left(self._positions, position)
        return i % len(self.tokens)

    def replication_set(self, key: bytes) -> list[EntityId]:
        """The N distinct physical nodes responsible for this key, in walk order."""
        cached = self._rset_cache.get(key)
        if cached is None:
            cached = self.replication_set_at(key_position(key))
            if len(self._rset_cache) < 1_000_000:
                self._rset_cache[key] = cached
        return list(cached)

    def replication_set_at(self, position: int) -> list[EntityId]:
        n = self.replication_factor
        out: list[EntityId] = []
        seen = set()
        i = self.successor_index(position)
        count = len(self.tokens)
        for step in range(count):
            owner = self.tokens[(i + step) % count].owner
            if owner not in seen:
                seen.add(owner)
                out.append(owner)
                if len(out) == n:
                    break
        return out

    def owned_arcs(self, node: EntityId) -> list[tuple[int, int]]:
        """Half-open ring arcs (lo, hi] whose replication set contains ``node``.

        An arc is the span ending at a token; the arc's replicas are the
        distinct owners found by walking forward from that token.
        """
        arcs = []
        count = len(self.tokens)
        for i, tok in enumerate(self.tokens):
            lo = self.tokens[i - 1].position if count > 1 else (tok.position - 1) % RING_SIZE
            if node in self.replication_set_at(tok.position):
                arcs.append((lo, tok.position))
        return arcs

    def arc_replicas(self, arc: tuple[int, int]) -> list[EntityId]:
        return self.replication_set_at(arc[1])

    def all_arcs(self) -> list[tuple[int, int]]:
        count = len(self.tokens)
        return [((self.tokens[i - 1].position if count > 1 else
                  (self.tokens[i].position - 1) % RING_SIZE), self.tokens[i].position)
                for i in range(count)]


def position_in_arc(position: int, arc: tuple[int, int]) -> bool:
    lo, hi = arc
    if lo < hi:
        return lo < position <= hi
    return position > lo or position <= hi
