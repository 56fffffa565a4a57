"""Identities, signatures, MAC tags, hybrid envelopes and operation counting.

Every byte that is signed or verified anywhere in the store flows through
:class:`CryptoService`. Four signature schemes are available:

* ``rsa2048``  -- RSA PKCS#1 v1.5 over SHA-256, seeded key generation.
* ``ecdsa-p256`` -- ECDSA over secp256r1 with deterministic (RFC 6979) signing.
* ``none``     -- a constant placeholder tag (measures algorithmic overhead only).
* ``sim``      -- registry-keyed HMAC stand-in; unforgeable within the harness
  and cheap enough for large simulation batteries.

All schemes are deterministic functions of the scenario seed so that traces
are bit-identical across repetitions.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass, field
from functools import lru_cache as _lru_cache

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec, padding, rsa
from cryptography.hazmat.primitives.asymmetric.utils import Prehashed

PK_SCHEMES = ("rsa2048", "ecdsa-p256", "none", "sim")

MAC_KEY_LEN = 16  # 128-bit pair keys
MAC_TAG_LEN = 32  # full HMAC-SHA256 output

DIR_CLIENT_TO_NODE = 0
DIR_NODE_TO_CLIENT = 1


class IdentityError(Exception):
    """Unknown entity or missing key material."""


# ---------------------------------------------------------------------------
# Canonical serialization: length-prefixed big-endian fields in declaration
# order. Digests and signatures must be bit-stable across modules, so every
# signed payload is assembled with these helpers.
# ---------------------------------------------------------------------------

def enc_bytes(b: bytes) -> bytes:
    return struct.pack(">I", len(b)) + b


def enc_str(s: str) -> bytes:
    return enc_bytes(s.encode("utf-8"))


def enc_u64(v: int) -> bytes:
    return struct.pack(">Q", v)


def enc_u32(v: int) -> bytes:
    return struct.pack(">I", v)


def enc_u8(v: int) -> bytes:
    return struct.pack(">B", v)


def digest(data: bytes) -> bytes:
    """SHA-256 of the given canonical serialization; 32 bytes."""
    return hashlib.sha256(data).digest()


@_lru_cache(maxsize=4096)
def _encode_entity(kind: str, index: int) -> bytes:
    return enc_str(kind) + enc_u32(index)


_KIND_CODE = {"node": 0, "client": 1, "admin": 2}


@dataclass(frozen=True, slots=True)
class EntityId:
    """A system entity: node, client, or the (singleton) administrator."""

    kind: str  # node | client | admin
    index: int

    def __str__(self) -> str:
        return f"{self.kind}:{self.index}"

    def __hash__(self) -> int:
        return self.index * 4 + _KIND_CODE.get(self.kind, 3)

    def encode(self) -> bytes:
        return _encode_entity(self.kind, self.index)

    @staticmethod
    def parse(s: str) -> "EntityId":
        kind, _, idx = s.partition(":")
        if kind not in ("node", "client", "admin"):
            raise IdentityError(f"bad entity kind in {s!r}")
        return EntityId(kind, int(idx) if idx else 0)


ADMIN = EntityId("admin", 0)


def node_id(i: int) -> EntityId:
    return EntityId("node", i)


def client_id(i: int) -> EntityId:
    return EntityId("client", i)


@dataclass(frozen=True, slots=True)
class PkSignature:
    scheme: str
    data: bytes

    def hex(self) -> str:
        return self.data.hex()


@dataclass(frozen=True, slots=True)
class MacTag:
    data: bytes


EMPTY_SIG = PkSignature("none", b"")


# ---------------------------------------------------------------------------
# Deterministic key generation
# ---------------------------------------------------------------------------

def _seed_int(master: bytes, *labels) -> int:
    h = hashlib.sha256(master)
    for lab in labels:
        h.update(b"|")
        h.update(lab if isinstance(lab, bytes) else str(lab).encode())
    return int.from_bytes(h.digest(), "big")


def _seed_bytes(master: bytes, *labels) -> bytes:
    return _seed_int(master, *labels).to_bytes(32, "big")


class _DetStream:
    """Deterministic byte stream for prime search (counter-mode SHA-256)."""

    def __init__(self, seed: bytes):
        self._seed = seed
        self._ctr = 0

    def getrandbits_bytes(self, nbytes: int) -> bytes:
        out = b""
        while len(out) < nbytes:
            out += hashlib.sha256(self._seed + struct.pack(">Q", self._ctr)).digest()
            self._ctr += 1
        return out[:nbytes]


_SMALL_PRIMES = [3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59,
                 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107, 109, 113, 127,
                 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191,
                 193, 197, 199, 211, 223, 227, 229, 233, 239, 241, 251]


def _is_probable_prime(n: int, stream: _DetStream, rounds: int = 24) -> bool:
    for p in _SMALL_PRIMES:
        if n % p == 0:
            return n == p
    d = n - 1
    r = 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for _ in range(rounds):
        a = int.from_bytes(stream.getrandbits_bytes(32), "big") % (n - 3) + 2
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = pow(x, 2, n)
            if x == n - 1:
                break
        else:
            return False
    return True


def _det_prime(stream: _DetStream, bits: int) -> int:
    nbytes = bits // 8
    while True:
        raw = bytearray(stream.getrandbits_bytes(nbytes))
        raw[0] |= 0xC0  # top two bits set: product has full length
        raw[-1] |= 0x01
        cand = int.from_bytes(bytes(raw), "big")
        if _is_probable_prime(cand, stream):
            return cand


def _det_rsa_key(seed: bytes) -> rsa.RSAPrivateKey:
    stream = _DetStream(seed)
    e = 65537
    while True:
        p = _det_prime(stream, 1024)
        if (p - 1) % e != 0:
            break
    while True:
        q = _det_prime(stream, 1024)
        if q != p and (q - 1) % e != 0:
            break
    n = p * q
    d = pow(e, -1, (p - 1) * (q - 1))
    numbers = rsa.RSAPrivateNumbers(
        p=p,
        q=q,
        d=d,
        dmp1=rsa.rsa_crt_dmp1(d, p),
        dmq1=rsa.rsa_crt_dmq1(d, q),
        iqmp=rsa.rsa_crt_iqmp(p, q),
        public_numbers=rsa.RSAPublicNumbers(e=e, n=n),
    )
    return numbers.private_key()


# ---------------------------------------------------------------------------
# Signature scheme backends
# ---------------------------------------------------------------------------

class _NoSignScheme:
    # "No-Sign": a base64-encoded single char stands in for every signature.
    name = "none"
    PLACEHOLDER = b"eA=="  # base64 of "x"

    def keygen(self, seed: bytes):
        return None, None

    def sign(self, priv, msg: bytes) -> bytes:
        return self.PLACEHOLDER

    def verify(self, pub, msg: bytes, sig: bytes) -> bool:
        return sig == self.PLACEHOLDER


class _SimScheme:
    """HMAC over a per-entity registry secret; an unforgeable test double."""

    name = "sim"

    def keygen(self, seed: bytes):
        secret = hashlib.sha256(b"simkey|" + seed).digest()
        return secret, secret

    def sign(self, priv, msg: bytes) -> bytes:
        return hmac.new(priv, msg, hashlib.sha256).digest()

    def verify(self, pub, msg: bytes, sig: bytes) -> bool:
        return hmac.compare_digest(hmac.new(pub, msg, hashlib.sha256).digest(), sig)


class _EcdsaScheme:
    name = "ecdsa-p256"
    _curve = ec.SECP256R1()
    _order = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551

    def keygen(self, seed: bytes):
        secret = _seed_int(seed, "ecdsa") % (self._order - 1) + 1
        priv = ec.derive_private_key(secret, self._curve)
        return priv, priv.public_key()

    def sign(self, priv, msg: bytes) -> bytes:
        dig = hashlib.sha256(msg).digest()
        algo = ec.ECDSA(Prehashed(hashes.SHA256()), deterministic_signing=True)
        return priv.sign(dig, algo)

    def verify(self, pub, msg: bytes, sig: bytes) -> bool:
        dig = hashlib.sha256(msg).digest()
        try:
            pub.verify(sig, dig, ec.ECDSA(Prehashed(hashes.SHA256())))
            return True
        except Exception:
            return False


class _RsaScheme:
    name = "rsa2048"
    _pad = padding.PKCS1v15()

    def keygen(self, seed: bytes):
        priv = _det_rsa_key(seed)
        return priv, priv.public_key()

    def sign(self, priv, msg: bytes) -> bytes:
        return priv.sign(msg, self._pad, hashes.SHA256())

    def verify(self, pub, msg: bytes, sig: bytes) -> bool:
        try:
            pub.verify(sig, msg, self._pad, hashes.SHA256())
            return True
        except Exception:
            return False


_SCHEMES = {
    "none": _NoSignScheme(),
    "sim": _SimScheme(),
    "ecdsa-p256": _EcdsaScheme(),
    "rsa2048": _RsaScheme(),
}


def scheme_by_name(name: str):
    try:
        return _SCHEMES[name]
    except KeyError:
        raise IdentityError(f"unknown signature scheme {name!r}") from None


# ---------------------------------------------------------------------------
# Key registry
# ---------------------------------------------------------------------------

class KeyRegistry:
    """Pre-provisioned key material for one scenario.

    Holds a key pair per entity, a 128-bit symmetric key per (node, client)
    pair, and the client ACL. Read-only after scenario setup.
    """

    def __init__(self, scheme_name: str):
        self.scheme_name = scheme_name
        self._scheme = scheme_by_name(scheme_name)
        self._priv: dict[EntityId, object] = {}
        self._pub: dict[EntityId, object] = {}
        self._pair: dict[tuple[int, int], bytes] = {}
        self._revoked: set[EntityId] = set()
        self.node_count = 0
        self.client_count = 0

    @classmethod
    def build(cls, scheme_name: str, node_count: int, client_count: int,
              seed: int, with_pair_keys: bool = True) -> "KeyRegistry":
        reg = cls(scheme_name)
        master = hashlib.sha256(b"byzkv-keys|" + str(seed).encode()).digest()
        reg.node_count = node_count
        reg.client_count = client_count
        for ent in [ADMIN] + [node_id(i) for i in range(node_count)] + \
                   [client_id(i) for i in range(client_count)]:
            priv, pub = reg._scheme.keygen(_seed_bytes(master, ent.kind, ent.index))
            reg._priv[ent] = priv
            reg._pub[ent] = pub
        if with_pair_keys:
            for n in range(node_count):
                for c in range(client_count):
                    reg._pair[(n, c)] = _seed_bytes(master, "pair", n, c)[:MAC_KEY_LEN]
        return reg

    def has_entity(self, ent: EntityId) -> bool:
        return ent in self._pub

    def private_key(self, ent: EntityId):
        if ent not in self._priv:
            raise IdentityError(f"no key pair for {ent}")
        return self._priv[ent]

    def public_key(self, ent: EntityId):
        if ent not in self._pub:
            raise IdentityError(f"no key pair for {ent}")
        return self._pub[ent]

    def pair_key(self, node: EntityId, client: EntityId) -> bytes:
        """Shared symmetric key; identical when looked up from either side."""
        if node.kind != "node" or client.kind != "client":
            raise IdentityError(f"no pair key between {node} and {client}")
        key = self._pair.get((node.index, client.index))
        if key is None:
            raise IdentityError(f"no pair key for ({node}, {client})")
        return key

    def has_pair_key(self, node: EntityId, client: EntityId) -> bool:
        return (node.index, client.index) in self._pair

    def drop_pair_key(self, node: EntityId, client: EntityId) -> None:
        # Test hook: models a client that has not learned a new node yet.
        self._pair.pop((node.index, client.index), None)

    def revoke(self, ent: EntityId) -> None:
        self._revoked.add(ent)

    def is_authorized(self, client: EntityId) -> bool:
        return client.kind == "client" and client in self._pub and client not in self._revoked

    def pubkey_dump(self) -> list[tuple[str, str, str]]:
        """(entity, scheme, hex material) rows for trace headers."""
        rows = []
        for ent in sorted(self._pub, key=lambda e: (e.kind, e.index)):
            pub = self._pub[ent]
            rows.append((str(ent), self.scheme_name, _pub_to_hex(self.scheme_name, pub)))
        return rows

    def pairkey_dump(self) -> list[tuple[int, int, str]]:
        return [(n, c, self._pair[(n, c)].hex()) for (n, c) in sorted(self._pair)]


def _pub_to_hex(scheme_name: str, pub) -> str:
    if scheme_name in ("none",):
        return ""
    if scheme_name == "sim":
        return pub.hex()
    from cryptography.hazmat.primitives import serialization
    der = pub.public_bytes(serialization.Encoding.DER,
                           serialization.PublicFormat.SubjectPublicKeyInfo)
    return der.hex()


def pub_from_hex(scheme_name: str, hexstr: str):
    if scheme_name == "none":
        return None
    if scheme_name == "sim":
        return bytes.fromhex(hexstr)
    from cryptography.hazmat.primitives import serialization
    return serialization.load_der_public_key(bytes.fromhex(hexstr))


# ---------------------------------------------------------------------------
# Counters
# ---------------------------------------------------------------------------

@dataclass
class OpCounts:
    pk_signs: int = 0
    pk_verifies: int = 0
    mac_signs: int = 0
    mac_verifies: int = 0

    def copy(self) -> "OpCounts":
        return OpCounts(self.pk_signs, self.pk_verifies, self.mac_signs, self.mac_verifies)

    def sub(self, other: "OpCounts") -> "OpCounts":
        return OpCounts(self.pk_signs - other.pk_signs,
                        self.pk_verifies - other.pk_verifies,
                        self.mac_signs - other.mac_signs,
                        self.mac_verifies - other.mac_verifies)

    def add(self, other: "OpCounts") -> None:
        self.pk_signs += other.pk_signs
        self.pk_verifies += other.pk_verifies
        self.mac_signs += other.mac_signs
        self.mac_verifies += other.mac_verifies

    def total(self) -> int:
        return self.pk_signs + self.pk_verifies + self.mac_signs + self.mac_verifies


class CryptoCounters:
    """Per-entity monotone operation counters (the Tables 1-3 instrumentation)."""

    def __init__(self):
        self._by_entity: dict[EntityId, OpCounts] = {}

    def bump(self, ent: EntityId, op: str) -> None:
        counts = self._by_entity.get(ent)
        if counts is None:
            counts = self._by_entity[ent] = OpCounts()
        setattr(counts, op, getattr(counts, op) + 1)

    def for_entity(self, ent: EntityId) -> OpCounts:
        return self._by_entity.get(ent, OpCounts()).copy()

    def snapshot(self) -> dict[EntityId, OpCounts]:
        return {ent: c.copy() for ent, c in self._by_entity.items()}

    def csv_rows(self) -> list[str]:
        rows = ["entity,pk_signs,pk_verifies,mac_signs,mac_verifies"]
        for ent in sorted(self._by_entity, key=lambda e: (e.kind, e.index)):
            c = self._by_entity[ent]
            rows.append(f"{ent},{c.pk_signs},{c.pk_verifies},{c.mac_signs},{c.mac_verifies}")
        return rows


def counter_delta(after: dict[EntityId, OpCounts],
                  before: dict[EntityId, OpCounts]) -> dict[EntityId, OpCounts]:
    out = {}
    for ent, counts in after.items():
        prev = before.get(ent, OpCounts())
        d = counts.sub(prev)
        if d.total():
            out[ent] = d
    return out


# ---------------------------------------------------------------------------
# Crypto cost model (simulated per-op delays, criterion: pk-sign >> mac-sign)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CryptoDelays:
    pk_sign_us: int
    pk_verify_us: int
    mac_sign_us: int = 2
    mac_verify_us: int = 2


DEFAULT_DELAYS = {
    "rsa2048": CryptoDelays(pk_sign_us=1700, pk_verify_us=75),
    "ecdsa-p256": CryptoDelays(pk_sign_us=75, pk_verify_us=150),
    "none": CryptoDelays(pk_sign_us=0, pk_verify_us=0, mac_sign_us=0, mac_verify_us=0),
    "sim": CryptoDelays(pk_sign_us=0, pk_verify_us=0, mac_sign_us=0, mac_verify_us=0),
}


# ---------------------------------------------------------------------------
# Hybrid envelope
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class HybridEnvelope:
    """One public-key-signed payload covered by per-replica MAC tags.

    ``mac_vector`` holds one entry per replication-set node over the payload
    digest; ``vector_macs`` holds, per node, a tag over the serialized vector
    so a proxy corrupting sibling entries is detected.
    """

    payload_digest: bytes
    pk_sig: PkSignature | None
    client: EntityId
    mac_vector: tuple[tuple[int, MacTag], ...]
    vector_macs: tuple[tuple[int, MacTag], ...]
    fallback: bool = False

    def entry_for(self, node: EntityId) -> MacTag | None:
        for idx, tag in self.mac_vector:
            if idx == node.index:
                return tag
        return None

    def vector_mac_for(self, node: EntityId) -> MacTag | None:
        for idx, tag in self.vector_macs:
            if idx == node.index:
                return tag
        return None


def serialize_mac_vector(vec: tuple[tuple[int, MacTag], ...]) -> bytes:
    out = [enc_u32(len(vec))]
    for idx, tag in vec:
        out.append(enc_u32(idx))
        out.append(enc_bytes(tag.data))
    return b"".join(out)


# ---------------------------------------------------------------------------
# The service facade
# ---------------------------------------------------------------------------

class CryptoService:
    """Counting, delay-modelling wrapper over a registry-backed scheme.

    One logical MAC authentication unit per (node, client) envelope -- the
    entry tag plus the vector-integrity tag are produced and checked under
    the same pair key and counted once, matching the per-node tag accounting
    of the cost tables.
    """

    def __init__(self, registry: KeyRegistry, counters: CryptoCounters | None = None,
                 delays: CryptoDelays | None = None, keep_ledger: bool = False):
        self.registry = registry
        self.counters = counters if counters is not None else CryptoCounters()
        self.scheme = scheme_by_name(registry.scheme_name)
        self.delays = delays if delays is not None else DEFAULT_DELAYS[registry.scheme_name]
        self.delay_hook = None  # callable(entity, micros) wired by the simulator
        self._ledger: set[tuple[str, bytes]] | None = set() if keep_ledger else None

    # -- public key path ----------------------------------------------------

    def pk_sign(self, signer: EntityId, msg: bytes) -> PkSignature:
        priv = self.registry.private_key(signer)
        sig = self.scheme.sign(priv, msg)
        self.counters.bump(signer, "pk_signs")
        self._spend(signer, self.delays.pk_sign_us)
        if self._ledger is not None:
            self._ledger.add((str(signer), digest(msg)))
        return PkSignature(self.registry.scheme_name, sig)

    def pk_verify(self, verifier: EntityId, signer: EntityId, msg: bytes,
                  sig: PkSignature) -> bool:
        self.counters.bump(verifier, "pk_verifies")
        self._spend(verifier, self.delays.pk_verify_us)
        if sig.scheme != self.registry.scheme_name:
            return False
        if not self.registry.has_entity(signer):
            return False
        pub = self.registry.public_key(signer)
        return self.scheme.verify(pub, msg, sig.data)

    # -- MAC path -----------------------------------------------------------

    def _mac_bytes(self, key: bytes, direction: int, node: EntityId,
                   client: EntityId, msg: bytes) -> bytes:
        preamble = enc_u8(direction) + node.encode() + client.encode()
        return hmac.new(key, preamble + msg, hashlib.sha256).digest()

    def mac_sign(self, node: EntityId, client: EntityId, msg: bytes) -> MacTag:
        """Node-to-client MAC tag (acks, read answers)."""
        key = self.registry.pair_key(node, client)
        self.counters.bump(node, "mac_signs")
        self._spend(node, self.delays.mac_sign_us)
        return MacTag(self._mac_bytes(key, DIR_NODE_TO_CLIENT, node, client, msg))

    def mac_verify(self, verifier: EntityId, node: EntityId, client: EntityId,
                   msg: bytes, tag: MacTag,
                   direction: int = DIR_NODE_TO_CLIENT) -> bool:
        key = self.registry.pair_key(node, client)
        self.counters.bump(verifier, "mac_verifies")
        self._spend(verifier, self.delays.mac_verify_us)
        want = self._mac_bytes(key, direction, node, client, msg)
        return hmac.compare_digest(want, tag.data)

    # -- hybrid envelope ----------------------------------------------------

    def build_hybrid(self, client: EntityId, replica_set: list[EntityId],
                     payload: bytes, pk_sig: PkSignature | None = None) -> HybridEnvelope:
        """Authenticate ``payload`` to every replica with one MAC unit each.

        When ``pk_sig`` is None the payload is public-key signed here (the
        key-value flow); column writes pass their pre-signed bundle instead.
        Missing any pair key falls back to a pk-only envelope.
        """
        if not replica_set:
            raise ValueError("replica set must be non-empty")
        if pk_sig is None:
            pk_sig = self.pk_sign(client, payload)
        pay_digest = digest(payload)
        if not all(self.registry.has_pair_key(n, client) for n in replica_set):
            return HybridEnvelope(pay_digest, pk_sig, client, (), (), fallback=True)
        vector = []
        for n in replica_set:
            key = self.registry.pair_key(n, client)
            vector.append((n.index, MacTag(self._mac_bytes(key, DIR_CLIENT_TO_NODE,
                                                           n, client, pay_digest))))
        vector = tuple(vector)
        vec_bytes = serialize_mac_vector(vector)
        vmacs = []
        for n in replica_set:
            key = self.registry.pair_key(n, client)
            vmacs.append((n.index, MacTag(self._mac_bytes(key, DIR_CLIENT_TO_NODE,
                                                          n, client, vec_bytes))))
            # entry + vector tag form one authentication unit per node
            self.counters.bump(client, "mac_signs")
            self._spend(client, self.delays.mac_sign_us)
        return HybridEnvelope(pay_digest, pk_sig, client, vector, tuple(vmacs))

    def verify_hybrid_at_node(self, node: EntityId, env: HybridEnvelope,
                              payload: bytes) -> str:
        """Returns 'mac' on MAC-unit acceptance, 'pk-fallback' when the unit is
        unusable (caller must pk-verify the payload signatures), 'mismatch'
        when the payload does not match the enveloped digest."""
        if digest(payload) != env.payload_digest:
            return "mismatch"
        if env.fallback or not env.mac_vector:
            return "pk-fallback"
        entry = env.entry_for(node)
        vmac = env.vector_mac_for(node)
        if entry is None or vmac is None or not self.registry.has_pair_key(node, env.client):
            return "pk-fallback"
        key = self.registry.pair_key(node, env.client)
        self.counters.bump(node, "mac_verifies")
        self._spend(node, self.delays.mac_verify_us)
        vec_ok = hmac.compare_digest(
            self._mac_bytes(key, DIR_CLIENT_TO_NODE, node, env.client,
                            serialize_mac_vector(env.mac_vector)),
            vmac.data)
        if vec_ok:
            entry_ok = hmac.compare_digest(
                self._mac_bytes(key, DIR_CLIENT_TO_NODE, node, env.client,
                                env.payload_digest),
                entry.data)
            if entry_ok:
                return "mac"
        return "pk-fallback"

    # -- test-harness hooks ---------------------------------------------------

    def ledger_contains(self, signer: EntityId, msg: bytes) -> bool:
        if self._ledger is None:
            raise RuntimeError("ledger not enabled")
        return (str(signer), digest(msg)) in self._ledger

    def _spend(self, ent: EntityId, micros: int) -> None:
        if self.delay_hook is not None and micros:
            self.delay_hook(ent, micros)
