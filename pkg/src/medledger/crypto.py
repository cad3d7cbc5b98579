"""Cryptographic kernel: identities, signatures, digests, and the hybrid
encryption envelope protecting record payloads.

An identity is a 64-byte public id: a 32-byte Ed25519 verify key followed by
a 32-byte X25519 encryption key, both derived deterministically from one
32-byte seed. Signing uses Ed25519; content keys are wrapped per recipient
with ephemeral-static X25519 + HKDF-SHA256 + AES-256-GCM; payloads are
AES-256-GCM under a fresh content key; digests are SHA-256. The primitive
names are recorded in MANIFEST, which is embedded in every serialized
artifact so byte streams are self-describing.

All randomness is drawn from an injectable ``random.Random``; passing None
falls back to the operating system RNG. Seeded generators make sealing fully
reproducible, which the simulator and the test suite rely on.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass
from functools import cached_property

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.hashes import SHA256
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .encoding import DecodeError, Reader, enc_bytes, enc_u64
from .errors import CryptoError, FidelityError, NoWrappedKeyError

SEED_LEN = 32
KEY_LEN = 32
NONCE_LEN = 12
DIGEST_LEN = 32
SIGNATURE_LEN = 64
PUBLIC_ID_LEN = 64  # ed25519 verify key || x25519 encryption key

ZERO_DIGEST = b"\x00" * DIGEST_LEN

MANIFEST = {
    "format": "medledger/1",
    "signature": "ed25519",
    "key_exchange": "x25519-hkdf-sha256",
    "aead": "aes-256-gcm",
    "hash": "sha-256",
}

_BOX_SEED_TAG = b"medledger/v1/box-seed"
_WRAP_INFO_TAG = b"medledger/v1/wrap"


def manifest_bytes() -> bytes:
    return json.dumps(MANIFEST, sort_keys=True, separators=(",", ":")).encode("ascii")


def digest(data: bytes) -> bytes:
    """SHA-256 digest; 32 bytes, deterministic."""
    return hashlib.sha256(data).digest()


def _rand_bytes(rng: random.Random | None, n: int) -> bytes:
    if rng is None:
        rng = random.SystemRandom()
    return rng.randbytes(n)


@dataclass(frozen=True)
class KeyPair:
    """Identity keypair. The secret is the 32-byte seed and never appears in
    any ledger artifact; the 64-byte public_id is the on-ledger identity."""

    secret: bytes

    def __post_init__(self):
        if len(self.secret) != SEED_LEN:
            raise CryptoError("seed must be 32 bytes")

    @cached_property
    def _sign_key(self) -> Ed25519PrivateKey:
        return Ed25519PrivateKey.from_private_bytes(self.secret)

    @cached_property
    def _box_key(self) -> X25519PrivateKey:
        return X25519PrivateKey.from_private_bytes(digest(_BOX_SEED_TAG + self.secret))

    @cached_property
    def public_id(self) -> bytes:
        sign_pub = self._sign_key.public_key().public_bytes_raw()
        box_pub = self._box_key.public_key().public_bytes_raw()
        return sign_pub + box_pub

    def __repr__(self) -> str:  # keep the seed out of logs and tracebacks
        return f"KeyPair(public_id={self.public_id.hex()[:16]}...)"


def keypair_from_seed(seed: bytes) -> KeyPair:
    """Derive an identity from a 32-byte seed. Same seed, same identity."""
    return KeyPair(bytes(seed))


def sign(secret: bytes | KeyPair, message: bytes) -> bytes:
    """Ed25519 signature over exactly these bytes. Empty messages refused."""
    if not message:
        raise CryptoError("empty message")
    kp = secret if isinstance(secret, KeyPair) else KeyPair(secret)
    return kp._sign_key.sign(message)


def verify(public_id: bytes, message: bytes, signature: bytes) -> bool:
    """True iff signature was produced by the matching secret over exactly
    message. Malformed inputs yield False, never an exception."""
    if len(public_id) != PUBLIC_ID_LEN:
        return False
    try:
        key = Ed25519PublicKey.from_public_bytes(public_id[:KEY_LEN])
        key.verify(signature, message)
        return True
    except (InvalidSignature, ValueError, TypeError):
        return False


@dataclass(frozen=True)
class SealedBlob:
    """A short value encrypted to one recipient (the ledger's sealed links
    and per-recipient wrapped content keys)."""

    ephemeral_pub: bytes
    nonce: bytes
    ciphertext: bytes

    def to_bytes(self) -> bytes:
        return (
            enc_bytes(self.ephemeral_pub)
            + enc_bytes(self.nonce)
            + enc_bytes(self.ciphertext)
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SealedBlob":
        r = Reader(raw)
        blob = cls(r.read_fixed(KEY_LEN), r.read_fixed(NONCE_LEN), r.read_bytes())
        r.expect_end()
        return blob


def _wrap_key_for(recipient_box_pub: bytes, ephemeral: X25519PrivateKey) -> bytes:
    shared = ephemeral.exchange(X25519PublicKey.from_public_bytes(recipient_box_pub))
    eph_pub = ephemeral.public_key().public_bytes_raw()
    return HKDF(
        algorithm=SHA256(),
        length=KEY_LEN,
        salt=None,
        info=_WRAP_INFO_TAG + eph_pub + recipient_box_pub,
    ).derive(shared)


def seal_for(recipient: bytes, data: bytes, rng: random.Random | None = None) -> SealedBlob:
    """Encrypt a short value so only the holder of recipient's secret can
    read it (the X⁺(value) operation)."""
    if len(recipient) != PUBLIC_ID_LEN:
        raise CryptoError("bad recipient public id")
    box_pub = recipient[KEY_LEN:]
    ephemeral = X25519PrivateKey.from_private_bytes(_rand_bytes(rng, KEY_LEN))
    kek = _wrap_key_for(box_pub, ephemeral)
    nonce = _rand_bytes(rng, NONCE_LEN)
    ct = AESGCM(kek).encrypt(nonce, data, None)
    return SealedBlob(ephemeral.public_key().public_bytes_raw(), nonce, ct)


def open_sealed(keypair: KeyPair, blob: SealedBlob) -> bytes:
    try:
        shared = keypair._box_key.exchange(
            X25519PublicKey.from_public_bytes(blob.ephemeral_pub)
        )
    except ValueError as exc:
        raise FidelityError("fidelity check failed") from exc
    box_pub = keypair.public_id[KEY_LEN:]
    kek = HKDF(
        algorithm=SHA256(),
        length=KEY_LEN,
        salt=None,
        info=_WRAP_INFO_TAG + blob.ephemeral_pub + box_pub,
    ).derive(shared)
    try:
        return AESGCM(kek).decrypt(blob.nonce, blob.ciphertext, None)
    except InvalidTag as exc:
        raise FidelityError("fidelity check failed") from exc


@dataclass(frozen=True)
class RecordEnvelope:
    """Encrypted health document: AEAD payload under a fresh content key,
    one wrapped copy of that key per recipient, and the plaintext digest."""

    payload_nonce: bytes
    payload_ct: bytes
    payload_digest: bytes
    recipients: tuple[tuple[bytes, SealedBlob], ...]

    def recipient_ids(self) -> tuple[bytes, ...]:
        return tuple(pub for pub, _ in self.recipients)

    def to_bytes(self) -> bytes:
        parts = [
            enc_bytes(manifest_bytes()),
            enc_bytes(self.payload_nonce),
            enc_bytes(self.payload_ct),
            enc_bytes(self.payload_digest),
            enc_u64(len(self.recipients)),
        ]
        for pub, blob in self.recipients:
            parts.append(enc_bytes(pub))
            parts.append(enc_bytes(blob.to_bytes()))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "RecordEnvelope":
        r = Reader(raw)
        if r.read_bytes() != manifest_bytes():
            raise DecodeError("manifest mismatch")
        nonce = r.read_fixed(NONCE_LEN)
        ct = r.read_bytes()
        pd = r.read_fixed(DIGEST_LEN)
        count = r.read_u64()
        recs = []
        for _ in range(count):
            pub = r.read_fixed(PUBLIC_ID_LEN)
            blob = SealedBlob.from_bytes(r.read_bytes())
            recs.append((pub, blob))
        r.expect_end()
        return cls(nonce, ct, pd, tuple(recs))


def new_content_key(rng: random.Random | None = None) -> bytes:
    return _rand_bytes(rng, KEY_LEN)


def seal_envelope(
    plaintext: bytes,
    recipients: list[bytes] | tuple[bytes, ...],
    rng: random.Random | None = None,
) -> RecordEnvelope:
    """Encrypt plaintext under a fresh content key wrapped for each
    recipient; the envelope also records digest(plaintext)."""
    if not recipients:
        raise CryptoError("no recipients")
    if not plaintext:
        raise CryptoError("empty plaintext")
    key = new_content_key(rng)
    nonce = _rand_bytes(rng, NONCE_LEN)
    ct = AESGCM(key).encrypt(nonce, plaintext, None)
    wrapped = tuple((pub, seal_for(pub, key, rng)) for pub in recipients)
    return RecordEnvelope(nonce, ct, digest(plaintext), wrapped)


def open_envelope(envelope: RecordEnvelope, keypair: KeyPair) -> bytes:
    """Recover the plaintext; only envelope recipients succeed, and the
    recovered bytes must match the stored digest."""
    for pub, blob in envelope.recipients:
        if pub == keypair.public_id:
            key = open_sealed(keypair, blob)
            try:
                plaintext = AESGCM(key).decrypt(
                    envelope.payload_nonce, envelope.payload_ct, None
                )
            except InvalidTag as exc:
                raise FidelityError("fidelity check failed") from exc
            if digest(plaintext) != envelope.payload_digest:
                raise FidelityError("fidelity check failed")
            return plaintext
    raise NoWrappedKeyError("no wrapped key")
