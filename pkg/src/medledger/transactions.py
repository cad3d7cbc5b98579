"""The four health-transaction kinds, their canonical serialization, and
structural/signature validation.

Record creation (new-record), access requests, access grants, and aggregate
public-health notifications all share one envelope: a kind tag, a body, the
author identity, the author's signature over the canonical body, and a tx id
that is the digest of the signed form. Validation is a pure function of the
transaction and a chain view and returns a verdict, never raises.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Protocol, Union

from . import crypto
from .clock import LogicalClock
from .crypto import DIGEST_LEN, PUBLIC_ID_LEN, ZERO_DIGEST, KeyPair, SealedBlob
from .encoding import (
    DecodeError,
    Reader,
    enc_bool,
    enc_bytes,
    enc_count_map,
    enc_opt_str,
    enc_str,
    enc_str_map,
    enc_u64,
    from_hex,
    to_hex,
)
from .errors import TransactionError
from .policies import EMERGENCY_POLICY_CATEGORY, EmergencyPolicy

NEW_RECORD = "new-record"
REQUEST_ACCESS = "request-access"
ACCESS_GRANTED = "access-granted"
NOTIFICATION = "notification"
KINDS = (NEW_RECORD, REQUEST_ACCESS, ACCESS_GRANTED, NOTIFICATION)

# Controlled vocabulary for record metadata keys; professionals select
# records to request from these descriptors.
METADATA_KEYS = frozenset({"category", "encounter_type", "condition_code", "exam_type"})

RESTRICTED_CATEGORY = "restricted"

DEFAULT_ANONYMITY_K = 5


@dataclass(frozen=True)
class Verdict:
    ok: bool
    reason: str | None = None
    detail: dict = field(default_factory=dict)

    def __bool__(self) -> bool:
        return self.ok


ACCEPTED = Verdict(True)


def rejected(reason: str, **detail) -> Verdict:
    return Verdict(False, reason, dict(detail))


@dataclass(frozen=True)
class NewRecordTx:
    timestamp: int
    patient: bytes
    custodian: bytes
    metadata: dict[str, str]
    public_data: Optional[str]
    sealed_link: SealedBlob  # storage link encrypted for the patient
    link_digest: bytes  # public commitment digest(link) for discovery
    data_digest: bytes  # digest of the record plaintext

    def to_bytes(self) -> bytes:
        return b"".join(
            (
                enc_u64(self.timestamp),
                enc_bytes(self.patient),
                enc_bytes(self.custodian),
                enc_str_map(self.metadata),
                enc_opt_str(self.public_data),
                enc_bytes(self.sealed_link.to_bytes()),
                enc_bytes(self.link_digest),
                enc_bytes(self.data_digest),
            )
        )

    @classmethod
    def read_from(cls, r: Reader) -> "NewRecordTx":
        return cls(
            timestamp=r.read_u64(),
            patient=r.read_fixed(PUBLIC_ID_LEN),
            custodian=r.read_fixed(PUBLIC_ID_LEN),
            metadata=r.read_str_map(),
            public_data=r.read_opt_str(),
            sealed_link=SealedBlob.from_bytes(r.read_bytes()),
            link_digest=r.read_fixed(DIGEST_LEN),
            data_digest=r.read_fixed(DIGEST_LEN),
        )


@dataclass(frozen=True)
class RequestAccessTx:
    timestamp: int
    requester: bytes
    patient: bytes
    target_record: bytes  # tx id of the NewRecordTx being requested
    signed_sealed_link: bytes  # requester's signature over the sealed link bytes

    def to_bytes(self) -> bytes:
        return b"".join(
            (
                enc_u64(self.timestamp),
                enc_bytes(self.requester),
                enc_bytes(self.patient),
                enc_bytes(self.target_record),
                enc_bytes(self.signed_sealed_link),
            )
        )

    @classmethod
    def read_from(cls, r: Reader) -> "RequestAccessTx":
        return cls(
            timestamp=r.read_u64(),
            requester=r.read_fixed(PUBLIC_ID_LEN),
            patient=r.read_fixed(PUBLIC_ID_LEN),
            target_record=r.read_fixed(DIGEST_LEN),
            signed_sealed_link=r.read_bytes(),
        )


@dataclass(frozen=True)
class AccessGrantedTx:
    timestamp: int
    patient: bytes  # the granting data owner
    grantee: bytes
    granted_link: SealedBlob  # copy's storage link sealed for the grantee
    emergency_flag: bool
    granting_request: bytes  # tx id of the answered request; zero = direct grant

    def to_bytes(self) -> bytes:
        return b"".join(
            (
                enc_u64(self.timestamp),
                enc_bytes(self.patient),
                enc_bytes(self.grantee),
                enc_bytes(self.granted_link.to_bytes()),
                enc_bool(self.emergency_flag),
                enc_bytes(self.granting_request),
            )
        )

    @classmethod
    def read_from(cls, r: Reader) -> "AccessGrantedTx":
        return cls(
            timestamp=r.read_u64(),
            patient=r.read_fixed(PUBLIC_ID_LEN),
            grantee=r.read_fixed(PUBLIC_ID_LEN),
            granted_link=SealedBlob.from_bytes(r.read_bytes()),
            emergency_flag=r.read_bool(),
            granting_request=r.read_fixed(DIGEST_LEN),
        )


@dataclass(frozen=True)
class NotificationTx:
    timestamp: int
    custodian: bytes
    period_start: int
    period_end: int
    condition_counts: dict[str, int]
    custodian_signature: bytes  # custodian's signature over the report body

    def report_bytes(self) -> bytes:
        """The signed report: every field except the signature itself."""
        return b"".join(
            (
                enc_u64(self.timestamp),
                enc_bytes(self.custodian),
                enc_u64(self.period_start),
                enc_u64(self.period_end),
                enc_count_map(self.condition_counts),
            )
        )

    def to_bytes(self) -> bytes:
        return self.report_bytes() + enc_bytes(self.custodian_signature)

    @classmethod
    def read_from(cls, r: Reader) -> "NotificationTx":
        return cls(
            timestamp=r.read_u64(),
            custodian=r.read_fixed(PUBLIC_ID_LEN),
            period_start=r.read_u64(),
            period_end=r.read_u64(),
            condition_counts=r.read_count_map(),
            custodian_signature=r.read_bytes(),
        )


Body = Union[NewRecordTx, RequestAccessTx, AccessGrantedTx, NotificationTx]

_BODY_TYPES = {
    NEW_RECORD: NewRecordTx,
    REQUEST_ACCESS: RequestAccessTx,
    ACCESS_GRANTED: AccessGrantedTx,
    NOTIFICATION: NotificationTx,
}


@dataclass(frozen=True)
class Transaction:
    kind: str
    body: Body
    author: bytes
    author_signature: bytes
    tx_id: bytes

    def signed_payload(self) -> bytes:
        return enc_str(self.kind) + self.body.to_bytes() + enc_bytes(self.author)

    def to_bytes(self) -> bytes:
        return self.signed_payload() + enc_bytes(self.author_signature)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Transaction":
        r = Reader(raw)
        tx = cls.read_from(r)
        r.expect_end()
        return tx

    @classmethod
    def read_from(cls, r: Reader) -> "Transaction":
        kind = r.read_str()
        body_type = _BODY_TYPES.get(kind)
        if body_type is None:
            raise DecodeError(f"unknown transaction kind: {kind}")
        body = body_type.read_from(r)
        author = r.read_fixed(PUBLIC_ID_LEN)
        signature = r.read_bytes()
        payload = enc_str(kind) + body.to_bytes() + enc_bytes(author)
        tx_id = crypto.digest(payload + enc_bytes(signature))
        return cls(kind, body, author, signature, tx_id)


def make_transaction(kind: str, body: Body, author: KeyPair) -> Transaction:
    payload = enc_str(kind) + body.to_bytes() + enc_bytes(author.public_id)
    signature = crypto.sign(author, payload)
    tx_id = crypto.digest(payload + enc_bytes(signature))
    return Transaction(kind, body, author.public_id, signature, tx_id)


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def build_new_record(
    custodian: KeyPair,
    patient_pub: bytes,
    envelope: crypto.RecordEnvelope,
    data_digest: bytes,
    metadata: dict[str, str] | None = None,
    public_data: str | None = None,
    *,
    clock: LogicalClock,
    rng: random.Random | None = None,
) -> Transaction:
    """Announce a stored record on the ledger. The storage link is derived
    from the envelope and sealed so only the patient can recover it."""
    if data_digest != envelope.payload_digest:
        raise TransactionError("fidelity mismatch")
    metadata = dict(metadata or {})
    bad = set(metadata) - METADATA_KEYS
    if bad:
        raise TransactionError(f"bad metadata key: {sorted(bad)}")
    link = crypto.digest(envelope.to_bytes())
    body = NewRecordTx(
        timestamp=clock.tick(),
        patient=patient_pub,
        custodian=custodian.public_id,
        metadata=metadata,
        public_data=public_data,
        sealed_link=crypto.seal_for(patient_pub, link, rng),
        link_digest=crypto.digest(link),
        data_digest=data_digest,
    )
    return make_transaction(NEW_RECORD, body, custodian)


def build_request_access(
    requester: KeyPair, target: Transaction, *, clock: LogicalClock
) -> Transaction:
    """Ask for access to a record: the requester signs the record's sealed
    link bytes, binding identity to the exact ciphertext."""
    if target.kind != NEW_RECORD:
        raise TransactionError("unknown record")
    body = RequestAccessTx(
        timestamp=clock.tick(),
        requester=requester.public_id,
        patient=target.body.patient,
        target_record=target.tx_id,
        signed_sealed_link=crypto.sign(requester, target.body.sealed_link.to_bytes()),
    )
    return make_transaction(REQUEST_ACCESS, body, requester)


def build_access_granted(
    patient: KeyPair,
    request: Transaction,
    resealed_link: SealedBlob,
    view: "ChainView",
    *,
    clock: LogicalClock,
    as_procurator: bool = False,
) -> Transaction:
    """Answer a request with a grant referencing it. A procurator keypair may
    author the grant on the owner's behalf; validation then checks the
    registered policy names that procurator."""
    if request.kind != REQUEST_ACCESS:
        raise TransactionError("unknown record")
    record = view.find_transaction(request.body.target_record)
    if record is None or record.kind != NEW_RECORD:
        raise TransactionError("unknown record")
    if not crypto.verify(
        request.body.requester,
        record.body.sealed_link.to_bytes(),
        request.body.signed_sealed_link,
    ):
        raise TransactionError("identity unconfirmed")
    if patient.public_id != request.body.patient and not as_procurator:
        raise TransactionError("not owner")
    body = AccessGrantedTx(
        timestamp=clock.tick(),
        patient=request.body.patient,
        grantee=request.body.requester,
        granted_link=resealed_link,
        emergency_flag=False,
        granting_request=request.tx_id,
    )
    return make_transaction(ACCESS_GRANTED, body, patient)


def build_direct_grant(
    owner: KeyPair,
    grantee_pub: bytes,
    resealed_link: SealedBlob,
    *,
    clock: LogicalClock,
    emergency_flag: bool = False,
) -> Transaction:
    """Grant without an on-chain request: custodian-initiated sharing and
    emergency grants. granting_request stays the zero digest."""
    body = AccessGrantedTx(
        timestamp=clock.tick(),
        patient=owner.public_id,
        grantee=grantee_pub,
        granted_link=resealed_link,
        emergency_flag=emergency_flag,
        granting_request=ZERO_DIGEST,
    )
    return make_transaction(ACCESS_GRANTED, body, owner)


def build_notification(
    custodian: KeyPair,
    period: tuple[int, int],
    condition_counts: dict[str, int],
    *,
    clock: LogicalClock,
) -> Transaction:
    """Aggregate public-health report for a period, signed twice: the report
    body by the custodian and the whole body as transaction author."""
    start, end = period
    if not start < end:
        raise TransactionError("bad period")
    counts = dict(condition_counts)
    if any(c < 0 for c in counts.values()):
        raise TransactionError("negative count")
    stamped = NotificationTx(
        timestamp=clock.tick(),
        custodian=custodian.public_id,
        period_start=start,
        period_end=end,
        condition_counts=counts,
        custodian_signature=b"",
    )
    body = replace(
        stamped, custodian_signature=crypto.sign(custodian, stamped.report_bytes())
    )
    return make_transaction(NOTIFICATION, body, custodian)


# ---------------------------------------------------------------------------
# Chain views
# ---------------------------------------------------------------------------

class ChainView(Protocol):
    """What validation needs from a ledger state."""

    def find_transaction(self, tx_id: bytes) -> Transaction | None: ...

    def emergency_policy_for(self, patient: bytes) -> EmergencyPolicy | None: ...


def policy_from_record(tx: Transaction) -> EmergencyPolicy | None:
    """Parse an emergency-policy registration out of a new-record tx, or
    None if the record is not a well-formed registration by its patient."""
    if tx.kind != NEW_RECORD:
        return None
    body = tx.body
    if body.metadata.get("category") != EMERGENCY_POLICY_CATEGORY or not body.public_data:
        return None
    try:
        policy = EmergencyPolicy.from_public_data(body.public_data)
    except Exception:
        return None
    if policy.patient != body.patient:
        return None
    return policy


class OverlayView:
    """A chain view extended by not-yet-sealed transactions, used to validate
    mempool contents and intra-block sequences."""

    def __init__(self, base: ChainView, extra: Iterable[Transaction] = ()):
        self._base = base
        self._extra: dict[bytes, Transaction] = {}
        self._policies: dict[bytes, EmergencyPolicy] = {}
        for tx in extra:
            self.add(tx)

    def add(self, tx: Transaction) -> None:
        self._extra[tx.tx_id] = tx
        policy = policy_from_record(tx)
        if policy is not None:
            self._policies[policy.patient] = policy

    def find_transaction(self, tx_id: bytes) -> Transaction | None:
        found = self._extra.get(tx_id)
        if found is not None:
            return found
        return self._base.find_transaction(tx_id)

    def emergency_policy_for(self, patient: bytes) -> EmergencyPolicy | None:
        found = self._policies.get(patient)
        if found is not None:
            return found
        return self._base.emergency_policy_for(patient)


class EmptyView:
    """A view with no transactions (genesis state)."""

    def find_transaction(self, tx_id: bytes) -> Transaction | None:
        return None

    def emergency_policy_for(self, patient: bytes) -> EmergencyPolicy | None:
        return None


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

# Author-signature results keyed by tx id; the id covers the signed content,
# so equal ids imply equal verification outcomes.
_SIG_CACHE: dict[bytes, bool] = {}
_SIG_CACHE_MAX = 1 << 14


def _author_signature_ok(tx: Transaction) -> bool:
    cached = _SIG_CACHE.get(tx.tx_id)
    if cached is not None:
        return cached
    ok = crypto.verify(tx.author, tx.signed_payload(), tx.author_signature)
    if len(_SIG_CACHE) >= _SIG_CACHE_MAX:
        _SIG_CACHE.clear()
    _SIG_CACHE[tx.tx_id] = ok
    return ok


def validate_transaction(
    tx: Transaction, view: ChainView, *, anonymity_k: int = DEFAULT_ANONYMITY_K
) -> Verdict:
    """Structural and signature validation against a chain view. Every
    failure is a verdict with a machine-readable reason."""
    if tx.kind not in _BODY_TYPES or not isinstance(tx.body, _BODY_TYPES[tx.kind]):
        return rejected("unknown kind")
    if len(tx.author) != PUBLIC_ID_LEN:
        return rejected("bad author")
    expected_id = crypto.digest(tx.signed_payload() + enc_bytes(tx.author_signature))
    if expected_id != tx.tx_id:
        return rejected("tx id mismatch")
    if not _author_signature_ok(tx):
        return rejected("bad signature")

    if tx.kind == NEW_RECORD:
        return _validate_new_record(tx)
    if tx.kind == REQUEST_ACCESS:
        return _validate_request_access(tx, view)
    if tx.kind == ACCESS_GRANTED:
        return _validate_access_granted(tx, view)
    return _validate_notification(tx, anonymity_k)


def _validate_new_record(tx: Transaction) -> Verdict:
    body: NewRecordTx = tx.body
    if tx.author != body.custodian:
        return rejected("wrong author")
    if len(body.patient) != PUBLIC_ID_LEN or len(body.custodian) != PUBLIC_ID_LEN:
        return rejected("bad identity")
    if set(body.metadata) - METADATA_KEYS:
        return rejected("bad metadata key")
    if len(body.data_digest) != DIGEST_LEN or len(body.link_digest) != DIGEST_LEN:
        return rejected("bad digest")
    return ACCEPTED


def _validate_request_access(tx: Transaction, view: ChainView) -> Verdict:
    body: RequestAccessTx = tx.body
    if tx.author != body.requester:
        return rejected("wrong author")
    record = view.find_transaction(body.target_record)
    if record is None or record.kind != NEW_RECORD:
        return rejected("unknown record")
    if record.body.patient != body.patient:
        return rejected("unknown record")
    if not crypto.verify(
        body.requester, record.body.sealed_link.to_bytes(), body.signed_sealed_link
    ):
        return rejected("identity unconfirmed")
    return ACCEPTED


def _validate_access_granted(tx: Transaction, view: ChainView) -> Verdict:
    body: AccessGrantedTx = tx.body
    if tx.author != body.patient:
        policy = view.emergency_policy_for(body.patient)
        if policy is None or policy.procurator != tx.author:
            return rejected("not owner")
    if body.granting_request != ZERO_DIGEST:
        request = view.find_transaction(body.granting_request)
        if request is None or request.kind != REQUEST_ACCESS:
            return rejected("dangling grant")
        if request.body.requester != body.grantee or request.body.patient != body.patient:
            return rejected("grant mismatch")
    if body.emergency_flag and view.emergency_policy_for(body.patient) is None:
        return rejected("no emergency policy")
    return ACCEPTED


def _validate_notification(tx: Transaction, anonymity_k: int) -> Verdict:
    body: NotificationTx = tx.body
    if tx.author != body.custodian:
        return rejected("wrong author")
    if not body.period_start < body.period_end:
        return rejected("bad period")
    if not crypto.verify(body.custodian, body.report_bytes(), body.custodian_signature):
        return rejected("bad signature")
    for condition, count in body.condition_counts.items():
        if 0 < count < anonymity_k:
            return rejected("anonymity threshold", condition=condition, count=count)
    return ACCEPTED


# ---------------------------------------------------------------------------
# JSON text form
# ---------------------------------------------------------------------------

def tx_to_json(tx: Transaction) -> dict:
    """Text form: kind tag plus hex identifiers, keys in canonical order."""
    body = tx.body
    if tx.kind == NEW_RECORD:
        doc = {
            "timestamp": body.timestamp,
            "patient": to_hex(body.patient),
            "custodian": to_hex(body.custodian),
            "metadata": dict(sorted(body.metadata.items())),
            "public_data": body.public_data,
            "sealed_link": to_hex(body.sealed_link.to_bytes()),
            "link_digest": to_hex(body.link_digest),
            "data_digest": to_hex(body.data_digest),
        }
    elif tx.kind == REQUEST_ACCESS:
        doc = {
            "timestamp": body.timestamp,
            "requester": to_hex(body.requester),
            "patient": to_hex(body.patient),
            "target_record": to_hex(body.target_record),
            "signed_sealed_link": to_hex(body.signed_sealed_link),
        }
    elif tx.kind == ACCESS_GRANTED:
        doc = {
            "timestamp": body.timestamp,
            "patient": to_hex(body.patient),
            "grantee": to_hex(body.grantee),
            "granted_link": to_hex(body.granted_link.to_bytes()),
            "emergency_flag": body.emergency_flag,
            "granting_request": to_hex(body.granting_request),
        }
    else:
        doc = {
            "timestamp": body.timestamp,
            "custodian": to_hex(body.custodian),
            "period_start": body.period_start,
            "period_end": body.period_end,
            "condition_counts": dict(sorted(body.condition_counts.items())),
            "custodian_signature": to_hex(body.custodian_signature),
        }
    return {
        "kind": tx.kind,
        "body": doc,
        "author": to_hex(tx.author),
        "author_signature": to_hex(tx.author_signature),
        "tx_id": to_hex(tx.tx_id),
    }


def tx_from_json(doc: dict) -> Transaction:
    kind = doc.get("kind")
    body_doc = doc.get("body", {})
    try:
        if kind == NEW_RECORD:
            body: Body = NewRecordTx(
                timestamp=body_doc["timestamp"],
                patient=from_hex(body_doc["patient"]),
                custodian=from_hex(body_doc["custodian"]),
                metadata=dict(body_doc["metadata"]),
                public_data=body_doc.get("public_data"),
                sealed_link=SealedBlob.from_bytes(from_hex(body_doc["sealed_link"])),
                link_digest=from_hex(body_doc["link_digest"]),
                data_digest=from_hex(body_doc["data_digest"]),
            )
        elif kind == REQUEST_ACCESS:
            body = RequestAccessTx(
                timestamp=body_doc["timestamp"],
                requester=from_hex(body_doc["requester"]),
                patient=from_hex(body_doc["patient"]),
                target_record=from_hex(body_doc["target_record"]),
                signed_sealed_link=from_hex(body_doc["signed_sealed_link"]),
            )
        elif kind == ACCESS_GRANTED:
            body = AccessGrantedTx(
                timestamp=body_doc["timestamp"],
                patient=from_hex(body_doc["patient"]),
                grantee=from_hex(body_doc["grantee"]),
                granted_link=SealedBlob.from_bytes(from_hex(body_doc["granted_link"])),
                emergency_flag=bool(body_doc["emergency_flag"]),
                granting_request=from_hex(body_doc["granting_request"]),
            )
        elif kind == NOTIFICATION:
            body = NotificationTx(
                timestamp=body_doc["timestamp"],
                custodian=from_hex(body_doc["custodian"]),
                period_start=body_doc["period_start"],
                period_end=body_doc["period_end"],
                condition_counts=dict(body_doc["condition_counts"]),
                custodian_signature=from_hex(body_doc["custodian_signature"]),
            )
        else:
            raise DecodeError(f"unknown transaction kind: {kind}")
        author = from_hex(doc["author"])
        signature = from_hex(doc["author_signature"])
    except (KeyError, TypeError) as exc:
        raise DecodeError("malformed transaction document") from exc
    payload = enc_str(kind) + body.to_bytes() + enc_bytes(author)
    tx_id = crypto.digest(payload + enc_bytes(signature))
    return Transaction(kind, body, author, signature, tx_id)
