"""Owner-controlled keyed store of record envelopes with per-file read ACLs.

Stands in for a cloud file system: records are keyed by an opaque link (the
digest of the envelope at creation), reads require a fresh challenge proof of
key possession, and only the owner can change ACLs or delete. An append-only
ACL journal records every permission change for audit. The store can run
purely in memory or persist under a directory (one canonical-binary file per
record, named by hex link, plus the journal as line-delimited JSON).
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path

from . import crypto
from .clock import LogicalClock
from .crypto import KeyPair, RecordEnvelope
from .encoding import enc_bytes, to_hex
from .errors import (
    AlreadyStoredError,
    ForbiddenError,
    GoneError,
    NotOwnerError,
    StoreError,
    UnknownLinkError,
)

NONCE_LEN = 16


def proof_message(link: bytes, nonce: bytes) -> bytes:
    return enc_bytes(link) + enc_bytes(nonce)


@dataclass(frozen=True)
class AccessProof:
    """Challenge proof: a single-use nonce signed together with the link,
    demonstrating possession of the requester's secret."""

    requester: bytes
    nonce: bytes
    challenge_signature: bytes


def make_access_proof(
    keypair: KeyPair, link: bytes, rng: random.Random | None = None
) -> AccessProof:
    nonce = (rng or random.SystemRandom()).randbytes(NONCE_LEN)
    return AccessProof(
        requester=keypair.public_id,
        nonce=nonce,
        challenge_signature=crypto.sign(keypair, proof_message(link, nonce)),
    )


@dataclass
class StoredRecord:
    link: bytes
    envelope: RecordEnvelope | None  # None once deleted
    owner: bytes
    readers: set[bytes]
    created_at: int
    deleted_at: int | None = None

    @property
    def live(self) -> bool:
        return self.deleted_at is None


class RecordStore:
    """Linearizable desk-scale data service. Pass a directory root to
    persist; omit it for an in-memory instance."""

    def __init__(self, root: Path | str | None = None):
        self._records: dict[bytes, StoredRecord] = {}
        self._seen_nonces: set[bytes] = set()
        self.journal: list[dict] = []
        self._root = Path(root) if root is not None else None
        if self._root is not None:
            (self._root / "records").mkdir(parents=True, exist_ok=True)

    # -- internal helpers ---------------------------------------------------

    def _journal(self, entry: dict) -> None:
        self.journal.append(entry)
        if self._root is not None:
            with open(self._root / "journal.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def _record(self, link: bytes) -> StoredRecord:
        record = self._records.get(link)
        if record is None:
            raise UnknownLinkError("unknown link")
        return record

    def _check_proof(self, link: bytes, proof: AccessProof) -> bytes:
        if proof.nonce in self._seen_nonces:
            raise ForbiddenError("forbidden")
        if not crypto.verify(
            proof.requester, proof_message(link, proof.nonce), proof.challenge_signature
        ):
            raise ForbiddenError("forbidden")
        self._seen_nonces.add(proof.nonce)
        return proof.requester

    def _check_owner(self, link: bytes, proof: AccessProof) -> StoredRecord:
        record = self._record(link)
        requester = self._check_proof(link, proof)
        if requester != record.owner:
            raise NotOwnerError("not owner")
        return record

    # -- operations ----------------------------------------------------------

    def put_record(
        self,
        owner: bytes,
        envelope: RecordEnvelope,
        initial_readers: set[bytes] | frozenset[bytes] | tuple[bytes, ...] = (),
        *,
        clock: LogicalClock,
    ) -> bytes:
        """Store an envelope; the returned link is its digest. Links are
        never reused, even after deletion."""
        if owner not in envelope.recipient_ids():
            raise StoreError("owner not a recipient")
        link = crypto.digest(envelope.to_bytes())
        if link in self._records:
            raise AlreadyStoredError("already stored")
        record = StoredRecord(
            link=link,
            envelope=envelope,
            owner=owner,
            readers=set(initial_readers) - {owner},
            created_at=clock.tick(),
        )
        self._records[link] = record
        if self._root is not None:
            (self._root / "records" / f"{to_hex(link)}.bin").write_bytes(
                envelope.to_bytes()
            )
        self._journal(
            {
                "time": record.created_at,
                "op": "put",
                "link": to_hex(link),
                "owner": to_hex(owner),
                "readers": sorted(to_hex(r) for r in record.readers),
            }
        )
        return link

    def get_record(self, link: bytes, proof: AccessProof) -> RecordEnvelope:
        """Return the envelope iff the prover is the owner or a reader and
        the record is live."""
        record = self._record(link)
        requester = self._check_proof(link, proof)
        if not record.live:
            raise GoneError("gone")
        if requester != record.owner and requester not in record.readers:
            raise ForbiddenError("forbidden")
        assert record.envelope is not None
        return record.envelope

    def set_read_access(
        self,
        owner_proof: AccessProof,
        link: bytes,
        grantee: bytes,
        enabled: bool,
        *,
        clock: LogicalClock,
    ) -> None:
        record = self._check_owner(link, owner_proof)
        if not record.live:
            raise GoneError("gone")
        if enabled:
            if grantee != record.owner:
                record.readers.add(grantee)
        else:
            record.readers.discard(grantee)
        self._journal(
            {
                "time": clock.tick(),
                "op": "grant" if enabled else "revoke",
                "link": to_hex(link),
                "party": to_hex(grantee),
            }
        )

    def delete_record(
        self, owner_proof: AccessProof, link: bytes, *, clock: LogicalClock
    ) -> None:
        """Owner-only, idempotent. The payload is dropped; the tombstone and
        journal remain so the link is never reused."""
        record = self._check_owner(link, owner_proof)
        if not record.live:
            return
        record.deleted_at = clock.tick()
        record.envelope = None
        record.readers.clear()
        if self._root is not None:
            path = self._root / "records" / f"{to_hex(link)}.bin"
            if path.exists():
                path.unlink()
        self._journal({"time": record.deleted_at, "op": "delete", "link": to_hex(link)})

    def verify_fidelity(self, link: bytes, claimed_digest: bytes) -> bool:
        """True iff the stored envelope still matches its link and its
        payload digest equals the claim."""
        record = self._record(link)
        if not record.live:
            raise GoneError("gone")
        assert record.envelope is not None
        if crypto.digest(record.envelope.to_bytes()) != link:
            return False
        return record.envelope.payload_digest == claimed_digest

    # -- persistence ----------------------------------------------------------

    @classmethod
    def load(cls, root: Path | str) -> "RecordStore":
        """Rebuild a store from its directory by replaying the journal."""
        root = Path(root)
        store = cls.__new__(cls)
        store._records = {}
        store._seen_nonces = set()
        store.journal = []
        store._root = root
        journal_path = root / "journal.jsonl"
        entries = []
        if journal_path.exists():
            with open(journal_path, encoding="utf-8") as fh:
                entries = [json.loads(line) for line in fh if line.strip()]
        deleted = {e["link"] for e in entries if e["op"] == "delete"}
        for entry in entries:
            link = bytes.fromhex(entry["link"])
            if entry["op"] == "put":
                # payload files of later-deleted records are gone by design
                envelope = None
                if entry["link"] not in deleted:
                    payload = (root / "records" / f"{entry['link']}.bin").read_bytes()
                    envelope = RecordEnvelope.from_bytes(payload)
                store._records[link] = StoredRecord(
                    link=link,
                    envelope=envelope,
                    owner=bytes.fromhex(entry["owner"]),
                    readers={bytes.fromhex(r) for r in entry["readers"]},
                    created_at=entry["time"],
                )
            elif entry["op"] == "grant":
                store._records[link].readers.add(bytes.fromhex(entry["party"]))
            elif entry["op"] == "revoke":
                store._records[link].readers.discard(bytes.fromhex(entry["party"]))
            elif entry["op"] == "delete":
                record = store._records[link]
                record.deleted_at = entry["time"]
                record.envelope = None
                record.readers.clear()
        store.journal = entries
        return store
