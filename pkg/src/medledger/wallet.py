"""Per-identity wallet: holds the keypair and store binding, originates all
transactions, evaluates access-decision rules, and keeps the inbox of pending
decision tasks and custodian-grant notices.

A wallet never emits its secret in any message. Grants re-seal a fresh
envelope copy for the grantee instead of sharing the original content key,
so revoking one grantee leaves the others intact. Wallet state persists as
one encrypted file keyed by a passphrase-derived key.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import crypto, discovery
from .clock import LogicalClock
from .contracts import ContractEngine, DecisionTask
from .crypto import KeyPair
from .encoding import Reader, enc_bytes, from_hex, to_hex
from .errors import MedledgerError, WalletError
from .policies import (
    APPROVE,
    ASK,
    DENY,
    EMERGENCY_POLICY_CATEGORY,
    AutoRule,
    Credential,
    EmergencyPolicy,
    evaluate_rules,
)
from .store import RecordStore, make_access_proof
from .transactions import (
    RESTRICTED_CATEGORY,
    Transaction,
    build_access_granted,
    build_direct_grant,
    build_new_record,
    build_request_access,
    tx_from_json,
    tx_to_json,
)

WALLET_MAGIC = b"MLWALLET"
_PBKDF2_ITERATIONS = 200_000

DECISION_TASK = "decision-task"
CUSTODIAN_GRANT = "custodian-grant"


@dataclass
class InboxItem:
    seq: int
    kind: str
    received_at: int
    task: DecisionTask | None = None
    notice: dict | None = None

    def to_json(self) -> dict:
        doc = {"seq": self.seq, "kind": self.kind, "received_at": self.received_at}
        if self.task is not None:
            doc["task"] = self.task.to_json()
        if self.notice is not None:
            doc["notice"] = self.notice
        return doc


class WalletDirectory:
    """Desk-scale wallet messaging: task routing and owner notifications."""

    def __init__(self):
        self._wallets: dict[bytes, "Wallet"] = {}

    def register(self, wallet: "Wallet") -> None:
        self._wallets[wallet.public_id] = wallet

    def resolve(self, public_id: bytes) -> "Wallet | None":
        return self._wallets.get(public_id)

    def deliver_task(self, public_id: bytes, task: DecisionTask) -> None:
        wallet = self._wallets.get(public_id)
        if wallet is not None:
            wallet.receive_task(task)

    def notify(self, public_id: bytes, notice: dict) -> None:
        wallet = self._wallets.get(public_id)
        if wallet is not None:
            wallet.receive_notice(notice)

    def credential_of(self, public_id: bytes) -> Credential | None:
        wallet = self._wallets.get(public_id)
        return wallet.credential if wallet is not None else None


@dataclass
class WalletState:
    """The persisted part of a wallet: keys, policies, bookkeeping, inbox."""

    keypair: KeyPair
    auto_rules: list[AutoRule] = field(default_factory=list)
    emergency_policy: EmergencyPolicy | None = None
    procurator: bytes | None = None
    published: dict[bytes, dict] = field(default_factory=dict)
    grants_made: dict[bytes, list[tuple[bytes, bytes]]] = field(default_factory=dict)
    inbox: list[InboxItem] = field(default_factory=list)
    inbox_seq: int = 0


class Wallet:
    def __init__(
        self,
        keypair: KeyPair,
        store: RecordStore,
        engine: ContractEngine,
        discovery_endpoints: Sequence,
        *,
        directory: WalletDirectory | None = None,
        clock: LogicalClock | None = None,
        rng: random.Random | None = None,
        auto_rules: Sequence[AutoRule] = (),
        credential: Credential | None = None,
        state: WalletState | None = None,
    ):
        if len(discovery_endpoints) < 2:
            raise WalletError("need at least two discovery endpoints")
        self.state = state or WalletState(keypair=keypair, auto_rules=list(auto_rules))
        self.store = store
        self.engine = engine
        self.discovery_endpoints = list(discovery_endpoints)
        self.directory = directory
        self.clock = clock or LogicalClock()
        self.rng = rng
        self.credential = credential
        if directory is not None:
            directory.register(self)

    # -- identity ------------------------------------------------------------

    @property
    def keypair(self) -> KeyPair:
        return self.state.keypair

    @property
    def public_id(self) -> bytes:
        return self.state.keypair.public_id

    @property
    def auto_rules(self) -> list[AutoRule]:
        return self.state.auto_rules

    @property
    def emergency_policy(self) -> EmergencyPolicy | None:
        return self.state.emergency_policy

    @property
    def inbox(self) -> list[InboxItem]:
        return self.state.inbox

    def _proof(self, link: bytes):
        return make_access_proof(self.keypair, link, self.rng)

    def _seal_copy(self, plaintext: bytes, grantee: bytes) -> tuple[bytes, bytes]:
        """Store a fresh envelope copy readable by grantee; returns
        (copy_link, raw plaintext digest)."""
        recipients = [self.public_id]
        if grantee != self.public_id:
            recipients.append(grantee)
        copy_env = crypto.seal_envelope(plaintext, recipients, self.rng)
        copy_link = self.store.put_record(
            self.public_id, copy_env, {grantee}, clock=self.clock
        )
        return copy_link, copy_env.payload_digest

    # -- publishing ------------------------------------------------------------

    def publish_encounter_record(
        self,
        patient_pub: bytes,
        plaintext: bytes,
        metadata: dict[str, str] | None = None,
        public_data: str | None = None,
    ) -> tuple[bytes, Transaction]:
        """Custodian path: seal for patient and custodian, store with the
        patient as owner, announce on the ledger."""
        if not plaintext:
            raise WalletError("empty record")
        recipients = [patient_pub]
        if self.public_id != patient_pub:
            recipients.append(self.public_id)
        envelope = crypto.seal_envelope(plaintext, recipients, self.rng)
        link = self.store.put_record(
            patient_pub, envelope, {self.public_id} - {patient_pub}, clock=self.clock
        )
        tx = build_new_record(
            self.keypair,
            patient_pub,
            envelope,
            envelope.payload_digest,
            metadata,
            public_data,
            clock=self.clock,
            rng=self.rng,
        )
        verdict = self.engine.exec_create_new_record(tx, raw_link=link)
        if not verdict:
            raise WalletError(f"record rejected: {verdict.reason}")
        self.state.published[link] = {"patient": patient_pub, "tx_id": tx.tx_id}
        return link, tx

    # -- requesting access -------------------------------------------------------

    def _discover_records(self, patient_pub: bytes) -> list[Transaction]:
        """Query every replica, keep verified answers, use the freshest."""
        best: list[bytes] | None = None
        best_height = -1
        chain = self.engine.chain
        for svc in self.discovery_endpoints:
            query, answer = svc.query_by_owner(patient_pub)
            if not discovery.verify_answer(chain, query, answer):
                continue
            if answer["indexed_height"] > best_height:
                best_height = answer["indexed_height"]
                best = [from_hex(h) for h in answer["result"]]
        if best is None:
            raise WalletError("no verifiable discovery answer")
        records = []
        for tx_id in best:
            tx = chain.find_transaction(tx_id)
            if tx is not None:
                records.append(tx)
        return records

    def request_record_access(
        self, patient_pub: bytes, selection: dict[str, str] | None = None
    ) -> list[Transaction]:
        """One request per record of the patient whose metadata matches the
        selection predicate; an empty match is not an error."""
        selection = selection or {}
        requests: list[Transaction] = []
        for record in self._discover_records(patient_pub):
            meta = record.body.metadata
            if all(meta.get(k) == v for k, v in selection.items()):
                tx = build_request_access(self.keypair, record, clock=self.clock)
                verdict = self.engine.exec_process_access_request(tx)
                if not verdict:
                    raise WalletError(f"request rejected: {verdict.reason}")
                requests.append(tx)
        return requests

    # -- deciding ------------------------------------------------------------------

    def receive_task(self, task: DecisionTask) -> None:
        """Apply automatic rules; unresolved tasks surface in the inbox."""
        credential_class = None
        cred = task.requester_credential
        if (
            cred is not None
            and cred.holder == task.request.body.requester
            and cred.verifies()
        ):
            credential_class = cred.credential_class
        category = task.record.body.metadata.get("category")
        decision = evaluate_rules(self.state.auto_rules, credential_class, category)
        if decision == APPROVE:
            self._approve(task, approver=None)
        elif decision == DENY:
            self.engine.record_denial(task.request, "denied by policy")
        else:
            self._enqueue(DECISION_TASK, task=task)

    def _enqueue(self, kind: str, task: DecisionTask | None = None, notice: dict | None = None) -> None:
        self.state.inbox_seq += 1
        self.state.inbox.append(
            InboxItem(self.state.inbox_seq, kind, self.clock.now, task, notice)
        )

    def receive_notice(self, notice: dict) -> None:
        self._enqueue(CUSTODIAN_GRANT, notice=notice)

    def pending_tasks(self) -> list[DecisionTask]:
        return [item.task for item in self.state.inbox if item.kind == DECISION_TASK]

    def decide_access_request(
        self,
        task_id: str,
        decision: str,
        *,
        approver: KeyPair | None = None,
    ) -> tuple[str, Transaction | None]:
        """Answer a queued task. Each task is acknowledged exactly once; the
        approver defaults to this wallet's own identity but a procurator
        keypair may decide on the owner's behalf."""
        for i, item in enumerate(self.state.inbox):
            if item.kind == DECISION_TASK and item.task.task_id == task_id:
                del self.state.inbox[i]
                task = item.task
                break
        else:
            raise WalletError("no such task")
        if decision == APPROVE:
            return APPROVE, self._approve(task, approver=approver)
        if decision == DENY:
            self.engine.record_denial(task.request)
            return DENY, None
        raise WalletError("bad decision")

    def _approve(self, task: DecisionTask, approver: KeyPair | None) -> Transaction:
        record = task.record
        link = crypto.open_sealed(self.keypair, record.body.sealed_link)
        envelope = self.store.get_record(link, self._proof(link))
        plaintext = crypto.open_envelope(envelope, self.keypair)
        grantee = task.request.body.requester
        copy_link, _ = self._seal_copy(plaintext, grantee)
        resealed = crypto.seal_for(grantee, copy_link, self.rng)
        author = approver or self.keypair
        grant = build_access_granted(
            author,
            task.request,
            resealed,
            self.engine.view(),
            clock=self.clock,
            as_procurator=approver is not None,
        )
        verdict = self.engine.admit_grant(grant)
        if not verdict:
            raise WalletError(f"grant rejected: {verdict.reason}")
        self.state.grants_made.setdefault(link, []).append((grantee, copy_link))
        return grant

    # -- custodian-initiated sharing ------------------------------------------------

    def grant_from_custodian(self, grantee_pub: bytes, link: bytes) -> Transaction:
        """Share a record this wallet can read by storing a custodian-owned
        copy; the original owner's wallet is notified exactly once."""
        envelope = self.store.get_record(link, self._proof(link))
        plaintext = crypto.open_envelope(envelope, self.keypair)
        copy_link, _ = self._seal_copy(plaintext, grantee_pub)
        grant = build_direct_grant(
            self.keypair,
            grantee_pub,
            crypto.seal_for(grantee_pub, copy_link, self.rng),
            clock=self.clock,
        )
        verdict = self.engine.admit_grant(grant)
        if not verdict:
            raise WalletError(f"grant rejected: {verdict.reason}")
        self.state.grants_made.setdefault(link, []).append((grantee_pub, copy_link))
        owner = self._owner_of(link)
        if self.directory is not None and owner is not None and owner != self.public_id:
            self.directory.notify(
                owner,
                {
                    "kind": CUSTODIAN_GRANT,
                    "custodian": to_hex(self.public_id),
                    "grantee": to_hex(grantee_pub),
                    "link_digest": to_hex(crypto.digest(link)),
                    "copy_link_digest": to_hex(crypto.digest(copy_link)),
                    "note": (
                        "a custodian-held copy of your record was shared; "
                        "the copy is an independent record and survives "
                        "deletion of the original"
                    ),
                    "time": self.clock.now,
                },
            )
        return grant

    def _owner_of(self, link: bytes) -> bytes | None:
        info = self.state.published.get(link)
        if info is not None:
            return info["patient"]
        link_digest = crypto.digest(link)
        for svc in self.discovery_endpoints:
            query, answer = svc.query_by_link(link)
            if discovery.verify_answer(self.engine.chain, query, answer):
                if answer["result"] is not None:
                    return from_hex(answer["result"]["patient"])
        for _, tx in self.engine.chain.new_records():
            if tx.body.link_digest == link_digest:
                return tx.body.patient
        return None

    def _record_tx_for(self, link: bytes) -> Transaction | None:
        link_digest = crypto.digest(link)
        for _, tx in self.engine.chain.new_records():
            if tx.body.link_digest == link_digest:
                return tx
        return None

    # -- revocation ------------------------------------------------------------------

    def revoke_record(self, link: bytes, mode: str) -> None:
        """acl-only strips every non-owner reader (grant copies included);
        delete removes the record and this wallet's copies. The ledger is
        never touched."""
        if mode not in ("acl-only", "delete"):
            raise WalletError("bad mode")
        copies = self.state.grants_made.get(link, [])
        if mode == "acl-only":
            for grantee, copy_link in copies:
                self.store.set_read_access(
                    self._proof(copy_link), copy_link, grantee, False, clock=self.clock
                )
            record_tx = self._record_tx_for(link)
            if record_tx is not None and record_tx.body.custodian != self.public_id:
                self.store.set_read_access(
                    self._proof(link), link, record_tx.body.custodian, False,
                    clock=self.clock,
                )
            else:
                # still require ownership so a non-owner caller is refused
                self.store.set_read_access(
                    self._proof(link), link, self.public_id, False, clock=self.clock
                )
        else:
            for _, copy_link in copies:
                self.store.delete_record(self._proof(copy_link), copy_link, clock=self.clock)
            self.store.delete_record(self._proof(link), link, clock=self.clock)

    # -- policy ------------------------------------------------------------------------

    def configure_policy(
        self,
        auto_rules: Sequence[AutoRule] | None = None,
        emergency_policy: EmergencyPolicy | None = None,
        procurator: bytes | None = None,
    ) -> Transaction | None:
        """Auto rules stay local; emergency policy and procurator changes are
        registered on-chain so contracts can check them."""
        tx = None
        if auto_rules is not None:
            for rule in auto_rules:
                if not isinstance(rule, AutoRule):
                    raise WalletError("bad policy")
            self.state.auto_rules = list(auto_rules)
        if emergency_policy is not None or procurator is not None:
            base = emergency_policy or self.state.emergency_policy or EmergencyPolicy(
                patient=self.public_id,
                authorized_roles=frozenset(),
                conditions=frozenset(),
            )
            if base.patient != self.public_id:
                raise WalletError("bad policy")
            policy = EmergencyPolicy(
                patient=self.public_id,
                authorized_roles=base.authorized_roles,
                conditions=base.conditions,
                procurator=procurator if procurator is not None else base.procurator,
            )
            self.state.emergency_policy = policy
            self.state.procurator = policy.procurator
            _, tx = self.publish_encounter_record(
                self.public_id,
                policy.to_public_data().encode("utf-8"),
                {"category": EMERGENCY_POLICY_CATEGORY},
                policy.to_public_data(),
            )
        return tx

    # -- emergency ------------------------------------------------------------------------

    def emergency_reseal(self, grantee_pub: bytes) -> list[Transaction]:
        """Build emergency grants for every readable non-restricted record of
        this wallet's identity. Called by the contract engine after it has
        checked credential, policy, and condition."""
        grants: list[Transaction] = []
        for record_tx in self.engine.chain.records_of(self.public_id):
            if record_tx.body.metadata.get("category") == RESTRICTED_CATEGORY:
                continue
            try:
                link = crypto.open_sealed(self.keypair, record_tx.body.sealed_link)
                envelope = self.store.get_record(link, self._proof(link))
                plaintext = crypto.open_envelope(envelope, self.keypair)
            except MedledgerError:
                continue  # deleted or unreadable records cannot be granted
            copy_link, _ = self._seal_copy(plaintext, grantee_pub)
            grant = build_direct_grant(
                self.keypair,
                grantee_pub,
                crypto.seal_for(grantee_pub, copy_link, self.rng),
                clock=self.clock,
                emergency_flag=True,
            )
            self.state.grants_made.setdefault(link, []).append((grantee_pub, copy_link))
            grants.append(grant)
        return grants

    # -- reading ---------------------------------------------------------------------------

    def open_granted_record(self, grant: Transaction) -> bytes:
        """Grantee side: unseal the granted link, fetch, decrypt."""
        copy_link = crypto.open_sealed(self.keypair, grant.body.granted_link)
        envelope = self.store.get_record(copy_link, self._proof(copy_link))
        return crypto.open_envelope(envelope, self.keypair)

    # -- inbox ------------------------------------------------------------------------------

    def acknowledge_notice(self, seq: int) -> dict:
        for i, item in enumerate(self.state.inbox):
            if item.seq == seq and item.kind == CUSTODIAN_GRANT:
                del self.state.inbox[i]
                return item.notice
        raise WalletError("no such task")

    def inbox_json(self) -> list[dict]:
        return [item.to_json() for item in self.state.inbox]

    # -- persistence -----------------------------------------------------------------------

    def save(self, path: Path | str, passphrase: str) -> None:
        state = self.state
        doc = {
            "secret": to_hex(state.keypair.secret),
            "auto_rules": [r.to_json() for r in state.auto_rules],
            "emergency_policy": (
                state.emergency_policy.to_public_data() if state.emergency_policy else None
            ),
            "procurator": to_hex(state.procurator) if state.procurator else None,
            "published": {
                to_hex(link): {
                    "patient": to_hex(info["patient"]),
                    "tx_id": to_hex(info["tx_id"]),
                }
                for link, info in state.published.items()
            },
            "grants_made": {
                to_hex(link): [[to_hex(g), to_hex(c)] for g, c in pairs]
                for link, pairs in state.grants_made.items()
            },
            "inbox": [_item_state(item) for item in state.inbox],
            "inbox_seq": state.inbox_seq,
        }
        raw = json.dumps(doc, sort_keys=True).encode("utf-8")
        rng = self.rng or random.SystemRandom()
        salt = rng.randbytes(16)
        nonce = rng.randbytes(12)
        key = hashlib.pbkdf2_hmac("sha256", passphrase.encode(), salt, _PBKDF2_ITERATIONS)
        ct = AESGCM(key).encrypt(nonce, raw, crypto.manifest_bytes())
        payload = WALLET_MAGIC + enc_bytes(salt) + enc_bytes(nonce) + enc_bytes(ct)
        Path(path).write_bytes(payload)

    @classmethod
    def load_state(cls, path: Path | str, passphrase: str) -> WalletState:
        raw = Path(path).read_bytes()
        if raw[: len(WALLET_MAGIC)] != WALLET_MAGIC:
            raise WalletError("not a wallet file")
        r = Reader(raw[len(WALLET_MAGIC) :])
        salt, nonce, ct = r.read_bytes(), r.read_bytes(), r.read_bytes()
        r.expect_end()
        key = hashlib.pbkdf2_hmac("sha256", passphrase.encode(), salt, _PBKDF2_ITERATIONS)
        try:
            doc = json.loads(AESGCM(key).decrypt(nonce, ct, crypto.manifest_bytes()))
        except InvalidTag as exc:
            raise WalletError("bad passphrase") from exc
        state = WalletState(keypair=KeyPair(from_hex(doc["secret"])))
        state.auto_rules = [AutoRule.from_json(r_) for r_ in doc["auto_rules"]]
        if doc["emergency_policy"]:
            state.emergency_policy = EmergencyPolicy.from_public_data(doc["emergency_policy"])
        state.procurator = from_hex(doc["procurator"]) if doc["procurator"] else None
        state.published = {
            from_hex(link): {
                "patient": from_hex(info["patient"]),
                "tx_id": from_hex(info["tx_id"]),
            }
            for link, info in doc["published"].items()
        }
        state.grants_made = {
            from_hex(link): [(from_hex(g), from_hex(c)) for g, c in pairs]
            for link, pairs in doc["grants_made"].items()
        }
        state.inbox = [_item_from_state(d) for d in doc["inbox"]]
        state.inbox_seq = doc["inbox_seq"]
        return state


def _item_state(item: InboxItem) -> dict:
    doc = {"seq": item.seq, "kind": item.kind, "received_at": item.received_at}
    if item.task is not None:
        doc["task"] = {
            "request": tx_to_json(item.task.request),
            "record": tx_to_json(item.task.record),
            "credential": (
                item.task.requester_credential.to_json()
                if item.task.requester_credential
                else None
            ),
            "received_at": item.task.received_at,
        }
    if item.notice is not None:
        doc["notice"] = item.notice
    return doc


def _item_from_state(doc: dict) -> InboxItem:
    task = None
    if "task" in doc:
        t = doc["task"]
        task = DecisionTask(
            request=tx_from_json(t["request"]),
            record=tx_from_json(t["record"]),
            requester_credential=(
                Credential.from_json(t["credential"]) if t["credential"] else None
            ),
            received_at=t["received_at"],
        )
    return InboxItem(
        seq=doc["seq"],
        kind=doc["kind"],
        received_at=doc["received_at"],
        task=task,
        notice=doc.get("notice"),
    )
