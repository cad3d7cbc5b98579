"""Smart-contract layer: deterministic validators and executors that admit
transactions into the mempool, route access decisions to wallets, enforce
break-the-glass policy, and gate notification anonymity.

The engine is a single logical event processor per node. Every executor
verdict (admit, deny, suppress, emergency audit) lands exactly once in the
append-only journal; remote re-validation of gossiped transactions goes
through admit_remote and is deliberately unjournaled so audit entries stay
unique.
"""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable

from . import crypto
from .clock import LogicalClock
from .crypto import KeyPair
from .encoding import to_hex
from .errors import GoneError, UnknownLinkError
from .ledger import Chain
from .policies import Credential, EmergencyPolicy
from .transactions import (
    ACCEPTED,
    ACCESS_GRANTED,
    DEFAULT_ANONYMITY_K,
    NEW_RECORD,
    REQUEST_ACCESS,
    OverlayView,
    Transaction,
    Verdict,
    build_notification,
    policy_from_record,
    rejected,
    validate_transaction,
)
from .store import RecordStore


@dataclass(frozen=True)
class DecisionTask:
    """Pending access decision routed to the data owner's wallet."""

    request: Transaction
    record: Transaction
    requester_credential: Credential | None
    received_at: int

    @property
    def task_id(self) -> str:
        return to_hex(self.request.tx_id)

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "requester": to_hex(self.request.body.requester),
            "patient": to_hex(self.request.body.patient),
            "record": to_hex(self.record.tx_id),
            "category": self.record.body.metadata.get("category"),
            "credential": (
                self.requester_credential.to_json()
                if self.requester_credential
                else None
            ),
            "received_at": self.received_at,
        }


class ContractEngine:
    """Contract context bound to one node's chain view and mempool."""

    def __init__(
        self,
        chain_provider: Callable[[], Chain],
        store: RecordStore | None = None,
        *,
        anonymity_k: int = DEFAULT_ANONYMITY_K,
        credential_authorities: Iterable[bytes] = (),
        clock: LogicalClock | None = None,
        rng: random.Random | None = None,
        submit: Callable[[Transaction], None] | None = None,
        mempool_provider: Callable[[], list[Transaction]] | None = None,
        route_task: Callable[[bytes, DecisionTask], None] | None = None,
        wallet_resolver: Callable[[bytes], object | None] | None = None,
        credential_lookup: Callable[[bytes], Credential | None] | None = None,
    ):
        self._chain_provider = chain_provider
        self.store = store
        self.anonymity_k = anonymity_k
        self.credential_authorities = frozenset(credential_authorities)
        self.clock = clock or LogicalClock()
        self.rng = rng
        self._submit_hook = submit
        self._mempool_provider = mempool_provider
        self._route_task = route_task
        self._wallet_resolver = wallet_resolver
        self._credential_lookup = credential_lookup
        self.mempool: dict[bytes, Transaction] = {}
        self.journal: list[dict] = []
        self._routed: set[bytes] = set()

    @property
    def chain(self) -> Chain:
        return self._chain_provider()

    def pending(self) -> list[Transaction]:
        """Transactions waiting to be sealed, seen from this node."""
        if self._mempool_provider is not None:
            return self._mempool_provider()
        return list(self.mempool.values())

    def view(self) -> OverlayView:
        """Chain state extended by pending transactions."""
        return OverlayView(self.chain, self.pending())

    def policy_registry(self) -> dict[bytes, EmergencyPolicy]:
        return {
            tx.body.patient: policy
            for tx in self.chain.transactions()
            if (policy := policy_from_record(tx)) is not None
        }

    # -- journal ---------------------------------------------------------------

    def _log(self, verdict: str, subject: str, reason: str | None = None, **extra) -> None:
        entry = {"time": self.clock.now, "verdict": verdict, "subject": subject}
        if reason is not None:
            entry["reason"] = reason
        entry.update(extra)
        self.journal.append(entry)

    def journal_jsonl(self) -> str:
        return "\n".join(json.dumps(e, sort_keys=True) for e in self.journal)

    # -- admission ---------------------------------------------------------------

    def _already_known(self, tx_id: bytes) -> bool:
        if self.chain.find_transaction(tx_id) is not None:
            return True
        if self._mempool_provider is not None:
            return any(t.tx_id == tx_id for t in self._mempool_provider())
        return tx_id in self.mempool

    def admit_remote(self, tx: Transaction) -> Verdict:
        """Re-validate a gossiped transaction; no journal entry."""
        if self._already_known(tx.tx_id):
            return rejected("replay")
        verdict = validate_transaction(tx, self.view(), anonymity_k=self.anonymity_k)
        if verdict:
            self.mempool[tx.tx_id] = tx
        return verdict

    def _admit(self, tx: Transaction, context: Iterable[Transaction] = ()) -> Verdict:
        if self._already_known(tx.tx_id):
            return rejected("replay")
        view = OverlayView(self.view(), context)
        verdict = validate_transaction(tx, view, anonymity_k=self.anonymity_k)
        if not verdict:
            return verdict
        if self._submit_hook is not None:
            self._submit_hook(tx)
        else:
            self.mempool[tx.tx_id] = tx
        return verdict

    # -- contract executors -------------------------------------------------------

    def exec_create_new_record(
        self, tx: Transaction, raw_link: bytes | None = None
    ) -> Verdict:
        """CreateNewRecord: a store fidelity check against the announced
        digest, then structural validity, then admission."""
        if tx.kind != NEW_RECORD:
            verdict: Verdict = rejected("invalid transaction")
        else:
            verdict = ACCEPTED
            if self.store is not None and raw_link is not None:
                try:
                    ok = (
                        crypto.digest(raw_link) == tx.body.link_digest
                        and self.store.verify_fidelity(raw_link, tx.body.data_digest)
                    )
                except (UnknownLinkError, GoneError):
                    ok = False
                if not ok:
                    verdict = rejected("fidelity mismatch")
            if verdict:
                verdict = self._admit(tx)
                if not verdict and verdict.reason != "replay":
                    verdict = rejected("invalid transaction", inner=verdict.reason)
        self._log(
            "admitted" if verdict else "rejected",
            to_hex(tx.tx_id),
            None if verdict else verdict.reason,
            kind=NEW_RECORD,
        )
        return verdict

    def exec_process_access_request(self, tx: Transaction) -> Verdict:
        """ProcessAccessRequest: admit the request and route a decision task
        to the data owner's wallet. The grant (or journaled denial) follows
        from the wallet's answer."""
        if tx.kind != REQUEST_ACCESS:
            verdict = rejected("invalid transaction")
        else:
            verdict = self._admit(tx)
        self._log(
            "admitted" if verdict else "rejected",
            to_hex(tx.tx_id),
            None if verdict else verdict.reason,
            kind=REQUEST_ACCESS,
        )
        if not verdict:
            return verdict
        if tx.tx_id not in self._routed and self._route_task is not None:
            record = self.view().find_transaction(tx.body.target_record)
            credential = None
            if self._credential_lookup is not None:
                credential = self._credential_lookup(tx.body.requester)
            task = DecisionTask(tx, record, credential, self.clock.now)
            self._routed.add(tx.tx_id)
            self._route_task(tx.body.patient, task)
        return verdict

    def admit_grant(self, tx: Transaction, context: Iterable[Transaction] = ()) -> Verdict:
        """Admit an access grant produced by a wallet decision. The answered
        request rides along as validation context because it may not have
        gossiped to this node yet."""
        if tx.kind != ACCESS_GRANTED:
            verdict = rejected("invalid transaction")
        else:
            verdict = self._admit(tx, context)
        self._log(
            "admitted" if verdict else "rejected",
            to_hex(tx.tx_id),
            None if verdict else verdict.reason,
            kind=ACCESS_GRANTED,
            emergency=bool(verdict and tx.body.emergency_flag),
        )
        return verdict

    def record_denial(self, request: Transaction, reason: str = "denied by owner") -> None:
        """Denials never touch the ledger; they live in the journal only."""
        self._log("denied", to_hex(request.tx_id), reason, kind=REQUEST_ACCESS)

    def exec_emergency_access(
        self,
        requester_credential: Credential,
        patient: bytes,
        condition_code: str,
        *,
        clock: LogicalClock | None = None,
    ) -> tuple[Verdict, list[Transaction]]:
        """Break the glass: a credentialed professional gains access to all
        non-restricted records of a patient whose pre-registered policy covers
        the credential class and the declared condition."""
        clock = clock or self.clock
        subject = to_hex(requester_credential.holder)
        policy = self.chain.emergency_policy_for(patient)
        if policy is None:
            self._log("rejected", subject, "no emergency policy", kind="emergency")
            return rejected("no emergency policy"), []
        if (
            requester_credential.issuer not in self.credential_authorities
            or not requester_credential.verifies()
        ):
            self._log("rejected", subject, "credential rejected", kind="emergency")
            return rejected("credential rejected"), []
        if requester_credential.credential_class not in policy.authorized_roles:
            self._log("rejected", subject, "credential rejected", kind="emergency")
            return rejected("credential rejected"), []
        if condition_code not in policy.conditions:
            self._log("rejected", subject, "condition not covered", kind="emergency")
            return rejected("condition not covered"), []

        wallet = self._wallet_resolver(patient) if self._wallet_resolver else None
        if wallet is None:
            self._log("rejected", subject, "wallet unreachable", kind="emergency")
            return rejected("wallet unreachable"), []

        grants = wallet.emergency_reseal(requester_credential.holder)
        admitted: list[Transaction] = []
        for grant in grants:
            if self.admit_grant(grant):
                admitted.append(grant)
        self._log(
            "emergency-grant",
            subject,
            None,
            credential_class=requester_credential.credential_class,
            condition=condition_code,
            patient=to_hex(patient),
            records=len(admitted),
            time_of_access=clock.now,
        )
        return Verdict(True), admitted

    def exec_aggregate_notifications(
        self,
        custodian: KeyPair,
        raw_case_events: Iterable[tuple[str, int]],
        period: tuple[int, int],
        *,
        zero_assertions: Iterable[str] = (),
        clock: LogicalClock | None = None,
    ) -> tuple[Verdict, Transaction | None]:
        """Aggregate case events into one notification. Conditions whose
        count falls strictly between zero and the anonymity threshold are
        suppressed and journaled; explicit zero assertions pass through."""
        clock = clock or self.clock
        start, end = period
        counts = Counter(
            condition for condition, t in raw_case_events if start <= t < end
        )
        report: dict[str, int] = {}
        for condition in sorted(counts):
            n = counts[condition]
            if 0 < n < self.anonymity_k:
                self._log(
                    "suppressed",
                    condition,
                    "anonymity threshold",
                    count=n,
                    k=self.anonymity_k,
                )
            else:
                report[condition] = n
        for condition in zero_assertions:
            report.setdefault(condition, 0)
        if not report:
            self._log("fully-suppressed", to_hex(custodian.public_id), None)
            return rejected("fully suppressed"), None
        tx = build_notification(custodian, period, report, clock=clock)
        verdict = self._admit(tx)
        self._log(
            "admitted" if verdict else "rejected",
            to_hex(tx.tx_id),
            None if verdict else verdict.reason,
            kind="notification",
        )
        return verdict, (tx if verdict else None)
