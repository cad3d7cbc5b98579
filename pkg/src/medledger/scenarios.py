"""Scenario driver: wires wallets, stores, engines, discovery replicas, and
the network simulator together, replays scripted usage flows, and emits
machine-readable reports.

Scenarios are data, not code: a JSON spec names the actors (seeded
identities), a script of actions (publish, request, decide, custodian-grant,
emergency, notify, tamper, revoke, query-discovery, set-policy, snapshot and
inline asserts), and the expected outcomes. Runs are fully deterministic
given the seeds, so reports are byte-stable and suitable for golden-file
comparison.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from . import crypto, discovery
from .clock import LogicalClock
from .contracts import ContractEngine
from .encoding import enc_u64, to_hex
from .errors import (
    ForbiddenError,
    GoneError,
    MedledgerError,
    ScenarioError,
    UnknownLinkError,
)
from .ledger import Chain, export_chain, import_chain, reseal_stream_checksum
from .policies import AutoRule, Credential, EmergencyPolicy, issue_credential
from .simulator import NetworkConfig, Simulation, scan_honest_chains
from .store import RecordStore, make_access_proof
from .transactions import (
    ACCESS_GRANTED,
    NOTIFICATION,
    Transaction,
)
from .wallet import CUSTODIAN_GRANT, Wallet, WalletDirectory

ACTIONS = (
    "publish",
    "request",
    "decide",
    "custodian-grant",
    "emergency",
    "notify",
    "tamper",
    "revoke",
    "query-discovery",
    "set-policy",
    "snapshot-chain",
    "assert",
)

ROLES = ("patient", "professional", "institution", "authority")

_SETTLE_BUDGET = 20_000


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    network: NetworkConfig
    actors: tuple[dict, ...]
    script: tuple[dict, ...]
    assertions: tuple[dict, ...] = ()
    emit_epidemic_view: bool = False

    @classmethod
    def from_json(cls, doc: dict) -> "ScenarioSpec":
        spec = cls(
            name=doc["name"],
            network=NetworkConfig.from_json(doc["network"]),
            actors=tuple(doc.get("actors", [])),
            script=tuple(doc.get("script", [])),
            assertions=tuple(doc.get("assertions", [])),
            emit_epidemic_view=doc.get("emit_epidemic_view", False),
        )
        spec.validate()
        return spec

    @classmethod
    def from_path(cls, path: Path | str) -> "ScenarioSpec":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def validate(self) -> None:
        names = [a.get("name") for a in self.actors]
        if len(names) != len(set(names)) or not all(names):
            raise ScenarioError("bad script: duplicate or missing actor names")
        for actor in self.actors:
            if actor.get("role") not in ROLES:
                raise ScenarioError(f"bad script: unknown role {actor.get('role')!r}")
            if "seed" not in actor:
                raise ScenarioError("bad script: actor without seed")
        known = set(names)
        actor_fields = ("custodian", "patient", "requester", "grantee", "actor", "owner", "approver")
        for step in self.script:
            action = step.get("action")
            if action not in ACTIONS:
                raise ScenarioError(f"bad script: unknown action {action!r}")
            for key in actor_fields:
                if key in step and step[key] not in known:
                    raise ScenarioError(f"bad script: undeclared actor {step[key]!r}")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "network": self.network.to_json(),
            "actors": list(self.actors),
            "script": list(self.script),
            "assertions": list(self.assertions),
            "emit_epidemic_view": self.emit_epidemic_view,
        }


@dataclass
class Actor:
    name: str
    role: str
    wallet: Wallet
    node_id: int
    credential_class: str | None = None


@dataclass
class RecordRef:
    label: str
    link: bytes
    tx: Transaction
    patient: str
    custodian: str


class ScenarioRuntime:
    """Everything one scenario run touches, plus the bookkeeping the
    assertion checks read."""

    def __init__(self, spec: ScenarioSpec):
        self.spec = spec
        self.sim = Simulation(spec.network)
        self.clock = LogicalClock()
        self.store = RecordStore()
        self.directory = WalletDirectory()
        self.rng = random.Random(
            int.from_bytes(crypto.digest(b"scenario" + enc_u64(spec.network.rng_seed)), "big")
        )
        self._engines: dict[int, ContractEngine] = {}
        self.actors: dict[str, Actor] = {}
        self.records: dict[str, RecordRef] = {}
        self.requests: dict[str, list[Transaction]] = {}
        self.grants_to: dict[str, list[Transaction]] = {}
        self.queries: dict[str, dict] = {}
        self.snapshots: dict[str, str] = {}
        self.assertion_results: list[dict] = []
        self.action_log: list[dict] = []

        byz_nodes = {n for n, _ in spec.network.byzantine}
        honest_nodes = [i for i in range(spec.network.peer_count) if i not in byz_nodes]
        if not honest_nodes:
            raise ScenarioError("bad script: no honest nodes")
        replica_nodes = (honest_nodes * 2)[:2]
        self.discovery_services = [
            discovery.DiscoveryService(
                self._chain_provider(node), name=f"replica-{i}"
            )
            for i, node in enumerate(replica_nodes)
        ]

        authorities = [
            crypto.keypair_from_seed(self._actor_seed(a["seed"]))
            for a in spec.actors
            if a["role"] == "authority"
        ]
        self._authority_keys = authorities
        self._authority_ids = frozenset(kp.public_id for kp in authorities)

        for i, doc in enumerate(spec.actors):
            node = doc.get("node", honest_nodes[i % len(honest_nodes)])
            if node in byz_nodes:
                raise ScenarioError("bad script: actor homed on byzantine node")
            keypair = crypto.keypair_from_seed(self._actor_seed(doc["seed"]))
            credential: Credential | None = None
            if doc.get("credential_class") and authorities:
                credential = issue_credential(
                    authorities[0], keypair.public_id, doc["credential_class"]
                )
            wallet = Wallet(
                keypair,
                self.store,
                self._engine(node),
                self.discovery_services,
                directory=self.directory,
                clock=self.clock,
                rng=self.rng,
                credential=credential,
            )
            self.actors[doc["name"]] = Actor(
                doc["name"], doc["role"], wallet, node, doc.get("credential_class")
            )

    def _actor_seed(self, seed: int) -> bytes:
        return crypto.digest(b"medledger/actor" + enc_u64(seed))

    def _chain_provider(self, node_id: int):
        return lambda: self.sim.peers[node_id].chain

    def _engine(self, node_id: int) -> ContractEngine:
        engine = self._engines.get(node_id)
        if engine is None:
            engine = ContractEngine(
                self._chain_provider(node_id),
                self.store,
                anonymity_k=self.spec.network.anonymity_k,
                credential_authorities=self._authority_ids,
                clock=self.clock,
                rng=self.rng,
                submit=lambda tx, _n=node_id: self.sim.submit_transaction(_n, tx),
                mempool_provider=lambda _n=node_id: self.sim.peers[_n].mempool(),
                route_task=self.directory.deliver_task,
                wallet_resolver=self.directory.resolve,
                credential_lookup=self.directory.credential_of,
            )
            self._engines[node_id] = engine
        return engine

    def _actor(self, name: str) -> Actor:
        actor = self.actors.get(name)
        if actor is None:
            raise ScenarioError(f"bad script: undeclared actor {name!r}")
        return actor

    def _record(self, label: str) -> RecordRef:
        record = self.records.get(label)
        if record is None:
            raise ScenarioError(f"bad script: unknown record label {label!r}")
        return record

    def canonical_chain(self) -> Chain:
        for peer in self.sim.peers:
            if peer.honest:
                return peer.chain
        return self.sim.peers[0].chain

    def settle(self) -> None:
        """Advance the network to quiescence and refresh discovery."""
        self.sim.now = max(self.sim.now, self.clock.now)
        self.sim.run_to_quiescence(_SETTLE_BUDGET)
        self.clock.advance_to(self.sim.now + 1)
        for svc in self.discovery_services:
            svc.rebuild()

    # -- actions -----------------------------------------------------------------

    def run_script(self) -> None:
        for step in self.spec.script:
            self._run_action(step)
        for i, check in enumerate(self.spec.assertions):
            self._record_assertion(check, origin=f"assertion[{i}]")

    def _run_action(self, step: dict) -> None:
        action = step["action"]
        self.sim.now = max(self.sim.now, self.clock.now)
        handler = getattr(self, "_do_" + action.replace("-", "_"))
        handler(step)

    def _do_publish(self, step: dict) -> None:
        custodian = self._actor(step["custodian"])
        patient = self._actor(step["patient"])
        link, tx = custodian.wallet.publish_encounter_record(
            patient.wallet.public_id,
            step["text"].encode("utf-8"),
            step.get("metadata"),
            step.get("public_data"),
        )
        label = step.get("label", f"record-{len(self.records)}")
        self.records[label] = RecordRef(label, link, tx, patient.name, custodian.name)
        self.action_log.append({"action": "publish", "label": label, "tx": to_hex(tx.tx_id)})
        self.settle()

    def _do_set_policy(self, step: dict) -> None:
        patient = self._actor(step["patient"])
        auto_rules = None
        if "auto_rules" in step:
            auto_rules = [AutoRule.from_json(r) for r in step["auto_rules"]]
        emergency = None
        if "authorized_roles" in step or "conditions" in step:
            emergency = EmergencyPolicy(
                patient=patient.wallet.public_id,
                authorized_roles=frozenset(step.get("authorized_roles", ())),
                conditions=frozenset(step.get("conditions", ())),
            )
        procurator = None
        if "procurator" in step:
            procurator = self._actor(step["procurator"]).wallet.public_id
        tx = patient.wallet.configure_policy(auto_rules, emergency, procurator)
        self.action_log.append(
            {"action": "set-policy", "patient": patient.name,
             "registered": to_hex(tx.tx_id) if tx else None}
        )
        if tx is not None:
            self.settle()

    def _do_request(self, step: dict) -> None:
        requester = self._actor(step["requester"])
        patient = self._actor(step["patient"])
        txs = requester.wallet.request_record_access(
            patient.wallet.public_id, step.get("selection")
        )
        label = step.get("label", f"requests-{len(self.requests)}")
        self.requests[label] = txs
        self.action_log.append(
            {"action": "request", "label": label, "count": len(txs)}
        )
        self.settle()

    def _do_decide(self, step: dict) -> None:
        patient = self._actor(step["patient"])
        approver = None
        if "approver" in step:
            approver = self._actor(step["approver"]).wallet.keypair
        decided = []
        for task in list(patient.wallet.pending_tasks()):
            decision, grant = patient.wallet.decide_access_request(
                task.task_id, step["decision"], approver=approver
            )
            decided.append({"task": task.task_id, "decision": decision})
            if grant is not None:
                grantee_name = self._name_of(grant.body.grantee)
                self.grants_to.setdefault(grantee_name, []).append(grant)
        self.action_log.append(
            {"action": "decide", "patient": patient.name, "decided": decided}
        )
        self.settle()

    def _do_custodian_grant(self, step: dict) -> None:
        custodian = self._actor(step["custodian"])
        grantee = self._actor(step["grantee"])
        record = self._record(step["record"])
        grant = custodian.wallet.grant_from_custodian(
            grantee.wallet.public_id, record.link
        )
        self.grants_to.setdefault(grantee.name, []).append(grant)
        self.action_log.append(
            {"action": "custodian-grant", "record": record.label, "tx": to_hex(grant.tx_id)}
        )
        self.settle()

    def _do_emergency(self, step: dict) -> None:
        requester = self._actor(step["requester"])
        patient = self._actor(step["patient"])
        if requester.wallet.credential is None:
            raise ScenarioError("bad script: emergency requester without credential")
        engine = self._engine(requester.node_id)
        verdict, grants = engine.exec_emergency_access(
            requester.wallet.credential,
            patient.wallet.public_id,
            step["condition"],
            clock=self.clock,
        )
        for grant in grants:
            self.grants_to.setdefault(requester.name, []).append(grant)
        self.action_log.append(
            {
                "action": "emergency",
                "requester": requester.name,
                "ok": bool(verdict),
                "reason": verdict.reason,
                "grants": len(grants),
            }
        )
        self.settle()

    def _do_notify(self, step: dict) -> None:
        custodian = self._actor(step["custodian"])
        engine = self._engine(custodian.node_id)
        events = [(c, t) for c, t in step.get("events", [])]
        verdict, tx = engine.exec_aggregate_notifications(
            custodian.wallet.keypair,
            events,
            tuple(step["period"]),
            zero_assertions=step.get("zero", ()),
            clock=self.clock,
        )
        self.action_log.append(
            {
                "action": "notify",
                "custodian": custodian.name,
                "ok": bool(verdict),
                "reason": verdict.reason,
                "tx": to_hex(tx.tx_id) if tx else None,
            }
        )
        self.settle()

    def _do_tamper(self, step: dict) -> None:
        node = step.get("node", 0)
        source = self.sim.peers[node].chain
        raw = bytearray(export_chain(source, self.spec.network.proposer_policy))
        offset = step.get("byte_offset")
        if offset is None:
            # default lands mid-way into the tip block's bytes
            offset = len(raw) - 36 - len(source.tip.to_bytes()) // 2
        raw[offset] ^= 0x01
        outcome = "broadcast"
        try:
            # the drill adversary repairs outer integrity but cannot forge
            # the hash links inside
            blocks, _ = import_chain(reseal_stream_checksum(bytes(raw)))
            forged = Chain.genesis()
            for block in blocks[1:]:
                forged = forged.extend_unchecked(block)
            original_hashes = {b.block_hash for b in source.blocks}
            for block in forged.blocks:
                if block.block_hash not in original_hashes:
                    self.sim.byzantine_blocks.add(block.block_hash)
            self.sim.broadcast_chain(node, forged)
        except MedledgerError:
            outcome = "rejected at decode"
        self.action_log.append(
            {"action": "tamper", "node": node, "byte_offset": offset, "outcome": outcome}
        )
        self.settle()

    def _do_revoke(self, step: dict) -> None:
        patient = self._actor(step["patient"])
        record = self._record(step["record"])
        patient.wallet.revoke_record(record.link, step["mode"])
        self.action_log.append(
            {"action": "revoke", "record": record.label, "mode": step["mode"]}
        )

    def _do_query_discovery(self, step: dict) -> None:
        actor = self._actor(step["actor"])
        owner = self._actor(step["owner"])
        chain = self.sim.peers[actor.node_id].chain
        replies = []
        for svc in self.discovery_services:
            query, answer = svc.query_by_owner(owner.wallet.public_id)
            replies.append(
                {
                    "replica": svc.name,
                    "verified": discovery.verify_answer(chain, query, answer),
                    "indexed_height": answer["indexed_height"],
                    "count": len(answer["result"]),
                }
            )
        label = step.get("label", f"query-{len(self.queries)}")
        self.queries[label] = {"owner": owner.name, "replies": replies}
        self.action_log.append({"action": "query-discovery", "label": label})

    def _do_snapshot_chain(self, step: dict) -> None:
        label = step.get("label", f"snapshot-{len(self.snapshots)}")
        self.snapshots[label] = to_hex(self.canonical_chain().tip.block_hash)
        self.action_log.append({"action": "snapshot-chain", "label": label})

    def _do_assert(self, step: dict) -> None:
        check = {k: v for k, v in step.items() if k != "action"}
        self._record_assertion(check, origin=f"inline[{len(self.assertion_results)}]")

    def _name_of(self, public_id: bytes) -> str:
        for actor in self.actors.values():
            if actor.wallet.public_id == public_id:
                return actor.name
        return to_hex(public_id)[:16]

    # -- assertion checks -----------------------------------------------------------

    def _record_assertion(self, check: dict, origin: str) -> None:
        name = check.get("name", f"{check.get('check', '?')}@{origin}")
        try:
            passed, detail = self._evaluate(check)
        except MedledgerError as exc:
            passed, detail = False, {"error": f"{type(exc).__name__}: {exc}"}
        self.assertion_results.append(
            {"name": name, "check": check.get("check"), "passed": passed, "detail": detail}
        )

    def _evaluate(self, check: dict) -> tuple[bool, dict]:
        kind = check.get("check")
        handler = _CHECKS.get(kind)
        if handler is None:
            raise ScenarioError(f"bad script: unknown check {kind!r}")
        return handler(self, check)

    def _read_via_grants(self, actor: Actor, record: RecordRef):
        """Try every grant the actor received; return plaintext matching the
        record, or the failure names."""
        failures = []
        for grant in self.grants_to.get(actor.name, ()):
            try:
                plaintext = actor.wallet.open_granted_record(grant)
            except MedledgerError as exc:
                failures.append(type(exc).__name__)
                continue
            if crypto.digest(plaintext) == record.tx.body.data_digest:
                return plaintext, failures
        return None, failures

    def check_converged(self, check: dict) -> tuple[bool, dict]:
        report = self.sim.report()
        return report.converged, {
            "honest_groups": report.honest_groups,
            "event_count": report.event_count,
        }

    def check_grantee_reads_original(self, check: dict) -> tuple[bool, dict]:
        actor = self._actor(check["grantee"])
        record = self._record(check["record"])
        plaintext, failures = self._read_via_grants(actor, record)
        if plaintext is None:
            return False, {"failures": failures}
        ok = crypto.digest(plaintext) == record.tx.body.data_digest
        return ok, {"digest": to_hex(crypto.digest(plaintext))}

    def check_cannot_read(self, check: dict) -> tuple[bool, dict]:
        actor = self._actor(check["actor"])
        record = self._record(check["record"])
        plaintext, failures = self._read_via_grants(actor, record)
        if plaintext is not None:
            return False, {"via": "grant"}
        try:
            envelope = self.store.get_record(
                record.link, make_access_proof(actor.wallet.keypair, record.link, self.rng)
            )
        except (ForbiddenError, GoneError, UnknownLinkError) as exc:
            return True, {"store": type(exc).__name__, "grant_failures": failures}
        try:
            crypto.open_envelope(envelope, actor.wallet.keypair)
        except MedledgerError as exc:
            return True, {"store": "readable", "envelope": type(exc).__name__}
        return False, {"via": "store"}

    def check_store_gone(self, check: dict) -> tuple[bool, dict]:
        actor = self._actor(check["actor"])
        record = self._record(check["record"])
        try:
            self.store.get_record(
                record.link, make_access_proof(actor.wallet.keypair, record.link, self.rng)
            )
        except GoneError:
            return True, {}
        except MedledgerError as exc:
            return False, {"error": type(exc).__name__}
        return False, {"error": "still readable"}

    def check_inbox_count(self, check: dict) -> tuple[bool, dict]:
        actor = self._actor(check["actor"])
        kind = check.get("kind", CUSTODIAN_GRANT)
        count = sum(1 for item in actor.wallet.inbox if item.kind == kind)
        return count == check["expect"], {"count": count}

    def check_request_count(self, check: dict) -> tuple[bool, dict]:
        count = len(self.requests.get(check["label"], ()))
        return count == check["expect"], {"count": count}

    def check_grant_on_chain(self, check: dict) -> tuple[bool, dict]:
        grantee = self._actor(check["grantee"]).wallet.public_id
        grants = [
            tx
            for tx in self.canonical_chain().transactions()
            if tx.kind == ACCESS_GRANTED and tx.body.grantee == grantee
        ]
        if "emergency" in check:
            grants = [g for g in grants if g.body.emergency_flag == check["emergency"]]
        count = len(grants)
        expect = check.get("expect")
        ok = count == expect if expect is not None else count > 0
        return ok, {"count": count}

    def check_no_grant_on_chain(self, check: dict) -> tuple[bool, dict]:
        ok, detail = self.check_grant_on_chain({**check, "expect": 0})
        return ok, detail

    def check_notification_counts(self, check: dict) -> tuple[bool, dict]:
        expect = check.get("expect", {})
        absent = check.get("absent", [])
        seen: dict[str, int] = {}
        for tx in self.canonical_chain().transactions():
            if tx.kind == NOTIFICATION:
                for condition, count in tx.body.condition_counts.items():
                    seen[condition] = seen.get(condition, 0) + count
        ok = all(seen.get(c) == n for c, n in expect.items()) and not any(
            c in seen for c in absent
        )
        return ok, {"seen": dict(sorted(seen.items()))}

    def check_anonymity_gate(self, check: dict) -> tuple[bool, dict]:
        k = check.get("k", self.spec.network.anonymity_k)
        violations = []
        for tx in self.canonical_chain().transactions():
            if tx.kind == NOTIFICATION:
                for condition, count in tx.body.condition_counts.items():
                    if 0 < count < k:
                        violations.append({"condition": condition, "count": count})
        return not violations, {"violations": violations}

    def check_journal_has(self, check: dict) -> tuple[bool, dict]:
        wanted_verdict = check.get("verdict")
        wanted_subject = check.get("subject")
        for engine in self._engines.values():
            for entry in engine.journal:
                if wanted_verdict and entry.get("verdict") != wanted_verdict:
                    continue
                if wanted_subject and entry.get("subject") != wanted_subject:
                    continue
                return True, {"entry": entry}
        return False, {}

    def check_no_byzantine_block(self, check: dict) -> tuple[bool, dict]:
        verdict = scan_honest_chains(self.sim)
        return verdict.ok, {} if verdict.ok else {"reason": verdict.reason, **verdict.detail}

    def check_chain_digest_unchanged(self, check: dict) -> tuple[bool, dict]:
        snapshot = self.snapshots.get(check["snapshot"])
        current = to_hex(self.canonical_chain().tip.block_hash)
        return snapshot == current, {"snapshot": snapshot, "current": current}

    def check_discovery_verified(self, check: dict) -> tuple[bool, dict]:
        query = self.queries.get(check["query"])
        if query is None:
            return False, {"error": "no such query"}
        replies = query["replies"]
        ok = all(r["verified"] for r in replies)
        if "expect_count" in check:
            ok = ok and all(r["count"] == check["expect_count"] for r in replies)
        return ok, {"replies": replies}

    def check_epidemic_consistent(self, check: dict) -> tuple[bool, dict]:
        view = epidemic_view_from_chain(self.canonical_chain())
        condition = check["condition"]
        count = check["count"]
        tagged = view["record_tags"].get(condition, 0)
        notified = view["totals"].get(condition, 0)
        return tagged == count and notified == count, {
            "tagged": tagged, "notified": notified
        }

    def check_epidemic_anonymous(self, check: dict) -> tuple[bool, dict]:
        view = epidemic_view_from_chain(self.canonical_chain())
        blob = json.dumps(view, sort_keys=True)
        leaked = []
        for actor in self.actors.values():
            if actor.role == "patient":
                if to_hex(actor.wallet.public_id) in blob:
                    leaked.append(actor.name)
        return not leaked, {"leaked": leaked}

    # -- report -----------------------------------------------------------------------

    def build_report(self) -> dict:
        sim_report = self.sim.report()
        chain = self.canonical_chain()
        report = {
            "name": self.spec.name,
            "manifest": dict(crypto.MANIFEST),
            "seed": self.spec.network.rng_seed,
            "network": self.spec.network.to_json(),
            "assertions": self.assertion_results,
            "passed": all(a["passed"] for a in self.assertion_results),
            "final_chain": {
                "height": chain.height,
                "tip": to_hex(chain.tip.block_hash),
                "tx_count": len(chain.tx_ids()),
            },
            "convergence": sim_report.to_json(),
            "trace_digest": to_hex(self.sim.trace.digest()),
            "journals": {
                str(node): engine.journal for node, engine in sorted(self._engines.items())
            },
            "inboxes": {
                name: actor.wallet.inbox_json() for name, actor in sorted(self.actors.items())
            },
            "queries": self.queries,
            "actions": self.action_log,
        }
        if self.spec.emit_epidemic_view:
            report["epidemic_view"] = epidemic_view_from_chain(chain)
        return report


_CHECKS = {
    "converged": ScenarioRuntime.check_converged,
    "grantee-reads-original": ScenarioRuntime.check_grantee_reads_original,
    "cannot-read": ScenarioRuntime.check_cannot_read,
    "store-gone": ScenarioRuntime.check_store_gone,
    "inbox-count": ScenarioRuntime.check_inbox_count,
    "request-count": ScenarioRuntime.check_request_count,
    "grant-on-chain": ScenarioRuntime.check_grant_on_chain,
    "no-grant-on-chain": ScenarioRuntime.check_no_grant_on_chain,
    "notification-counts": ScenarioRuntime.check_notification_counts,
    "anonymity-gate": ScenarioRuntime.check_anonymity_gate,
    "journal-has": ScenarioRuntime.check_journal_has,
    "no-byzantine-block": ScenarioRuntime.check_no_byzantine_block,
    "chain-digest-unchanged": ScenarioRuntime.check_chain_digest_unchanged,
    "discovery-verified": ScenarioRuntime.check_discovery_verified,
    "epidemic-consistent": ScenarioRuntime.check_epidemic_consistent,
    "epidemic-anonymous": ScenarioRuntime.check_epidemic_anonymous,
}


def run_scenario(spec: ScenarioSpec) -> tuple[dict, ScenarioRuntime]:
    """Execute a scenario and return (report, runtime). The runtime carries
    the trace and chains for figure rendering and deeper inspection."""
    runtime = ScenarioRuntime(spec)
    runtime.run_script()
    runtime.settle()
    return runtime.build_report(), runtime


def emit_report(report: dict, fmt: str = "json") -> str:
    """json form is byte-stable (sorted keys) for golden comparison; text
    form lists each assertion with pass/fail."""
    if fmt == "json":
        return json.dumps(report, sort_keys=True, indent=2) + "\n"
    if fmt != "text":
        raise ScenarioError(f"unknown report format: {fmt}")
    lines = [
        f"scenario: {report['name']}",
        f"seed: {report['seed']}",
        f"chain height: {report['final_chain']['height']} "
        f"tip: {report['final_chain']['tip'][:16]}...",
        f"converged: {report['convergence']['converged']}",
        "assertions:",
    ]
    for entry in report["assertions"]:
        mark = "PASS" if entry["passed"] else "FAIL"
        lines.append(f"  [{mark}] {entry['name']}")
        if not entry["passed"]:
            lines.append(f"         detail: {json.dumps(entry['detail'], sort_keys=True)}")
    lines.append(f"result: {'PASS' if report['passed'] else 'FAIL'}")
    return "\n".join(lines) + "\n"


def epidemic_view_from_chain(chain: Chain) -> dict:
    """Population-health view: per-condition counts from record metadata tags
    and from notification transactions. Contains no identities."""
    tags: dict[str, int] = {}
    for _, tx in chain.new_records():
        condition = tx.body.metadata.get("condition_code")
        if condition:
            tags[condition] = tags.get(condition, 0) + 1
    notifications = []
    totals: dict[str, int] = {}
    for tx in chain.transactions():
        if tx.kind == NOTIFICATION:
            counts = dict(sorted(tx.body.condition_counts.items()))
            notifications.append(
                {
                    "period_start": tx.body.period_start,
                    "period_end": tx.body.period_end,
                    "counts": counts,
                }
            )
            for condition, count in counts.items():
                totals[condition] = totals.get(condition, 0) + count
    notifications.sort(key=lambda n: (n["period_start"], n["period_end"]))
    return {
        "record_tags": dict(sorted(tags.items())),
        "notifications": notifications,
        "totals": dict(sorted(totals.items())),
    }


def run_epidemic_view(spec: ScenarioSpec) -> dict:
    """Run the scenario and return its aggregate population-health view."""
    _, runtime = run_scenario(spec)
    return epidemic_view_from_chain(runtime.canonical_chain())


# ---------------------------------------------------------------------------
# Bundled scenarios
# ---------------------------------------------------------------------------

def bundled_scenario_names() -> list[str]:
    root = resources.files("medledger") / "data" / "scenarios"
    return sorted(p.name[: -len(".json")] for p in root.iterdir() if p.name.endswith(".json"))

def load_bundled_scenario(name: str) -> ScenarioSpec:
    root = resources.files("medledger") / "data" / "scenarios"
    path = root / f"{name}.json"
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ScenarioError(f"no bundled scenario named {name!r}") from exc
    return ScenarioSpec.from_json(json.loads(text))


def load_scenario(name_or_path: str) -> ScenarioSpec:
    """Accept a bundled scenario name or a path to a spec file."""
    path = Path(name_or_path)
    if path.suffix == ".json" and path.exists():
        return ScenarioSpec.from_path(path)
    return load_bundled_scenario(name_or_path)
