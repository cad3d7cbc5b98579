import random
from dataclasses import replace

import pytest

from medledger import crypto
from medledger.clock import LogicalClock
from medledger.policies import AutoRule, EmergencyPolicy, issue_credential
from medledger.transactions import (
    NEW_RECORD,
    build_request_access,
    make_transaction,
)

from conftest import World, make_record_tx, seeded_keypair


def publish(world, custodian_wallet, patient_wallet, text=b"record", metadata=None):
    link, tx = custodian_wallet.publish_encounter_record(
        patient_wallet.public_id, text, metadata or {"category": "exam"}
    )
    world.settle()
    return link, tx


class TestCreateNewRecord:
    def test_stored_record_admitted(self, world):
        yara = world.wallet("yara")
        xavier = world.wallet("xavier")
        link, tx = publish(world, yara, xavier)
        assert world.chain.find_transaction(tx.tx_id) is not None
        admitted = [e for e in world.engine(0).journal if e["verdict"] == "admitted"]
        assert len(admitted) == 1

    def test_digest_mismatch_rejected(self, world, rng, clock):
        yara = world.wallet("yara")
        xavier = world.wallet("xavier")
        env = crypto.seal_envelope(b"stored", [xavier.public_id, yara.public_id], world.rng)
        link = world.store.put_record(
            xavier.public_id, env, {yara.public_id}, clock=world.clock
        )
        lying_env = crypto.seal_envelope(b"claimed", [xavier.public_id, yara.public_id], world.rng)
        tx = make_transaction(
            NEW_RECORD,
            replace(
                make_record_tx(yara.keypair, xavier.public_id, b"claimed", world.rng, world.clock)[0].body,
                link_digest=crypto.digest(link),
            ),
            yara.keypair,
        )
        verdict = world.engine(0).exec_create_new_record(tx, raw_link=link)
        assert not verdict and verdict.reason == "fidelity mismatch"

    def test_unsigned_record_rejected(self, world):
        yara = world.wallet("yara")
        xavier = world.wallet("xavier")
        tx, env = make_record_tx(
            yara.keypair, xavier.public_id, b"payload", world.rng, world.clock
        )
        bad = replace(tx, author_signature=bytes(64))
        verdict = world.engine(0).exec_create_new_record(bad)
        assert not verdict and verdict.reason == "invalid transaction"


class TestProcessAccessRequest:
    def test_request_routed_and_auto_approved(self, world):
        yara = world.wallet("yara")
        xavier = world.wallet(
            "xavier", auto_rules=[AutoRule(decision="approve", category="exam")]
        )
        zoe = world.wallet("zoe", node=1)
        publish(world, yara, xavier)
        requests = zoe.request_record_access(xavier.public_id, {"category": "exam"})
        world.settle()
        assert len(requests) == 1
        grants = [
            tx for tx in world.chain.transactions()
            if tx.kind == "access-granted" and tx.body.grantee == zoe.public_id
        ]
        assert len(grants) == 1
        assert zoe.open_granted_record(grants[0]) == b"record"

    def test_denial_journaled_no_ledger_tx(self, world):
        yara = world.wallet("yara")
        xavier = world.wallet(
            "xavier", auto_rules=[AutoRule(decision="deny")]
        )
        zoe = world.wallet("zoe", node=1)
        publish(world, yara, xavier)
        zoe.request_record_access(xavier.public_id)
        world.settle()
        grants = [tx for tx in world.chain.transactions() if tx.kind == "access-granted"]
        assert grants == []
        denials = [e for e in world.engine(1).journal if e["verdict"] == "denied"]
        assert len(denials) == 1

    def test_request_for_unknown_record_rejected(self, world):
        yara = world.wallet("yara")
        xavier = world.wallet("xavier")
        zoe = world.wallet("zoe")
        record, _ = make_record_tx(
            yara.keypair, xavier.public_id, b"never announced", world.rng, world.clock
        )
        request = build_request_access(zoe.keypair, record, clock=world.clock)
        verdict = world.engine(0).exec_process_access_request(request)
        assert not verdict and verdict.reason == "unknown record"


class TestEmergencyAccess:
    def setup_world(self, restricted=False):
        world = World()
        yara = world.wallet("yara")
        xavier = world.wallet("xavier")
        erin = world.wallet("erin", node=1)
        credential = issue_credential(
            world.authority, erin.public_id, "emergency-physician"
        )
        erin.credential = credential
        xavier.configure_policy(
            emergency_policy=EmergencyPolicy(
                patient=xavier.public_id,
                authorized_roles=frozenset({"emergency-physician"}),
                conditions=frozenset({"unconscious"}),
            )
        )
        world.settle()
        publish(world, yara, xavier, b"allergy data", {"category": "encounter"})
        if restricted:
            publish(world, yara, xavier, b"sealed history", {"category": "restricted"})
        return world, xavier, erin, credential

    def test_matching_credential_grants_all_non_restricted(self):
        world, xavier, erin, credential = self.setup_world(restricted=True)
        verdict, grants = world.engine(1).exec_emergency_access(
            credential, xavier.public_id, "unconscious"
        )
        world.settle()
        assert verdict
        # policy registration record + the encounter record; restricted excluded
        assert len(grants) == 2
        assert all(g.body.emergency_flag for g in grants)
        payloads = {erin.open_granted_record(g) for g in grants}
        assert b"allergy data" in payloads
        assert b"sealed history" not in payloads
        audit = [e for e in world.engine(1).journal if e["verdict"] == "emergency-grant"]
        assert len(audit) == 1
        assert audit[0]["credential_class"] == "emergency-physician"
        assert audit[0]["condition"] == "unconscious"

    def test_no_policy_registered(self):
        world = World()
        xavier = world.wallet("xavier")
        erin = world.wallet("erin")
        credential = issue_credential(world.authority, erin.public_id, "emergency-physician")
        verdict, grants = world.engine(0).exec_emergency_access(
            credential, xavier.public_id, "unconscious"
        )
        assert not verdict and verdict.reason == "no emergency policy"
        assert grants == []

    def test_unconfigured_issuer_rejected(self):
        world, xavier, erin, _ = self.setup_world()
        rogue = seeded_keypair("rogue-authority")
        credential = issue_credential(rogue, erin.public_id, "emergency-physician")
        verdict, _ = world.engine(1).exec_emergency_access(
            credential, xavier.public_id, "unconscious"
        )
        assert not verdict and verdict.reason == "credential rejected"

    def test_wrong_class_rejected(self):
        world, xavier, erin, _ = self.setup_world()
        credential = issue_credential(world.authority, erin.public_id, "dentist")
        verdict, _ = world.engine(1).exec_emergency_access(
            credential, xavier.public_id, "unconscious"
        )
        assert not verdict and verdict.reason == "credential rejected"

    def test_uncovered_condition_rejected(self):
        world, xavier, erin, credential = self.setup_world()
        verdict, _ = world.engine(1).exec_emergency_access(
            credential, xavier.public_id, "routine checkup"
        )
        assert not verdict and verdict.reason == "condition not covered"


class TestAggregateNotifications:
    def events(self):
        return (
            [("dengue", 100 * i) for i in range(1, 8)]
            + [("malaria", 5000), ("malaria", 6000)]
        )

    def test_below_threshold_suppressed(self, world):
        yara = world.wallet("yara")
        events = self.events()
        # oracle: brute-force count per condition inside the period
        period = (0, 10_000)
        counts = {}
        for condition, t in events:
            if period[0] <= t < period[1]:
                counts[condition] = counts.get(condition, 0) + 1
        assert counts == {"dengue": 7, "malaria": 2}

        verdict, tx = world.engine(0).exec_aggregate_notifications(
            yara.keypair, events, period
        )
        assert verdict and tx is not None
        assert tx.body.condition_counts == {"dengue": 7}
        suppressed = [e for e in world.engine(0).journal if e["verdict"] == "suppressed"]
        assert [e["subject"] for e in suppressed] == ["malaria"]

    def test_k_one_reports_everything(self):
        world = World(anonymity_k=1)
        yara = world.wallet("yara")
        verdict, tx = world.engine(0).exec_aggregate_notifications(
            yara.keypair, self.events(), (0, 10_000)
        )
        assert verdict
        assert tx.body.condition_counts == {"dengue": 7, "malaria": 2}

    def test_zero_events_fully_suppressed(self, world):
        yara = world.wallet("yara")
        verdict, tx = world.engine(0).exec_aggregate_notifications(
            yara.keypair, [], (0, 10_000)
        )
        assert not verdict and verdict.reason == "fully suppressed"
        assert tx is None

    def test_zero_assertions_pass_through(self, world):
        yara = world.wallet("yara")
        verdict, tx = world.engine(0).exec_aggregate_notifications(
            yara.keypair, [("malaria", 100)], (0, 10_000), zero_assertions=["measles"]
        )
        assert verdict
        assert tx.body.condition_counts == {"measles": 0}

    def test_events_outside_period_ignored(self, world):
        yara = world.wallet("yara")
        events = [("dengue", 50_000 + i) for i in range(9)]
        verdict, tx = world.engine(0).exec_aggregate_notifications(
            yara.keypair, events, (0, 10_000)
        )
        assert not verdict and verdict.reason == "fully suppressed"


class TestEngineProperties:
    def test_determinism_replay(self):
        def run():
            world = World()
            yara = world.wallet("yara")
            xavier = world.wallet(
                "xavier", auto_rules=[AutoRule(decision="approve")]
            )
            zoe = world.wallet("zoe", node=1)
            publish(world, yara, xavier)
            zoe.request_record_access(xavier.public_id)
            world.settle()
            journal = [world.engine(n).journal for n in (0, 1)]
            return world.chain.tip.block_hash, journal

        tip1, journal1 = run()
        tip2, journal2 = run()
        assert tip1 == tip2
        assert journal1 == journal2

    def test_audit_completeness_one_entry_per_verdict(self, world):
        yara = world.wallet("yara")
        xavier = world.wallet("xavier", auto_rules=[AutoRule(decision="deny")])
        zoe = world.wallet("zoe", node=1)
        publish(world, yara, xavier)
        zoe.request_record_access(xavier.public_id)
        world.settle()
        # node 0: one admitted record; node 1: one admitted request + one denial
        verdicts0 = [e["verdict"] for e in world.engine(0).journal]
        verdicts1 = [e["verdict"] for e in world.engine(1).journal]
        assert verdicts0 == ["admitted"]
        assert verdicts1 == ["admitted", "denied"]

    def test_no_grant_without_authority_chain_scan(self):
        """Full-chain invariant: every grant answers a recorded request, or is
        a direct grant by the record owner, or is an emergency grant with a
        pre-registered policy."""
        world, xavier, erin, credential = TestEmergencyAccess().setup_world()
        world.engine(1).exec_emergency_access(credential, xavier.public_id, "unconscious")
        world.settle()
        chain = world.chain
        grants = [tx for tx in chain.transactions() if tx.kind == "access-granted"]
        assert grants
        for grant in grants:
            if grant.body.emergency_flag:
                assert chain.emergency_policy_for(grant.body.patient) is not None
            elif grant.body.granting_request != crypto.ZERO_DIGEST:
                request = chain.find_transaction(grant.body.granting_request)
                assert request is not None and request.kind == "request-access"
            else:
                assert grant.author == grant.body.patient
