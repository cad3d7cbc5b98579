import random
from dataclasses import replace

import pytest

from medledger import crypto
from medledger.clock import LogicalClock
from medledger.crypto import ZERO_DIGEST
from medledger.errors import TransactionError
from medledger.ledger import Chain, ProposerPolicy, seal_block
from medledger.transactions import (
    ACCESS_GRANTED,
    NEW_RECORD,
    NOTIFICATION,
    REQUEST_ACCESS,
    AccessGrantedTx,
    OverlayView,
    Transaction,
    build_access_granted,
    build_direct_grant,
    build_new_record,
    build_notification,
    build_request_access,
    make_transaction,
    tx_from_json,
    tx_to_json,
    validate_transaction,
)

from conftest import make_record_tx, seeded_keypair


@pytest.fixture
def view():
    return Chain.genesis()


def grown_view(*txs):
    """Chain view containing the given transactions (sealed in one block)."""
    chain = Chain.genesis()
    proposer = seeded_keypair("proposer")
    block = seal_block(
        chain.tip, list(txs), proposer, ProposerPolicy.simple_work(0), timestamp=1
    )
    return chain.extend_unchecked(block)


class TestBuilders:
    def test_new_record_validates(self, ky, kx, rng, clock, view):
        tx, _ = make_record_tx(ky, kx.public_id, b"payload", rng, clock)
        assert validate_transaction(tx, view)

    def test_optional_fields_omitted_still_valid(self, ky, kx, rng, clock, view):
        env = crypto.seal_envelope(b"payload", [kx.public_id, ky.public_id], rng)
        tx = build_new_record(
            ky, kx.public_id, env, env.payload_digest, None, None, clock=clock, rng=rng
        )
        assert tx.body.metadata == {}
        assert tx.body.public_data is None
        assert validate_transaction(tx, view)

    def test_wrong_digest_rejected(self, ky, kx, rng, clock):
        env = crypto.seal_envelope(b"payload", [kx.public_id], rng)
        with pytest.raises(TransactionError, match="fidelity mismatch"):
            build_new_record(
                ky, kx.public_id, env, crypto.digest(b"other"), clock=clock, rng=rng
            )

    def test_bad_metadata_key_rejected_at_build(self, ky, kx, rng, clock):
        env = crypto.seal_envelope(b"payload", [kx.public_id], rng)
        with pytest.raises(TransactionError, match="bad metadata key"):
            build_new_record(
                ky, kx.public_id, env, env.payload_digest, {"colour": "blue"},
                clock=clock, rng=rng,
            )

    def test_request_signature_verifies_under_requester(self, ky, kx, kz, rng, clock):
        record, _ = make_record_tx(ky, kx.public_id, b"payload", rng, clock)
        request = build_request_access(kz, record, clock=clock)
        assert crypto.verify(
            kz.public_id,
            record.body.sealed_link.to_bytes(),
            request.body.signed_sealed_link,
        )
        assert validate_transaction(request, grown_view(record))

    def test_request_against_non_record(self, ky, kx, kz, rng, clock):
        record, _ = make_record_tx(ky, kx.public_id, b"payload", rng, clock)
        request = build_request_access(kz, record, clock=clock)
        with pytest.raises(TransactionError, match="unknown record"):
            build_request_access(kz, request, clock=clock)

    def test_two_requests_have_distinct_ids(self, ky, kx, kz, rng, clock):
        record, _ = make_record_tx(ky, kx.public_id, b"payload", rng, clock)
        r1 = build_request_access(kz, record, clock=clock)
        r2 = build_request_access(kz, record, clock=clock)
        assert r1.tx_id != r2.tx_id
        assert r1.body.timestamp != r2.body.timestamp

    def test_grant_references_request(self, ky, kx, kz, rng, clock):
        record, _ = make_record_tx(ky, kx.public_id, b"payload", rng, clock)
        request = build_request_access(kz, record, clock=clock)
        view = grown_view(record, request)
        resealed = crypto.seal_for(kz.public_id, b"copy-link", rng)
        grant = build_access_granted(kx, request, resealed, view, clock=clock)
        assert grant.body.granting_request == request.tx_id
        assert not grant.body.emergency_flag
        assert validate_transaction(grant, view)

    def test_grant_by_non_owner_rejected(self, ky, kx, kz, rng, clock):
        record, _ = make_record_tx(ky, kx.public_id, b"payload", rng, clock)
        request = build_request_access(kz, record, clock=clock)
        view = grown_view(record, request)
        resealed = crypto.seal_for(kz.public_id, b"copy-link", rng)
        with pytest.raises(TransactionError, match="not owner"):
            build_access_granted(ky, request, resealed, view, clock=clock)

    def test_forged_request_signature_rejected(self, ky, kx, kz, rng, clock):
        record, _ = make_record_tx(ky, kx.public_id, b"payload", rng, clock)
        request = build_request_access(kz, record, clock=clock)
        sig = request.body.signed_sealed_link
        forged_body = replace(
            request.body, signed_sealed_link=bytes([sig[0] ^ 1]) + sig[1:]
        )
        forged = make_transaction(REQUEST_ACCESS, forged_body, kz)
        view = grown_view(record)
        resealed = crypto.seal_for(kz.public_id, b"copy-link", rng)
        with pytest.raises(TransactionError, match="identity unconfirmed"):
            build_access_granted(kx, forged, resealed, view, clock=clock)

    def test_notification_builds_from_event_count(self, ky, clock):
        # oracle: brute-force count of dengue-tagged case events in the period
        events = [("dengue", 100 * i) for i in range(1, 8)]
        period = (0, 7 * 24 * 3600 * 1000)
        expected = sum(1 for c, t in events if c == "dengue" and period[0] <= t < period[1])
        assert expected == 7
        tx = build_notification(ky, period, {"dengue": expected}, clock=clock)
        assert validate_transaction(tx, Chain.genesis())
        assert tx.body.condition_counts == {"dengue": 7}

    def test_degenerate_period_rejected(self, ky, clock):
        with pytest.raises(TransactionError, match="bad period"):
            build_notification(ky, (1000, 1000), {}, clock=clock)
        with pytest.raises(TransactionError, match="bad period"):
            build_notification(ky, (2000, 1000), {}, clock=clock)

    def test_empty_counts_valid(self, ky, clock):
        tx = build_notification(ky, (0, 1000), {}, clock=clock)
        assert validate_transaction(tx, Chain.genesis())


class TestValidation:
    def test_dangling_grant_rejected(self, kx, kz, rng, clock, view):
        resealed = crypto.seal_for(kz.public_id, b"copy-link", rng)
        body = AccessGrantedTx(
            timestamp=clock.tick(),
            patient=kx.public_id,
            grantee=kz.public_id,
            granted_link=resealed,
            emergency_flag=False,
            granting_request=crypto.digest(b"no such request"),
        )
        grant = make_transaction(ACCESS_GRANTED, body, kx)
        verdict = validate_transaction(grant, view)
        assert not verdict and verdict.reason == "dangling grant"

    def test_direct_grant_by_owner_accepted(self, kx, kz, rng, clock, view):
        grant = build_direct_grant(
            kx, kz.public_id, crypto.seal_for(kz.public_id, b"copy", rng), clock=clock
        )
        assert grant.body.granting_request == ZERO_DIGEST
        assert validate_transaction(grant, view)

    def test_emergency_grant_requires_registered_policy(self, kx, kz, rng, clock, view):
        grant = build_direct_grant(
            kx, kz.public_id, crypto.seal_for(kz.public_id, b"copy", rng),
            clock=clock, emergency_flag=True,
        )
        verdict = validate_transaction(grant, view)
        assert not verdict and verdict.reason == "no emergency policy"

    @pytest.mark.parametrize("count", range(11))
    def test_anonymity_threshold_enumeration(self, ky, clock, count):
        # oracle: with k=5 a count is admissible iff it is 0 or >= 5
        admissible = count == 0 or count >= 5
        tx = build_notification(ky, (0, 1000), {"dengue": count}, clock=clock)
        verdict = validate_transaction(tx, Chain.genesis(), anonymity_k=5)
        assert verdict.ok == admissible
        if not admissible:
            assert verdict.reason == "anonymity threshold"

    def test_author_role_mismatch_rejected(self, ky, kx, kz, rng, clock, view):
        tx, _ = make_record_tx(ky, kx.public_id, b"payload", rng, clock)
        resigned = make_transaction(NEW_RECORD, tx.body, kz)  # author != custodian
        verdict = validate_transaction(resigned, view)
        assert not verdict and verdict.reason == "wrong author"

    def test_unknown_metadata_key_rejected(self, ky, kx, rng, clock, view):
        tx, _ = make_record_tx(ky, kx.public_id, b"payload", rng, clock)
        mutated = make_transaction(
            NEW_RECORD, replace(tx.body, metadata={"colour": "blue"}), ky
        )
        verdict = validate_transaction(mutated, view)
        assert not verdict and verdict.reason == "bad metadata key"

    def test_request_for_foreign_patient_rejected(self, ky, kx, kz, rng, clock):
        record, _ = make_record_tx(ky, kx.public_id, b"payload", rng, clock)
        request = build_request_access(kz, record, clock=clock)
        other = seeded_keypair("other-patient")
        mutated = make_transaction(
            REQUEST_ACCESS, replace(request.body, patient=other.public_id), kz
        )
        verdict = validate_transaction(mutated, grown_view(record))
        assert not verdict and verdict.reason == "unknown record"


def random_transactions(seed, n=24):
    """A mixed batch of valid transactions of all four kinds."""
    rng = random.Random(seed)
    clock = LogicalClock()
    kx = seeded_keypair(f"rt-x-{seed}")
    ky = seeded_keypair(f"rt-y-{seed}")
    kz = seeded_keypair(f"rt-z-{seed}")
    out = []
    records = []
    for i in range(n):
        kind = rng.choice((NEW_RECORD, NEW_RECORD, REQUEST_ACCESS, ACCESS_GRANTED, NOTIFICATION))
        if kind == NEW_RECORD or not records:
            payload = rng.randbytes(rng.randint(1, 40))
            metadata = rng.choice(
                ({}, {"category": "exam"}, {"category": "encounter", "condition_code": "dengue"})
            )
            public_data = rng.choice((None, "", "public note"))
            tx, _ = make_record_tx(ky, kx.public_id, payload, rng, clock, metadata, public_data)
            records.append(tx)
            out.append(tx)
        elif kind == REQUEST_ACCESS:
            out.append(build_request_access(kz, rng.choice(records), clock=clock))
        elif kind == ACCESS_GRANTED:
            out.append(
                build_direct_grant(
                    kx, kz.public_id, crypto.seal_for(kz.public_id, b"copy", rng),
                    clock=clock,
                )
            )
        else:
            counts = {"dengue": rng.choice((0, 5, 9)), "tuberculosis": rng.choice((0, 7))}
            out.append(build_notification(ky, (0, 10_000), counts, clock=clock))
    return out


@pytest.mark.parametrize("seed", range(4))
def test_serialization_roundtrip_property(seed):
    for tx in random_transactions(seed):
        assert Transaction.from_bytes(tx.to_bytes()) == tx
        assert tx_from_json(tx_to_json(tx)) == tx


def test_tx_id_stable_and_content_sensitive(ky, kx, rng, clock):
    tx, env = make_record_tx(ky, kx.public_id, b"payload", rng, clock)
    rebuilt = Transaction.from_bytes(tx.to_bytes())
    assert rebuilt.tx_id == tx.tx_id
    # any body change yields a different id once re-signed
    bumped = make_transaction(NEW_RECORD, replace(tx.body, timestamp=999_999), ky)
    assert bumped.tx_id != tx.tx_id


def test_mutation_without_reid_is_rejected(ky, kx, kz, rng, clock):
    """Builder/validator closure: mutating any field while keeping the old
    tx id is always rejected (the id commits to the signed content)."""
    tx, _ = make_record_tx(ky, kx.public_id, b"payload", rng, clock)
    mutations = [
        replace(tx, author=kz.public_id),
        replace(tx, author_signature=bytes(64)),
        replace(tx, body=replace(tx.body, timestamp=tx.body.timestamp + 1)),
        replace(tx, body=replace(tx.body, public_data="injected")),
        replace(tx, body=replace(tx.body, data_digest=crypto.digest(b"other"))),
    ]
    view = Chain.genesis()
    for mutated in mutations:
        assert not validate_transaction(mutated, view)
