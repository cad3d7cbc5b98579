"""Shared fixtures: deterministic identities, a transaction factory, and a
small wired world (store + engines + discovery + simulator) for wallet and
contract tests."""

from __future__ import annotations

import random

import pytest

from medledger import crypto
from medledger.clock import LogicalClock
from medledger.contracts import ContractEngine
from medledger.discovery import DiscoveryService
from medledger.ledger import Chain, ProposerPolicy
from medledger.simulator import NetworkConfig, Simulation
from medledger.store import RecordStore
from medledger.transactions import build_new_record
from medledger.wallet import Wallet, WalletDirectory


def seeded_keypair(tag: str) -> crypto.KeyPair:
    return crypto.keypair_from_seed(crypto.digest(b"test/" + tag.encode()))


@pytest.fixture
def rng():
    return random.Random(0xC0FFEE)


@pytest.fixture
def clock():
    return LogicalClock()


@pytest.fixture
def kx():
    return seeded_keypair("patient-x")


@pytest.fixture
def ky():
    return seeded_keypair("custodian-y")


@pytest.fixture
def kz():
    return seeded_keypair("professional-z")


def make_record_tx(custodian, patient_pub, payload, rng, clock, metadata=None, public_data=None):
    """A valid new-record transaction with a synthetic envelope."""
    recipients = [patient_pub]
    if custodian.public_id != patient_pub:
        recipients.append(custodian.public_id)
    envelope = crypto.seal_envelope(payload, recipients, rng)
    tx = build_new_record(
        custodian,
        patient_pub,
        envelope,
        envelope.payload_digest,
        metadata or {"category": "exam"},
        public_data,
        clock=clock,
        rng=rng,
    )
    return tx, envelope


class World:
    """A tiny wired deployment: one simulator, one shared store, a wallet
    directory, per-node contract engines, and two discovery replicas."""

    def __init__(self, peers=2, difficulty=0, batch_size=1, seed=7, anonymity_k=5,
                 latency=(0, 0)):
        self.config = NetworkConfig(
            peer_count=peers,
            latency=latency,
            proposer_policy=ProposerPolicy.simple_work(difficulty),
            rng_seed=seed,
            batch_size=batch_size,
            anonymity_k=anonymity_k,
        )
        self.sim = Simulation(self.config)
        self.clock = LogicalClock()
        self.store = RecordStore()
        self.directory = WalletDirectory()
        self.rng = random.Random(seed ^ 0xABCDEF)
        self._engines: dict[int, ContractEngine] = {}
        self.discovery = [
            DiscoveryService(lambda: self.sim.peers[0].chain, name="replica-0"),
            DiscoveryService(lambda: self.sim.peers[min(1, peers - 1)].chain, name="replica-1"),
        ]
        self.authority = seeded_keypair("authority")

    def engine(self, node: int = 0) -> ContractEngine:
        if node not in self._engines:
            self._engines[node] = ContractEngine(
                lambda: self.sim.peers[node].chain,
                self.store,
                anonymity_k=self.config.anonymity_k,
                credential_authorities=[self.authority.public_id],
                clock=self.clock,
                rng=self.rng,
                submit=lambda tx, _n=node: self.sim.submit_transaction(_n, tx),
                mempool_provider=lambda _n=node: self.sim.peers[_n].mempool(),
                route_task=self.directory.deliver_task,
                wallet_resolver=self.directory.resolve,
                credential_lookup=self.directory.credential_of,
            )
        return self._engines[node]

    def wallet(self, tag: str, node: int = 0, **kwargs) -> Wallet:
        return Wallet(
            seeded_keypair(tag),
            self.store,
            self.engine(node),
            self.discovery,
            directory=self.directory,
            clock=self.clock,
            rng=self.rng,
            **kwargs,
        )

    def settle(self):
        self.sim.now = max(self.sim.now, self.clock.now)
        self.sim.run_to_quiescence(20_000)
        self.clock.advance_to(self.sim.now + 1)
        for svc in self.discovery:
            svc.rebuild()

    @property
    def chain(self) -> Chain:
        return self.sim.peers[0].chain


@pytest.fixture
def world():
    return World()
