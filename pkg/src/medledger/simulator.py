"""Deterministic discrete-event simulator of the peer network: transaction
and chain gossip under latency, message drops, partitions, and byzantine
proposers, with convergence measurement.

One global event queue keyed by (logical time, sequence number) drives the
whole run; all randomness comes from a single seeded generator, so identical
configurations produce byte-identical event traces. Peers gossip whole
chains (desk scale): receivers re-validate candidates from genesis and adopt
strictly preferred ones, re-broadcasting on adoption, which doubles as the
drop/partition recovery mechanism.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import random
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable

from . import crypto
from .crypto import ZERO_DIGEST, KeyPair
from .encoding import enc_bytes, enc_str, enc_u64, to_hex
from .errors import QuiescentError, SimulationError
from .ledger import (
    Block,
    Chain,
    ProposerPolicy,
    RELIABILITY,
    choose_chain,
    seal_block,
    verify_chain,
)
from .transactions import (
    DEFAULT_ANONYMITY_K,
    OverlayView,
    Transaction,
    Verdict,
    validate_transaction,
)

HONEST = "honest"
INVALID_BLOCK = "invalid-block"
WITHHOLD = "withhold"
FORK_SPAM = "fork-spam"
STRATEGIES = (INVALID_BLOCK, WITHHOLD, FORK_SPAM)


@dataclass(frozen=True)
class NetworkConfig:
    peer_count: int
    latency: tuple[int, int] = (1, 500)
    drop_rate: float = 0.0
    partitions: tuple[tuple[int, int, tuple[frozenset[int], ...]], ...] = ()
    proposer_policy: ProposerPolicy = field(
        default_factory=lambda: ProposerPolicy.simple_work(8)
    )
    rng_seed: int = 0
    batch_size: int = 4
    anonymity_k: int = DEFAULT_ANONYMITY_K
    reliability_window: int = 60_000
    byzantine: tuple[tuple[int, str], ...] = ()

    def to_json(self) -> dict:
        return {
            "peer_count": self.peer_count,
            "latency": list(self.latency),
            "drop_rate": self.drop_rate,
            "partitions": [
                {"start": s, "end": e, "groups": [sorted(g) for g in groups]}
                for s, e, groups in self.partitions
            ],
            "proposer_policy": self.proposer_policy.to_json(),
            "rng_seed": self.rng_seed,
            "batch_size": self.batch_size,
            "anonymity_k": self.anonymity_k,
            "reliability_window": self.reliability_window,
            "byzantine": [[n, s] for n, s in self.byzantine],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "NetworkConfig":
        return cls(
            peer_count=doc["peer_count"],
            latency=tuple(doc.get("latency", (1, 500))),
            drop_rate=doc.get("drop_rate", 0.0),
            partitions=tuple(
                (p["start"], p["end"], tuple(frozenset(g) for g in p["groups"]))
                for p in doc.get("partitions", [])
            ),
            proposer_policy=ProposerPolicy.from_json(doc.get("proposer_policy", {})),
            rng_seed=doc.get("rng_seed", 0),
            batch_size=doc.get("batch_size", 4),
            anonymity_k=doc.get("anonymity_k", DEFAULT_ANONYMITY_K),
            reliability_window=doc.get("reliability_window", 60_000),
            byzantine=tuple((n, s) for n, s in doc.get("byzantine", [])),
        )


class EventTrace:
    """Replayable ordered log of processed events; its digest identifies a
    run."""

    def __init__(self):
        self.entries: list[tuple[int, str, bytes]] = []
        self._hasher = hashlib.sha256()

    def append(self, time: int, kind: str, payload_digest: bytes) -> None:
        self.entries.append((time, kind, payload_digest))
        self._hasher.update(enc_u64(time) + enc_str(kind) + enc_bytes(payload_digest))

    def digest(self) -> bytes:
        return self._hasher.copy().digest()

    def to_jsonl(self) -> str:
        return "\n".join(
            json.dumps({"time": t, "kind": k, "payload": to_hex(d)})
            for t, k, d in self.entries
        )


@dataclass
class PeerNode:
    node_id: int
    keypair: KeyPair
    chain: Chain
    behavior: str = HONEST
    uptime_start: int = 0
    known: dict[bytes, Transaction] = field(default_factory=dict)
    recent_times: deque = field(default_factory=deque)
    engine: object | None = None  # bound by scenario runtimes

    @property
    def honest(self) -> bool:
        return self.behavior == HONEST

    def mempool(self) -> list[Transaction]:
        return [
            tx
            for tx_id, tx in self.known.items()
            if self.chain.find_transaction(tx_id) is None
        ]

    def recent_tx_count(self, now: int, window: int) -> int:
        while self.recent_times and self.recent_times[0] < now - window:
            self.recent_times.popleft()
        return len(self.recent_times)


def proposer_eligibility(peer: PeerNode, policy: ProposerPolicy, now: int, *, window: int = 60_000) -> bool:
    """Under the reliability policy a peer may seal only with enough recent
    transactions and uptime; under simple work anyone may try (the work is
    the gate)."""
    if policy.variant != RELIABILITY:
        return True
    if peer.recent_tx_count(now, window) < policy.min_recent_tx:
        return False
    return now - peer.uptime_start >= policy.min_uptime


@dataclass
class ConvergenceReport:
    converged: bool
    quiescent: bool
    per_peer_tips: dict[int, str]
    honest_groups: list[list[int]]
    common_prefix_height: int
    event_count: int
    canonical_tx_count: int

    def to_json(self) -> dict:
        return {
            "converged": self.converged,
            "quiescent": self.quiescent,
            "per_peer_tips": {str(k): v for k, v in self.per_peer_tips.items()},
            "honest_groups": self.honest_groups,
            "common_prefix_height": self.common_prefix_height,
            "event_count": self.event_count,
            "canonical_tx_count": self.canonical_tx_count,
        }


class Simulation:
    def __init__(self, config: NetworkConfig):
        if config.peer_count < 1:
            raise SimulationError("need at least one peer")
        self.config = config
        self.rng = random.Random(config.rng_seed)
        self.now = 0
        self.trace = EventTrace()
        self._seq = 0
        self._queue: list[tuple[int, int, str, int, object]] = []
        self.peers = [
            PeerNode(
                node_id=i,
                keypair=crypto.keypair_from_seed(
                    crypto.digest(b"medledger/peer" + enc_u64(config.rng_seed) + enc_u64(i))
                ),
                chain=Chain.genesis(),
            )
            for i in range(config.peer_count)
        ]
        for node_id, strategy in config.byzantine:
            self.inject_adversary(node_id, strategy)
        self.byzantine_blocks: set[bytes] = set()
        self.adoptions: list[tuple[int, Chain]] = []
        self.event_count = 0
        # verified-candidate cache keyed by object identity; byzantine chains
        # may lie about their tip hash, so only identity is trustworthy
        self._verdicts: dict[int, tuple[Chain, Verdict]] = {}
        for start, end, _groups in config.partitions:
            if end <= start:
                raise SimulationError("bad partition window")
            self._schedule(end, "heal", -1, None)

    # -- scheduling ------------------------------------------------------------

    def _schedule(self, time: int, kind: str, dest: int, payload) -> None:
        self._seq += 1
        heapq.heappush(self._queue, (time, self._seq, kind, dest, payload))

    def _latency(self) -> int:
        lo, hi = self.config.latency
        return self.rng.randint(lo, hi)

    def _group_of(self, node_id: int, groups) -> frozenset[int] | None:
        for group in groups:
            if node_id in group:
                return group
        return None

    def _reachable(self, a: int, b: int) -> bool:
        for start, end, groups in self.config.partitions:
            if start <= self.now < end:
                if self._group_of(a, groups) is not self._group_of(b, groups):
                    return False
        return True

    def _send(self, src: int, dest: int, kind: str, payload) -> None:
        if not self._reachable(src, dest):
            return
        if self.config.drop_rate > 0 and self.rng.random() < self.config.drop_rate:
            return
        self._schedule(self.now + self._latency(), kind, dest, payload)

    def _broadcast(self, src: int, kind: str, payload) -> None:
        for peer in self.peers:
            if peer.node_id != src:
                self._send(src, peer.node_id, kind, payload)

    # -- public API ---------------------------------------------------------------

    def submit_transaction(self, origin: int, tx: Transaction) -> None:
        """Enqueue at the origin and schedule gossip deliveries to every
        reachable peer under the latency/drop model."""
        if not 0 <= origin < len(self.peers):
            raise SimulationError("unknown node")
        self._deliver_tx(self.peers[origin], tx)
        self._broadcast(origin, "tx", tx)

    def inject_adversary(self, node_id: int, strategy: str) -> None:
        if not 0 <= node_id < len(self.peers):
            raise SimulationError("unknown node")
        if strategy not in STRATEGIES:
            raise SimulationError(f"unknown strategy: {strategy}")
        self.peers[node_id].behavior = strategy

    def broadcast_chain(self, origin: int, chain: Chain) -> None:
        """Push an arbitrary chain into the gossip layer (tamper drills)."""
        if not 0 <= origin < len(self.peers):
            raise SimulationError("unknown node")
        self._broadcast(origin, "chain", chain)

    def step(self) -> None:
        """Process exactly one pending event."""
        if not self._queue:
            raise QuiescentError("quiescent")
        time, _seq, kind, dest, payload = heapq.heappop(self._queue)
        self.now = max(self.now, time)
        self.event_count += 1
        if kind == "tx":
            self.trace.append(self.now, kind, payload.tx_id)
            self._deliver_tx(self.peers[dest], payload)
        elif kind == "chain":
            self.trace.append(self.now, kind, payload.tip.block_hash)
            self._deliver_chain(self.peers[dest], payload)
        elif kind == "heal":
            self.trace.append(self.now, kind, ZERO_DIGEST)
            for peer in self.peers:
                if peer.behavior != WITHHOLD:
                    self._broadcast(peer.node_id, "chain", peer.chain)
        else:  # pragma: no cover - no other kinds are scheduled
            raise SimulationError(f"unknown event kind: {kind}")

    @property
    def pending_events(self) -> int:
        return len(self._queue)

    def run_until_idle(self, max_events: int) -> int:
        processed = 0
        while self._queue and processed < max_events:
            self.step()
            processed += 1
        return processed

    def run_to_quiescence(self, max_events: int = 50_000) -> ConvergenceReport:
        """Drain the queue, flushing leftover mempools through single-sealer
        rounds, until nothing remains or the event budget is exhausted."""
        budget = max_events
        while budget > 0:
            budget -= self.run_until_idle(budget)
            if self._queue:
                break  # budget exhausted mid-drain
            if not self._flush():
                break
        return self.report()

    # -- handlers ------------------------------------------------------------------

    def _admit(self, peer: PeerNode, tx: Transaction) -> bool:
        if tx.tx_id in peer.known:
            return False
        view = OverlayView(peer.chain, peer.mempool())
        verdict = validate_transaction(tx, view, anonymity_k=self.config.anonymity_k)
        if not verdict:
            return False
        peer.known[tx.tx_id] = tx
        peer.recent_times.append(self.now)
        return True

    def _deliver_tx(self, peer: PeerNode, tx: Transaction) -> None:
        if peer.behavior == INVALID_BLOCK:
            peer.known.setdefault(tx.tx_id, tx)
            self._emit_invalid_block(peer)
            return
        if peer.behavior == FORK_SPAM:
            peer.known.setdefault(tx.tx_id, tx)
            self._emit_fork_spam(peer, tx)
            return
        if self._admit(peer, tx):
            self._maybe_seal(peer, self.config.batch_size)

    def _deliver_chain(self, peer: PeerNode, candidate: Chain) -> None:
        chosen = choose_chain(
            peer.chain,
            candidate,
            self.config.proposer_policy,
            anonymity_k=self.config.anonymity_k,
            validator=self._verify_cached,
        )
        if chosen is peer.chain:
            return
        self._adopt(peer, chosen)
        # adoption re-broadcast doubles as drop recovery
        if peer.behavior != WITHHOLD:
            self._broadcast(peer.node_id, "chain", chosen)
        self._maybe_seal(peer, self.config.batch_size)

    def _verify_cached(self, candidate: Chain) -> Verdict:
        cached = self._verdicts.get(id(candidate))
        if cached is not None and cached[0] is candidate:
            return cached[1]
        verdict = verify_chain(
            candidate, self.config.proposer_policy, anonymity_k=self.config.anonymity_k
        )
        self._verdicts[id(candidate)] = (candidate, verdict)
        return verdict

    def _adopt(self, peer: PeerNode, chain: Chain) -> None:
        peer.chain = chain
        self.adoptions.append((peer.node_id, chain))

    # -- sealing ----------------------------------------------------------------------

    def _select_batch(self, peer: PeerNode, limit: int) -> list[Transaction]:
        """Longest valid prefix-consistent batch from the mempool."""
        batch: list[Transaction] = []
        overlay = OverlayView(peer.chain)
        for tx in peer.mempool():
            if len(batch) >= limit:
                break
            verdict = validate_transaction(tx, overlay, anonymity_k=self.config.anonymity_k)
            if verdict:
                batch.append(tx)
                overlay.add(tx)
        return batch

    def _maybe_seal(self, peer: PeerNode, min_txs: int) -> bool:
        if peer.behavior in (INVALID_BLOCK, FORK_SPAM):
            return False
        if not proposer_eligibility(
            peer, self.config.proposer_policy, self.now,
            window=self.config.reliability_window,
        ):
            return False
        batch = self._select_batch(peer, self.config.batch_size)
        if len(batch) < max(1, min_txs):
            return False
        block = seal_block(
            peer.chain.tip,
            batch,
            peer.keypair,
            self.config.proposer_policy,
            timestamp=self.now,
        )
        self._adopt(peer, peer.chain.extend_unchecked(block))
        if peer.behavior != WITHHOLD:
            self._broadcast(peer.node_id, "chain", peer.chain)
        return True

    def _flush(self) -> bool:
        """Seal leftover transactions on demand: one eligible peer (smallest
        id) per round so stragglers land without a fork storm."""
        for peer in self.peers:
            if peer.behavior in (INVALID_BLOCK, FORK_SPAM):
                continue
            if self._maybe_seal(peer, 1):
                return True
        return False

    # -- byzantine emissions -------------------------------------------------------------

    def _emit_invalid_block(self, peer: PeerNode) -> None:
        """A structurally linked block whose stored hash is wrong; honest
        validators reject it at the hash check."""
        txs = tuple(peer.known.values())[:1]
        block = Block(
            height=peer.chain.tip.height + 1,
            prev_hash=peer.chain.tip.block_hash,
            timestamp=self.now,
            transactions=txs,
            proposer=peer.keypair.public_id,
            proof=b"\x00" * 8,
            block_hash=b"\xff" * 32,
        )
        self.byzantine_blocks.add(block.block_hash)
        forged = peer.chain.extend_unchecked(block)
        self._broadcast(peer.node_id, "chain", forged)

    def _emit_fork_spam(self, peer: PeerNode, tx: Transaction) -> None:
        """A properly sealed chain restarted from genesis carrying one
        signature-corrupted transaction; full re-validation rejects it
        regardless of length."""
        bad_sig = bytes([tx.author_signature[0] ^ 0x01]) + tx.author_signature[1:]
        corrupt = replace(tx, author_signature=bad_sig)
        block = seal_block(
            Chain.genesis().tip,
            [corrupt],
            peer.keypair,
            self.config.proposer_policy,
            timestamp=self.now,
        )
        self.byzantine_blocks.add(block.block_hash)
        spam = Chain.genesis().extend_unchecked(block)
        self._broadcast(peer.node_id, "chain", spam)

    # -- reporting --------------------------------------------------------------------------

    def honest_peers(self) -> list[PeerNode]:
        return [p for p in self.peers if p.honest]

    def report(self) -> ConvergenceReport:
        honest = self.honest_peers()
        tips = {p.node_id: to_hex(p.chain.tip.block_hash) for p in self.peers}
        groups: dict[str, list[int]] = {}
        for p in honest:
            groups.setdefault(tips[p.node_id], []).append(p.node_id)
        honest_groups = sorted(groups.values())
        quiescent = not self._queue
        converged = quiescent and len(honest_groups) <= 1
        prefix = 0
        if honest:
            shortest = min(len(p.chain.blocks) for p in honest)
            for h in range(shortest):
                ref = honest[0].chain.blocks[h].block_hash
                if all(p.chain.blocks[h].block_hash == ref for p in honest):
                    prefix = h
                else:
                    break
        canonical = max(
            (len(p.chain.tx_ids()) for p in honest), default=0
        )
        return ConvergenceReport(
            converged=converged,
            quiescent=quiescent,
            per_peer_tips=tips,
            honest_groups=honest_groups,
            common_prefix_height=prefix,
            event_count=self.event_count,
            canonical_tx_count=canonical,
        )


def scan_honest_chains(sim: Simulation) -> Verdict:
    """Honest-safety audit: every chain an honest peer ever adopted must
    re-validate, and none may contain a byzantine-emitted block."""
    honest_ids = {p.node_id for p in sim.peers if p.honest}
    for node_id, chain in sim.adoptions:
        if node_id not in honest_ids:
            continue
        verdict = sim._verify_cached(chain)
        if not verdict:
            return verdict
        for block in chain.blocks:
            if block.block_hash in sim.byzantine_blocks:
                return Verdict(False, "byzantine block adopted", {"node": node_id})
    for peer in sim.peers:
        if peer.honest:
            for block in peer.chain.blocks:
                if block.block_hash in sim.byzantine_blocks:
                    return Verdict(False, "byzantine block adopted", {"node": peer.node_id})
    return Verdict(True)
