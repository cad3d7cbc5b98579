"""Hash-linked block and chain maintenance: sealing under a proposer policy,
validation, tamper detection, and longest-chain fork choice with the
earliest-tip tie rule.

Chains are immutable values built from a fixed embedded genesis block. Every
derived state (transaction index, per-owner record lists, registered
emergency policies) is rebuilt incrementally on extension, so a Chain doubles
as the validation view for its own tip state.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

from . import crypto
from .crypto import DIGEST_LEN, PUBLIC_ID_LEN, ZERO_DIGEST, KeyPair
from .encoding import DecodeError, Reader, enc_bytes, enc_u64, to_hex
from .errors import LedgerError, SealBudgetExceeded
from .policies import EmergencyPolicy
from .transactions import (
    ACCEPTED,
    DEFAULT_ANONYMITY_K,
    NEW_RECORD,
    OverlayView,
    Transaction,
    Verdict,
    policy_from_record,
    rejected,
    validate_transaction,
)

CHAIN_MAGIC = b"MLEDGER1"
MAX_BLOCK_TXS = 64
DEFAULT_SEAL_BUDGET = 1 << 24

SIMPLE_WORK = "simple-work"
RELIABILITY = "reliability"


@dataclass(frozen=True)
class ProposerPolicy:
    """Gate on who may seal blocks: a hash-work target, or an eligibility
    rule over recent activity and uptime with a proposer signature as proof."""

    variant: str
    difficulty: int = 0
    min_recent_tx: int = 0
    min_uptime: int = 0

    def __post_init__(self):
        if self.variant not in (SIMPLE_WORK, RELIABILITY):
            raise LedgerError(f"unknown proposer policy: {self.variant}")
        if self.difficulty < 0 or self.min_recent_tx < 0 or self.min_uptime < 0:
            raise LedgerError("negative policy parameter")

    @classmethod
    def simple_work(cls, difficulty: int) -> "ProposerPolicy":
        return cls(SIMPLE_WORK, difficulty=difficulty)

    @classmethod
    def reliability(cls, min_recent_tx: int, min_uptime: int) -> "ProposerPolicy":
        return cls(RELIABILITY, min_recent_tx=min_recent_tx, min_uptime=min_uptime)

    def to_json(self) -> dict:
        if self.variant == SIMPLE_WORK:
            return {"variant": self.variant, "difficulty": self.difficulty}
        return {
            "variant": self.variant,
            "min_recent_tx": self.min_recent_tx,
            "min_uptime": self.min_uptime,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ProposerPolicy":
        return cls(
            variant=doc.get("variant", SIMPLE_WORK),
            difficulty=doc.get("difficulty", 0),
            min_recent_tx=doc.get("min_recent_tx", 0),
            min_uptime=doc.get("min_uptime", 0),
        )


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    timestamp: int
    transactions: tuple[Transaction, ...]
    proposer: bytes
    proof: bytes
    block_hash: bytes

    def preamble_bytes(self) -> bytes:
        """Everything the proof commits to (all fields except proof+hash)."""
        parts = [
            enc_u64(self.height),
            enc_bytes(self.prev_hash),
            enc_u64(self.timestamp),
            enc_u64(len(self.transactions)),
        ]
        parts.extend(enc_bytes(tx.to_bytes()) for tx in self.transactions)
        parts.append(enc_bytes(self.proposer))
        return b"".join(parts)

    def header_bytes(self) -> bytes:
        return self.preamble_bytes() + enc_bytes(self.proof)

    def to_bytes(self) -> bytes:
        return self.header_bytes() + enc_bytes(self.block_hash)

    @classmethod
    def read_from(cls, r: Reader) -> "Block":
        height = r.read_u64()
        prev_hash = r.read_fixed(DIGEST_LEN)
        timestamp = r.read_u64()
        count = r.read_u64()
        txs = tuple(Transaction.from_bytes(r.read_bytes()) for _ in range(count))
        proposer = r.read_fixed(PUBLIC_ID_LEN)
        proof = r.read_bytes()
        block_hash = r.read_fixed(DIGEST_LEN)
        return cls(height, prev_hash, timestamp, txs, proposer, proof, block_hash)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Block":
        r = Reader(raw)
        block = cls.read_from(r)
        r.expect_end()
        return block


def compute_block_hash(header: bytes) -> bytes:
    return crypto.digest(header)


def leading_zero_bits(value: bytes) -> int:
    bits = 0
    for byte in value:
        if byte == 0:
            bits += 8
            continue
        nibble = byte
        while not nibble & 0x80:
            bits += 1
            nibble <<= 1
        break
    return bits


_GENESIS: Block | None = None


def genesis_block() -> Block:
    """The fixed embedded genesis: zero prev hash, no transactions, time 0."""
    global _GENESIS
    if _GENESIS is None:
        draft = Block(0, ZERO_DIGEST, 0, (), b"\x00" * PUBLIC_ID_LEN, b"", ZERO_DIGEST)
        _GENESIS = Block(
            draft.height,
            draft.prev_hash,
            draft.timestamp,
            draft.transactions,
            draft.proposer,
            draft.proof,
            compute_block_hash(draft.header_bytes()),
        )
    return _GENESIS


def seal_block(
    parent: Block,
    txs: Sequence[Transaction],
    proposer: KeyPair,
    policy: ProposerPolicy,
    *,
    timestamp: int,
    view=None,
    anonymity_k: int = DEFAULT_ANONYMITY_K,
    budget: int = DEFAULT_SEAL_BUDGET,
) -> Block:
    """Produce a block satisfying the proposer policy. When a chain view is
    supplied every transaction is re-validated in sequence first."""
    if not txs:
        raise LedgerError("empty block")
    if len(txs) > MAX_BLOCK_TXS:
        raise LedgerError("too many transactions")
    if view is not None:
        overlay = OverlayView(view)
        for tx in txs:
            verdict = validate_transaction(tx, overlay, anonymity_k=anonymity_k)
            if not verdict:
                raise LedgerError(f"invalid transaction in block: {verdict.reason}")
            overlay.add(tx)

    draft = Block(
        height=parent.height + 1,
        prev_hash=parent.block_hash,
        timestamp=timestamp,
        transactions=tuple(txs),
        proposer=proposer.public_id,
        proof=b"",
        block_hash=ZERO_DIGEST,
    )
    preamble = draft.preamble_bytes()

    if policy.variant == RELIABILITY:
        proof = crypto.sign(proposer, preamble)
        header = preamble + enc_bytes(proof)
        return Block(
            draft.height,
            draft.prev_hash,
            draft.timestamp,
            draft.transactions,
            draft.proposer,
            proof,
            compute_block_hash(header),
        )

    base = hashlib.sha256(preamble)
    for nonce in range(budget):
        proof = nonce.to_bytes(8, "big")
        h = base.copy()
        h.update(enc_bytes(proof))
        block_hash = h.digest()
        if leading_zero_bits(block_hash) >= policy.difficulty:
            return Block(
                draft.height,
                draft.prev_hash,
                draft.timestamp,
                draft.transactions,
                draft.proposer,
                proof,
                block_hash,
            )
    raise SealBudgetExceeded("seal budget exceeded")


def validate_block(
    block: Block,
    parent: Block,
    chain_state,
    policy: ProposerPolicy,
    *,
    anonymity_k: int = DEFAULT_ANONYMITY_K,
) -> Verdict:
    """Accept iff hash links, height, proof, and every transaction validate.
    Cheap hash checks run first so corrupted blocks fail fast."""
    if block.height != parent.height + 1:
        return rejected("bad height", height=block.height)
    if block.prev_hash != parent.block_hash:
        return rejected("broken link", height=block.height)
    if compute_block_hash(block.header_bytes()) != block.block_hash:
        return rejected("hash mismatch", height=block.height)
    if not block.transactions:
        return rejected("empty block", height=block.height)
    if len(block.transactions) > MAX_BLOCK_TXS:
        return rejected("too many transactions", height=block.height)

    if policy.variant == SIMPLE_WORK:
        if leading_zero_bits(block.block_hash) < policy.difficulty:
            return rejected("bad proof", height=block.height)
    else:
        if not crypto.verify(block.proposer, block.preamble_bytes(), block.proof):
            return rejected("bad proof", height=block.height)

    seen: set[bytes] = set()
    overlay = OverlayView(chain_state)
    for tx in block.transactions:
        if tx.tx_id in seen or chain_state.find_transaction(tx.tx_id) is not None:
            return rejected("replay", height=block.height, tx=to_hex(tx.tx_id))
        verdict = validate_transaction(tx, overlay, anonymity_k=anonymity_k)
        if not verdict:
            return rejected(
                "invalid transaction in block",
                height=block.height,
                tx=to_hex(tx.tx_id),
                inner=verdict.reason,
            )
        seen.add(tx.tx_id)
        overlay.add(tx)
    return ACCEPTED


class Chain:
    """Immutable sequence of blocks from genesis plus derived lookup state.

    Serves as its own ChainView: find_transaction and emergency_policy_for
    reflect the tip state.
    """

    __slots__ = ("blocks", "_tx_index", "_records_by_patient", "_policies")

    def __init__(
        self,
        blocks: tuple[Block, ...],
        tx_index: dict[bytes, Transaction],
        records_by_patient: dict[bytes, tuple[Transaction, ...]],
        policies: dict[bytes, EmergencyPolicy],
    ):
        self.blocks = blocks
        self._tx_index = tx_index
        self._records_by_patient = records_by_patient
        self._policies = policies

    @classmethod
    def genesis(cls) -> "Chain":
        return cls((genesis_block(),), {}, {}, {})

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    @property
    def height(self) -> int:
        return self.tip.height

    def __len__(self) -> int:
        return len(self.blocks)

    def find_transaction(self, tx_id: bytes) -> Transaction | None:
        return self._tx_index.get(tx_id)

    def emergency_policy_for(self, patient: bytes) -> EmergencyPolicy | None:
        return self._policies.get(patient)

    def transactions(self) -> Iterator[Transaction]:
        for block in self.blocks:
            yield from block.transactions

    def new_records(self) -> Iterator[tuple[Block, Transaction]]:
        for block in self.blocks:
            for tx in block.transactions:
                if tx.kind == NEW_RECORD:
                    yield block, tx

    def records_of(self, patient: bytes) -> tuple[Transaction, ...]:
        return self._records_by_patient.get(patient, ())

    def tx_ids(self) -> frozenset[bytes]:
        return frozenset(self._tx_index)

    def extend_unchecked(self, block: Block) -> "Chain":
        """Structural extension; callers must have validated the block."""
        tx_index = dict(self._tx_index)
        records = dict(self._records_by_patient)
        policies = dict(self._policies)
        for tx in block.transactions:
            tx_index[tx.tx_id] = tx
            if tx.kind == NEW_RECORD:
                records[tx.body.patient] = records.get(tx.body.patient, ()) + (tx,)
                policy = policy_from_record(tx)
                if policy is not None:
                    policies[policy.patient] = policy
        return Chain(self.blocks + (block,), tx_index, records, policies)


def extend_chain(
    chain: Chain,
    block: Block,
    policy: ProposerPolicy,
    *,
    anonymity_k: int = DEFAULT_ANONYMITY_K,
) -> Chain:
    """Validated append; refuses invalid blocks, leaving the chain untouched."""
    verdict = validate_block(block, chain.tip, chain, policy, anonymity_k=anonymity_k)
    if not verdict:
        raise LedgerError(f"block refused: {verdict.reason}", verdict)
    return chain.extend_unchecked(block)


def verify_chain(
    chain: Chain | Iterable[Block],
    policy: ProposerPolicy,
    *,
    anonymity_k: int = DEFAULT_ANONYMITY_K,
) -> Verdict:
    """Full re-validation from genesis; any tampering with content or order
    is detected at or after the altered block."""
    blocks = tuple(chain.blocks if isinstance(chain, Chain) else chain)
    if not blocks:
        return rejected("empty chain")
    if blocks[0].to_bytes() != genesis_block().to_bytes():
        return rejected("bad genesis", height=0)
    state = Chain.genesis()
    for position, block in enumerate(blocks[1:], start=1):
        verdict = validate_block(block, state.tip, state, policy, anonymity_k=anonymity_k)
        if not verdict:
            # report the position in the sequence where verification broke
            return rejected(verdict.reason, **{**verdict.detail, "height": position})
        state = state.extend_unchecked(block)
    return ACCEPTED


def chain_from_blocks(
    blocks: Iterable[Block],
    policy: ProposerPolicy,
    *,
    anonymity_k: int = DEFAULT_ANONYMITY_K,
) -> Chain:
    """Rebuild a Chain value from raw blocks, validating as it goes."""
    blocks = tuple(blocks)
    verdict = verify_chain(blocks, policy, anonymity_k=anonymity_k)
    if not verdict:
        raise LedgerError(f"invalid chain: {verdict.reason}", verdict)
    state = Chain.genesis()
    for block in blocks[1:]:
        state = state.extend_unchecked(block)
    return state


def _prefers_candidate(local: Chain, candidate: Chain) -> bool:
    if len(candidate.blocks) != len(local.blocks):
        return len(candidate.blocks) > len(local.blocks)
    if candidate.tip.timestamp != local.tip.timestamp:
        return candidate.tip.timestamp < local.tip.timestamp
    return candidate.tip.block_hash < local.tip.block_hash


def choose_chain(
    local: Chain,
    candidate: Chain,
    policy: ProposerPolicy,
    *,
    anonymity_k: int = DEFAULT_ANONYMITY_K,
    validator: Callable[[Chain], Verdict] | None = None,
) -> Chain:
    """Longest valid chain wins; equal lengths prefer the earlier tip, then
    the smaller tip hash. An invalid candidate is discarded wholesale."""
    if validator is None:
        verdict = verify_chain(candidate, policy, anonymity_k=anonymity_k)
    else:
        verdict = validator(candidate)
    if not verdict:
        return local
    return candidate if _prefers_candidate(local, candidate) else local


# ---------------------------------------------------------------------------
# Export / import
# ---------------------------------------------------------------------------

def export_chain(chain: Chain, policy: ProposerPolicy) -> bytes:
    """Length-prefixed binary stream of canonical blocks, self-describing via
    the primitive manifest and the sealing policy, closed by a digest of the
    whole stream so any corruption is caught at decode."""
    parts = [
        CHAIN_MAGIC,
        enc_bytes(crypto.manifest_bytes()),
        enc_bytes(json.dumps(policy.to_json(), sort_keys=True).encode("ascii")),
        enc_u64(len(chain.blocks)),
    ]
    parts.extend(enc_bytes(block.to_bytes()) for block in chain.blocks)
    body = b"".join(parts)
    return body + enc_bytes(crypto.digest(body))


def reseal_stream_checksum(raw: bytes) -> bytes:
    """Recompute the trailing stream digest (tamper drills use this to model
    an adversary who fixes up outer integrity but cannot forge block hashes)."""
    body = raw[: -(crypto.DIGEST_LEN + 4)]
    return body + enc_bytes(crypto.digest(body))


def import_chain(raw: bytes) -> tuple[tuple[Block, ...], ProposerPolicy]:
    """Parse an exported stream. Validation is separate: run verify_chain or
    chain_from_blocks on the result."""
    if raw[: len(CHAIN_MAGIC)] != CHAIN_MAGIC:
        raise DecodeError("bad magic")
    if len(raw) < crypto.DIGEST_LEN + 4 + len(CHAIN_MAGIC):
        raise DecodeError("truncated stream")
    body = raw[: -(crypto.DIGEST_LEN + 4)]
    checksum = raw[-(crypto.DIGEST_LEN + 4) :]
    if checksum != enc_bytes(crypto.digest(body)):
        raise DecodeError("stream digest mismatch")
    r = Reader(body[len(CHAIN_MAGIC) :])
    if r.read_bytes() != crypto.manifest_bytes():
        raise DecodeError("manifest mismatch")
    try:
        policy = ProposerPolicy.from_json(json.loads(r.read_bytes()))
    except (ValueError, LedgerError) as exc:
        raise DecodeError("bad policy header") from exc
    count = r.read_u64()
    blocks = tuple(Block.from_bytes(r.read_bytes()) for _ in range(count))
    r.expect_end()
    if not blocks:
        raise DecodeError("empty chain")
    return blocks, policy


def chain_debug_json(chain: Chain) -> dict:
    """Human-inspectable dump; not the canonical form."""
    return {
        "manifest": dict(crypto.MANIFEST),
        "height": chain.height,
        "blocks": [
            {
                "height": b.height,
                "timestamp": b.timestamp,
                "prev_hash": to_hex(b.prev_hash),
                "block_hash": to_hex(b.block_hash),
                "proposer": to_hex(b.proposer),
                "tx_ids": [to_hex(tx.tx_id) for tx in b.transactions],
            }
            for b in chain.blocks
        ],
    }
