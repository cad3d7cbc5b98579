"""Discovery service: a rebuildable index over a chain answering owner and
link queries, with answers any peer can verify against a local chain copy.

The index covers new-record transactions only. The on-chain link is sealed
for the patient, so lookups key on the public link digest; callers present
the raw link and the query hashes it. Replicas are untrusted by design:
every answer carries the height it reflects and verify_answer re-runs the
query by linear scan of the local chain, accepting stale but prefix-
consistent answers and refusing fabricated ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from . import crypto
from .encoding import from_hex, to_hex
from .errors import LedgerError
from .ledger import Chain, ProposerPolicy, verify_chain


@dataclass(frozen=True)
class DiscoveryIndex:
    by_owner: dict[bytes, tuple[bytes, ...]]  # patient -> tx ids in chain order
    by_link: dict[bytes, tuple[bytes, bytes]]  # link digest -> (patient, custodian)
    indexed_height: int


def rebuild_index(chain: Chain, policy: ProposerPolicy | None = None) -> DiscoveryIndex:
    """Linear scan of the chain's new-record population. When a policy is
    supplied the chain is re-verified first and invalid chains are refused."""
    if policy is not None:
        verdict = verify_chain(chain, policy)
        if not verdict:
            raise LedgerError(f"invalid chain: {verdict.reason}")
    by_owner: dict[bytes, tuple[bytes, ...]] = {}
    by_link: dict[bytes, tuple[bytes, bytes]] = {}
    for _, tx in chain.new_records():
        body = tx.body
        by_owner[body.patient] = by_owner.get(body.patient, ()) + (tx.tx_id,)
        by_link.setdefault(body.link_digest, (body.patient, body.custodian))
    return DiscoveryIndex(by_owner, by_link, chain.height)


def transactions_by_owner(index: DiscoveryIndex, patient_pub: bytes) -> tuple[bytes, ...]:
    return index.by_owner.get(patient_pub, ())


def parties_by_link(index: DiscoveryIndex, link: bytes) -> tuple[bytes, bytes] | None:
    """The (patient, custodian) pair that introduced a raw link, or None."""
    return index.by_link.get(crypto.digest(link))


# ---------------------------------------------------------------------------
# Query verification against a local chain
# ---------------------------------------------------------------------------

def _scan_owner(chain: Chain, patient: bytes, up_to_height: int) -> list[bytes]:
    out = []
    for block, tx in chain.new_records():
        if block.height > up_to_height:
            break
        if tx.body.patient == patient:
            out.append(tx.tx_id)
    return out


def _scan_link(
    chain: Chain, link_digest: bytes, up_to_height: int
) -> tuple[bytes, bytes] | None:
    for block, tx in chain.new_records():
        if block.height > up_to_height:
            break
        if tx.body.link_digest == link_digest:
            return tx.body.patient, tx.body.custodian
    return None


def verify_answer(local_chain: Chain, query: dict, answer: dict) -> bool:
    """Re-run the query by linear scan of the local chain. Answers at or
    below local height must match exactly; fresher answers must extend the
    local truth (prefix rule). Fabricated entries always fail."""
    try:
        height = int(answer["indexed_height"])
        result = answer["result"]
        kind = query["kind"]
    except (KeyError, TypeError, ValueError):
        return False
    if height < 0:
        return False
    local_height = local_chain.height
    check_height = min(height, local_height)

    if kind == "by_owner":
        try:
            owner = from_hex(query["owner"])
            claimed = [from_hex(h) for h in result]
        except (KeyError, TypeError, ValueError):
            return False
        expected = _scan_owner(local_chain, owner, check_height)
        if height <= local_height:
            return claimed == expected
        return claimed[: len(expected)] == expected

    if kind == "by_link":
        try:
            link_digest = from_hex(query["link_digest"])
        except (KeyError, TypeError, ValueError):
            return False
        expected_pair = _scan_link(local_chain, link_digest, check_height)
        if result is None:
            # "not found" is refuted when the local prefix contains the link
            return expected_pair is None
        try:
            claimed_pair = (from_hex(result["patient"]), from_hex(result["custodian"]))
        except (KeyError, TypeError, ValueError):
            return False
        if expected_pair is not None:
            return claimed_pair == expected_pair
        # found beyond our height: cannot refute a fresher replica
        return height > local_height

    return False


class DiscoveryService:
    """One replica: an index over a possibly stale view of some peer's chain,
    rebuilt every ``rebuild_every_blocks`` blocks or on demand."""

    def __init__(
        self,
        chain_provider: Callable[[], Chain],
        *,
        rebuild_every_blocks: int = 1,
        name: str = "replica",
    ):
        self._chain_provider = chain_provider
        self.rebuild_every_blocks = max(1, rebuild_every_blocks)
        self.name = name
        self.index = rebuild_index(chain_provider())

    def maybe_rebuild(self) -> None:
        chain = self._chain_provider()
        if chain.height >= self.index.indexed_height + self.rebuild_every_blocks:
            self.index = rebuild_index(chain)

    def rebuild(self) -> None:
        self.index = rebuild_index(self._chain_provider())

    def query_by_owner(self, patient_pub: bytes) -> tuple[dict, dict]:
        self.maybe_rebuild()
        query = {"kind": "by_owner", "owner": to_hex(patient_pub)}
        answer = {
            "indexed_height": self.index.indexed_height,
            "result": [to_hex(t) for t in transactions_by_owner(self.index, patient_pub)],
        }
        return query, answer

    def query_by_link(self, link: bytes) -> tuple[dict, dict]:
        self.maybe_rebuild()
        link_digest = crypto.digest(link)
        query = {"kind": "by_link", "link_digest": to_hex(link_digest)}
        pair = self.index.by_link.get(link_digest)
        answer = {
            "indexed_height": self.index.indexed_height,
            "result": (
                None
                if pair is None
                else {"patient": to_hex(pair[0]), "custodian": to_hex(pair[1])}
            ),
        }
        return query, answer
