"""Desk-scale ledger-mediated health record exchange.

A cryptographically linked ledger of health transactions, contract-validated
access grants over encrypted record links, owner-controlled storage, a
verifiable discovery index, and a deterministic network simulator.
"""

from .crypto import (
    MANIFEST,
    KeyPair,
    RecordEnvelope,
    digest,
    keypair_from_seed,
    open_envelope,
    open_sealed,
    seal_envelope,
    seal_for,
    sign,
    verify,
)
from .ledger import Block, Chain, ProposerPolicy, choose_chain, seal_block, verify_chain
from .simulator import NetworkConfig, Simulation
from .store import RecordStore
from .transactions import Transaction, validate_transaction
from .wallet import Wallet, WalletDirectory

__version__ = "0.1.0"

__all__ = [
    "MANIFEST",
    "KeyPair",
    "RecordEnvelope",
    "digest",
    "keypair_from_seed",
    "open_envelope",
    "open_sealed",
    "seal_envelope",
    "seal_for",
    "sign",
    "verify",
    "Block",
    "Chain",
    "ProposerPolicy",
    "choose_chain",
    "seal_block",
    "verify_chain",
    "NetworkConfig",
    "Simulation",
    "RecordStore",
    "Transaction",
    "validate_transaction",
    "Wallet",
    "WalletDirectory",
    "__version__",
]
