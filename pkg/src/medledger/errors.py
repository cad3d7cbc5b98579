"""Exception hierarchy. Validation outcomes are verdicts, not exceptions;
these classes cover contract violations raised to callers."""

from __future__ import annotations


class MedledgerError(Exception):
    """Base class for all package errors."""


class CryptoError(MedledgerError):
    pass


class NoWrappedKeyError(CryptoError):
    """Opened by an identity that is not among the envelope recipients."""


class FidelityError(CryptoError):
    """Ciphertext or recovered plaintext fails its integrity check."""


class StoreError(MedledgerError):
    pass


class ForbiddenError(StoreError):
    pass


class GoneError(StoreError):
    pass


class UnknownLinkError(StoreError):
    pass


class NotOwnerError(StoreError):
    pass


class AlreadyStoredError(StoreError):
    pass


class TransactionError(MedledgerError):
    pass


class LedgerError(MedledgerError):
    pass


class SealBudgetExceeded(LedgerError):
    pass


class WalletError(MedledgerError):
    pass


class SimulationError(MedledgerError):
    pass


class QuiescentError(SimulationError):
    """step() called with no pending events."""


class ScenarioError(MedledgerError):
    pass
