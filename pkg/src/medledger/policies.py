"""Access policies: break-the-glass emergency declarations, professional
credentials, and the wallet's automatic decision rules."""

from __future__ import annotations

import json
from dataclasses import dataclass

from . import crypto
from .encoding import enc_bytes, enc_str, from_hex, to_hex
from .errors import WalletError

EMERGENCY_POLICY_CATEGORY = "emergency-policy"


@dataclass(frozen=True)
class EmergencyPolicy:
    """Patient-declared conditions under which credentialed professionals may
    be granted access without interaction. Registered on-chain in the public
    data of a record whose metadata category is ``emergency-policy``."""

    patient: bytes
    authorized_roles: frozenset[str]
    conditions: frozenset[str]
    procurator: bytes | None = None

    def to_public_data(self) -> str:
        doc = {
            "patient": to_hex(self.patient),
            "authorized_roles": sorted(self.authorized_roles),
            "conditions": sorted(self.conditions),
            "procurator": to_hex(self.procurator) if self.procurator else None,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_public_data(cls, text: str) -> "EmergencyPolicy":
        try:
            doc = json.loads(text)
            return cls(
                patient=from_hex(doc["patient"]),
                authorized_roles=frozenset(doc["authorized_roles"]),
                conditions=frozenset(doc["conditions"]),
                procurator=from_hex(doc["procurator"]) if doc.get("procurator") else None,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise WalletError("bad policy") from exc


def credential_message(holder: bytes, credential_class: str) -> bytes:
    return enc_bytes(holder) + enc_str(credential_class)


@dataclass(frozen=True)
class Credential:
    """Statement by a configured authority that holder belongs to a
    credential class (e.g. emergency-physician)."""

    holder: bytes
    credential_class: str
    issuer: bytes
    issuer_signature: bytes

    def verifies(self) -> bool:
        return crypto.verify(
            self.issuer,
            credential_message(self.holder, self.credential_class),
            self.issuer_signature,
        )

    def to_json(self) -> dict:
        return {
            "holder": to_hex(self.holder),
            "credential_class": self.credential_class,
            "issuer": to_hex(self.issuer),
            "issuer_signature": to_hex(self.issuer_signature),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Credential":
        try:
            return cls(
                holder=from_hex(doc["holder"]),
                credential_class=doc["credential_class"],
                issuer=from_hex(doc["issuer"]),
                issuer_signature=from_hex(doc["issuer_signature"]),
            )
        except (KeyError, TypeError) as exc:
            raise WalletError("bad credential document") from exc


def issue_credential(
    issuer: crypto.KeyPair, holder: bytes, credential_class: str
) -> Credential:
    sig = crypto.sign(issuer, credential_message(holder, credential_class))
    return Credential(holder, credential_class, issuer.public_id, sig)


APPROVE = "approve"
DENY = "deny"
ASK = "ask"
_DECISIONS = (APPROVE, DENY, ASK)


@dataclass(frozen=True)
class AutoRule:
    """One wallet rule: match on requester credential class and/or record
    category; None matches anything. Rules are evaluated first-match in
    declaration order."""

    decision: str
    requester_class: str | None = None
    category: str | None = None

    def __post_init__(self):
        if self.decision not in _DECISIONS:
            raise WalletError("bad policy")

    def matches(self, requester_class: str | None, category: str | None) -> bool:
        if self.requester_class is not None and self.requester_class != requester_class:
            return False
        if self.category is not None and self.category != category:
            return False
        return True

    def to_json(self) -> dict:
        return {
            "decision": self.decision,
            "requester_class": self.requester_class,
            "category": self.category,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "AutoRule":
        try:
            return cls(
                decision=doc["decision"],
                requester_class=doc.get("requester_class"),
                category=doc.get("category"),
            )
        except KeyError as exc:
            raise WalletError("bad policy") from exc


def evaluate_rules(
    rules: list[AutoRule], requester_class: str | None, category: str | None
) -> str:
    """First matching rule wins; no match surfaces the task (ask)."""
    for rule in rules:
        if rule.matches(requester_class, category):
            return rule.decision
    return ASK
