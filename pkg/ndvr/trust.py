"""
trust.py

Description:
Two-level key hierarchy for NDVR: a network anchor key signs one key per
router, and each router signs its DVINFO Data with its own key. Validation
applies three compiled-in rules, bottom to top: DVINFO, router key, anchor.

Signatures are Ed25519 over the Data signed portion. Key Data content is
``0x80 <raw public key>`` optionally followed by ``0x81 <8-byte expiry us>``.

License:
MIT License
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from ndvr.ndn_minicore import Data, DecodeError, Name, encode_tlv, read_tlv
from ndvr.ndvr_core import DVINFO_PREFIX, KEY_COMPONENT, ROUTER_MARKER, ParseError, RouterName, parse_dvinfo_name

logger = logging.getLogger(__name__)

TLV_PUBLIC_KEY = 0x80
TLV_VALID_UNTIL = 0x81


class SetupError(Exception):
    """Raised when the key hierarchy cannot be built"""


class SigningError(Exception):
    """Raised when asked to sign with a key the keychain does not hold"""


class Reason(Enum):
    BAD_SIGNATURE = "BAD_SIGNATURE"
    NAME_MISMATCH = "NAME_MISMATCH"
    UNTRUSTED_ANCHOR = "UNTRUSTED_ANCHOR"
    EXPIRED = "EXPIRED"
    NO_RULE = "NO_RULE"
    MALFORMED_KEY = "MALFORMED_KEY"


class ValidationRule(Enum):
    DVINFO_RULE = "DVINFO_RULE"
    ROUTER_KEY_RULE = "ROUTER_KEY_RULE"
    ANCHOR_RULE = "ANCHOR_RULE"


RULE_ORDER = (ValidationRule.DVINFO_RULE, ValidationRule.ROUTER_KEY_RULE, ValidationRule.ANCHOR_RULE)


@dataclass(frozen=True)
class Accepted:
    rule: ValidationRule


@dataclass(frozen=True)
class Rejected:
    reason: Reason
    detail: str = ""


@dataclass(frozen=True)
class NeedKey:
    key_name: Name


Verdict = Union[Accepted, Rejected, NeedKey]


@dataclass(frozen=True)
class KeyRecord:
    key_name: Name
    public_key: bytes
    signer_key_name: Name = Name()
    signature: bytes = b""
    expiry: Optional[int] = None

    def expired(self, now: int) -> bool:
        return self.expiry is not None and now > self.expiry


def anchor_key_name(network: Name) -> Name:
    return network.append(KEY_COMPONENT)


def raw_public_key(private_key: Ed25519PrivateKey) -> bytes:
    return private_key.public_key().public_bytes(
        encoding=serialization.Encoding.Raw,
        format=serialization.PublicFormat.Raw,
    )


def verify(public_key: bytes, signature: bytes, payload: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, payload)
    except InvalidSignature:
        return False
    return True


def sign_data(data: Data, private_key: Ed25519PrivateKey, key_name: Name) -> Data:
    """Set the key locator and sign the canonical signed portion."""
    unsigned = replace(data, key_locator=key_name, signature=b"")
    return replace(unsigned, signature=private_key.sign(unsigned.signed_portion()))


# ---------------------------------------------------------------------------
# Key Data
# ---------------------------------------------------------------------------

def make_key_data(record: KeyRecord) -> Data:
    content = encode_tlv(TLV_PUBLIC_KEY, record.public_key)
    if record.expiry is not None:
        content += encode_tlv(TLV_VALID_UNTIL, record.expiry.to_bytes(8, "big"))
    return Data(name=record.key_name, content=content, key_locator=record.signer_key_name,
                signature=record.signature)


def parse_key_data(data: Data) -> KeyRecord:
    """
    Rebuild a KeyRecord from key Data.

    Raises:
        DecodeError: when the content is not a public key TLV (plus optional expiry)
    """
    content = data.content
    tlv_type, start, end = read_tlv(content, 0)
    if tlv_type != TLV_PUBLIC_KEY or end - start != 32:
        raise DecodeError("key content must start with a 32-byte public key")
    public_key = content[start:end]
    expiry = None
    if end < len(content):
        tlv_type, start, stop = read_tlv(content, end)
        if tlv_type != TLV_VALID_UNTIL or stop - start != 8 or stop != len(content):
            raise DecodeError("bad expiry field in key content")
        expiry = int.from_bytes(content[start:stop], "big")
    return KeyRecord(key_name=data.name, public_key=public_key, signer_key_name=data.key_locator,
                     signature=data.signature, expiry=expiry)


# ---------------------------------------------------------------------------
# Stores
# ---------------------------------------------------------------------------

@dataclass
class TrustStore:
    anchors: Dict[Name, KeyRecord] = field(default_factory=dict)
    cached_keys: Dict[Name, KeyRecord] = field(default_factory=dict)
    pending_validations: Dict[Name, List[Tuple[Data, object]]] = field(default_factory=dict)

    @classmethod
    def with_anchors(cls, anchors: Iterable[KeyRecord]) -> "TrustStore":
        return cls(anchors={a.key_name: a for a in anchors})

    def copy_for_node(self) -> "TrustStore":
        return TrustStore(anchors=dict(self.anchors))

    def add_key(self, record: KeyRecord) -> None:
        self.cached_keys[record.key_name] = record

    def suspend(self, data: Data, key_name: Name, context=None) -> bool:
        """Park a validation until ``key_name`` arrives; True when a fetch should be issued."""
        waiting = self.pending_validations.setdefault(key_name, [])
        waiting.append((data, context))
        return len(waiting) == 1

    def resume(self, key_name: Name) -> List[Tuple[Data, object]]:
        return self.pending_validations.pop(key_name, [])


class KeyChain:
    """Private keys by key name."""

    def __init__(self):
        self._keys: Dict[Name, Ed25519PrivateKey] = {}
        self.records: Dict[Name, KeyRecord] = {}

    def __contains__(self, key_name: Name) -> bool:
        return key_name in self._keys

    def add(self, record: KeyRecord, private_key: Ed25519PrivateKey) -> None:
        self._keys[record.key_name] = private_key
        self.records[record.key_name] = record

    def sign(self, data: Data, key_name: Name) -> Data:
        private_key = self._keys.get(key_name)
        if private_key is None:
            raise SigningError(f"no private key named {key_name}")
        return sign_data(data, private_key, key_name)

    def key_data(self, key_name: Name) -> Data:
        if key_name not in self.records:
            raise SigningError(f"no key record named {key_name}")
        return make_key_data(self.records[key_name])

    def only(self, key_name: Name) -> "KeyChain":
        """A keychain holding just ``key_name``, as handed to the node that owns it."""
        if key_name not in self._keys:
            raise SigningError(f"no private key named {key_name}")
        chain = KeyChain()
        chain.add(self.records[key_name], self._keys[key_name])
        return chain


def generate_keys(network: Name, routers: Sequence[RouterName], rng,
                  expiry: Optional[int] = None) -> Tuple[TrustStore, KeyChain]:
    """
    Build the anchor and one anchor-signed key per router.

    :param network: network prefix, e.g. ``/ufba``
    :param routers: router names, must be unique
    :param rng: numpy Generator; key material is drawn from it so runs are reproducible
    :param expiry: optional expiry time (us) stamped on router keys
    :return: (store holding the anchor, keychain holding every private key)
    """
    if len(set(routers)) != len(routers):
        raise SetupError("duplicate router names")
    keychain = KeyChain()
    anchor_private = Ed25519PrivateKey.from_private_bytes(rng.bytes(32))
    anchor = KeyRecord(key_name=anchor_key_name(network), public_key=raw_public_key(anchor_private))
    keychain.add(anchor, anchor_private)

    for router in routers:
        private_key = Ed25519PrivateKey.from_private_bytes(rng.bytes(32))
        unsigned = KeyRecord(key_name=network + router.to_name().append(KEY_COMPONENT),
                             public_key=raw_public_key(private_key), signer_key_name=anchor.key_name,
                             expiry=expiry)
        signed = sign_data(make_key_data(unsigned), anchor_private, anchor.key_name)
        keychain.add(replace(unsigned, signature=signed.signature), private_key)

    logger.debug("generated anchor %s and %d router keys", anchor.key_name, len(routers))
    return TrustStore.with_anchors([anchor]), keychain


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def _router_key_owner(name: Name) -> Optional[Tuple[Name, RouterName]]:
    """Match ``/<network>/<network>/%C1.Router/<label>/KEY``; returns (network, router)."""
    if len(name) < 5 or name[-1] != KEY_COMPONENT or name[-3] != ROUTER_MARKER:
        return None
    body = name[:-3]
    if len(body) % 2:
        return None
    half = len(body) // 2
    network = body[:half]
    if body[half:] != network:
        return None
    return network, RouterName(network, name[-2])


def _is_anchor_name(name: Name) -> bool:
    return len(name) >= 2 and name[-1] == KEY_COMPONENT and ROUTER_MARKER not in name.components


def rule_for(name: Name) -> Optional[ValidationRule]:
    if name[:3] == DVINFO_PREFIX:
        return ValidationRule.DVINFO_RULE
    if _router_key_owner(name) is not None:
        return ValidationRule.ROUTER_KEY_RULE
    if _is_anchor_name(name):
        return ValidationRule.ANCHOR_RULE
    return None


def _check_anchor(key_name: Name, store: TrustStore, now: int) -> Union[KeyRecord, Rejected]:
    anchor = store.anchors.get(key_name)
    if anchor is None:
        return Rejected(Reason.UNTRUSTED_ANCHOR, str(key_name))
    if anchor.expired(now):
        return Rejected(Reason.EXPIRED, str(key_name))
    return anchor


def _validate_router_key(data: Data, store: TrustStore, now: int) -> Verdict:
    network, _ = _router_key_owner(data.name)
    if data.key_locator != anchor_key_name(network):
        return Rejected(Reason.NAME_MISMATCH, f"router key signed by {data.key_locator}")
    try:
        record = parse_key_data(data)
        anchor = _check_anchor(data.key_locator, store, now)
        if isinstance(anchor, Rejected):
            return anchor
        if not verify(anchor.public_key, data.signature, data.signed_portion()):
            return Rejected(Reason.BAD_SIGNATURE, str(data.name))
        Ed25519PublicKey.from_public_bytes(record.public_key)
    except (DecodeError, ValueError) as e:
        return Rejected(Reason.MALFORMED_KEY, str(e))
    if record.expired(now):
        return Rejected(Reason.EXPIRED, str(data.name))
    return Accepted(ValidationRule.ROUTER_KEY_RULE)


def _validate_dvinfo(data: Data, store: TrustStore, now: int) -> Verdict:
    try:
        router, _ = parse_dvinfo_name(data.name)
    except ParseError as e:
        return Rejected(Reason.NO_RULE, str(e))
    expected = router.network + router.to_name().append(KEY_COMPONENT)
    if data.key_locator != expected:
        return Rejected(Reason.NAME_MISMATCH, f"{data.name} signed by {data.key_locator}")
    key = store.cached_keys.get(expected)
    if key is None:
        return NeedKey(expected)
    # cached keys passed the router key rule, only the anchor and expiry may have changed
    anchor = _check_anchor(key.signer_key_name, store, now)
    if isinstance(anchor, Rejected):
        return anchor
    if key.expired(now):
        return Rejected(Reason.EXPIRED, str(expected))
    try:
        valid = verify(key.public_key, data.signature, data.signed_portion())
    except ValueError as e:
        return Rejected(Reason.MALFORMED_KEY, str(e))
    if not valid:
        return Rejected(Reason.BAD_SIGNATURE, str(data.name))
    return Accepted(ValidationRule.DVINFO_RULE)


def _validate_anchor(data: Data, store: TrustStore, now: int) -> Verdict:
    installed = _check_anchor(data.name, store, now)
    if isinstance(installed, Rejected):
        return installed
    try:
        record = parse_key_data(data)
    except DecodeError as e:
        return Rejected(Reason.MALFORMED_KEY, str(e))
    if record.public_key != installed.public_key:
        return Rejected(Reason.UNTRUSTED_ANCHOR, "anchor key differs from the installed one")
    return Accepted(ValidationRule.ANCHOR_RULE)


_VALIDATORS = {
    ValidationRule.DVINFO_RULE: _validate_dvinfo,
    ValidationRule.ROUTER_KEY_RULE: _validate_router_key,
    ValidationRule.ANCHOR_RULE: _validate_anchor,
}


def validate(data: Data, store: TrustStore, now: int = 0) -> Verdict:
    rule = rule_for(data.name)
    if rule is None:
        return Rejected(Reason.NO_RULE, str(data.name))
    return _VALIDATORS[rule](data, store, now)
