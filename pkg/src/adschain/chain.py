"""Per-transaction chains of signed custody blocks.

Every entity touching an ad transaction contributes one block. A block is
three strings on the wire — the custody delegation, a *keys-string* naming
the covered fields, and a base64url signature — plus the entity's data
fields. The signed payload is the *value string*: the values of the covered
keys, in keys-string order, joined with the single byte 0x1F (which is
banned from values, making the join injective). Signatures are computed
over the SHA-256 digest of that byte string.

Key namespace in the transaction's flat key-value view:

    ac_tid, ac_ip         global, set by block 0 and covered only by it
    ac<i>_custody         block i's delegation (``pending`` during auctions)
    ac<i>_prev            virtual key: resolves to block i-1's signature
    ac<i>_tmp             temporary-block marker, signed, value "1"
    ac<i>_<name>          block i's data fields
    ac<i>_keys, ac<i>_sig carried but never covered by any signature

Block 0 covers ``ac_tid,ac_ip,ac0_custody`` then its data keys; block i>0
covers ``ac<i>_prev,ac<i>_custody`` then its data keys. The prev binding is
what makes the blocks a chain: re-signing an earlier block invalidates its
successor.
"""

from __future__ import annotations

import ipaddress
import re
from dataclasses import dataclass
from typing import Callable, Mapping

from . import crypto
from .tuuid import TransactionId

KEYS_DELIMITER = ","
VALUE_DELIMITER = b"\x1f"
PENDING_CUSTODY = "pending"

GLOBAL_TID_KEY = "ac_tid"
GLOBAL_IP_KEY = "ac_ip"

# Per-block names with wire or protocol meaning; rejected as user data keys.
RESERVED_FIELD_NAMES = frozenset({"custody", "keys", "sig", "prev", "tmp", "signer"})

# Block verdicts.
VALID = "valid"
BAD_SIGNATURE = "bad-signature"
MISSING_KEY = "missing-key"
MALFORMED = "malformed"
UNVERIFIABLE = "unverifiable"

_KEY_RE = re.compile(r"[a-z0-9_.-]+\Z")
_DOMAIN_RE = re.compile(
    r"[a-z0-9]([a-z0-9-]*[a-z0-9])?(\.[a-z0-9]([a-z0-9-]*[a-z0-9])?)+\Z"
)

FlatView = dict[str, str]


class ChainError(Exception):
    pass


class InvalidKeyError(ChainError):
    """Key violates the grammar, duplicates another, or the cover is empty."""


class InvalidValueError(ChainError):
    """Value contains the 0x1F delimiter byte."""


class MissingKeyError(ChainError):
    """A covered key has no value in the flat view."""


class InvalidBlockError(ChainError):
    pass


class InvalidChainError(ChainError):
    pass


class CustodyMismatchError(ChainError):
    """Signer is not the entity the chain currently delegates custody to."""


class NotTemporaryError(ChainError):
    """Finalization applied to a chain whose last block is not temporary."""


def block_key(index: int, name: str) -> str:
    return f"ac{index}_{name}"


def canonical_ip(text: str) -> str:
    """One textual form per address: dotted quad / compressed lowercase v6."""
    try:
        return str(ipaddress.ip_address(text))
    except ValueError as exc:
        raise InvalidBlockError(f"bad client IP {text!r}: {exc}") from exc


def is_valid_domain(domain: str) -> bool:
    return bool(_DOMAIN_RE.match(domain)) and len(domain) <= 253


@dataclass(frozen=True)
class DataField:
    key: str
    value: str

    def __post_init__(self) -> None:
        if not _KEY_RE.match(self.key):
            raise InvalidKeyError(f"bad field key: {self.key!r}")
        _check_value(self.key, self.value)


def _check_value(key: str, value: str) -> None:
    if "\x1f" in value:
        raise InvalidValueError(f"value of {key!r} contains 0x1F")
    try:
        value.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise InvalidValueError(f"value of {key!r} is not UTF-8 text: {exc}") from exc


@dataclass(frozen=True)
class BlockBody:
    index: int
    signer_domain: str
    custody: str
    prev_signature: str | None = None
    fields: tuple[DataField, ...] = ()
    transaction_id: TransactionId | None = None
    client_ip: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "fields", tuple(self.fields))

    @property
    def is_temporary(self) -> bool:
        return self.custody == PENDING_CUSTODY

    def field_names(self) -> list[str]:
        return [f.key for f in self.fields]

    def validate(self) -> None:
        if self.index < 0:
            raise InvalidBlockError(f"negative block index {self.index}")
        if not is_valid_domain(self.signer_domain):
            raise InvalidBlockError(f"bad signer domain: {self.signer_domain!r}")
        if self.custody != PENDING_CUSTODY and not is_valid_domain(self.custody):
            raise InvalidBlockError(f"bad custody domain: {self.custody!r}")
        first = self.index == 0
        if first != (self.transaction_id is not None):
            raise InvalidBlockError("transaction_id present iff index == 0")
        if first != (self.client_ip is not None):
            raise InvalidBlockError("client_ip present iff index == 0")
        if first == (self.prev_signature is not None):
            raise InvalidBlockError("prev_signature present iff index > 0")
        if first and self.client_ip != canonical_ip(self.client_ip):
            raise InvalidBlockError(f"client IP not canonical: {self.client_ip!r}")
        names = self.field_names()
        if len(set(names)) != len(names):
            raise InvalidBlockError(f"duplicate field keys: {names}")
        if self.is_temporary and ("tmp", "1") not in [
            (f.key, f.value) for f in self.fields
        ]:
            raise InvalidBlockError("pending custody requires the tmp=1 field")


@dataclass(frozen=True)
class SignedBlock:
    body: BlockBody
    keys_string: str
    signature: str  # base64url, unpadded
    algorithm: str

    def cover(self) -> list[str]:
        return self.keys_string.split(KEYS_DELIMITER)


@dataclass(frozen=True)
class Chain:
    blocks: tuple[SignedBlock, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if not self.blocks:
            raise InvalidChainError("a chain has at least one block")

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def last(self) -> SignedBlock:
        return self.blocks[-1]

    @property
    def transaction_id(self) -> TransactionId | None:
        return self.blocks[0].body.transaction_id

    @property
    def client_ip(self) -> str | None:
        return self.blocks[0].body.client_ip

    @property
    def is_temporary(self) -> bool:
        return self.last.body.is_temporary

    def validate(self) -> None:
        """Structural invariants; signature checks live in verify_chain."""
        for i, block in enumerate(self.blocks):
            block.body.validate()
            if block.body.index != i:
                raise InvalidChainError(
                    f"block at position {i} carries index {block.body.index}"
                )
            if block.body.is_temporary and i != len(self.blocks) - 1:
                raise InvalidChainError("temporary block is not the last block")
            if i > 0 and block.body.prev_signature != self.blocks[i - 1].signature:
                raise InvalidChainError(
                    f"block {i} prev_signature does not match block {i - 1}"
                )

    def extended(self, block: SignedBlock) -> "Chain":
        return Chain(self.blocks + (block,))


@dataclass(frozen=True)
class ChainReport:
    verdicts: tuple[str, ...]
    first_invalid_index: int | None
    custody_gaps: tuple[tuple[int, str, str], ...]
    is_temporary: bool

    @property
    def ok(self) -> bool:
        """All signatures verify; custody gaps do not count as failures."""
        return self.first_invalid_index is None


def build_keys_string(keys: list[str]) -> str:
    if not keys:
        raise InvalidKeyError("empty cover")
    seen = set()
    for key in keys:
        if not _KEY_RE.match(key):
            raise InvalidKeyError(f"bad key in cover: {key!r}")
        if key in seen:
            raise InvalidKeyError(f"duplicate key in cover: {key!r}")
        seen.add(key)
    return KEYS_DELIMITER.join(keys)


def build_value_string(keys_string: str, flat_view: Mapping[str, str]) -> bytes:
    """The exact byte string whose SHA-256 digest gets signed.

    Values of the covered keys, in keys-string order, joined with 0x1F.
    Injective over value tuples because 0x1F never appears inside a value.
    """
    values = []
    for key in keys_string.split(KEYS_DELIMITER):
        if not _KEY_RE.match(key):
            raise InvalidKeyError(f"bad key in keys-string: {key!r}")
        try:
            value = flat_view[key]
        except KeyError:
            raise MissingKeyError(f"no value for covered key {key!r}") from None
        _check_value(key, value)
        values.append(value.encode("utf-8"))
    return VALUE_DELIMITER.join(values)


def flat_view(chain: Chain, extra: Mapping[str, str] | None = None) -> FlatView:
    """The transaction's single flat key-value view, on any transport.

    Includes the virtual ``ac<i>_prev`` entries resolving to the previous
    block's signature string; those are never carried on the wire.
    """
    view: FlatView = dict(extra) if extra else {}
    first = chain.blocks[0].body
    if first.transaction_id is not None:
        view[GLOBAL_TID_KEY] = str(first.transaction_id)
    if first.client_ip is not None:
        view[GLOBAL_IP_KEY] = first.client_ip
    for pos, block in enumerate(chain.blocks):
        body = block.body
        i = body.index
        view[block_key(i, "signer")] = body.signer_domain
        view[block_key(i, "custody")] = body.custody
        for f in body.fields:
            view[block_key(i, f.key)] = f.value
        if pos > 0:
            view[block_key(i, "prev")] = chain.blocks[pos - 1].signature
        view[block_key(i, "keys")] = block.keys_string
        view[block_key(i, "sig")] = block.signature
    return view


def _check_user_fields(fields: list[DataField] | tuple[DataField, ...]) -> tuple[DataField, ...]:
    out = tuple(fields)
    for f in out:
        if f.key in RESERVED_FIELD_NAMES:
            raise InvalidKeyError(f"reserved field name: {f.key!r}")
    return out


def _body_flat_entries(body: BlockBody) -> FlatView:
    i = body.index
    view: FlatView = {}
    if i == 0:
        view[GLOBAL_TID_KEY] = str(body.transaction_id)
        view[GLOBAL_IP_KEY] = body.client_ip or ""
    else:
        view[block_key(i, "prev")] = body.prev_signature or ""
    view[block_key(i, "custody")] = body.custody
    for f in body.fields:
        view[block_key(i, f.key)] = f.value
    return view


def cover_for_body(body: BlockBody) -> list[str]:
    i = body.index
    if i == 0:
        head = [GLOBAL_TID_KEY, GLOBAL_IP_KEY, block_key(0, "custody")]
    else:
        head = [block_key(i, "prev"), block_key(i, "custody")]
    return head + [block_key(i, f.key) for f in body.fields]


def sign_block_body(body: BlockBody, signer: crypto.Signer) -> SignedBlock:
    """Sign a fully formed body without altering it.

    This is the remote-signing primitive for the mobile-app case; the local
    builders below construct the body first and then call this.
    """
    body.validate()
    if body.signer_domain != signer.domain:
        raise InvalidBlockError(
            f"body names signer {body.signer_domain!r}, handle is {signer.domain!r}"
        )
    keys_string = build_keys_string(cover_for_body(body))
    payload = build_value_string(keys_string, _body_flat_entries(body))
    return SignedBlock(
        body=body,
        keys_string=keys_string,
        signature=crypto.b64url_encode(signer.sign(payload)),
        algorithm=signer.algorithm,
    )


def build_first_block(
    tid: TransactionId,
    client_ip: str,
    custody: str,
    fields: list[DataField],
    signer: crypto.Signer,
) -> SignedBlock:
    if not is_valid_domain(custody):
        raise InvalidBlockError(f"bad custody domain: {custody!r}")
    body = BlockBody(
        index=0,
        signer_domain=signer.domain,
        custody=custody,
        fields=_check_user_fields(fields),
        transaction_id=tid,
        client_ip=canonical_ip(client_ip),
    )
    return sign_block_body(body, signer)


def build_next_block(
    chain: Chain,
    custody: str,
    fields: list[DataField],
    signer: crypto.Signer,
    *,
    require_custody: bool = True,
) -> SignedBlock:
    """Append-side constructor for blocks i > 0.

    ``require_custody`` enforces unequivocal custody: the signer must be the
    current delegate. Entities accepting chains across a custody gap (a
    non-adopting upstream partner) pass False; the gap stays visible to
    verification either way.
    """
    chain.validate()
    last = chain.last
    if last.body.is_temporary:
        raise InvalidChainError("cannot extend a temporary chain; finalize it first")
    if require_custody and last.body.custody != signer.domain:
        raise CustodyMismatchError(
            f"custody is with {last.body.custody!r}, not {signer.domain!r}"
        )
    temporary = custody == PENDING_CUSTODY
    if not temporary and not is_valid_domain(custody):
        raise InvalidBlockError(f"bad custody domain: {custody!r}")
    block_fields = _check_user_fields(fields)
    if temporary:
        block_fields += (DataField("tmp", "1"),)
    body = BlockBody(
        index=len(chain.blocks),
        signer_domain=signer.domain,
        custody=custody,
        prev_signature=last.signature,
        fields=block_fields,
    )
    return sign_block_body(body, signer)


def finalize_auction_block(
    temp_chain: Chain, winner: str, signer: crypto.Signer
) -> Chain:
    """Rebuild the temporary block with custody delegated to the winner.

    The tmp marker is dropped from fields and cover, the block is re-signed,
    and the temporary signature is discarded.
    """
    temp_chain.validate()
    last = temp_chain.last
    if not last.body.is_temporary:
        raise NotTemporaryError("last block does not carry pending custody")
    if last.body.signer_domain != signer.domain:
        raise CustodyMismatchError(
            f"temporary block was signed by {last.body.signer_domain!r}, "
            f"not {signer.domain!r}"
        )
    kept = [f for f in last.body.fields if f.key != "tmp"]
    prefix = Chain(temp_chain.blocks[:-1])
    # Custody was settled when the temporary block was appended (possibly
    # across a gap); rebuilding must not re-litigate it.
    rebuilt = build_next_block(prefix, winner, kept, signer, require_custody=False)
    return prefix.extended(rebuilt)


def _structural_verdict(block: SignedBlock) -> str | None:
    """MALFORMED reasons that do not need key material, else None."""
    try:
        block.body.validate()
    except ChainError:
        return MALFORMED
    cover = block.cover()
    if len(set(cover)) != len(cover) or not all(_KEY_RE.match(k) for k in cover):
        return MALFORMED
    i = block.body.index
    if i == 0:
        head = [GLOBAL_TID_KEY, GLOBAL_IP_KEY, block_key(0, "custody")]
    else:
        head = [block_key(i, "prev"), block_key(i, "custody")]
    if cover[: len(head)] != head:
        return MALFORMED
    covered = set(cover)
    for f in block.body.fields:
        if block_key(i, f.key) not in covered:
            return MALFORMED
    if block.body.is_temporary and block_key(i, "tmp") not in covered:
        return MALFORMED
    return None


def verify_block(
    block: SignedBlock,
    flat: Mapping[str, str],
    public_key: crypto.PublicKey | bytes | None,
) -> str:
    """Verdict for one block against the transaction's flat view."""
    bad = _structural_verdict(block)
    if bad:
        return bad
    try:
        payload = build_value_string(block.keys_string, flat)
    except MissingKeyError:
        return MISSING_KEY
    except ChainError:
        return MALFORMED
    if public_key is None:
        return UNVERIFIABLE
    try:
        signature = crypto.b64url_decode(block.signature)
    except Exception:
        return MALFORMED
    if crypto.verify(public_key, payload, signature):
        return VALID
    return BAD_SIGNATURE


def verify_chain(
    chain: Chain,
    key_lookup: Mapping[str, crypto.PublicKey] | Callable[[str], crypto.PublicKey | None],
) -> ChainReport:
    """Verify every block, the prev-signature linkage, and custody continuity.

    A custody gap (the delegate named by block i did not sign block i+1) is
    reported, not treated as a failure: chains crossing non-adopting
    entities still verify block by block.
    """
    lookup = key_lookup.get if isinstance(key_lookup, Mapping) else key_lookup
    flat = flat_view(chain)
    verdicts = []
    for i, block in enumerate(chain.blocks):
        verdict = _structural_verdict(block)
        if verdict is None and block.body.index != i:
            verdict = MALFORMED
        if verdict is None and i > 0 and (
            block.body.prev_signature != chain.blocks[i - 1].signature
        ):
            verdict = MALFORMED
        if verdict is None and block.body.is_temporary and i != len(chain.blocks) - 1:
            verdict = MALFORMED
        if verdict is None:
            verdict = verify_block(block, flat, lookup(block.body.signer_domain))
        verdicts.append(verdict)
    gaps = tuple(
        (i, chain.blocks[i].body.custody, chain.blocks[i + 1].body.signer_domain)
        for i in range(len(chain.blocks) - 1)
        if chain.blocks[i].body.custody != chain.blocks[i + 1].body.signer_domain
    )
    invalid = [i for i, v in enumerate(verdicts) if v != VALID]
    return ChainReport(
        verdicts=tuple(verdicts),
        first_invalid_index=invalid[0] if invalid else None,
        custody_gaps=gaps,
        is_temporary=chain.is_temporary,
    )
