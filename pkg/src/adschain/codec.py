"""Chain transports: ad-tag query strings and OpenRTB message objects.

Both transports carry the same flat key-value material, so the byte string
each block signed can be rebuilt identically no matter which transports the
chain crossed. Wire keys per block i: ``ac<i>_signer`` (who signed),
``ac<i>_custody``, the data fields as ``ac<i>_<name>``, ``ac<i>_keys`` and
``ac<i>_sig``. ``ac_tid`` and ``ac_ip`` appear once, up front. The virtual
``ac<i>_prev`` binding key is never carried: it resolves to the previous
block's ``sig`` value.

Query strings percent-encode everything outside RFC 3986 unreserved
characters, with uppercase hex; decoding accepts either case. Signatures
are base64url so they cross URLs unchanged. In OpenRTB messages the chain
lives under ``source.ext.adschain`` as ``{tid, ip, blocks: [{signer,
custody, keys, sig, fields: {...}}]}``. Parameters and object members that
are not ours pass through untouched, so non-participants can simply ignore
the chain.
"""

from __future__ import annotations

import copy
import re
import urllib.parse
from dataclasses import dataclass

from . import tuuid
from .chain import (
    GLOBAL_IP_KEY,
    GLOBAL_TID_KEY,
    Chain,
    ChainError,
    DataField,
    BlockBody,
    FlatView,
    SignedBlock,
    block_key,
    flat_view,
)
from .crypto import ECDSA_P256, RSA_2048, b64url_decode

QUERY_TRANSPORT = "query-string"
OPENRTB_TRANSPORT = "openrtb"
OPENRTB_EXTENSION_KEY = "adschain"
DEFAULT_MAX_URL_LENGTH = 8192

# Per-block wire metadata that is not a data field.
_META_NAMES = frozenset({"signer", "custody", "keys", "sig"})
_AC_BLOCK_RE = re.compile(r"ac(\d+)_([a-z0-9_.-]+)\Z")
_AC_PREFIX_RE = re.compile(r"ac(\d+_|_)")


class TransportError(Exception):
    pass


class MalformedTransportError(TransportError):
    pass


class MissingParameterError(MalformedTransportError):
    """A present block index lacks part of its mandatory wire record."""


class NonContiguousBlocksError(MalformedTransportError):
    """Block indices present on the wire do not form 0..n-1."""


class DuplicateParameterError(MalformedTransportError):
    pass


class ConflictingParameterError(TransportError):
    """The carrier already uses our parameter namespace."""


class UrlTooLongError(TransportError):
    def __init__(self, length: int, limit: int):
        super().__init__(f"embedded URL is {length} bytes, limit {limit}")
        self.length = length
        self.limit = limit


class AbsentExtensionError(TransportError):
    """OpenRTB message carries no chain; treat the sender as non-participating."""


@dataclass(frozen=True)
class AdMessage:
    """Transport-level carrier of one ad request."""

    transport: str  # QUERY_TRANSPORT | OPENRTB_TRANSPORT
    payload: str | dict

    def extract(self) -> tuple[Chain, FlatView]:
        if self.transport == QUERY_TRANSPORT:
            return extract_query(self.payload)
        return extract_openrtb(self.payload)


def _quote(value: str) -> str:
    return urllib.parse.quote(value, safe="")


def chain_query_params(chain: Chain) -> list[tuple[str, str]]:
    """Canonical wire parameters: globals first, then blocks in index
    order; within a block, covered keys in keys-string order."""
    flat = flat_view(chain)
    params = []
    if GLOBAL_TID_KEY in flat:
        params.append((GLOBAL_TID_KEY, flat[GLOBAL_TID_KEY]))
    if GLOBAL_IP_KEY in flat:
        params.append((GLOBAL_IP_KEY, flat[GLOBAL_IP_KEY]))
    for block in chain.blocks:
        i = block.body.index
        params.append((block_key(i, "signer"), block.body.signer_domain))
        for key in block.cover():
            if key in (GLOBAL_TID_KEY, GLOBAL_IP_KEY, block_key(i, "prev")):
                continue
            params.append((key, flat[key]))
        params.append((block_key(i, "keys"), block.keys_string))
        params.append((block_key(i, "sig"), block.signature))
    return params


def embed_query(
    chain: Chain,
    base_url: str,
    extra_params: dict[str, str] | None = None,
    max_length: int = DEFAULT_MAX_URL_LENGTH,
) -> str:
    """Append the chain to an ad-tag URL's query string.

    Existing query text is preserved verbatim. Raises if the base already
    carries ``ac``-namespace parameters or the result exceeds ``max_length``.
    """
    split = urllib.parse.urlsplit(base_url)
    for key, _ in urllib.parse.parse_qsl(split.query, keep_blank_values=True):
        if _AC_PREFIX_RE.match(key):
            raise ConflictingParameterError(f"base URL already carries {key!r}")
    pieces = []
    if split.query:
        pieces.append(split.query)
    for key, value in chain_query_params(chain):
        pieces.append(f"{key}={_quote(value)}")
    for key, value in (extra_params or {}).items():
        if _AC_PREFIX_RE.match(key):
            raise ConflictingParameterError(f"extra parameter {key!r} is reserved")
        pieces.append(f"{_quote(key)}={_quote(value)}")
    url = urllib.parse.urlunsplit(
        (split.scheme, split.netloc, split.path, "&".join(pieces), split.fragment)
    )
    if len(url) > max_length:
        raise UrlTooLongError(len(url), max_length)
    return url


def _parse_query_pairs(query: str) -> list[tuple[str, str]]:
    pairs = []
    for item in query.split("&"):
        if not item:
            continue
        key, sep, value = item.partition("=")
        pairs.append((urllib.parse.unquote(key), urllib.parse.unquote(value)))
    return pairs


def extract_query(url: str) -> tuple[Chain, FlatView]:
    """Rebuild the chain from an ad-tag URL.

    Non-``ac`` parameters pass through into the returned flat view
    untouched. Duplicate keys, gaps in block numbering, and incomplete
    block records are transport errors; signature problems are not checked
    here.
    """
    query = urllib.parse.urlsplit(url).query
    pairs = _parse_query_pairs(query)
    seen: set[str] = set()
    for key, _ in pairs:
        if key in seen:
            raise DuplicateParameterError(f"duplicate parameter {key!r}")
        seen.add(key)
    globals_view: FlatView = {}
    blocks_raw: dict[int, dict[str, str]] = {}
    passthrough: FlatView = {}
    for key, value in pairs:
        if key in (GLOBAL_TID_KEY, GLOBAL_IP_KEY):
            globals_view[key] = value
            continue
        m = _AC_BLOCK_RE.match(key)
        if m:
            blocks_raw.setdefault(int(m.group(1)), {})[m.group(2)] = value
            continue
        if _AC_PREFIX_RE.match(key):
            raise MalformedTransportError(f"unrecognized ac-namespace parameter {key!r}")
        passthrough[key] = value
    if not blocks_raw:
        raise MalformedTransportError("no chain parameters present")
    chain = _assemble_chain(globals_view, blocks_raw)
    return chain, flat_view(chain, extra=passthrough)


def has_chain_params(url: str) -> bool:
    """Cheap participation probe: does the ad-tag carry our namespace?"""
    query = urllib.parse.urlsplit(url).query
    return any(
        _AC_PREFIX_RE.match(key)
        for key, _ in urllib.parse.parse_qsl(query, keep_blank_values=True)
    )


def _assemble_chain(
    globals_view: FlatView, blocks_raw: dict[int, dict[str, str]]
) -> Chain:
    indices = sorted(blocks_raw)
    if indices != list(range(len(indices))):
        raise NonContiguousBlocksError(f"block indices on the wire: {indices}")
    for want in (GLOBAL_TID_KEY, GLOBAL_IP_KEY):
        if want not in globals_view:
            raise MissingParameterError(f"missing global parameter {want!r}")
    try:
        tid = tuuid.parse(globals_view[GLOBAL_TID_KEY])
    except tuuid.TuuidError as exc:
        raise MalformedTransportError(f"bad ac_tid: {exc}") from exc
    blocks = []
    prev_sig: str | None = None
    for i in indices:
        raw = blocks_raw[i]
        for want in ("signer", "custody", "keys", "sig"):
            if want not in raw:
                raise MissingParameterError(
                    f"block {i} lacks mandatory parameter {block_key(i, want)!r}"
                )
        keys_string = raw["keys"]
        cover = keys_string.split(",")
        fields = []
        for key in cover:
            m = _AC_BLOCK_RE.match(key)
            if not m or int(m.group(1)) != i:
                continue
            name = m.group(2)
            if name in _META_NAMES or name == "prev" or name == "custody":
                continue
            if name not in raw:
                raise MissingParameterError(
                    f"covered key {key!r} absent from the wire"
                )
            fields.append((name, raw[name]))
        covered_names = {name for name, _ in fields}
        stray = set(raw) - _META_NAMES - {"prev", "custody"} - covered_names
        if stray:
            raise MalformedTransportError(
                f"block {i} carries uncovered data fields: {sorted(stray)}"
            )
        try:
            body = BlockBody(
                index=i,
                signer_domain=raw["signer"],
                custody=raw["custody"],
                prev_signature=prev_sig,
                fields=tuple(DataField(n, v) for n, v in fields),
                transaction_id=tid if i == 0 else None,
                client_ip=globals_view[GLOBAL_IP_KEY] if i == 0 else None,
            )
            block = SignedBlock(
                body=body,
                keys_string=keys_string,
                signature=raw["sig"],
                algorithm=_infer_algorithm(raw["sig"]),
            )
        except ChainError as exc:
            raise MalformedTransportError(f"block {i}: {exc}") from exc
        blocks.append(block)
        prev_sig = block.signature
    return Chain(tuple(blocks))


def _infer_algorithm(sig_b64: str) -> str:
    """The two configured schemes have disjoint signature sizes: DER ECDSA
    P-256 tops out near 72 bytes, RSA-2048 is exactly 256."""
    try:
        size = len(b64url_decode(sig_b64))
    except Exception as exc:
        raise MalformedTransportError(f"bad signature encoding: {exc}") from exc
    return RSA_2048 if size >= 128 else ECDSA_P256


# --------------------------------------------------------------------------
# OpenRTB transport
# --------------------------------------------------------------------------


def chain_to_payload(chain: Chain) -> dict:
    """JSON-shaped rendering shared by the OpenRTB transport, transaction
    logs, and the service API."""
    blocks = []
    for block in chain.blocks:
        blocks.append(
            {
                "signer": block.body.signer_domain,
                "custody": block.body.custody,
                "keys": block.keys_string,
                "sig": block.signature,
                "fields": {f.key: f.value for f in block.body.fields},
            }
        )
    return {
        "tid": str(chain.transaction_id),
        "ip": chain.client_ip,
        "blocks": blocks,
    }


def chain_from_payload(payload: dict) -> Chain:
    if not isinstance(payload, dict):
        raise MalformedTransportError("chain payload is not an object")
    for want in ("tid", "ip", "blocks"):
        if want not in payload:
            raise MalformedTransportError(f"chain payload lacks {want!r}")
    raw_blocks = payload["blocks"]
    if not isinstance(raw_blocks, list) or not raw_blocks:
        raise MalformedTransportError("chain payload carries no blocks")
    globals_view = {
        GLOBAL_TID_KEY: str(payload["tid"]),
        GLOBAL_IP_KEY: str(payload["ip"]),
    }
    blocks_raw: dict[int, dict[str, str]] = {}
    for i, entry in enumerate(raw_blocks):
        if not isinstance(entry, dict):
            raise MalformedTransportError(f"block entry {i} is not an object")
        raw: dict[str, str] = {}
        for want in ("signer", "custody", "keys", "sig"):
            if want not in entry:
                raise MissingParameterError(f"block entry {i} lacks {want!r}")
            raw[want] = str(entry[want])
        fields = entry.get("fields", {})
        if not isinstance(fields, dict):
            raise MalformedTransportError(f"block entry {i} fields is not an object")
        for name, value in fields.items():
            if name in _META_NAMES or name == "prev":
                raise MalformedTransportError(
                    f"block entry {i} field uses reserved name {name!r}"
                )
            raw[str(name)] = str(value)
        blocks_raw[i] = raw
    return _assemble_chain(globals_view, blocks_raw)


def embed_openrtb(chain: Chain, bid_object: dict) -> dict:
    """Return a copy of the message with the chain under
    ``source.ext.adschain``; the source section is created if absent."""
    message = copy.deepcopy(bid_object)
    source = message.setdefault("source", {})
    if not isinstance(source, dict):
        raise MalformedTransportError("message 'source' member is not an object")
    ext = source.setdefault("ext", {})
    if not isinstance(ext, dict):
        raise MalformedTransportError("source 'ext' member is not an object")
    if OPENRTB_EXTENSION_KEY in ext:
        raise ConflictingParameterError(
            f"message already carries source.ext.{OPENRTB_EXTENSION_KEY}"
        )
    ext[OPENRTB_EXTENSION_KEY] = chain_to_payload(chain)
    return message


def extract_openrtb(message: dict) -> tuple[Chain, FlatView]:
    if not isinstance(message, dict):
        raise MalformedTransportError("message is not an object")
    payload = (message.get("source") or {}).get("ext", {}).get(OPENRTB_EXTENSION_KEY)
    if payload is None:
        raise AbsentExtensionError("message carries no adschain extension")
    chain = chain_from_payload(payload)
    return chain, flat_view(chain)
