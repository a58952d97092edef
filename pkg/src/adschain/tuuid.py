"""Time-based 128-bit transaction identifiers (tUUID).

A tUUID packs a 67-bit nanosecond Unix timestamp, a 7-bit per-process clock
sequence and a 48-bit node id into the standard 36-character UUID string
shape (dashes after the 4th, 6th, 8th and 10th byte). The version nibble is
fixed at 0xF to mark the nonstandard layout and the variant bits at 0b10.

Bit layout (67 + 7 + 48 + 4 + 2 == 128):

    bytes 0-3   timestamp bits 31..0        (big-endian)
    bytes 4-5   timestamp bits 47..32
    byte  6     high nibble: version 0xF | low nibble: timestamp bits 59..56
    byte  7     timestamp bits 55..48
    byte  8     top 2 bits: variant 0b10 | low 6 bits: timestamp bits 66..61
    byte  9     bit 7: timestamp bit 60    | low 7 bits: clock sequence
    bytes 10-15 node id                     (big-endian)

One generator per process/shard; generators on the same node must hold
distinct clock-sequence values. Within a generator, timestamps are strictly
increasing: two calls in the same nanosecond bump the second one by 1 ns.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from typing import Callable

TIMESTAMP_BITS = 67
CLOCK_SEQ_BITS = 7
NODE_BITS = 48
VERSION_NIBBLE = 0xF
VARIANT_BITS = 0b10

MAX_TIMESTAMP = (1 << TIMESTAMP_BITS) - 1
MAX_CLOCK_SEQ = (1 << CLOCK_SEQ_BITS) - 1
MAX_NODE = (1 << NODE_BITS) - 1

_DASH_POSITIONS = (8, 13, 18, 23)
_HEX_DIGITS = frozenset("0123456789abcdef")


class TuuidError(ValueError):
    """Malformed tUUID text or out-of-range field."""


class EpochExhausted(TuuidError):
    """The 67-bit nanosecond timestamp space has run out."""


@dataclass(frozen=True)
class TransactionId:
    """One ad transaction's identity, unique within a publisher's domain."""

    timestamp_ns: int
    clock_seq: int
    node_id: int

    def __post_init__(self) -> None:
        if not 0 <= self.timestamp_ns <= MAX_TIMESTAMP:
            raise TuuidError(f"timestamp_ns out of 67-bit range: {self.timestamp_ns}")
        if not 0 <= self.clock_seq <= MAX_CLOCK_SEQ:
            raise TuuidError(f"clock_seq out of 7-bit range: {self.clock_seq}")
        if not 0 <= self.node_id <= MAX_NODE:
            raise TuuidError(f"node_id out of 48-bit range: {self.node_id}")

    def to_bytes(self) -> bytes:
        ts = self.timestamp_ns
        b = bytearray(16)
        b[0:4] = (ts & 0xFFFF_FFFF).to_bytes(4, "big")
        b[4:6] = ((ts >> 32) & 0xFFFF).to_bytes(2, "big")
        hi12 = (ts >> 48) & 0x0FFF
        b[6] = (VERSION_NIBBLE << 4) | (hi12 >> 8)
        b[7] = hi12 & 0xFF
        top7 = (ts >> 60) & 0x7F
        b[8] = (VARIANT_BITS << 6) | (top7 >> 1)
        b[9] = ((top7 & 1) << 7) | self.clock_seq
        b[10:16] = self.node_id.to_bytes(6, "big")
        return bytes(b)

    def __str__(self) -> str:
        h = self.to_bytes().hex()
        return f"{h[0:8]}-{h[8:12]}-{h[12:16]}-{h[16:20]}-{h[20:32]}"


def from_bytes(raw: bytes) -> TransactionId:
    if len(raw) != 16:
        raise TuuidError(f"expected 16 bytes, got {len(raw)}")
    if raw[6] >> 4 != VERSION_NIBBLE:
        raise TuuidError(f"wrong version nibble: {raw[6] >> 4:#x}")
    if raw[8] >> 6 != VARIANT_BITS:
        raise TuuidError(f"wrong variant bits: {raw[8] >> 6:#04b}")
    ts = int.from_bytes(raw[0:4], "big")
    ts |= int.from_bytes(raw[4:6], "big") << 32
    ts |= (((raw[6] & 0x0F) << 8) | raw[7]) << 48
    top7 = ((raw[8] & 0x3F) << 1) | (raw[9] >> 7)
    ts |= top7 << 60
    return TransactionId(
        timestamp_ns=ts,
        clock_seq=raw[9] & 0x7F,
        node_id=int.from_bytes(raw[10:16], "big"),
    )


def parse(text: str) -> TransactionId:
    """Parse the canonical 36-character lowercase string form.

    Strict inverse of ``str()``: uppercase hex, wrong length, misplaced
    dashes, or bad version/variant markers are all rejected.
    """
    if len(text) != 36:
        raise TuuidError(f"expected 36 characters, got {len(text)}")
    hex_chars = []
    for i, ch in enumerate(text):
        if i in _DASH_POSITIONS:
            if ch != "-":
                raise TuuidError(f"expected dash at position {i}")
        elif ch in _HEX_DIGITS:
            hex_chars.append(ch)
        else:
            raise TuuidError(f"invalid character {ch!r} at position {i}")
    return from_bytes(bytes.fromhex("".join(hex_chars)))


class TuuidGenerator:
    """Monotonic per-process generator.

    Thread-safe; never repeats an id for a fixed (node_id, clock_seq) pair.
    """

    def __init__(
        self,
        node_id: int,
        clock_seq: int,
        now_ns: Callable[[], int] = time.time_ns,
    ):
        if not 0 <= node_id <= MAX_NODE:
            raise TuuidError(f"node_id out of 48-bit range: {node_id}")
        if not 0 <= clock_seq <= MAX_CLOCK_SEQ:
            raise TuuidError(f"clock_seq out of 7-bit range: {clock_seq}")
        self.node_id = node_id
        self.clock_seq = clock_seq
        self._now_ns = now_ns
        self._last_ts = -1
        self._lock = threading.Lock()

    def next(self) -> TransactionId:
        with self._lock:
            ts = self._now_ns()
            if ts <= self._last_ts:
                ts = self._last_ts + 1
            if ts > MAX_TIMESTAMP:
                raise EpochExhausted("67-bit nanosecond timestamp overflow")
            self._last_ts = ts
        return TransactionId(ts, self.clock_seq, self.node_id)
