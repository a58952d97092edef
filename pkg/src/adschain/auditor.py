"""Online and offline chain auditing.

Offline: verify every chain in a transaction log, localize tampering to a
block index, report custody gaps, and detect replayed transactions (one
signed request sold more than once) by spotting duplicate transaction ids.
Online: a receiving entity's real-time accept/reject decision for an
incoming chain.

Gap severity is policy, not protocol: the default lenient mode accepts
gap-containing chains and flags them (incremental adoption); strict mode
rejects them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

from . import chain as chain_mod
from . import codec, crypto
from .pipeline import TransactionRecord

TAMPERED_BLOCK = "tampered-block"
CUSTODY_GAP = "custody-gap"
DUPLICATE_TID = "duplicate-tid"
UNVERIFIABLE_SIGNER = "unverifiable-signer"
TEMPORARY_IN_FINAL = "temporary-in-final"
IP_MISMATCH = "ip-mismatch"

FINDING_KINDS = (
    TAMPERED_BLOCK,
    CUSTODY_GAP,
    DUPLICATE_TID,
    UNVERIFIABLE_SIGNER,
    TEMPORARY_IN_FINAL,
    IP_MISMATCH,
)

# Finding kinds that make the audit CLI exit nonzero.
FATAL_KINDS = frozenset({TAMPERED_BLOCK, DUPLICATE_TID, TEMPORARY_IN_FINAL})

POLICY_LENIENT = "lenient"
POLICY_STRICT = "strict"

KeyLookup = Mapping[str, crypto.PublicKey] | Callable[[str], crypto.PublicKey | None]


@dataclass(frozen=True)
class AuditFinding:
    tid: str
    kind: str
    block_index: int | None = None
    detail: str = ""

    def __post_init__(self) -> None:
        if self.kind not in FINDING_KINDS:
            raise ValueError(f"unknown finding kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {
            "tid": self.tid,
            "kind": self.kind,
            "block_index": self.block_index,
            "detail": self.detail,
        }


@dataclass
class AuditReport:
    transactions_checked: int = 0
    findings: list[AuditFinding] = field(default_factory=list)
    malformed_records: int = 0
    diagnostics: list[str] = field(default_factory=list)

    @property
    def counters(self) -> dict[str, int]:
        counts = {kind: 0 for kind in FINDING_KINDS}
        for finding in self.findings:
            counts[finding.kind] += 1
        return counts

    @property
    def clean(self) -> bool:
        return not self.findings and self.malformed_records == 0

    def exit_code(self) -> int:
        return 1 if any(f.kind in FATAL_KINDS for f in self.findings) else 0


@dataclass(frozen=True)
class Decision:
    accepted: bool
    reason: str = ""
    flags: tuple[AuditFinding, ...] = ()


def _as_lookup(keys: KeyLookup) -> Callable[[str], crypto.PublicKey | None]:
    return keys.get if isinstance(keys, Mapping) else keys


def audit_chain(
    chain: chain_mod.Chain,
    keys: KeyLookup,
    expected_ip: str | None = None,
) -> list[AuditFinding]:
    """All findings for one chain audited as final.

    Tampering is reported per invalid block; a custody gap per continuity
    violation; temporary-in-final if any pending/tmp block appears; and an
    ip-mismatch when the caller knows which client requested the ad.
    """
    tid = str(chain.transaction_id) if chain.transaction_id else "-"
    report = chain_mod.verify_chain(chain, _as_lookup(keys))
    findings: list[AuditFinding] = []
    for i, verdict in enumerate(report.verdicts):
        if verdict == chain_mod.VALID:
            continue
        if verdict == chain_mod.UNVERIFIABLE:
            findings.append(
                AuditFinding(
                    tid,
                    UNVERIFIABLE_SIGNER,
                    block_index=i,
                    detail=f"no key for {chain.blocks[i].body.signer_domain!r}",
                )
            )
        else:
            findings.append(
                AuditFinding(tid, TAMPERED_BLOCK, block_index=i, detail=verdict)
            )
    for i, expected, actual in report.custody_gaps:
        findings.append(
            AuditFinding(
                tid,
                CUSTODY_GAP,
                block_index=i,
                detail=f"block {i} delegated to {expected!r}, "
                f"block {i + 1} signed by {actual!r}",
            )
        )
    for i, block in enumerate(chain.blocks):
        if block.body.is_temporary or any(f.key == "tmp" for f in block.body.fields):
            findings.append(
                AuditFinding(
                    tid,
                    TEMPORARY_IN_FINAL,
                    block_index=i,
                    detail="temporary block in a final chain",
                )
            )
    if expected_ip is not None:
        want = chain_mod.canonical_ip(expected_ip)
        got = chain.client_ip
        if got != want:
            findings.append(
                AuditFinding(
                    tid,
                    IP_MISMATCH,
                    block_index=0,
                    detail=f"block 0 binds {got!r}, expected {want!r}",
                )
            )
    return findings


def _iter_records(
    log: str | Path | Iterable[str | TransactionRecord],
) -> Iterable[tuple[int, str | TransactionRecord]]:
    if isinstance(log, (str, Path)):
        with open(log, encoding="utf-8") as fh:
            for number, line in enumerate(fh, start=1):
                if line.strip():
                    yield number, line
    else:
        for number, item in enumerate(log, start=1):
            yield number, item


def audit_log(
    log: str | Path | Iterable[str | TransactionRecord],
    keys: KeyLookup,
) -> AuditReport:
    """Audit every chain in a transaction log and cross-check transaction
    ids for replays. ``log`` is a path, an iterable of JSON lines, or an
    iterable of TransactionRecord objects."""
    report = AuditReport()
    seen_tids: dict[str, list[int]] = {}
    for number, item in _iter_records(log):
        if isinstance(item, TransactionRecord):
            record = item
        else:
            try:
                record = TransactionRecord.from_json_line(item)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                report.malformed_records += 1
                report.diagnostics.append(f"record {number}: unparseable ({exc})")
                continue
        report.transactions_checked += 1
        if record.tid and record.tid != "-":
            seen_tids.setdefault(record.tid, []).append(number)
        if record.final_chain is None:
            continue
        try:
            chain = codec.chain_from_payload(record.final_chain)
        except codec.TransportError as exc:
            report.malformed_records += 1
            report.diagnostics.append(f"record {number}: bad chain payload ({exc})")
            continue
        report.findings.extend(
            audit_chain(chain, keys, expected_ip=record.client_ip or None)
        )
    for tid, numbers in seen_tids.items():
        if len(numbers) > 1:
            report.findings.append(
                AuditFinding(
                    tid,
                    DUPLICATE_TID,
                    detail="replayed transaction id in records "
                    + ", ".join(str(n) for n in numbers),
                )
            )
    return report


def online_check(
    entity_domain: str,
    chain: chain_mod.Chain,
    keys: KeyLookup,
    policy: str = POLICY_LENIENT,
) -> Decision:
    """Real-time decision for a chain delegating custody to ``entity_domain``.

    Rejects tampered or unverifiable chains and chains whose current custody
    names someone else. Interior custody gaps are accepted and flagged under
    the lenient policy, rejected under strict.
    """
    findings = audit_chain(chain, keys)
    fatal = [f for f in findings if f.kind != CUSTODY_GAP]
    if fatal:
        worst = fatal[0]
        return Decision(False, reason=f"{worst.kind}: {worst.detail}", flags=tuple(findings))
    holder = chain.last.body.custody
    if holder != entity_domain:
        return Decision(
            False,
            reason=f"custody-mismatch: chain delegates to {holder!r}",
            flags=tuple(findings),
        )
    gaps = tuple(f for f in findings if f.kind == CUSTODY_GAP)
    if gaps and policy == POLICY_STRICT:
        return Decision(False, reason="custody-gap under strict policy", flags=gaps)
    return Decision(True, reason="valid", flags=gaps)


def load_keys_dir(path: str | Path) -> dict[str, crypto.PublicKey]:
    """domain -> public key from a directory of certificate documents.

    Certificates for an ``ads.<domain>`` subject register under the bare
    domain as well, matching the signing convention.
    """
    keys: dict[str, crypto.PublicKey] = {}
    for file in sorted(Path(path).glob("*.crt")):
        cert = crypto.certificate_from_text(file.read_text())
        key = cert.public_key()
        keys[cert.subject_domain] = key
        if cert.subject_domain.startswith("ads."):
            keys[cert.subject_domain[4:]] = key
    return keys
