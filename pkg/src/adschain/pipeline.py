"""Simulated programmatic ad-delivery pipeline.

Reproduces the lab topology: a publisher web server, an SSP, an AdX running
a timed auction, one or more DSPs, an optional ad server, and a
remote-signing endpoint for the mobile-app case. Entities exchange real
wire payloads (ad-tag query strings on the sell side, OpenRTB-shaped
objects on the buy side) through an in-process endpoint registry, produce
genuine signed chains, and log one TransactionRecord per ad space.

Message passing is synchronous and sequential; the AdX's bid fan-out issues
requests in bidder order and honors the auction deadline on the injected
clock, so the whole simulator runs single-threaded and, under a virtual
clock with a fixed seed, two runs of one topology produce byte-identical
chains. Per-operation stage durations (key retrieval, verify, sign) are
real ``perf_counter_ns`` measurements regardless of the simulation clock.
"""

from __future__ import annotations

import hashlib
import json
import random
import time
import urllib.parse
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from . import chain as chain_mod
from . import codec, crypto, keydir
from .clock import Clock, SystemClock
from .tuuid import TuuidGenerator

ROLE_PUBLISHER = "publisher"
ROLE_SSP = "ssp"
ROLE_ADX = "adx"
ROLE_DSP = "dsp"
ROLE_ADSERVER = "adserver"
ROLE_APP_SIGNER = "app-signer"
ROLES = (
    ROLE_PUBLISHER,
    ROLE_SSP,
    ROLE_ADX,
    ROLE_DSP,
    ROLE_ADSERVER,
    ROLE_APP_SIGNER,
)

GAP_LENIENT = "lenient"
GAP_STRICT = "strict"

STATUS_DELIVERED = "delivered"
STATUS_REJECTED = "rejected"
STATUS_UNSOLD = "unsold"

_ALGO_ALIASES = {
    "ecdsa": crypto.ECDSA_P256,
    "rsa": crypto.RSA_2048,
    crypto.ECDSA_P256: crypto.ECDSA_P256,
    crypto.RSA_2048: crypto.RSA_2048,
}

_AD_SIZES = ("300x250", "728x90", "160x600")


class PipelineError(Exception):
    pass


class UnknownDomainError(PipelineError):
    pass


class UnregisteredAppError(PipelineError):
    pass


def canonical_algorithm(name: str) -> str:
    try:
        return _ALGO_ALIASES[name.lower() if name not in _ALGO_ALIASES else name]
    except KeyError:
        raise PipelineError(f"unknown algorithm {name!r}") from None


# --------------------------------------------------------------------------
# Topology
# --------------------------------------------------------------------------


@dataclass
class EntityConfig:
    role: str
    domain: str
    algorithm: str = crypto.ECDSA_P256
    downstream: tuple[str, ...] = ()
    signing_enabled: bool = True
    gap_policy: str = GAP_LENIENT
    auction_wait_ms: float = 120.0  # AdX only
    bid: float | None = None  # DSP fixed bid; None draws from the seeded rng
    fields: dict[str, str] = field(default_factory=dict)
    apps: tuple[str, ...] = ()  # app-signer registered app ids
    max_ads: int = 30  # publisher page limit
    clock_seq: int = 0  # publisher tUUID generator id

    def __post_init__(self) -> None:
        self.downstream = tuple(self.downstream)
        self.apps = tuple(self.apps)
        self.algorithm = canonical_algorithm(self.algorithm)
        if self.role not in ROLES:
            raise PipelineError(f"unknown role {self.role!r}")
        if not chain_mod.is_valid_domain(self.domain):
            raise PipelineError(f"bad domain {self.domain!r}")
        if self.auction_wait_ms < 0:
            raise PipelineError("auction_wait_ms must be >= 0")
        if self.gap_policy not in (GAP_LENIENT, GAP_STRICT):
            raise PipelineError(f"unknown gap policy {self.gap_policy!r}")


@dataclass
class Topology:
    entities: list[EntityConfig]
    seed: int = 0
    key_cache_capacity: int = keydir.DEFAULT_CAPACITY
    key_cache_ttl_secs: float = keydir.DEFAULT_TTL_SECS

    def validate(self) -> None:
        domains = [e.domain for e in self.entities]
        if len(set(domains)) != len(domains):
            raise PipelineError("duplicate entity domains in topology")
        publishers = [e for e in self.entities if e.role == ROLE_PUBLISHER]
        if len(publishers) != 1:
            raise PipelineError("topology needs exactly one publisher")
        if any(e.role == ROLE_ADX for e in self.entities) and not any(
            e.role == ROLE_DSP for e in self.entities
        ):
            raise PipelineError("an AdX needs at least one DSP")
        known = set(domains)
        for e in self.entities:
            if e.role in (ROLE_PUBLISHER, ROLE_SSP, ROLE_ADX) and not e.downstream:
                raise PipelineError(f"{e.domain} ({e.role}) has no downstream")
            for d in e.downstream:
                if d not in known:
                    raise PipelineError(f"{e.domain} names unknown downstream {d!r}")

    def to_dict(self) -> dict:
        out: dict = {"seed": self.seed, "entities": []}
        if (self.key_cache_capacity, self.key_cache_ttl_secs) != (
            keydir.DEFAULT_CAPACITY,
            keydir.DEFAULT_TTL_SECS,
        ):
            out["key_cache"] = {
                "capacity": self.key_cache_capacity,
                "ttl_secs": self.key_cache_ttl_secs,
            }
        for e in self.entities:
            entry: dict = {"role": e.role, "domain": e.domain, "algorithm": e.algorithm}
            if e.downstream:
                entry["downstream"] = list(e.downstream)
            if not e.signing_enabled:
                entry["signing_enabled"] = False
            if e.gap_policy != GAP_LENIENT:
                entry["gap_policy"] = e.gap_policy
            if e.role == ROLE_ADX:
                entry["auction_wait_ms"] = e.auction_wait_ms
            if e.bid is not None:
                entry["bid"] = e.bid
            if e.fields:
                entry["fields"] = dict(e.fields)
            if e.apps:
                entry["apps"] = list(e.apps)
            out["entities"].append(entry)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "Topology":
        entities = []
        for entry in raw.get("entities", []):
            kwargs = dict(entry)
            if "downstream" in kwargs:
                kwargs["downstream"] = tuple(kwargs["downstream"])
            if "apps" in kwargs:
                kwargs["apps"] = tuple(kwargs["apps"])
            entities.append(EntityConfig(**kwargs))
        cache = raw.get("key_cache", {})
        topo = cls(
            entities=entities,
            seed=int(raw.get("seed", 0)),
            key_cache_capacity=int(cache.get("capacity", keydir.DEFAULT_CAPACITY)),
            key_cache_ttl_secs=float(cache.get("ttl_secs", keydir.DEFAULT_TTL_SECS)),
        )
        topo.validate()
        return topo

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Topology":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_topology(
    algorithm: str = crypto.ECDSA_P256,
    n_dsps: int = 1,
    ssp_signing: bool = True,
    adx_signing: bool = True,
    auction_wait_ms: float = 120.0,
    seed: int = 0,
    dsp_bids: dict[str, float] | None = None,
) -> Topology:
    """The 4-entity lab path publisher -> SSP -> AdX -> DSP(s)."""
    algorithm = canonical_algorithm(algorithm)
    if n_dsps < 1:
        raise PipelineError("need at least one DSP")
    if n_dsps == 1:
        dsp_domains = ["dsp.example"]
    else:
        dsp_domains = [f"dsp-{chr(ord('a') + i)}.example" for i in range(n_dsps)]
    entities = [
        EntityConfig(
            role=ROLE_PUBLISHER,
            domain="pub.example",
            algorithm=algorithm,
            downstream=("ssp.example",),
            fields={"site": "news"},
        ),
        EntityConfig(
            role=ROLE_SSP,
            domain="ssp.example",
            algorithm=algorithm,
            downstream=("adx.example",),
            signing_enabled=ssp_signing,
            fields={"seller": "direct"},
        ),
        EntityConfig(
            role=ROLE_ADX,
            domain="adx.example",
            algorithm=algorithm,
            downstream=tuple(dsp_domains),
            signing_enabled=adx_signing,
            auction_wait_ms=auction_wait_ms,
            fields={"auction": "open"},
        ),
    ]
    for domain in dsp_domains:
        entities.append(
            EntityConfig(
                role=ROLE_DSP,
                domain=domain,
                algorithm=algorithm,
                bid=(dsp_bids or {}).get(domain),
                fields={
                    "advertiser": f"brand-of-{domain.split('.')[0]}.example",
                    "campaign": "c-1001",
                    "creative": "cr-42",
                },
            )
        )
    topo = Topology(entities=entities, seed=seed)
    topo.validate()
    return topo


# --------------------------------------------------------------------------
# Credentials
# --------------------------------------------------------------------------


@dataclass
class Credentials:
    ca: crypto.CertificateAuthority
    keys: dict[str, crypto.KeyPair]
    certs: dict[str, crypto.DomainCertificate]
    trust: crypto.TrustStore


def build_credentials(
    topology: Topology,
    ca_name: str = "adschain-test-ca",
    not_before: int = 0,
    not_after: int = 4102444800,  # 2100-01-01; far past any simulated clock
    keys: dict[str, crypto.KeyPair] | None = None,
) -> Credentials:
    """Local test CA plus one keypair and ``ads.`` subdomain certificate per
    entity. Pass ``keys`` to reuse externally generated key material."""
    ca = crypto.CertificateAuthority(ca_name)
    trust = crypto.TrustStore([ca.root_certificate()])
    out_keys: dict[str, crypto.KeyPair] = {}
    certs: dict[str, crypto.DomainCertificate] = {}
    for entity in topology.entities:
        pair = (keys or {}).get(entity.domain) or crypto.generate_keypair(
            entity.algorithm
        )
        out_keys[entity.domain] = pair
        certs[entity.domain] = ca.issue_for(
            f"ads.{entity.domain}", pair, not_before, not_after
        )
    return Credentials(ca=ca, keys=out_keys, certs=certs, trust=trust)


# --------------------------------------------------------------------------
# Endpoint registry
# --------------------------------------------------------------------------


class EndpointRegistry:
    """Domain -> entity routing for the in-process transport."""

    def __init__(self) -> None:
        self._entities: dict[str, "Entity"] = {}

    def register(self, entity: "Entity") -> None:
        self._entities[entity.domain] = entity

    def get(self, domain: str) -> "Entity | None":
        return self._entities.get(domain)

    def entity(self, domain: str) -> "Entity":
        found = self.get(domain)
        if found is None:
            raise UnknownDomainError(f"no entity registered for {domain!r}")
        return found

    def certificate_document(self, domain: str) -> bytes:
        return self.entity(domain).certificate_document()

    def domains(self) -> list[str]:
        return sorted(self._entities)


class RegistryFetcher:
    """Certificate fetches over the in-process endpoint registry."""

    def __init__(self, registry: EndpointRegistry):
        self._registry = registry

    def fetch(self, domain: str) -> bytes:
        try:
            return self._registry.certificate_document(domain)
        except UnknownDomainError as exc:
            raise keydir.FetchFailedError(str(exc)) from exc


# --------------------------------------------------------------------------
# Transaction records
# --------------------------------------------------------------------------


@dataclass
class StageTiming:
    entity: str
    key_retrieval_ns: int = 0
    verify_ns: int = 0
    sign_ns: int = 0


@dataclass
class TransactionRecord:
    tid: str
    client_ip: str
    status: str = STATUS_DELIVERED
    winner: str | None = None
    final_chain: dict | None = None
    ad_url: str | None = None
    error: str | None = None
    events: list[tuple[str, str, int, str | None]] = field(default_factory=list)
    stages: list[StageTiming] = field(default_factory=list)

    def add_event(
        self, entity: str, name: str, at_ns: int, detail: str | None = None
    ) -> None:
        self.events.append((entity, name, at_ns, detail))

    def stage(self, entity: str) -> StageTiming:
        timing = StageTiming(entity=entity)
        self.stages.append(timing)
        return timing

    def to_json_line(self) -> str:
        return json.dumps(
            {
                "tid": self.tid,
                "client_ip": self.client_ip,
                "status": self.status,
                "winner": self.winner,
                "final_chain": self.final_chain,
                "ad_url": self.ad_url,
                "error": self.error,
                "events": [list(e) for e in self.events],
                "stages": [
                    {
                        "entity": s.entity,
                        "key_retrieval_ns": s.key_retrieval_ns,
                        "verify_ns": s.verify_ns,
                        "sign_ns": s.sign_ns,
                    }
                    for s in self.stages
                ],
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json_line(cls, line: str) -> "TransactionRecord":
        raw = json.loads(line)
        record = cls(
            tid=str(raw["tid"]),
            client_ip=str(raw.get("client_ip", "")),
            status=str(raw.get("status", STATUS_DELIVERED)),
            winner=raw.get("winner"),
            final_chain=raw.get("final_chain"),
            ad_url=raw.get("ad_url"),
            error=raw.get("error"),
        )
        for entity, name, at_ns, detail in raw.get("events", []):
            record.add_event(entity, name, at_ns, detail)
        for s in raw.get("stages", []):
            record.stages.append(
                StageTiming(
                    entity=s["entity"],
                    key_retrieval_ns=s.get("key_retrieval_ns", 0),
                    verify_ns=s.get("verify_ns", 0),
                    sign_ns=s.get("sign_ns", 0),
                )
            )
        return record


def write_log(records: Iterable[TransactionRecord], path: str | Path) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(record.to_json_line() + "\n")
            count += 1
    return count


def read_log(path: str | Path) -> Iterator[TransactionRecord]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield TransactionRecord.from_json_line(line)


# --------------------------------------------------------------------------
# Messages between entities
# --------------------------------------------------------------------------


@dataclass
class AdResponse:
    status: str
    ad_url: str | None = None
    reason: str | None = None
    rejected_by: str | None = None


@dataclass
class BidResponse:
    domain: str
    price: float
    ad_url: str | None = None
    no_bid_reason: str | None = None

    @property
    def is_bid(self) -> bool:
        return self.price > 0 and self.ad_url is not None


@dataclass
class Page:
    html: str
    urls: list[str]
    tids: list[str]
    serve_ns: int  # whole-page serving time, real clock
    sign_ns: int  # portion spent building and signing blocks


class _Rejection(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


REJECT_BAD_SIGNATURE = "bad-signature"
REJECT_CUSTODY_MISMATCH = "custody-mismatch"
REJECT_UNVERIFIABLE = "unverifiable-signer"
REJECT_MALFORMED = "malformed-transport"


# --------------------------------------------------------------------------
# Entities
# --------------------------------------------------------------------------


class Entity:
    def __init__(self, eco: "Ecosystem", config: EntityConfig):
        self.eco = eco
        self.config = config
        self.domain = config.domain
        self.keypair = eco.credentials.keys[config.domain]
        self.certificate = eco.credentials.certs[config.domain]
        self._certificate_text = crypto.certificate_to_text(self.certificate)
        self.signer = crypto.Signer(config.domain, self.keypair)
        self.keydir = keydir.KeyDirectory(
            fetcher=RegistryFetcher(eco.registry),
            trust=eco.credentials.trust,
            capacity=eco.key_cache_capacity,
            ttl_secs=eco.key_cache_ttl_secs,
            now_ns=eco.clock.now_ns,
        )

    def certificate_document(self) -> bytes:
        return self._certificate_text.encode("utf-8")

    def _now(self) -> int:
        return self.eco.clock.now_ns()

    def _event(
        self, record: TransactionRecord | None, name: str, detail: str | None = None
    ) -> None:
        if record is not None:
            record.add_event(self.domain, name, self._now(), detail)

    def serve_ad(self, url: str, record: TransactionRecord | None) -> str:
        self._event(record, "impression", urllib.parse.urlsplit(url).query or None)
        return "<creative/>"

    def my_fields(self) -> list[chain_mod.DataField]:
        return [chain_mod.DataField(k, v) for k, v in self.config.fields.items()]


class Publisher(Entity):
    def __init__(self, eco: "Ecosystem", config: EntityConfig):
        super().__init__(eco, config)
        node_id = int.from_bytes(
            hashlib.sha256(config.domain.encode()).digest()[:6], "big"
        )
        self.generator = TuuidGenerator(
            node_id=node_id, clock_seq=config.clock_seq, now_ns=eco.clock.now_ns
        )

    def serve_page(
        self, n_ads: int, sign: bool = True, client_ip: str = "203.0.113.7"
    ) -> Page:
        """Page with one ad-tag per ad space; each carries a fresh tUUID and,
        when signing is on, a block-0 signature delegating custody."""
        if not 1 <= n_ads <= self.config.max_ads:
            raise PipelineError(
                f"n_ads must be in 1..{self.config.max_ads}, got {n_ads}"
            )
        t_page = time.perf_counter_ns()
        custody = self.config.downstream[0]
        base = f"https://{custody}/ad"
        urls: list[str] = []
        tids: list[str] = []
        sign_ns = 0
        for slot in range(n_ads):
            tid = self.generator.next()
            tids.append(str(tid))
            slot_params = {"slot": str(slot), "size": _AD_SIZES[slot % len(_AD_SIZES)]}
            if sign:
                t0 = time.perf_counter_ns()
                fields = [
                    chain_mod.DataField(k, v) for k, v in slot_params.items()
                ] + self.my_fields()
                block = chain_mod.build_first_block(
                    tid, client_ip, custody, fields, self.signer
                )
                url = codec.embed_query(chain_mod.Chain((block,)), base)
                sign_ns += time.perf_counter_ns() - t0
            else:
                query = urllib.parse.urlencode({"id": str(tid), **slot_params})
                url = f"{base}?{query}"
            urls.append(url)
        tags = "\n".join(
            f'  <li><script src="{url}" type="text/javascript"></script></li>'
            for url in urls
        )
        html = f"<html><body>\n<ul>\n{tags}\n</ul>\n</body></html>\n"
        return Page(
            html=html,
            urls=urls,
            tids=tids,
            serve_ns=time.perf_counter_ns() - t_page,
            sign_ns=sign_ns,
        )


class Intermediary(Entity):
    """Shared receive-verify-append logic for SSPs and the AdX."""

    def _receive(
        self, msg: codec.AdMessage, record: TransactionRecord | None
    ) -> tuple[chain_mod.Chain, StageTiming]:
        """Extract and verify the incoming chain; raises _Rejection."""
        timing = record.stage(self.domain) if record is not None else StageTiming(self.domain)
        try:
            incoming, _ = msg.extract()
        except codec.TransportError as exc:
            raise _Rejection(f"{REJECT_MALFORMED}: {exc}") from exc

        t0 = time.perf_counter_ns()
        keys: dict[str, crypto.PublicKey] = {}
        unknown: list[str] = []
        for block in incoming.blocks:
            signer = block.body.signer_domain
            if signer in keys or signer in unknown:
                continue
            try:
                keys[signer] = self.keydir.get_public_key(signer)
            except keydir.KeyDirectoryError:
                unknown.append(signer)
        timing.key_retrieval_ns = time.perf_counter_ns() - t0

        t0 = time.perf_counter_ns()
        report = chain_mod.verify_chain(incoming, keys.get)
        timing.verify_ns = time.perf_counter_ns() - t0

        if not report.ok:
            bad = report.first_invalid_index
            if report.verdicts[bad] == chain_mod.UNVERIFIABLE:
                raise _Rejection(f"{REJECT_UNVERIFIABLE}: block {bad}")
            raise _Rejection(f"{REJECT_BAD_SIGNATURE}: block {bad}")
        self._event(record, "verified", f"blocks={len(incoming)}")

        holder = incoming.last.body.custody
        if holder != self.domain:
            if self.config.gap_policy == GAP_STRICT:
                raise _Rejection(f"{REJECT_CUSTODY_MISMATCH}: custody is {holder!r}")
            self._event(record, "custody-gap-accepted", f"custody={holder}")
        return incoming, timing

    def _append_block(
        self,
        incoming: chain_mod.Chain,
        custody: str,
        timing: StageTiming,
        record: TransactionRecord | None,
    ) -> chain_mod.Chain:
        if not self.config.signing_enabled:
            return incoming
        t0 = time.perf_counter_ns()
        block = chain_mod.build_next_block(
            incoming,
            custody,
            self.my_fields(),
            self.signer,
            require_custody=incoming.last.body.custody == self.domain,
        )
        outgoing = incoming.extended(block)
        timing.sign_ns += time.perf_counter_ns() - t0
        self._event(record, "block-appended", f"custody={custody}")
        return outgoing


class Ssp(Intermediary):
    def process_ad_request(
        self, msg: codec.AdMessage, record: TransactionRecord | None = None
    ) -> codec.AdMessage:
        """Verify the incoming chain, append this entity's block, and return
        the message to forward downstream. Raises _Rejection for chains that
        must not continue."""
        incoming, timing = self._receive(msg, record)
        outgoing = self._append_block(
            incoming, self.config.downstream[0], timing, record
        )
        next_base = f"https://{self.config.downstream[0]}/ad"
        return codec.AdMessage(
            codec.QUERY_TRANSPORT, codec.embed_query(outgoing, next_base)
        )

    def handle_ad_request(
        self, msg: codec.AdMessage, record: TransactionRecord | None = None
    ) -> AdResponse:
        self._event(record, "ad-request")
        if msg.transport == codec.QUERY_TRANSPORT and not codec.has_chain_params(
            msg.payload
        ):
            # Plain ad-tag: the basic procedure, no verification or block.
            plain = codec.AdMessage(
                codec.QUERY_TRANSPORT,
                f"https://{self.config.downstream[0]}/ad?"
                + urllib.parse.urlsplit(msg.payload).query,
            )
            return self._forward(plain, record)
        try:
            outgoing = self.process_ad_request(msg, record)
        except _Rejection as exc:
            self._event(record, "rejected", exc.reason)
            return AdResponse(
                status=STATUS_REJECTED, reason=exc.reason, rejected_by=self.domain
            )
        return self._forward(outgoing, record)

    def _forward(
        self, msg: codec.AdMessage, record: TransactionRecord | None
    ) -> AdResponse:
        downstream = self.eco.registry.entity(self.config.downstream[0])
        return downstream.handle_ad_request(msg, record)


class Adx(Intermediary):
    def handle_ad_request(
        self, msg: codec.AdMessage, record: TransactionRecord | None = None
    ) -> AdResponse:
        self._event(record, "ad-request")
        incoming: chain_mod.Chain | None = None
        timing = StageTiming(self.domain)
        fallback_tid = "-"
        signed_flow = not (
            msg.transport == codec.QUERY_TRANSPORT
            and not codec.has_chain_params(msg.payload)
        )
        if signed_flow:
            try:
                incoming, timing = self._receive(msg, record)
            except _Rejection as exc:
                self._event(record, "rejected", exc.reason)
                return AdResponse(
                    status=STATUS_REJECTED, reason=exc.reason, rejected_by=self.domain
                )
        elif msg.transport == codec.QUERY_TRANSPORT:
            fallback_tid = _tid_of(msg.payload)
        return self.run_auction(incoming, timing, record, fallback_tid)

    def run_auction(
        self,
        incoming: chain_mod.Chain | None,
        timing: StageTiming,
        record: TransactionRecord | None,
        fallback_tid: str = "-",
    ) -> AdResponse:
        """Temporary chain out to all bidders, deadline wait, winner pick,
        billing notice with the finalized chain, loss notices."""
        temp_chain = incoming
        if incoming is not None and self.config.signing_enabled:
            t0 = time.perf_counter_ns()
            block = chain_mod.build_next_block(
                incoming,
                chain_mod.PENDING_CUSTODY,
                self.my_fields(),
                self.signer,
                require_custody=incoming.last.body.custody == self.domain,
            )
            temp_chain = incoming.extended(block)
            timing.sign_ns += time.perf_counter_ns() - t0
            self._event(record, "temporary-block-appended")

        tid = str(temp_chain.transaction_id) if temp_chain is not None else fallback_tid
        base_request = {
            "id": tid,
            "tmax": int(self.config.auction_wait_ms),
            "imp": [{"id": "1"}],
        }
        bid_request = (
            codec.embed_openrtb(temp_chain, base_request)
            if temp_chain is not None
            else base_request
        )
        self._event(record, "auction-started", f"bidders={len(self.config.downstream)}")
        responses: list[BidResponse] = []
        for bidder in self.config.downstream:
            entity = self.eco.registry.entity(bidder)
            self._event(record, "bid-request", bidder)
            responses.append(entity.handle_bid_request(bid_request, record))
        self.eco.clock.sleep(self.config.auction_wait_ms / 1000.0)

        bids = [r for r in responses if r.is_bid]
        if not bids:
            self._event(record, "auction-unsold")
            return AdResponse(status=STATUS_UNSOLD, reason="no valid bids")
        # Highest bid wins; ties go to the lexicographically smallest domain.
        winner = sorted(bids, key=lambda r: (-r.price, r.domain))[0]
        self._event(record, "auction-completed", f"winner={winner.domain}")

        billing, completed = self.send_billing_notice(
            temp_chain, winner, timing=timing, record=record
        )
        for loser in bids:
            if loser.domain != winner.domain:
                self._event(record, "loss-notice", loser.domain)
                self.eco.registry.entity(loser.domain).handle_loss_notice(
                    {"type": "loss-notice", "id": billing["id"]}, record
                )
        if record is not None:
            record.winner = winner.domain
            if completed is not None:
                record.final_chain = codec.chain_to_payload(completed)
        return AdResponse(status=STATUS_DELIVERED, ad_url=winner.ad_url)

    def send_billing_notice(
        self,
        temp_chain: chain_mod.Chain | None,
        winner: BidResponse,
        timing: StageTiming | None = None,
        record: TransactionRecord | None = None,
    ) -> tuple[dict, chain_mod.Chain | None]:
        """Finalize custody to the winner and deliver the billing notice.

        The notice carries the final chain whose last delegation names the
        winner; only the winner receives it. Returns the notice and the
        winner's completed chain (with its terminal block appended)."""
        final_chain = temp_chain
        if temp_chain is not None and self.config.signing_enabled:
            t0 = time.perf_counter_ns()
            final_chain = chain_mod.finalize_auction_block(
                temp_chain, winner.domain, self.signer
            )
            if timing is not None:
                timing.sign_ns += time.perf_counter_ns() - t0
            self._event(record, "block-finalized", f"custody={winner.domain}")
        tid = str(temp_chain.transaction_id) if temp_chain is not None else "-"
        billing = {"type": "billing-notice", "id": tid, "price": winner.price}
        if final_chain is not None:
            billing = codec.embed_openrtb(final_chain, billing)
        self._event(record, "billing-notice", winner.domain)
        winner_entity = self.eco.registry.entity(winner.domain)
        completed = winner_entity.handle_billing_notice(billing, record)
        return billing, completed


class Dsp(Entity):
    def __init__(self, eco: "Ecosystem", config: EntityConfig):
        super().__init__(eco, config)
        self.bid_requests_seen: list[dict] = []

    @property
    def ad_host(self) -> str:
        return self.config.downstream[0] if self.config.downstream else self.domain

    def handle_bid_request(
        self, message: dict, record: TransactionRecord | None = None
    ) -> BidResponse:
        self.bid_requests_seen.append(message)
        tid = message.get("id", "-")
        try:
            incoming, _ = codec.extract_openrtb(message)
        except codec.AbsentExtensionError:
            incoming = None  # non-participating upstream; bid anyway
        except codec.TransportError as exc:
            self._event(record, "no-bid", str(exc))
            return BidResponse(self.domain, 0.0, no_bid_reason=f"malformed: {exc}")
        if incoming is not None:
            report = chain_mod.verify_chain(incoming, self.keydir.lookup)
            if not report.ok:
                self._event(record, "no-bid", "invalid chain")
                return BidResponse(self.domain, 0.0, no_bid_reason="invalid chain")
            if report.custody_gaps and self.config.gap_policy == GAP_STRICT:
                self._event(record, "no-bid", "custody gap")
                return BidResponse(self.domain, 0.0, no_bid_reason="custody gap")
        price = (
            self.config.bid
            if self.config.bid is not None
            else round(self.eco.rng.uniform(0.5, 5.0), 2)
        )
        ad_url = (
            f"https://{self.ad_host}/creative?tid={urllib.parse.quote(tid, safe='')}"
            f"&crid={self.config.fields.get('creative', 'cr-0')}"
        )
        self._event(record, "bid-response", f"price={price}")
        return BidResponse(self.domain, price, ad_url=ad_url)

    def handle_billing_notice(
        self, message: dict, record: TransactionRecord | None = None
    ) -> chain_mod.Chain | None:
        """Verify the delegated final chain and append the terminal block
        (advertiser, campaign, creative; custody kept by this entity)."""
        self._event(record, "billing-received")
        timing = record.stage(self.domain) if record is not None else StageTiming(self.domain)
        try:
            incoming, _ = codec.extract_openrtb(message)
        except codec.AbsentExtensionError:
            return None
        except codec.TransportError:
            self._event(record, "billing-malformed")
            return None
        t0 = time.perf_counter_ns()
        keys = {}
        for block in incoming.blocks:
            keys.setdefault(
                block.body.signer_domain,
                self.keydir.lookup(block.body.signer_domain),
            )
        timing.key_retrieval_ns = time.perf_counter_ns() - t0
        t0 = time.perf_counter_ns()
        report = chain_mod.verify_chain(incoming, keys.get)
        timing.verify_ns = time.perf_counter_ns() - t0
        if not report.ok or report.is_temporary:
            self._event(record, "billing-chain-invalid")
            return None
        holder = incoming.last.body.custody
        if holder != self.domain and self.config.gap_policy == GAP_STRICT:
            self._event(record, "billing-custody-mismatch", holder)
            return None
        if not self.config.signing_enabled:
            return incoming
        t0 = time.perf_counter_ns()
        block = chain_mod.build_next_block(
            incoming,
            self.domain,
            self.my_fields(),
            self.signer,
            require_custody=holder == self.domain,
        )
        completed = incoming.extended(block)
        timing.sign_ns += time.perf_counter_ns() - t0
        self._event(record, "final-block-appended")
        return completed

    def handle_loss_notice(
        self, message: dict, record: TransactionRecord | None = None
    ) -> None:
        self._event(record, "loss-received")


class AdServer(Entity):
    pass  # serves creatives via Entity.serve_ad; never signs


class AppSigner(Entity):
    """Trusted backend signing first blocks built on user devices."""

    def remote_sign(
        self, app_id: str, body: chain_mod.BlockBody
    ) -> chain_mod.SignedBlock:
        if app_id not in self.config.apps:
            raise UnregisteredAppError(f"app {app_id!r} is not registered")
        if body.index != 0:
            raise chain_mod.InvalidBlockError("remote signing covers first blocks only")
        if body.signer_domain != self.domain:
            raise chain_mod.InvalidBlockError(
                f"body names signer {body.signer_domain!r}; this signer serves "
                f"{self.domain!r}"
            )
        return chain_mod.sign_block_body(body, self.signer)


_ENTITY_CLASSES = {
    ROLE_PUBLISHER: Publisher,
    ROLE_SSP: Ssp,
    ROLE_ADX: Adx,
    ROLE_DSP: Dsp,
    ROLE_ADSERVER: AdServer,
    ROLE_APP_SIGNER: AppSigner,
}


# --------------------------------------------------------------------------
# Ecosystem
# --------------------------------------------------------------------------


class Ecosystem:
    """A wired topology ready to run transactions.

    Reusing one ``Credentials`` object across ecosystems keeps key material
    fixed, which (with a virtual clock and fixed seed) makes produced chains
    byte-for-byte reproducible.
    """

    def __init__(
        self,
        topology: Topology,
        credentials: Credentials | None = None,
        clock: Clock | None = None,
        seed: int | None = None,
        key_cache_capacity: int | None = None,
        key_cache_ttl_secs: float | None = None,
    ):
        topology.validate()
        self.topology = topology
        self.clock = clock or SystemClock()
        self.credentials = credentials or build_credentials(topology)
        self.key_cache_capacity = (
            topology.key_cache_capacity if key_cache_capacity is None else key_cache_capacity
        )
        self.key_cache_ttl_secs = (
            topology.key_cache_ttl_secs if key_cache_ttl_secs is None else key_cache_ttl_secs
        )
        self.rng = random.Random(topology.seed if seed is None else seed)
        self.registry = EndpointRegistry()
        self.entities: dict[str, Entity] = {}
        for config in topology.entities:
            entity = _ENTITY_CLASSES[config.role](self, config)
            self.entities[config.domain] = entity
            self.registry.register(entity)

    @property
    def publisher(self) -> Publisher:
        for entity in self.entities.values():
            if isinstance(entity, Publisher):
                return entity
        raise PipelineError("topology has no publisher")

    def entity(self, domain: str) -> Entity:
        return self.registry.entity(domain)

    def key_lookup(self, domain: str) -> crypto.PublicKey | None:
        """Trusted out-of-band key view, e.g. for an external auditor."""
        pair = self.credentials.keys.get(domain)
        return pair.public_key if pair else None

    def deliver_ad_tag(
        self, url: str, client_ip: str = "203.0.113.7"
    ) -> TransactionRecord:
        """Drive one ad-tag through the pipeline, as the user's browser
        would, and return its transaction record."""
        record = TransactionRecord(tid=_tid_of(url), client_ip=client_ip)
        host = urllib.parse.urlsplit(url).netloc
        try:
            entry = self.registry.entity(host)
        except UnknownDomainError as exc:
            record.status = STATUS_REJECTED
            record.error = str(exc)
            return record
        if not isinstance(entry, (Ssp, Adx)):
            record.status = STATUS_REJECTED
            record.error = f"{host} ({entry.config.role}) does not take ad requests"
            return record
        response = entry.handle_ad_request(
            codec.AdMessage(codec.QUERY_TRANSPORT, url), record
        )
        record.status = response.status
        if response.status == STATUS_REJECTED:
            record.error = response.reason
        elif response.status == STATUS_DELIVERED and response.ad_url:
            record.ad_url = response.ad_url
            ad_host = urllib.parse.urlsplit(response.ad_url).netloc
            server = self.registry.get(ad_host)
            if server is not None:
                server.serve_ad(response.ad_url, record)
        return record

    def run_transaction(
        self, n_ads: int = 1, sign: bool = True, client_ip: str = "203.0.113.7"
    ) -> list[TransactionRecord]:
        """One page visit: serve the page, then deliver every ad space."""
        page = self.publisher.serve_page(n_ads, sign=sign, client_ip=client_ip)
        records = []
        for url, tid in zip(page.urls, page.tids):
            record = self.deliver_ad_tag(url, client_ip)
            if record.tid == "-":
                record.tid = tid
            records.append(record)
        return records

    def run(
        self,
        transactions: int,
        n_ads: int = 1,
        sign: bool = True,
        client_ip: str = "203.0.113.7",
    ) -> list[TransactionRecord]:
        records: list[TransactionRecord] = []
        for _ in range(transactions):
            records.extend(self.run_transaction(n_ads, sign, client_ip))
        return records


def _tid_of(url: str) -> str:
    for key, value in urllib.parse.parse_qsl(
        urllib.parse.urlsplit(url).query, keep_blank_values=True
    ):
        if key in (chain_mod.GLOBAL_TID_KEY, "id"):
            return value
    return "-"
