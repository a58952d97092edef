"""Partner public-key retrieval and caching.

Verification during ad delivery must never block on certificate fetches
once warm: keys live in a bounded LRU cache with time expiration. A miss
(or a stale entry) fetches the domain's certificate document from its
well-known path ``/ads-chain.crt``, validates it against the trust store,
and caches the key. Invalid certificates are never cached.

Fetches are single-flight: concurrent lookups for one cold domain perform
exactly one fetch and all callers receive the same validated key (the
documented duplicate-fetch bound is 1 per cold domain per expiry
generation). The transport is pluggable; the simulator registers an
in-process fetcher, and an HTTPS client can sit behind the same interface.
"""

from __future__ import annotations

import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Protocol

from . import crypto

WELL_KNOWN_PATH = "/ads-chain.crt"

DEFAULT_CAPACITY = 10_000
DEFAULT_TTL_SECS = 3600.0


class KeyDirectoryError(Exception):
    pass


class FetchFailedError(KeyDirectoryError):
    """Unknown domain or transport failure while retrieving a certificate."""


class MalformedCertificateError(KeyDirectoryError):
    """The document at the well-known path does not parse."""


class CertificateInvalidError(KeyDirectoryError):
    def __init__(self, domain: str, verdict: str):
        super().__init__(f"certificate for {domain!r} rejected: {verdict}")
        self.domain = domain
        self.verdict = verdict


class CertificateFetcher(Protocol):
    def fetch(self, domain: str) -> bytes:
        """Certificate document bytes for ``domain``; raises FetchFailedError."""
        ...


@dataclass
class CachedKey:
    domain: str
    public_material: bytes
    algorithm: str
    inserted_at_ns: int
    ttl_secs: float
    public_key: crypto.PublicKey

    def fresh(self, now_ns: int) -> bool:
        return now_ns < self.inserted_at_ns + int(self.ttl_secs * 1e9)


class _Flight:
    def __init__(self) -> None:
        self.done = threading.Event()
        self.result: CachedKey | None = None
        self.error: Exception | None = None


class KeyDirectory:
    """Shared, internally synchronized key cache for one entity."""

    def __init__(
        self,
        fetcher: CertificateFetcher,
        trust: crypto.TrustStore,
        capacity: int = DEFAULT_CAPACITY,
        ttl_secs: float = DEFAULT_TTL_SECS,
        now_ns: Callable[[], int] = time.time_ns,
    ):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self._fetcher = fetcher
        self._trust = trust
        self.capacity = capacity
        self.ttl_secs = ttl_secs
        self._now_ns = now_ns
        self._entries: OrderedDict[str, CachedKey] = OrderedDict()
        self._flights: dict[str, _Flight] = {}
        self._lock = threading.Lock()
        self.fetch_count = 0

    def get_public_key(self, domain: str) -> crypto.PublicKey:
        """Cached key if fresh; otherwise fetch, validate, cache, return."""
        return self.get_entry(domain).public_key

    def get_entry(self, domain: str) -> CachedKey:
        while True:
            with self._lock:
                entry = self._entries.get(domain)
                if entry is not None:
                    if entry.fresh(self._now_ns()):
                        self._entries.move_to_end(domain)
                        return entry
                    del self._entries[domain]
                flight = self._flights.get(domain)
                if flight is None:
                    flight = _Flight()
                    self._flights[domain] = flight
                    owner = True
                else:
                    owner = False
            if not owner:
                flight.done.wait()
                if flight.error is not None:
                    raise flight.error
                if flight.result is not None:
                    return flight.result
                continue  # owner failed to produce; retry from the cache
            try:
                entry = self._fetch_and_validate(domain)
            except Exception as exc:
                flight.error = exc
                raise
            else:
                flight.result = entry
                with self._lock:
                    self._entries[domain] = entry
                    self._entries.move_to_end(domain)
                    while len(self._entries) > self.capacity:
                        self._entries.popitem(last=False)
                return entry
            finally:
                with self._lock:
                    self._flights.pop(domain, None)
                flight.done.set()

    def fetch_certificate(self, domain: str) -> crypto.DomainCertificate:
        """The certificate served at the domain's well-known path."""
        document = self._fetcher.fetch(domain)
        try:
            return crypto.certificate_from_text(document.decode("utf-8"))
        except (crypto.MalformedDocument, UnicodeDecodeError) as exc:
            raise MalformedCertificateError(
                f"certificate document for {domain!r}: {exc}"
            ) from exc

    def _fetch_and_validate(self, domain: str) -> CachedKey:
        cert = self.fetch_certificate(domain)
        with self._lock:
            self.fetch_count += 1
        now_ns = self._now_ns()
        verdict = crypto.validate_certificate(
            cert, expected_domain=domain, now=now_ns // 1_000_000_000, trust=self._trust
        )
        if verdict != crypto.ACCEPTED:
            raise CertificateInvalidError(domain, verdict)
        return CachedKey(
            domain=domain,
            public_material=cert.public_material,
            algorithm=cert.algorithm,
            inserted_at_ns=now_ns,
            ttl_secs=self.ttl_secs,
            public_key=cert.public_key(),
        )

    def lookup(self, domain: str) -> crypto.PublicKey | None:
        """verify_chain-compatible lookup: None instead of raising."""
        try:
            return self.get_public_key(domain)
        except KeyDirectoryError:
            return None

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


class StaticFetcher:
    """Fixed domain -> document mapping, mainly for tests."""

    def __init__(self, documents: dict[str, bytes]):
        self.documents = dict(documents)
        self.calls = 0

    def fetch(self, domain: str) -> bytes:
        self.calls += 1
        try:
            return self.documents[domain]
        except KeyError:
            raise FetchFailedError(f"unknown domain {domain!r}") from None


class HttpCertificateFetcher:
    """Retrieve certificate documents over HTTP(S).

    ``url_for`` maps a domain to the document URL; the default follows the
    well-known relative path convention, ``https://<domain>/ads-chain.crt``.
    """

    def __init__(self, client=None, url_for: Callable[[str], str] | None = None):
        if client is None:
            import httpx

            client = httpx.Client(timeout=5.0)
        self._client = client
        self._url_for = url_for or (lambda d: f"https://{d}{WELL_KNOWN_PATH}")

    def fetch(self, domain: str) -> bytes:
        try:
            response = self._client.get(self._url_for(domain))
        except Exception as exc:
            raise FetchFailedError(f"fetching {domain!r}: {exc}") from exc
        if response.status_code != 200:
            raise FetchFailedError(
                f"fetching {domain!r}: HTTP {response.status_code}"
            )
        return response.content
