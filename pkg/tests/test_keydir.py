from __future__ import annotations

import threading
import time

import pytest

from adschain import crypto, keydir


class FakeClock:
    def __init__(self, start_ns: int = 1_000_000_000_000):
        self.now = start_ns

    def now_ns(self) -> int:
        return self.now

    def advance_secs(self, secs: float) -> None:
        self.now += int(secs * 1e9)


@pytest.fixture(scope="module")
def ca():
    return crypto.CertificateAuthority("kd-ca")


@pytest.fixture(scope="module")
def trust(ca):
    return crypto.TrustStore([ca.root_certificate()])


def _cert_doc(ca, domain, pair, not_before=0, not_after=2**33) -> bytes:
    cert = ca.issue_for(f"ads.{domain}", pair, not_before, not_after)
    return crypto.certificate_to_text(cert).encode()


@pytest.fixture(scope="module")
def domain_pairs():
    return {d: crypto.generate_keypair(crypto.ECDSA_P256) for d in "abcd"}


@pytest.fixture()
def fetcher(ca, domain_pairs):
    return keydir.StaticFetcher(
        {f"{d}.example": _cert_doc(ca, f"{d}.example", pair) for d, pair in domain_pairs.items()}
    )


def test_miss_then_hit_fetches_once(fetcher, trust):
    clock = FakeClock()
    directory = keydir.KeyDirectory(fetcher, trust, now_ns=clock.now_ns)
    k1 = directory.get_public_key("a.example")
    k2 = directory.get_public_key("a.example")
    assert fetcher.calls == 1
    assert k1 is k2


def test_ttl_expiry_forces_refetch(fetcher, trust):
    clock = FakeClock()
    directory = keydir.KeyDirectory(fetcher, trust, ttl_secs=10, now_ns=clock.now_ns)
    directory.get_public_key("a.example")
    clock.advance_secs(11)
    directory.get_public_key("a.example")
    assert fetcher.calls == 2


def test_entry_within_ttl_not_refetched(fetcher, trust):
    clock = FakeClock()
    directory = keydir.KeyDirectory(fetcher, trust, ttl_secs=10, now_ns=clock.now_ns)
    directory.get_public_key("a.example")
    clock.advance_secs(9.5)
    directory.get_public_key("a.example")
    assert fetcher.calls == 1


def test_lru_eviction_trace(fetcher, trust):
    # capacity 2: A(miss) B(miss) C(miss, evicts A) A(miss again) -> 4 fetches
    clock = FakeClock()
    directory = keydir.KeyDirectory(fetcher, trust, capacity=2, now_ns=clock.now_ns)
    for domain in ("a.example", "b.example", "c.example", "a.example"):
        directory.get_public_key(domain)
    assert fetcher.calls == 4
    assert len(directory) == 2


def test_lru_recency_refresh_on_hit(fetcher, trust):
    # A B (hit A) C: B is the LRU entry and gets evicted, A stays cached
    clock = FakeClock()
    directory = keydir.KeyDirectory(fetcher, trust, capacity=2, now_ns=clock.now_ns)
    directory.get_public_key("a.example")
    directory.get_public_key("b.example")
    directory.get_public_key("a.example")
    directory.get_public_key("c.example")
    calls_before = fetcher.calls
    directory.get_public_key("a.example")  # still cached
    assert fetcher.calls == calls_before
    directory.get_public_key("b.example")  # evicted, refetched
    assert fetcher.calls == calls_before + 1


def test_no_stale_entry_ever_returned(fetcher, trust):
    clock = FakeClock()
    ttl = 5.0
    directory = keydir.KeyDirectory(fetcher, trust, ttl_secs=ttl, now_ns=clock.now_ns)
    import random

    rng = random.Random(3)
    inserted_at: dict[str, int] = {}
    for _ in range(300):
        domain = rng.choice(["a.example", "b.example", "c.example"])
        before = fetcher.calls
        entry = directory.get_entry(domain)
        if fetcher.calls > before:
            inserted_at[domain] = clock.now_ns()
        assert clock.now_ns() - entry.inserted_at_ns < ttl * 1e9
        clock.advance_secs(rng.uniform(0, 2.0))


def test_unknown_domain_fetch_failed(fetcher, trust):
    directory = keydir.KeyDirectory(fetcher, trust)
    with pytest.raises(keydir.FetchFailedError):
        directory.get_public_key("missing.example")
    assert directory.lookup("missing.example") is None


def test_garbage_document_malformed(trust):
    fetcher = keydir.StaticFetcher({"junk.example": b"\x00\x01garbage"})
    directory = keydir.KeyDirectory(fetcher, trust)
    with pytest.raises(keydir.MalformedCertificateError):
        directory.fetch_certificate("junk.example")
    with pytest.raises(keydir.MalformedCertificateError):
        directory.get_public_key("junk.example")


def test_invalid_certificate_never_cached(ca, trust, domain_pairs):
    expired = _cert_doc(ca, "a.example", domain_pairs["a"], not_before=0, not_after=1)
    fetcher = keydir.StaticFetcher({"a.example": expired})
    clock = FakeClock()
    directory = keydir.KeyDirectory(fetcher, trust, now_ns=clock.now_ns)
    for _ in range(3):
        with pytest.raises(keydir.CertificateInvalidError) as err:
            directory.get_public_key("a.example")
        assert err.value.verdict == crypto.EXPIRED
    assert fetcher.calls == 3  # failures are retried, not cached
    assert len(directory) == 0


def test_wrong_subject_rejected(ca, trust, domain_pairs):
    doc = _cert_doc(ca, "b.example", domain_pairs["b"])
    fetcher = keydir.StaticFetcher({"a.example": doc})  # served under the wrong name
    directory = keydir.KeyDirectory(fetcher, trust)
    with pytest.raises(keydir.CertificateInvalidError) as err:
        directory.get_public_key("a.example")
    assert err.value.verdict == crypto.WRONG_SUBJECT


def test_untrusted_issuer_rejected(domain_pairs):
    rogue_ca = crypto.CertificateAuthority("rogue-ca")
    doc = crypto.certificate_to_text(
        rogue_ca.issue_for("ads.a.example", domain_pairs["a"], 0, 2**33)
    ).encode()
    directory = keydir.KeyDirectory(
        keydir.StaticFetcher({"a.example": doc}), crypto.TrustStore()
    )
    with pytest.raises(keydir.CertificateInvalidError) as err:
        directory.get_public_key("a.example")
    assert err.value.verdict == crypto.UNTRUSTED_ISSUER


class SlowFetcher(keydir.StaticFetcher):
    def __init__(self, documents, delay=0.05):
        super().__init__(documents)
        self.delay = delay
        self._lock = threading.Lock()

    def fetch(self, domain):
        with self._lock:
            self.calls += 1
        time.sleep(self.delay)
        return self.documents[domain]


def test_single_flight_under_concurrent_cold_storm(ca, trust, domain_pairs):
    doc = _cert_doc(ca, "a.example", domain_pairs["a"])
    fetcher = SlowFetcher({"a.example": doc})
    directory = keydir.KeyDirectory(fetcher, trust)
    results: list = []
    errors: list = []

    def worker():
        try:
            results.append(directory.get_public_key("a.example"))
        except Exception as exc:  # pragma: no cover
            errors.append(exc)

    threads = [threading.Thread(target=worker) for _ in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert len(results) == 16
    assert fetcher.calls == 1  # documented single-flight bound
    assert all(r is results[0] for r in results)


def test_capacity_must_be_positive(fetcher, trust):
    with pytest.raises(ValueError):
        keydir.KeyDirectory(fetcher, trust, capacity=0)
