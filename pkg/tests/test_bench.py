from __future__ import annotations

import random
from fractions import Fraction

import pytest

from adschain import bench, crypto, pipeline
from adschain.clock import VirtualClock


def percentile_oracle(samples, p):
    """Brute force: walk the sorted samples until the rank covers p percent,
    in exact arithmetic."""
    ordered = sorted(samples)
    need = Fraction(p) * len(ordered) / 100
    for position, value in enumerate(ordered, start=1):
        if position >= need:
            return value
    return ordered[-1]


# ---------------------------------------------------------------------------
# percentile
# ---------------------------------------------------------------------------


def test_percentile_nearest_rank_example():
    samples = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10]
    assert bench.percentile(samples, 90) == 9


def test_percentile_single_sample():
    for p in (0, 1, 50, 99, 100):
        assert bench.percentile([7], p) == 7


def test_percentile_100_is_max():
    samples = [5, 1, 9, 3]
    assert bench.percentile(samples, 100) == 9


def test_percentile_empty_rejected():
    with pytest.raises(bench.BenchError):
        bench.percentile([], 50)
    with pytest.raises(bench.BenchError):
        bench.percentile([1], 101)


def test_percentile_matches_oracle_on_random_vectors():
    rng = random.Random(17)
    for _ in range(1000):
        n = rng.randint(1, 200)
        samples = [rng.randint(0, 10**6) for _ in range(n)]
        p = rng.choice([0, 1, 25, 50, 75, 90, 95, 99, 99.9, 100])
        assert bench.percentile(samples, p) == percentile_oracle(samples, p)


def test_percentile_monotone_in_p():
    rng = random.Random(5)
    samples = [rng.randint(0, 1000) for _ in range(137)]
    values = [bench.percentile(samples, p) for p in range(0, 101)]
    assert values == sorted(values)


# ---------------------------------------------------------------------------
# Load generation
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def eco():
    topo = pipeline.default_topology(seed=2)
    return pipeline.Ecosystem(topo, clock=VirtualClock(), seed=2)


def _quick_config(**kwargs) -> bench.BenchConfig:
    defaults = dict(
        target="publisher",
        throughput_rps=200.0,
        n_ads=1,
        algorithm=bench.ALGO_NONE,
        duration_secs=1.0,
        warmup_secs=0.2,
        workers=2,
    )
    defaults.update(kwargs)
    return bench.BenchConfig(**defaults)


def test_run_load_smoke(eco):
    config = _quick_config()
    target = bench.InProcessPublisherTarget(eco, config)
    try:
        dist = bench.run_load_sync(config, target)
    finally:
        target.close()
    assert dist.error_count == 0
    assert 150 <= len(dist.samples) <= 200
    assert dist.achieved_rps > 0
    assert dist.percentile_ns(99) >= dist.percentile_ns(90)


def test_run_load_signed_with_validation(eco):
    config = _quick_config(algorithm=crypto.ECDSA_P256, verify_fraction=0.2)
    target = bench.InProcessPublisherTarget(eco, config)
    try:
        dist = bench.run_load_sync(config, target)
    finally:
        target.close()
    assert dist.error_count == 0
    assert len(dist.samples) > 0


def test_validation_counts_tampered_responses(eco):
    config = _quick_config(algorithm=crypto.ECDSA_P256, verify_fraction=1.0)

    class TamperingTarget(bench.InProcessPublisherTarget):
        def _serve(self):
            return super()._serve().replace("size=", "size=9")

    target = TamperingTarget(eco, config)
    try:
        dist = bench.run_load_sync(config, target)
    finally:
        target.close()
    assert len(dist.samples) == 0  # every response failed verification
    assert dist.error_count > 0


def test_wrong_adtag_count_flagged(eco):
    config = _quick_config(n_ads=2)

    class ShortTarget(bench.InProcessPublisherTarget):
        def _serve(self):
            return self.eco.publisher.serve_page(1, sign=False).html

    target = ShortTarget(eco, config)
    try:
        dist = bench.run_load_sync(config, target)
    finally:
        target.close()
    assert len(dist.samples) == 0
    assert dist.error_count > 0


def test_extract_adtag_urls():
    html = '<li><script src="https://a/x?y=1"></script></li>\n<script src="https://b/z"></script>'
    assert bench.extract_adtag_urls(html) == ["https://a/x?y=1", "https://b/z"]


def test_config_validation():
    with pytest.raises(bench.BenchError):
        bench.BenchConfig(throughput_rps=0)
    with pytest.raises(bench.BenchError):
        bench.BenchConfig(duration_secs=0.5)
    with pytest.raises(bench.BenchError):
        bench.BenchConfig(n_ads=31)


# ---------------------------------------------------------------------------
# Marginal delay
# ---------------------------------------------------------------------------


def _dist(algorithm, samples, rps=100.0, n_ads=1):
    config = bench.BenchConfig(
        target="publisher",
        throughput_rps=rps,
        n_ads=n_ads,
        algorithm=algorithm,
        duration_secs=1.0,
        warmup_secs=0.0,
    )
    return bench.LatencyDistribution(
        config=config, samples=samples, achieved_rps=rps
    )


def test_marginal_delay_arithmetic():
    signed = _dist(crypto.ECDSA_P256, [8_000_000] * 100, n_ads=30)
    unsigned = _dist(bench.ALGO_NONE, [2_000_000] * 100, n_ads=30)
    result = bench.marginal_delay(signed, unsigned, 30)
    assert result.per_ad_ms[99] == pytest.approx(0.2)
    assert result.per_ad_ms[90] == pytest.approx(0.2)
    assert not result.clamped


def test_marginal_delay_identical_distributions_zero():
    samples = list(range(1_000_000, 2_000_000, 10_000))
    signed = _dist(crypto.ECDSA_P256, samples)
    unsigned = _dist(bench.ALGO_NONE, list(samples))
    result = bench.marginal_delay(signed, unsigned, 1)
    assert all(v == 0.0 for v in result.per_ad_ms.values())


def test_marginal_delay_clamps_negative_noise():
    signed = _dist(crypto.ECDSA_P256, [1_000_000] * 50)
    unsigned = _dist(bench.ALGO_NONE, [2_000_000] * 50)
    result = bench.marginal_delay(signed, unsigned, 1)
    assert result.per_ad_ms[99] == 0.0
    assert 99 in result.clamped


def test_marginal_delay_config_mismatch_rejected():
    signed = _dist(crypto.ECDSA_P256, [1] * 10, rps=100.0)
    unsigned = _dist(bench.ALGO_NONE, [1] * 10, rps=200.0)
    with pytest.raises(bench.BenchError):
        bench.marginal_delay(signed, unsigned, 1)
    with pytest.raises(bench.BenchError):
        bench.marginal_delay(unsigned, unsigned, 1)  # two unsigned runs


def test_report_summary_and_render():
    report = bench.PublisherBenchReport()
    for rps in (50.0, 100.0):
        signed = _dist(crypto.ECDSA_P256, [3_000_000] * 10, rps=rps)
        unsigned = _dist(bench.ALGO_NONE, [1_000_000] * 10, rps=rps)
        report.rows.append(bench.marginal_delay(signed, unsigned, 1))
    summary = report.summary()
    mn, mean, mx = summary[crypto.ECDSA_P256][99]
    assert mn == mean == mx == pytest.approx(2.0)
    text = report.render_text()
    assert "99th percentile" in text
    assert crypto.ECDSA_P256 in text
    payload = report.to_dict()
    assert payload["rows"][0]["per_ad_ms"]["99"] == pytest.approx(2.0)


# ---------------------------------------------------------------------------
# Sample files
# ---------------------------------------------------------------------------


def test_sample_file_round_trip(tmp_path, eco):
    config = _quick_config()
    target = bench.InProcessPublisherTarget(eco, config)
    try:
        dist = bench.run_load_sync(config, target)
    finally:
        target.close()
    path = tmp_path / "samples.txt"
    bench.write_samples(path, dist)
    loaded = bench.read_samples(path)
    assert loaded.samples == dist.samples
    assert loaded.error_count == dist.error_count
    assert loaded.config.throughput_rps == config.throughput_rps
    assert loaded.config.algorithm == config.algorithm
    # report generation from the file is deterministic
    assert loaded.percentile_ns(99) == dist.percentile_ns(99)


def test_sample_file_rejects_foreign_format(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text('{"format": "other"}\n1\n2\n')
    with pytest.raises(bench.BenchError):
        bench.read_samples(path)


# ---------------------------------------------------------------------------
# SSP stage report
# ---------------------------------------------------------------------------


def test_bench_ssp_smoke():
    report = bench.bench_ssp(transactions=60, algorithm=crypto.ECDSA_P256, warmup=10, seed=6)
    assert report.transactions == 60
    for op in ("key_retrieval", "verify", "sign"):
        assert report.op_percentiles[op][99] >= 0
    for p in (90, 95, 99):
        assert report.overall[p] >= max(
            report.op_percentiles[op][p] for op in ("key_retrieval", "verify", "sign")
        ) / 3
    assert "overall" in report.render_text()
    # warm cache: retrieval is far cheaper than signature verification
    assert report.op_percentiles["key_retrieval"][90] < report.op_percentiles["verify"][90]


def test_bench_ssp_requires_instrumented_records():
    with pytest.raises(bench.BenchError):
        bench.bench_ssp(transactions=2, algorithm=crypto.ECDSA_P256, warmup=0, ssp_domain="nobody.example")


def test_time_crypto_ops_orderings():
    timings = bench.time_crypto_ops(n_per_op=60)
    assert timings["ecdsa_sign_ns"] < timings["rsa_sign_ns"]
    assert timings["rsa_verify_ns"] < timings["ecdsa_verify_ns"]
