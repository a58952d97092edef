"""Load generation and marginal-delay measurement.

Method: open-loop request schedules at a fixed rate against a publisher
target, run once without signatures and once per signature algorithm, then
compare latency percentiles of the paired runs. The marginal delay per ad
space is (percentile(signed) - percentile(unsigned)) / n_ads. The SSP side
is characterized from instrumented pipeline runs instead: per-operation
durations (key retrieval, signature verification, block signing) recorded
inside the handler.

Percentiles are nearest-rank: rank = ceil(p/100 * N) on the sorted samples,
1-indexed. Latency is measured send-to-full-response on the monotonic
clock; schedule drift and rate shortfalls are reported, not hidden, since a
saturated server (RSA at high rates) is itself a result.
"""

from __future__ import annotations

import asyncio
import gc
import json
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from . import chain as chain_mod
from . import codec, crypto
from .clock import VirtualClock
from .pipeline import Ecosystem, canonical_algorithm, default_topology

ALGO_NONE = "none"

_PERCENTILES = (90, 95, 99)

# Reference ranges from the original lab evaluation of this protocol,
# printed as report context and never asserted (hardware-dependent):
# p99 marginal delay per ad space at the publisher, min..max in ms.
REFERENCE_PUBLISHER_P99_MS_PER_AD = {
    "ECDSA-P256-SHA256": (0.1, 0.6),
    "RSA2048-PKCS1v15-SHA256": (0.9, 4.4),
}
# Overall per-transaction delay at the SSP with ECDSA keys, upper bounds.
REFERENCE_SSP_OVERALL_MS = {95: 1.4, 99: 4.4}


class BenchError(Exception):
    pass


class ValidationError(BenchError):
    """A response failed the correctness check."""


def percentile(samples, p: float):
    """Nearest-rank percentile: the ceil(p/100 * N)-th smallest sample."""
    if not samples:
        raise BenchError("empty sample set")
    if not 0 <= p <= 100:
        raise BenchError(f"percentile out of range: {p}")
    ordered = sorted(samples)
    rank = max(1, math.ceil(p / 100 * len(ordered)))
    return ordered[rank - 1]


@dataclass
class BenchConfig:
    target: str = "publisher"  # "publisher" | "ssp"
    throughput_rps: float = 100.0
    n_ads: int = 1
    algorithm: str = ALGO_NONE  # canonical name or "none"
    duration_secs: float = 60.0
    warmup_secs: float = 2.0
    workers: int = 0  # 0: serve in the scheduler thread (quiet tails)
    verify_fraction: float = 0.05
    shortfall_tolerance: float = 0.95
    disable_gc: bool = True  # collector pauses otherwise dominate p99

    def __post_init__(self) -> None:
        if self.throughput_rps <= 0:
            raise BenchError("throughput_rps must be positive")
        if self.duration_secs < 1:
            raise BenchError("duration must be at least 1 s")
        if not 1 <= self.n_ads <= 30:
            raise BenchError("n_ads must be in 1..30")

    @property
    def signed(self) -> bool:
        return self.algorithm != ALGO_NONE

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "throughput_rps": self.throughput_rps,
            "n_ads": self.n_ads,
            "algorithm": self.algorithm,
            "duration_secs": self.duration_secs,
            "warmup_secs": self.warmup_secs,
            "workers": self.workers,
        }


@dataclass
class LatencyDistribution:
    config: BenchConfig
    samples: list[int]  # nanoseconds, successful requests after warmup
    error_count: int = 0
    achieved_rps: float = 0.0
    scheduled: int = 0
    max_schedule_drift_ns: int = 0
    timer_resolution_ns: float = 0.0

    @property
    def rate_shortfall(self) -> bool:
        return self.achieved_rps < self.config.throughput_rps * self.config.shortfall_tolerance

    def percentile_ns(self, p: float) -> int:
        return percentile(self.samples, p)

    def percentile_ms(self, p: float) -> float:
        return self.percentile_ns(p) / 1e6


class LoadTarget(Protocol):
    async def request(self) -> str: ...

    def validate(self, body: str) -> None: ...

    def close(self) -> None: ...


class InProcessPublisherTarget:
    """Drives the simulator publisher directly, so the measured time is the
    page serving time without transport overhead.

    ``workers=0`` serves each request synchronously in the scheduler thread
    (a single-threaded server: excess requests queue, tails stay quiet);
    a positive count serves on that many pool threads instead.
    """

    def __init__(self, eco: Ecosystem, config: BenchConfig):
        self.eco = eco
        self.config = config
        self.executor = (
            ThreadPoolExecutor(max_workers=config.workers) if config.workers else None
        )
        self._verify_every = (
            int(1 / config.verify_fraction) if config.verify_fraction > 0 else 0
        )
        self._validated = 0
        pub = eco.publisher
        self._pub_key = eco.key_lookup(pub.domain)

    def _serve(self) -> str:
        page = self.eco.publisher.serve_page(
            self.config.n_ads, sign=self.config.signed
        )
        return page.html

    async def request(self) -> str:
        if self.executor is None:
            return self._serve()
        loop = asyncio.get_running_loop()
        return await loop.run_in_executor(self.executor, self._serve)

    def validate(self, body: str) -> None:
        urls = extract_adtag_urls(body)
        if len(urls) != self.config.n_ads:
            raise ValidationError(
                f"expected {self.config.n_ads} ad-tags, found {len(urls)}"
            )
        self._validated += 1
        if not self.config.signed or not self._verify_every:
            return
        if self._validated % self._verify_every:
            return
        chain, _ = codec.extract_query(urls[0])
        report = chain_mod.verify_chain(chain, lambda d: self._pub_key)
        if not report.ok:
            raise ValidationError("sampled ad-tag failed signature verification")

    def close(self) -> None:
        if self.executor is not None:
            self.executor.shutdown(wait=False, cancel_futures=True)


class HttpPublisherTarget:
    """Targets a running service's publisher endpoint over HTTP."""

    def __init__(self, base_url: str, config: BenchConfig, client=None):
        import httpx

        self.config = config
        self.base_url = base_url.rstrip("/")
        self.client = client or httpx.AsyncClient(timeout=10.0)
        self._verify_every = (
            int(1 / config.verify_fraction) if config.verify_fraction > 0 else 0
        )
        self._validated = 0
        self._pub_key = None

    async def request(self) -> str:
        sign = "true" if self.config.signed else "false"
        response = await self.client.get(
            f"{self.base_url}/page",
            params={"ads": self.config.n_ads, "sign": sign},
        )
        if response.status_code != 200:
            raise ValidationError(f"HTTP {response.status_code}")
        return response.text

    def validate(self, body: str) -> None:
        urls = extract_adtag_urls(body)
        if len(urls) != self.config.n_ads:
            raise ValidationError(
                f"expected {self.config.n_ads} ad-tags, found {len(urls)}"
            )
        self._validated += 1
        if not self.config.signed or not self._verify_every:
            return
        if self._validated % self._verify_every or self._pub_key is None:
            return
        chain, _ = codec.extract_query(urls[0])
        report = chain_mod.verify_chain(chain, lambda d: self._pub_key)
        if not report.ok:
            raise ValidationError("sampled ad-tag failed signature verification")

    async def load_publisher_key(self, publisher_domain: str) -> None:
        response = await self.client.get(
            f"{self.base_url}/entities/{publisher_domain}/ads-chain.crt"
        )
        if response.status_code == 200:
            cert = crypto.certificate_from_text(response.text)
            self._pub_key = cert.public_key()

    def close(self) -> None:
        pass  # caller owns the client


def extract_adtag_urls(html: str) -> list[str]:
    urls = []
    for part in html.split('src="')[1:]:
        end = part.find('"')
        if end > 0:
            urls.append(part[:end])
    return urls


async def run_load(config: BenchConfig, target: LoadTarget) -> LatencyDistribution:
    """Open-loop run: requests launch on the fixed schedule regardless of
    completions; latency is send-to-full-response.

    The cyclic garbage collector is paused for the duration by default;
    its pauses otherwise land in the high percentiles of both runs of a
    pair and drown millisecond-scale deltas.
    """
    gc_was_enabled = gc.isenabled()
    if config.disable_gc and gc_was_enabled:
        gc.collect()
        gc.disable()
    try:
        return await _run_load(config, target)
    finally:
        if config.disable_gc and gc_was_enabled:
            gc.enable()


async def _run_load(config: BenchConfig, target: LoadTarget) -> LatencyDistribution:
    loop = asyncio.get_running_loop()
    interval = 1.0 / config.throughput_rps
    warmup_n = int(config.warmup_secs * config.throughput_rps)
    total = int(config.duration_secs * config.throughput_rps)
    samples: list[int] = []
    errors = [0]
    max_drift = [0.0]

    # Latency counts from the actual send; a target that cannot keep up
    # shows as schedule drift and an achieved-rate shortfall, both reported.
    # Response validation happens after the clock stops: correctness checks
    # are not part of the serving time under measurement.
    async def one(i: int) -> None:
        t0 = time.perf_counter_ns()
        try:
            body = await target.request()
        except Exception:
            if i >= warmup_n:
                errors[0] += 1
            return
        elapsed = time.perf_counter_ns() - t0
        if i < warmup_n:
            return
        try:
            target.validate(body)
        except Exception:
            errors[0] += 1
        else:
            samples.append(elapsed)

    start = loop.time()
    measure_start = start + warmup_n * interval
    tasks = []
    for i in range(warmup_n + total):
        sched = start + i * interval
        now = loop.time()
        if now < sched:
            await asyncio.sleep(sched - now)
        else:
            max_drift[0] = max(max_drift[0], now - sched)
        tasks.append(asyncio.ensure_future(one(i)))
    await asyncio.gather(*tasks)
    span = max(loop.time() - measure_start, 1e-9)
    completed = len(samples) + errors[0]
    return LatencyDistribution(
        config=config,
        samples=samples,
        error_count=errors[0],
        achieved_rps=completed / span,
        scheduled=total,
        max_schedule_drift_ns=int(max_drift[0] * 1e9),
        timer_resolution_ns=time.get_clock_info("perf_counter").resolution * 1e9,
    )


def run_load_sync(config: BenchConfig, target: LoadTarget) -> LatencyDistribution:
    return asyncio.run(run_load(config, target))


# --------------------------------------------------------------------------
# Marginal delay
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MarginalDelay:
    """Per-percentile (signed - unsigned) / n_ads, in milliseconds."""

    algorithm: str
    throughput_rps: float
    n_ads: int
    per_ad_ms: dict[int, float]
    clamped: tuple[int, ...]  # percentiles where noise drove the delta negative
    signed_shortfall: bool
    unsigned_shortfall: bool


def marginal_delay(
    signed: LatencyDistribution, unsigned: LatencyDistribution, n_ads: int
) -> MarginalDelay:
    sc, uc = signed.config, unsigned.config
    if not sc.signed or uc.signed:
        raise BenchError("need one signed and one unsigned run, in that order")
    if (sc.throughput_rps, sc.n_ads, sc.duration_secs, sc.target) != (
        uc.throughput_rps,
        uc.n_ads,
        uc.duration_secs,
        uc.target,
    ):
        raise BenchError("signed/unsigned runs differ beyond the signing flag")
    per_ad: dict[int, float] = {}
    clamped = []
    for p in _PERCENTILES:
        delta_ms = (signed.percentile_ns(p) - unsigned.percentile_ns(p)) / 1e6
        if delta_ms < 0:
            clamped.append(p)
            delta_ms = 0.0
        per_ad[p] = delta_ms / n_ads
    return MarginalDelay(
        algorithm=sc.algorithm,
        throughput_rps=sc.throughput_rps,
        n_ads=n_ads,
        per_ad_ms=per_ad,
        clamped=tuple(clamped),
        signed_shortfall=signed.rate_shortfall,
        unsigned_shortfall=unsigned.rate_shortfall,
    )


@dataclass
class PublisherBenchReport:
    rows: list[MarginalDelay] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def summary(self) -> dict[str, dict[int, tuple[float, float, float]]]:
        """algorithm -> percentile -> (min, mean, max) of ms per ad space."""
        out: dict[str, dict[int, tuple[float, float, float]]] = {}
        for algorithm in sorted({r.algorithm for r in self.rows}):
            values = {p: [] for p in _PERCENTILES}
            for row in self.rows:
                if row.algorithm == algorithm:
                    for p in _PERCENTILES:
                        values[p].append(row.per_ad_ms[p])
            out[algorithm] = {
                p: (min(v), statistics.fmean(v), max(v)) for p, v in values.items()
            }
        return out

    def render_text(self) -> str:
        lines = ["Marginal delay per ad space (ms)"]
        summary = self.summary()
        header = "time (ms)        " + "".join(
            f"{algo:>30}" for algo in summary
        )
        sub = "                 " + "".join(
            f"{'min':>10}{'mean':>10}{'max':>10}" for _ in summary
        )
        lines += [header, sub]
        for p in _PERCENTILES:
            row = f"{p}th percentile  ".ljust(17)
            for algo in summary:
                mn, mean, mx = summary[algo][p]
                row += f"{mn:>10.2f}{mean:>10.2f}{mx:>10.2f}"
            lines.append(row)
        lines.append("")
        lines.append("rows: algorithm rps ads  p90 p95 p99 (ms/ad)  notes")
        for r in self.rows:
            notes = []
            if r.clamped:
                notes.append(f"clamped@{','.join(map(str, r.clamped))} (noise)")
            if r.signed_shortfall:
                notes.append("signed-rate-shortfall")
            if r.unsigned_shortfall:
                notes.append("unsigned-rate-shortfall")
            lines.append(
                f"  {r.algorithm:<24} {r.throughput_rps:>5.0f} {r.n_ads:>3} "
                f"{r.per_ad_ms[90]:>7.3f} {r.per_ad_ms[95]:>7.3f} "
                f"{r.per_ad_ms[99]:>7.3f}  {' '.join(notes)}"
            )
        lines.append("")
        lines.append("reference p99 per ad space, original lab evaluation (context only):")
        for algo, (lo, hi) in REFERENCE_PUBLISHER_P99_MS_PER_AD.items():
            lines.append(f"  {algo:<24} {lo:.1f}..{hi:.1f} ms")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "rows": [
                {
                    "algorithm": r.algorithm,
                    "throughput_rps": r.throughput_rps,
                    "n_ads": r.n_ads,
                    "per_ad_ms": {str(p): v for p, v in r.per_ad_ms.items()},
                    "clamped": list(r.clamped),
                    "signed_shortfall": r.signed_shortfall,
                    "unsigned_shortfall": r.unsigned_shortfall,
                }
                for r in self.rows
            ],
            "summary": {
                algo: {str(p): list(v) for p, v in per.items()}
                for algo, per in self.summary().items()
            },
            "reference_p99_ms_per_ad": {
                algo: list(v) for algo, v in REFERENCE_PUBLISHER_P99_MS_PER_AD.items()
            },
            "meta": self.meta,
        }


def _median_marginal(estimates: list[MarginalDelay]) -> MarginalDelay:
    """Combine repeated marginal estimates per percentile by median."""
    if len(estimates) == 1:
        return estimates[0]
    head = estimates[0]
    per_ad = {
        p: statistics.median(e.per_ad_ms[p] for e in estimates) for p in _PERCENTILES
    }
    clamped = tuple(
        p
        for p in _PERCENTILES
        if per_ad[p] == 0.0 and any(p in e.clamped for e in estimates)
    )
    return MarginalDelay(
        algorithm=head.algorithm,
        throughput_rps=head.throughput_rps,
        n_ads=head.n_ads,
        per_ad_ms=per_ad,
        clamped=clamped,
        signed_shortfall=any(e.signed_shortfall for e in estimates),
        unsigned_shortfall=any(e.unsigned_shortfall for e in estimates),
    )


def run_publisher_matrix(
    rps_list=(100.0, 200.0),
    ads_list=(1, 10, 30),
    algorithms=(crypto.ECDSA_P256, crypto.RSA_2048),
    duration_secs: float = 10.0,
    warmup_secs: float = 1.0,
    workers: int = 0,
    seed: int = 0,
    repeats: int = 1,
) -> PublisherBenchReport:
    """Paired with/without-signature runs across the configuration matrix.

    With ``repeats`` > 1 every pairing is measured that many times and the
    reported marginal is the per-percentile median, which keeps one
    machine-level stall from deciding a row.
    """
    ecos = {
        algo: Ecosystem(default_topology(algo, seed=seed), clock=VirtualClock())
        for algo in algorithms
    }
    baseline_eco = next(iter(ecos.values()))
    report = PublisherBenchReport(
        meta={
            "rps": list(rps_list),
            "ads": list(ads_list),
            "duration_secs": duration_secs,
            "warmup_secs": warmup_secs,
            "workers": workers,
            "repeats": repeats,
            "timer_resolution_ns": time.get_clock_info("perf_counter").resolution * 1e9,
        }
    )

    def one_run(eco: Ecosystem, algorithm: str) -> LatencyDistribution:
        config = BenchConfig(
            target="publisher",
            throughput_rps=rps,
            n_ads=n_ads,
            algorithm=algorithm,
            duration_secs=duration_secs,
            warmup_secs=warmup_secs,
            workers=workers,
        )
        target = InProcessPublisherTarget(eco, config)
        try:
            return run_load_sync(config, target)
        finally:
            target.close()

    for rps in rps_list:
        for n_ads in ads_list:
            estimates: dict[str, list[MarginalDelay]] = {a: [] for a in algorithms}
            for _ in range(max(1, repeats)):
                unsigned = one_run(baseline_eco, ALGO_NONE)
                for algo in algorithms:
                    signed = one_run(ecos[algo], algo)
                    estimates[algo].append(marginal_delay(signed, unsigned, n_ads))
            for algo in algorithms:
                report.rows.append(_median_marginal(estimates[algo]))
    return report


# --------------------------------------------------------------------------
# SSP per-operation report
# --------------------------------------------------------------------------

_SSP_OPS = ("key_retrieval", "verify", "sign")


@dataclass
class SspStageReport:
    algorithm: str
    transactions: int
    op_percentiles: dict[str, dict[int, float]]  # op -> percentile -> ms
    overall: dict[int, float]  # percentile -> ms, sum of the three stages

    def render_text(self) -> str:
        lines = [
            f"SSP per-operation processing time, {self.algorithm}, "
            f"{self.transactions} transactions (ms)"
        ]
        lines.append(f"{'operation':<16}" + "".join(f"{f'p{p}':>10}" for p in _PERCENTILES))
        for op in _SSP_OPS:
            lines.append(
                f"{op:<16}"
                + "".join(f"{self.op_percentiles[op][p]:>10.4f}" for p in _PERCENTILES)
            )
        lines.append(
            f"{'overall':<16}" + "".join(f"{self.overall[p]:>10.4f}" for p in _PERCENTILES)
        )
        lines.append(
            "reference overall with ECDSA keys, original lab evaluation "
            "(context only): p95 <= "
            f"{REFERENCE_SSP_OVERALL_MS[95]:.1f} ms, p99 <= "
            f"{REFERENCE_SSP_OVERALL_MS[99]:.1f} ms"
        )
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "transactions": self.transactions,
            "op_percentiles": {
                op: {str(p): v for p, v in per.items()}
                for op, per in self.op_percentiles.items()
            },
            "overall": {str(p): v for p, v in self.overall.items()},
            "reference_overall_ms": {
                str(p): v for p, v in REFERENCE_SSP_OVERALL_MS.items()
            },
        }


def bench_ssp(
    transactions: int,
    algorithm: str = crypto.ECDSA_P256,
    warmup: int = 50,
    seed: int = 0,
    ssp_domain: str = "ssp.example",
    eco: Ecosystem | None = None,
) -> SspStageReport:
    """Instrumented pipeline run; aggregates the SSP's per-operation stage
    durations recorded in the transaction records."""
    if eco is None:
        eco = Ecosystem(default_topology(algorithm, seed=seed), clock=VirtualClock())
    for _ in range(warmup):
        eco.run_transaction(1)
    per_op: dict[str, list[int]] = {op: [] for op in _SSP_OPS}
    totals: list[int] = []
    for _ in range(transactions):
        for record in eco.run_transaction(1):
            for stage in record.stages:
                if stage.entity != ssp_domain:
                    continue
                per_op["key_retrieval"].append(stage.key_retrieval_ns)
                per_op["verify"].append(stage.verify_ns)
                per_op["sign"].append(stage.sign_ns)
                totals.append(stage.key_retrieval_ns + stage.verify_ns + stage.sign_ns)
    if not totals:
        raise BenchError(f"no instrumented records for {ssp_domain!r}")
    return SspStageReport(
        algorithm=canonical_name(algorithm),
        transactions=len(totals),
        op_percentiles={
            op: {p: percentile(series, p) / 1e6 for p in _PERCENTILES}
            for op, series in per_op.items()
        },
        overall={p: percentile(totals, p) / 1e6 for p in _PERCENTILES},
    )


def canonical_name(algorithm: str) -> str:
    return ALGO_NONE if algorithm == ALGO_NONE else canonical_algorithm(algorithm)


# --------------------------------------------------------------------------
# Sample files: one JSON header line, then one duration (ns) per line
# --------------------------------------------------------------------------

_SAMPLE_FORMAT = "adschain-bench-v1"


def write_samples(path: str | Path, dist: LatencyDistribution) -> None:
    header = {
        "format": _SAMPLE_FORMAT,
        **dist.config.to_dict(),
        "achieved_rps": dist.achieved_rps,
        "error_count": dist.error_count,
        "scheduled": dist.scheduled,
        "max_schedule_drift_ns": dist.max_schedule_drift_ns,
        "timer_resolution_ns": dist.timer_resolution_ns,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for ns in dist.samples:
            fh.write(f"{ns}\n")
        for _ in range(dist.error_count):
            fh.write("err\n")


def read_samples(path: str | Path) -> LatencyDistribution:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != _SAMPLE_FORMAT:
            raise BenchError(f"not a {_SAMPLE_FORMAT} file: {path}")
        samples = []
        errors = 0
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line == "err":
                errors += 1
            else:
                samples.append(int(line))
    config = BenchConfig(
        target=header["target"],
        throughput_rps=header["throughput_rps"],
        n_ads=header["n_ads"],
        algorithm=header["algorithm"],
        duration_secs=header["duration_secs"],
        warmup_secs=header["warmup_secs"],
        workers=header.get("workers", 4),
    )
    return LatencyDistribution(
        config=config,
        samples=samples,
        error_count=errors,
        achieved_rps=header.get("achieved_rps", 0.0),
        scheduled=header.get("scheduled", 0),
        max_schedule_drift_ns=header.get("max_schedule_drift_ns", 0),
        timer_resolution_ns=header.get("timer_resolution_ns", 0.0),
    )


# --------------------------------------------------------------------------
# Raw signing-primitive timings
# --------------------------------------------------------------------------


def time_crypto_ops(n_per_op: int = 2500, message: bytes = b"x" * 256) -> dict[str, float]:
    """Median sign/verify times (ns) for both algorithms on this machine."""
    out: dict[str, float] = {}
    for label, algorithm in (("ecdsa", crypto.ECDSA_P256), ("rsa", crypto.RSA_2048)):
        pair = crypto.generate_keypair(algorithm)
        public = pair.public_key
        signature = crypto.sign(pair, message)
        sign_ns = []
        for _ in range(n_per_op):
            t0 = time.perf_counter_ns()
            crypto.sign(pair, message)
            sign_ns.append(time.perf_counter_ns() - t0)
        verify_ns = []
        for _ in range(n_per_op):
            t0 = time.perf_counter_ns()
            crypto.verify(public, message, signature)
            verify_ns.append(time.perf_counter_ns() - t0)
        out[f"{label}_sign_ns"] = statistics.median(sign_ns)
        out[f"{label}_verify_ns"] = statistics.median(verify_ns)
    return out
