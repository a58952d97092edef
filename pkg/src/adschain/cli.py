"""Command-line entry points.

Thin client over the library and the HTTP service: ``simulate`` and
``audit`` run in-process by default and against a remote service with
``--server``; ``bench`` drives either the in-process publisher or a running
service's ``/page`` endpoint; ``serve`` starts the service.
"""

from __future__ import annotations

import asyncio
import json
import sys
from pathlib import Path

import click

from . import auditor, bench, crypto, pipeline
from .clock import SystemClock, VirtualClock

_ALGO_CHOICES = click.Choice(["ecdsa", "rsa"], case_sensitive=False)
_ALGO_OR_NONE = click.Choice(["ecdsa", "rsa", "none"], case_sensitive=False)


def _algo(name: str) -> str:
    return pipeline.canonical_algorithm(name)


@click.group()
def main() -> None:
    """Signed custody chains for ad transactions."""


@main.command()
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--domain", "domains", multiple=True, required=True, help="May repeat.")
@click.option("--algo", default="ecdsa", type=_ALGO_CHOICES, show_default=True)
@click.option("--ca-name", default="adschain-test-ca", show_default=True)
@click.option("--days", default=365, show_default=True, help="Certificate validity.")
def keygen(out_dir: Path, domains: tuple[str, ...], algo: str, ca_name: str, days: int) -> None:
    """Generate a test CA plus per-domain keys and certificates."""
    import time as _time

    out_dir.mkdir(parents=True, exist_ok=True)
    ca = crypto.CertificateAuthority(ca_name)
    (out_dir / "ca.crt").write_text(crypto.certificate_to_text(ca.root_certificate()))
    (out_dir / "ca.key").write_text(crypto.keypair_to_text(ca.keypair, ca_name))
    now = int(_time.time())
    for domain in domains:
        pair = crypto.generate_keypair(_algo(algo))
        cert = ca.issue_for(f"ads.{domain}", pair, now, now + days * 86400)
        (out_dir / f"{domain}.key").write_text(crypto.keypair_to_text(pair, domain))
        (out_dir / f"{domain}.crt").write_text(crypto.certificate_to_text(cert))
        click.echo(f"issued ads.{domain} ({_algo(algo)})")
    click.echo(f"wrote {len(domains)} keypairs and certificates to {out_dir}")


@main.command()
@click.option("--topology", "topology_file", type=click.Path(exists=True, path_type=Path))
@click.option("--ads", default=1, show_default=True)
@click.option("--transactions", default=1, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--algo", default="ecdsa", type=_ALGO_CHOICES, show_default=True)
@click.option("--out", "out_file", type=click.Path(path_type=Path), required=True)
@click.option("--real-clock", is_flag=True, help="Honor auction waits in real time.")
@click.option("--server", default=None, help="Run on a remote service instead.")
def simulate(
    topology_file: Path | None,
    ads: int,
    transactions: int,
    seed: int,
    algo: str,
    out_file: Path,
    real_clock: bool,
    server: str | None,
) -> None:
    """Run ad transactions through the simulated pipeline; write the log."""
    if server:
        import httpx

        body = {"transactions": transactions, "ads": ads, "seed": seed, "algorithm": algo}
        if topology_file:
            body["topology"] = json.loads(topology_file.read_text())
        response = httpx.post(f"{server.rstrip('/')}/simulate", json=body, timeout=300.0)
        response.raise_for_status()
        records = response.json()["records"]
        with open(out_file, "w", encoding="utf-8") as fh:
            for record in records:
                fh.write(json.dumps(record, separators=(",", ":")) + "\n")
        click.echo(f"wrote {len(records)} records to {out_file}")
        return
    if topology_file:
        topology = pipeline.Topology.load(topology_file)
    else:
        topology = pipeline.default_topology(algorithm=_algo(algo), seed=seed)
    clock = SystemClock() if real_clock else VirtualClock()
    eco = pipeline.Ecosystem(topology, clock=clock, seed=seed)
    records = eco.run(transactions, n_ads=ads)
    count = pipeline.write_log(records, out_file)
    delivered = sum(1 for r in records if r.status == pipeline.STATUS_DELIVERED)
    click.echo(f"wrote {count} records to {out_file} ({delivered} delivered)")


@main.command()
@click.option("--log", "log_file", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--keys", "keys_dir", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--strict", is_flag=True, help="Treat custody gaps as failures.")
@click.option(
    "--format", "fmt", default="text", type=click.Choice(["text", "machine"]),
    show_default=True,
)
@click.option("--server", default=None, help="Audit on a remote service instead.")
def audit(log_file: Path, keys_dir: Path, strict: bool, fmt: str, server: str | None) -> None:
    """Audit a transaction log; exit nonzero on tampering, replays, or
    temporary blocks in final chains."""
    if server:
        import httpx

        lines = [ln for ln in log_file.read_text().splitlines() if ln.strip()]
        response = httpx.post(
            f"{server.rstrip('/')}/audit",
            json={"records": lines, "strict": strict},
            timeout=300.0,
        )
        response.raise_for_status()
        payload = response.json()
        findings = payload["findings"]
        if fmt == "machine":
            for finding in findings:
                click.echo(json.dumps(finding, separators=(",", ":")))
        else:
            _print_audit_text(
                payload["transactions_checked"],
                payload["counters"],
                payload["malformed_records"],
                findings,
                strict,
            )
        sys.exit(payload["exit_code"])
    keys = auditor.load_keys_dir(keys_dir)
    report = auditor.audit_log(log_file, keys)
    if fmt == "machine":
        for finding in report.findings:
            click.echo(json.dumps(finding.to_dict(), separators=(",", ":")))
    else:
        _print_audit_text(
            report.transactions_checked,
            report.counters,
            report.malformed_records,
            [f.to_dict() for f in report.findings],
            strict,
        )
    code = report.exit_code()
    if strict and any(f.kind == auditor.CUSTODY_GAP for f in report.findings):
        code = max(code, 1)
    sys.exit(code)


def _print_audit_text(
    checked: int, counters: dict, malformed: int, findings: list[dict], strict: bool
) -> None:
    click.echo(f"transactions checked: {checked}")
    click.echo(f"malformed records:    {malformed}")
    for kind, count in counters.items():
        if count:
            click.echo(f"{kind}: {count}")
    for finding in findings:
        where = f" block={finding['block_index']}" if finding["block_index"] is not None else ""
        click.echo(f"  [{finding['kind']}] tid={finding['tid']}{where} {finding['detail']}")
    if not findings and not malformed:
        click.echo("no findings")
    if strict:
        click.echo("policy: strict (custody gaps are failures)")


@main.command()
@click.option("--target", default="publisher", type=click.Choice(["publisher", "ssp"]), show_default=True)
@click.option("--rps", default=100.0, show_default=True)
@click.option("--ads", default=1, show_default=True)
@click.option("--algo", default="none", type=_ALGO_OR_NONE, show_default=True)
@click.option("--secs", default=60.0, show_default=True)
@click.option("--warmup", default=2.0, show_default=True)
@click.option("--workers", default=0, show_default=True, help="0 serves in the scheduler thread.")
@click.option("--out", "out_file", type=click.Path(path_type=Path), required=True)
@click.option("--base-url", default=None, help="Target a running service over HTTP.")
@click.option("--transactions", default=10_000, show_default=True, help="SSP target only.")
@click.option("--seed", default=0, show_default=True)
def bench_cmd(
    target: str,
    rps: float,
    ads: int,
    algo: str,
    secs: float,
    warmup: float,
    workers: int,
    out_file: Path,
    base_url: str | None,
    transactions: int,
    seed: int,
) -> None:
    """Measure one configuration and write the sample or report file."""
    algorithm = bench.ALGO_NONE if algo == "none" else _algo(algo)
    if target == "ssp":
        if algorithm == bench.ALGO_NONE:
            raise click.UsageError("--target ssp needs --algo ecdsa or rsa")
        report = bench.bench_ssp(transactions, algorithm=algorithm, seed=seed)
        out_file.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        click.echo(report.render_text())
        return
    config = bench.BenchConfig(
        target="publisher",
        throughput_rps=rps,
        n_ads=ads,
        algorithm=algorithm,
        duration_secs=secs,
        warmup_secs=warmup,
        workers=workers,
    )
    if base_url:
        import httpx

        async def _run() -> bench.LatencyDistribution:
            async with httpx.AsyncClient(timeout=10.0) as client:
                http_target = bench.HttpPublisherTarget(base_url, config, client=client)
                await http_target.load_publisher_key("pub.example")
                return await bench.run_load(config, http_target)

        dist = asyncio.run(_run())
    else:
        eco = pipeline.Ecosystem(
            pipeline.default_topology(
                algorithm if algorithm != bench.ALGO_NONE else "ecdsa", seed=seed
            ),
            clock=VirtualClock(),
        )
        in_target = bench.InProcessPublisherTarget(eco, config)
        try:
            dist = bench.run_load_sync(config, in_target)
        finally:
            in_target.close()
    bench.write_samples(out_file, dist)
    flags = " RATE-SHORTFALL" if dist.rate_shortfall else ""
    click.echo(
        f"{len(dist.samples)} samples, {dist.error_count} errors, "
        f"achieved {dist.achieved_rps:.1f}/{rps:.0f} rps{flags}"
    )
    for p in (90, 95, 99):
        click.echo(f"  p{p}: {dist.percentile_ms(p):.3f} ms")
    click.echo(f"samples written to {out_file}")


main.add_command(bench_cmd, name="bench")


@main.command(name="bench-table")
@click.option("--rps", default="100,300", show_default=True, help="Comma-separated rates.")
@click.option("--ads", default="1,10,30", show_default=True, help="Comma-separated counts.")
@click.option("--secs", default=10.0, show_default=True)
@click.option("--warmup", default=1.0, show_default=True)
@click.option("--workers", default=0, show_default=True, help="0 serves in the scheduler thread.")
@click.option("--out", "out_file", type=click.Path(path_type=Path), default=None)
def bench_table(
    rps: str, ads: str, secs: float, warmup: float, workers: int, out_file: Path | None
) -> None:
    """Full with/without-signature matrix and the marginal-delay table."""
    report = bench.run_publisher_matrix(
        rps_list=[float(x) for x in rps.split(",")],
        ads_list=[int(x) for x in ads.split(",")],
        duration_secs=secs,
        warmup_secs=warmup,
        workers=workers,
    )
    click.echo(report.render_text())
    if out_file:
        out_file.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        click.echo(f"report written to {out_file}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8404, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--algo", default="ecdsa", type=_ALGO_CHOICES, show_default=True)
@click.option("--dsps", default=2, show_default=True)
@click.option("--auction-wait-ms", default=120.0, show_default=True)
@click.option("--virtual-clock", is_flag=True, help="Auction waits advance a virtual clock.")
def serve(
    host: str,
    port: int,
    seed: int,
    algo: str,
    dsps: int,
    auction_wait_ms: float,
    virtual_clock: bool,
) -> None:
    """Run the HTTP service hosting the simulated ecosystem."""
    import uvicorn

    from .service.app import ServiceSettings, create_app

    app = create_app(
        ServiceSettings(
            seed=seed,
            algorithm=algo,
            n_dsps=dsps,
            auction_wait_ms=auction_wait_ms,
            virtual_clock=virtual_clock,
        )
    )
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
