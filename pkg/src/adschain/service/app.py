"""HTTP face of the simulated ecosystem.

One FastAPI app hosts a wired topology: the publisher's page endpoint (the
benchmark target), ad-tag delivery through the pipeline, every entity's
certificate at its well-known path, chain verification and log auditing,
batch simulation on a virtual clock, and the remote-signing endpoint for
mobile apps.
"""

from __future__ import annotations

from dataclasses import dataclass

from fastapi import FastAPI, HTTPException, Query, Request
from fastapi.responses import HTMLResponse, PlainTextResponse

from .. import auditor, chain as chain_mod, codec, pipeline, tuuid
from ..clock import SystemClock, VirtualClock
from . import schemas


@dataclass
class ServiceSettings:
    seed: int = 0
    algorithm: str = "ecdsa"
    n_dsps: int = 2
    auction_wait_ms: float = 120.0
    virtual_clock: bool = False
    app_signer: bool = True


def build_ecosystem(settings: ServiceSettings) -> pipeline.Ecosystem:
    topology = pipeline.default_topology(
        algorithm=settings.algorithm,
        n_dsps=settings.n_dsps,
        auction_wait_ms=settings.auction_wait_ms,
        seed=settings.seed,
    )
    if settings.app_signer:
        topology.entities.append(
            pipeline.EntityConfig(
                role=pipeline.ROLE_APP_SIGNER,
                domain="apps.pub.example",
                algorithm=settings.algorithm,
                apps=("com.example.news",),
            )
        )
        topology.validate()
    clock = VirtualClock() if settings.virtual_clock else SystemClock()
    return pipeline.Ecosystem(topology, clock=clock, seed=settings.seed)


def create_app(
    settings: ServiceSettings | None = None,
    eco: pipeline.Ecosystem | None = None,
) -> FastAPI:
    settings = settings or ServiceSettings()
    eco = eco or build_ecosystem(settings)
    app = FastAPI(title="adschain", version="0.1.0")
    app.state.eco = eco
    app.state.settings = settings

    def _key_lookup(domain: str):
        return eco.key_lookup(domain)

    @app.get("/healthz")
    def healthz() -> dict:
        return {"status": "ok", "domains": eco.registry.domains()}

    @app.get("/topology", response_model=schemas.TopologyResponse)
    def topology() -> schemas.TopologyResponse:
        return schemas.TopologyResponse(
            topology=eco.topology.to_dict(), domains=eco.registry.domains()
        )

    @app.get("/page", response_class=HTMLResponse)
    def page(
        ads: int = Query(default=1, ge=1, le=30),
        sign: bool = True,
        client_ip: str = "203.0.113.7",
    ) -> str:
        try:
            return eco.publisher.serve_page(ads, sign=sign, client_ip=client_ip).html
        except pipeline.PipelineError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc

    @app.get("/entities/{domain}/ads-chain.crt", response_class=PlainTextResponse)
    def certificate(domain: str) -> str:
        entity = eco.registry.get(domain)
        if entity is None:
            raise HTTPException(status_code=404, detail=f"unknown domain {domain!r}")
        return entity.certificate_document().decode("utf-8")

    @app.get("/entities/{domain}/ad", response_model=schemas.AdDeliveryResponse)
    def deliver(domain: str, request: Request) -> schemas.AdDeliveryResponse:
        if eco.registry.get(domain) is None:
            raise HTTPException(status_code=404, detail=f"unknown domain {domain!r}")
        url = f"https://{domain}/ad?{request.url.query}"
        record = eco.deliver_ad_tag(url)
        return schemas.AdDeliveryResponse(
            status=record.status,
            ad_url=record.ad_url,
            record=_record_dict(record),
        )

    @app.post("/verify", response_model=schemas.VerifyResponse)
    def verify(body: schemas.VerifyRequest) -> schemas.VerifyResponse:
        try:
            chain = codec.chain_from_payload(body.chain.to_payload())
        except codec.TransportError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        report = chain_mod.verify_chain(chain, _key_lookup)
        findings = auditor.audit_chain(chain, _key_lookup, expected_ip=body.expected_ip)
        return schemas.VerifyResponse(
            valid=report.ok,
            verdicts=list(report.verdicts),
            first_invalid_index=report.first_invalid_index,
            custody_gaps=[[str(i), exp, act] for i, exp, act in report.custody_gaps],
            is_temporary=report.is_temporary,
            findings=[schemas.FindingModel(**f.to_dict()) for f in findings],
        )

    @app.post("/audit", response_model=schemas.AuditResponse)
    def audit(body: schemas.AuditRequest) -> schemas.AuditResponse:
        report = auditor.audit_log(body.records, _key_lookup)
        return schemas.AuditResponse(
            transactions_checked=report.transactions_checked,
            findings=[schemas.FindingModel(**f.to_dict()) for f in report.findings],
            counters=report.counters,
            malformed_records=report.malformed_records,
            exit_code=report.exit_code(),
        )

    @app.post("/simulate", response_model=schemas.SimulateResponse)
    def simulate(body: schemas.SimulateRequest) -> schemas.SimulateResponse:
        if body.topology is not None:
            try:
                topology = pipeline.Topology.from_dict(body.topology)
            except (pipeline.PipelineError, TypeError) as exc:
                raise HTTPException(status_code=422, detail=str(exc)) from exc
        else:
            topology = pipeline.default_topology(
                algorithm=body.algorithm,
                n_dsps=body.n_dsps,
                ssp_signing=body.ssp_signing,
                adx_signing=body.adx_signing,
                seed=body.seed,
            )
        sim = pipeline.Ecosystem(topology, clock=VirtualClock(), seed=body.seed)
        records = sim.run(body.transactions, n_ads=body.ads, sign=body.sign)
        return schemas.SimulateResponse(
            transactions=len(records),
            records=[_record_dict(r) for r in records],
        )

    @app.post("/remote-sign", response_model=schemas.RemoteSignResponse)
    def remote_sign(body: schemas.RemoteSignRequest) -> schemas.RemoteSignResponse:
        signer = next(
            (
                e
                for e in eco.entities.values()
                if isinstance(e, pipeline.AppSigner)
            ),
            None,
        )
        if signer is None:
            raise HTTPException(status_code=404, detail="no app-signer in topology")
        try:
            block_body = chain_mod.BlockBody(
                index=0,
                signer_domain=signer.domain,
                custody=body.custody,
                fields=tuple(
                    chain_mod.DataField(k, v) for k, v in body.fields.items()
                ),
                transaction_id=tuuid.parse(body.tid),
                client_ip=body.client_ip,
            )
            block = signer.remote_sign(body.app_id, block_body)
        except pipeline.UnregisteredAppError as exc:
            raise HTTPException(status_code=403, detail=str(exc)) from exc
        except (chain_mod.ChainError, tuuid.TuuidError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        return schemas.RemoteSignResponse(
            block=schemas.BlockModel(
                signer=block.body.signer_domain,
                custody=block.body.custody,
                keys=block.keys_string,
                sig=block.signature,
                fields={f.key: f.value for f in block.body.fields},
            )
        )

    return app


def _record_dict(record: pipeline.TransactionRecord) -> dict:
    import json

    return json.loads(record.to_json_line())
