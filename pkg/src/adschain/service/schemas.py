"""Request/response models for the HTTP service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class BlockModel(BaseModel):
    signer: str
    custody: str
    keys: str
    sig: str
    fields: dict[str, str] = Field(default_factory=dict)


class ChainModel(BaseModel):
    tid: str
    ip: str
    blocks: list[BlockModel]

    def to_payload(self) -> dict:
        return self.model_dump()

    @classmethod
    def from_payload(cls, payload: dict) -> "ChainModel":
        return cls.model_validate(payload)


class VerifyRequest(BaseModel):
    chain: ChainModel
    expected_ip: str | None = None


class FindingModel(BaseModel):
    tid: str
    kind: str
    block_index: int | None = None
    detail: str = ""


class VerifyResponse(BaseModel):
    valid: bool
    verdicts: list[str]
    first_invalid_index: int | None
    custody_gaps: list[list[str]]
    is_temporary: bool
    findings: list[FindingModel]


class AuditRequest(BaseModel):
    records: list[str]  # transaction log lines
    strict: bool = False


class AuditResponse(BaseModel):
    transactions_checked: int
    findings: list[FindingModel]
    counters: dict[str, int]
    malformed_records: int
    exit_code: int


class SimulateRequest(BaseModel):
    transactions: int = Field(default=1, ge=1, le=100_000)
    ads: int = Field(default=1, ge=1, le=30)
    seed: int = 0
    algorithm: str = "ecdsa"
    n_dsps: int = Field(default=1, ge=1, le=16)
    ssp_signing: bool = True
    adx_signing: bool = True
    sign: bool = True
    topology: dict | None = None  # full topology document overrides the knobs


class SimulateResponse(BaseModel):
    transactions: int
    records: list[dict]


class RemoteSignRequest(BaseModel):
    app_id: str
    tid: str
    client_ip: str
    custody: str
    fields: dict[str, str] = Field(default_factory=dict)


class RemoteSignResponse(BaseModel):
    block: BlockModel


class AdDeliveryResponse(BaseModel):
    status: str
    ad_url: str | None = None
    record: dict


class TopologyResponse(BaseModel):
    topology: dict
    domains: list[str]
