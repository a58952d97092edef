"""Regenerate the golden transport corpus.

Run from the repository root:  python3 testdata/generate.py

Keys are fixed: the ECDSA scalars are hardcoded below, the RSA key is
loaded from rsa_pub.key (generated once and committed). Signing is
deterministic, so every output file is byte-stable.
"""

from __future__ import annotations

import json
from pathlib import Path

from cryptography.hazmat.primitives.asymmetric import ec

from adschain import chain, codec, crypto, tuuid

HERE = Path(__file__).parent

_SCALARS = {
    "pub.example": 0xC9AFA9D845BA75166B5C215767B1D6934E50C3DB36E89B127B8A622B120F6721,
    "ssp.example": 0x0000000000000000000000000000000000000000000000000000000000ADC0DE,
    "adx.example": 0x0000000000000000000000000000000000000000000000000000000000ADC0DF,
    "dsp.example": 0x0000000000000000000000000000000000000000000000000000000000ADC0E0,
}

TID = tuuid.TransactionId(
    timestamp_ns=1_700_000_000_000_000_042, clock_seq=7, node_id=0x02AB_CDEF_1234
)
CLIENT_IP = "198.51.100.20"


def ecdsa_signer(domain: str) -> crypto.Signer:
    key = ec.derive_private_key(_SCALARS[domain], ec.SECP256R1())
    return crypto.Signer(domain, crypto.KeyPair(crypto.ECDSA_P256, key))


def rsa_signer(domain: str) -> crypto.Signer:
    pair, _ = crypto.keypair_from_text((HERE / "rsa_pub.key").read_text())
    return crypto.Signer(domain, pair)


def four_block_ecdsa() -> chain.Chain:
    c = chain.Chain(
        (
            chain.build_first_block(
                TID,
                CLIENT_IP,
                "ssp.example",
                [chain.DataField("slot", "0"), chain.DataField("size", "300x250")],
                ecdsa_signer("pub.example"),
            ),
        )
    )
    c = c.extended(
        chain.build_next_block(
            c, "adx.example", [chain.DataField("seller", "direct")], ecdsa_signer("ssp.example")
        )
    )
    c = c.extended(
        chain.build_next_block(
            c, chain.PENDING_CUSTODY, [chain.DataField("auction", "open")], ecdsa_signer("adx.example")
        )
    )
    c = chain.finalize_auction_block(c, "dsp.example", ecdsa_signer("adx.example"))
    return c.extended(
        chain.build_next_block(
            c,
            "dsp.example",
            [
                chain.DataField("advertiser", "brand.example"),
                chain.DataField("campaign", "c-1001"),
                chain.DataField("creative", "cr-42"),
            ],
            ecdsa_signer("dsp.example"),
        )
    )


def one_block_rsa() -> chain.Chain:
    return chain.Chain(
        (
            chain.build_first_block(
                TID,
                CLIENT_IP,
                "ssp.example",
                [chain.DataField("size", "728x90 top")],
                rsa_signer("pub.example"),
            ),
        )
    )


def main() -> None:
    if not (HERE / "rsa_pub.key").exists():
        pair = crypto.generate_keypair(crypto.RSA_2048)
        (HERE / "rsa_pub.key").write_text(crypto.keypair_to_text(pair, "pub.example"))
        print("generated new rsa_pub.key; corpus contents will change")
    cases = {
        "chain_ecdsa_4block": four_block_ecdsa(),
        "chain_rsa_1block": one_block_rsa(),
    }
    for name, c in cases.items():
        url = codec.embed_query(c, "https://ssp.example/ad")
        message = codec.embed_openrtb(c, {"id": str(TID), "imp": [{"id": "1"}]})
        (HERE / f"{name}.url.txt").write_text(url + "\n")
        (HERE / f"{name}.openrtb.json").write_text(
            json.dumps(message, indent=2, sort_keys=True) + "\n"
        )
        print(f"wrote {name}: {len(c)} blocks")


if __name__ == "__main__":
    main()
