from __future__ import annotations

import pytest

from adschain import chain, crypto, tuuid

# Key generation dominates test time (RSA especially); share fixed pairs.


@pytest.fixture(scope="session")
def ecdsa_pair() -> crypto.KeyPair:
    return crypto.generate_keypair(crypto.ECDSA_P256)


@pytest.fixture(scope="session")
def rsa_pair() -> crypto.KeyPair:
    return crypto.generate_keypair(crypto.RSA_2048)


@pytest.fixture(scope="session")
def pub_signer(ecdsa_pair) -> crypto.Signer:
    return crypto.Signer("pub.example", ecdsa_pair)


@pytest.fixture(scope="session")
def ssp_signer() -> crypto.Signer:
    return crypto.Signer("ssp.example", crypto.generate_keypair(crypto.ECDSA_P256))


@pytest.fixture(scope="session")
def adx_signer() -> crypto.Signer:
    return crypto.Signer("adx.example", crypto.generate_keypair(crypto.ECDSA_P256))


@pytest.fixture(scope="session")
def dsp_signer() -> crypto.Signer:
    return crypto.Signer("dsp.example", crypto.generate_keypair(crypto.ECDSA_P256))


@pytest.fixture(scope="session")
def key_map(pub_signer, ssp_signer, adx_signer, dsp_signer):
    return {
        s.domain: s.keypair.public_key
        for s in (pub_signer, ssp_signer, adx_signer, dsp_signer)
    }


@pytest.fixture()
def sample_tid() -> tuuid.TransactionId:
    return tuuid.TransactionId(
        timestamp_ns=1_700_000_000_123_456_789, clock_seq=5, node_id=0xABCDEF012345
    )


def build_four_block_chain(
    tid, pub_signer, ssp_signer, adx_signer, dsp_signer
) -> chain.Chain:
    """pub -> ssp -> adx (auction) -> dsp, finalized, dsp terminal block."""
    first = chain.build_first_block(
        tid,
        "198.51.100.20",
        "ssp.example",
        [chain.DataField("size", "300x250")],
        pub_signer,
    )
    c = chain.Chain((first,))
    c = c.extended(
        chain.build_next_block(c, "adx.example", [chain.DataField("seller", "direct")], ssp_signer)
    )
    c = c.extended(
        chain.build_next_block(c, chain.PENDING_CUSTODY, [chain.DataField("auction", "open")], adx_signer)
    )
    c = chain.finalize_auction_block(c, "dsp.example", adx_signer)
    c = c.extended(
        chain.build_next_block(
            c,
            "dsp.example",
            [chain.DataField("advertiser", "brand.example"), chain.DataField("campaign", "c-7")],
            dsp_signer,
        )
    )
    return c


@pytest.fixture()
def four_block_chain(sample_tid, pub_signer, ssp_signer, adx_signer, dsp_signer):
    return build_four_block_chain(
        sample_tid, pub_signer, ssp_signer, adx_signer, dsp_signer
    )
