"""Golden transport corpus: paired query-string and OpenRTB renderings of
identical chains, regenerated from fixed keys and compared byte-exactly."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import pytest

from adschain import chain, codec

TESTDATA = Path(__file__).parent.parent / "testdata"
sys.path.insert(0, str(TESTDATA))

import generate  # noqa: E402  (the corpus generator doubles as the rebuild oracle)

CASES = {
    "chain_ecdsa_4block": generate.four_block_ecdsa,
    "chain_rsa_1block": generate.one_block_rsa,
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_rebuild_matches_golden_url(name):
    rebuilt = CASES[name]()
    golden = (TESTDATA / f"{name}.url.txt").read_text().rstrip("\n")
    assert codec.embed_query(rebuilt, "https://ssp.example/ad") == golden


@pytest.mark.parametrize("name", sorted(CASES))
def test_rebuild_matches_golden_openrtb(name):
    rebuilt = CASES[name]()
    golden = (TESTDATA / f"{name}.openrtb.json").read_text()
    message = codec.embed_openrtb(rebuilt, {"id": str(generate.TID), "imp": [{"id": "1"}]})
    assert json.dumps(message, indent=2, sort_keys=True) + "\n" == golden


@pytest.mark.parametrize("name", sorted(CASES))
def test_golden_pair_carries_identical_chain(name):
    from_url, _ = codec.extract_query(
        (TESTDATA / f"{name}.url.txt").read_text().rstrip("\n")
    )
    from_rtb, _ = codec.extract_openrtb(
        json.loads((TESTDATA / f"{name}.openrtb.json").read_text())
    )
    assert from_url == from_rtb
    for block in from_url.blocks:
        flat = chain.flat_view(from_url)
        assert chain.build_value_string(block.keys_string, flat) == (
            chain.build_value_string(block.keys_string, chain.flat_view(from_rtb))
        )


@pytest.mark.parametrize("name", sorted(CASES))
def test_golden_chains_verify(name):
    extracted, _ = codec.extract_query(
        (TESTDATA / f"{name}.url.txt").read_text().rstrip("\n")
    )
    keys = {
        domain: generate.ecdsa_signer(domain).keypair.public_key
        for domain in ("ssp.example", "adx.example", "dsp.example")
    }
    keys["pub.example"] = (
        generate.rsa_signer("pub.example").keypair.public_key
        if name == "chain_rsa_1block"
        else generate.ecdsa_signer("pub.example").keypair.public_key
    )
    report = chain.verify_chain(extracted, keys)
    assert report.ok
    assert not report.custody_gaps
