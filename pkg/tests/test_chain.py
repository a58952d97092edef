from __future__ import annotations

import pytest
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.utils import decode_dss_signature
from hypothesis import given
from hypothesis import strategies as st

from adschain import chain, crypto

from .test_crypto import _RFC6979_KEY, ecdsa_sign_oracle

# ---------------------------------------------------------------------------
# Keys-string and value-string
# ---------------------------------------------------------------------------


def test_keys_string_joins_in_order():
    assert chain.build_keys_string(["ac_tid", "ac_ip", "ac0_size"]) == "ac_tid,ac_ip,ac0_size"


def test_keys_string_singleton():
    assert chain.build_keys_string(["ac_tid"]) == "ac_tid"


def test_keys_string_rejects_delimiter_in_key():
    with pytest.raises(chain.InvalidKeyError):
        chain.build_keys_string(["a,b"])


def test_keys_string_rejects_empty_and_duplicates():
    with pytest.raises(chain.InvalidKeyError):
        chain.build_keys_string([])
    with pytest.raises(chain.InvalidKeyError):
        chain.build_keys_string(["a", "a"])
    with pytest.raises(chain.InvalidKeyError):
        chain.build_keys_string(["UPPER"])


def test_value_string_joins_with_unit_separator():
    assert chain.build_value_string("a,b", {"a": "x", "b": "y"}) == b"x\x1fy"


def test_value_string_single_empty_value():
    assert chain.build_value_string("a", {"a": ""}) == b""


def test_value_string_ambiguity_resolved_by_delimiter():
    left = chain.build_value_string("a,b", {"a": "xy", "b": "z"})
    right = chain.build_value_string("a,b", {"a": "x", "b": "yz"})
    assert left != right


def test_value_string_missing_key():
    with pytest.raises(chain.MissingKeyError):
        chain.build_value_string("a,b", {"a": "x"})


def test_value_string_rejects_delimiter_byte_in_value():
    with pytest.raises(chain.InvalidValueError):
        chain.build_value_string("a", {"a": "x\x1fy"})


_VALUE_TEXT = st.text(
    alphabet=st.characters(
        blacklist_characters="\x1f", blacklist_categories=("Cs",)
    ),
    max_size=8,
)


@given(
    st.lists(_VALUE_TEXT, min_size=1, max_size=5),
    st.lists(_VALUE_TEXT, min_size=1, max_size=5),
)
def test_value_string_injective_over_value_tuples(left, right):
    def pack(values):
        keys = [f"k{i}" for i in range(len(values))]
        view = dict(zip(keys, values))
        return chain.build_value_string(",".join(keys), view)

    if left != right:
        assert pack(left) != pack(right)
    else:
        assert pack(left) == pack(right)


def test_data_field_validation():
    chain.DataField("size", "300x250")
    with pytest.raises(chain.InvalidKeyError):
        chain.DataField("Size", "x")
    with pytest.raises(chain.InvalidKeyError):
        chain.DataField("a,b", "x")
    with pytest.raises(chain.InvalidValueError):
        chain.DataField("size", "a\x1fb")


def test_canonical_ip_forms():
    assert chain.canonical_ip("198.51.100.20") == "198.51.100.20"
    assert chain.canonical_ip("2001:DB8:0:0:0:0:0:1") == "2001:db8::1"
    with pytest.raises(chain.InvalidBlockError):
        chain.canonical_ip("not-an-ip")


# ---------------------------------------------------------------------------
# First block
# ---------------------------------------------------------------------------


def test_first_block_minimal_cover(sample_tid, pub_signer):
    block = chain.build_first_block(sample_tid, "198.51.100.20", "ssp.example", [], pub_signer)
    assert block.keys_string == "ac_tid,ac_ip,ac0_custody"
    assert block.body.index == 0
    assert block.body.custody == "ssp.example"


def test_first_block_with_size_field_verifies(sample_tid, pub_signer):
    block = chain.build_first_block(
        sample_tid, "198.51.100.20", "ssp.example",
        [chain.DataField("size", "300x250")], pub_signer,
    )
    assert block.keys_string == "ac_tid,ac_ip,ac0_custody,ac0_size"
    flat = chain.flat_view(chain.Chain((block,)))
    assert chain.verify_block(block, flat, pub_signer.keypair.public_key) == chain.VALID


def test_first_block_known_key_vector(sample_tid):
    """Fixed key + fixed inputs must produce exactly the signature the
    independent pure-Python RFC 6979 implementation computes."""
    pair = crypto.KeyPair(
        crypto.ECDSA_P256, ec.derive_private_key(_RFC6979_KEY, ec.SECP256R1())
    )
    signer = crypto.Signer("pub.example", pair)
    block = chain.build_first_block(
        sample_tid, "198.51.100.20", "ssp.example",
        [chain.DataField("size", "300x250")], signer,
    )
    tid_text = str(sample_tid)
    expected_payload = "\x1f".join(
        [tid_text, "198.51.100.20", "ssp.example", "300x250"]
    ).encode()
    assert decode_dss_signature(crypto.b64url_decode(block.signature)) == (
        ecdsa_sign_oracle(_RFC6979_KEY, expected_payload)
    )


def test_first_block_rejects_bad_custody(sample_tid, pub_signer):
    with pytest.raises(chain.InvalidBlockError):
        chain.build_first_block(sample_tid, "198.51.100.20", "not a domain", [], pub_signer)
    with pytest.raises(chain.InvalidBlockError):
        chain.build_first_block(sample_tid, "198.51.100.20", "pending", [], pub_signer)


def test_first_block_rejects_reserved_field(sample_tid, pub_signer):
    with pytest.raises(chain.InvalidKeyError):
        chain.build_first_block(
            sample_tid, "198.51.100.20", "ssp.example",
            [chain.DataField("custody", "evil")], pub_signer,
        )


def test_first_block_canonicalizes_ip(sample_tid, pub_signer):
    block = chain.build_first_block(
        sample_tid, "2001:DB8::0001", "ssp.example", [], pub_signer
    )
    assert block.body.client_ip == "2001:db8::1"


# ---------------------------------------------------------------------------
# Next block / custody
# ---------------------------------------------------------------------------


@pytest.fixture()
def one_block_chain(sample_tid, pub_signer):
    return chain.Chain(
        (
            chain.build_first_block(
                sample_tid, "198.51.100.20", "ssp.example",
                [chain.DataField("size", "300x250")], pub_signer,
            ),
        )
    )


def test_append_block_round_trip(one_block_chain, ssp_signer, key_map):
    block = chain.build_next_block(
        one_block_chain, "adx.example", [chain.DataField("seller", "direct")], ssp_signer
    )
    assert block.keys_string == "ac1_prev,ac1_custody,ac1_seller"
    two = one_block_chain.extended(block)
    report = chain.verify_chain(two, key_map)
    assert report.ok and not report.custody_gaps


def test_append_requires_custody(one_block_chain, adx_signer):
    with pytest.raises(chain.CustodyMismatchError):
        chain.build_next_block(one_block_chain, "dsp.example", [], adx_signer)


def test_append_across_gap_when_allowed(one_block_chain, adx_signer, key_map):
    block = chain.build_next_block(
        one_block_chain, "dsp.example", [], adx_signer, require_custody=False
    )
    two = one_block_chain.extended(block)
    report = chain.verify_chain(two, key_map)
    assert report.ok
    assert report.custody_gaps == ((0, "ssp.example", "adx.example"),)


def test_temporary_block_covers_tmp_flag(one_block_chain, ssp_signer, key_map):
    block = chain.build_next_block(
        one_block_chain, chain.PENDING_CUSTODY, [], ssp_signer
    )
    assert block.keys_string == "ac1_prev,ac1_custody,ac1_tmp"
    assert ("tmp", "1") in [(f.key, f.value) for f in block.body.fields]
    temp = one_block_chain.extended(block)
    assert temp.is_temporary
    assert chain.verify_chain(temp, key_map).ok


def test_cannot_extend_temporary_chain(one_block_chain, ssp_signer, adx_signer):
    temp = one_block_chain.extended(
        chain.build_next_block(one_block_chain, chain.PENDING_CUSTODY, [], ssp_signer)
    )
    with pytest.raises(chain.InvalidChainError):
        chain.build_next_block(temp, "x.example", [], adx_signer, require_custody=False)


# ---------------------------------------------------------------------------
# Auction finalization
# ---------------------------------------------------------------------------


@pytest.fixture()
def temp_chain(one_block_chain, ssp_signer):
    return one_block_chain.extended(
        chain.build_next_block(one_block_chain, chain.PENDING_CUSTODY, [chain.DataField("auction", "open")], ssp_signer)
    )


def test_finalize_delegates_to_winner(temp_chain, ssp_signer, key_map):
    final = chain.finalize_auction_block(temp_chain, "dsp.example", ssp_signer)
    last = final.last
    assert last.body.custody == "dsp.example"
    assert "tmp" not in [f.key for f in last.body.fields]
    assert "ac1_tmp" not in last.keys_string
    assert not final.is_temporary
    assert chain.verify_chain(final, key_map).ok
    # the temporary signature is discarded
    assert last.signature != temp_chain.last.signature


def test_finalize_requires_temporary(one_block_chain, pub_signer):
    with pytest.raises(chain.NotTemporaryError):
        chain.finalize_auction_block(one_block_chain, "dsp.example", pub_signer)


def test_finalize_requires_author(temp_chain, adx_signer):
    with pytest.raises(chain.CustodyMismatchError):
        chain.finalize_auction_block(temp_chain, "dsp.example", adx_signer)


def test_loser_never_holds_final_custody(temp_chain, ssp_signer, key_map):
    bidders = ["a.dsp.example", "b.dsp.example"]
    finals = [
        chain.finalize_auction_block(temp_chain, winner, ssp_signer)
        for winner in bidders
    ]
    # the temporary chain a loser keeps names nobody
    assert temp_chain.last.body.custody == chain.PENDING_CUSTODY
    for final, winner in zip(finals, bidders):
        assert final.last.body.custody == winner
    # exactly one final chain names each bidder
    for bidder in bidders:
        naming = [f for f in finals if f.last.body.custody == bidder]
        assert len(naming) == 1


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------


def test_fresh_block_valid(one_block_chain, pub_signer):
    flat = chain.flat_view(one_block_chain)
    verdict = chain.verify_block(one_block_chain.blocks[0], flat, pub_signer.keypair.public_key)
    assert verdict == chain.VALID


def test_flipped_value_bad_signature(one_block_chain, pub_signer):
    flat = chain.flat_view(one_block_chain)
    flat["ac0_size"] = "300x251"
    verdict = chain.verify_block(one_block_chain.blocks[0], flat, pub_signer.keypair.public_key)
    assert verdict == chain.BAD_SIGNATURE


def test_absent_cover_key_missing_key(one_block_chain, pub_signer):
    flat = chain.flat_view(one_block_chain)
    del flat["ac0_size"]
    verdict = chain.verify_block(one_block_chain.blocks[0], flat, pub_signer.keypair.public_key)
    assert verdict == chain.MISSING_KEY


def test_unknown_signer_unverifiable(one_block_chain):
    report = chain.verify_chain(one_block_chain, {})
    assert report.verdicts == (chain.UNVERIFIABLE,)
    assert report.first_invalid_index == 0


def test_four_block_chain_all_valid(four_block_chain, key_map):
    report = chain.verify_chain(four_block_chain, key_map)
    assert report.verdicts == (chain.VALID,) * 4
    assert report.first_invalid_index is None
    assert report.custody_gaps == ()
    assert not report.is_temporary


def _with_field_value(c: chain.Chain, index: int, key: str, value: str) -> chain.Chain:
    """Rewrite one data field of one block without re-signing."""
    import dataclasses

    blocks = list(c.blocks)
    body = blocks[index].body
    fields = tuple(
        chain.DataField(f.key, value if f.key == key else f.value)
        for f in body.fields
    )
    blocks[index] = dataclasses.replace(
        blocks[index], body=dataclasses.replace(body, fields=fields)
    )
    return chain.Chain(tuple(blocks))


def test_tamper_block_2_localized(four_block_chain, key_map):
    tampered = _with_field_value(four_block_chain, 2, "auction", "rigged")
    report = chain.verify_chain(tampered, key_map)
    assert report.first_invalid_index == 2
    assert report.verdicts[0] == chain.VALID
    assert report.verdicts[1] == chain.VALID
    assert report.verdicts[2] == chain.BAD_SIGNATURE


def test_tamper_localization_every_block(four_block_chain, key_map):
    mutable = {0: "size", 1: "seller", 2: "auction", 3: "campaign"}
    for index, key in mutable.items():
        tampered = _with_field_value(four_block_chain, index, key, "evil")
        report = chain.verify_chain(tampered, key_map)
        assert report.first_invalid_index == index
        for j in range(index):
            assert report.verdicts[j] == chain.VALID


def test_custody_gap_reported_not_fatal(four_block_chain, key_map):
    import dataclasses

    blocks = list(four_block_chain.blocks)
    # block 1 signed by someone who is not block 0's delegate
    rogue = crypto.Signer("rogue.example", crypto.generate_keypair(crypto.ECDSA_P256))
    prefix = chain.Chain((blocks[0],))
    replacement = chain.build_next_block(
        prefix, "adx.example", [chain.DataField("seller", "direct")], rogue,
        require_custody=False,
    )
    keys = dict(key_map)
    keys["rogue.example"] = rogue.keypair.public_key
    two = prefix.extended(replacement)
    report = chain.verify_chain(two, keys)
    assert report.ok
    assert report.custody_gaps == ((0, "ssp.example", "rogue.example"),)


def test_prefix_verification(four_block_chain, key_map):
    for i in range(1, len(four_block_chain.blocks) + 1):
        prefix = chain.Chain(four_block_chain.blocks[:i])
        assert chain.verify_chain(prefix, key_map).ok


def test_rewritten_keys_string_invalidates(four_block_chain, key_map):
    import dataclasses

    blocks = list(four_block_chain.blocks)
    blocks[1] = dataclasses.replace(blocks[1], keys_string="ac1_prev,ac1_custody")
    report = chain.verify_chain(chain.Chain(tuple(blocks)), key_map)
    assert report.first_invalid_index == 1


def test_rewritten_custody_invalidates(four_block_chain, key_map):
    import dataclasses

    blocks = list(four_block_chain.blocks)
    body = dataclasses.replace(blocks[1].body, custody="evil.example")
    blocks[1] = dataclasses.replace(blocks[1], body=body)
    report = chain.verify_chain(chain.Chain(tuple(blocks)), key_map)
    assert report.first_invalid_index == 1
    assert report.verdicts[1] == chain.BAD_SIGNATURE


def test_chain_structure_invariants(four_block_chain):
    four_block_chain.validate()
    with pytest.raises(chain.InvalidChainError):
        chain.Chain(())
    # non-consecutive indices
    with pytest.raises(chain.InvalidChainError):
        chain.Chain((four_block_chain.blocks[0], four_block_chain.blocks[2])).validate()


def test_every_single_byte_flip_of_covered_value_detected(one_block_chain, pub_signer):
    flat = chain.flat_view(one_block_chain)
    block = one_block_chain.blocks[0]
    key = pub_signer.keypair.public_key
    original = flat["ac0_size"]
    for pos in range(len(original)):
        for bit in (1, 4):
            flipped = bytearray(original.encode())
            flipped[pos] ^= bit
            mutated = dict(flat)
            mutated["ac0_size"] = flipped.decode("latin-1")
            assert chain.verify_block(block, mutated, key) == chain.BAD_SIGNATURE


def test_signature_round_trip_both_algorithms(sample_tid, rsa_pair):
    rsa_signer = crypto.Signer("pub.example", rsa_pair)
    block = chain.build_first_block(
        sample_tid, "198.51.100.20", "ssp.example",
        [chain.DataField("size", "728x90")], rsa_signer,
    )
    c = chain.Chain((block,))
    flat = chain.flat_view(c)
    assert chain.verify_block(block, flat, rsa_pair.public_key) == chain.VALID
    assert block.algorithm == crypto.RSA_2048
    flat["ac0_size"] = "728x91"
    assert chain.verify_block(block, flat, rsa_pair.public_key) == chain.BAD_SIGNATURE
