"""Signing primitives, key material, and a minimal domain certificate scheme.

Two signature configurations are supported, both hashing with SHA-256:

* ``ECDSA-P256-SHA256`` — NIST P-256 with deterministic nonces (RFC 6979),
  so a fixed key and message always produce the same signature bytes.
* ``RSA2048-PKCS1v15-SHA256`` — 2048-bit RSA with PKCS#1 v1.5 padding,
  deterministic by construction.

Certificates here are not X.509. A certificate is a small length-prefixed
binary record binding (subject domain, algorithm, public key, validity
window, issuer name), signed by a local CA. Files carry a 4-line text header
(algorithm, subject, validity, issuer) followed by the base64url payload;
the grammar is documented in docs/PROTOCOL.md.
"""

from __future__ import annotations

import base64
import hashlib
import struct
from dataclasses import dataclass
from datetime import datetime, timezone

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec, padding, rsa

ECDSA_P256 = "ECDSA-P256-SHA256"
RSA_2048 = "RSA2048-PKCS1v15-SHA256"
ALGORITHMS = (ECDSA_P256, RSA_2048)

# Verdicts of validate_certificate.
ACCEPTED = "accepted"
UNTRUSTED_ISSUER = "untrusted-issuer"
EXPIRED = "expired"
WRONG_SUBJECT = "wrong-subject"
BAD_SIGNATURE = "bad-signature"

PrivateKey = ec.EllipticCurvePrivateKey | rsa.RSAPrivateKey
PublicKey = ec.EllipticCurvePublicKey | rsa.RSAPublicKey


class CryptoError(Exception):
    pass


class UnsupportedAlgorithm(CryptoError):
    pass


class MalformedDocument(CryptoError):
    """A key or certificate document that does not parse."""


def b64url_encode(raw: bytes) -> str:
    return base64.urlsafe_b64encode(raw).rstrip(b"=").decode("ascii")


def b64url_decode(text: str) -> bytes:
    pad = -len(text) % 4
    return base64.urlsafe_b64decode(text + "=" * pad)


def sha256_digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class KeyPair:
    algorithm: str
    private_key: PrivateKey

    @property
    def public_key(self) -> PublicKey:
        return self.private_key.public_key()

    def public_bytes(self) -> bytes:
        """DER SubjectPublicKeyInfo encoding of the public half."""
        return self.public_key.public_bytes(
            serialization.Encoding.DER,
            serialization.PublicFormat.SubjectPublicKeyInfo,
        )

    def private_bytes(self) -> bytes:
        return self.private_key.private_bytes(
            serialization.Encoding.DER,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )


def generate_keypair(algorithm: str) -> KeyPair:
    if algorithm == ECDSA_P256:
        return KeyPair(algorithm, ec.generate_private_key(ec.SECP256R1()))
    if algorithm == RSA_2048:
        return KeyPair(
            algorithm,
            rsa.generate_private_key(public_exponent=65537, key_size=2048),
        )
    raise UnsupportedAlgorithm(f"unknown algorithm: {algorithm!r}")


def keypair_from_private_bytes(algorithm: str, der: bytes) -> KeyPair:
    key = serialization.load_der_private_key(der, password=None)
    pair = KeyPair(algorithm, key)
    _check_key_matches_algorithm(pair)
    return pair


def _check_key_matches_algorithm(pair: KeyPair) -> None:
    key = pair.private_key
    if pair.algorithm == ECDSA_P256:
        if not isinstance(key, ec.EllipticCurvePrivateKey) or not isinstance(
            key.curve, ec.SECP256R1
        ):
            raise UnsupportedAlgorithm("key is not a P-256 EC key")
    elif pair.algorithm == RSA_2048:
        if not isinstance(key, rsa.RSAPrivateKey) or key.key_size != 2048:
            raise UnsupportedAlgorithm("key is not 2048-bit RSA")
    else:
        raise UnsupportedAlgorithm(f"unknown algorithm: {pair.algorithm!r}")


def load_public_key(der: bytes) -> PublicKey:
    key = serialization.load_der_public_key(der)
    if not isinstance(key, (ec.EllipticCurvePublicKey, rsa.RSAPublicKey)):
        raise UnsupportedAlgorithm(f"unsupported key type: {type(key).__name__}")
    return key


def public_key_algorithm(key: PublicKey) -> str:
    if isinstance(key, ec.EllipticCurvePublicKey):
        return ECDSA_P256
    return RSA_2048


def sign(pair: KeyPair, message: bytes) -> bytes:
    """Detached signature over the SHA-256 digest of ``message``.

    Deterministic for both algorithms: signing the same message twice with
    the same key yields identical bytes.
    """
    key = pair.private_key
    if isinstance(key, ec.EllipticCurvePrivateKey):
        return key.sign(
            message, ec.ECDSA(hashes.SHA256(), deterministic_signing=True)
        )
    return key.sign(message, padding.PKCS1v15(), hashes.SHA256())


def verify(public: PublicKey | bytes, message: bytes, signature: bytes) -> bool:
    """True iff ``signature`` is valid for ``message`` under ``public``.

    Never raises: malformed keys or signatures simply fail verification.
    """
    try:
        key = load_public_key(public) if isinstance(public, bytes) else public
        if isinstance(key, ec.EllipticCurvePublicKey):
            key.verify(signature, message, ec.ECDSA(hashes.SHA256()))
        elif isinstance(key, rsa.RSAPublicKey):
            key.verify(signature, message, padding.PKCS1v15(), hashes.SHA256())
        else:
            return False
        return True
    except (InvalidSignature, ValueError, TypeError, CryptoError):
        return False


class Signer:
    """An entity's signing handle: it always signs with the same key."""

    def __init__(self, domain: str, keypair: KeyPair):
        self.domain = domain
        self.keypair = keypair

    @property
    def algorithm(self) -> str:
        return self.keypair.algorithm

    def sign(self, message: bytes) -> bytes:
        return sign(self.keypair, message)


# --------------------------------------------------------------------------
# Domain certificates
# --------------------------------------------------------------------------

_CERT_MAGIC = b"ADSC"
_CERT_VERSION = 1


@dataclass(frozen=True)
class DomainCertificate:
    subject_domain: str
    algorithm: str
    public_material: bytes
    not_before: int  # epoch seconds
    not_after: int
    issuer: str
    issuer_signature: bytes

    def payload(self) -> bytes:
        return certificate_payload(
            self.subject_domain,
            self.algorithm,
            self.public_material,
            self.not_before,
            self.not_after,
            self.issuer,
        )

    def public_key(self) -> PublicKey:
        return load_public_key(self.public_material)


def _lp(raw: bytes) -> bytes:
    if len(raw) > 0xFFFF:
        raise MalformedDocument("field too long for 16-bit length prefix")
    return struct.pack(">H", len(raw)) + raw


def certificate_payload(
    subject_domain: str,
    algorithm: str,
    public_material: bytes,
    not_before: int,
    not_after: int,
    issuer: str,
) -> bytes:
    """Canonical byte string covered by the issuer signature."""
    return b"".join(
        (
            _CERT_MAGIC,
            bytes([_CERT_VERSION]),
            _lp(subject_domain.encode("ascii")),
            _lp(algorithm.encode("ascii")),
            _lp(public_material),
            _lp(struct.pack(">q", not_before)),
            _lp(struct.pack(">q", not_after)),
            _lp(issuer.encode("ascii")),
        )
    )


class CertificateAuthority:
    """Single-level test CA: the root signs leaf certificates directly."""

    def __init__(self, name: str, keypair: KeyPair | None = None):
        self.name = name
        self.keypair = keypair or generate_keypair(ECDSA_P256)

    def root_certificate(self) -> DomainCertificate:
        """Self-signed root, suitable for a trust store."""
        return self.issue(
            subject_domain=self.name,
            algorithm=self.keypair.algorithm,
            public_material=self.keypair.public_bytes(),
            not_before=0,
            not_after=2**40,
        )

    def issue(
        self,
        subject_domain: str,
        algorithm: str,
        public_material: bytes,
        not_before: int,
        not_after: int,
    ) -> DomainCertificate:
        if not_before >= not_after:
            raise ValueError("certificate validity window is empty")
        payload = certificate_payload(
            subject_domain, algorithm, public_material, not_before, not_after, self.name
        )
        return DomainCertificate(
            subject_domain=subject_domain,
            algorithm=algorithm,
            public_material=public_material,
            not_before=not_before,
            not_after=not_after,
            issuer=self.name,
            issuer_signature=sign(self.keypair, payload),
        )

    def issue_for(
        self,
        subject_domain: str,
        keypair: KeyPair,
        not_before: int,
        not_after: int,
    ) -> DomainCertificate:
        return self.issue(
            subject_domain,
            keypair.algorithm,
            keypair.public_bytes(),
            not_before,
            not_after,
        )


class TrustStore:
    """Set of trusted root certificates, looked up by issuer name."""

    def __init__(self, roots: list[DomainCertificate] | None = None):
        self._roots: dict[str, DomainCertificate] = {}
        for cert in roots or []:
            self.add(cert)

    def add(self, root: DomainCertificate) -> None:
        self._roots[root.subject_domain] = root

    def get(self, issuer: str) -> DomainCertificate | None:
        return self._roots.get(issuer)

    def __len__(self) -> int:
        return len(self._roots)


def validate_certificate(
    cert: DomainCertificate,
    expected_domain: str,
    now: int,
    trust: TrustStore,
) -> str:
    """Check issuer trust, signature, validity window, and subject binding.

    The subject must be either the expected domain itself or the dedicated
    ``ads.`` subdomain of it. Returns one of the verdict constants; never
    raises.
    """
    root = trust.get(cert.issuer)
    if root is None:
        return UNTRUSTED_ISSUER
    try:
        issuer_key = load_public_key(root.public_material)
    except Exception:
        return UNTRUSTED_ISSUER
    if not verify(issuer_key, cert.payload(), cert.issuer_signature):
        return BAD_SIGNATURE
    if not cert.not_before <= now < cert.not_after:
        return EXPIRED
    if cert.subject_domain not in (expected_domain, f"ads.{expected_domain}"):
        return WRONG_SUBJECT
    return ACCEPTED


# --------------------------------------------------------------------------
# Text serialization: 4-line header + base64url body
# --------------------------------------------------------------------------


def _iso(seconds: int) -> str:
    try:
        return (
            datetime.fromtimestamp(seconds, tz=timezone.utc)
            .replace(tzinfo=None)
            .isoformat(timespec="seconds")
            + "Z"
        )
    except (OverflowError, OSError, ValueError):
        return f"@{seconds}"  # header is informational; the body is authoritative


def certificate_to_text(cert: DomainCertificate) -> str:
    body = b64url_encode(cert.payload() + _lp(cert.issuer_signature))
    return (
        f"algorithm: {cert.algorithm}\n"
        f"subject: {cert.subject_domain}\n"
        f"validity: {_iso(cert.not_before)} {_iso(cert.not_after)}\n"
        f"issuer: {cert.issuer}\n"
        f"{body}\n"
    )


def _parse_header(lines: list[str]) -> dict[str, str]:
    header = {}
    for line in lines:
        name, _, value = line.partition(":")
        if not _:
            raise MalformedDocument(f"bad header line: {line!r}")
        header[name.strip()] = value.strip()
    return header


def certificate_from_text(text: str) -> DomainCertificate:
    """Parse a certificate document. The binary body is authoritative."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) != 5:
        raise MalformedDocument(f"expected 5 lines, got {len(lines)}")
    _parse_header(lines[:4])  # reject documents with a mangled header
    try:
        raw = b64url_decode(lines[4])
    except Exception as exc:
        raise MalformedDocument(f"bad base64url body: {exc}") from exc
    return _decode_certificate(raw)


def _read_lp(raw: bytes, offset: int) -> tuple[bytes, int]:
    if offset + 2 > len(raw):
        raise MalformedDocument("truncated length prefix")
    (length,) = struct.unpack_from(">H", raw, offset)
    offset += 2
    if offset + length > len(raw):
        raise MalformedDocument("truncated field")
    return raw[offset : offset + length], offset + length


def _decode_certificate(raw: bytes) -> DomainCertificate:
    if raw[:4] != _CERT_MAGIC:
        raise MalformedDocument("bad magic")
    if len(raw) < 5 or raw[4] != _CERT_VERSION:
        raise MalformedDocument("unsupported certificate version")
    offset = 5
    subject, offset = _read_lp(raw, offset)
    algorithm, offset = _read_lp(raw, offset)
    public, offset = _read_lp(raw, offset)
    nb_raw, offset = _read_lp(raw, offset)
    na_raw, offset = _read_lp(raw, offset)
    issuer, offset = _read_lp(raw, offset)
    signature, offset = _read_lp(raw, offset)
    if offset != len(raw):
        raise MalformedDocument("trailing bytes after certificate")
    if len(nb_raw) != 8 or len(na_raw) != 8:
        raise MalformedDocument("bad validity encoding")
    try:
        return DomainCertificate(
            subject_domain=subject.decode("ascii"),
            algorithm=algorithm.decode("ascii"),
            public_material=public,
            not_before=struct.unpack(">q", nb_raw)[0],
            not_after=struct.unpack(">q", na_raw)[0],
            issuer=issuer.decode("ascii"),
            issuer_signature=signature,
        )
    except UnicodeDecodeError as exc:
        raise MalformedDocument("non-ascii name field") from exc


def keypair_to_text(pair: KeyPair, subject: str) -> str:
    return (
        f"algorithm: {pair.algorithm}\n"
        f"subject: {subject}\n"
        "validity: -\n"
        "issuer: -\n"
        f"{b64url_encode(pair.private_bytes())}\n"
    )


def keypair_from_text(text: str) -> tuple[KeyPair, str]:
    """Return (keypair, subject) from a private key document."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) != 5:
        raise MalformedDocument(f"expected 5 lines, got {len(lines)}")
    header = _parse_header(lines[:4])
    if "algorithm" not in header or "subject" not in header:
        raise MalformedDocument("missing algorithm/subject header")
    try:
        der = b64url_decode(lines[4])
        pair = keypair_from_private_bytes(header["algorithm"], der)
    except MalformedDocument:
        raise
    except Exception as exc:
        raise MalformedDocument(f"bad private key body: {exc}") from exc
    return pair, header["subject"]
