"""Payload decoding tools: base64 (both alphabets) and Fernet tokens.

Every failure mode produces a distinct, detailed diagnostic because the
consumer is a language model that needs to understand *why* an attempt
failed (wrong alphabet, truncated token, authentication mismatch, ...) in
order to plan its next step.
"""

from __future__ import annotations

import base64
import binascii
import hmac as hmac_mod
import hashlib
import string
from dataclasses import dataclass

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from . import ToolError

_STD_ALPHABET = set(string.ascii_letters + string.digits + "+/=")
_URL_ALPHABET = set(string.ascii_letters + string.digits + "-_=")

_PRINTABLE_BYTES = frozenset(range(32, 127)) | {9, 10, 13}


class NotBase64Error(ToolError):
    def __init__(self, message: str, offsets: dict[str, int]):
        super().__init__(message)
        self.offsets = offsets


class FernetDecryptError(ToolError):
    """Fernet decryption failure; ``reason`` is a stable machine-readable tag:
    key_not_base64 | key_wrong_length | token_not_base64 | token_non_canonical
    | truncated | ciphertext_length | wrong_version | hmac_mismatch
    | padding_invalid
    """

    def __init__(self, message: str, reason: str):
        super().__init__(message)
        self.reason = reason


@dataclass(frozen=True)
class DecodedPayload:
    data: bytes
    text: str
    printable_ratio: float
    method: str  # base64_std | base64_url | fernet | exec_sandbox

    @classmethod
    def from_bytes(cls, data: bytes, method: str) -> "DecodedPayload":
        ratio = (sum(1 for b in data if b in _PRINTABLE_BYTES) / len(data)
                 if data else 1.0)
        return cls(data=data, text=data.decode("utf-8", errors="replace"),
                   printable_ratio=ratio, method=method)


def _first_invalid_offset(text: str, alphabet: set[str]) -> int | None:
    for i, ch in enumerate(text):
        if ch not in alphabet:
            return i
    return None


def _strip_ws(text: str) -> str:
    return "".join(text.split())


def decode_base64_payload(input: str) -> DecodedPayload:
    """Decode base64 text, trying the standard then the urlsafe alphabet.

    Missing padding is tolerated (padded up to a multiple of 4). On failure
    the diagnostic names both attempted alphabets and the offset of the
    first offending character in each.
    """
    stripped = _strip_ws(input)
    if not stripped:
        raise ToolError("input is empty after stripping whitespace; "
                        "there is nothing to decode")
    problems = []
    offsets: dict[str, int] = {}
    attempts = (("base64_std", "standard", _STD_ALPHABET, base64.b64decode),
                ("base64_url", "urlsafe", _URL_ALPHABET, base64.urlsafe_b64decode))
    for method, label, alphabet, decoder in attempts:
        offset = _first_invalid_offset(stripped, alphabet)
        if offset is not None:
            offsets[label] = offset
            problems.append(f"{label} alphabet fails at offset {offset} "
                            f"(character {stripped[offset]!r})")
            continue
        padded = stripped + "=" * (-len(stripped) % 4)
        try:
            data = decoder(padded.encode("ascii"))
        except (binascii.Error, ValueError) as exc:
            offsets[label] = len(stripped)
            problems.append(f"{label} alphabet decode failed: {exc} "
                            f"(input length {len(stripped)})")
            continue
        return DecodedPayload.from_bytes(data, method)
    raise NotBase64Error(
        "input is not valid base64: " + "; ".join(problems), offsets)


# --- Fernet token decryption ---------------------------------------------------
#
# Token layout (all lengths in bytes):
#   [0]      version, must be 0x80
#   [1:9]    64-bit big-endian timestamp (accepted unconditionally here;
#            encrypted payloads are analyzed long after they were minted)
#   [9:25]   128-bit AES-CBC IV
#   [25:-32] ciphertext, PKCS#7-padded to the 16-byte block size
#   [-32:]   HMAC-SHA256 over everything before it
# The 32-byte key splits into a signing half (first 16) and an encryption
# half (last 16). The HMAC is verified in constant time before decryption.

_MIN_TOKEN_LEN = 1 + 8 + 16 + 32


def _urlsafe_decode_strict(text: str, what: str, reason: str) -> bytes:
    stripped = _strip_ws(text)
    padded = stripped + "=" * (-len(stripped) % 4)
    offset = _first_invalid_offset(stripped, _URL_ALPHABET)
    if offset is not None:
        raise FernetDecryptError(
            f"{what} is not valid urlsafe base64: invalid character "
            f"{stripped[offset]!r} at offset {offset}", reason)
    try:
        raw = base64.urlsafe_b64decode(padded.encode("ascii"))
    except (binascii.Error, ValueError) as exc:
        raise FernetDecryptError(
            f"{what} is not valid urlsafe base64: {exc}", reason) from exc
    if base64.urlsafe_b64encode(raw).decode("ascii") != padded:
        raise FernetDecryptError(
            f"{what} base64 is not canonical (trailing bits or padding "
            "do not round-trip); the value was corrupted or tampered with",
            "token_non_canonical" if what == "token" else reason)
    return raw


def decrypt_fernet_payload(token: str, key: str) -> DecodedPayload:
    """Decrypt a Fernet token with the supplied urlsafe-base64 key.

    The worker supplies whatever key it found in the code; this tool only
    performs the mechanical decryption and explains precisely what is wrong
    when it fails. Timestamp/TTL checking is disabled.
    """
    if not _strip_ws(token):
        raise FernetDecryptError("token is empty", "truncated")
    if not _strip_ws(key):
        raise FernetDecryptError("key is empty; expected 32 bytes of "
                                 "urlsafe base64", "key_wrong_length")
    key_bytes = _urlsafe_decode_strict(key, "key", "key_not_base64")
    if len(key_bytes) != 32:
        raise FernetDecryptError(
            f"key decodes to {len(key_bytes)} bytes; a Fernet key must "
            "decode to exactly 32 bytes (16 signing + 16 encryption)",
            "key_wrong_length")
    raw = _urlsafe_decode_strict(token, "token", "token_not_base64")
    if len(raw) < _MIN_TOKEN_LEN:
        raise FernetDecryptError(
            f"token is truncated: {len(raw)} bytes decoded but the minimum "
            f"is {_MIN_TOKEN_LEN} (version + timestamp + IV + HMAC)",
            "truncated")
    if raw[0] != 0x80:
        raise FernetDecryptError(
            f"wrong token version byte 0x{raw[0]:02x}; expected 0x80",
            "wrong_version")
    ciphertext = raw[25:-32]
    if not ciphertext or len(ciphertext) % 16 != 0:
        raise FernetDecryptError(
            f"ciphertext length {len(ciphertext)} is not a positive multiple "
            "of the 16-byte AES block size; the token is corrupt",
            "ciphertext_length")
    signing_key, enc_key = key_bytes[:16], key_bytes[16:]
    expected = hmac_mod.new(signing_key, raw[:-32], hashlib.sha256).digest()
    if not hmac_mod.compare_digest(expected, raw[-32:]):
        raise FernetDecryptError(
            "HMAC verification failed: the token was not produced with this "
            "key, or it has been modified", "hmac_mismatch")
    iv = raw[9:25]
    decryptor = Cipher(algorithms.AES(enc_key), modes.CBC(iv)).decryptor()
    padded_plain = decryptor.update(ciphertext) + decryptor.finalize()
    pad = padded_plain[-1]
    if pad < 1 or pad > 16 or padded_plain[-pad:] != bytes([pad]) * pad:
        raise FernetDecryptError(
            "PKCS#7 padding is invalid after decryption", "padding_invalid")
    return DecodedPayload.from_bytes(padded_plain[:-pad], "fernet")
