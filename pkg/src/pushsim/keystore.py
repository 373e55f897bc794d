"""Key-store persistence: one JSON document per TPM or CA.

Public material (keys, PCR values, the measurement log, certificates)
is stored in the clear; private material is packed into one blob and
encrypted with AES-GCM under a key derived from the store passphrase.
File names are ``tpm-<id16>.json`` and ``pca-<id16>.json`` where id16
is the first 16 hex chars of the owner's identity digest.

Document schema (TPM):
  kind, tpm_id, suite, engine_label, ek_public, ekc, owned,
  pcrs (24 hex digests), log (list of measurement events),
  keys (key_id/role/public/policy per stored key, public halves only),
  private {salt, nonce, ciphertext}  -- encrypted private material
Document schema (PCA):
  kind, pca_id, suite, public, issued (certificate ledger),
  private {salt, nonce, ciphertext}
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from . import crypto
from .crypto import KeyPair, KeyRole, SeededRng, pack_chunks, sha256, unpack_chunks
from .privacy_ca import PrivacyCa
from .tpm import (
    EndorsementIdentity,
    MeasurementEvent,
    MeasurementLog,
    PcrBank,
    PcrPolicy,
    StoredKey,
    Tpm,
)

KEYSTORE_ENV = "PUSHSIM_KEYSTORE"
DEFAULT_PASSPHRASE = "pushsim"


class KeystoreError(Exception):
    pass


def resolve_dir(configured: str | Path) -> Path:
    """The PUSHSIM_KEYSTORE environment variable overrides the configured
    key-store path."""
    return Path(os.environ.get(KEYSTORE_ENV, str(configured)))


def _derive_key(passphrase: str, salt: bytes) -> bytes:
    return sha256(b"pushsim.keystore." + salt + passphrase.encode("utf-8"))


def _encrypt_private(material: bytes, passphrase: str, salt: bytes) -> dict:
    nonce = sha256(salt + b".nonce")[:12]
    ct = crypto.aead_seal(_derive_key(passphrase, salt), nonce, material, aad=b"keystore")
    return {"salt": salt.hex(), "nonce": nonce.hex(), "ciphertext": ct.hex()}


def _decrypt_private(doc: dict, passphrase: str) -> bytes:
    salt = bytes.fromhex(doc["salt"])
    try:
        return crypto.aead_open(
            _derive_key(passphrase, salt),
            bytes.fromhex(doc["nonce"]),
            bytes.fromhex(doc["ciphertext"]),
            aad=b"keystore",
        )
    except crypto.AuthFailure as exc:
        raise KeystoreError("wrong passphrase or corrupted key store") from exc


def _write(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# TPM documents
# ---------------------------------------------------------------------------

def save_tpm(device_tpm: Tpm, directory: str | Path, passphrase: str = DEFAULT_PASSPHRASE) -> Path:
    directory = resolve_dir(directory)
    doc = device_tpm.public_state()
    doc["kind"] = "tpm"

    rng_key, rng_counter = device_tpm.rng.state()
    private_items = [
        device_tpm.identity.ek.private,
        device_tpm.owner_auth or b"",
        device_tpm.storage_key_id,
        rng_key,
        rng_counter.to_bytes(8, "big"),
    ]
    for key in device_tpm.keys.values():
        private_items.append(key.pair.key_id + key.pair.private)
    material = pack_chunks(*private_items)
    doc["private"] = _encrypt_private(material, passphrase, salt=device_tpm.tpm_id[:16])

    path = directory / f"tpm-{device_tpm.tpm_id.hex()[:16]}.json"
    _write(path, doc)
    return path


def load_tpm(path: str | Path, passphrase: str = DEFAULT_PASSPHRASE) -> Tpm:
    doc = json.loads(Path(path).read_text())
    if doc.get("kind") != "tpm":
        raise KeystoreError(f"{path} is not a TPM document")
    material = unpack_chunks(_decrypt_private(doc["private"], passphrase))
    ek_private, owner_auth, storage_key_id, rng_key, rng_counter = material[:5]
    privates = {}
    for item in material[5:]:
        privates[item[:32]] = item[32:]

    ek = KeyPair(
        public=bytes.fromhex(doc["ek_public"]),
        private=ek_private,
        key_id=sha256(bytes.fromhex(doc["ek_public"])),
    )
    bank = PcrBank()
    bank.registers = [bytes.fromhex(r) for r in doc["pcrs"]]
    log = MeasurementLog([MeasurementEvent.from_dict(e) for e in doc["log"]])
    device_tpm = Tpm(
        identity=EndorsementIdentity(ek=ek, ekc=bytes.fromhex(doc["ekc"])),
        pcrs=bank,
        log=log,
        rng=SeededRng.from_state(rng_key, int.from_bytes(rng_counter, "big")),
        suite=doc["suite"],
        owner_auth=owner_auth if doc["owned"] else None,
        engine_label=doc["engine_label"],
        storage_key_id=storage_key_id,
    )
    for entry in doc["keys"]:
        key_id = bytes.fromhex(entry["key_id"])
        public = bytes.fromhex(entry["public"])
        if key_id not in privates:
            raise KeystoreError(f"missing private half for key {entry['key_id']}")
        pair = KeyPair(public=public, private=privates[key_id], key_id=key_id)
        policy = PcrPolicy.from_dict(entry["policy"]) if entry["policy"] else None
        device_tpm.keys[key_id] = StoredKey(
            pair=pair, role=KeyRole(entry["role"]), policy=policy
        )
    return device_tpm


# ---------------------------------------------------------------------------
# PCA documents
# ---------------------------------------------------------------------------

def save_pca(pca: PrivacyCa, directory: str | Path, passphrase: str = DEFAULT_PASSPHRASE) -> Path:
    directory = resolve_dir(directory)
    pca_id = pca.keypair.key_id.hex()[:16]
    rng_key, rng_counter = pca.rng.state()
    material = pack_chunks(pca.keypair.private, rng_key, rng_counter.to_bytes(8, "big"))
    doc = {
        "kind": "pca",
        "pca_id": pca_id,
        "suite": pca.keypair.suite,
        "public": pca.public.hex(),
        "issued": pca.issued,
        "private": _encrypt_private(material, passphrase, salt=pca.keypair.key_id[:16]),
    }
    path = directory / f"pca-{pca_id}.json"
    _write(path, doc)
    return path


def load_pca(path: str | Path, passphrase: str = DEFAULT_PASSPHRASE) -> PrivacyCa:
    doc = json.loads(Path(path).read_text())
    if doc.get("kind") != "pca":
        raise KeystoreError(f"{path} is not a PCA document")
    private, rng_key, rng_counter = unpack_chunks(
        _decrypt_private(doc["private"], passphrase), expected=3
    )
    public = bytes.fromhex(doc["public"])
    pca = PrivacyCa(
        keypair=KeyPair(public=public, private=private, key_id=sha256(public)),
        rng=SeededRng.from_state(rng_key, int.from_bytes(rng_counter, "big")),
    )
    pca.issued = list(doc["issued"])
    return pca
