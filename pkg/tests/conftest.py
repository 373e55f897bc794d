"""Shared world construction for protocol-level tests."""

from dataclasses import dataclass

import pytest

from pushsim import crypto, netsim, protocol
from pushsim.crypto import KeyPair, KeyRole, SeededRng
from pushsim.netsim import CENTRALISED, Network
from pushsim.privacy_ca import PrivacyCa
from pushsim.protocol import Device, DataSource, ReferenceMeasurementDb, SyncServer
from pushsim.tpm import manufacture

AUTH = b"owner secret"

BOOT_COMPONENTS = [("bios", 0), ("bootloader", 1), ("os_kernel", 2)]
APP_COMPONENT = ("email_app", 10)


@dataclass
class World:
    root: KeyPair
    pca: PrivacyCa
    device: Device
    server: SyncServer
    source: DataSource
    net: Network

    def enroll(self):
        protocol.provision_aik(self.device, self.pca, self.net, self.root.public)
        return self


def build_world(seed=1, topology=CENTRALISED, selection=frozenset({10}), measure_app=True):
    rng = SeededRng(seed)
    root = crypto.keygen(rng.fork("manufacturer").random_bytes(32), KeyRole.CA)
    net = Network(topology)
    pca = PrivacyCa.create(rng.fork("pca"), clock=net.clock)

    tpm = manufacture(rng.fork("tpm"), root.private)
    tpm.take_ownership(AUTH)
    entries = {}
    for name, idx in BOOT_COMPONENTS:
        code = rng.fork(f"code.{name}").random_bytes(64)
        tpm.measure(idx, name, code)
        entries[name] = frozenset({crypto.sha256(code)})
    app_code = rng.fork("code.email_app").random_bytes(64)
    if measure_app:
        tpm.measure(APP_COMPONENT[1], APP_COMPONENT[0], app_code)
    entries[APP_COMPONENT[0]] = frozenset({crypto.sha256(app_code)})

    device = Device(
        tpm=tpm,
        auth=AUTH,
        user_id="alice",
        rng=rng.fork("device"),
        seal_selection=selection,
        app_measured=measure_app,
    )
    server = SyncServer(
        reference_db=ReferenceMeasurementDb(
            entries=entries, required_components=(APP_COMPONENT[0],)
        ),
        pca_public=pca.public,
        rng=rng.fork("server"),
    )
    return World(root=root, pca=pca, device=device, server=server, source=DataSource(), net=net)


@pytest.fixture
def world():
    return build_world().enroll()
