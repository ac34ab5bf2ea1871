import dataclasses

import pytest

from rtgov.epoch import EpochManager, MockEnclave
from rtgov.identity import (
    CredentialIssuer,
    CredentialRefused,
    InvalidReason,
    WorkloadIdentity,
    validate_credential,
)
from rtgov.keys import KeyPair

AGENT = "spiffe://clinic.example/agent/n0"


@pytest.fixture
def node_key():
    return KeyPair.from_seed("node")


@pytest.fixture
def issuer(node_key):
    iss = CredentialIssuer(node_key)
    iss.register(WorkloadIdentity.parse(AGENT))
    return iss


@pytest.fixture
def epoch():
    authority = KeyPair.from_seed("authority")
    enclave = MockEnclave("img", authority)
    mgr = EpochManager([enclave.measurement], [authority.public], ttl=1000, latency=0)
    mgr.attest(enclave.quote(b"\x01" * 32), 0)
    return mgr, enclave


class TestWorkloadIdentity:
    def test_uri_round_trip(self):
        ident = WorkloadIdentity.parse(AGENT)
        assert (ident.trust_domain, ident.path) == ("clinic.example", "/agent/n0")
        assert ident.uri == AGENT

    @pytest.mark.parametrize("bad", ["https://x/y", "spiffe://", "spiffe://domain-only", "spiffe:///path"])
    def test_rejects_malformed(self, bad):
        with pytest.raises(ValueError):
            WorkloadIdentity.parse(bad)


class TestCredentials:
    def test_valid(self, issuer, epoch):
        mgr, _ = epoch
        cred = issuer.issue(AGENT, "dosage", mgr.state, 10)
        check = validate_credential(cred, "dosage", mgr.state, 10, issuer.public)
        assert check and check.reason is None
        assert cred.epoch_id == "E-001" and cred.expiry == 1000

    def test_unknown_workload(self, issuer, epoch):
        with pytest.raises(CredentialRefused):
            issuer.issue("spiffe://clinic.example/agent/rogue", "dosage", epoch[0].state, 10)

    def test_duplicate_registration(self, issuer):
        with pytest.raises(ValueError):
            issuer.register(WorkloadIdentity.parse(AGENT))

    def test_no_credentials_when_halted(self, issuer, epoch):
        with pytest.raises(CredentialRefused):
            issuer.issue(AGENT, "dosage", epoch[0].state, 1001)

    def test_scope(self, issuer, epoch):
        cred = issuer.issue(AGENT, "dosage", epoch[0].state, 10)
        assert validate_credential(cred, "escalation", epoch[0].state, 10, issuer.public).reason is InvalidReason.SCOPE

    def test_expired(self, issuer, epoch):
        cred = issuer.issue(AGENT, "dosage", epoch[0].state, 10)
        assert validate_credential(cred, "dosage", epoch[0].state, 1000, issuer.public).reason is InvalidReason.EXPIRED

    def test_previous_epoch(self, issuer, epoch):
        mgr, enclave = epoch
        cred = issuer.issue(AGENT, "dosage", mgr.state, 10)
        mgr.attest(enclave.quote(b"\x01" * 32), 500)
        check = validate_credential(cred, "dosage", mgr.state, 600, issuer.public)
        assert check.reason is InvalidReason.EPOCH
        assert check.reason.value == "epoch-mismatch"

    def test_measurement_change(self, issuer, epoch):
        mgr, _ = epoch
        cred = issuer.issue(AGENT, "dosage", mgr.state, 10)
        other = dataclasses.replace(mgr.state, measurement=b"\x00" * 32)
        assert validate_credential(cred, "dosage", other, 10, issuer.public).reason is InvalidReason.MEASUREMENT

    @pytest.mark.parametrize("field", ["subject", "action_class", "epoch_id"])
    def test_tampered_fields(self, issuer, epoch, field):
        cred = issuer.issue(AGENT, "dosage", epoch[0].state, 10)
        forged = dataclasses.replace(cred, **{field: getattr(cred, field) + "x"})
        assert validate_credential(forged, "dosage", epoch[0].state, 10, issuer.public).reason is InvalidReason.SIGNATURE

    def test_extended_expiry_detected(self, issuer, epoch):
        cred = issuer.issue(AGENT, "dosage", epoch[0].state, 10)
        forged = dataclasses.replace(cred, expiry=cred.expiry + 10_000)
        assert not validate_credential(forged, "dosage", epoch[0].state, 10, issuer.public)

    def test_wrong_issuer_key(self, issuer, epoch):
        cred = issuer.issue(AGENT, "dosage", epoch[0].state, 10)
        other = KeyPair.from_seed("other").public
        assert validate_credential(cred, "dosage", epoch[0].state, 10, other).reason is InvalidReason.SIGNATURE
