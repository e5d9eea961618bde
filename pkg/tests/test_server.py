"""Serve-mode integration: REST endpoints and the southbound TCP listener
exercised with a scripted socket agent."""

import json
import socket
import time

import pytest
import requests

from conftest import slice_doc

from sdransim import wire
from sdransim.server import ControllerServer


@pytest.fixture
def server():
    srv = ControllerServer(rest_port=0, southbound_port=0)
    srv.start()
    yield srv
    srv.stop()


@pytest.fixture
def base(server):
    host, port = server.rest_address
    return f"http://{host}:{port}"


class SocketAgent:
    """Minimal real-socket agent speaking the frame protocol."""

    def __init__(self, server, enb_id, slicing=True):
        host, port = server.southbound_address
        self.enb_id = enb_id
        self.slicing = slicing
        self.sock = socket.create_connection((host, port))
        self.sock.settimeout(0.1)
        self.session = wire.Session()
        self.reader = wire.FrameReader()
        self.inbox = []
        self.registry = {}

    def close(self):
        self.sock.close()

    def send(self, action, body, xid=None, event_type=wire.EventType.SINGLE,
             opcode=wire.OP_SUCCESS, period_ms=0):
        msg = wire.Message(
            element_id=self.enb_id, cell_id=0,
            xid=self.session.next_xid() if xid is None else xid,
            seq=self.session.next_seq(), action=action, body=body,
            event_type=event_type, opcode=opcode, period_ms=period_ms,
        )
        self.sock.sendall(wire.encode(msg))
        return msg

    def pump(self, deadline=2.0):
        t0 = time.time()
        while time.time() - t0 < deadline:
            try:
                chunk = self.sock.recv(65536)
            except socket.timeout:
                return
            if not chunk:
                return
            self.inbox.extend(self.reader.feed(chunk))

    def wait_for(self, action, deadline=3.0):
        t0 = time.time()
        while time.time() - t0 < deadline:
            for i, msg in enumerate(self.inbox):
                if msg.action is action:
                    return self.inbox.pop(i)
            self.pump(0.2)
        raise AssertionError(f"no {action.name} within {deadline}s: "
                             f"{[m.action.name for m in self.inbox]}")

    def handshake(self):
        self.send(wire.Action.HELLO_REQ, wire.HelloReq(),
                  event_type=wire.EventType.SCHEDULED, period_ms=2000,
                  opcode=wire.OP_RETRIEVE)
        self.wait_for(wire.Action.HELLO_RESP)
        caps = self.wait_for(wire.Action.CAPS_REQ)
        self.send(wire.Action.CAPS_RESP,
                  wire.CapsResp(self.enb_id, self.slicing,
                                (wire.CellCaps(0, 3100, 21100, 50),)),
                  xid=caps.xid)
        report = self.wait_for(wire.Action.UE_REPORT_REQ)
        self.send(wire.Action.UE_REPORT_RESP, wire.UeReportResp(()),
                  xid=report.xid)

    def serve_add_slice(self):
        req = self.wait_for(wire.Action.ADD_SLICE_REQ)
        self.registry[req.body.rsi_id] = req.body.template
        self.send(wire.Action.ADD_SLICE_RESP, wire.AddSliceResp(req.body.rsi_id),
                  xid=req.xid)
        statuses = tuple(
            wire.SliceStatus(rsi, tpl.rrm_policy, True, 0)
            for rsi, tpl in sorted(self.registry.items())
        )
        self.send(wire.Action.RAN_SLICE_RESP, wire.RanSliceResp(statuses),
                  event_type=wire.EventType.TRIGGERED)


def wait_until(predicate, deadline=3.0):
    t0 = time.time()
    while time.time() - t0 < deadline:
        if predicate():
            return True
        time.sleep(0.02)
    return False


def test_register_and_handshake_over_tcp(server, base):
    assert requests.post(base + "/enbs", json={"enb_id": 1}).status_code == 201
    assert requests.post(base + "/enbs", json={"enb_id": 1}).status_code == 200
    agent = SocketAgent(server, 1)
    try:
        agent.handshake()
        assert wait_until(
            lambda: requests.get(base + "/enbs").json()[0]["state"] == "synced"
        )
        enb = requests.get(base + "/enbs").json()[0]
        assert enb["cells"][0]["n_prb"] == 50
        assert enb["slicing_supported"] is True
    finally:
        agent.close()


def test_unregistered_agent_connection_dropped(server, base):
    agent = SocketAgent(server, 99)
    try:
        agent.send(wire.Action.HELLO_REQ, wire.HelloReq(),
                   event_type=wire.EventType.SCHEDULED, period_ms=2000)
        agent.pump(0.5)
        assert agent.inbox == []
        # connection should be closed by the controller
        agent.sock.settimeout(1.0)
        try:
            data = agent.sock.recv(1024)
        except (socket.timeout, OSError):
            data = b"stalled"
        assert data == b""
    finally:
        agent.close()


def test_slice_commission_via_rest(server, base):
    requests.post(base + "/enbs", json={"enb_id": 1})
    agent = SocketAgent(server, 1)
    try:
        agent.handshake()
        wait_until(
            lambda: requests.get(base + "/enbs").json()[0]["state"] == "synced"
        )
        resp = requests.post(base + "/slices", json=slice_doc()["template"])
        assert resp.status_code == 202
        job_id = resp.json()["job_id"]
        agent.serve_add_slice()
        assert wait_until(
            lambda: requests.get(base + "/slices/1").json()["state"] == "active"
        )
        assert requests.get(base + f"/jobs/{job_id}").json()["state"] == "done"
        # measurements flow in over TCP and out over REST
        agent.send(wire.Action.SLICE_MEAS,
                   wire.SliceMeas(1, 50000, 1745, 0, 0, 1000),
                   event_type=wire.EventType.SCHEDULED, period_ms=1000)
        assert wait_until(
            lambda: requests.get(base + "/slices/1/measurements").json()
        )
        meas = requests.get(base + "/slices/1/measurements").json()
        assert meas[0]["dl_prb_used"] == 1745
        # lifecycle via REST
        assert requests.post(base + "/slices/1/deactivate").status_code == 200
        assert requests.post(base + "/slices/1/activate").status_code == 200
        assert requests.delete(base + "/slices/1").status_code == 202
        assert requests.get(base + "/slices/1").json()["state"] == "decommissioned"
    finally:
        agent.close()


def test_rest_validation_errors(server, base):
    # unknown cell: nothing synced yet
    resp = requests.post(base + "/slices", json=slice_doc()["template"])
    assert resp.status_code == 400
    body = resp.json()
    assert body["code"] == "validation"
    assert "cell" in body["message"]
    # malformed document carries the field path
    resp = requests.post(base + "/slices", json={"rsi_id": 1})
    assert resp.status_code == 400
    assert "plmn_list" in resp.json()["message"]
    # unknown slice
    assert requests.get(base + "/slices/42").status_code == 404
    assert requests.delete(base + "/slices/42").status_code == 404
    # bad state transitions
    assert requests.post(base + "/slices/42/activate").status_code == 404


def test_rest_auth_token():
    srv = ControllerServer(rest_port=0, southbound_port=0, token="sesame")
    srv.start()
    try:
        host, port = srv.rest_address
        base = f"http://{host}:{port}"
        assert requests.get(base + "/enbs").status_code == 401
        ok = requests.get(base + "/enbs",
                          headers={"Authorization": "Bearer sesame"})
        assert ok.status_code == 200
    finally:
        srv.stop()


def test_cli_client_commands_against_live_controller(server, base, tmp_path,
                                                     monkeypatch):
    from click.testing import CliRunner
    from sdransim import cli

    monkeypatch.setenv("SDRANSIM_URL", base)
    runner = CliRunner()

    result = runner.invoke(cli.main, ["enb", "add", "1"])
    assert result.exit_code == 0, result.output

    agent = SocketAgent(server, 1)
    try:
        agent.handshake()
        wait_until(
            lambda: requests.get(base + "/enbs").json()[0]["state"] == "synced"
        )
        # a malformed template is refused with the offending field path
        bad = tmp_path / "bad.tpl"
        bad.write_text(json.dumps({"rsi_id": 1, "plmn_list": ["21491"],
                                   "cell_list": [{"enb_id": 1}]}))
        result = runner.invoke(cli.main, ["slice", "add", str(bad)])
        assert result.exit_code == 1
        assert "cell_list[0]" in result.output

        good = tmp_path / "good.tpl"
        good.write_text(json.dumps(slice_doc()["template"]))
        result = runner.invoke(cli.main, ["slice", "add", str(good)])
        assert result.exit_code == 0, result.output
        agent.serve_add_slice()
        wait_until(
            lambda: requests.get(base + "/slices/1").json()["state"] == "active"
        )
        result = runner.invoke(cli.main, ["slice", "list"])
        assert result.exit_code == 0
        assert '"state": "active"' in result.output

        agent.send(wire.Action.SLICE_MEAS,
                   wire.SliceMeas(1, 50000, 1745, 0, 0, 1000),
                   event_type=wire.EventType.SCHEDULED, period_ms=1000)
        wait_until(
            lambda: requests.get(base + "/slices/1/measurements").json()
        )
        result = runner.invoke(cli.main, ["measurements", "1"])
        assert result.exit_code == 0
        assert "1745" in result.output

        result = runner.invoke(cli.main, ["enb", "list"])
        assert result.exit_code == 0
        assert '"state": "synced"' in result.output

        result = runner.invoke(cli.main, ["slice", "delete", "1"])
        assert result.exit_code == 0
    finally:
        agent.close()


def test_ues_endpoint_reflects_reports(server, base):
    requests.post(base + "/enbs", json={"enb_id": 1})
    agent = SocketAgent(server, 1)
    try:
        agent.handshake()
        from sdransim.policy import NasId
        agent.send(
            wire.Action.UE_REPORT_RESP,
            wire.UeReportResp((
                wire.UeRecord(0, "21491", NasId("imsi", "214910000000001"),
                              0x46, (wire.DrbInfo(1, 7, 9),)),
            )),
            event_type=wire.EventType.TRIGGERED,
        )
        assert wait_until(lambda: requests.get(base + "/ues").json())
        ue = requests.get(base + "/ues").json()[0]
        assert ue["rnti"] == 0x46
        assert ue["drbs"] == [{"qci": 7, "arp": 9}]
    finally:
        agent.close()
