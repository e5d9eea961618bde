"""Operator CLI: scenario runs, the built-in admission-control replay,
a standalone controller, REST client subcommands, and the wire-trace
renderer.

Exit codes: 0 success, 1 scenario/request failure, 2 invalid spec or
document.
"""

from __future__ import annotations

import json
import os
import sys

import click
import requests

from . import scenario, wire
from .policy import DocumentError
from .scenario import SpecError
from .server import TOKEN_ENV, ControllerServer

URL_ENV = "SDRANSIM_URL"
DEFAULT_URL = "http://127.0.0.1:8080"


@click.group()
def main() -> None:
    """Desk-scale SD-RAN slicing control plane with a simulated RAN."""


def _write(path: str, content: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(content)


def _print_outcomes(sim: scenario.SimRun) -> None:
    click.echo(f"{'UE':<28} {'RNTI':>6} {'slice':>5} {'path':>8} "
               f"{'outcome':>8} {'rrc ms':>7} {'total ms':>9} {'ac rtt':>7}")
    for o in sim.outcomes():
        verdict = "pending" if o["accepted"] is None else (
            "accept" if o["accepted"] else "reject")
        click.echo(
            f"{o['nas_id']:<28} {o['rnti']:#06x} "
            f"{o['rsi_id'] if o['rsi_id'] is not None else '-':>5} "
            f"{o['decision_path']:>8} "
            f"{verdict:>8} "
            f"{o['rrc_setup_ms'] if o['rrc_setup_ms'] is not None else '-':>7} "
            f"{o['registration_ms'] if o['registration_ms'] is not None else '-':>9} "
            f"{o['ac_rtt_ms'] if o['ac_rtt_ms'] is not None else '-':>7}"
        )


def _execute(spec: scenario.ScenarioSpec, out, events, wire_log, tti_trace) -> int:
    sim = scenario.run(spec, collect_tti=bool(tti_trace))
    if out:
        _write(out, sim.report_json())
        click.echo(f"report written to {out}")
    if events:
        _write(events, sim.events_jsonl())
    if wire_log:
        _write(wire_log, sim.wire_jsonl())
    if tti_trace:
        _write(tti_trace, sim.tti_jsonl())
    _print_outcomes(sim)
    if sim.provisioning_errors:
        for err in sim.provisioning_errors:
            click.echo(f"provisioning error at t={err['t']}: {err['error']}", err=True)
        return 1
    return 0


@main.command("run")
@click.argument("spec_file", type=click.Path(exists=True))
@click.option("--out", type=click.Path(), help="Write the JSON report here.")
@click.option("--events", type=click.Path(), help="Write the event log (JSONL).")
@click.option("--wire-log", type=click.Path(), help="Write the wire trace (JSONL).")
@click.option("--tti-trace", type=click.Path(), help="Write per-TTI allocations (JSONL).")
def run_cmd(spec_file, out, events, wire_log, tti_trace) -> None:
    """Execute a scenario file and write its report."""
    try:
        spec = scenario.load_spec(spec_file)
    except (SpecError, DocumentError) as exc:
        click.echo(f"invalid spec: {exc}", err=True)
        sys.exit(2)
    sys.exit(_execute(spec, out, events, wire_log, tti_trace))


@main.command("replay-paper")
@click.option("--out", type=click.Path(), help="Write the JSON report here.")
@click.option("--events", type=click.Path(), help="Write the event log (JSONL).")
@click.option("--wire-log", type=click.Path(), help="Write the wire trace (JSONL).")
def replay_paper(out, events, wire_log) -> None:
    """Run the built-in admission-control reproduction scenario."""
    spec = scenario.section_v_spec()
    sim = scenario.run(spec)
    if out:
        _write(out, sim.report_json())
    if events:
        _write(events, sim.events_jsonl())
    if wire_log:
        _write(wire_log, sim.wire_jsonl())
    _print_outcomes(sim)
    outcomes = sim.outcomes()
    expected = [(True, "local"), (True, "central"), (False, "central")]
    got = [(o["accepted"], o["decision_path"]) for o in outcomes]
    if got != expected:
        click.echo(f"unexpected outcomes: {got}", err=True)
        sys.exit(1)
    counts = sim.wire_counts()
    click.echo(f"wire: {counts}")
    sys.exit(0)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--rest-port", default=8080, show_default=True)
@click.option("--southbound-port", default=4433, show_default=True)
@click.option("--journal", type=click.Path(), help="Append-only state journal.")
def serve(host, rest_port, southbound_port, journal) -> None:
    """Start a standalone controller (REST + southbound listener)."""
    server = ControllerServer(
        host=host,
        rest_port=rest_port,
        southbound_port=southbound_port,
        journal_path=journal,
    )
    rest = server.rest_address
    south = server.southbound_address
    click.echo(f"REST on http://{rest[0]}:{rest[1]}, southbound on {south[0]}:{south[1]}")
    server.serve_forever()


# ----------------------------------------------------------------------
# REST client subcommands


def _client(url):
    base = url or os.environ.get(URL_ENV, DEFAULT_URL)
    headers = {}
    token = os.environ.get(TOKEN_ENV)
    if token:
        headers["Authorization"] = f"Bearer {token}"
    return base.rstrip("/"), headers


def _request(method: str, url: str, path: str, payload=None) -> dict:
    base, headers = _client(url)
    resp = requests.request(method, base + path, json=payload, headers=headers,
                            timeout=10)
    try:
        body = resp.json()
    except ValueError:
        body = {"code": "bad-response", "message": resp.text}
    if resp.status_code >= 400:
        click.echo(f"error {resp.status_code}: {body.get('code')}: "
                   f"{body.get('message')}", err=True)
        sys.exit(1)
    return body


_url_option = click.option("--url", default=None, help=f"Controller URL "
                           f"(default {DEFAULT_URL} or ${URL_ENV}).")


@main.group("slice")
def slice_group() -> None:
    """Slice lifecycle against a live controller."""


@slice_group.command("add")
@click.argument("template_file", type=click.Path(exists=True))
@_url_option
def slice_add(template_file, url) -> None:
    try:
        with open(template_file, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        click.echo(f"invalid template document: {exc}", err=True)
        sys.exit(2)
    body = _request("POST", url, "/slices", doc)
    click.echo(json.dumps(body))


@slice_group.command("update")
@click.argument("rsi_id", type=int)
@click.argument("policy_file", type=click.Path(exists=True))
@_url_option
def slice_update(rsi_id, policy_file, url) -> None:
    try:
        with open(policy_file, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        click.echo(f"invalid policy document: {exc}", err=True)
        sys.exit(2)
    click.echo(json.dumps(_request("PUT", url, f"/slices/{rsi_id}", doc)))


@slice_group.command("delete")
@click.argument("rsi_id", type=int)
@_url_option
def slice_delete(rsi_id, url) -> None:
    click.echo(json.dumps(_request("DELETE", url, f"/slices/{rsi_id}")))


@slice_group.command("list")
@_url_option
def slice_list(url) -> None:
    click.echo(json.dumps(_request("GET", url, "/slices"), indent=2, sort_keys=True))


@main.group("enb")
def enb_group() -> None:
    """eNB inventory against a live controller."""


@enb_group.command("add")
@click.argument("enb_id", type=int)
@_url_option
def enb_add(enb_id, url) -> None:
    click.echo(json.dumps(_request("POST", url, "/enbs", {"enb_id": enb_id})))


@enb_group.command("list")
@_url_option
def enb_list(url) -> None:
    click.echo(json.dumps(_request("GET", url, "/enbs"), indent=2, sort_keys=True))


@main.command()
@click.argument("rsi_id", type=int)
@click.option("--since", default=0, show_default=True)
@_url_option
def measurements(rsi_id, since, url) -> None:
    """Fetch a slice's measurement series from a live controller."""
    body = _request("GET", url, f"/slices/{rsi_id}/measurements?since={since}")
    click.echo(json.dumps(body, indent=2, sort_keys=True))


@main.command("trace-dump")
@click.argument("trace_file", type=click.Path(exists=True))
def trace_dump(trace_file) -> None:
    """Render a wire trace (JSONL with a hex field, or raw hex lines)."""
    failures = 0
    with open(trace_file, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            meta = ""
            if line.startswith("{"):
                rec = json.loads(line)
                meta = f"[t={rec.get('t')} {rec.get('src')} -> {rec.get('dst')}] "
                payload = rec.get("hex", "")
            else:
                payload = line
            try:
                rendered = wire.format_frame(bytes.fromhex(payload))
            except (ValueError, wire.WireError) as exc:
                click.echo(f"line {line_no}: undecodable frame: {exc}", err=True)
                failures += 1
                continue
            click.echo(meta + rendered)
            click.echo("")
    sys.exit(1 if failures else 0)


if __name__ == "__main__":  # pragma: no cover
    main()
