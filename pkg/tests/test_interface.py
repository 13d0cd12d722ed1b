from __future__ import annotations

import json
import time

import pytest
from fastapi.testclient import TestClient

from infradiag.cli import main
from infradiag.corpus import HashingEmbedder, IncidentStore, KnowledgeBase
from infradiag.service import ServiceResources, create_app
from infradiag.taxonomy import Taxonomy
from infradiag.verify import ScriptRegistry

PROVIDER = HashingEmbedder()


def diagnose_argv(fixtures_dir, name: str, trace_path, extra=()):
    directory = fixtures_dir / "golden" / name
    return [
        "diagnose",
        "--incident", str(directory / "incident.json"),
        "--taxonomy", str(fixtures_dir / "taxonomy.json"),
        "--registry", str(fixtures_dir / "registry.json"),
        "--corpus", str(fixtures_dir / "golden" / "corpus.jsonl"),
        "--vectors", str(fixtures_dir / "golden" / "corpus.vec"),
        "--kb", str(fixtures_dir / "kb.jsonl"),
        "--env", f"sim:{directory / 'scenario.json'}",
        "--llm", f"replay:{directory / 'replay.jsonl'}",
        "--trace", str(trace_path),
        *extra,
    ]


class TestCli:
    def test_diagnose_happy_path_writes_trace(self, fixtures_dir, tmp_path, capsys):
        trace = tmp_path / "trace.jsonl"
        code = main(diagnose_argv(fixtures_dir, "example1", trace))
        assert code == 0
        out = capsys.readouterr().out
        assert "RESOLVED (pipeline 2)" in out
        assert trace.read_bytes() == (fixtures_dir / "golden" / "example1" / "trace.jsonl").read_bytes()

    def test_missing_incident_is_usage_error(self):
        with pytest.raises(SystemExit) as err:
            main(["diagnose", "--taxonomy", "x.json"])
        assert err.value.code == 2

    def test_unknown_llm_spec_is_operational_error(self, fixtures_dir, tmp_path, capsys):
        argv = diagnose_argv(fixtures_dir, "example1", tmp_path / "t.jsonl")
        argv[argv.index("--llm") + 1] = "magic"
        assert main(argv) == 1
        assert "error:" in capsys.readouterr().err

    def test_escalation_writes_ticket(self, fixtures_dir, tmp_path):
        ticket = tmp_path / "ticket.json"
        code = main(
            diagnose_argv(fixtures_dir, "escalation", tmp_path / "t.jsonl", extra=["--ticket", str(ticket)])
        )
        assert code == 0
        doc = json.loads(ticket.read_text())
        assert len(doc["tested_hypotheses"]) == 2

    def test_evaluate_clean_suite_reports_perfect_micro(self, fixtures_dir, tmp_path, capsys):
        out = tmp_path / "report.json"
        code = main(
            ["evaluate", "--config", str(fixtures_dir / "synthetic" / "experiment.json"), "--out", str(out)]
        )
        assert code == 0
        report = json.loads(out.read_text())
        assert report["micro_f1"] == 1.0
        assert "micro F1 = 1.000" in capsys.readouterr().out

    def test_ingest_build_extract_round_trip(self, fixtures_dir, tmp_path):
        raw = fixtures_dir / "synthetic" / "corpus.jsonl"
        corpus = tmp_path / "corpus.jsonl"
        vectors = tmp_path / "corpus.vec"
        assert main(["ingest", "--input", str(raw), "--corpus", str(corpus), "--vectors", str(vectors)]) == 0
        assert corpus.exists() and vectors.exists()

        taxonomy_out = tmp_path / "taxonomy.json"
        assert (
            main(
                [
                    "build-taxonomy",
                    "--corpus", str(corpus),
                    "--vectors", str(vectors),
                    "--llm", f"replay:{fixtures_dir / 'synthetic' / 'build_replay.jsonl'}",
                    "--tsg", str(fixtures_dir / "tsg_labels.json"),
                    "--out", str(taxonomy_out),
                ]
            )
            == 0
        )
        built = Taxonomy.load_file(taxonomy_out)
        assert built.lookup("GPU.MEMORY.ECC Error") is not None
        assert built.lookup("GPU.HARDWARE.Overheating") is not None  # TSG-derived

        drafts_out = tmp_path / "drafts.json"
        assert (
            main(
                [
                    "extract-checks",
                    "--corpus", str(corpus),
                    "--vectors", str(vectors),
                    "--llm", f"replay:{fixtures_dir / 'synthetic' / 'extract_replay.jsonl'}",
                    "--out", str(drafts_out),
                ]
            )
            == 0
        )
        report = json.loads(drafts_out.read_text())
        assert any(d["status"] == "quarantined" for d in report["drafts"])


@pytest.fixture()
def service_client(fixtures_dir):
    resources = ServiceResources(
        taxonomy=Taxonomy.load_file(fixtures_dir / "taxonomy.json"),
        registry=ScriptRegistry.from_file(fixtures_dir / "registry.json"),
        store=IncidentStore.load(
            fixtures_dir / "golden" / "corpus.jsonl", fixtures_dir / "golden" / "corpus.vec", PROVIDER
        ),
        kb=KnowledgeBase.load(fixtures_dir / "kb.jsonl", PROVIDER),
        provider=PROVIDER,
        fixtures_dir=fixtures_dir,
    )
    with TestClient(create_app(resources)) as client:
        yield client


def start_session(client, fixtures_dir, name: str, replay_name="replay.jsonl", feedback_rounds=None):
    incident = json.loads((fixtures_dir / "golden" / name / "incident.json").read_text())
    body = {
        "incident": incident,
        "scenario": f"golden/{name}/scenario.json",
        "replay": f"golden/{name}/{replay_name}",
    }
    if feedback_rounds is not None:
        body["feedback_rounds"] = feedback_rounds
    response = client.post("/sessions", json=body)
    assert response.status_code == 201, response.text
    return response.json()["id"]


def wait_for(client, session_id, predicate, timeout=10.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        view = client.get(f"/sessions/{session_id}").json()
        if predicate(view):
            return view
        time.sleep(0.02)
    raise AssertionError(f"timed out waiting on session {session_id}")


class TestService:
    def test_full_session_stream_matches_cli_trace(self, service_client, fixtures_dir):
        session_id = start_session(service_client, fixtures_dir, "example1")
        view = wait_for(service_client, session_id, lambda v: v["status"] == "finished")
        assert view["outcome"]["status"] == "resolved"
        assert view["outcome"]["resolving_pipeline"] == 2

        with service_client.stream("GET", f"/sessions/{session_id}/trace") as response:
            lines = [l for l in response.iter_lines() if l and not l.startswith(":")]
        expected = (fixtures_dir / "golden" / "example1" / "trace.jsonl").read_text().splitlines()
        assert lines == expected

    def test_long_poll_fallback(self, service_client, fixtures_dir):
        session_id = start_session(service_client, fixtures_dir, "example2")
        wait_for(service_client, session_id, lambda v: v["status"] == "finished")
        body = service_client.get(f"/sessions/{session_id}/trace", params={"stream": 0}).json()
        assert body["finished"] is True
        assert body["cursor"] == len(body["events"])
        assert json.loads(body["events"][0])["type"] == "session_started"

    def test_unknown_session_404(self, service_client):
        response = service_client.get("/sessions/nope")
        assert response.status_code == 404
        assert response.json()["error"]["code"] == "unknown_session"

    def test_feedback_outside_awaiting_is_409(self, service_client, fixtures_dir):
        session_id = start_session(service_client, fixtures_dir, "example1")
        wait_for(service_client, session_id, lambda v: v["status"] == "finished")
        response = service_client.post(f"/sessions/{session_id}/feedback", json={"action": "decline"})
        assert response.status_code == 409

    def test_feedback_round_trip_to_ticket(self, service_client, fixtures_dir):
        session_id = start_session(
            service_client, fixtures_dir, "escalation", replay_name="replay_feedback.jsonl", feedback_rounds=2
        )
        wait_for(service_client, session_id, lambda v: v["status"] == "awaiting_feedback")
        response = service_client.post(
            f"/sessions/{session_id}/feedback",
            json={"action": "text", "text": "suggestion 1 did not help"},
        )
        assert response.status_code == 202
        wait_for(service_client, session_id, lambda v: v["status"] == "awaiting_feedback")
        response = service_client.post(f"/sessions/{session_id}/feedback", json={"action": "decline"})
        assert response.status_code == 202
        view = wait_for(service_client, session_id, lambda v: v["status"] == "finished")
        assert view["outcome"]["status"] == "escalated"

        ticket = service_client.get(f"/sessions/{session_id}/ticket")
        assert ticket.status_code == 200
        assert ticket.json()["feedback"] == ["suggestion 1 did not help"]

    def test_ticket_404_when_resolved(self, service_client, fixtures_dir):
        session_id = start_session(service_client, fixtures_dir, "example1")
        wait_for(service_client, session_id, lambda v: v["status"] == "finished")
        assert service_client.get(f"/sessions/{session_id}/ticket").status_code == 404

    def test_taxonomy_endpoint_serves_published_tree(self, service_client, fixtures_dir):
        doc = service_client.get("/taxonomy").json()
        assert doc == json.loads((fixtures_dir / "taxonomy.json").read_text())

    def test_bad_fixture_path_rejected(self, service_client):
        response = service_client.post(
            "/sessions",
            json={"incident": {"description": "x"}, "replay": "../../etc/passwd"},
        )
        assert response.status_code == 400
