from __future__ import annotations

import pytest
from fastapi.testclient import TestClient

from ascend.service import create_app

CONFIG_DOC = {
    "name": "svc-test",
    "experiment_id": "exp1",
    "space": {
        "elements": [
            {"name": "headline", "values": ["a", "b", "c"]},
            {"name": "button", "values": ["x", "y"]},
        ]
    },
    "evolution": {
        "population_size": 3,
        "maturity_age": 5,
        "max_generations": 3,
        "rng_seed": 42,
        "control_holdout_fraction": 0.1,
    },
}


@pytest.fixture()
def client(tmp_path):
    with TestClient(create_app(tmp_path)) as c:
        yield c


def create(client, doc=None):
    response = client.post("/experiments", json=doc or CONFIG_DOC)
    assert response.status_code == 201, response.text
    return response.json()


def fill_generation(client, experiment_id="exp1", offset=0):
    """Assign fresh users until every active candidate matures."""
    for i in range(2000):
        user = f"bulk-{offset}-{i}"
        client.post(
            f"/experiments/{experiment_id}/assign", json={"user_id": user}
        )
        status = client.get(f"/experiments/{experiment_id}/status").json()
        if all(v == 0 for v in status["maturity_remaining"].values()):
            return
    raise AssertionError("maturity never filled")


class TestLifecycle:
    def test_create_reports_space_size(self, client):
        body = create(client)
        assert body == {
            "experiment_id": "exp1",
            "status": "draft",
            "space_size": 6,
        }

    def test_create_generates_id_when_missing(self, client):
        doc = {k: v for k, v in CONFIG_DOC.items() if k != "experiment_id"}
        body = create(client, doc)
        assert body["experiment_id"]

    def test_duplicate_id_conflicts(self, client):
        create(client)
        response = client.post("/experiments", json=CONFIG_DOC)
        assert response.status_code == 409

    def test_invalid_space_rejected_with_field_detail(self, client):
        doc = {
            "name": "bad",
            "space": {"elements": [{"name": "solo", "values": ["only"]}]},
        }
        response = client.post("/experiments", json=doc)
        assert response.status_code == 400
        assert "length >= 2" in response.json()["detail"]

    def test_invalid_evolution_rejected(self, client):
        doc = dict(CONFIG_DOC, evolution={"population_size": 1})
        doc.pop("experiment_id", None)
        response = client.post("/experiments", json=doc)
        assert response.status_code == 400
        assert "population_size" in response.json()["detail"]

    def test_start_seeds_control_plus_neighbors(self, client):
        create(client)
        response = client.post("/experiments/exp1/start")
        assert response.status_code == 200
        # control + (3-1) + (2-1) neighbors
        assert response.json()["population"] == 4

    def test_double_start_conflicts(self, client):
        create(client)
        client.post("/experiments/exp1/start")
        assert client.post("/experiments/exp1/start").status_code == 409

    def test_unknown_experiment_404(self, client):
        assert client.get("/experiments/nope/status").status_code == 404

    def test_list_experiments(self, client):
        create(client)
        body = client.get("/experiments").json()
        assert [e["experiment_id"] for e in body] == ["exp1"]
        assert body[0]["status"] == "draft"

    def test_stop_and_reject_after(self, client):
        create(client)
        client.post("/experiments/exp1/start")
        assert client.post("/experiments/exp1/stop").status_code == 200
        response = client.post(
            "/experiments/exp1/assign", json={"user_id": "u"}
        )
        assert response.status_code == 409


class TestAssignConvert:
    def test_assign_returns_design(self, client):
        create(client)
        client.post("/experiments/exp1/start")
        body = client.post(
            "/experiments/exp1/assign", json={"user_id": "alice"}
        ).json()
        assert set(body) == {"candidate_id", "design", "sticky_until"}
        assert set(body["design"]) == {"headline", "button"}

    def test_assign_before_start_conflicts(self, client):
        create(client)
        response = client.post(
            "/experiments/exp1/assign", json={"user_id": "alice"}
        )
        assert response.status_code == 409

    def test_sticky_across_requests(self, client):
        create(client)
        client.post("/experiments/exp1/start")
        first = client.post(
            "/experiments/exp1/assign", json={"user_id": "alice"}
        ).json()
        second = client.post(
            "/experiments/exp1/assign", json={"user_id": "alice"}
        ).json()
        assert second["candidate_id"] == first["candidate_id"]

    def test_idempotency_key_replays_response(self, client):
        create(client)
        client.post("/experiments/exp1/start")
        headers = {"idempotency-key": "req-1"}
        first = client.post(
            "/experiments/exp1/assign", json={"user_id": "alice"},
            headers=headers,
        ).json()
        again = client.post(
            "/experiments/exp1/assign", json={"user_id": "alice"},
            headers=headers,
        ).json()
        assert again == first

    def test_conversion_attribution_and_idempotency(self, client):
        create(client)
        client.post("/experiments/exp1/start")
        assigned = client.post(
            "/experiments/exp1/assign", json={"user_id": "alice"}
        ).json()
        first = client.post(
            "/experiments/exp1/convert", json={"user_id": "alice"}
        ).json()
        assert first == {
            "attributed": True,
            "candidate_id": assigned["candidate_id"],
        }
        client.post("/experiments/exp1/convert", json={"user_id": "alice"})
        report = client.get("/experiments/exp1/report").json()
        total = sum(r["conversions"] for r in report["top_candidates"])
        if report["control"]:
            total += report["control"]["conversions"]
        assert total == 1

    def test_unassigned_conversion_unattributed(self, client):
        create(client)
        client.post("/experiments/exp1/start")
        body = client.post(
            "/experiments/exp1/convert", json={"user_id": "stranger"}
        ).json()
        assert body == {"attributed": False}


class TestAdvance:
    def test_premature_advance_lists_shortfalls(self, client):
        create(client)
        client.post("/experiments/exp1/start")
        response = client.post("/experiments/exp1/advance")
        assert response.status_code == 409
        detail = response.json()["detail"]
        assert "remaining_impressions" in detail
        assert all(v > 0 for v in detail["remaining_impressions"].values())

    def test_advance_after_maturity(self, client):
        create(client)
        client.post("/experiments/exp1/start")
        fill_generation(client)
        body = client.post("/experiments/exp1/advance").json()
        assert body["generation"] == 1
        assert len(body["retained_ids"]) == 3
        assert not body["stopped"]

    def test_generation_limit_stops(self, client):
        create(client)
        client.post("/experiments/exp1/start")
        for generation in range(3):
            fill_generation(client, offset=generation)
            body = client.post("/experiments/exp1/advance").json()
        assert body["stopped"]
        assert body["stop_reason"] == "generations"
        status = client.get("/experiments/exp1/status").json()
        assert status["status"] == "stopped"


class TestReport:
    def test_report_shape(self, client):
        create(client)
        client.post("/experiments/exp1/start")
        fill_generation(client)
        body = client.get("/experiments/exp1/report").json()
        assert body["experiment"] == "svc-test"
        assert body["status"] == "running"
        rows = body["top_candidates"]
        assert rows
        rates = [r["rate"] for r in rows]
        assert rates == sorted(rates, reverse=True)
        for row in rows:
            assert row["ci_low"] <= row["rate"] <= row["ci_high"]
            assert isinstance(row["significant_95"], bool)
        assert "multiple comparisons" in body["note"]

    def test_top_parameter_limits_rows(self, client):
        create(client)
        client.post("/experiments/exp1/start")
        fill_generation(client)
        body = client.get("/experiments/exp1/report?top=1").json()
        assert len(body["top_candidates"]) == 1


class TestRestart:
    def test_state_survives_process_restart(self, tmp_path):
        with TestClient(create_app(tmp_path)) as client:
            create(client)
            client.post("/experiments/exp1/start")
            for i in range(40):
                client.post(
                    "/experiments/exp1/assign", json={"user_id": f"u{i}"}
                )
                if i % 3 == 0:
                    client.post(
                        "/experiments/exp1/convert", json={"user_id": f"u{i}"}
                    )
            before = client.get("/experiments/exp1/report").json()
            status_before = client.get("/experiments/exp1/status").json()

        # a brand-new app over the same data dir replays the log
        with TestClient(create_app(tmp_path)) as client:
            after = client.get("/experiments/exp1/report").json()
            status_after = client.get("/experiments/exp1/status").json()
            assert after == before
            assert status_after == status_before
            # and keeps serving: sticky assignments survived too
            repeat = client.post(
                "/experiments/exp1/assign", json={"user_id": "u0"}
            )
            assert repeat.status_code == 200
