import numpy as np
import pytest
from fastapi.testclient import TestClient

from tsal.alloop import LoopConfig, metrics_csv_text, run_simulation
from tsal.service import create_app
from tsal.synth import DatasetScale, ShiftConfig, generate

SCALE = DatasetScale(
    n_images_src=2,
    n_images_tgt=3,
    n_animals_src=24,
    n_animals_tgt=9,
    n_fp_src=60,
)
SHIFT = ShiftConfig(d=8)


@pytest.fixture(scope="module")
def dataset():
    return generate(shift=SHIFT, scale=SCALE, seed=11)


@pytest.fixture()
def client(dataset):
    return TestClient(create_app(dataset))


def gt_index(dataset):
    by_image = {}
    for p in dataset.target.gt:
        by_image.setdefault(p.image_id, []).append(p)
    return by_image


def answer_from_ground_truth(window, gt_points):
    """The points a faithful annotator would click: every animal in view."""
    return [
        {"px": p.px, "py": p.py}
        for p in gt_points
        if window["r_x"] <= p.px <= window["r_x"] + window["r_w"]
        and window["r_y"] <= p.py <= window["r_y"] + window["r_h"]
    ]


def drive_session(client, run_id, by_image):
    """Label every queried window with the ground truth it contains."""
    n = 0
    while True:
        r = client.get(f"/runs/{run_id}/next")
        if r.status_code == 204:
            return n
        assert r.status_code == 200
        q = r.json()
        points = answer_from_ground_truth(q["rect"], by_image.get(q["image_id"], []))
        r = client.post(
            f"/runs/{run_id}/label",
            json={"window_id": q["window_id"], "animal_points": points},
        )
        assert r.status_code == 200, r.text
        assert r.json()["accepted"] is True
        n += 1


CFG = dict(
    criterion="transfer_sampling",
    mode="adaptive",
    iterations=2,
    queries_per_iteration=4,
    seed=5,
)


class TestSessionEquivalence:
    def test_ground_truth_session_matches_simulated_run(self, dataset, client):
        sim = run_simulation(dataset, LoopConfig(**CFG))
        run_id = client.post("/runs", json=CFG).json()["run_id"]
        n = drive_session(client, run_id, gt_index(dataset))
        assert n == 8
        m = client.get(f"/runs/{run_id}/metrics").json()
        assert m["status"] == "finished"
        assert m["csv"] == metrics_csv_text(sim.rows)
        got_rows = [
            (r["iteration"], r["queries"], r["cumulative_found"], r["recall"])
            for r in m["rows"]
        ]
        want_rows = [
            (r.iteration, r.queries, r.cumulative_found, r.recall) for r in sim.rows
        ]
        assert got_rows == want_rows

    def test_static_and_random_criteria_also_match(self, dataset, client):
        for crit in ("max_confidence", "random"):
            cfg = dict(CFG, criterion=crit, mode="static", seed=9)
            sim = run_simulation(dataset, LoopConfig(**cfg))
            run_id = client.post("/runs", json=cfg).json()["run_id"]
            drive_session(client, run_id, gt_index(dataset))
            m = client.get(f"/runs/{run_id}/metrics").json()
            assert m["csv"] == metrics_csv_text(sim.rows)


class TestWirePprotocol:
    def test_first_window_is_iteration_one_query_one(self, dataset, client):
        run_id = client.post("/runs", json=CFG).json()["run_id"]
        q = client.get(f"/runs/{run_id}/next").json()
        assert q["iteration"] == 1
        assert q["query_index"] == 1
        assert q["prior_rects"] == []
        meta = dataset.target.image_map()[q["image_id"]]
        rect = q["rect"]
        assert 0 <= rect["r_x"] and rect["r_x"] + rect["r_w"] <= meta.width
        assert 0 <= rect["r_y"] and rect["r_y"] + rect["r_h"] <= meta.height
        assert q["candidate_markers"], "first window should show its markers"
        for m in q["candidate_markers"]:
            assert rect["r_x"] <= m["px"] <= rect["r_x"] + rect["r_w"]
            assert rect["r_y"] <= m["py"] <= rect["r_y"] + rect["r_h"]
            assert 0.0 <= m["confidence"] <= 1.0

    def test_next_is_idempotent_until_labeled(self, client):
        run_id = client.post("/runs", json=CFG).json()["run_id"]
        q1 = client.get(f"/runs/{run_id}/next").json()
        q2 = client.get(f"/runs/{run_id}/next").json()
        assert q1 == q2

    def test_label_advances_to_new_window(self, client):
        run_id = client.post("/runs", json=CFG).json()["run_id"]
        q1 = client.get(f"/runs/{run_id}/next").json()
        client.post(
            f"/runs/{run_id}/label",
            json={"window_id": q1["window_id"], "animal_points": []},
        )
        q2 = client.get(f"/runs/{run_id}/next").json()
        assert q2["window_id"] != q1["window_id"]
        assert q2["query_index"] == 2

    def test_finished_run_returns_204(self, dataset, client):
        cfg = dict(CFG, criterion="random", iterations=1, queries_per_iteration=2)
        run_id = client.post("/runs", json=cfg).json()["run_id"]
        drive_session(client, run_id, gt_index(dataset))
        assert client.get(f"/runs/{run_id}/next").status_code == 204
        assert client.get(f"/runs/{run_id}/next").status_code == 204

    def test_descriptor_reports_status_transitions(self, client):
        run_id = client.post("/runs", json=CFG).json()["run_id"]
        d = client.get(f"/runs/{run_id}").json()
        assert d["status"] == "ready"
        assert d["criterion"] == "transfer_sampling"
        assert d["total_queries"] == 0
        q = client.get(f"/runs/{run_id}/next").json()
        assert client.get(f"/runs/{run_id}").json()["status"] == "awaiting_label"
        client.post(
            f"/runs/{run_id}/label",
            json={"window_id": q["window_id"], "animal_points": []},
        )
        d = client.get(f"/runs/{run_id}").json()
        assert d["status"] == "ready"
        assert d["total_queries"] == 1

    def test_metrics_rows_grow_per_iteration(self, dataset, client):
        cfg = dict(CFG, criterion="max_confidence", queries_per_iteration=2)
        run_id = client.post("/runs", json=cfg).json()["run_id"]
        by_image = gt_index(dataset)
        assert client.get(f"/runs/{run_id}/metrics").json()["rows"] == []
        for _ in range(2):
            q = client.get(f"/runs/{run_id}/next").json()
            points = answer_from_ground_truth(
                q["rect"], by_image.get(q["image_id"], [])
            )
            client.post(
                f"/runs/{run_id}/label",
                json={"window_id": q["window_id"], "animal_points": points},
            )
        rows = client.get(f"/runs/{run_id}/metrics").json()["rows"]
        assert len(rows) == 1
        assert rows[0]["iteration"] == 1
        assert rows[0]["queries"] == 2


class TestRejections:
    def test_unknown_run_is_404(self, client):
        assert client.get("/runs/run-9999/next").status_code == 404
        assert client.get("/runs/run-9999/metrics").status_code == 404
        r = client.post(
            "/runs/run-9999/label", json={"window_id": "w", "animal_points": []}
        )
        assert r.status_code == 404

    def test_second_active_run_conflicts(self, client):
        client.post("/runs", json=CFG)
        assert client.post("/runs", json=CFG).status_code == 409

    def test_new_run_allowed_after_previous_finishes(self, dataset, client):
        cfg = dict(CFG, criterion="random", iterations=1, queries_per_iteration=1)
        run_id = client.post("/runs", json=cfg).json()["run_id"]
        drive_session(client, run_id, gt_index(dataset))
        r = client.post("/runs", json=cfg)
        assert r.status_code == 200
        assert r.json()["run_id"] != run_id
        # the finished run stays readable
        assert client.get(f"/runs/{run_id}/metrics").status_code == 200

    def test_wrong_window_id_is_conflict(self, client):
        run_id = client.post("/runs", json=CFG).json()["run_id"]
        client.get(f"/runs/{run_id}/next")
        r = client.post(
            f"/runs/{run_id}/label",
            json={"window_id": "w999q999", "animal_points": []},
        )
        assert r.status_code == 409

    def test_label_before_any_window_is_conflict(self, client):
        run_id = client.post("/runs", json=CFG).json()["run_id"]
        r = client.post(
            f"/runs/{run_id}/label", json={"window_id": "w001q001", "animal_points": []}
        )
        assert r.status_code == 409

    def test_duplicate_submission_rejected(self, client):
        run_id = client.post("/runs", json=CFG).json()["run_id"]
        q = client.get(f"/runs/{run_id}/next").json()
        body = {"window_id": q["window_id"], "animal_points": []}
        assert client.post(f"/runs/{run_id}/label", json=body).status_code == 200
        assert client.post(f"/runs/{run_id}/label", json=body).status_code == 409

    def test_point_outside_window_rejected_state_unchanged(self, client):
        run_id = client.post("/runs", json=CFG).json()["run_id"]
        q = client.get(f"/runs/{run_id}/next").json()
        rect = q["rect"]
        outside = {"px": rect["r_x"] - 5.0, "py": rect["r_y"] + 1.0}
        r = client.post(
            f"/runs/{run_id}/label",
            json={"window_id": q["window_id"], "animal_points": [outside]},
        )
        assert r.status_code == 400
        # still pending: the same window id is accepted afterwards
        assert client.get(f"/runs/{run_id}/next").json()["window_id"] == q["window_id"]
        r = client.post(
            f"/runs/{run_id}/label",
            json={"window_id": q["window_id"], "animal_points": []},
        )
        assert r.status_code == 200

    def test_malformed_payloads_are_422(self, client):
        run_id = client.post("/runs", json=CFG).json()["run_id"]
        q = client.get(f"/runs/{run_id}/next").json()
        bad_bodies = [
            {"animal_points": []},
            {"window_id": q["window_id"], "animal_points": [{"px": "x", "py": 0}]},
            {"window_id": q["window_id"], "animal_points": [{"px": 1.0}]},
            {"window_id": q["window_id"], "animal_points": [], "extra": 1},
        ]
        for body in bad_bodies:
            assert client.post(f"/runs/{run_id}/label", json=body).status_code == 422

    def test_bad_config_values_rejected(self, client):
        assert (
            client.post("/runs", json=dict(CFG, criterion="nope")).status_code == 400
        )
        assert client.post("/runs", json=dict(CFG, iterations=0)).status_code == 400
        assert client.post("/runs", json=dict(CFG, surprise=1)).status_code == 422


class TestClickResolution:
    def test_click_near_animal_counts_it_once(self, dataset, client):
        """Clicks within the match radius resolve to the animal's identity."""
        by_image = gt_index(dataset)
        cfg = dict(CFG, criterion="max_confidence")
        run_id = client.post("/runs", json=cfg).json()["run_id"]
        rng = np.random.default_rng(0)
        radius = dataset.shift.herd_cluster_radius
        found = 0
        while True:
            r = client.get(f"/runs/{run_id}/next")
            if r.status_code == 204:
                break
            q = r.json()
            rect = q["rect"]
            points = []
            for p in by_image.get(q["image_id"], []):
                if not (
                    rect["r_x"] <= p.px <= rect["r_x"] + rect["r_w"]
                    and rect["r_y"] <= p.py <= rect["r_y"] + rect["r_h"]
                ):
                    continue
                # jitter the click but stay well inside the matching radius
                # and inside the window
                px = min(max(p.px + rng.uniform(-2, 2), rect["r_x"]), rect["r_x"] + rect["r_w"])
                py = min(max(p.py + rng.uniform(-2, 2), rect["r_y"]), rect["r_y"] + rect["r_h"])
                assert (px - p.px) ** 2 + (py - p.py) ** 2 <= radius**2
                points.append({"px": px, "py": py})
                # a second click on the same animal must not double-count
                points.append({"px": px, "py": py})
            out = client.post(
                f"/runs/{run_id}/label",
                json={"window_id": q["window_id"], "animal_points": points},
            ).json()
            found = out["cumulative_found"]
        total = client.get(f"/runs/{run_id}/metrics").json()
        assert found == total["cumulative_found"]
        assert found <= len(dataset.target.gt)

    def test_background_click_labels_without_counting(self, dataset, client):
        """A click far from any animal is a label but never a found animal."""
        run_id = client.post("/runs", json=CFG).json()["run_id"]
        by_image = gt_index(dataset)
        radius = dataset.shift.herd_cluster_radius
        q = client.get(f"/runs/{run_id}/next").json()
        rect = q["rect"]
        gt = by_image.get(q["image_id"], [])
        # scan the window for a spot farther than the radius from every animal
        spot = None
        for gx in np.linspace(rect["r_x"], rect["r_x"] + rect["r_w"], 25):
            for gy in np.linspace(rect["r_y"], rect["r_y"] + rect["r_h"], 25):
                if all((g.px - gx) ** 2 + (g.py - gy) ** 2 > radius**2 for g in gt):
                    spot = (float(gx), float(gy))
                    break
            if spot:
                break
        if spot is None:
            pytest.skip("window is fully covered by animal neighborhoods")
        out = client.post(
            f"/runs/{run_id}/label",
            json={
                "window_id": q["window_id"],
                "animal_points": [{"px": spot[0], "py": spot[1]}],
            },
        ).json()
        assert out == {"accepted": True, "cumulative_found": 0}
