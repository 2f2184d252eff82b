import pytest
from fastapi.testclient import TestClient

from main import app
from models.config import ExperimentConfig
from models.policy import DecodedPolicy, PolicyCandidate, PolicyKind, StageSelection, StrengthTag
from models.report import EpisodeRecord, EvalReport, SearchRecord
from storage.config_files import dump_config
from storage.operations import history_sink, write_candidate_labels, write_decoded_policy, write_eval_report
from storage.run_dir import RunDir


def _report(policy, mean, config_hash):
    return EvalReport(
        n_episodes=2, accuracies=[mean, mean], mean_accuracy=mean, ci95=0.0, n_way=5, k_shot=1,
        dataset="synthetic/test", policy_description=policy, policy_name=policy, config_hash=config_hash,
    )


@pytest.fixture
def client(tmp_path, monkeypatch):
    monkeypatch.setenv("RUNS_ROOT", str(tmp_path))

    run = RunDir.at(tmp_path / "exp1").ensure()
    config = ExperimentConfig(output_dir=str(run.path))
    dump_config(config, run.file("config.yaml"))
    write_candidate_labels(run, {"stage1": ["RE_FIX", "RE_FT(lr=0.1)"], "classifier": ["PL_DI"]}, "h1")
    sink = history_sink(run)
    for i in range(3):
        sink(SearchRecord(iteration=i, step1_loss=1.0 - 0.1 * i, step2_loss=1.0, alphas={"stage1": [0.5, 0.5]}))
    sink(SearchRecord(iteration=0, phase="finetune", step1_loss=0.5))

    strong = PolicyCandidate(kind=PolicyKind.RE_FT, inner_lr=0.1, inner_steps=10, strength=StrengthTag.STRONG)
    write_decoded_policy(run, DecodedPolicy(
        config_hash="h1",
        selections=[
            StageSelection(
                stage_index=0, stage_label="stage1", candidate=strong.model_copy(update={"inner_lr": 0.04}),
                original_lr=0.1, fused_lr=0.04, alpha_at_decode=0.4, argmax_alpha_label="RE_FIX",
            ),
            StageSelection(
                stage_index=1, stage_label="classifier", candidate=PolicyCandidate(kind=PolicyKind.PL_DI),
                alpha_at_decode=1.0, argmax_alpha_label="PL_DI",
            ),
        ],
    ))
    records = [EpisodeRecord(episode_index=i, accuracy=0.6, n_correct=45, n_query=75) for i in range(2)]
    write_eval_report(run, "protonet-5way-1shot", _report("protonet", 0.6, "h1"), records)
    write_eval_report(run, "searched-5way-1shot", _report("searched", 0.7, "h1"), [])

    mixed = RunDir.at(tmp_path / "mixed").ensure()
    dump_config(config, mixed.file("config.yaml"))
    write_eval_report(mixed, "a-5way-1shot", _report("a", 0.5, "h1"), [])
    write_eval_report(mixed, "b-5way-1shot", _report("b", 0.5, "h2"), [])

    return TestClient(app)


def test_root(client, tmp_path):
    response = client.get("/")
    assert response.status_code == 200
    assert response.json()["runs_root"] == str(tmp_path)


def test_list_runs(client):
    response = client.get("/runs")
    assert response.status_code == 200
    runs = {r["name"]: r for r in response.json()}
    assert set(runs) == {"exp1", "mixed"}
    assert runs["exp1"]["stages"] == ["stage1", "classifier"]
    assert runs["exp1"]["has_decoded_policy"] is False
    assert runs["exp1"]["reports"] == ["protonet-5way-1shot", "searched-5way-1shot"]
    assert runs["exp1"]["config_hash"] is not None


def test_run_detail(client):
    response = client.get("/runs/exp1")
    assert response.status_code == 200
    detail = response.json()
    assert detail["config"]["search"]["n_way"] == 5
    assert "history.jsonl" in detail["artifacts"]


def test_missing_run_is_404(client):
    for path in ("/runs/absent", "/runs/absent/history", "/runs/absent/policy", "/runs/absent/reports"):
        assert client.get(path).status_code == 404, path


def test_history_filters(client):
    records = client.get("/runs/exp1/history").json()
    assert len(records) == 4
    search = client.get("/runs/exp1/history", params={"phase": "search"}).json()
    assert [r["iteration"] for r in search] == [0, 1, 2]
    last = client.get("/runs/exp1/history", params={"phase": "search", "limit": 1}).json()
    assert [r["iteration"] for r in last] == [2]
    assert client.get("/runs/exp1/history", params={"limit": 0}).status_code == 422


def test_policy_and_summary(client):
    policy = client.get("/runs/exp1/policy").json()
    assert [s["stage_label"] for s in policy["selections"]] == ["stage1", "classifier"]
    summary = client.get("/runs/exp1/policy/summary").json()
    assert summary[0] == {
        "stage": "stage1", "kind": "RE_FT", "original_lr": 0.1, "fused_lr": 0.04, "alpha": 0.4,
        "argmax_alpha": "RE_FIX",
    }
    assert summary[1]["fused_lr"] is None
    assert client.get("/runs/mixed/policy").status_code == 404


def test_reports(client):
    assert client.get("/runs/exp1/reports").json() == ["protonet-5way-1shot", "searched-5way-1shot"]
    report = client.get("/runs/exp1/reports/protonet-5way-1shot").json()
    assert report["mean_accuracy"] == pytest.approx(0.6) and report["config_hash"] == "h1"
    episodes = client.get("/runs/exp1/reports/protonet-5way-1shot/episodes").json()
    assert [e["episode_index"] for e in episodes] == [0, 1]
    assert client.get("/runs/exp1/reports/searched-5way-1shot/episodes").json() == []
    assert client.get("/runs/exp1/reports/absent").status_code == 404
    assert client.get("/runs/exp1/reports/absent/episodes").status_code == 404


def test_comparison_table(client):
    table = client.get("/runs/exp1/table").json()
    assert table["columns"] == ["5-way 1-shot synthetic/test"]
    cells = {row["policy"]: row["cells"]["5-way 1-shot synthetic/test"] for row in table["rows"]}
    assert cells == {"protonet": "60.00 ± 0.00", "searched": "70.00 ± 0.00"}
    assert table["config_hashes"] == ["h1"]


def test_mixed_hashes_are_refused_unless_allowed(client):
    assert client.get("/runs/mixed/table").status_code == 400
    allowed = client.get("/runs/mixed/table", params={"allow_mixed": True})
    assert allowed.status_code == 200
    assert allowed.json()["config_hashes"] == ["h1", "h2"]
