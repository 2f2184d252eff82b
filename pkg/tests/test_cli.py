import pytest

from cli import Experiment, main
from models.config import (
    BaselineConfig,
    DatasetSpec,
    DecodeSchedule,
    EncoderConfig,
    EvalConfig,
    ExperimentConfig,
    MultiCropConfig,
    PretrainSchedule,
    RosterConfig,
    SearchConfig,
    ShiftParams,
    SyntheticFamilySpec,
    SyntheticKind,
)
from models.policy import PolicyCandidate, PolicyKind
from navigator.evalbench import evaluate
from navigator.seeding import make_generator
from navigator.supernet import Supernet
from storage.config_files import dump_config, load_config
from storage.operations import read_decoded_policy, read_history, read_json
from storage.run_dir import DECODED_CHECKPOINT, PRETRAINED_CHECKPOINT, SUPERNET_CHECKPOINT, RunDir

FIX = PolicyCandidate(kind=PolicyKind.RE_FIX)


def _tiny_config(output_dir) -> ExperimentConfig:
    return ExperimentConfig(
        output_dir=str(output_dir),
        precision="float64",
        dataset=DatasetSpec(
            name="tiny",
            synthetic=SyntheticFamilySpec(dim=8, class_pool_size=15, examples_per_class=12, split_sizes=(5, 5, 5)),
        ),
        encoder=EncoderConfig(stages=2, widths=[8, 8], embedding_dim=8),
        pretrain=PretrainSchedule(steps=5, batch_size=16),
        roster=RosterConfig(inner_steps=1),
        search=SearchConfig(episodes_total=3, n_way=3, k_shot=1, q_per_class=3, checkpoint_every=2),
        decode=DecodeSchedule(recover_episodes=1, final_episodes=1, val_episodes=1),
        eval=EvalConfig(n_episodes=4, q_per_class=3, multicrop=MultiCropConfig(n_views=2, transform="identity")),
        baselines=BaselineConfig(
            presets=["protonet"], lr_grid=[0.1], finetune_steps=2, meta_train_episodes=1,
            lr_select_episodes=1, random_models=2, random_train_episodes=1,
        ),
    )


@pytest.fixture
def config_file(tmp_path):
    return str(dump_config(_tiny_config(tmp_path / "run"), tmp_path / "exp.yaml"))


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    """pretrain -> search -> decode -> eval -> report on the tiny config, run once per module."""
    base = tmp_path_factory.mktemp("pipeline")
    config = str(dump_config(_tiny_config(base / "run"), base / "exp.yaml"))
    for command in ("pretrain", "search", "decode", "eval"):
        assert main([command, "--config", config]) == 0, command
    assert main(["report", str(base / "run")]) == 0
    return RunDir.at(base / "run"), config


def test_missing_config_exits_with_2(tmp_path):
    assert main(["pretrain", "--config", str(tmp_path / "absent.yaml")]) == 2


def test_invalid_config_exits_with_2(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("search:\n  episodes_totl: 5\n")
    assert main(["search", "--config", str(path)]) == 2


def test_stage_without_its_input_artifact_exits_with_2(config_file):
    assert main(["search", "--config", config_file]) == 2
    assert main(["decode", "--config", config_file]) == 2
    assert main(["eval", "--config", config_file]) == 2


def test_report_without_run_directory_exits_with_2(tmp_path):
    assert main(["report", str(tmp_path / "nowhere")]) == 2
    assert main(["report"]) == 2


def test_unknown_preset_is_an_argument_error(config_file):
    with pytest.raises(SystemExit):
        main(["eval", "--config", config_file, "--preset", "nearest-neighbour"])


def test_pipeline_writes_every_artifact(finished_run):
    run, _ = finished_run
    for name in (PRETRAINED_CHECKPOINT, SUPERNET_CHECKPOINT, DECODED_CHECKPOINT, "policy.json",
                 "candidates.json", "alpha_trajectory.csv", "policy_summary.txt"):
        assert run.file(name).exists(), name
    assert run.report_names() == ["searched-3way-1shot"]
    assert (run.path / "tables" / "comparison.md").exists()


def test_pipeline_history_and_policy(finished_run):
    run, _ = finished_run
    assert [r.iteration for r in read_history(run, phase="search").records] == [0, 1, 2]
    phases = [r.phase for r in read_history(run).records]
    assert "recover-stage1" in phases and "finetune" in phases
    policy = read_decoded_policy(run)
    assert [s.stage_label for s in policy.selections] == ["stage1", "stage2", "classifier"]


def test_eval_report_carries_config_hash(finished_run):
    run, config = finished_run
    report = read_json(run.report_path("searched-3way-1shot"))
    assert report["n_episodes"] == 4
    assert report["config_hash"] == (run.file("config.yaml").read_text().splitlines()[0].split(": ")[1])
    assert load_config(config).output_dir == str(run.path)


def test_episode_overrides(config_file, tmp_path):
    run = RunDir.at(tmp_path / "run")
    assert main(["pretrain", "--config", config_file]) == 0
    assert main(["search", "--config", config_file, "--episodes", "2"]) == 0
    assert len(read_history(run, phase="search")) == 2
    assert load_config(run.file("config.yaml")).search.episodes_total == 2

    assert main(["eval", "--config", config_file, "--preset", "protonet", "--episodes", "3"]) == 0
    assert read_json(run.report_path("protonet-3way-1shot"))["n_episodes"] == 3


def test_resume_continues_the_iteration_count(config_file, tmp_path):
    run = RunDir.at(tmp_path / "run")
    assert main(["pretrain", "--config", config_file]) == 0
    assert main(["search", "--config", config_file, "--episodes", "2"]) == 0
    assert main(["search", "--config", config_file, "--episodes", "4", "--resume"]) == 0
    assert [r.iteration for r in read_history(run, phase="search").records] == [0, 1, 2, 3]


def test_seed_and_output_overrides(config_file, tmp_path):
    other = tmp_path / "other"
    assert main(["pretrain", "--config", config_file, "--seed", "7", "--output", str(other)]) == 0
    assert (other / PRETRAINED_CHECKPOINT).exists()
    assert load_config(other / "config.yaml").seed == 7
    assert not (tmp_path / "run" / PRETRAINED_CHECKPOINT).exists()


def test_baseline_preset_and_report(config_file, tmp_path):
    run = RunDir.at(tmp_path / "run")
    assert main(["pretrain", "--config", config_file]) == 0
    assert main(["baseline", "--config", config_file, "--preset", "protonet"]) == 0
    assert main(["report", "--config", config_file]) == 0
    table = (run.path / "tables" / "comparison.md").read_text()
    assert "| protonet |" in table and "3-way 1-shot tiny" in table


def test_multicrop_eval_names_its_report(config_file, tmp_path):
    run = RunDir.at(tmp_path / "run")
    assert main(["pretrain", "--config", config_file]) == 0
    assert main(["eval", "--config", config_file, "--preset", "protonet", "--multicrop"]) == 0
    assert "protonet-3way-1shot-multicrop" in run.report_names()


def test_random_search_budget_defaults_to_the_final_fine_tune(tmp_path):
    config = _tiny_config(tmp_path / "run")
    unset = config.model_copy(update={
        "decode": DecodeSchedule(recover_episodes=1, final_episodes=7, val_episodes=1),
        "baselines": config.baselines.model_copy(update={"random_train_episodes": None}),
    })
    assert Experiment(unset).random_train_episodes() == 7
    assert Experiment(config).random_train_episodes() == 1


def _desk_config(output_dir, seed: int, k_shot: int, family: SyntheticFamilySpec) -> ExperimentConfig:
    return ExperimentConfig(
        seed=seed,
        output_dir=str(output_dir),
        precision="float64",
        dataset=DatasetSpec(name="desk", synthetic=family),
        encoder=EncoderConfig(stages=2, widths=[32, 32], embedding_dim=32),
        pretrain=PretrainSchedule(steps=300, batch_size=64),
        roster=RosterConfig(inner_steps=3),
        search=SearchConfig(episodes_total=300, n_way=5, k_shot=k_shot, q_per_class=5, checkpoint_every=100),
        decode=DecodeSchedule(recover_episodes=20, final_episodes=50, val_episodes=20),
        eval=EvalConfig(n_episodes=300, q_per_class=5),
        baselines=BaselineConfig(
            presets=["protonet", "baselinepp"], finetune_steps=20, meta_train_episodes=0, lr_select_episodes=10,
            random_models=10,
        ),
    )


def _run_pipeline(config: ExperimentConfig, path) -> RunDir:
    config_path = str(dump_config(config, path))
    for command in ("pretrain", "search", "decode", "eval", "baseline"):
        assert main([command, "--config", config_path]) == 0, command
    return RunDir.at(config.output_dir)


@pytest.mark.slow
def test_searched_policy_beats_random_search_and_presets(tmp_path):
    family = SyntheticFamilySpec(dim=16, class_pool_size=40, examples_per_class=30, split_sizes=(20, 10, 10))
    wins = 0
    for seed in range(5):
        run = _run_pipeline(_desk_config(tmp_path / f"run{seed}", seed, 1, family), tmp_path / f"exp{seed}.yaml")

        def accuracy(name):
            return read_json(run.report_path(f"{name}-5way-1shot"))["mean_accuracy"]

        searched = accuracy("searched")
        wins += searched > accuracy("random-search") and searched >= max(accuracy("protonet"), accuracy("baselinepp"))
    assert wins >= 4


@pytest.mark.slow
def test_domain_shift_favours_fine_tuned_encoder_stages(tmp_path):
    family = SyntheticFamilySpec(
        kind=SyntheticKind.DOMAIN_SHIFTED_GAUSSIAN, dim=16, class_pool_size=40, examples_per_class=30,
        split_sizes=(20, 10, 10), shift_params=ShiftParams(mean_shift=2.0, cov_scale=1.5, splits=["val", "test"]),
    )
    wins, fine_tuned = 0, 0
    for seed in range(5):
        config = _desk_config(tmp_path / f"run{seed}", seed, 10, family)
        run = _run_pipeline(config, tmp_path / f"exp{seed}.yaml")
        searched = read_json(run.report_path("searched-5way-10shot"))["mean_accuracy"]

        exp = Experiment(config)
        _, _, dist_test = exp.distributions()
        frozen = Supernet.discrete(
            config.encoder, exp.pretrained(), [FIX] * config.encoder.stages + [PolicyCandidate(kind=PolicyKind.PL_DI)],
            5, make_generator(seed), tau=config.roster.tau,
        )
        frozen_report, _ = evaluate(frozen, dist_test, config.eval.n_episodes, seed)
        wins += searched >= frozen_report.mean_accuracy

        selections = read_decoded_policy(run).selections[:-1]
        fine_tuned += any(s.candidate.kind in (PolicyKind.RE_FT, PolicyKind.RE_FA) for s in selections)
    assert wins >= 4
    assert fine_tuned >= 4
