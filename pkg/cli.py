"""Experiment driver: pretrain -> search -> decode -> eval, plus baselines and reports."""

import argparse
import os
import sys
import traceback
from typing import List, Optional, Tuple

import torch
from dotenv import load_dotenv

from logging_config import logger
from models.config import ExperimentConfig, config_hash
from models.report import EvalReport
from navigator.decode import progressive_decode
from navigator.encoder import StageParams, pretrain_backbone
from navigator.errors import CheckpointError, MissingArtifact, NavigatorError
from navigator.evalbench import PRESETS, PresetParams, evaluate, random_search_baseline, select_learning_rate
from navigator.policyspace import default_roster
from navigator.search import OuterOptimizers, run_search
from navigator.seeding import make_generator
from navigator.supernet import Supernet
from navigator.tasks import Dataset, TaskDistribution, load_dataset, make_distributions
from storage.checkpoints import (
    decoded_payload,
    load_checkpoint,
    pretrained_payload,
    pretrained_stages,
    restore_decoded,
    restore_supernet,
    save_checkpoint,
    supernet_payload,
)
from storage.config_files import apply_overrides, dump_config, load_config
from storage.operations import (
    history_sink,
    read_history,
    reset_history,
    write_alpha_trajectory,
    write_candidate_labels,
    write_decoded_policy,
    write_eval_report,
    write_json,
    write_report_outputs,
)
from storage.run_dir import (
    CONFIG_FILE,
    DECODED_CHECKPOINT,
    HISTORY_FILE,
    PRETRAINED_CHECKPOINT,
    SUPERNET_CHECKPOINT,
    RunDir,
)

load_dotenv()

PROGRESS = os.getenv("NAVIGATOR_PROGRESS", "0").lower() in ("1", "true", "yes")


class Experiment:
    """Validated config, its hash and the run directory it writes to."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.hash = config_hash(config)
        self.run = RunDir.at(config.output_dir).ensure()
        self.dtype = torch.float64 if config.precision == "float64" else torch.float32
        dump_config(config, self.run.file(CONFIG_FILE))

    @property
    def seed(self) -> int:
        return self.config.seed

    def eval_shots(self) -> Tuple[int, int]:
        return self.config.eval.k_shot or self.config.search.k_shot, self.config.eval.q_per_class

    def datasets(self) -> Tuple[Dataset, Optional[Dataset]]:
        k_eval, q_eval = self.eval_shots()
        needed = max(self.config.search.k_shot, k_eval) + max(self.config.search.q_per_class, q_eval)
        dataset = load_dataset(self.config.dataset, min_examples=needed)
        target = None
        if self.config.cross_domain and self.config.target is not None:
            target = load_dataset(self.config.target, min_examples=needed)
        return dataset, target

    def distributions(self) -> Tuple[TaskDistribution, TaskDistribution, TaskDistribution]:
        dataset, target = self.datasets()
        dist_a, dist_b, dist_test = make_distributions(dataset, self.config.search, self.config.cross_domain, target)
        k_eval, q_eval = self.eval_shots()
        return dist_a, dist_b, dist_test.with_shots(k_eval, q_eval)

    def pretrained(self) -> List[StageParams]:
        container = load_checkpoint(self.run.require(PRETRAINED_CHECKPOINT), "pretrained", self.hash)
        encoder_config, stages = pretrained_stages(container)
        if encoder_config != self.config.encoder:
            raise CheckpointError("pretrained checkpoint was built for a different encoder; rerun pretrain")
        return [s.with_tensors([t.to(self.dtype) for t in s.tensors]) for s in stages]

    def random_train_episodes(self) -> int:
        """Random-search models train for the searched model's final fine-tune budget unless set."""
        budget = self.config.baselines.random_train_episodes
        return self.config.decode.final_episodes if budget is None else budget

    def preset_params(self) -> PresetParams:
        return PresetParams(
            inner_steps=self.config.roster.inner_steps,
            finetune_steps=self.config.baselines.finetune_steps,
            tau=self.config.roster.tau,
            second_order=self.config.search.second_order,
        )


def _experiment(args, **overrides) -> Experiment:
    config = load_config(args.config)
    config = apply_overrides(config, seed=args.seed, output_dir=args.output, **overrides)
    return Experiment(config)


def cmd_pretrain(args) -> int:
    exp = _experiment(args)
    dataset, _ = exp.datasets()
    train_x, train_y = dataset.split_examples("train")
    result = pretrain_backbone(
        train_x.to(exp.dtype), train_y, exp.config.encoder, exp.config.pretrain,
        make_generator(exp.seed, "pretrain"), exp.dtype, progress=PROGRESS,
    )
    save_checkpoint(
        exp.run.file(PRETRAINED_CHECKPOINT), "pretrained",
        pretrained_payload(result, exp.config.encoder, dataset.input_shape), exp.hash, exp.seed,
    )
    return 0


def cmd_search(args) -> int:
    exp = _experiment(args, **{"search.episodes_total": args.episodes})
    config = exp.config
    dist_a, dist_b, _ = exp.distributions()
    checkpoint = exp.run.file(SUPERNET_CHECKPOINT)

    if args.resume and checkpoint.exists():
        supernet, start, optimizer_state, generator_state = restore_supernet(
            load_checkpoint(checkpoint, "supernet", exp.hash)
        )
        optimizers = OuterOptimizers.for_supernet(supernet, config.search)
        if optimizer_state:
            optimizers.load_state_dict(optimizer_state)
        generator = make_generator(exp.seed, "search")
        if generator_state is not None:
            generator.set_state(generator_state)
        reset_history(exp.run, keep_until=start)
        logger.info(f"Resuming search at iteration {start}")
    else:
        encoder_roster, classifier_roster = default_roster(config.roster, config.encoder.stages)
        supernet = Supernet.build(
            config.encoder, exp.pretrained(), encoder_roster, classifier_roster, config.search.n_way,
            make_generator(exp.seed, "init"), tau=config.roster.tau, second_order=config.search.second_order,
        )
        optimizers = OuterOptimizers.for_supernet(supernet, config.search)
        generator = make_generator(exp.seed, "search")
        start = 0
        reset_history(exp.run)
    write_candidate_labels(exp.run, supernet.candidate_labels(), exp.hash)

    sink = history_sink(exp.run)

    def on_record(record):
        sink(record)
        done = record.iteration + 1
        if done % config.search.checkpoint_every == 0 and done < config.search.episodes_total:
            save_checkpoint(
                checkpoint, "supernet", supernet_payload(supernet, done, optimizers.state_dict(), generator),
                exp.hash, exp.seed,
            )

    try:
        run_search(
            supernet, dist_a, dist_b, config.search, generator, optimizers=optimizers, start_iteration=start,
            on_record=on_record, config_hash=exp.hash, progress=PROGRESS,
        )
    finally:
        if exp.run.file(HISTORY_FILE).exists():
            write_alpha_trajectory(exp.run, read_history(exp.run, phase="search"), supernet.candidate_labels())

    save_checkpoint(
        checkpoint, "supernet",
        supernet_payload(supernet, max(start, config.search.episodes_total), optimizers.state_dict(), generator),
        exp.hash, exp.seed,
    )
    return 0


def cmd_decode(args) -> int:
    exp = _experiment(args)
    dist_a, dist_b, _ = exp.distributions()
    supernet, searched, _, _ = restore_supernet(
        load_checkpoint(exp.run.require(SUPERNET_CHECKPOINT), "supernet", exp.hash)
    )
    reset_history(exp.run, keep_until=searched)
    supernet, policy = progressive_decode(
        supernet, dist_a, dist_b, exp.config.decode, exp.config.search, exp.seed,
        on_record=history_sink(exp.run), config_hash=exp.hash, progress=PROGRESS,
    )
    save_checkpoint(exp.run.file(DECODED_CHECKPOINT), "decoded", decoded_payload(supernet, policy), exp.hash, exp.seed)
    write_decoded_policy(exp.run, policy)
    return 0


def _report_name(policy: str, report: EvalReport) -> str:
    name = f"{policy}-{report.n_way}way-{report.k_shot}shot"
    return f"{name}-multicrop" if report.multicrop_views else name


def _write_report(exp: Experiment, policy: str, report: EvalReport, records) -> EvalReport:
    report = report.model_copy(update={"policy_name": policy})
    write_eval_report(exp.run, _report_name(policy, report), report, records)
    return report


def _preset_model(exp: Experiment, name: str, dist_a, dist_b) -> Supernet:
    baselines = exp.config.baselines
    model, params = select_learning_rate(
        name, exp.pretrained(), exp.config.encoder, dist_a, dist_b, baselines.lr_grid, exp.config.search,
        exp.seed, val_episodes=baselines.lr_select_episodes, meta_train_episodes=baselines.meta_train_episodes,
        params=exp.preset_params(),
    )
    logger.info(f"Preset {name}: encoder lr {params.encoder_lr:g}, classifier lr {params.classifier_lr:g}")
    return model


def _evaluate_preset(exp: Experiment, name: str, multicrop: bool) -> EvalReport:
    dist_a, dist_b, dist_test = exp.distributions()
    model = _preset_model(exp, name, dist_a, dist_b)
    report, records = evaluate(
        model, dist_test, exp.config.eval.n_episodes, exp.seed,
        multicrop=exp.config.eval.multicrop if multicrop else None,
        config_hash=exp.hash, policy_description=f"{name}: {model.describe()}", progress=PROGRESS,
    )
    return _write_report(exp, name, report, records)


def cmd_eval(args) -> int:
    exp = _experiment(args, **{"eval.n_episodes": args.episodes})
    if args.preset:
        _evaluate_preset(exp, args.preset, args.multicrop)
        return 0
    _, _, dist_test = exp.distributions()
    model, policy = restore_decoded(load_checkpoint(exp.run.require(DECODED_CHECKPOINT), "decoded", exp.hash))
    report, records = evaluate(
        model, dist_test, exp.config.eval.n_episodes, exp.seed,
        multicrop=exp.config.eval.multicrop if args.multicrop else None,
        config_hash=exp.hash, policy_description=policy.describe(), progress=PROGRESS,
    )
    _write_report(exp, "searched", report, records)
    return 0


def cmd_baseline(args) -> int:
    exp = _experiment(args, **{"eval.n_episodes": args.episodes})
    presets = [args.preset] if args.preset else list(exp.config.baselines.presets)
    for name in presets:
        _evaluate_preset(exp, name, args.multicrop)
    if args.preset:
        return 0

    config = exp.config
    dist_a, _, dist_test = exp.distributions()
    encoder_roster, classifier_roster = default_roster(config.roster, config.encoder.stages)
    result = random_search_baseline(
        encoder_roster, classifier_roster, config.baselines.random_models, dist_a, dist_test,
        exp.pretrained(), config.encoder, config.search, exp.seed,
        train_episodes=exp.random_train_episodes(),
        eval_episodes=config.eval.n_episodes, tau=config.roster.tau, config_hash=exp.hash,
    )
    write_json(exp.run.file("random_search.json"), {"config_hash": exp.hash, **result.model_dump(mode="json")})
    report = result.as_report()
    write_eval_report(exp.run, _report_name("random-search", report), report, [])
    return 0


def cmd_report(args) -> int:
    if args.run_dir:
        run = RunDir.at(args.run_dir)
    else:
        run = RunDir.at(load_config(args.config).output_dir) if args.config else None
    if run is None or not run.path.is_dir():
        raise MissingArtifact("report needs an existing run directory (positional or via --config)")
    for path in write_report_outputs(run, allow_mixed=args.allow_mixed):
        logger.info(f"Wrote {path}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    if args.runs_root:
        os.environ["RUNS_ROOT"] = args.runs_root
    uvicorn.run("main:app", host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Search per-stage adaptation policies for few-shot classification")
    commands = parser.add_subparsers(dest="command", required=True)

    def experiment_command(name: str, handler, help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--config", required=True, help="Experiment YAML file")
        sub.add_argument("--seed", type=int, default=None, help="Override the root seed")
        sub.add_argument("--output", default=None, help="Override the run directory")
        sub.set_defaults(handler=handler)
        return sub

    experiment_command("pretrain", cmd_pretrain, "Pretrain the backbone on all training classes")

    search = experiment_command("search", cmd_search, "Run the bi-level policy search")
    search.add_argument("--episodes", type=int, default=None, help="Override search.episodes_total")
    search.add_argument("--resume", action="store_true", help="Continue from the last supernet checkpoint")

    experiment_command("decode", cmd_decode, "Progressively decode the searched supernet")

    for name, handler, help_text in (
        ("eval", cmd_eval, "Evaluate the decoded policy or a preset"),
        ("baseline", cmd_baseline, "Evaluate baseline presets and the random-search baseline"),
    ):
        sub = experiment_command(name, handler, help_text)
        sub.add_argument("--preset", choices=PRESETS, default=None, help="Baseline preset")
        sub.add_argument("--episodes", type=int, default=None, help="Override eval.n_episodes")
        sub.add_argument("--multicrop", action="store_true", help="Average logits over multi-crop views")

    report = commands.add_parser("report", help="Build comparison tables and alpha plot data")
    report.add_argument("run_dir", nargs="?", default=None, help="Run directory (default: config output_dir)")
    report.add_argument("--config", default=None, help="Experiment YAML file")
    report.add_argument("--allow-mixed", action="store_true", help="Combine reports from different configs")
    report.set_defaults(handler=cmd_report)

    serve = commands.add_parser("serve", help="Serve run artifacts over HTTP (read-only)")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    serve.add_argument("--runs-root", default=None, help="Directory holding run directories")
    serve.set_defaults(handler=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except NavigatorError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 2
    except Exception as e:
        logger.error(f"{args.command} failed: {str(e)}")
        logger.error(traceback.format_exc())
        return 1


if __name__ == "__main__":
    sys.exit(main())
