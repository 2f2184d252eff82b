"""Episodic evaluation, multi-crop prediction, baseline presets and random search."""

import itertools
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from tqdm import tqdm

from logging_config import log_report_info, logger
from models.config import EncoderConfig, MultiCropConfig, SearchConfig
from models.policy import PolicyCandidate, PolicyKind, StrengthTag
from models.report import EpisodeRecord, EvalReport, RandomSearchEntry, RandomSearchResult
from navigator.encoder import StageParams
from navigator.errors import AdaptationDiverged, DegenerateVector, StateMismatch, UnknownPreset, UnsupportedInput
from navigator.search import OuterOptimizers, meta_train
from navigator.seeding import make_generator
from navigator.supernet import AdaptedParams, Supernet, inner_adapt, predict
from navigator.tasks import TaskDistribution

PRESETS = ("protonet", "matchnet", "maml", "baselinepp", "finetune")


def random_resized_crop(images: torch.Tensor, min_scale: float, generator: torch.Generator) -> torch.Tensor:
    """One random scale-and-crop box applied to the whole (B, H, W, C) batch, resized back."""
    height, width = images.shape[1:3]
    scale = min_scale + (1 - min_scale) * torch.rand(1, generator=generator).item()
    crop_h, crop_w = max(1, round(scale * height)), max(1, round(scale * width))
    top = int(torch.randint(0, height - crop_h + 1, (1,), generator=generator))
    left = int(torch.randint(0, width - crop_w + 1, (1,), generator=generator))
    crop = images[:, top:top + crop_h, left:left + crop_w, :].permute(0, 3, 1, 2)
    resized = F.interpolate(crop, size=(height, width), mode="bilinear", align_corners=False)
    return resized.permute(0, 2, 3, 1)


def multicrop_predict(
    model: Supernet,
    adapted: AdaptedParams,
    query_x: torch.Tensor,
    config: MultiCropConfig,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Arithmetic mean of the query logits over n_views transformed views."""
    if config.transform == "identity":
        views = [query_x] * config.n_views
    else:
        if query_x.dim() != 4:
            raise UnsupportedInput("scale-and-crop views need (batch, H, W, C) image inputs")
        generator = generator or torch.Generator().manual_seed(0)
        views = [random_resized_crop(query_x, config.min_scale, generator) for _ in range(config.n_views)]
    return torch.stack([predict(model, adapted, view) for view in views]).mean(dim=0)


def evaluate(
    model: Supernet,
    dist_test: TaskDistribution,
    n_episodes: int,
    seed: int,
    multicrop: Optional[MultiCropConfig] = None,
    config_hash: Optional[str] = None,
    policy_description: Optional[str] = None,
    progress: bool = False,
) -> Tuple[EvalReport, List[EpisodeRecord]]:
    """Adapt on each test support set and classify its queries.

    Episode i uses its own rng stream, so the report does not depend on the
    order episodes are processed in. Diverged episodes and episodes with a
    zero-norm embedding are excluded and counted.
    """
    if n_episodes < 1:
        raise ValueError("evaluation needs at least one episode")
    if dist_test.n_way != model.n_way:
        raise StateMismatch(f"{dist_test.n_way}-way tasks for a {model.n_way}-way model")
    records = []
    for index in tqdm(range(n_episodes), desc="eval", disable=not progress):
        episode = dist_test.sample(make_generator(seed, "eval", index))
        n_query = len(episode.query_y)
        try:
            adapted = inner_adapt(model, episode.support_x, episode.support_y, create_graph=False)
            with torch.no_grad():
                if multicrop is not None:
                    logits = multicrop_predict(model, adapted, episode.query_x, multicrop,
                                               make_generator(seed, "multicrop", index))
                else:
                    logits = predict(model, adapted, episode.query_x)
        except (AdaptationDiverged, DegenerateVector) as exc:
            logger.warning(f"Episode {index} excluded: {exc}")
            records.append(EpisodeRecord(episode_index=index, n_query=n_query, failed=True, error=str(exc)))
            continue
        n_correct = int((logits.argmax(dim=-1) == episode.query_y).sum())
        records.append(EpisodeRecord(
            episode_index=index, accuracy=n_correct / n_query, n_correct=n_correct, n_query=n_query,
        ))

    report = EvalReport.from_records(
        records,
        n_way=dist_test.n_way,
        k_shot=dist_test.k_shot,
        dataset=f"{dist_test.dataset.name}/{dist_test.split}",
        policy_description=policy_description or model.describe(),
        multicrop_views=multicrop.n_views if multicrop is not None else None,
        config_hash=config_hash,
    )
    log_report_info(report)
    return report, records


@dataclass
class PresetParams:
    encoder_lr: float = 0.1
    classifier_lr: float = 0.1
    inner_steps: int = 10
    finetune_steps: int = 100
    tau: float = 10.0
    second_order: bool = True


def _strength(lr: float) -> StrengthTag:
    return StrengthTag.STRONG if lr >= 0.1 else StrengthTag.WEAK


def _adapting(kind: PolicyKind, lr: float, steps: int) -> PolicyCandidate:
    return PolicyCandidate(kind=kind, inner_lr=lr, inner_steps=steps, strength=_strength(lr))


def preset_choices(name: str, n_stages: int, params: PresetParams) -> Tuple[List[PolicyCandidate], dict]:
    """Per-stage candidates (M encoder stages, then the classifier) and scoring options of a preset."""
    fixed = [PolicyCandidate(kind=PolicyKind.RE_FIX)] * n_stages
    if name == "protonet":
        return fixed + [PolicyCandidate(kind=PolicyKind.PL_DI)], {"metric": "neg_l2"}
    if name == "matchnet":
        return fixed + [PolicyCandidate(kind=PolicyKind.PL_DI)], {"prototype_mode": "per_sample"}
    if name == "maml":
        encoder = [_adapting(PolicyKind.RE_FA, params.encoder_lr, params.inner_steps)] * n_stages
        return encoder + [_adapting(PolicyKind.PL_FA, params.classifier_lr, params.inner_steps)], {}
    if name == "baselinepp":
        return fixed + [_adapting(PolicyKind.PL_FT, params.classifier_lr, params.finetune_steps)], {}
    if name == "finetune":
        encoder = [_adapting(PolicyKind.RE_FT, params.encoder_lr, params.finetune_steps)] * n_stages
        return encoder + [_adapting(PolicyKind.PL_FT, params.classifier_lr, params.finetune_steps)], {}
    raise UnknownPreset(f"unknown preset '{name}', expected one of {', '.join(PRESETS)}")


def preset_policy(
    name: str,
    pretrained: Sequence[StageParams],
    encoder_config: EncoderConfig,
    n_way: int,
    params: Optional[PresetParams] = None,
    generator: Optional[torch.Generator] = None,
) -> Supernet:
    params = params or PresetParams()
    choices, options = preset_choices(name, encoder_config.stages, params)
    return Supernet.discrete(
        encoder_config, pretrained, choices, n_way, generator or torch.Generator().manual_seed(0),
        tau=params.tau, second_order=params.second_order, **options,
    )


def needs_meta_training(model: Supernet) -> bool:
    return any(c.kind.meta_learned for stage in model.stages for c in stage.candidates)


def train_policy(
    model: Supernet,
    dist_a: TaskDistribution,
    episodes: int,
    search_config: SearchConfig,
    generator: torch.Generator,
    progress: bool = False,
) -> Supernet:
    """Step-1-only meta-training of a discrete policy's persistent parameters."""
    if episodes > 0:
        meta_train(
            model, dist_a, None, episodes, OuterOptimizers.for_supernet(model, search_config), generator,
            clip_norm=search_config.clip_norm, phase="train-policy", progress=progress,
        )
    return model


def select_learning_rate(
    name: str,
    pretrained: Sequence[StageParams],
    encoder_config: EncoderConfig,
    dist_a: TaskDistribution,
    dist_val: TaskDistribution,
    lr_grid: Sequence[float],
    search_config: SearchConfig,
    seed: int,
    val_episodes: int = 50,
    meta_train_episodes: int = 0,
    params: Optional[PresetParams] = None,
) -> Tuple[Supernet, PresetParams]:
    """Pick the preset's learning rates from lr_grid by validation accuracy."""
    params = params or PresetParams()
    choices, _ = preset_choices(name, encoder_config.stages, params)
    encoder_adapts = choices[0].kind.adapts
    classifier_adapts = choices[-1].kind.adapts
    grid = list(itertools.product(
        lr_grid if encoder_adapts else [params.encoder_lr],
        lr_grid if classifier_adapts else [params.classifier_lr],
    ))

    best = None
    for encoder_lr, classifier_lr in grid:
        trial = PresetParams(**{**params.__dict__, "encoder_lr": encoder_lr, "classifier_lr": classifier_lr})
        model = preset_policy(name, pretrained, encoder_config, dist_a.n_way, trial, make_generator(seed, "init", name))
        if needs_meta_training(model):
            train_policy(model, dist_a, meta_train_episodes, search_config, make_generator(seed, "train", name))
        if len(grid) == 1:
            return model, trial
        report, _ = evaluate(model, dist_val, val_episodes, seed=seed, policy_description=f"{name}-select")
        logger.info(f"{name} lr encoder={encoder_lr:g} classifier={classifier_lr:g}: {report.mean_accuracy:.4f}")
        if best is None or report.mean_accuracy > best[0]:
            best = (report.mean_accuracy, model, trial)
    return best[1], best[2]


def random_search_pool(classifier_roster: Sequence[PolicyCandidate]) -> List[PolicyCandidate]:
    """Classifier candidates eligible for random search: PL_FA (weak) is left out."""
    return [
        c for c in classifier_roster
        if not (c.kind == PolicyKind.PL_FA and c.strength == StrengthTag.WEAK)
    ]


def sample_random_policy(
    encoder_roster: Sequence[Sequence[PolicyCandidate]],
    classifier_roster: Sequence[PolicyCandidate],
    generator: torch.Generator,
) -> List[PolicyCandidate]:
    stages = [list(stage) for stage in encoder_roster] + [random_search_pool(classifier_roster)]
    return [stage[int(torch.randint(len(stage), (1,), generator=generator))] for stage in stages]


def random_search_baseline(
    encoder_roster: Sequence[Sequence[PolicyCandidate]],
    classifier_roster: Sequence[PolicyCandidate],
    n_models: int,
    dist_a: TaskDistribution,
    dist_test: TaskDistribution,
    pretrained: Sequence[StageParams],
    encoder_config: EncoderConfig,
    search_config: SearchConfig,
    seed: int,
    train_episodes: int,
    eval_episodes: int,
    tau: float = 10.0,
    config_hash: Optional[str] = None,
) -> RandomSearchResult:
    """Average test accuracy of n_models policies sampled uniformly per stage."""
    if n_models < 1:
        raise ValueError("random search needs at least one model")
    sampler = make_generator(seed, "random-search")
    entries = []
    for index in range(n_models):
        choices = sample_random_policy(encoder_roster, classifier_roster, sampler)
        model = Supernet.discrete(
            encoder_config, pretrained, choices, dist_a.n_way, make_generator(seed, "random-search", index),
            tau=tau, second_order=search_config.second_order,
        )
        train_policy(model, dist_a, train_episodes, search_config, make_generator(seed, "random-search", "train", index))
        report, _ = evaluate(
            model, dist_test, eval_episodes, seed=seed, config_hash=config_hash,
            policy_description=f"random-{index}: {model.describe()}",
        )
        entries.append(RandomSearchEntry(policy=[c.label for c in choices], report=report))

    mean = sum(e.report.mean_accuracy for e in entries) / len(entries)
    logger.info(f"Random search over {n_models} models: mean accuracy {mean:.4f}")
    return RandomSearchResult(entries=entries, mean_accuracy=mean)
