"""Perturbation-based progressive discretization of a trained supernet.

Stages are decoded front to back. A stage's winner is the candidate whose
masking costs the most validation accuracy; its α is fused into its learning
rate so a decoded adaptation step equals the step it took inside the mixture.
"""

from typing import List, Optional, Sequence, Tuple

import torch

from logging_config import logger
from models.config import DecodeSchedule, SearchConfig
from models.policy import CandidateDrop, DecodedPolicy, PerturbationReport, PolicyCandidate, StageSelection
from navigator.errors import AlreadyDecoded
from navigator.search import OuterOptimizers, RecordSink, meta_train
from navigator.seeding import make_generator
from navigator.supernet import Masks, Supernet, supernet_forward
from navigator.tasks import Episode, TaskDistribution


def episode_correct(supernet: Supernet, episode: Episode, masks: Optional[Masks] = None) -> int:
    logits = supernet_forward(supernet, episode, masks, create_graph=False)
    return int((logits.detach().argmax(dim=-1) == episode.query_y).sum())


def mean_accuracy(supernet: Supernet, episodes: Sequence[Episode], masks: Optional[Masks] = None) -> float:
    correct = sum(episode_correct(supernet, episode, masks) for episode in episodes)
    return correct / sum(len(episode.query_y) for episode in episodes)


def perturbation_scores(supernet: Supernet, stage_index: int, val_episodes: Sequence[Episode]) -> PerturbationReport:
    """Accuracy drop from masking each candidate in turn (α renormalized over survivors)."""
    stage = supernet.stages[stage_index]
    if stage.decoded:
        raise AlreadyDecoded(f"{stage.label} is already decoded")
    if not val_episodes:
        raise ValueError("perturbation scoring needs at least one validation episode")
    alpha = stage.alpha().tolist()
    if len(stage.candidates) == 1:
        return PerturbationReport(
            stage_index=stage_index, stage_label=stage.label, n_episodes=len(val_episodes),
            entries=[CandidateDrop(candidate_index=0, label=stage.candidates[0].label, alpha=alpha[0])],
            forced_winner=0,
        )

    baseline = mean_accuracy(supernet, val_episodes)
    entries = []
    for i, candidate in enumerate(stage.candidates):
        masked = mean_accuracy(supernet, val_episodes, {stage_index: {i}})
        entries.append(CandidateDrop(
            candidate_index=i, label=candidate.label, alpha=alpha[i],
            baseline_accuracy=baseline, masked_accuracy=masked, drop=baseline - masked,
        ))
        logger.debug(f"{stage.label} mask {candidate.label}: {baseline:.4f} -> {masked:.4f}")
    return PerturbationReport(
        stage_index=stage_index, stage_label=stage.label, n_episodes=len(val_episodes), entries=entries,
    )


def select_winner(report: PerturbationReport) -> int:
    """Largest drop; ties go to the larger α, then the lower index."""
    if report.forced_winner is not None:
        return report.forced_winner
    best = max(report.entries, key=lambda e: (e.drop, e.alpha, -e.candidate_index))
    return best.candidate_index


def fuse_learning_rate(candidate: PolicyCandidate, alpha: float) -> PolicyCandidate:
    """β ← β·α for adapting kinds; RE_FIX / PL_DI pass through."""
    if not candidate.kind.adapts:
        return candidate
    if not 0 < alpha <= 1:
        raise ValueError(f"policy weight must lie in (0, 1], got {alpha}")
    return candidate.model_copy(update={"inner_lr": candidate.inner_lr * alpha})


def argmax_alpha_label(supernet: Supernet, stage_index: int) -> str:
    stage = supernet.stages[stage_index]
    return stage.candidates[int(stage.alpha().argmax())].label


def decode_stage(
    supernet: Supernet, stage_index: int, val_episodes: Sequence[Episode]
) -> Tuple[Supernet, PerturbationReport, StageSelection]:
    stage = supernet.stages[stage_index]
    report = perturbation_scores(supernet, stage_index, val_episodes)
    winner = select_winner(report)
    alpha = stage.alpha().detach()[winner].item()
    original = stage.candidates[winner]
    fused = fuse_learning_rate(original, alpha)
    selection = StageSelection(
        stage_index=stage_index,
        stage_label=stage.label,
        candidate=fused,
        original_lr=original.inner_lr,
        fused_lr=fused.inner_lr,
        alpha_at_decode=alpha,
        argmax_alpha_label=argmax_alpha_label(supernet, stage_index),
    )
    stage.collapse_to(winner, fused)
    logger.info(
        f"Decoded {stage.label}: {original.label} (alpha {alpha:.3f}) -> {fused.label}; "
        f"argmax-alpha would pick {selection.argmax_alpha_label}"
    )
    return supernet, report, selection


def progressive_decode(
    supernet: Supernet,
    dist_a: TaskDistribution,
    dist_b: TaskDistribution,
    schedule: DecodeSchedule,
    search_config: SearchConfig,
    seed: int,
    on_record: Optional[RecordSink] = None,
    config_hash: Optional[str] = None,
    progress: bool = False,
) -> Tuple[Supernet, DecodedPolicy]:
    """Decode encoder stages 1..M then the classifier, with recovery training in between."""
    policy = DecodedPolicy(alpha_before_decoding=supernet.alphas(), config_hash=config_hash)
    recover_generator = make_generator(seed, "recover")
    for stage in supernet.stages:
        val_generator = make_generator(seed, "decode", stage.index)
        val_episodes = [dist_b.sample(val_generator) for _ in range(schedule.val_episodes)]
        _, report, selection = decode_stage(supernet, stage.index, val_episodes)
        policy.reports.append(report)
        policy.selections.append(selection)

        # decoding dropped banks and logits, so the optimizers restart on what is left
        optimizers = OuterOptimizers.for_supernet(supernet, search_config)
        meta_train(
            supernet, dist_a, dist_b, schedule.recover_episodes, optimizers, recover_generator,
            clip_norm=search_config.clip_norm, phase=f"recover-{stage.label}",
            on_record=on_record, config_hash=config_hash, progress=progress,
        )

    optimizers = OuterOptimizers.for_supernet(supernet, search_config)
    meta_train(
        supernet, dist_a, None, schedule.final_episodes, optimizers, make_generator(seed, "finetune"),
        clip_norm=search_config.clip_norm, phase="finetune",
        on_record=on_record, config_hash=config_hash, progress=progress,
    )
    logger.info(f"Decoded policy: {policy.describe()}")
    return supernet, policy


def decode_order(supernet: Supernet) -> List[str]:
    return [stage.label for stage in supernet.stages]
