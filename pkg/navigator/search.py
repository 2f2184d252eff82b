"""Bi-level alternating optimization.

Step 1 updates the persistent policy parameters Θ on an episode from p(T_A);
Step 2 updates the stage logits on an episode from p(T_B). Both steps adapt
on the episode's support set first and differentiate the query loss.
"""

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import torch
from tqdm import tqdm

from logging_config import log_iteration_info, logger
from models.config import SearchConfig
from models.report import SearchHistory, SearchRecord
from navigator.errors import StateMismatch, TrainingDiverged
from navigator.supernet import Supernet, query_loss
from navigator.tasks import Episode, TaskDistribution

RecordSink = Callable[[SearchRecord], None]


@dataclass
class OuterOptimizers:
    theta: Optional[torch.optim.Optimizer]
    alpha: Optional[torch.optim.Optimizer]

    @classmethod
    def for_supernet(cls, supernet: Supernet, config: SearchConfig) -> "OuterOptimizers":
        theta_params = supernet.theta_parameters()
        alpha_params = supernet.alpha_parameters()
        return cls(
            theta=torch.optim.Adam(theta_params, lr=config.outer_lr_theta) if theta_params else None,
            alpha=torch.optim.Adam(alpha_params, lr=config.outer_lr_alpha) if alpha_params else None,
        )

    def state_dict(self) -> dict:
        return {
            "theta": self.theta.state_dict() if self.theta else None,
            "alpha": self.alpha.state_dict() if self.alpha else None,
        }

    def load_state_dict(self, state: dict):
        if self.theta and state.get("theta"):
            self.theta.load_state_dict(state["theta"])
        if self.alpha and state.get("alpha"):
            self.alpha.load_state_dict(state["alpha"])


def _expect_source(episode: Episode, tag: str):
    if episode.source_tag != tag:
        raise StateMismatch(f"expected an episode from distribution {tag}, got {episode.source_tag}")


def _gradient_step(loss: torch.Tensor, params: Sequence[torch.Tensor], optimizer: torch.optim.Optimizer,
                   clip_norm: float):
    """Apply one update to `params` only; nothing else receives a .grad."""
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    for param, grad in zip(params, grads):
        param.grad = None if grad is None else grad.detach()
    torch.nn.utils.clip_grad_norm_([p for p in params if p.grad is not None], clip_norm)
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)


def _checked_loss(supernet: Supernet, episode: Episode, step: str) -> torch.Tensor:
    loss = query_loss(supernet, episode)
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"{step} query loss became {loss.item()}")
    return loss


def outer_step_theta(supernet: Supernet, episode: Episode, optimizer: Optional[torch.optim.Optimizer],
                     clip_norm: float = 10.0) -> float:
    """Step 1: update RE_FIX stores, RE_FA copies and PL_FA initializations; logits untouched."""
    loss = _checked_loss(supernet, episode, "step-1")
    if optimizer is not None:
        _gradient_step(loss, supernet.theta_parameters(), optimizer, clip_norm)
    return loss.item()


def outer_step_alpha(supernet: Supernet, episode: Episode, optimizer: Optional[torch.optim.Optimizer],
                     clip_norm: float = 10.0) -> Optional[float]:
    """Step 2: update the logits of undecoded stages; Θ untouched."""
    params = supernet.alpha_parameters()
    if optimizer is None or not params:
        return None
    loss = _checked_loss(supernet, episode, "step-2")
    _gradient_step(loss, params, optimizer, clip_norm)
    return loss.item()


def meta_train(
    supernet: Supernet,
    dist_a: TaskDistribution,
    dist_b: Optional[TaskDistribution],
    iterations: int,
    optimizers: OuterOptimizers,
    generator: torch.Generator,
    clip_norm: float = 10.0,
    phase: str = "search",
    start_iteration: int = 0,
    history: Optional[SearchHistory] = None,
    on_record: Optional[RecordSink] = None,
    config_hash: Optional[str] = None,
    progress: bool = False,
) -> SearchHistory:
    """Alternate Step 1 / Step 2 for iterations start_iteration..iterations-1.

    With dist_b=None (or no undecoded stage left) only Step 1 runs.
    """
    history = history if history is not None else SearchHistory()
    try:
        for iteration in tqdm(range(start_iteration, iterations), desc=phase, disable=not progress):
            episode_a = dist_a.sample(generator)
            _expect_source(episode_a, "A")
            step1 = outer_step_theta(supernet, episode_a, optimizers.theta, clip_norm)
            step2 = None
            if dist_b is not None and supernet.alpha_parameters():
                episode_b = dist_b.sample(generator)
                _expect_source(episode_b, "B")
                step2 = outer_step_alpha(supernet, episode_b, optimizers.alpha, clip_norm)
            record = SearchRecord(
                iteration=iteration, phase=phase, step1_loss=step1, step2_loss=step2,
                alphas=supernet.alphas(), config_hash=config_hash,
            )
            history.append(record)
            log_iteration_info(record)
            if on_record is not None:
                on_record(record)
    except Exception as exc:
        logger.error(f"{phase} stopped after {len(history)} records: {exc}")
        exc.history = history.records
        raise
    return history


def run_search(
    supernet: Supernet,
    dist_a: TaskDistribution,
    dist_b: TaskDistribution,
    config: SearchConfig,
    generator: torch.Generator,
    optimizers: Optional[OuterOptimizers] = None,
    start_iteration: int = 0,
    on_record: Optional[RecordSink] = None,
    config_hash: Optional[str] = None,
    progress: bool = False,
) -> Tuple[Supernet, SearchHistory]:
    if set(dist_a.class_ids) & set(dist_b.class_ids) and dist_a.dataset is dist_b.dataset:
        raise StateMismatch("Step-1 and Step-2 task distributions share classes")
    optimizers = optimizers or OuterOptimizers.for_supernet(supernet, config)
    logger.info(
        f"Searching for {config.episodes_total} episodes "
        f"({config.n_way}-way {config.k_shot}-shot) from iteration {start_iteration}"
    )
    history = meta_train(
        supernet, dist_a, dist_b, config.episodes_total, optimizers, generator,
        clip_norm=config.clip_norm, phase="search", start_iteration=start_iteration,
        on_record=on_record, config_hash=config_hash, progress=progress,
    )
    logger.info(f"Search finished; policy weights {supernet.alphas()}")
    return supernet, history
