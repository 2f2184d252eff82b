"""The six adaptation policy kinds, their initialization rules, inner SGD and scoring."""

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from models.config import RosterConfig
from models.policy import PolicyCandidate, PolicyKind, StrengthTag
from navigator.errors import AdaptationDiverged, DegenerateVector, ShapeError, StateMismatch

Tensors = List[torch.Tensor]


def stage_candidates(kinds: Sequence[PolicyKind], config: RosterConfig) -> List[PolicyCandidate]:
    """Expand policy kinds into sub-candidates (one per strength for adapting kinds)."""
    candidates = []
    for kind in kinds:
        if not kind.adapts:
            candidates.append(PolicyCandidate(kind=kind))
            continue
        for strength in config.strengths:
            lr = config.strong_lr if strength == StrengthTag.STRONG else config.weak_lr
            candidates.append(
                PolicyCandidate(kind=kind, inner_lr=lr, inner_steps=config.inner_steps, strength=strength)
            )
    return candidates


def default_roster(config: RosterConfig, n_stages: int) -> Tuple[List[List[PolicyCandidate]], List[PolicyCandidate]]:
    encoder = [stage_candidates(config.encoder_kinds, config) for _ in range(n_stages)]
    return encoder, stage_candidates(config.classifier_kinds, config)


@dataclass
class PersistentPolicyState:
    """Persistent parameters a candidate draws on.

    shared: the stage's RE_FIX store (also the starting point of RE_FT).
    own: an RE_FA stage copy or the PL_FA prototype initialization.
    """

    kind: PolicyKind
    shared: Optional[Tensors] = None
    own: Optional[Tensors] = None


def _check_finite(values: Sequence[torch.Tensor], what: str):
    for value in values:
        if not torch.isfinite(value).all():
            raise AdaptationDiverged(f"non-finite {what} during inner adaptation")


def gradients(loss: torch.Tensor, theta: Sequence[torch.Tensor], create_graph: bool) -> Tensors:
    theta = list(theta)
    if not theta or not loss.requires_grad:
        return [torch.zeros_like(t) for t in theta]
    grads = torch.autograd.grad(loss, list(theta), create_graph=create_graph, allow_unused=True)
    return [torch.zeros_like(t) if g is None else g for t, g in zip(theta, grads)]


def sgd_adapt(
    theta0: Sequence[torch.Tensor],
    loss_fn: Callable[[Tensors], torch.Tensor],
    lr: float,
    steps: int,
    retain_meta_gradient: bool = False,
) -> Tensors:
    """Full-batch gradient descent θ ← θ − lr·∇L for `steps` steps.

    With retain_meta_gradient the returned tensors stay differentiable with
    respect to theta0 through the whole trajectory; otherwise it is severed.
    """
    if lr <= 0 or steps < 1:
        raise ValueError(f"sgd_adapt needs lr > 0 and steps >= 1, got lr={lr}, steps={steps}")
    theta = [
        t if retain_meta_gradient and t.requires_grad else t.detach().clone().requires_grad_()
        for t in theta0
    ]
    for _ in range(steps):
        loss = loss_fn(theta)
        _check_finite([loss], "loss")
        grads = gradients(loss, theta, create_graph=retain_meta_gradient)
        _check_finite(grads, "gradient")
        theta = [t - lr * g for t, g in zip(theta, grads)]
        if not retain_meta_gradient:
            theta = [t.detach().requires_grad_() for t in theta]
    if not retain_meta_gradient:
        theta = [t.detach() for t in theta]
    return theta


def class_means(embeddings: torch.Tensor, labels: torch.Tensor, n_way: int) -> torch.Tensor:
    """Row i is the mean embedding of class i (relabelled class order)."""
    one_hot = F.one_hot(labels, n_way).to(embeddings.dtype)
    counts = one_hot.sum(dim=0)
    if (counts == 0).any():
        raise StateMismatch(f"support set lacks examples for classes {torch.nonzero(counts == 0).flatten().tolist()}")
    return (one_hot.t() @ embeddings) / counts.unsqueeze(1)


def init_candidate_params(
    candidate: PolicyCandidate,
    state: PersistentPolicyState,
    support_embeddings: Optional[torch.Tensor] = None,
    support_labels: Optional[torch.Tensor] = None,
    n_way: Optional[int] = None,
) -> Tensors:
    """Starting parameters θ0 of a candidate for one episode.

    Gradient-flow contract:
      RE_FIX  the shared store itself (outer gradient reaches it)
      RE_FT   a severed copy of the shared store
      RE_FA   the candidate's own persistent copy (meta-gradient retained)
      PL_DI   class means of the support embeddings (gradient to the encoder)
      PL_FT   same start as PL_DI; the inner trajectory is severed by the caller
      PL_FA   the persistent prototype initialization (meta-gradient retained)
    """
    kind = candidate.kind
    if state.kind != kind:
        raise StateMismatch(f"{kind.value} candidate given {state.kind.value} state")
    if kind in (PolicyKind.RE_FIX, PolicyKind.RE_FT):
        if state.shared is None:
            raise StateMismatch(f"{kind.value} needs the stage's shared parameters")
        if kind == PolicyKind.RE_FIX:
            return list(state.shared)
        return [t.detach().clone().requires_grad_() for t in state.shared]
    if kind in (PolicyKind.RE_FA, PolicyKind.PL_FA):
        if state.own is None:
            raise StateMismatch(f"{kind.value} needs its own persistent parameters")
        if kind == PolicyKind.PL_FA and n_way is not None and state.own[0].shape[0] != n_way:
            raise StateMismatch(f"PL_FA initialization has {state.own[0].shape[0]} rows for a {n_way}-way episode")
        return [t if t.requires_grad else t.detach().clone().requires_grad_() for t in state.own]
    if support_embeddings is None or support_labels is None or n_way is None:
        raise StateMismatch(f"{kind.value} needs support embeddings, labels and n_way")
    return [class_means(support_embeddings, support_labels, n_way)]


def _check_nonzero(matrix: torch.Tensor, what: str) -> torch.Tensor:
    norms = matrix.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise DegenerateVector(f"zero-norm {what}")
    return matrix / norms


def cosine_scores(prototypes: torch.Tensor, embeddings: torch.Tensor, tau: float = 10.0) -> torch.Tensor:
    """s_i = τ·⟨w_i, v⟩ / (‖w_i‖‖v‖); accepts a single embedding or a (batch, C) matrix."""
    if prototypes.shape[-1] != embeddings.shape[-1]:
        raise ShapeError(f"prototype dim {prototypes.shape[-1]} vs embedding dim {embeddings.shape[-1]}")
    return tau * _check_nonzero(embeddings, "embedding") @ _check_nonzero(prototypes, "prototype").t()


def negative_l2_scores(prototypes: torch.Tensor, embeddings: torch.Tensor) -> torch.Tensor:
    if prototypes.shape[-1] != embeddings.shape[-1]:
        raise ShapeError(f"prototype dim {prototypes.shape[-1]} vs embedding dim {embeddings.shape[-1]}")
    return -((embeddings.unsqueeze(-2) - prototypes) ** 2).sum(dim=-1)


def per_sample_cosine_scores(
    support_embeddings: torch.Tensor,
    support_labels: torch.Tensor,
    embeddings: torch.Tensor,
    n_way: int,
    tau: float = 10.0,
) -> torch.Tensor:
    """Cosine score against every support example, averaged within each class."""
    per_sample = cosine_scores(support_embeddings, embeddings, tau)
    one_hot = F.one_hot(support_labels, n_way).to(per_sample.dtype)
    return (per_sample @ one_hot) / one_hot.sum(dim=0)


def adaptation_loss(scores: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(scores, labels)
