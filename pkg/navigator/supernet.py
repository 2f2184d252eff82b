"""Continuous relaxation of per-stage policy sets into one differentiable network.

Each stage mixes its candidates' outputs with α = softmax(z). Inner adaptation
runs jointly through the mixture, so every candidate's gradient carries its own
α factor; decoding later folds that factor into the learning rate.
"""

import hashlib
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set

import torch
import torch.nn.functional as F

from models.config import EncoderConfig
from models.policy import PolicyCandidate, PolicyKind
from navigator.encoder import StageParams, forward_stage, pool
from navigator.errors import AdaptationDiverged, NumericError, StateMismatch
from navigator.policyspace import (
    PersistentPolicyState,
    Tensors,
    adaptation_loss,
    class_means,
    cosine_scores,
    gradients,
    init_candidate_params,
    negative_l2_scores,
    per_sample_cosine_scores,
)

SCHEMA_VERSION = 1

Masks = Dict[int, Set[int]]

GRADIENT_CONTRACT = {
    PolicyKind.RE_FIX: "shared",
    PolicyKind.RE_FT: "severed",
    PolicyKind.RE_FA: "meta",
    PolicyKind.PL_DI: "data",
    PolicyKind.PL_FT: "data-init-only",
    PolicyKind.PL_FA: "meta",
}


def policy_weights(logits: torch.Tensor, masked: Optional[Iterable[int]] = None) -> torch.Tensor:
    """α = softmax(z); masked candidates get exactly zero weight and the rest renormalize."""
    if logits.numel() < 1 or not torch.isfinite(logits).all():
        raise NumericError(f"policy logits must be finite and non-empty, got {logits.tolist()}")
    masked = set(masked or ())
    if not masked:
        return torch.softmax(logits, dim=0)
    if len(masked) >= logits.numel():
        raise StateMismatch("cannot mask every candidate of a stage")
    hidden = torch.zeros_like(logits, dtype=torch.bool)
    hidden[list(masked)] = True
    return torch.softmax(logits.masked_fill(hidden, float("-inf")), dim=0)


def search_space_size(n_stages: int, s_re_ft: int, s_re_fa: int, s_pl_ft: int, s_pl_fa: int) -> int:
    if n_stages < 1 or min(s_re_ft, s_re_fa, s_pl_ft, s_pl_fa) < 0:
        raise ValueError("search_space_size needs n_stages >= 1 and non-negative sub-candidate counts")
    return (1 + s_re_ft + s_re_fa) ** n_stages * (1 + s_pl_ft + s_pl_fa)


@dataclass
class StageSearchSpace:
    index: int
    label: str
    candidates: List[PolicyCandidate]
    logits: torch.Tensor
    shared: Optional[StageParams] = None
    own: Dict[int, Tensors] = field(default_factory=dict)
    decoded: bool = False
    family: str = "dense"

    @property
    def is_classifier(self) -> bool:
        return not self.candidates[0].kind.is_encoder

    def alpha(self, masked: Optional[Iterable[int]] = None) -> torch.Tensor:
        return policy_weights(self.logits, masked)

    def state_for(self, i: int) -> PersistentPolicyState:
        shared = self.shared.tensors if self.shared is not None else None
        return PersistentPolicyState(self.candidates[i].kind, shared=shared, own=self.own.get(i))

    def stage_params(self, tensors: Sequence[torch.Tensor]) -> StageParams:
        return StageParams(self.index, self.family, list(tensors))

    def persistent_tensors(self) -> Tensors:
        tensors = list(self.shared.tensors) if self.shared is not None else []
        for i in sorted(self.own):
            tensors.extend(self.own[i])
        return tensors

    def bank_count(self) -> int:
        return (self.shared is not None) + len(self.own)

    def collapse_to(self, winner: int, candidate: PolicyCandidate):
        """Keep only the winner (with its possibly fused candidate) at α = 1."""
        kind = candidate.kind
        self.own = {0: self.own[winner]} if winner in self.own else {}
        if kind not in (PolicyKind.RE_FIX, PolicyKind.RE_FT):
            self.shared = None
        self.candidates = [candidate]
        self.logits = torch.zeros(1, dtype=self.logits.dtype)
        self.decoded = True


@dataclass
class AdaptedParams:
    """Per-stage, per-candidate parameters after inner adaptation on one support set.

    Masked candidates hold None. Classifier entries are prototype matrices.
    """

    encoder: List[List[Optional[Tensors]]]
    classifier: List[Optional[torch.Tensor]]
    kinds: List[List[PolicyKind]]
    alphas: List[torch.Tensor]
    support_embeddings: torch.Tensor
    support_labels: torch.Tensor
    n_way: int

    def contract(self, stage: int, candidate: int) -> str:
        return GRADIENT_CONTRACT[self.kinds[stage][candidate]]


class Supernet:
    def __init__(
        self,
        encoder_config: EncoderConfig,
        stages: List[StageSearchSpace],
        n_way: int,
        tau: float = 10.0,
        metric: str = "cosine",
        prototype_mode: str = "mean",
        second_order: bool = True,
    ):
        self.encoder_config = encoder_config
        self.stages = stages
        self.n_way = n_way
        self.tau = tau
        self.metric = metric
        self.prototype_mode = prototype_mode
        self.second_order = second_order
        self._check_stages()

    def _check_stages(self):
        *encoder, classifier = self.stages
        if len(encoder) != self.encoder_config.stages:
            raise StateMismatch(f"{len(encoder)} encoder stages for a {self.encoder_config.stages}-stage encoder")
        for stage in encoder:
            if any(not c.kind.is_encoder for c in stage.candidates):
                raise StateMismatch(f"{stage.label} holds a classifier policy")
        if any(c.kind.is_encoder for c in classifier.candidates):
            raise StateMismatch("the classifier stage holds an encoder policy")

    @classmethod
    def build(
        cls,
        encoder_config: EncoderConfig,
        pretrained: Sequence[StageParams],
        encoder_roster: Sequence[Sequence[PolicyCandidate]],
        classifier_roster: Sequence[PolicyCandidate],
        n_way: int,
        generator: torch.Generator,
        tau: float = 10.0,
        metric: str = "cosine",
        prototype_mode: str = "mean",
        second_order: bool = True,
    ) -> "Supernet":
        """Every encoder candidate starts from the pretrained stage weights."""
        dtype = pretrained[0].tensors[0].dtype
        stages = []
        for l, (params, roster) in enumerate(zip(pretrained, encoder_roster)):
            kinds = {c.kind for c in roster}
            shared = params.detached(requires_grad=True) if kinds & {PolicyKind.RE_FIX, PolicyKind.RE_FT} else None
            own = {
                i: [t.detach().clone().requires_grad_() for t in params.tensors]
                for i, c in enumerate(roster) if c.kind == PolicyKind.RE_FA
            }
            stages.append(StageSearchSpace(
                index=l, label=f"stage{l + 1}", candidates=list(roster),
                logits=torch.zeros(len(roster), dtype=dtype, requires_grad=True),
                shared=shared, own=own, family=encoder_config.block_family,
            ))
        own = {
            i: [(torch.randn(n_way, encoder_config.embedding_dim, generator=generator, dtype=torch.float64) * 0.01)
                .to(dtype).requires_grad_()]
            for i, c in enumerate(classifier_roster) if c.kind == PolicyKind.PL_FA
        }
        stages.append(StageSearchSpace(
            index=len(pretrained), label="classifier", candidates=list(classifier_roster),
            logits=torch.zeros(len(classifier_roster), dtype=dtype, requires_grad=True), own=own,
        ))
        return cls(encoder_config, stages, n_way, tau, metric, prototype_mode, second_order)

    @classmethod
    def discrete(
        cls,
        encoder_config: EncoderConfig,
        pretrained: Sequence[StageParams],
        choices: Sequence[PolicyCandidate],
        n_way: int,
        generator: torch.Generator,
        **options,
    ) -> "Supernet":
        """A plain policy model: one candidate per stage (M encoder choices, then the classifier)."""
        *encoder_choices, classifier_choice = choices
        model = cls.build(
            encoder_config, pretrained, [[c] for c in encoder_choices], [classifier_choice],
            n_way, generator, **options,
        )
        for stage in model.stages:
            stage.logits = torch.zeros(1, dtype=stage.logits.dtype)
            stage.decoded = True
        return model

    @property
    def encoder_stages(self) -> List[StageSearchSpace]:
        return self.stages[:-1]

    @property
    def classifier(self) -> StageSearchSpace:
        return self.stages[-1]

    def theta_parameters(self) -> Tensors:
        return [t for stage in self.stages for t in stage.persistent_tensors()]

    def alpha_parameters(self) -> Tensors:
        return [stage.logits for stage in self.stages if not stage.decoded]

    def parameter_banks(self) -> int:
        return sum(stage.bank_count() for stage in self.stages)

    def alphas(self) -> Dict[str, List[float]]:
        with torch.no_grad():
            return {stage.label: stage.alpha().tolist() for stage in self.stages}

    def candidate_labels(self) -> Dict[str, List[str]]:
        return {stage.label: [c.label for c in stage.candidates] for stage in self.stages}

    def describe(self) -> str:
        return " | ".join(
            f"{stage.label}:{'+'.join(c.label for c in stage.candidates)}" for stage in self.stages
        )

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for stage in self.stages:
            digest.update(f"{stage.label}:{[c.label for c in stage.candidates]}:{stage.decoded}".encode())
            for tensor in [stage.logits, *stage.persistent_tensors()]:
                digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()[:16]

    def state_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "encoder_config": self.encoder_config.model_dump(mode="json"),
            "n_way": self.n_way,
            "tau": self.tau,
            "metric": self.metric,
            "prototype_mode": self.prototype_mode,
            "second_order": self.second_order,
            "stages": [
                {
                    "index": stage.index,
                    "label": stage.label,
                    "candidates": [c.model_dump(mode="json") for c in stage.candidates],
                    "logits": stage.logits.detach().clone(),
                    "shared": stage.shared.to_state() if stage.shared is not None else None,
                    "own": {i: [t.detach().clone() for t in ts] for i, ts in stage.own.items()},
                    "decoded": stage.decoded,
                }
                for stage in self.stages
            ],
        }

    @classmethod
    def from_state(cls, state: dict) -> "Supernet":
        if state.get("schema_version") != SCHEMA_VERSION:
            raise StateMismatch(f"unsupported supernet schema {state.get('schema_version')}")
        stages = []
        for entry in state["stages"]:
            decoded = entry["decoded"]
            stages.append(StageSearchSpace(
                index=entry["index"],
                label=entry["label"],
                candidates=[PolicyCandidate(**c) for c in entry["candidates"]],
                logits=entry["logits"].clone().requires_grad_(not decoded),
                shared=StageParams.from_state(entry["shared"], requires_grad=True) if entry["shared"] else None,
                own={int(i): [t.clone().requires_grad_() for t in ts] for i, ts in entry["own"].items()},
                decoded=decoded,
                family=state["encoder_config"]["block_family"],
            ))
        return cls(
            EncoderConfig(**state["encoder_config"]), stages, state["n_way"], state["tau"],
            state["metric"], state["prototype_mode"], state["second_order"],
        )

    # forward pieces

    def classifier_scores(self, kind: PolicyKind, prototypes: torch.Tensor, embeddings: torch.Tensor,
                          support_embeddings: torch.Tensor, support_labels: torch.Tensor) -> torch.Tensor:
        if self.metric == "neg_l2":
            return negative_l2_scores(prototypes, embeddings)
        if self.prototype_mode == "per_sample" and kind == PolicyKind.PL_DI:
            return per_sample_cosine_scores(support_embeddings, support_labels, embeddings, self.n_way, self.tau)
        return cosine_scores(prototypes, embeddings, self.tau)


def stage_output(
    stage: StageSearchSpace,
    inputs: torch.Tensor,
    adapted: Sequence[Optional[Tensors]],
    alpha: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Oˡ = Σᵢ αᵢ gˡ(O_prev; θ̂ᵢ) over the candidates with non-zero weight."""
    alpha = stage.alpha() if alpha is None else alpha
    if len(adapted) != len(stage.candidates):
        raise StateMismatch(f"{stage.label}: {len(adapted)} adapted entries for {len(stage.candidates)} candidates")
    output = None
    for i, tensors in enumerate(adapted):
        if tensors is None:
            if alpha[i] != 0:
                raise StateMismatch(f"{stage.label}: candidate {i} has weight but no adapted parameters")
            continue
        term = alpha[i] * forward_stage(stage.stage_params(tensors), inputs)
        output = term if output is None else output + term
    return output


def _embed(supernet: Supernet, inputs: torch.Tensor, encoder: List[List[Optional[Tensors]]],
           alphas: List[torch.Tensor]) -> torch.Tensor:
    activations = inputs
    for stage, adapted, alpha in zip(supernet.encoder_stages, encoder, alphas):
        activations = stage_output(stage, activations, adapted, alpha)
    return pool(activations)


def _mixed_scores(supernet: Supernet, embeddings: torch.Tensor, prototypes: List[Optional[torch.Tensor]],
                  alpha: torch.Tensor, support_embeddings: torch.Tensor, support_labels: torch.Tensor) -> torch.Tensor:
    scores = None
    for i, (candidate, weights) in enumerate(zip(supernet.classifier.candidates, prototypes)):
        if weights is None:
            continue
        term = alpha[i] * supernet.classifier_scores(
            candidate.kind, weights, embeddings, support_embeddings, support_labels
        )
        scores = term if scores is None else scores + term
    return scores


@dataclass
class _Adaptable:
    stage: int
    candidate: int
    kind: PolicyKind
    lr: float
    steps: int
    start: Tensors
    current: Tensors


def inner_adapt(
    supernet: Supernet,
    support_x: torch.Tensor,
    support_y: torch.Tensor,
    masks: Optional[Masks] = None,
    create_graph: Optional[bool] = None,
) -> AdaptedParams:
    """Joint full-batch SGD of every adaptable candidate through the mixture network.

    With create_graph the trajectory stays differentiable (exact meta-gradient);
    without it, meta-learned and data-initialized entries are reattached to their
    starting point with a detached update (first-order treatment).
    """
    if create_graph is None:
        create_graph = supernet.second_order
    masks = masks or {}
    n_way = supernet.n_way
    alphas = [stage.alpha(masks.get(stage.index)) for stage in supernet.stages]
    active = [
        [i for i in range(len(stage.candidates)) if i not in masks.get(stage.index, ())]
        for stage in supernet.stages
    ]
    kinds = [[c.kind for c in stage.candidates] for stage in supernet.stages]

    with torch.enable_grad():
        encoder: List[List[Optional[Tensors]]] = []
        for l, stage in enumerate(supernet.encoder_stages):
            encoder.append([
                init_candidate_params(stage.candidates[i], stage.state_for(i)) if i in active[l] else None
                for i in range(len(stage.candidates))
            ])

        classifier_stage = supernet.classifier
        m = len(supernet.stages) - 1
        embeddings = _embed(supernet, support_x, encoder, alphas[:-1])
        prototypes: List[Optional[torch.Tensor]] = [None] * len(classifier_stage.candidates)
        for i in active[m]:
            kind = classifier_stage.candidates[i].kind
            if kind != PolicyKind.PL_DI:
                prototypes[i] = init_candidate_params(
                    classifier_stage.candidates[i], classifier_stage.state_for(i), embeddings, support_y, n_way
                )[0]

        adaptables: List[_Adaptable] = []
        for l, stage in enumerate(supernet.stages):
            for i in active[l]:
                candidate = stage.candidates[i]
                if not candidate.kind.adapts:
                    continue
                start = encoder[l][i] if l < m else [prototypes[i]]
                start = [t if t.requires_grad else t.detach().clone().requires_grad_() for t in start]
                adaptables.append(_Adaptable(l, i, candidate.kind, candidate.inner_lr, candidate.inner_steps,
                                             start, list(start)))

        def write_back(entry: _Adaptable, tensors: Tensors):
            if entry.stage < m:
                encoder[entry.stage][entry.candidate] = tensors
            else:
                prototypes[entry.candidate] = tensors[0]

        total_steps = max((a.steps for a in adaptables), default=0)
        for step in range(total_steps):
            embeddings = _embed(supernet, support_x, encoder, alphas[:-1])
            current_prototypes = [
                class_means(embeddings, support_y, n_way)
                if i in active[m] and kinds[m][i] == PolicyKind.PL_DI else p
                for i, p in enumerate(prototypes)
            ]
            scores = _mixed_scores(supernet, embeddings, current_prototypes, alphas[-1], embeddings, support_y)
            loss = adaptation_loss(scores, support_y)
            if not torch.isfinite(loss):
                raise AdaptationDiverged(f"support loss became {loss.item()} at inner step {step}")

            stepping = [a for a in adaptables if a.steps > step]
            # PL_FT steps see the encoder as constant: its trajectory stays
            # differentiable in α and in its class-mean start only
            detached = [a for a in stepping if create_graph and a.kind == PolicyKind.PL_FT]
            joint = [a for a in stepping if not (create_graph and a.kind == PolicyKind.PL_FT)]
            grads = gradients(loss, [t for a in joint for t in a.current], create_graph=create_graph)
            if detached:
                frozen = embeddings.detach()
                frozen_prototypes = [
                    class_means(frozen, support_y, n_way)
                    if i in active[m] and kinds[m][i] == PolicyKind.PL_DI else p
                    for i, p in enumerate(prototypes)
                ]
                frozen_loss = adaptation_loss(
                    _mixed_scores(supernet, frozen, frozen_prototypes, alphas[-1], frozen, support_y), support_y
                )
                grads = grads + gradients(frozen_loss, [t for a in detached for t in a.current], create_graph=True)
            if not all(torch.isfinite(g).all() for g in grads):
                raise AdaptationDiverged(f"non-finite inner gradient at step {step}")

            offset = 0
            for entry in joint + detached:
                count = len(entry.current)
                entry_grads = grads[offset:offset + count]
                offset += count
                if not create_graph:
                    entry_grads = [g.detach() for g in entry_grads]
                updated = [t - entry.lr * g for t, g in zip(entry.current, entry_grads)]
                if not create_graph:
                    updated = [t.detach().requires_grad_() for t in updated]
                entry.current = updated
                write_back(entry, updated)

        for entry in adaptables:
            if entry.kind == PolicyKind.RE_FT and not create_graph:
                write_back(entry, [t.detach() for t in entry.current])
            elif not create_graph:
                write_back(entry, [s + (c - s).detach() for s, c in zip(entry.start, entry.current)])

        embeddings = _embed(supernet, support_x, encoder, alphas[:-1])
        for i in active[m]:
            if kinds[m][i] == PolicyKind.PL_DI:
                prototypes[i] = class_means(embeddings, support_y, n_way)

    return AdaptedParams(
        encoder=encoder,
        classifier=prototypes,
        kinds=kinds,
        alphas=alphas,
        support_embeddings=embeddings,
        support_labels=support_y,
        n_way=n_way,
    )


def predict(supernet: Supernet, adapted: AdaptedParams, query_x: torch.Tensor) -> torch.Tensor:
    """Query scores (|Q| × N) from already-adapted parameters."""
    embeddings = _embed(supernet, query_x, adapted.encoder, adapted.alphas[:-1])
    return _mixed_scores(
        supernet, embeddings, adapted.classifier, adapted.alphas[-1],
        adapted.support_embeddings, adapted.support_labels,
    )


def supernet_forward(supernet: Supernet, episode, masks: Optional[Masks] = None,
                     create_graph: Optional[bool] = None) -> torch.Tensor:
    if episode.n_way != supernet.n_way:
        raise StateMismatch(f"{episode.n_way}-way episode for a {supernet.n_way}-way supernet")
    adapted = inner_adapt(supernet, episode.support_x, episode.support_y, masks, create_graph)
    return predict(supernet, adapted, episode.query_x)


def query_loss(supernet: Supernet, episode, masks: Optional[Masks] = None,
               create_graph: Optional[bool] = None) -> torch.Tensor:
    return F.cross_entropy(supernet_forward(supernet, episode, masks, create_graph), episode.query_y)
