"""Staged feature encoder with explicit parameter tensors.

Stages are pure functions of (parameters, input) so any number of candidate
parameter copies can be pushed through the same stage during adaptation.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from tqdm import tqdm

from logging_config import logger
from models.config import EncoderConfig, PretrainSchedule
from navigator.errors import ShapeError, TrainingDiverged

NORM_EPS = 1e-5


@dataclass
class StageParams:
    index: int
    family: str
    # weight, bias, gain, shift
    tensors: List[torch.Tensor]

    @property
    def out_features(self) -> int:
        return self.tensors[0].shape[0]

    @property
    def in_features(self) -> int:
        return self.tensors[0].shape[1]

    def with_tensors(self, tensors: Sequence[torch.Tensor]) -> "StageParams":
        return StageParams(self.index, self.family, list(tensors))

    def detached(self, requires_grad: bool = False) -> "StageParams":
        return self.with_tensors([t.detach().clone().requires_grad_(requires_grad) for t in self.tensors])

    def to_state(self) -> dict:
        return {"index": self.index, "family": self.family, "tensors": [t.detach().clone() for t in self.tensors]}

    @classmethod
    def from_state(cls, state: dict, requires_grad: bool = False) -> "StageParams":
        return cls(state["index"], state["family"], [t.clone().requires_grad_(requires_grad) for t in state["tensors"]])


def forward_stage(params: StageParams, inputs: torch.Tensor) -> torch.Tensor:
    weight, bias, gain, shift = params.tensors
    inputs = inputs.to(weight.dtype)
    if params.family == "dense":
        if inputs.dim() != 2 or inputs.shape[-1] != weight.shape[1]:
            raise ShapeError(
                f"stage {params.index} expects (batch, {weight.shape[1]}), got {tuple(inputs.shape)}"
            )
        hidden = F.relu(F.linear(inputs, weight, bias))
        return F.layer_norm(hidden, (weight.shape[0],), gain, shift, eps=NORM_EPS)

    if inputs.dim() != 4 or inputs.shape[-1] != weight.shape[1] or min(inputs.shape[1:3]) < 2:
        raise ShapeError(
            f"stage {params.index} expects (batch, H>=2, W>=2, {weight.shape[1]}), got {tuple(inputs.shape)}"
        )
    hidden = F.conv2d(inputs.permute(0, 3, 1, 2), weight, bias, padding=weight.shape[-1] // 2)
    hidden = F.group_norm(F.relu(hidden), 1, gain, shift, eps=NORM_EPS)
    return F.avg_pool2d(hidden, 2).permute(0, 2, 3, 1)


def pool(activations: torch.Tensor) -> torch.Tensor:
    """Global average pooling for conv activations; identity for dense ones."""
    if activations.dim() == 4:
        return activations.mean(dim=(1, 2))
    return activations


def encode(stages: Sequence[StageParams], inputs: torch.Tensor) -> torch.Tensor:
    activations = inputs
    for params in stages:
        activations = forward_stage(params, activations)
    return pool(activations)


def init_stage_params(
    config: EncoderConfig,
    stage_index: int,
    in_features: int,
    generator: torch.Generator,
    dtype: torch.dtype = torch.float32,
) -> StageParams:
    width = config.widths[stage_index]
    if config.block_family == "dense":
        fan_in = in_features
        shape = (width, in_features)
    else:
        fan_in = in_features * config.kernel_size ** 2
        shape = (width, in_features, config.kernel_size, config.kernel_size)
    weight = torch.randn(shape, generator=generator, dtype=torch.float64) * (2.0 / fan_in) ** 0.5
    tensors = [
        weight.to(dtype),
        torch.zeros(width, dtype=dtype),
        torch.ones(width, dtype=dtype),
        torch.zeros(width, dtype=dtype),
    ]
    return StageParams(stage_index, config.block_family, tensors)


def stage_shapes(config: EncoderConfig, input_shape: Tuple[int, ...]) -> List[Tuple[int, ...]]:
    """Per-sample activation shape after each stage (conv stages halve H and W)."""
    shapes = []
    spatial = tuple(input_shape[:-1])
    for width in config.widths:
        if config.block_family == "conv":
            if len(spatial) != 2 or min(spatial) < 2:
                raise ShapeError(f"conv stages need (H>=2, W>=2, C) inputs, got {input_shape}")
            spatial = (spatial[0] // 2, spatial[1] // 2)
        shapes.append((*spatial, width))
    return shapes


def init_encoder(
    config: EncoderConfig,
    input_shape: Tuple[int, ...],
    generator: torch.Generator,
    dtype: torch.dtype = torch.float32,
) -> List[StageParams]:
    stages = []
    in_features = input_shape[-1]
    for stage_index in range(config.stages):
        stages.append(init_stage_params(config, stage_index, in_features, generator, dtype))
        in_features = config.widths[stage_index]
    return stages


@dataclass
class PretrainResult:
    stages: List[StageParams]
    head: List[torch.Tensor]
    losses: List[float]


def head_logits(stages: Sequence[StageParams], head: Sequence[torch.Tensor], inputs: torch.Tensor) -> torch.Tensor:
    weight, bias = head
    return F.linear(encode(stages, inputs), weight, bias)


def pretrain_backbone(
    train_x: torch.Tensor,
    train_y: torch.Tensor,
    config: EncoderConfig,
    schedule: PretrainSchedule,
    generator: torch.Generator,
    dtype: torch.dtype = torch.float32,
    progress: bool = False,
) -> PretrainResult:
    """Standard cross-entropy classification over every training class.

    The linear head is thrown away by callers; it is returned for diagnostics.
    """
    if len(train_x) == 0:
        raise ShapeError("pretraining needs a non-empty training split")
    n_classes = int(train_y.max()) + 1
    stages = [s.detached(requires_grad=True) for s in init_encoder(config, tuple(train_x.shape[1:]), generator, dtype)]
    head = [
        (torch.randn(n_classes, config.embedding_dim, generator=generator, dtype=torch.float64) * 0.01)
        .to(dtype).requires_grad_(),
        torch.zeros(n_classes, dtype=dtype, requires_grad=True),
    ]
    parameters = [t for s in stages for t in s.tensors] + head
    optimizer = torch.optim.Adam(parameters, lr=schedule.lr)
    batch_size = min(schedule.batch_size, len(train_x))

    logger.info(
        f"Pretraining {config.block_family} backbone: {config.stages} stages, "
        f"{n_classes} classes, {schedule.steps} steps"
    )
    losses = []
    for step in tqdm(range(schedule.steps), desc="pretrain", disable=not progress):
        batch = torch.randperm(len(train_x), generator=generator)[:batch_size]
        loss = F.cross_entropy(head_logits(stages, head, train_x[batch]), train_y[batch])
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"pretraining loss became {loss.item()} at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(loss.item())

    if losses:
        logger.info(f"Pretraining loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    return PretrainResult(
        stages=[s.detached() for s in stages],
        head=[t.detach() for t in head],
        losses=losses,
    )


def classification_accuracy(
    stages: Sequence[StageParams],
    head: Sequence[torch.Tensor],
    inputs: torch.Tensor,
    labels: torch.Tensor,
    batch_size: Optional[int] = 512,
) -> float:
    correct = 0
    with torch.no_grad():
        for start in range(0, len(inputs), batch_size):
            logits = head_logits(stages, head, inputs[start:start + batch_size])
            correct += (logits.argmax(dim=-1) == labels[start:start + batch_size]).sum().item()
    return correct / len(inputs)
