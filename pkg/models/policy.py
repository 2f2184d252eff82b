from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing import Optional, List, Dict
from enum import Enum

class PolicyKind(str, Enum):
    RE_FIX = "RE_FIX"
    RE_FT = "RE_FT"
    RE_FA = "RE_FA"
    PL_DI = "PL_DI"
    PL_FT = "PL_FT"
    PL_FA = "PL_FA"

    @property
    def is_encoder(self) -> bool:
        return self.value.startswith("RE_")

    @property
    def adapts(self) -> bool:
        """Kinds that run an inner SGD loop on the support set."""
        return self not in (PolicyKind.RE_FIX, PolicyKind.PL_DI)

    @property
    def meta_learned(self) -> bool:
        """Kinds owning a persistent initialization trained through the inner loop."""
        return self in (PolicyKind.RE_FA, PolicyKind.PL_FA)

class StrengthTag(str, Enum):
    STRONG = "strong"
    WEAK = "weak"
    FIXED = "fixed"

class PolicyCandidate(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: PolicyKind
    inner_lr: Optional[float] = None
    inner_steps: Optional[int] = None
    strength: StrengthTag = StrengthTag.FIXED

    @model_validator(mode="after")
    def check_hyperparameters(self):
        if self.kind.adapts:
            if self.inner_lr is None or self.inner_lr <= 0:
                raise ValueError(f"{self.kind.value} needs a positive inner_lr")
            if self.inner_steps is None or self.inner_steps < 1:
                raise ValueError(f"{self.kind.value} needs inner_steps >= 1")
        else:
            if self.inner_lr is not None or self.inner_steps is not None:
                raise ValueError(f"{self.kind.value} takes no inner_lr / inner_steps")
            if self.strength != StrengthTag.FIXED:
                raise ValueError(f"{self.kind.value} can only be tagged 'fixed'")
        return self

    @property
    def label(self) -> str:
        if self.inner_lr is None:
            return self.kind.value
        return f"{self.kind.value}(lr={self.inner_lr:g})"

class StageSelection(BaseModel):
    stage_index: int
    stage_label: str
    candidate: PolicyCandidate
    original_lr: Optional[float] = None
    fused_lr: Optional[float] = None
    alpha_at_decode: float
    argmax_alpha_label: str

class CandidateDrop(BaseModel):
    candidate_index: int
    label: str
    alpha: float
    baseline_accuracy: Optional[float] = None
    masked_accuracy: Optional[float] = None
    drop: Optional[float] = None

class PerturbationReport(BaseModel):
    stage_index: int
    stage_label: str
    n_episodes: int
    entries: List[CandidateDrop]
    forced_winner: Optional[int] = None

class DecodedPolicy(BaseModel):
    selections: List[StageSelection] = []
    reports: List[PerturbationReport] = []
    alpha_before_decoding: Dict[str, List[float]] = Field(default_factory=dict)
    config_hash: Optional[str] = None

    def describe(self) -> str:
        return " | ".join(f"{s.stage_label}:{s.candidate.label}" for s in self.selections)
