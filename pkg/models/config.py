import hashlib
import json
from enum import Enum
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from models.policy import PolicyKind, StrengthTag

class StrictModel(BaseModel):
    # Unknown keys are hard errors so a typo in a hyperparameter name never passes silently
    model_config = ConfigDict(extra="forbid")

class SyntheticKind(str, Enum):
    GAUSSIAN_CLUSTERS = "gaussian-clusters"
    DOMAIN_SHIFTED_GAUSSIAN = "domain-shifted-gaussian"
    RING_CLUSTERS = "ring-clusters"

class ShiftParams(StrictModel):
    mean_shift: float = Field(0.0, ge=0)
    cov_scale: float = Field(1.0, gt=0)
    mix: float = Field(0.0, ge=0, le=1)
    splits: List[Literal["train", "val", "test"]] = ["test"]

class SyntheticFamilySpec(StrictModel):
    kind: SyntheticKind = SyntheticKind.GAUSSIAN_CLUSTERS
    dim: int = Field(32, ge=2)
    class_pool_size: int = Field(30, ge=3)
    noise_scale: float = Field(0.5, gt=0)
    class_spread: float = Field(1.0, gt=0)
    examples_per_class: int = Field(40, ge=2)
    split_sizes: Tuple[int, int, int] = (20, 5, 5)
    shift_params: ShiftParams = ShiftParams()
    seed: int = 0

    @model_validator(mode="after")
    def check_split_sizes(self):
        if min(self.split_sizes) < 1:
            raise ValueError("every split needs at least one class")
        if sum(self.split_sizes) > self.class_pool_size:
            raise ValueError(
                f"split sizes {self.split_sizes} exceed class_pool_size {self.class_pool_size}"
            )
        return self

class ManifestSpec(StrictModel):
    root: str
    split_file: str

class ClassSplits(StrictModel):
    train: List[str]
    val: List[str]
    test: List[str]

class DatasetSpec(StrictModel):
    name: str = "synthetic"
    synthetic: Optional[SyntheticFamilySpec] = None
    manifest: Optional[ManifestSpec] = None
    class_splits: Optional[ClassSplits] = None
    input_shape: Optional[Tuple[int, ...]] = None

    @model_validator(mode="after")
    def check_source(self):
        if (self.synthetic is None) == (self.manifest is None):
            raise ValueError("exactly one of 'synthetic' or 'manifest' must be given")
        if self.manifest is not None and self.input_shape is None:
            raise ValueError("image manifests need an input_shape (H, W, C)")
        return self

class EncoderConfig(StrictModel):
    block_family: Literal["dense", "conv"] = "dense"
    stages: int = Field(4, ge=1)
    widths: List[int] = [64, 64, 64, 64]
    embedding_dim: int = 64
    kernel_size: int = Field(3, ge=1)

    @model_validator(mode="after")
    def check_widths(self):
        if len(self.widths) != self.stages:
            raise ValueError(f"widths has {len(self.widths)} entries for {self.stages} stages")
        if self.widths[-1] != self.embedding_dim:
            raise ValueError("the final stage width must equal embedding_dim")
        return self

class PretrainSchedule(StrictModel):
    steps: int = Field(500, ge=0)
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(64, ge=1)

class RosterConfig(StrictModel):
    strong_lr: float = Field(0.1, gt=0)
    weak_lr: float = Field(0.01, gt=0)
    inner_steps: int = Field(10, ge=1)
    encoder_kinds: List[PolicyKind] = [PolicyKind.RE_FIX, PolicyKind.RE_FT, PolicyKind.RE_FA]
    classifier_kinds: List[PolicyKind] = [PolicyKind.PL_DI, PolicyKind.PL_FT, PolicyKind.PL_FA]
    strengths: List[StrengthTag] = [StrengthTag.STRONG, StrengthTag.WEAK]
    tau: float = Field(10.0, gt=0)

    @model_validator(mode="after")
    def check_kinds(self):
        if not self.encoder_kinds or any(not k.is_encoder for k in self.encoder_kinds):
            raise ValueError("encoder_kinds must be a non-empty list of RE_* kinds")
        if not self.classifier_kinds or any(k.is_encoder for k in self.classifier_kinds):
            raise ValueError("classifier_kinds must be a non-empty list of PL_* kinds")
        if StrengthTag.FIXED in self.strengths:
            raise ValueError("strengths lists fine-tuning sub-candidates: strong and/or weak")
        return self

class SearchConfig(StrictModel):
    episodes_total: int = Field(1000, ge=0)
    outer_lr_theta: float = Field(1e-3, ge=0)
    outer_lr_alpha: float = Field(3e-3, ge=0)
    n_way: int = Field(5, ge=2)
    k_shot: int = Field(1, ge=1)
    q_per_class: int = Field(15, ge=1)
    clip_norm: float = Field(10.0, gt=0)
    second_order: bool = True
    checkpoint_every: int = Field(50, ge=1)

class DecodeSchedule(StrictModel):
    recover_episodes: int = Field(100, ge=0)
    final_episodes: int = Field(2000, ge=0)
    val_episodes: int = Field(50, ge=1)

    def total_iterations(self, search_episodes: int, n_stages: int) -> int:
        return search_episodes + n_stages * self.recover_episodes + self.final_episodes

class MultiCropConfig(StrictModel):
    n_views: int = Field(10, ge=1)
    transform: Literal["identity", "scale_crop"] = "scale_crop"
    min_scale: float = Field(0.8, gt=0, le=1)

class EvalConfig(StrictModel):
    n_episodes: int = Field(600, ge=1)
    k_shot: Optional[int] = Field(None, ge=1)
    q_per_class: int = Field(15, ge=1)
    multicrop: MultiCropConfig = MultiCropConfig()

class BaselineConfig(StrictModel):
    presets: List[Literal["protonet", "matchnet", "maml", "baselinepp", "finetune"]] = [
        "protonet", "matchnet", "maml", "baselinepp", "finetune"
    ]
    lr_grid: List[float] = [0.01, 0.1]
    finetune_steps: int = Field(100, ge=1)
    meta_train_episodes: int = Field(1000, ge=0)
    lr_select_episodes: int = Field(50, ge=1)
    random_models: int = Field(10, ge=1)
    random_train_episodes: Optional[int] = Field(None, ge=0)

class ExperimentConfig(StrictModel):
    seed: int = 0
    output_dir: str = "runs/default"
    precision: Literal["float32", "float64"] = "float32"
    cross_domain: bool = False
    dataset: DatasetSpec = DatasetSpec(synthetic=SyntheticFamilySpec())
    target: Optional[DatasetSpec] = None
    encoder: EncoderConfig = EncoderConfig()
    pretrain: PretrainSchedule = PretrainSchedule()
    roster: RosterConfig = RosterConfig()
    search: SearchConfig = SearchConfig()
    decode: DecodeSchedule = DecodeSchedule()
    eval: EvalConfig = EvalConfig()
    baselines: BaselineConfig = BaselineConfig()

    @model_validator(mode="after")
    def check_consistency(self):
        n_way = self.search.n_way
        for spec in (self.dataset, self.target):
            if spec is None or spec.synthetic is None:
                continue
            for split, size in zip(("train", "val", "test"), spec.synthetic.split_sizes):
                if size < n_way:
                    raise ValueError(f"{spec.name} {split} split has {size} classes, fewer than n_way={n_way}")
            needed = max(self.search.k_shot, self.eval.k_shot or 0) + max(
                self.search.q_per_class, self.eval.q_per_class
            )
            if spec.synthetic.examples_per_class < needed:
                raise ValueError(
                    f"{spec.name} has {spec.synthetic.examples_per_class} examples per class, "
                    f"episodes need {needed}"
                )
        return self

def config_hash(config: BaseModel) -> str:
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]
