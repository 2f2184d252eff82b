from pydantic import BaseModel
from typing import Optional, List, Dict

class RunSummary(BaseModel):
    name: str
    config_hash: Optional[str] = None
    stages: List[str] = []
    has_pretrained: bool = False
    has_supernet: bool = False
    has_decoded_policy: bool = False
    reports: List[str] = []

class RunDetail(RunSummary):
    config: Dict = {}
    artifacts: List[str] = []

class PolicyRow(BaseModel):
    stage: str
    kind: str
    original_lr: Optional[float] = None
    fused_lr: Optional[float] = None
    alpha: float
    argmax_alpha: str

class ComparisonRow(BaseModel):
    policy: str
    cells: Dict[str, str]
    mean_accuracy: Dict[str, float]
    ci95: Dict[str, float]

class ComparisonTable(BaseModel):
    columns: List[str]
    rows: List[ComparisonRow]
    config_hashes: List[str]
