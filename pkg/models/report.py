import hashlib
import json
import math
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, Field

class EpisodeRecord(BaseModel):
    episode_index: int
    accuracy: Optional[float] = None
    n_correct: Optional[int] = None
    n_query: int
    failed: bool = False
    error: Optional[str] = None

class EvalReport(BaseModel):
    n_episodes: int
    n_failed: int = 0
    accuracies: List[float]
    mean_accuracy: float
    ci95: float
    n_way: int
    k_shot: int
    dataset: str
    policy_description: str
    policy_name: Optional[str] = None
    multicrop_views: Optional[int] = None
    config_hash: Optional[str] = None

    @classmethod
    def from_records(cls, records: List[EpisodeRecord], **fields) -> "EvalReport":
        records = sorted(records, key=lambda r: r.episode_index)
        accuracies = [r.accuracy for r in records if not r.failed]
        mean, ci = mean_and_ci95(accuracies)
        return cls(
            n_episodes=len(records),
            n_failed=sum(r.failed for r in records),
            accuracies=accuracies,
            mean_accuracy=mean,
            ci95=ci,
            **fields,
        )

    def fingerprint(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

def mean_and_ci95(accuracies: List[float]):
    """Mean and 1.96·s/√n with the n−1 sample standard deviation (0 when n < 2)."""
    if not accuracies:
        return float("nan"), float("nan")
    values = np.asarray(accuracies, dtype=np.float64)
    mean = float(values.mean())
    if len(values) < 2 or np.all(values == values[0]):
        return mean, 0.0
    std = float(values.std(ddof=1))
    return mean, 1.96 * std / math.sqrt(len(values))

class SearchRecord(BaseModel):
    iteration: int
    phase: str = "search"
    step1_loss: float
    step2_loss: Optional[float] = None
    alphas: Dict[str, List[float]] = Field(default_factory=dict)
    config_hash: Optional[str] = None

class RandomSearchEntry(BaseModel):
    policy: List[str]
    report: EvalReport

class RandomSearchResult(BaseModel):
    entries: List[RandomSearchEntry]
    mean_accuracy: float

    def as_report(self) -> EvalReport:
        """One table row: per-model mean accuracies, interval across models."""
        first = self.entries[0].report
        accuracies = [e.report.mean_accuracy for e in self.entries]
        mean, ci = mean_and_ci95(accuracies)
        return EvalReport(
            n_episodes=first.n_episodes,
            n_failed=sum(e.report.n_failed for e in self.entries),
            accuracies=accuracies,
            mean_accuracy=mean,
            ci95=ci,
            n_way=first.n_way,
            k_shot=first.k_shot,
            dataset=first.dataset,
            policy_description=f"random search over {len(self.entries)} models",
            policy_name="random-search",
            config_hash=first.config_hash,
        )

class SearchHistory(BaseModel):
    records: List[SearchRecord] = Field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: SearchRecord):
        self.records.append(record)

    def alpha_rows(self, labels: Dict[str, List[str]]):
        """Flat (iteration, stage, candidate_label, alpha) rows of the α trajectories."""
        for record in self.records:
            for stage, alphas in record.alphas.items():
                for label, alpha in zip(labels[stage], alphas):
                    yield record.iteration, stage, label, alpha
