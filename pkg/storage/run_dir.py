import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

from navigator.errors import MissingArtifact

# Load environment variables
load_dotenv()

# Directory holding one subdirectory per experiment run
RUNS_ROOT = os.getenv("RUNS_ROOT", "runs")

# Artifact file names inside a run directory
CONFIG_FILE = "config.yaml"
PRETRAINED_CHECKPOINT = "pretrained.pt"
SUPERNET_CHECKPOINT = "supernet.pt"
DECODED_CHECKPOINT = "decoded.pt"
HISTORY_FILE = "history.jsonl"
ALPHA_TRAJECTORY_FILE = "alpha_trajectory.csv"
ALPHA_SNAPSHOT_FILE = "alpha_before_decoding.json"
PERTURBATION_FILE = "perturbation.jsonl"
POLICY_FILE = "policy.json"
CANDIDATES_FILE = "candidates.json"
POLICY_SUMMARY_TXT = "policy_summary.txt"
POLICY_SUMMARY_CSV = "policy_summary.csv"
REPORTS_DIR = "reports"
TABLES_DIR = "tables"
PLOT_DIR = "plot_data"


@dataclass
class RunDir:
    path: Path

    @classmethod
    def at(cls, path) -> "RunDir":
        return cls(Path(path))

    @property
    def name(self) -> str:
        return self.path.name

    def ensure(self) -> "RunDir":
        for sub in ("", REPORTS_DIR, TABLES_DIR, PLOT_DIR):
            (self.path / sub).mkdir(parents=True, exist_ok=True)
        return self

    def file(self, name: str) -> Path:
        return self.path / name

    def require(self, name: str) -> Path:
        target = self.path / name
        if not target.exists():
            raise MissingArtifact(f"run '{self.name}' has no {name}")
        return target

    def report_path(self, name: str) -> Path:
        return self.path / REPORTS_DIR / f"{name}.json"

    def episodes_path(self, name: str) -> Path:
        return self.path / REPORTS_DIR / f"{name}.episodes.jsonl"

    def report_names(self) -> List[str]:
        reports = self.path / REPORTS_DIR
        if not reports.is_dir():
            return []
        return sorted(p.stem for p in reports.glob("*.json"))

    def artifacts(self) -> List[str]:
        return sorted(
            str(p.relative_to(self.path)) for p in self.path.rglob("*") if p.is_file()
        )


def runs_root(root: Optional[str] = None) -> Path:
    return Path(root or os.getenv("RUNS_ROOT", RUNS_ROOT))


def list_runs(root: Optional[str] = None) -> List[RunDir]:
    base = runs_root(root)
    if not base.is_dir():
        return []
    return [RunDir(p) for p in sorted(base.iterdir()) if p.is_dir() and (p / CONFIG_FILE).exists()]


def resolve_run(name: str, root: Optional[str] = None) -> RunDir:
    # run names are single path components
    if not name or "/" in name or "\\" in name or name in (".", ".."):
        raise MissingArtifact(f"invalid run name '{name}'")
    run = RunDir(runs_root(root) / name)
    if not run.path.is_dir():
        raise MissingArtifact(f"run '{name}' not found under {runs_root(root)}")
    return run
