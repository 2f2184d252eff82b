"""Versioned checkpoint container.

Every checkpoint is a torch-serialized dict:

    {"schema_version": 1, "kind": "pretrained" | "supernet" | "decoded",
     "config_hash": str, "seed": int, "payload": {...}}

Payloads hold only tensors and plain Python values so loading works with
weights_only=True.
"""

import hashlib
import json
from pathlib import Path
from typing import Any, List, Optional, Tuple

import torch

from logging_config import logger
from models.config import EncoderConfig
from models.policy import DecodedPolicy
from navigator.encoder import PretrainResult, StageParams
from navigator.errors import CheckpointError
from navigator.supernet import Supernet

CHECKPOINT_SCHEMA = 1
KINDS = ("pretrained", "supernet", "decoded")


def _digest(value: Any, digest) -> None:
    if isinstance(value, torch.Tensor):
        digest.update(f"tensor{tuple(value.shape)}{value.dtype}".encode())
        digest.update(value.detach().cpu().contiguous().numpy().tobytes())
    elif isinstance(value, dict):
        for key in sorted(value, key=str):
            digest.update(f"k:{key}".encode())
            _digest(value[key], digest)
    elif isinstance(value, (list, tuple)):
        digest.update(f"seq{len(value)}".encode())
        for item in value:
            _digest(item, digest)
    else:
        digest.update(json.dumps(value).encode())


def checkpoint_fingerprint(container: dict) -> str:
    """Content hash over tensor bytes and plain fields, independent of file encoding."""
    digest = hashlib.sha256()
    _digest(container, digest)
    return digest.hexdigest()[:16]


def save_checkpoint(path, kind: str, payload: dict, config_hash: str, seed: int) -> str:
    if kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind '{kind}'")
    container = {
        "schema_version": CHECKPOINT_SCHEMA,
        "kind": kind,
        "config_hash": config_hash,
        "seed": seed,
        "payload": payload,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(container, path)
    fingerprint = checkpoint_fingerprint(container)
    logger.info(f"Saved {kind} checkpoint {path} (content hash {fingerprint})")
    return fingerprint


def load_checkpoint(path, kind: str, expected_hash: Optional[str] = None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        container = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"checkpoint {path} could not be read: {e}")
    if not isinstance(container, dict) or container.get("schema_version") != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"checkpoint {path} has an unsupported schema")
    if container.get("kind") != kind:
        raise CheckpointError(f"checkpoint {path} holds a {container.get('kind')} model, expected {kind}")
    if expected_hash is not None and container["config_hash"] != expected_hash:
        logger.warning(
            f"Checkpoint {path} was written under config {container['config_hash']}, "
            f"current config is {expected_hash}"
        )
    return container


# pretrained encoder

def pretrained_payload(result: PretrainResult, encoder_config: EncoderConfig, input_shape: Tuple[int, ...]) -> dict:
    return {
        "encoder_config": encoder_config.model_dump(mode="json"),
        "input_shape": list(input_shape),
        "stages": [s.to_state() for s in result.stages],
        "head": [t.detach().clone() for t in result.head],
        "losses": list(result.losses),
    }


def pretrained_stages(container: dict) -> Tuple[EncoderConfig, List[StageParams]]:
    payload = container["payload"]
    return EncoderConfig(**payload["encoder_config"]), [StageParams.from_state(s) for s in payload["stages"]]


# supernet / decoded policy

def supernet_payload(
    supernet: Supernet,
    iteration: int,
    optimizer_state: Optional[dict] = None,
    generator: Optional[torch.Generator] = None,
) -> dict:
    return {
        "supernet": supernet.state_dict(),
        "iteration": iteration,
        "optimizers": optimizer_state,
        "generator_state": generator.get_state() if generator is not None else None,
    }


def restore_supernet(container: dict) -> Tuple[Supernet, int, Optional[dict], Optional[torch.Tensor]]:
    payload = container["payload"]
    return (
        Supernet.from_state(payload["supernet"]),
        payload["iteration"],
        payload.get("optimizers"),
        payload.get("generator_state"),
    )


def decoded_payload(supernet: Supernet, policy: DecodedPolicy) -> dict:
    return {"supernet": supernet.state_dict(), "policy": policy.model_dump(mode="json")}


def restore_decoded(container: dict) -> Tuple[Supernet, DecodedPolicy]:
    payload = container["payload"]
    return Supernet.from_state(payload["supernet"]), DecodedPolicy(**payload["policy"])
