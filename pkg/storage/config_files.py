"""YAML experiment configuration with line-level validation diagnostics."""

from pathlib import Path
from typing import Optional, Sequence, Union

import yaml
from pydantic import ValidationError

from logging_config import logger
from models.config import ExperimentConfig, config_hash
from navigator.errors import ConfigError


def _node_line(root: Optional[yaml.Node], loc: Sequence[Union[str, int]]) -> Optional[int]:
    """1-based line of the deepest YAML node reachable along a pydantic error location."""
    if root is None:
        return None
    node = root
    for part in loc:
        child = None
        if isinstance(node, yaml.MappingNode):
            for key, value in node.value:
                if key.value == str(part):
                    child = value if not isinstance(value, yaml.ScalarNode) else key
                    break
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
            child = node.value[part]
        if child is None:
            break
        node = child
    return node.start_mark.line + 1


def _diagnostics(source: str, text: str, error: ValidationError) -> list:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        root = None
    lines = []
    for item in error.errors():
        loc = tuple(item["loc"])
        line = _node_line(root, loc) or 1
        where = ".".join(str(p) for p in loc) or "<root>"
        lines.append(f"{source}:{line}: {where}: {item['msg']}")
    return lines


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        content = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else 1
        raise ConfigError(f"{source} is not valid YAML", [f"{source}:{line}: <yaml>: {e}"])
    if content is None:
        content = {}
    if not isinstance(content, dict):
        raise ConfigError(f"{source} must hold a mapping at the top level", [f"{source}:1: <root>: not a mapping"])
    try:
        return ExperimentConfig.model_validate(content)
    except ValidationError as e:
        raise ConfigError(f"{source} failed validation", _diagnostics(source, text, e))


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    config = parse_config(path.read_text(), str(path))
    logger.info(f"Loaded config {path} (hash {config_hash(config)})")
    return config


def dump_config(config: ExperimentConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as handle:
        handle.write(f"# config_hash: {config_hash(config)}\n")
        yaml.safe_dump(config.model_dump(mode="json"), handle, sort_keys=False)
    return path


def apply_overrides(config: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Override dotted fields ("search.episodes_total", "seed", ...) and re-validate."""
    data = config.model_dump(mode="json")
    for dotted, value in overrides.items():
        if value is None:
            continue
        target = data
        *parents, leaf = dotted.split(".")
        for key in parents:
            target = target[key]
        target[leaf] = value
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(
            "command-line overrides failed validation",
            [f"<override>:0: {'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()],
        )
