"""Run configuration loading with located diagnostics."""

import json
import logging
import typing as t
from pathlib import Path

from pydantic import ValidationError

from sdtp.core.errors import ConfigError
from sdtp.schemas.config import RunConfig
from sdtp.schemas.profile import ArchProfile

LOGGER: logging.Logger = logging.getLogger(__name__)


def field_path(location: t.Sequence[t.Union[int, str]]) -> str:
    """Dotted path of a pydantic error location."""
    return ".".join(str(part) for part in location) or "<root>"


def validate_run_config(payload: t.Mapping[str, t.Any]) -> RunConfig:
    """Validate a decoded config document.

    Args:
        payload (Mapping[str, Any]): Decoded JSON object.

    Returns:
        RunConfig: The validated config.
    """
    try:
        return RunConfig.model_validate(payload)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise ConfigError(field_path(first["loc"]), first["msg"]) from exc


def read_json_object(path: Path, field: str) -> t.Dict[str, t.Any]:
    """Decode a JSON file whose top level must be an object.

    Args:
        path (Path): File to read.
        field (str): Name reported in a `ConfigError`.

    Returns:
        Dict[str, Any]: The decoded object.
    """
    if not path.is_file():
        raise ConfigError(field, f"{path} is not a readable file")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(
            field,
            f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}",
        ) from exc
    if not isinstance(payload, dict):
        raise ConfigError(field, f"{path}: top level must be an object")
    return payload


def load_run_config(path: Path | None) -> RunConfig:
    """Read and validate a JSON run config; defaults when `path` is None.

    Args:
        path (Path | None): Config file.

    Returns:
        RunConfig: The validated config.
    """
    if path is None:
        return RunConfig()
    payload = read_json_object(path, "config")
    LOGGER.debug("Loaded run config from %s", path)
    return validate_run_config(payload)


def load_arch_profile(path: Path) -> ArchProfile:
    """Read a custom architecture profile from a JSON file.

    Args:
        path (Path): Profile file with the `ArchProfile` fields; `name`
            defaults to the file stem.

    Returns:
        ArchProfile: The validated profile.
    """
    payload = read_json_object(path, "--profile")
    payload.setdefault("name", path.stem)
    try:
        profile = ArchProfile.model_validate(payload)
    except ValidationError as exc:
        first = exc.errors()[0]
        where: str = field_path(first["loc"])
        raise ConfigError(f"--profile.{where}", first["msg"]) from exc
    LOGGER.debug("Loaded architecture profile %s from %s", profile.name, path)
    return profile


def override(config: RunConfig, updates: t.Mapping[str, t.Any]) -> RunConfig:
    """Apply dotted-path overrides (flags win over the file).

    Args:
        config (RunConfig): Base config.
        updates (Mapping[str, Any]): e.g. `{"train.baseline": True}`;
            None values are skipped.

    Returns:
        RunConfig: A re-validated copy.
    """
    payload: t.Dict[str, t.Any] = config.model_dump(
        mode="json", by_alias=False
    )
    # train.seed is derived from the run seed
    payload.get("train", {}).pop("seed", None)
    for dotted, value in updates.items():
        if value is None:
            continue
        node = payload
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return validate_run_config(payload)
