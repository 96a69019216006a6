"""Checkpoint container: named arrays plus a JSON metadata blob in `.npz`."""

import json
import logging
import typing as t
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from sdtp.core.errors import SdtpError
from sdtp.core.globals import CHECKPOINT_FORMAT_VERSION
from sdtp.core.models import ModelParams
from sdtp.core.pruning import ScorerParams
from sdtp.schemas.model import ModelConfig
from sdtp.schemas.reports import TrainingMetadata
from sdtp.schemas.schedule import PruneSchedule

LOGGER: logging.Logger = logging.getLogger(__name__)

METADATA_KEY: str = "__metadata__"
MODEL_PREFIX: str = "model/"
SCORER_PREFIX: str = "scorer/"


class CheckpointFormatError(SdtpError, ValueError):
    """Raised when a file is not a readable checkpoint."""

    def __init__(self, path: Path, reason: str) -> None:
        self.path = path
        super().__init__(f"{path}: {reason}")


@dataclass
class Checkpoint:
    """Base model, optional scorers and how they were produced."""

    params: ModelParams
    scorers: ScorerParams | None = None
    schedule: PruneSchedule | None = None
    metadata: TrainingMetadata | None = None


def save_checkpoint(path: Path, checkpoint: Checkpoint) -> Path:
    """Write `checkpoint` to `path`, bit-exact at the stored precision.

    Args:
        path (Path): Destination `.npz` file.
        checkpoint (Checkpoint): What to store.

    Returns:
        Path: The written path.
    """
    arrays: t.Dict[str, np.ndarray] = {
        MODEL_PREFIX + name: values
        for name, values in checkpoint.params.arrays.items()
    }
    scorer_shape: t.Dict[str, int] | None = None
    if checkpoint.scorers is not None:
        scorers = checkpoint.scorers
        arrays.update(
            {
                SCORER_PREFIX + name: values
                for name, values in scorers.arrays.items()
            }
        )
        scorer_shape = {
            "n_stages": scorers.n_stages,
            "d_model": scorers.d_model,
            "d_hidden": scorers.d_hidden,
        }
    metadata: t.Dict[str, t.Any] = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": checkpoint.params.config.model_dump(mode="json"),
        "scorers": scorer_shape,
        "schedule": (
            checkpoint.schedule.model_dump(mode="json")
            if checkpoint.schedule is not None
            else None
        ),
        "training": (
            checkpoint.metadata.model_dump(mode="json")
            if checkpoint.metadata is not None
            else None
        ),
    }
    arrays[METADATA_KEY] = np.array(json.dumps(metadata, sort_keys=True))
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        np.savez(handle, **arrays)
    LOGGER.info("Checkpoint written to %s", path)
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    """Read a checkpoint written by `save_checkpoint`.

    Args:
        path (Path): Source `.npz` file.

    Returns:
        Checkpoint: The stored model, scorers and metadata.
    """
    if not path.is_file():
        raise CheckpointFormatError(path, "no such checkpoint")
    try:
        with np.load(path, allow_pickle=False) as archive:
            stored = {name: archive[name] for name in archive.files}
    except (OSError, ValueError) as exc:
        raise CheckpointFormatError(path, str(exc)) from exc
    if METADATA_KEY not in stored:
        raise CheckpointFormatError(path, "metadata block missing")
    metadata = json.loads(str(stored.pop(METADATA_KEY)))
    version = metadata.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointFormatError(
            path, f"unsupported format version {version}"
        )

    params = ModelParams(
        config=ModelConfig(**metadata["model_config"]),
        arrays={
            name[len(MODEL_PREFIX):]: values
            for name, values in stored.items()
            if name.startswith(MODEL_PREFIX)
        },
    )
    scorers: ScorerParams | None = None
    if metadata["scorers"] is not None:
        scorers = ScorerParams(
            arrays={
                name[len(SCORER_PREFIX):]: values
                for name, values in stored.items()
                if name.startswith(SCORER_PREFIX)
            },
            **metadata["scorers"],
        )
    return Checkpoint(
        params=params,
        scorers=scorers,
        schedule=(
            PruneSchedule(**metadata["schedule"])
            if metadata["schedule"] is not None
            else None
        ),
        metadata=(
            TrainingMetadata(**metadata["training"])
            if metadata["training"] is not None
            else None
        ),
    )
