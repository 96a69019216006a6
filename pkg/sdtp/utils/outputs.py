"""Run output directory: collision check, writers, cleanup on failure."""

import csv
import json
import logging
import shutil
import typing as t
from pathlib import Path
from types import TracebackType

from pydantic import BaseModel

from sdtp.core.errors import SdtpError

LOGGER: logging.Logger = logging.getLogger(__name__)


class OutputExistsError(SdtpError, FileExistsError):
    """Raised when an output directory already holds files."""

    def __init__(self, path: Path) -> None:
        self.path = path
        super().__init__(
            f"output directory {path} is not empty; pass --force to "
            "overwrite"
        )


def dumps(payload: BaseModel | t.Any) -> str:
    """Stable JSON text: sorted keys, two-space indent, trailing newline."""
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


class OutputDirectory:
    """Files of one command run.

    Entering checks for collisions; leaving with an exception removes
    everything written during the run (the whole directory when this
    run created it).
    """

    def __init__(self, path: Path, force: bool = False) -> None:
        """Initialize OutputDirectory.

        Args:
            path (Path): Directory to write into.
            force (bool): Replace an existing non-empty directory.
        """
        self.path = path
        self.force = force
        self.created: bool = False
        self.written: t.List[Path] = []

    def __enter__(self) -> "OutputDirectory":
        if self.path.exists() and any(self.path.iterdir()):
            if not self.force:
                raise OutputExistsError(self.path)
            LOGGER.warning("Replacing contents of %s", self.path)
            shutil.rmtree(self.path)
        self.created = not self.path.exists()
        self.path.mkdir(parents=True, exist_ok=True)
        return self

    def __exit__(
        self,
        exc_type: t.Type[BaseException] | None,
        exc: BaseException | None,
        traceback: TracebackType | None,
    ) -> None:
        if exc_type is None:
            return
        LOGGER.warning("Run failed, removing partial outputs in %s", self.path)
        if self.created:
            shutil.rmtree(self.path, ignore_errors=True)
            return
        for written in self.written:
            written.unlink(missing_ok=True)

    def file(self, name: str) -> Path:
        """Path of an output file, tracked for cleanup."""
        target = self.path / name
        self.written.append(target)
        return target

    def write_text(self, name: str, text: str) -> Path:
        """Write a UTF-8 text file."""
        target = self.file(name)
        target.write_text(text, encoding="utf-8")
        return target

    def write_json(self, name: str, payload: BaseModel | t.Any) -> Path:
        """Write `payload` as stable JSON."""
        return self.write_text(name, dumps(payload))

    def write_jsonl(
        self, name: str, records: t.Iterable[BaseModel | t.Any]
    ) -> Path:
        """Write one compact JSON object per line."""
        lines = [
            json.dumps(
                (
                    record.model_dump(mode="json")
                    if isinstance(record, BaseModel)
                    else record
                ),
                sort_keys=True,
            )
            for record in records
        ]
        return self.write_text(name, "".join(line + "\n" for line in lines))

    def write_csv(
        self,
        name: str,
        header: t.Sequence[str],
        rows: t.Iterable[t.Sequence[t.Any]],
    ) -> Path:
        """Write a CSV file with a header row."""
        target = self.file(name)
        with target.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
        return target
