"""Byte-level corpus loading and windowing."""

import json
import logging
import typing as t
from pathlib import Path

import numpy as np
import numpy.typing as npt

from sdtp.core.errors import ConfigError, SdtpError

LOGGER: logging.Logger = logging.getLogger(__name__)

JSONL_SUFFIXES: t.Tuple[str, ...] = (".jsonl", ".ndjson")
TEXT_FIELD: str = "text"


class EmptyCorpusError(SdtpError, ValueError):
    """Raised when an input file holds no usable text."""

    def __init__(self, path: Path) -> None:
        self.path = path
        super().__init__(f"{path}: no text to read")


def encode(text: str) -> npt.NDArray[np.int64]:
    """UTF-8 bytes of `text` as token ids (vocabulary 256)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(
        np.int64
    )


def load_corpus(path: Path) -> npt.NDArray[np.int64]:
    """Token ids of a plain-text or JSON-lines file.

    JSON-lines files (`.jsonl`, `.ndjson`) contribute the `text` field of
    every record, records separated by a newline.

    Args:
        path (Path): Corpus file.

    Returns:
        NDArray[int64]: Byte ids.
    """
    if not path.is_file():
        raise ConfigError("io.corpus", f"{path} is not a readable file")
    if path.suffix in JSONL_SUFFIXES:
        parts: t.List[str] = []
        with path.open(encoding="utf-8") as handle:
            for number, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ConfigError(
                        "io.corpus", f"{path}:{number}: {exc.msg}"
                    ) from exc
                if not isinstance(record, dict) or TEXT_FIELD not in record:
                    raise ConfigError(
                        "io.corpus",
                        f"{path}:{number}: record has no {TEXT_FIELD!r}",
                    )
                parts.append(str(record[TEXT_FIELD]))
        tokens = encode("\n".join(parts))
    else:
        tokens = np.frombuffer(path.read_bytes(), dtype=np.uint8).astype(
            np.int64
        )
    if tokens.size == 0:
        raise EmptyCorpusError(path)
    LOGGER.info("Loaded %d bytes of corpus from %s", tokens.size, path)
    return tokens


def make_windows(
    tokens: npt.ArrayLike, length: int
) -> npt.NDArray[np.int64]:
    """Non-overlapping `length + 1` windows (inputs plus one label).

    Args:
        tokens (ArrayLike): Token ids.
        length (int): Input length per window.

    Returns:
        NDArray[int64]: `count x (length + 1)`; a short tail is dropped.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    count: int = (ids.shape[0] - 1) // length if ids.shape[0] > 1 else 0
    if count == 0:
        return np.zeros((0, length + 1), dtype=np.int64)
    starts = np.arange(count) * length
    return np.stack([ids[start:start + length + 1] for start in starts])


def split_holdout(
    windows: npt.NDArray[np.int64], fraction: float
) -> t.Tuple[npt.NDArray[np.int64], npt.NDArray[np.int64]]:
    """Leading windows for training, trailing `fraction` held out.

    At least one window is held out whenever `fraction > 0` and there are
    two or more windows.

    Args:
        windows (NDArray[int64]): All windows, in corpus order.
        fraction (float): Held-out share in [0, 1).

    Returns:
        Tuple: (training windows, held-out windows).
    """
    total: int = windows.shape[0]
    held: int = int(round(total * fraction))
    if fraction > 0.0 and total >= 2:
        held = max(1, held)
    held = min(held, total)
    return windows[: total - held], windows[total - held:]
