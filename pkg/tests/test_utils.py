import json
import logging

import numpy as np
import pytest

from sdtp.core.errors import ConfigError
from sdtp.core.kv_cache import PolicyKind
from sdtp.core.models import init_model
from sdtp.core.pruning import build_schedule, init_scorers
from sdtp.utils.checkpoints import (
    Checkpoint,
    CheckpointFormatError,
    load_checkpoint,
    save_checkpoint,
)
from sdtp.utils.configs import load_run_config, override
from sdtp.utils.corpus import (
    EmptyCorpusError,
    encode,
    load_corpus,
    make_windows,
    split_holdout,
)
from sdtp.utils.outputs import OutputDirectory, OutputExistsError, dumps


def test_make_windows_shares_one_label_token():
    windows = make_windows(np.arange(10), 3)
    assert windows.tolist() == [[0, 1, 2, 3], [3, 4, 5, 6], [6, 7, 8, 9]]
    assert make_windows(np.arange(3), 4).shape == (0, 5)


def test_split_holdout_keeps_at_least_one_window():
    windows = make_windows(np.arange(40), 4)
    train, held = split_holdout(windows, 0.1)
    assert held.shape[0] == 1 and train.shape[0] == 8
    train, held = split_holdout(windows, 0.0)
    assert held.shape[0] == 0


def test_load_corpus_text_and_jsonl(tmp_path):
    text = tmp_path / "notes.txt"
    text.write_text("héllo", encoding="utf-8")
    assert load_corpus(text).tolist() == encode("héllo").tolist()
    lines = tmp_path / "notes.jsonl"
    lines.write_text(
        '{"text": "ab"}\n\n{"text": "cd"}\n', encoding="utf-8"
    )
    assert bytes(load_corpus(lines).tolist()) == b"ab\ncd"


def test_load_corpus_errors(tmp_path):
    empty = tmp_path / "empty.txt"
    empty.write_text("", encoding="utf-8")
    with pytest.raises(EmptyCorpusError):
        load_corpus(empty)
    with pytest.raises(ConfigError):
        load_corpus(tmp_path / "missing.txt")
    broken = tmp_path / "broken.jsonl"
    broken.write_text('{"body": "x"}\n', encoding="utf-8")
    with pytest.raises(ConfigError) as info:
        load_corpus(broken)
    assert ":1:" in str(info.value)


def test_run_config_defaults_and_overrides(tmp_path):
    config = load_run_config(None)
    assert config.schedule.n_stages == 10
    assert config.kv.kind == PolicyKind.NONE
    path = tmp_path / "run.json"
    path.write_text(
        json.dumps({"schedule": {"S": 2, "r": 0.5}, "seed": 3}),
        encoding="utf-8",
    )
    loaded = load_run_config(path)
    assert loaded.schedule.n_stages == 2 and loaded.train.seed == 3
    updated = override(loaded, {"train.epochs": 5, "seed": None})
    assert updated.train.epochs == 5 and updated.seed == 3


@pytest.mark.parametrize(
    "document, field",
    [
        ({"schedule": {"r": 1.5}}, "schedule.r"),
        ({"train": {"unknown": 1}}, "train.unknown"),
        ([1, 2], "config"),
    ],
)
def test_run_config_errors_name_the_field(tmp_path, document, field):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(document), encoding="utf-8")
    with pytest.raises(ConfigError) as info:
        load_run_config(path)
    assert info.value.field == field


def test_output_directory_refuses_to_overwrite(tmp_path):
    target = tmp_path / "run"
    with OutputDirectory(target) as out:
        out.write_json("a.json", {"b": 1, "a": 2})
    assert (target / "a.json").read_text() == dumps({"a": 2, "b": 1})
    with pytest.raises(OutputExistsError):
        with OutputDirectory(target):
            pass
    with OutputDirectory(target, force=True) as out:
        out.write_text("c.txt", "c")
    assert sorted(p.name for p in target.iterdir()) == ["c.txt"]


def test_failed_run_removes_partial_outputs(tmp_path):
    target = tmp_path / "run"
    with pytest.raises(RuntimeError):
        with OutputDirectory(target) as out:
            out.write_text("partial.txt", "x")
            raise RuntimeError("boom")
    assert not target.exists()


def test_checkpoint_round_trip_is_exact(tmp_path, tiny_config):
    params = init_model(tiny_config)
    schedule = build_schedule(2, 0.8, 1, 1, 4)
    scorers = init_scorers(2, tiny_config.d_model, seed=1)
    path = save_checkpoint(
        tmp_path / "ckpt.npz",
        Checkpoint(params=params, scorers=scorers, schedule=schedule),
    )
    loaded = load_checkpoint(path)
    assert loaded.params.checksum() == params.checksum()
    assert loaded.scorers is not None
    assert loaded.scorers.checksum() == scorers.checksum()
    assert loaded.schedule == schedule
    assert loaded.params.frozen


def test_checkpoint_rejects_other_files(tmp_path):
    path = tmp_path / "junk.npz"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_explicit_train_seed_is_replaced_with_a_warning(tmp_path, caplog):
    path = tmp_path / "run.json"
    path.write_text(
        json.dumps({"train": {"seed": 7}, "seed": 3}), encoding="utf-8"
    )
    with caplog.at_level(logging.WARNING, logger="sdtp.schemas.config"):
        loaded = load_run_config(path)
    assert loaded.train.seed == 3
    assert "train.seed 7 is replaced by the run seed 3" in caplog.text
    caplog.clear()
    with caplog.at_level(logging.WARNING, logger="sdtp.schemas.config"):
        updated = override(loaded, {"seed": 5})
    assert updated.train.seed == 5
    assert caplog.text == ""
