import numpy as np
import pytest
import torch

from refineseg import RefinerModel, TrainConfig
from refineseg.checkpoint import (CheckpointError, apply_params, load_checkpoint, load_model,
                                  save_checkpoint, save_model)

from .conftest import randomize_, tiny_config


def archive_bytes(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


def test_round_trip_is_byte_identical(tmp_path, tiny_model):
    randomize_(tiny_model)
    save_model(tiny_model, tmp_path / "a", TrainConfig(lr=5e-4))
    model = load_model(tmp_path / "a")
    save_model(model, tmp_path / "b", TrainConfig(lr=5e-4))
    assert archive_bytes(tmp_path / "a") == archive_bytes(tmp_path / "b")
    for k, v in tiny_model.state_dict().items():
        assert torch.equal(v, model.state_dict()[k])
    assert model.config == tiny_model.config


def test_manifest_is_lexicographic(tmp_path):
    save_checkpoint({"b.w": torch.ones(2), "a.z": torch.zeros(1, 3), "a.b": torch.tensor(1.0)}, tmp_path)
    lines = (tmp_path / "manifest.txt").read_text().splitlines()
    assert [l.split("\t")[0] for l in lines] == ["a.b", "a.z", "b.w"]
    assert lines[1] == "a.z\t1x3\t4"
    raw = (tmp_path / "params.bin").read_bytes()
    assert len(raw) == 4 * 6 and np.frombuffer(raw, "<f4")[0] == 1.0
    loaded = load_checkpoint(tmp_path)
    assert loaded["a.b"].shape == () and loaded["a.z"].shape == (1, 3)


def test_truncated_blob(tmp_path):
    save_checkpoint({"w": torch.arange(6.0)}, tmp_path)
    blob = tmp_path / "params.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


def test_extra_blob_bytes(tmp_path):
    save_checkpoint({"w": torch.arange(6.0)}, tmp_path)
    blob = tmp_path / "params.bin"
    blob.write_bytes(blob.read_bytes() + b"\0\0\0\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


def test_non_finite_rejected(tmp_path):
    with pytest.raises(CheckpointError):
        save_checkpoint({"w": torch.tensor([float("nan")])}, tmp_path)


def test_unknown_and_missing_paths(tiny_model):
    params = dict(tiny_model.state_dict())
    with pytest.raises(CheckpointError):
        apply_params(tiny_model, {**params, "ghost.weight": torch.zeros(1)})
    params.pop(next(iter(params)))
    with pytest.raises(CheckpointError):
        apply_params(tiny_model, params)
    wrong = dict(tiny_model.state_dict())
    name = next(iter(wrong))
    wrong[name] = torch.zeros(*wrong[name].shape, 2)
    with pytest.raises(CheckpointError):
        apply_params(tiny_model, wrong)


def test_load_with_explicit_config(tmp_path):
    torch.manual_seed(1)
    model = RefinerModel(tiny_config())
    save_checkpoint(model.state_dict(), tmp_path)
    back = load_model(tmp_path, tiny_config())
    x = torch.rand(1, 3, 32, 32)
    from .conftest import point_prompt
    with torch.no_grad():
        assert torch.equal(model.eval()(x, [point_prompt(5, 5)]), back.eval()(x, [point_prompt(5, 5)]))
