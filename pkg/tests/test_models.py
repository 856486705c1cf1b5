import numpy as np
import pytest

from compspoof.errors import CheckpointError, ConfigError, GeometryMismatch
from compspoof.models import CompSpoofSystem, ModelConfig, TrainConfig

SMALL = ModelConfig(8000, 128, 32, 128, 0.5, 0.25, (4, 8), 16, 8)


def test_defaults_follow_the_schedule():
    cfg = TrainConfig()
    assert (cfg.joint_start_epoch, cfg.kappa, cfg.lr_sepa, cfg.lr_detect) == (5, 10.0, 1e-3, 1e-5)


def test_phase_boundary_at_epoch_five():
    cfg = TrainConfig(epochs_total=8)
    assert [cfg.phase(e) for e in range(1, 9)] == ["pretrain"] * 4 + ["joint"] * 4
    assert {cfg.replace(system="baseline").phase(e) for e in range(1, 9)} == {"baseline"}
    assert {cfg.replace(system="sef").phase(e) for e in range(1, 9)} == {"pretrain"}


@pytest.mark.parametrize("bad", [
    dict(epochs_total=0), dict(joint_start_epoch=0), dict(epochs_total=3, joint_start_epoch=4),
    dict(kappa=-1.0), dict(lr_sepa=0.0), dict(lr_detect=-1e-5), dict(batch_size=0), dict(system="x"),
    dict(win_len=128, hop_len=64, fft_size=128),
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_config_text_round_trip(tmp_path):
    cfg = TrainConfig(epochs_total=3, joint_start_epoch=2, kappa=2.5, sep_channels=(4, 8), system="sef")
    path = tmp_path / "train.cfg"
    path.write_text("# comment\n\n" + cfg.to_text())
    assert TrainConfig.from_file(path) == cfg
    assert TrainConfig.from_file(path, seed=9).seed == 9
    assert TrainConfig.from_file(path, seed=None).seed == cfg.seed


def test_config_rejects_unknown_and_malformed_lines():
    with pytest.raises(ConfigError, match="unknown key"):
        TrainConfig.from_text("epochs=3\n")
    with pytest.raises(ConfigError):
        TrainConfig.from_text("epochs_total 3\n")
    with pytest.raises(ConfigError):
        TrainConfig.from_text("epochs_total=three\n")
    with pytest.raises(FileNotFoundError):
        TrainConfig.from_file("/nonexistent/train.cfg")


def test_model_config_vector_round_trip():
    assert ModelConfig.from_vector(SMALL.to_vector()) == SMALL
    with pytest.raises(CheckpointError):
        ModelConfig.from_vector([1.0, 2.0])


@pytest.mark.parametrize("kind", ["separation", "baseline"])
def test_checkpoint_round_trip(tmp_path, kind):
    system = CompSpoofSystem(SMALL, kind, seed=3)
    system.save(tmp_path / "m.ckpt", {"meta.epoch": np.array([2.0])})
    loaded, tensors = CompSpoofSystem.load(tmp_path / "m.ckpt", expect=SMALL)
    assert loaded.kind == kind and tensors["meta.epoch"][0] == 2.0
    for name, value in system.state_dict().items():
        assert np.array_equal(loaded.state_dict()[name], value)


def test_checkpoint_geometry_mismatch(tmp_path):
    CompSpoofSystem(SMALL).save(tmp_path / "m.ckpt")
    other = ModelConfig(8000, 256, 64, 256, 0.5, 0.25, (4, 8), 16, 8)
    with pytest.raises(GeometryMismatch):
        CompSpoofSystem.load(tmp_path / "m.ckpt", expect=other)


def test_seeded_init_and_parameter_groups():
    a, b = CompSpoofSystem(SMALL, seed=1), CompSpoofSystem(SMALL, seed=1)
    for (k, v), w in zip(a.state_dict().items(), b.state_dict().values()):
        assert np.array_equal(v, w), k
    assert len(a.separator_params()) + len(a.detector_params()) == len(a.parameters())
    with pytest.raises(ValueError):
        CompSpoofSystem(SMALL, "other")
