import numpy as np
import pytest
import torch

from conftest import natural_images
from textrsir.errors import ArgumentError, DimensionError, TrainingError
from textrsir.imagecore import downsample_bicubic
from textrsir.reconstructor import ModelConfig, TextRSIRNet, reconstruct
from textrsir.trainer import (
    CHECKPOINT_VERSION,
    TrainConfig,
    TrainingSample,
    l1_loss,
    load_checkpoint,
    lr_schedule,
    read_loss_trace,
    save_checkpoint,
    train,
    write_loss_trace,
)


def _samples(n=2, side=32):
    return [TrainingSample(f"s{i}", downsample_bicubic(hr, 4), hr, f"caption {i}")
            for i, hr in enumerate(natural_images(n, side))]


def _net(frontend, **kw):
    cfg = dict(channels=4, num_sr_units=1, sr_unit_kind="residual_conv")
    cfg.update(kw)
    return TextRSIRNet(ModelConfig(**cfg), frontend.d)


def test_l1_loss_values():
    a = np.zeros((1, 2, 2, 3))
    assert l1_loss(a, a) == 0
    assert l1_loss(a, a + 0.5) == 0.5
    pred = np.array([0.0, 1.0]).reshape(1, 1, 2, 1)
    assert l1_loss(pred, np.full_like(pred, 0.5)) == 0.5
    t = torch.tensor([0.0, 1.0])
    assert l1_loss(t, torch.full_like(t, 0.5)).item() == 0.5
    with pytest.raises(DimensionError):
        l1_loss(np.zeros(3), np.zeros(4))
    with pytest.raises(DimensionError):
        l1_loss(torch.zeros(3), torch.zeros(4))


def test_lr_schedule():
    assert lr_schedule(0, 100, 1e-4) == 1e-4
    assert lr_schedule(49, 100, 1e-4) == 1e-4
    assert lr_schedule(50, 100, 1e-4) == 5e-5
    assert lr_schedule(99, 100, 1e-4) == 5e-5
    # floor midpoint for odd totals
    assert [lr_schedule(s, 5, 1.0) for s in range(5)] == [1.0, 1.0, 0.5, 0.5, 0.5]
    for bad in (-1, 100):
        with pytest.raises(ArgumentError):
            lr_schedule(bad, 100, 1e-4)


@pytest.mark.parametrize("total", [1, 2, 7, 200])
def test_lr_schedule_monotone_two_valued(total):
    rates = [lr_schedule(s, total, 1e-4) for s in range(total)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    assert set(rates) <= {1e-4, 5e-5}
    if total > 1:
        assert len(set(rates)) == 2


def test_train_config_validation():
    for bad in (dict(epochs=0), dict(batch_size=0), dict(base_lr=0.0), dict(crop_size=-4),
                dict(crop_size=6)):
        with pytest.raises(ArgumentError):
            TrainConfig(**bad).validate()


def test_train_reproducible_and_frontend_frozen(frontend):
    before = frontend.state_bytes()
    runs = [train(_net(frontend), frontend, _samples(3), TrainConfig(epochs=3, batch_size=2)).loss_trace
            for _ in range(2)]
    assert runs[0] == runs[1]
    assert len(runs[0]) == 6
    assert [lr for _, lr, _ in runs[0]] == [1e-4] * 3 + [5e-5] * 3
    assert frontend.state_bytes() == before


def test_optimizer_excludes_frontend(frontend):
    result = train(_net(frontend), frontend, _samples(1), TrainConfig(epochs=1))
    n_opt = sum(len(g["params"]) for g in result.checkpoint["optimizer_state"]["param_groups"])
    net = _net(frontend)
    assert n_opt == len([p for p in net.parameters() if p.requires_grad])


def test_seed_changes_batch_order(frontend):
    a = train(_net(frontend), frontend, _samples(4), TrainConfig(epochs=2, batch_size=1, seed=0)).loss_trace
    b = train(_net(frontend), frontend, _samples(4), TrainConfig(epochs=2, batch_size=1, seed=1)).loss_trace
    assert a != b


def test_random_crops(frontend):
    samples = _samples(2, side=32)
    res = train(_net(frontend), frontend, samples, TrainConfig(epochs=2, crop_size=16))
    again = train(_net(frontend), frontend, samples, TrainConfig(epochs=2, crop_size=16))
    assert res.loss_trace == again.loss_trace
    with pytest.raises(DimensionError):
        train(_net(frontend), frontend, samples, TrainConfig(crop_size=64))


def test_frozen_parameters_unchanged(frontend):
    net = _net(frontend)
    for p in net.parameters():
        p.requires_grad_(False)
    before = {k: v.clone() for k, v in net.state_dict().items()}
    res = train(net, frontend, _samples(1), TrainConfig(epochs=2))
    for k, v in res.checkpoint["model_state"].items():
        assert torch.equal(v, before[k]), k


def test_non_finite_loss_aborts(frontend):
    net = _net(frontend)
    with torch.no_grad():
        net.encoder.conv.bias.fill_(float("nan"))
    with pytest.raises(TrainingError, match="step 0"):
        train(net, frontend, _samples(1), TrainConfig(epochs=1))


def test_train_input_errors(frontend):
    with pytest.raises(ArgumentError):
        train(_net(frontend), frontend, [], TrainConfig())
    bad = TrainingSample("x", np.zeros((8, 8, 3)), np.zeros((16, 16, 3)), "")
    with pytest.raises(DimensionError, match="x"):
        train(_net(frontend), frontend, [bad], TrainConfig())


def test_checkpoint_roundtrip_bitwise(frontend, tmp_path):
    net = _net(frontend)
    res = train(net, frontend, _samples(2), TrainConfig(epochs=2))
    ck = res.checkpoint
    assert ck["format_version"] == CHECKPOINT_VERSION
    assert ck["step"] == 2
    save_checkpoint(tmp_path / "m.pt", ck)
    loaded, fe = load_checkpoint(tmp_path / "m.pt")
    imgs = [s.clr for s in _samples(2)]
    caps = ["a", "b"]
    for x, y in zip(reconstruct(net, frontend, imgs, caps), reconstruct(loaded, fe, imgs, caps)):
        np.testing.assert_array_equal(x, y)


def test_load_rejects_bad_checkpoints(tmp_path):
    from textrsir.errors import ConfigurationError

    with pytest.raises(ConfigurationError):
        load_checkpoint({"format_version": 99})
    (tmp_path / "junk.pt").write_bytes(b"junk")
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path / "junk.pt")


def test_loss_trace_csv_roundtrip(tmp_path):
    trace = [(0, 1e-4, 0.123456789012345), (1, 5e-5, 0.1)]
    write_loss_trace(tmp_path / "t.csv", trace)
    assert read_loss_trace(tmp_path / "t.csv") == trace
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "step,lr,loss"


def test_dataset_profiles():
    from textrsir.trainer import TrainConfig

    expected = {"Alsat-2B": (50, 4), "UC_Merced": (100, 4), "AID": (20, 1), "ILSVRC2012": (20, 4)}
    for name, (epochs, batch) in expected.items():
        cfg = TrainConfig.for_dataset(name).validate()
        assert (cfg.epochs, cfg.batch_size) == (epochs, batch)
    assert TrainConfig.for_dataset("aid", epochs=2).epochs == 2
    with pytest.raises(ArgumentError, match="mnist"):
        TrainConfig.for_dataset("mnist")
