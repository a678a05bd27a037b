import datetime as dt
import math

import numpy as np
import pytest
import torch

from aircouple.backbone import (
    ForecastModel, ModelConfig, UNet, count_parameters, crop, load_checkpoint, pad_to_multiple, save_checkpoint,
    time_embed,
)
from aircouple.errors import ShapeError
from conftest import tiny_model_config

UTC = dt.timezone.utc


def test_time_embed_examples():
    assert np.allclose(time_embed(dt.datetime(2022, 1, 1, tzinfo=UTC)), [1, 0, 1, 0])
    assert np.allclose(time_embed(dt.datetime(2022, 1, 1, 12, tzinfo=UTC))[2:], [-1, 0], atol=1e-15)
    # day index 183 -> phase 2*pi*183/366 = pi
    day = time_embed(dt.datetime(2022, 1, 1, tzinfo=UTC) + dt.timedelta(days=183))
    assert np.allclose(day[:2], [-1, 0], atol=1e-12)
    assert np.allclose(np.sum(time_embed("2022-07-09T12:00:00Z").reshape(2, 2) ** 2, axis=1), 1)


def test_pad_examples():
    x = torch.randn(1, 2, 451, 900)
    padded, rec = pad_to_multiple(x)
    assert padded.shape[-2:] == (464, 912)
    assert (rec.n_lat, rec.n_lon) == (451, 900)
    assert torch.equal(crop(padded, rec), x)
    y = torch.randn(1, 1, 64, 128)
    same, rec = pad_to_multiple(y)
    assert same.shape == y.shape and torch.equal(crop(same, rec), y)


def test_pad_numpy_matches_torch(rng):
    a = rng.standard_normal((3, 10, 18))
    pa, rec = pad_to_multiple(a)
    pt, _ = pad_to_multiple(torch.from_numpy(a))
    assert np.array_equal(pa, pt.numpy())
    assert np.array_equal(crop(pa, rec), a)
    assert pa.shape == (3, 16, 32)
    # columns wrap, rows replicate
    assert np.array_equal(pa[:, 0], pa[:, rec.top])
    assert np.array_equal(pa[:, rec.top, 0], a[:, 0, -rec.left])


def test_unet_rejects_unpadded():
    cfg = tiny_model_config()
    net = UNet(4, 3, cfg)
    with pytest.raises(ShapeError):
        net(torch.randn(1, 4, 10, 18), torch.zeros(1, 4))


def test_identity_initialization():
    cfg = tiny_model_config()
    model = ForecastModel(cfg)
    p_in, q_in = torch.randn(2, cfg.p_channels, 10, 18), torch.randn(2, cfg.q_channels, 10, 18)
    psi, delta = model(p_in, q_in, torch.randn(2, 4))
    assert psi.shape == delta.shape == (2, 3, 10, 18)
    assert torch.all(psi == 1) and torch.all(delta == 0)


def test_shape_contract_64x128():
    cfg = tiny_model_config(n_pollutants=2, n_met=1)
    psi, delta = ForecastModel(cfg)(torch.randn(1, cfg.p_channels, 64, 128), torch.randn(1, 2, 64, 128), torch.zeros(1, 4))
    assert psi.shape == delta.shape == (1, 2, 64, 128)


def test_psi_is_bounded():
    cfg = tiny_model_config()
    model = ForecastModel(cfg)
    with torch.no_grad():
        model.unet.psi_head.bias.fill_(100.0)
    psi, _ = model(torch.randn(1, cfg.p_channels, 10, 18), torch.randn(1, cfg.q_channels, 10, 18), torch.zeros(1, 4))
    assert torch.allclose(psi, torch.full_like(psi, math.exp(3.0)))


def test_full_scale_parameter_budget():
    n = count_parameters(ModelConfig.full_scale())
    assert n <= 260e6
    assert abs(n - 178e6) < 2e6


def test_checkpoint_round_trip(tmp_path, tiny_stats):
    cfg = tiny_model_config()
    model = ForecastModel(cfg)
    for p in model.parameters():
        p.data.normal_()
    save_checkpoint(tmp_path / "c.pt", model, tiny_stats, stage="pretrain")
    again, payload = load_checkpoint(tmp_path / "c.pt")
    assert payload["stage"] == "pretrain" and payload["norm_stats"]["skew_vars"] == ["so2"]
    for a, b in zip(model.state_dict().values(), again.state_dict().values()):
        assert torch.equal(a, b)
    torch.save({"format": "other"}, tmp_path / "x.pt")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.pt")


def test_config_round_trip():
    cfg = ModelConfig.full_scale()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ModelConfig(n_pollutants=1, n_met=1, encoder_depth=3)
