import pytest
import torch
import torch.nn as nn

from src.core.errors import ConfigurationError, NumericInputError, ShapeError
from src.core.schemas import ModelConfig
from src.models.hyperprior import (
    CompressionOutputs,
    build_model,
    count_parameters,
    forward,
    memory_bytes,
    parameter_checksum,
    zoo_config,
)

MIB = 2**20


@pytest.mark.parametrize(
    "channels_n, expected_m, tolerance",
    [(128, 5.08, 0.03), (16, 0.27, 0.05), (64, 1.69, 0.05)],
)
def test_parameter_counts_match_published_table(channels_n, expected_m, tolerance):
    model = build_model(ModelConfig(channels_n=channels_n, latent_m=192))
    assert count_parameters(model) / 1e6 == pytest.approx(expected_m, rel=tolerance)


def test_memory_footprint():
    """Student rows of the published table are in MiB; the teacher row is in decimal MB."""
    student = build_model(ModelConfig(channels_n=32, latent_m=192))
    assert memory_bytes(student) / MIB == pytest.approx(2.43, rel=0.05)
    assert memory_bytes(student) == 4 * count_parameters(student)

    teacher = build_model(zoo_config(5))
    assert memory_bytes(teacher) / 1e6 == pytest.approx(20.18, rel=0.03)


def test_single_matrix_counts():
    layer = nn.Linear(10, 10, bias=False)
    assert count_parameters(layer) == 100
    assert memory_bytes(layer) == 400


def test_parameters_grow_with_width():
    counts = [
        count_parameters(build_model(ModelConfig(channels_n=n, latent_m=192)))
        for n in (16, 32, 64, 96, 112, 128)
    ]
    assert counts == sorted(counts)
    assert len(set(counts)) == len(counts)


def test_eval_forward_is_deterministic(tiny_model):
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        first = forward(tiny_model, x, "eval")
        second = forward(tiny_model, x, "eval")
    assert torch.equal(first.x_hat, second.x_hat)
    assert torch.equal(first.y_likelihoods, second.y_likelihoods)
    assert torch.equal(first.y_hat, torch.round(first.y))
    assert torch.equal(first.z_hat, torch.round(first.z))


def test_train_forward_adds_bounded_noise(tiny_model):
    torch.manual_seed(0)
    x = torch.rand(2, 3, 64, 64)
    with torch.no_grad():
        first = forward(tiny_model, x, "train")
        second = forward(tiny_model, x, "train")
    assert (first.y_hat - first.y).abs().max() <= 0.5
    assert (first.z_hat - first.z).abs().max() <= 0.5
    assert not torch.equal(first.y_hat, second.y_hat)
    assert first.mode == "train"


def test_unknown_mode_is_rejected(tiny_model):
    with pytest.raises(ConfigurationError, match="unknown mode"):
        forward(tiny_model, torch.rand(1, 3, 64, 64), "dequantize")


def test_output_shapes_and_likelihood_range(tiny_model, tiny_config):
    x = torch.rand(2, 3, 70, 100)
    with torch.no_grad():
        out = tiny_model(x)
    assert out.mode == "eval"
    assert out.x_hat.shape == x.shape
    # padded to 128 x 128, then four stride-2 stages and two more
    assert out.y_hat.shape == (2, tiny_config.latent_m, 8, 8)
    assert out.z_hat.shape == (2, tiny_config.hyper_out_channels, 2, 2)
    for lik in (out.y_likelihoods, out.z_likelihoods):
        assert ((lik > 0) & (lik <= 1)).all()


def test_mode_follows_training_flag(tiny_model):
    tiny_model.train()
    with torch.no_grad():
        assert tiny_model(torch.rand(1, 3, 64, 64)).mode == "train"


def test_rejects_bad_inputs(tiny_model):
    with pytest.raises(ShapeError):
        tiny_model(torch.rand(1, 3, 32, 32))
    with pytest.raises(ShapeError):
        tiny_model(torch.rand(1, 1, 64, 64))
    with pytest.raises(ShapeError):
        tiny_model(torch.rand(3, 64, 64))
    x = torch.rand(1, 3, 64, 64)
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericInputError):
        tiny_model(x)


def test_zoo_config():
    config = zoo_config(5)
    assert (config.channels_n, config.latent_m, config.hyper_out_channels) == (128, 192, 128)
    assert config.role == "teacher"
    assert zoo_config(8).latent_m == 320
    with pytest.raises(ConfigurationError):
        zoo_config(0)


def test_build_model_validates_mappings():
    model = build_model({"channels_n": 8, "latent_m": 12})
    assert model.config.hyper_out_channels == 8
    with pytest.raises(ConfigurationError):
        build_model({"channels_n": -1})


def test_checksum_tracks_parameters(tiny_model):
    before = parameter_checksum(tiny_model)
    assert parameter_checksum(tiny_model) == before
    with torch.no_grad():
        tiny_model.g_a[0].weight.add_(1.0)
    assert parameter_checksum(tiny_model) != before


def test_outputs_default_and_detach():
    y_hat = torch.zeros(1, 2, 1, 1, requires_grad=True)
    outputs = CompressionOutputs(
        x_hat=torch.zeros(1, 3, 4, 4),
        y_hat=y_hat,
        z_hat=torch.zeros(1, 2, 1, 1),
        y_likelihoods=torch.ones(1, 2, 1, 1),
        z_likelihoods=torch.ones(1, 2, 1, 1),
    )
    assert outputs.y is outputs.y_hat
    detached = outputs.detach()
    assert not detached.y_hat.requires_grad
    assert detached.mode == "eval"
