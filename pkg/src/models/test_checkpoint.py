import pytest
import torch

from src.core.errors import CheckpointSchemaError
from src.core.schemas import TrainState
from src.models.checkpoint import (
    import_pretrained,
    prior_key,
    infer_model_config,
    load_checkpoint,
    save_checkpoint,
)
from src.models.hyperprior import parameter_checksum


def test_round_trip_is_bit_exact(tmp_path, tiny_model):
    state = TrainState(step=12, lr=5e-5, best_eval_loss=1.5, history=[(10, 1.5, 0.4, 28.0)])
    path = save_checkpoint(tmp_path / "ckpt.pt", tiny_model, trainer_state=state, meta={"rd_lambda": 0.025})

    loaded = load_checkpoint(path)
    assert parameter_checksum(loaded.model) == parameter_checksum(tiny_model)
    assert loaded.config == tiny_model.config
    assert loaded.trainer_state == state
    assert loaded.meta == {"rd_lambda": 0.025}
    assert not loaded.model.training
    assert not (tmp_path / "ckpt.pt.tmp").exists()


def test_without_trainer_state(tmp_path, tiny_model):
    loaded = load_checkpoint(save_checkpoint(tmp_path / "plain.pt", tiny_model))
    assert loaded.trainer_state is None
    assert loaded.meta == {}


def test_rejects_unknown_schema_version(tmp_path, tiny_model):
    path = save_checkpoint(tmp_path / "ckpt.pt", tiny_model)
    archive = torch.load(path, weights_only=True)
    archive["schema_version"] = 99
    torch.save(archive, path)
    with pytest.raises(CheckpointSchemaError, match="schema_version 99"):
        load_checkpoint(path)


def test_rejects_missing_and_foreign_files(tmp_path, tiny_model):
    with pytest.raises(CheckpointSchemaError, match="not found"):
        load_checkpoint(tmp_path / "missing.pt")

    raw = tmp_path / "raw.pt"
    torch.save(tiny_model.state_dict(), raw)
    with pytest.raises(CheckpointSchemaError, match="import-teacher"):
        load_checkpoint(raw)

    garbage = tmp_path / "garbage.pt"
    garbage.write_bytes(b"not an archive")
    with pytest.raises(CheckpointSchemaError):
        load_checkpoint(garbage)


def test_rejects_mismatched_tensors(tmp_path, tiny_model):
    path = save_checkpoint(tmp_path / "ckpt.pt", tiny_model)
    archive = torch.load(path, weights_only=True)
    archive["state_dict"]["g_a.0.weight"] = torch.zeros(1)
    torch.save(archive, path)
    with pytest.raises(CheckpointSchemaError, match="do not match"):
        load_checkpoint(path)


def _published_layout(model):
    """State dict keyed the way older published archives store it."""
    published = {}
    for key, value in model.state_dict().items():
        parsed = prior_key(key)
        if parsed is not None:
            key = "entropy_bottleneck._{}{}".format(*parsed)
        published[f"module.{key}"] = value.clone()
    published["module.entropy_bottleneck._quantized_cdf"] = torch.zeros(8, 10, dtype=torch.int32)
    published["module.gaussian_conditional.scale_table"] = torch.linspace(0.11, 256, 64)
    published["module.entropy_bottleneck.likelihood_lower_bound.bound"] = torch.tensor([1e-9])
    return published


def test_import_published_weights(tmp_path, tiny_model):
    source = tmp_path / "published.pth.tar"
    torch.save({"state_dict": _published_layout(tiny_model)}, source)

    imported = import_pretrained(source, tmp_path / "teacher.pt", quality=3)
    assert parameter_checksum(imported.model) == parameter_checksum(tiny_model)
    assert imported.config.role == "teacher"
    assert (imported.config.channels_n, imported.config.latent_m) == (8, 12)
    # the archive's coder bound does not replace the configured floor
    assert imported.model.entropy_bottleneck.likelihood_lower_bound.bound.item() == pytest.approx(2**-16)

    reloaded = load_checkpoint(tmp_path / "teacher.pt")
    assert reloaded.meta == {"source": "published.pth.tar", "quality": 3, "rd_lambda": 0.0067}


def test_import_rejects_incomplete_weights(tmp_path, tiny_model):
    published = _published_layout(tiny_model)
    del published["module.g_s.0.weight"]
    source = tmp_path / "broken.pt"
    torch.save(published, source)
    with pytest.raises(CheckpointSchemaError, match="g_s.0.weight"):
        import_pretrained(source, tmp_path / "out.pt")
    assert not (tmp_path / "out.pt").exists()


def test_infer_config_needs_analysis_weights():
    with pytest.raises(CheckpointSchemaError, match="cannot infer"):
        infer_model_config({"g_s.0.weight": torch.zeros(1)})


def test_prior_keys_under_both_namings():
    assert prior_key("entropy_bottleneck._matrix0") == ("matrix", 0)
    assert prior_key("entropy_bottleneck.matrices.0") == ("matrix", 0)
    assert prior_key("entropy_bottleneck._factor2") == ("factor", 2)
    assert prior_key("entropy_bottleneck.biases.3") == ("bias", 3)
    assert prior_key("entropy_bottleneck.quantiles") is None
    assert prior_key("g_a.0.weight") is None
