import json

import pytest
import torch

from src.core.errors import DistillationCompatibilityError, NonFiniteLossError
from src.core.schemas import KDWeights, ModelConfig, TrainConfig, TrainState
from src.models.checkpoint import load_checkpoint
from src.models.hyperprior import build_model, parameter_checksum
from src.services.data import PatchDataset
from src.services.trainer import configure_optimizers, lr_schedule_step, train


def small_config(**overrides) -> TrainConfig:
    values = dict(steps=3, batch_size=2, crop=64, eval_interval=2, eval_batch_size=2, log_interval=1, seed=7)
    values.update(overrides)
    return TrainConfig(**values)


def run_schedule(losses, **overrides):
    config = TrainConfig(**overrides)
    state = TrainState(lr=config.lr_initial)
    lrs = []
    for loss in losses:
        state = lr_schedule_step(state, loss, config)
        lrs.append(state.lr)
    return state, lrs


def test_schedule_keeps_lr_while_improving():
    state, lrs = run_schedule([5.0, 4.0, 3.0, 2.0, 1.0], plateau_patience=1)
    assert lrs == [1e-4] * 5
    assert state.best_eval_loss == 1.0


def test_schedule_halves_after_patience():
    state, lrs = run_schedule([1.0] * 11, plateau_patience=10)
    assert lrs[-2] == 1e-4
    assert state.lr == pytest.approx(5e-5)
    assert state.bad_evals == 0


def test_schedule_counts_each_plateau():
    state, lrs = run_schedule([1.0, 1.0, 1.0, 0.5, 0.5, 0.5], plateau_patience=2)
    assert state.lr == pytest.approx(2.5e-5)
    assert len(set(lrs)) == 3
    assert lrs == sorted(lrs, reverse=True)


def test_schedule_never_goes_below_minimum():
    state, _ = run_schedule([1.0] * 20, plateau_patience=1, lr_initial=1e-4, lr_min=3e-5)
    assert state.lr == pytest.approx(3e-5)


def test_schedule_ignores_improvements_below_threshold():
    state, lrs = run_schedule([1.0, 0.99999, 0.99998], plateau_patience=2, plateau_threshold=1e-4)
    assert state.lr == pytest.approx(5e-5)


def test_aux_optimizer_owns_only_quantiles(tiny_model):
    main, aux = configure_optimizers(tiny_model, 1e-4)
    aux_params = aux.param_groups[0]["params"]
    assert len(aux_params) == 1 and aux_params[0] is tiny_model.entropy_bottleneck.quantiles
    assert all(p is not tiny_model.entropy_bottleneck.quantiles for p in main.param_groups[0]["params"])


def test_zero_steps_leave_model_unchanged(train_root, tiny_model):
    dataset = PatchDataset.open(train_root, crop=64, seed=0)
    before = parameter_checksum(tiny_model)
    model, state = train(tiny_model, dataset, small_config(steps=0), device="cpu")
    assert parameter_checksum(model) == before
    assert state.step == 0
    assert len(state.history) == 1


def test_short_run_writes_checkpoints_and_log(tmp_path, train_root, eval_root, tiny_model):
    from src.services.data import load_eval_set

    dataset = PatchDataset.open(train_root, crop=64, seed=0)
    model, state = train(
        tiny_model,
        dataset,
        small_config(),
        eval_set=load_eval_set(eval_root),
        output_dir=tmp_path / "run",
        device="cpu",
    )
    assert state.step == 3
    # step 0, step 2 and the final step
    assert [h[0] for h in state.history] == [0, 2, 3]
    assert not model.training

    loaded = load_checkpoint(tmp_path / "run" / "checkpoint.pt")
    assert loaded.trainer_state.step == 3
    assert parameter_checksum(loaded.model) == parameter_checksum(model)
    assert (tmp_path / "run" / "best.pt").exists()

    records = [json.loads(line) for line in (tmp_path / "run" / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in records if r["kind"] == "train"] == [1, 2, 3]
    assert [r["step"] for r in records if r["kind"] == "eval"] == [0, 2, 3]
    assert all(r["rate_term"] >= 0 for r in records if r["kind"] == "train")


def test_seeded_runs_are_reproducible(train_root, tiny_config):
    dataset = PatchDataset.open(train_root, crop=64, seed=3)

    def run():
        torch.manual_seed(0)
        model = build_model(tiny_config)
        model, state = train(model, dataset, small_config(steps=4), device="cpu")
        return parameter_checksum(model), state.history

    assert run() == run()


def test_distillation_leaves_teacher_untouched(train_root, tiny_config):
    dataset = PatchDataset.open(train_root, crop=64, seed=0)
    torch.manual_seed(1)
    teacher = build_model(tiny_config.model_copy(update={"role": "teacher"}))
    torch.manual_seed(2)
    student = build_model(tiny_config)
    before = parameter_checksum(teacher)

    config = small_config(kd=KDWeights(), teacher_checkpoints=["unused.pt"])
    trained, state = train(student, dataset, config, teachers=[teacher], device="cpu")

    assert parameter_checksum(teacher) == before
    assert all(not p.requires_grad for p in teacher.parameters())
    assert state.step == 3
    assert parameter_checksum(trained) != parameter_checksum(teacher)


def test_incompatible_teacher_fails_before_training(train_root, tiny_config):
    dataset = PatchDataset.open(train_root, crop=64, seed=0)
    student = build_model(tiny_config)
    before = parameter_checksum(student)
    wide_teacher = build_model(ModelConfig(channels_n=8, latent_m=16, role="teacher"))

    config = small_config(kd=KDWeights(), teacher_checkpoints=["unused.pt"])
    with pytest.raises(DistillationCompatibilityError, match="latent width"):
        train(student, dataset, config, teachers=[wide_teacher], device="cpu")
    assert parameter_checksum(student) == before


def test_hyper_distillation_needs_matching_width(train_root):
    dataset = PatchDataset.open(train_root, crop=64, seed=0)
    student = build_model(ModelConfig(channels_n=8, latent_m=12))
    teacher = build_model(ModelConfig(channels_n=16, latent_m=12, role="teacher"))

    config = small_config(kd=KDWeights(loss_form="L2", lambda4=0.4), teacher_checkpoints=["unused.pt"])
    with pytest.raises(DistillationCompatibilityError, match="hyper_out_channels = 16"):
        train(student, dataset, config, teachers=[teacher], device="cpu")

    # the same student with a teacher-sized hyper-latent is accepted
    matched = build_model(ModelConfig(channels_n=8, latent_m=12, hyper_out_channels=16))
    _, state = train(matched, dataset, config.model_copy(update={"steps": 1}), teachers=[teacher], device="cpu")
    assert state.step == 1


def test_non_finite_loss_aborts_with_diagnostic(tmp_path, train_root, tiny_model):
    dataset = PatchDataset.open(train_root, crop=64, seed=0)
    with torch.no_grad():
        tiny_model.g_s[-1].bias.fill_(float("nan"))

    with pytest.raises(NonFiniteLossError) as excinfo:
        train(tiny_model, dataset, small_config(), output_dir=tmp_path / "run", device="cpu")

    diagnostic = tmp_path / "run" / "nonfinite-step1.pt"
    assert excinfo.value.checkpoint_path == str(diagnostic)
    assert load_checkpoint(diagnostic).meta["reason"] == "non-finite loss"
