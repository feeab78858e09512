"""
Training loop for plain rate-distortion training and teacher-student
distillation.

Batches come from PatchDataset.sample_batch(step, ...), so the data seen at a
step depends only on (seed, step). Evaluation runs every eval_interval steps;
the learning rate is halved when the evaluation loss plateaus.
"""
from __future__ import annotations

import math
import os
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import torch
import torch.optim as optim
from loguru import logger
from torch import Tensor
from torch.utils.data import DataLoader
from tqdm import tqdm

from src.core.config import resolve_device, settings
from src.core.errors import DistillationCompatibilityError, NonFiniteLossError
from src.core.schemas import TrainConfig, TrainState
from src.models.checkpoint import load_checkpoint, save_checkpoint
from src.models.hyperprior import ScaleHyperprior, forward
from src.services.data import EvalImage, PatchDataset, StepBatches
from src.services.losses import rd_loss, training_loss
from src.services.metrics import psnr
from src.storage.results import TrainingLog

# step index reserved for the fixed validation batch drawn from the training set
VALIDATION_STEP = 2**62


def lr_schedule_step(state: TrainState, eval_loss: float, config: TrainConfig) -> TrainState:
    """
    Apply one evaluation to the plateau schedule.

    An evaluation improves when it beats the best loss by the relative
    threshold. After plateau_patience evaluations without improvement the
    learning rate is halved (never below lr_min) and the counter resets.

    Returns:
        Updated copy of state
    """
    best = state.best_eval_loss
    if best is None or eval_loss < best * (1 - config.plateau_threshold):
        return state.model_copy(update={"best_eval_loss": eval_loss, "bad_evals": 0})

    bad_evals = state.bad_evals + 1
    lr = state.lr
    if bad_evals >= config.plateau_patience:
        lr = max(lr / 2, config.lr_min)
        bad_evals = 0
        logger.info(f"Evaluation loss plateaued at {eval_loss:.5f}; learning rate -> {lr:.2e}")
    return state.model_copy(update={"lr": lr, "bad_evals": bad_evals})


def configure_optimizers(model: ScaleHyperprior, lr: float) -> Tuple[optim.Optimizer, optim.Optimizer]:
    """Adam over the network and a separate Adam over the prior quantiles."""
    main = [p for n, p in model.named_parameters() if not n.endswith(".quantiles") and p.requires_grad]
    aux = [p for n, p in model.named_parameters() if n.endswith(".quantiles") and p.requires_grad]
    return optim.Adam(main, lr=lr), optim.Adam(aux, lr=lr)


def freeze(model: ScaleHyperprior) -> ScaleHyperprior:
    model.eval()
    model.requires_grad_(False)
    return model


def load_teachers(paths: Sequence[Path], device: str) -> List[ScaleHyperprior]:
    teachers = []
    for path in paths:
        loaded = load_checkpoint(path, map_location=device)
        logger.info(
            f"Loaded teacher {path} (N={loaded.config.channels_n}, M={loaded.config.latent_m}, "
            f"hyper={loaded.config.hyper_out_channels})"
        )
        teachers.append(freeze(loaded.model))
    return teachers


def check_teacher_compatibility(
    student: ScaleHyperprior, teachers: Sequence[ScaleHyperprior], config: TrainConfig
) -> None:
    """
    Raise before step 0 if a teacher cannot provide the distillation targets.

    Raises:
        DistillationCompatibilityError: On a latent width mismatch, or a
            hyper-latent width mismatch when the hyper-latent is distilled
    """
    kd = config.kd
    if kd is None:
        return
    expected = 2 if config.hybrid else 1
    if len(teachers) != expected:
        raise DistillationCompatibilityError(f"expected {expected} teacher(s), got {len(teachers)}")

    s = student.config
    for i, teacher in enumerate(teachers):
        t = teacher.config
        if t.latent_m != s.latent_m:
            raise DistillationCompatibilityError(
                f"teacher {i} latent width {t.latent_m} does not match student latent width {s.latent_m}"
            )
    if kd.loss_form == "L2":
        hyper_teacher = teachers[-1].config
        if hyper_teacher.hyper_out_channels != s.hyper_out_channels:
            raise DistillationCompatibilityError(
                f"hyper-latent distillation needs student hyper_out_channels = "
                f"{hyper_teacher.hyper_out_channels}, got {s.hyper_out_channels}"
            )


def evaluate_rd_loss(
    model: ScaleHyperprior, images: Iterable[Tensor], rd_lambda: float, device: str
) -> Tuple[float, float, float]:
    """Mean (rd loss, bpp, psnr) in eval mode over a sequence of batches."""
    model.eval()
    losses, rates, qualities = [], [], []
    with torch.inference_mode():
        for x in images:
            x = x.to(device)
            outputs = forward(model, x, "eval")
            rd, bpp, _ = rd_loss(outputs, x, rd_lambda)
            losses.append(float(rd))
            rates.append(float(bpp))
            qualities.append(psnr(x, outputs.x_hat.clamp(0, 1)))
    n = len(losses)
    return sum(losses) / n, sum(rates) / n, sum(qualities) / n


def _seed_everything(config: TrainConfig) -> None:
    torch.manual_seed(config.seed)
    if config.deterministic or settings.DETERMINISTIC:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True)
        torch.backends.cudnn.benchmark = False


def _set_lr(optimizers: Sequence[optim.Optimizer], lr: float) -> None:
    for optimizer in optimizers:
        for group in optimizer.param_groups:
            group["lr"] = lr


def train(
    model: ScaleHyperprior,
    dataset: PatchDataset,
    config: TrainConfig,
    eval_set: Optional[Sequence[EvalImage]] = None,
    output_dir: Optional[Path] = None,
    teachers: Optional[Sequence[ScaleHyperprior]] = None,
    device: Optional[str] = None,
) -> Tuple[ScaleHyperprior, TrainState]:
    """
    Train a model for config.steps optimizer steps.

    Args:
        model: Student (or baseline) model, trained in place
        dataset: Indexed training patches
        config: Training configuration
        eval_set: Images for the periodic evaluation; a fixed batch of training
            crops is used when absent
        output_dir: Where checkpoints and the training log go; nothing is written when None
        teachers: Frozen teacher models; loaded from config.teacher_checkpoints when None
        device: Compute device (defaults to the configured one)

    Returns:
        (model, final TrainState)

    Raises:
        DistillationCompatibilityError: Before step 0 if a teacher does not fit the student
        NonFiniteLossError: After writing a diagnostic checkpoint
    """
    device = device or resolve_device()
    _seed_everything(config)
    model.to(device)

    if config.kd is not None:
        if teachers is None:
            teachers = load_teachers(config.teacher_checkpoints, device)
        teachers = [freeze(t.to(device)) for t in teachers]
        check_teacher_compatibility(model, teachers, config)
    else:
        teachers = []

    rd_lambda = config.effective_rd_lambda
    optimizer, aux_optimizer = configure_optimizers(model, config.lr_initial)
    state = TrainState(step=0, lr=config.lr_initial)

    log = TrainingLog(Path(output_dir) / "train_log.jsonl") if output_dir else None
    if eval_set:
        eval_batches = [item.image for item in eval_set]
    else:
        eval_batches = [dataset.sample_batch(VALIDATION_STEP, config.eval_batch_size)]

    def run_eval(state: TrainState) -> TrainState:
        eval_loss, bpp, quality = evaluate_rd_loss(model, eval_batches, rd_lambda, device)
        state = lr_schedule_step(state, eval_loss, config)
        state.history.append((state.step, eval_loss, bpp, quality))
        _set_lr((optimizer, aux_optimizer), state.lr)
        logger.info(
            f"step {state.step}: eval loss {eval_loss:.5f}, {bpp:.4f} bpp, {quality:.2f} dB, lr {state.lr:.2e}"
        )
        if log:
            log.append("eval", state.step, loss=eval_loss, bpp=bpp, psnr=quality, lr=state.lr)
        if output_dir:
            save_checkpoint(Path(output_dir) / "checkpoint.pt", model, state)
            if state.bad_evals == 0 and state.best_eval_loss == eval_loss:
                save_checkpoint(Path(output_dir) / "best.pt", model, state)
        return state

    mode = "distillation" if teachers else "rate-distortion"
    logger.info(f"Starting {mode} training for {config.steps} steps on {device} (lambda={rd_lambda})")
    state = run_eval(state)

    loader = DataLoader(
        StepBatches(dataset, config.batch_size, start_step=0, num_steps=config.steps),
        batch_size=None,
        shuffle=False,
        num_workers=config.num_workers,
    )
    progress = tqdm(loader, total=config.steps, desc="Training", disable=not settings.PROGRESS)
    for step, x in enumerate(progress, start=1):
        model.train()
        x = x.to(device)
        outputs = forward(model, x, "train")
        with torch.no_grad():
            teacher_outs = [forward(t, x, "eval") for t in teachers]
        breakdown = training_loss(outputs, x, rd_lambda, config.kd, teacher_outs)

        if not math.isfinite(float(breakdown.total)):
            diagnostic = Path(output_dir or settings.RUNS_DIR / "diagnostics") / f"nonfinite-step{step}.pt"
            save_checkpoint(diagnostic, model, state, meta={"reason": "non-finite loss", "step": step})
            raise NonFiniteLossError(
                f"loss became non-finite at step {step}; state saved to {diagnostic}",
                checkpoint_path=str(diagnostic),
            )

        optimizer.zero_grad()
        breakdown.total.backward()
        if config.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        optimizer.step()

        aux_optimizer.zero_grad()
        aux_loss = model.aux_loss()
        aux_loss.backward()
        aux_optimizer.step()

        state.step = step
        if step % config.log_interval == 0:
            terms = breakdown.as_dict()
            progress.set_postfix(loss=f"{terms['total']:.4f}", bpp=f"{terms['rate_term']:.3f}")
            if log:
                log.append("train", step, lr=state.lr, aux=float(aux_loss), **terms)
        if step % config.eval_interval == 0 or step == config.steps:
            state = run_eval(state)

    if output_dir:
        save_checkpoint(Path(output_dir) / "checkpoint.pt", model, state)
    model.eval()
    logger.info(f"Training finished at step {state.step}, best eval loss {state.best_eval_loss}")
    return model, state
