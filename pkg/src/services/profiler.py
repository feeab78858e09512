"""
Resource profiling: analytic FLOP counts, throughput and energy per frame.

Timed sessions preload every input on the compute device, run one untimed
warm-up pass and then time `passes` full passes over the set. Only one
session runs at a time per process.
"""
from __future__ import annotations

import platform
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
from compressai.entropy_models import EntropyBottleneck, GaussianConditional
from compressai.layers import GDN
from loguru import logger
from torch import Tensor

from src.core.config import resolve_device, settings
from src.core.errors import (
    ConfigurationError,
    EnergyCapabilityError,
    PreconditionError,
    ShapeError,
    UnsupportedLayerError,
)
from src.core.schemas import ProfileReport
from src.models.hyperprior import count_parameters, memory_bytes
from src.services.data import EvalImage

_SESSION_LOCK = threading.Lock()

# Layers that contribute no multiply-accumulates
_FREE_LAYERS = (nn.ReLU, nn.LeakyReLU, nn.Identity, EntropyBottleneck, GaussianConditional)


# FLOPs


def _conv_macs(module: nn.Conv2d, inputs: Tuple[Tensor, ...], output: Tensor) -> int:
    kh, kw = module.kernel_size
    per_output = (module.in_channels // module.groups) * kh * kw
    return output.numel() * per_output


def _deconv_macs(module: nn.ConvTranspose2d, inputs: Tuple[Tensor, ...], output: Tensor) -> int:
    # every input element scatters into a k x k window of each output channel
    kh, kw = module.kernel_size
    return inputs[0].numel() * (module.out_channels // module.groups) * kh * kw


def layer_flops(model: nn.Module, input_shape: Sequence[int], flops_per_mac: int = 1) -> Dict[str, int]:
    """
    FLOPs of every counted layer for one forward pass of a single frame.

    Convolutions contribute flops_per_mac per multiply-accumulate; GDN adds
    C + 3 per output element (C for the gamma inner product, 3 for
    add/sqrt/divide).

    Args:
        model: Module to analyse
        input_shape: (H, W), (C, H, W) or (1, C, H, W)
        flops_per_mac: 1 for the MAC convention, 2 to count multiply and add separately

    Returns:
        Mapping of layer name to FLOPs

    Raises:
        UnsupportedLayerError: Listing every layer type without a counting rule
    """
    shape = tuple(int(s) for s in input_shape)
    if len(shape) == 2:
        shape = (1, 3) + shape
    elif len(shape) == 3:
        shape = (1,) + shape
    elif len(shape) != 4 or shape[0] != 1:
        raise ShapeError(f"input_shape must be (H, W), (C, H, W) or (1, C, H, W), got {input_shape}")

    counts: Dict[str, int] = {}
    handles = []
    unsupported: List[str] = []

    def hook_for(name: str, rule: Callable[..., int]):
        def hook(module, inputs, output):
            counts[name] = counts.get(name, 0) + rule(module, inputs, output)

        return hook

    def visit(prefix: str, module: nn.Module) -> None:
        if isinstance(module, nn.Conv2d):
            rule = lambda m, i, o: flops_per_mac * _conv_macs(m, i, o)
        elif isinstance(module, nn.ConvTranspose2d):
            rule = lambda m, i, o: flops_per_mac * _deconv_macs(m, i, o)
        elif isinstance(module, GDN):
            rule = lambda m, i, o: o.numel() * (m.beta.numel() + 3)
        elif isinstance(module, _FREE_LAYERS):
            return
        else:
            children = list(module.named_children())
            if not children:
                unsupported.append(type(module).__name__)
            for child_name, child in children:
                visit(f"{prefix}.{child_name}" if prefix else child_name, child)
            return
        handles.append(module.register_forward_hook(hook_for(prefix or type(module).__name__, rule)))

    visit("", model)
    try:
        if unsupported:
            raise UnsupportedLayerError(unsupported)
        was_training = model.training
        model.eval()
        with torch.inference_mode():
            model(torch.zeros(shape, device=_device_of(model)))
        model.train(was_training)
    finally:
        for handle in handles:
            handle.remove()
    return counts


def count_flops(model: nn.Module, input_shape: Sequence[int], flops_per_mac: int = 1) -> float:
    """GFLOPs per frame (see layer_flops for the counting rules)."""
    return sum(layer_flops(model, input_shape, flops_per_mac).values()) / 1e9


def _device_of(model: nn.Module) -> torch.device:
    for p in model.parameters():
        return p.device
    return torch.device("cpu")


# Power meters


class PowerMeter(ABC):
    """Energy source for a timed session; readings are in millijoules."""

    capability: str = "null"
    estimated: bool = False

    def start(self) -> None:
        pass

    @abstractmethod
    def stop(self, elapsed_s: float) -> float:
        """Energy consumed since start(), in mJ."""

    def close(self) -> None:
        pass


class NullPowerMeter(PowerMeter):
    capability = "null"

    def stop(self, elapsed_s: float) -> float:
        raise EnergyCapabilityError("no power meter configured")


class TimeProxyPowerMeter(PowerMeter):
    """Energy = elapsed time x a declared constant device power."""

    capability = "time-proxy"
    estimated = True

    def __init__(self, watts: float):
        if watts <= 0:
            raise ConfigurationError(f"proxy power must be positive, got {watts}", field="meter")
        self.watts = float(watts)

    def stop(self, elapsed_s: float) -> float:
        return self.watts * elapsed_s * 1000.0


class NvmlPowerMeter(PowerMeter):
    """Total-energy counter of an NVIDIA GPU read through NVML."""

    capability = "hardware-telemetry"

    def __init__(self, device_index: int = 0):
        try:
            import pynvml

            pynvml.nvmlInit()
            self._nvml = pynvml
            self._handle = pynvml.nvmlDeviceGetHandleByIndex(device_index)
            pynvml.nvmlDeviceGetTotalEnergyConsumption(self._handle)
        except Exception as e:
            raise EnergyCapabilityError(
                f"NVML energy telemetry unavailable ({e}); use --meter proxy:<watts> or --meter none"
            ) from e
        self._start_mj: Optional[int] = None

    def start(self) -> None:
        self._start_mj = self._nvml.nvmlDeviceGetTotalEnergyConsumption(self._handle)

    def stop(self, elapsed_s: float) -> float:
        end_mj = self._nvml.nvmlDeviceGetTotalEnergyConsumption(self._handle)
        return float(end_mj - self._start_mj)

    def close(self) -> None:
        self._nvml.nvmlShutdown()


def parse_meter(spec: str) -> PowerMeter:
    """Build a meter from 'telemetry', 'proxy', 'proxy:<watts>' or 'none'."""
    spec = spec.strip().lower()
    if spec == "none":
        return NullPowerMeter()
    if spec == "telemetry":
        return NvmlPowerMeter()
    if spec == "proxy":
        return TimeProxyPowerMeter(settings.PROXY_POWER_WATTS)
    if spec.startswith("proxy:"):
        try:
            watts = float(spec.split(":", 1)[1])
        except ValueError:
            raise ConfigurationError(f"cannot parse watts in '{spec}'", field="meter")
        return TimeProxyPowerMeter(watts)
    raise ConfigurationError(
        f"unknown meter '{spec}', expected telemetry, proxy:<watts> or none", field="meter"
    )


# Timed sessions


@dataclass
class SessionResult:
    seconds: float
    frames: int
    energy_mj: Optional[float] = None

    @property
    def fps(self) -> float:
        return self.frames / self.seconds


def _synchronize(device: str) -> None:
    if device.startswith("cuda"):
        torch.cuda.synchronize()


def run_timed(
    fn: Callable[[Any], Any],
    inputs: Sequence[Any],
    passes: int,
    device: str = "cpu",
    meter: Optional[PowerMeter] = None,
) -> SessionResult:
    """
    Time `passes` passes of fn over preloaded inputs after one warm-up pass.

    Raises:
        PreconditionError: If there is nothing to time
    """
    if not inputs or passes < 1:
        raise PreconditionError(
            f"timed session needs at least one frame (inputs={len(inputs)}, passes={passes})"
        )
    with _SESSION_LOCK:
        for item in inputs:
            fn(item)
        _synchronize(device)

        if meter is not None:
            meter.start()
        begin = time.perf_counter()
        for _ in range(passes):
            for item in inputs:
                fn(item)
        _synchronize(device)
        seconds = time.perf_counter() - begin
        energy = meter.stop(seconds) if meter is not None else None
    return SessionResult(seconds=seconds, frames=passes * len(inputs), energy_mj=energy)


def _model_session(
    model: nn.Module,
    eval_set: Sequence[EvalImage],
    passes: int,
    device: str,
    meter: Optional[PowerMeter] = None,
) -> SessionResult:
    model.eval()
    model.to(device)
    frames = [item.image.to(device) for item in eval_set]

    def infer(x: Tensor):
        with torch.inference_mode():
            return model(x)

    return run_timed(infer, frames, passes, device=device, meter=meter)


def measure_throughput(
    model: nn.Module, eval_set: Sequence[EvalImage], passes: int = 50, device: Optional[str] = None
) -> float:
    """Frames per second of eval-mode forwards over the preloaded set."""
    device = device or resolve_device()
    return _model_session(model, eval_set, passes, device).fps


def energy_per_frame_mj(energy_mj: float, frames: int) -> float:
    if frames <= 0:
        raise PreconditionError("energy per frame is undefined for zero frames")
    return energy_mj / frames


def _require_energy(meter: PowerMeter) -> None:
    if meter.capability == "null":
        raise EnergyCapabilityError(
            "energy measurement needs a power meter; pass --meter telemetry or --meter proxy:<watts>, "
            "or keep --meter none to leave the energy columns empty"
        )


def measure_energy(
    model: nn.Module,
    eval_set: Sequence[EvalImage],
    meter: PowerMeter,
    passes: int = 50,
    device: Optional[str] = None,
) -> float:
    """Energy per frame in mJ; proxy meters give an estimate."""
    _require_energy(meter)
    device = device or resolve_device()
    session = _model_session(model, eval_set, passes, device, meter=meter)
    return energy_per_frame_mj(session.energy_mj, session.frames)


def device_description(device: str) -> str:
    if device.startswith("cuda") and torch.cuda.is_available():
        name = torch.cuda.get_device_name(torch.device(device))
    else:
        name = platform.processor() or platform.machine()
    return f"{name} ({device}, torch {torch.__version__})"


def report_from_session(
    model_id: str,
    session: SessionResult,
    meter: PowerMeter,
    passes: int,
    device: str,
    **resources: Optional[float],
) -> ProfileReport:
    energy = avg_power = None
    if session.energy_mj is not None:
        energy = energy_per_frame_mj(session.energy_mj, session.frames)
        avg_power = session.energy_mj / 1000.0 / session.seconds
        if meter.estimated:
            logger.warning(f"Energy for {model_id} is estimated from time at {avg_power:.0f} W")
    return ProfileReport(
        model_id=model_id,
        throughput_fps=session.fps,
        latency_ms_per_frame=1000.0 * session.seconds / session.frames,
        energy_mj_per_frame=energy,
        avg_power_w=avg_power,
        energy_estimated=meter.estimated and energy is not None,
        passes=passes,
        device_desc=device_description(device),
        **resources,
    )


def profile_model(
    model: nn.Module,
    eval_set: Sequence[EvalImage],
    model_id: str,
    meter: Optional[PowerMeter] = None,
    passes: int = 50,
    input_shape: Optional[Sequence[int]] = None,
    device: Optional[str] = None,
) -> ProfileReport:
    """
    Full resource report for a learned model.

    Args:
        model: Model to profile
        eval_set: Preloaded frames for the timed session
        model_id: Identifier written into the report
        meter: Energy source; None or a null meter leaves energy empty
        passes: Timed passes over the set
        input_shape: Frame shape for FLOP counting (defaults to the first image)
        device: Compute device

    Returns:
        ProfileReport
    """
    device = device or resolve_device()
    meter = meter or NullPowerMeter()
    if not eval_set:
        raise PreconditionError("profiling needs at least one image")
    input_shape = input_shape or tuple(eval_set[0].image.shape[-2:])

    model.to(device)
    gflops = count_flops(model, input_shape)
    active_meter = None if meter.capability == "null" else meter
    session = _model_session(model, eval_set, passes, device, meter=active_meter)
    report = report_from_session(
        model_id,
        session,
        meter,
        passes,
        device,
        params_m=count_parameters(model) / 1e6,
        memory_mb=memory_bytes(model) / 2**20,
        gflops_per_frame=gflops,
    )
    logger.info(
        f"Profiled {model_id}: {report.params_m:.2f} M params, {gflops:.2f} GFLOPs, "
        f"{report.throughput_fps:.1f} FPS"
    )
    return report
