import pytest

from src.core.errors import PreconditionError
from src.core.schemas import ProfileReport, RDCurve, RDPoint, RDRecord
from src.services.plotting import plot_mse_curves, plot_rd_curves, plot_resources
from src.storage.results import ResultsFile


def curve(model_id, offset=0.0, n=4):
    points = [RDPoint(bpp=0.1 * 2**i, psnr=28 + 2.5 * i + offset, label=f"q{i}") for i in range(n)]
    return RDCurve(points=points, model_id=model_id)


def test_single_curve_writes_png(tmp_path):
    path = plot_rd_curves([curve("student-n64")], tmp_path / "rd.png")
    assert path.exists() and path.stat().st_size > 0
    assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_channel_sweep_overlay(tmp_path):
    curves = [curve(f"student-n{n}", offset=-0.3 * (128 - n) / 16) for n in (16, 32, 64, 96, 112)]
    curves.append(RDCurve(points=[RDPoint(bpp=0.67, psnr=34.53)], model_id="teacher"))
    rd = plot_rd_curves(curves, tmp_path / "overlay" / "rd.png", title="Students vs teacher")
    mse = plot_mse_curves(curves, tmp_path / "overlay" / "mse.png")
    assert rd.exists() and mse.exists()


def test_empty_input_writes_nothing(tmp_path):
    with pytest.raises(PreconditionError):
        plot_rd_curves([], tmp_path / "rd.png")
    with pytest.raises(PreconditionError):
        plot_mse_curves([RDCurve(points=[], model_id="empty")], tmp_path / "mse.png")
    assert not list(tmp_path.iterdir())


def test_resource_plots_follow_available_axes(tmp_path):
    results = ResultsFile(
        records=[
            RDRecord(model_id=c.model_id, config_hash="h", commit="test", point=p)
            for c in (curve("teacher", 1.0), curve("student"))
            for p in c.points
        ],
        profiles=[
            ProfileReport(
                model_id="teacher",
                params_m=5.07,
                memory_mb=19.4,
                gflops_per_frame=34.3,
                throughput_fps=150.0,
                latency_ms_per_frame=6.7,
                passes=50,
                device_desc="cpu",
            ),
            ProfileReport(
                model_id="student",
                params_m=0.27,
                memory_mb=1.0,
                gflops_per_frame=1.0,
                throughput_fps=190.0,
                latency_ms_per_frame=5.3,
                passes=50,
                device_desc="cpu",
            ),
        ],
    )
    written = plot_resources(results, tmp_path / "res")
    names = sorted(p.name for p in written)
    # no energy columns without a meter
    assert names == sorted(
        f"resources_{axis}.png"
        for axis in ("params_m", "memory_mb", "gflops_per_frame", "throughput_fps", "latency_ms_per_frame")
    )
    assert plot_resources(ResultsFile(records=results.records), tmp_path / "none") == []
