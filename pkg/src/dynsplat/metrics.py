"""Evaluation metrics and report emission (metrics.csv + trajectory plots)."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PSNR_CAP = 99.0
CSV_COLUMNS = ("sequence", "ate_rmse_cm", "ate_std_cm", "psnr_db", "ssim", "mask_iou")


class MetricsError(ValueError):
    pass


def psnr(rendered: np.ndarray, reference: np.ndarray, region: np.ndarray) -> float:
    """10 log10(1 / MSE) over region pixels of [0,1] images; identical
    content reports the cap value."""
    region = np.asarray(region).astype(bool)
    if not region.any():
        raise MetricsError("empty evaluation region")
    diff = (rendered - reference)[region]
    mse = float(np.mean(diff**2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, float(10.0 * np.log10(1.0 / mse)))


def mask_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    p = np.asarray(pred) > 0.5
    g = np.asarray(gt) > 0.5
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


@dataclass
class SequenceResult:
    sequence: str
    ate_rmse_cm: float
    ate_std_cm: float
    psnr_db: float
    ssim: float
    mask_iou: float
    extras: dict = field(default_factory=dict)   # config echo, mask source, ...


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def emit_report(results: list[SequenceResult], outdir: str | Path,
                trajectories: dict[str, tuple[np.ndarray, np.ndarray]] | None = None,
                config_echo: dict | None = None) -> Path:
    """Write metrics.csv (one row per sequence), optional top-down
    trajectory overlay PNGs, and a report.txt sidecar echoing the config."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    lines = [",".join(CSV_COLUMNS)]
    for r in results:
        lines.append(",".join([r.sequence, _fmt(r.ate_rmse_cm), _fmt(r.ate_std_cm),
                               _fmt(r.psnr_db), _fmt(r.ssim), _fmt(r.mask_iou)]))
    csv_path = outdir / "metrics.csv"
    csv_path.write_text("\n".join(lines) + "\n")

    sidecar = []
    if config_echo:
        sidecar += [f"{k} = {v}" for k, v in sorted(config_echo.items())]
    for r in results:
        for k, v in sorted(r.extras.items()):
            sidecar.append(f"{r.sequence}.{k} = {v}")
    if sidecar:
        (outdir / "report.txt").write_text("\n".join(sidecar) + "\n")

    if trajectories:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        for name, (est, gt) in trajectories.items():
            fig, ax = plt.subplots(figsize=(5, 5))
            ax.plot(gt[:, 0], gt[:, 1], "k-", label="ground truth")
            ax.plot(est[:, 0], est[:, 1], "r--", label="estimated")
            ax.set_xlabel("x [m]")
            ax.set_ylabel("y [m]")
            ax.set_title(name)
            ax.legend()
            ax.set_aspect("equal", adjustable="datalim")
            fig.savefig(outdir / f"trajectory_{name}.png", dpi=100)
            plt.close(fig)
    return csv_path


def parse_metrics_csv(path: str | Path) -> list[SequenceResult]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != ",".join(CSV_COLUMNS):
        raise MetricsError(f"{path}: unexpected header")
    out = []
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = line.split(",")
        out.append(SequenceResult(parts[0], *[float(p) for p in parts[1:6]]))
    return out
