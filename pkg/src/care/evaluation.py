"""Confidence-quality metrics, abstention, n-shot sweeps, comparison tables and map export."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from care.errors import ConfigError
from care.models import ensemble_predict
from care.synthetic import DENSITY_WINDOW, Dataset, RasterTile, sample_nshot
from care.tensor import Tensor, no_grad
from care.training import Checkpoint, TrainConfig, parse_baseline, train

# Smallest nonzero value the density target can take: one built pixel in the window.
DENSITY_FLOOR = 1.0 / DENSITY_WINDOW**2
PANELS = ("prediction", "ground_truth", "confidence", "abs_error", "discrepancy")


@dataclass
class EvalConfig:
    zeta_list: List[float] = field(default_factory=lambda: [0.2, 0.1])
    density_floor: float = DENSITY_FLOOR
    split: str = "val"
    batch_size: int = 64

    def validate(self) -> "EvalConfig":
        if not self.zeta_list:
            raise ConfigError("zeta_list must not be empty")
        for z in self.zeta_list:
            if not 0.0 < z < 1.0:
                raise ConfigError(f"zeta_list: each zeta must be in (0, 1), got {z}")
        if self.density_floor <= 0:
            raise ConfigError(f"density_floor must be > 0, got {self.density_floor}")
        if self.split not in ("val", "test"):
            raise ConfigError(f"split must be 'val' or 'test', got {self.split!r}")
        return self


@dataclass
class EvalReport:
    """One row of a results table. ``None`` marks an undefined metric."""

    model: str
    n: int
    mean_discrepancy: float
    median_discrepancy: float
    mse: float
    mse_at: Dict[float, Optional[float]]
    retained: Dict[float, float]
    pearson_r: Optional[float]
    tiles: int = 0
    split: Optional[str] = None
    seed: Optional[int] = None


# metrics -------------------------------------------------------------------

def _flat64(*maps) -> List[np.ndarray]:
    arrays = [np.asarray(m, dtype=np.float64).reshape(-1) for m in maps]
    if len({a.size for a in arrays}) != 1:
        raise ValueError(f"shape mismatch: {[np.shape(m) for m in maps]}")
    return arrays


def discrepancy_map(y, y_star, c) -> np.ndarray:
    y, y_star, c = (np.asarray(a, dtype=np.float64) for a in (y, y_star, c))
    return np.abs(np.abs(y - y_star) - (1.0 - c))


def lower_median(values: np.ndarray) -> float:
    values = np.asarray(values).reshape(-1)
    k = (values.size - 1) // 2
    return float(np.partition(values, k)[k])


def discrepancy_stats(y, y_star, c) -> Tuple[float, float]:
    """Mean and lower median of ``| |y - y*| - (1 - c) |`` over all pixels."""
    y, y_star, c = _flat64(y, y_star, c)
    if y.size == 0:
        raise ValueError("discrepancy_stats: no pixels")
    d = discrepancy_map(y, y_star, c)
    return float(d.mean()), lower_median(d)


def abstention_mask(y, c, zeta: float, density_floor: float = DENSITY_FLOOR) -> np.ndarray:
    """1 where the pixel is kept: ``1 - c <= zeta * max(y, density_floor)``."""
    y = np.asarray(y, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    return ((1.0 - c) <= zeta * np.maximum(y, density_floor)).astype(np.uint8)


def mse_retained(y, y_star, mask) -> Tuple[Optional[float], float]:
    """MSE over kept pixels and the kept fraction; MSE is ``None`` when nothing is kept."""
    y, y_star, mask = _flat64(y, y_star, mask)
    keep = mask > 0
    fraction = float(keep.sum()) / keep.size if keep.size else 0.0
    if not keep.any():
        return None, fraction
    return float(((y[keep] - y_star[keep]) ** 2).mean()), fraction


def confidence_error_correlation(y, y_star, c) -> Optional[float]:
    """Pearson r between uncertainty ``1 - c`` and ``|y - y*|``; ``None`` if either is constant."""
    y, y_star, c = _flat64(y, y_star, c)
    if y.size < 2:
        raise ValueError("correlation needs at least 2 pixels")
    u = 1.0 - c
    e = np.abs(y - y_star)
    du, de = u - u.mean(), e - e.mean()
    denom = math.sqrt(float((du * du).sum()) * float((de * de).sum()))
    if denom == 0.0:
        return None
    return float((du * de).sum() / denom)


def evaluate_maps(y, y_star, c, config: Optional[EvalConfig] = None, model: str = "model", n: int = 0, **meta) -> EvalReport:
    config = (config or EvalConfig()).validate()
    mean_d, median_d = discrepancy_stats(y, y_star, c)
    mse, _ = mse_retained(y, y_star, np.ones(np.shape(y)))
    mse_at, retained = {}, {}
    for z in config.zeta_list:
        mse_at[z], retained[z] = mse_retained(y, y_star, abstention_mask(y, c, z, config.density_floor))
    return EvalReport(
        model=model,
        n=n,
        mean_discrepancy=mean_d,
        median_discrepancy=median_d,
        mse=mse,
        mse_at=mse_at,
        retained=retained,
        pearson_r=confidence_error_correlation(y, y_star, c),
        tiles=int(np.shape(y)[0]) if np.ndim(y) == 3 else 1,
        **meta,
    )


# prediction ----------------------------------------------------------------

def gaussian_confidence(variance: np.ndarray) -> np.ndarray:
    """Confidence for Gaussian outputs, ``1 - clamp(sigma, 0, 1)``."""
    return 1.0 - np.clip(np.sqrt(variance), 0.0, 1.0)


def predict(ckpt: Checkpoint, inputs: np.ndarray, batch_size: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    """Density and confidence maps (N x H x W) for normalized ``inputs``."""
    kind, _ = parse_baseline(ckpt.train_config.baseline)
    models = ckpt.models()
    ys, cs = [], []
    with no_grad():
        for start in range(0, len(inputs), batch_size):
            x = Tensor(inputs[start : start + batch_size])
            if models[0].config.head == "dual_confidence":
                pred = models[0].forward_dual(x)
                ys.append(pred.y.data.astype(np.float64))
                cs.append(pred.c.data.astype(np.float64))
            else:
                # a single Gaussian model is a one-member mixture
                mu, var = ensemble_predict(models, x)
                ys.append(mu)
                cs.append(gaussian_confidence(var))
    return np.concatenate(ys), np.concatenate(cs)


def evaluate_checkpoint(
    ckpt: Checkpoint,
    dataset: Dataset,
    config: Optional[EvalConfig] = None,
    n: int = 0,
    ids: Optional[Sequence[int]] = None,
    model: Optional[str] = None,
) -> EvalReport:
    """Evaluate on ``ids`` (default: the configured split); ``model`` defaults to the baseline name."""
    config = (config or EvalConfig()).validate()
    ids = list(ids) if ids is not None else dataset.split_ids(config.split)
    x, y_star = dataset.arrays(ids, ckpt.normalization)
    y, c = predict(ckpt, x, config.batch_size)
    return evaluate_maps(
        y, y_star, c, config, model=model or ckpt.train_config.baseline, n=n, split=config.split, seed=ckpt.train_config.seed
    )


def run_nshot(
    dataset: Dataset,
    n_list: Sequence[int],
    train_config: TrainConfig,
    eval_config: Optional[EvalConfig] = None,
    seeds: Sequence[int] = (0,),
    model_config=None,
) -> List[EvalReport]:
    """Train on ``n`` stratified tiles per region for each ``n`` and seed; evaluate on the held-out split."""
    eval_config = (eval_config or EvalConfig()).validate()
    reports = []
    for n in n_list:
        for seed in seeds:
            ids = sample_nshot(dataset.manifest, n, seed)
            x, y = dataset.arrays(ids)
            cfg = TrainConfig.from_dict({**train_config.to_dict(), "seed": seed})
            ckpt = train(x, y, cfg, model_config, dataset.normalization)
            reports.append(evaluate_checkpoint(ckpt, dataset, eval_config, n=n))
    return reports


# comparison ----------------------------------------------------------------

def _metric_values(r: EvalReport) -> Dict[str, Optional[float]]:
    out = {"err_mean": r.mean_discrepancy, "err_median": r.median_discrepancy, "mse": r.mse}
    for z in sorted(r.mse_at, reverse=True):
        out[f"mse_{zeta_tag(z)}"] = r.mse_at[z]
    out["pearson_r"] = r.pearson_r
    return out


def percent_improvement(a: Optional[float], b: Optional[float], higher_is_better: bool = False) -> Optional[float]:
    """Improvement of ``a`` over ``b`` in percent of ``b``."""
    if a is None or b is None or b == 0:
        return None
    return (a - b) / b * 100.0 if higher_is_better else (b - a) / b * 100.0


def compare_models(reports: Sequence[EvalReport]) -> List[dict]:
    """Percentage improvement of the first report over each of the others, per metric."""
    if len(reports) < 2:
        raise ValueError("compare_models needs at least 2 reports")
    ref = reports[0]
    ref_values = _metric_values(ref)
    rows = []
    for other in reports[1:]:
        for attr in ("n", "split", "seed"):
            a, b = getattr(ref, attr), getattr(other, attr)
            if a is not None and b is not None and a != b:
                raise ConfigError(f"cannot compare reports with different {attr}: {a!r} vs {b!r}")
        if set(ref.mse_at) != set(other.mse_at):
            raise ConfigError(f"cannot compare reports with different zeta sets: {sorted(ref.mse_at)} vs {sorted(other.mse_at)}")
        other_values = _metric_values(other)
        row = {"model": ref.model, "baseline": other.model}
        for key, a in ref_values.items():
            row[key] = percent_improvement(a, other_values[key], higher_is_better=(key == "pearson_r"))
        rows.append(row)
    return rows


def _fmt(v) -> str:
    if v is None:
        return "undefined"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def comparison_markdown(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    cells = [cols] + [[r[c] if isinstance(r[c], str) else ("undefined" if r[c] is None else f"{r[c]:.2f}%") for c in cols] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    lines = ["| " + " | ".join(v.ljust(w) for v, w in zip(row, widths)) + " |" for row in cells]
    lines.insert(1, "|" + "|".join("-" * (w + 2) for w in widths) + "|")
    return "\n".join(lines) + "\n"


def write_comparison_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        cols = list(rows[0])
        writer.writerow(cols)
        for r in rows:
            writer.writerow([_fmt(r[c]) for c in cols])


# report CSV ------------------------------------------------------------------

def zeta_tag(zeta: float) -> str:
    return f"{round(zeta * 100):d}"


def report_columns(zetas: Sequence[float]) -> List[str]:
    cols = ["model", "n", "err_mean", "err_median", "mse"]
    for z in zetas:
        cols += [f"mse_{zeta_tag(z)}", f"frac_{zeta_tag(z)}"]
    return cols + ["pearson_r"]


def write_reports_csv(reports: Sequence[EvalReport], path) -> None:
    zetas = list(reports[0].mse_at)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(report_columns(zetas))
        for r in reports:
            if list(r.mse_at) != zetas:
                raise ConfigError("all reports in one CSV must share the zeta list")
            row = [r.model, r.n, _fmt(r.mean_discrepancy), _fmt(r.median_discrepancy), _fmt(r.mse)]
            for z in zetas:
                row += [_fmt(r.mse_at[z]), _fmt(r.retained[z])]
            writer.writerow(row + [_fmt(r.pearson_r)])


def _parse(v: str) -> Optional[float]:
    return None if v in ("undefined", "") else float(v)


def read_reports_csv(path) -> List[EvalReport]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
        f.seek(0)
        header = next(csv.reader(f))
    zetas = [int(col[4:]) / 100 for col in header if col.startswith("mse_")]
    expected = report_columns(zetas)
    if header != expected:
        raise ConfigError(f"{path}: unexpected columns {header}, expected {expected}")
    reports = []
    for row in rows:
        reports.append(
            EvalReport(
                model=row["model"],
                n=int(row["n"]),
                mean_discrepancy=_parse(row["err_mean"]),
                median_discrepancy=_parse(row["err_median"]),
                mse=_parse(row["mse"]),
                mse_at={z: _parse(row[f"mse_{zeta_tag(z)}"]) for z in zetas},
                retained={z: _parse(row[f"frac_{zeta_tag(z)}"]) for z in zetas},
                pearson_r=_parse(row["pearson_r"]),
            )
        )
    return reports


# map export ----------------------------------------------------------------

def write_pgm(values: np.ndarray, path) -> None:
    """Binary greyscale PGM, [0, 1] mapped linearly onto 0..255."""
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape
    pixels = np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def map_panels(y, y_star, c) -> Dict[str, np.ndarray]:
    y, y_star, c = (np.asarray(a, dtype=np.float64) for a in (y, y_star, c))
    abs_err = np.abs(y - y_star)
    return {
        "prediction": y,
        "ground_truth": y_star,
        "confidence": c,
        "abs_error": abs_err,
        "discrepancy": np.abs(abs_err - (1.0 - c)),
    }


def export_maps(ckpt: Checkpoint, tile: RasterTile, out_prefix) -> List[Path]:
    """Write one PGM per panel plus ``<prefix>_maps.json`` with each panel's raw min/max."""
    norm = ckpt.normalization or {"means": [0.0] * tile.input.shape[0], "stds": [1.0] * tile.input.shape[0]}
    means = np.asarray(norm["means"], dtype=np.float32)[:, None, None]
    stds = np.asarray(norm["stds"], dtype=np.float32)[:, None, None]
    x = ((tile.input - means) / stds).astype(np.float32)[None]
    y, c = predict(ckpt, x)
    return export_panels(y[0], tile.y_star, c[0], out_prefix, tile_id=tile.tile_id, region=tile.region)


def export_panels(y, y_star, c, out_prefix, **meta) -> List[Path]:
    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    written = []
    ranges = {}
    for name, values in map_panels(y, y_star, c).items():
        path = prefix.parent / f"{prefix.name}_{name}.pgm"
        write_pgm(values, path)
        ranges[name] = {"min": float(values.min()), "max": float(values.max())}
        written.append(path)
    sidecar = prefix.parent / f"{prefix.name}_maps.json"
    sidecar.write_text(json.dumps({**meta, "panels": ranges}, indent=1, sort_keys=True) + "\n")
    written.append(sidecar)
    return written
