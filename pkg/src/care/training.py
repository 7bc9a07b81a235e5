"""Two-phase trainer for CARE and its baselines."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from care.losses import (
    assign_confidence_targets,
    image_level_targets,
    loss_absolute_error,
    loss_confidence,
    loss_error_sorting,
    loss_gaussian_nll,
    loss_regression,
)
from care.errors import ConfigError
from care.models import EnsembleConfig, Model, ModelConfig, build_model
from care.tensor import SGD, NumericError, Tensor

logger = logging.getLogger(__name__)

DUAL_BASELINES = ("care", "error_sorting", "absolute_error")
GAUSSIAN_BASELINES = ("gaussian_nll",)
CHECKPOINT_VERSION = 1

# Recommended overrides per baseline family. The Gaussian NLL divides the mean
# gradient by the predicted variance, so plain SGD diverges once log_var drops.
BASELINE_DEFAULTS = {
    "gaussian_nll": {"grad_clip": 0.3, "lr": 0.02},
    "ensemble": {"grad_clip": 0.3, "lr": 0.02},
}


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or update."""


def parse_baseline(baseline: str):
    """Split ``"ensemble:M"`` into ``("ensemble", M)``; other names map to ``(name, 1)``."""
    if baseline.startswith("ensemble"):
        _, _, m = baseline.partition(":")
        try:
            M = int(m) if m else 1
        except ValueError:
            raise ConfigError(f"bad ensemble size in baseline {baseline!r}") from None
        if M < 1:
            raise ConfigError(f"ensemble needs M >= 1, got {M}")
        return "ensemble", M
    if baseline in DUAL_BASELINES or baseline in GAUSSIAN_BASELINES:
        return baseline, 1
    raise ConfigError(
        f"unknown baseline {baseline!r}; expected one of "
        f"{DUAL_BASELINES + GAUSSIAN_BASELINES} or ensemble:M"
    )


def head_for(baseline: str) -> str:
    kind, _ = parse_baseline(baseline)
    return "dual_confidence" if kind in DUAL_BASELINES else "gaussian"


@dataclass
class TrainConfig:
    eta: float = 0.8
    lam: float = 3.0
    phase0_epochs: int = 8
    phase1_epochs: int = 12
    batch_size: int = 8
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    baseline: str = "care"
    sort_granularity: str = "pixel"
    # global L2 gradient-norm cap; None disables clipping
    grad_clip: Optional[float] = None

    def validate(self) -> "TrainConfig":
        if not 0.0 < self.eta < 1.0:
            raise ConfigError(f"eta must be in (0, 1), got {self.eta}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.phase0_epochs < 0 or self.phase1_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.sort_granularity not in ("pixel", "image"):
            raise ConfigError(f"sort_granularity must be 'pixel' or 'image', got {self.sort_granularity!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be > 0 or null, got {self.grad_clip}")
        parse_baseline(self.baseline)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def for_baseline(cls, baseline: str = "care", **overrides) -> "TrainConfig":
        """Defaults tuned for ``baseline``, then ``overrides`` on top."""
        kind, _ = parse_baseline(baseline)
        return cls(**{**BASELINE_DEFAULTS.get(kind, {}), "baseline": baseline, **overrides})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    members: List[Dict[str, np.ndarray]]
    log: List[dict] = field(default_factory=list)
    normalization: Optional[dict] = None
    version: int = CHECKPOINT_VERSION

    def models(self) -> List[Model]:
        """Rebuild every stored member; seeds come from the stored config."""
        out = []
        for i, state in enumerate(self.members):
            cfg = ModelConfig(**{**self.model_config.to_dict(), "seed": self.member_seeds()[i]})
            m = build_model(cfg)
            m.load_state_dict(state)
            out.append(m)
        return out

    def member_seeds(self) -> List[int]:
        kind, M = parse_baseline(self.train_config.baseline)
        if kind == "ensemble":
            return EnsembleConfig.from_base_seed(self.model_config.seed, M).member_seeds
        return [self.model_config.seed]


class LossTerms(NamedTuple):
    total: Tensor
    l0: float
    l1: float


def _targets(errors: np.ndarray, config: TrainConfig) -> np.ndarray:
    if config.sort_granularity == "image":
        return image_level_targets(errors, config.eta)
    return assign_confidence_targets(errors.reshape(-1), config.eta).reshape(errors.shape)


def loss_combined(x: Tensor, y_star: np.ndarray, model: Model, config: TrainConfig, lam: Optional[float] = None) -> LossTerms:
    """Training objective for one mini-batch.

    Dual-head baselines return ``L0 + lam * L1``. For ``gaussian_nll`` and
    ensemble members, ``lam == 0`` trains the mean head on MSE (warm-up) and
    ``lam > 0`` trains on the Gaussian NLL alone; ``l1`` reports the NLL.
    """
    lam = config.lam if lam is None else lam
    kind, _ = parse_baseline(config.baseline)
    y_star = np.asarray(y_star, dtype=np.float32)
    if kind in DUAL_BASELINES:
        pred = model.forward_dual(x)
        l0 = loss_regression(pred.y, y_star)
        # labels come from the current errors but are constants for the gradient
        c_star = _targets(np.abs(pred.y.data - y_star), config)
        if kind == "care":
            l1 = loss_confidence(pred.y, y_star, pred.c, c_star)
        elif kind == "error_sorting":
            l1 = loss_error_sorting(pred.c, c_star)
        else:
            l1 = loss_absolute_error(pred.y, y_star, pred.c)
        total = l0 if lam == 0 else l0 + l1 * lam
        return LossTerms(total, float(l0.data), float(l1.data))
    pred = model.forward_gaussian(x)
    l0 = loss_regression(pred.mu, y_star)
    nll = loss_gaussian_nll(pred.mu, pred.log_var, y_star)
    total = l0 if lam == 0 else nll
    return LossTerms(total, float(l0.data), float(nll.data))


def clip_grad_norm(grads: Dict[Tensor, Tensor], max_norm: Optional[float]) -> Dict[Tensor, Tensor]:
    """Rescale all gradients together so their joint L2 norm is at most ``max_norm``."""
    if max_norm is None:
        return grads
    norm = float(np.sqrt(sum(float(np.sum(g.data.astype(np.float64) ** 2)) for g in grads.values())))
    if not np.isfinite(norm):
        raise NumericError(f"gradient norm is {norm}")
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {p: Tensor(g.data * np.float32(scale)) for p, g in grads.items()}


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    perm = rng.permutation(n)
    chunks = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


def _train_one(model: Model, inputs: np.ndarray, targets: np.ndarray, config: TrainConfig, seed: int, member: int) -> List[dict]:
    rng = np.random.default_rng(seed)
    opt = SGD(model.parameters(), lr=config.lr, momentum=config.momentum)
    log = []
    schedule = [(1, 0.0)] * config.phase0_epochs + [(2, config.lam)] * config.phase1_epochs
    for epoch, (phase, lam) in enumerate(schedule):
        sums = np.zeros(3, dtype=np.float64)
        batches = _batches(len(inputs), config.batch_size, rng)
        for b, idx in enumerate(batches):
            try:
                # overflow is reported as NumericError by the tensor core, not as a warning
                with np.errstate(over="ignore", invalid="ignore"):
                    terms = loss_combined(Tensor(inputs[idx]), targets[idx], model, config, lam=lam)
                    grads = terms.total.backward()
                    # heads outside the objective (phase 1 confidence head) get explicit zeros
                    grads = clip_grad_norm(grads, config.grad_clip)
                    opt.step({p: grads.get(p) or Tensor(np.zeros_like(p.data)) for p in opt.params})
            except NumericError as exc:
                raise DivergenceError(f"member {member} epoch {epoch} batch {b}: {exc}") from exc
            sums += (terms.l0, terms.l1, float(terms.total.data))
        l0, l1, total = sums / len(batches)
        log.append({"member": member, "epoch": epoch, "phase": phase, "L0": l0, "L1": l1, "total": total})
        logger.info("member %d epoch %d phase %d L0=%.5f L1=%.5f total=%.5f", member, epoch, phase, l0, l1, total)
    return log


def train(
    inputs: np.ndarray,
    targets: np.ndarray,
    config: TrainConfig,
    model_config: Optional[ModelConfig] = None,
    normalization: Optional[dict] = None,
) -> Checkpoint:
    """Train per ``config`` on normalized ``inputs`` (N x C x H x W) and ``targets`` (N x H x W).

    Phase 1 runs ``phase0_epochs`` with lambda 0, phase 2 runs
    ``phase1_epochs`` with ``config.lam``. ``ensemble:M`` trains M Gaussian
    models from distinct seeds and stores every member.
    """
    config.validate()
    inputs = np.asarray(inputs, dtype=np.float32)
    targets = np.asarray(targets, dtype=np.float32)
    if len(inputs) == 0:
        raise ConfigError("training set is empty")
    if len(inputs) != len(targets):
        raise ConfigError(f"{len(inputs)} inputs but {len(targets)} targets")
    base = model_config or ModelConfig(in_channels=inputs.shape[1])
    base = ModelConfig(**{**base.to_dict(), "head": head_for(config.baseline), "seed": config.seed})
    base.validate()
    if base.in_channels != inputs.shape[1]:
        raise ConfigError(f"model expects {base.in_channels} channels, data has {inputs.shape[1]}")

    kind, M = parse_baseline(config.baseline)
    seeds = EnsembleConfig.from_base_seed(config.seed, M).member_seeds if kind == "ensemble" else [config.seed]
    members, log = [], []
    for i, seed in enumerate(seeds):
        model = build_model(ModelConfig(**{**base.to_dict(), "seed": seed}))
        log += _train_one(model, inputs, targets, config, seed, i)
        members.append({k: v.copy() for k, v in model.state_dict().items()})
    return Checkpoint(base, config, members, log, normalization)


def write_log_csv(log: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["member", "epoch", "phase", "L0", "L1", "total"])
        for row in log:
            writer.writerow([row["member"], row["epoch"], row["phase"], repr(row["L0"]), repr(row["L1"]), repr(row["total"])])
