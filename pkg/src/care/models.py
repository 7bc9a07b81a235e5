"""U-Net-lite encoder-decoder with dual (density, confidence) or Gaussian heads."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, NamedTuple, Sequence

import numpy as np

from care.errors import ConfigError
from care.tensor import Tensor, concat, conv2d, maxpool2x, upsample2x

HEADS = ("dual_confidence", "gaussian")
LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0


@dataclass
class ModelConfig:
    in_channels: int = 4
    base_width: int = 8
    depth: int = 2
    head: str = "dual_confidence"
    seed: int = 0
    # initial confidence of the dual head, set through the head_c bias
    confidence_init: float = 0.9999

    def validate(self) -> "ModelConfig":
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_width < 2:
            raise ConfigError(f"base_width must be >= 2, got {self.base_width}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if not 0.0 < self.confidence_init < 1.0:
            raise ConfigError(f"confidence_init must be in (0, 1), got {self.confidence_init}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EnsembleConfig:
    member_seeds: List[int] = field(default_factory=lambda: [0])

    @property
    def M(self) -> int:
        return len(self.member_seeds)

    def validate(self) -> "EnsembleConfig":
        if not self.member_seeds:
            raise ConfigError("ensemble needs at least one member")
        if len(set(self.member_seeds)) != len(self.member_seeds):
            raise ConfigError(f"member seeds must be distinct, got {self.member_seeds}")
        return self

    @classmethod
    def from_base_seed(cls, seed: int, M: int) -> "EnsembleConfig":
        return cls([seed + 7919 * i for i in range(M)]).validate()


class DualPrediction(NamedTuple):
    y: Tensor  # B x H x W density in (0, 1)
    c: Tensor  # B x H x W confidence in (0, 1)


class GaussianPrediction(NamedTuple):
    mu: Tensor
    log_var: Tensor  # clamped to [LOG_VAR_MIN, LOG_VAR_MAX]

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_var.data / 2)


def layer_shapes(config: ModelConfig) -> "OrderedDict[str, tuple]":
    """(out_channels, in_channels, kernel) for every conv, in parameter order."""
    w = config.base_width
    shapes: "OrderedDict[str, tuple]" = OrderedDict()
    cin = config.in_channels
    for s in range(config.depth):
        cout = w * 2**s
        shapes[f"enc{s}"] = (cout, cin, 3)
        cin = cout
    # decoder walks back up; the first decoder stage sees the deepest pooled map
    below = cin
    for s in reversed(range(config.depth)):
        skip = w * 2**s
        shapes[f"dec{s}"] = (skip, below + skip, 3)
        below = skip
    if config.head == "dual_confidence":
        shapes["head_y"] = (1, below, 1)
        shapes["head_c"] = (1, below, 1)
    else:
        shapes["head_mu"] = (1, below, 1)
        shapes["head_logvar"] = (1, below, 1)
    return shapes


def count_parameters_closed_form(config: ModelConfig) -> int:
    return sum(k * k * cin * cout + cout for cout, cin, k in layer_shapes(config).values())


class Model:
    """Container of named parameters plus the forward pass.

    Parameters are float32 tensors named ``<layer>.weight`` / ``<layer>.bias``.
    """

    def __init__(self, config: ModelConfig):
        self.config = config.validate()
        rng = np.random.default_rng(config.seed)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        for layer, (cout, cin, k) in layer_shapes(config).items():
            bound = 1.0 / np.sqrt(cin * k * k)
            w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(np.float32)
            self.params[f"{layer}.weight"] = Tensor(w, requires_grad=True, name=f"{layer}.weight")
            self.params[f"{layer}.bias"] = Tensor(
                np.zeros(cout, dtype=np.float32), requires_grad=True, name=f"{layer}.bias"
            )
        if config.head == "dual_confidence":
            ci = config.confidence_init
            self.params["head_c.bias"].data[:] = np.log(ci / (1.0 - ci))

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return OrderedDict((name, p.data) for name, p in self.params.items())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in self.params.items():
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != p.shape:
                raise ConfigError(f"{name}: shape {arr.shape} != expected {p.shape}")
            p.data = arr.copy()

    def _conv(self, layer: str, x: Tensor, padding: int) -> Tensor:
        return conv2d(x, self.params[f"{layer}.weight"], self.params[f"{layer}.bias"], padding=padding)

    def features(self, batch: Tensor) -> Tensor:
        cfg = self.config
        if batch.ndim != 4 or batch.shape[1] != cfg.in_channels:
            raise ConfigError(f"expected batch of shape B x {cfg.in_channels} x H x W, got {batch.shape}")
        step = 2**cfg.depth
        if batch.shape[2] % step or batch.shape[3] % step:
            raise ConfigError(f"spatial extents {batch.shape[2:]} must be divisible by {step}")
        skips = []
        h = batch
        for s in range(cfg.depth):
            h = self._conv(f"enc{s}", h, 1).relu()
            skips.append(h)
            h = maxpool2x(h)
        for s in reversed(range(cfg.depth)):
            h = concat([upsample2x(h), skips[s]], axis=1)
            h = self._conv(f"dec{s}", h, 1).relu()
        return h

    def _head(self, layer: str, feats: Tensor) -> Tensor:
        out = self._conv(layer, feats, 0)
        B, _, H, W = out.shape
        return out.reshape(B, H, W)

    def forward_dual(self, batch: Tensor) -> DualPrediction:
        if self.config.head != "dual_confidence":
            raise ConfigError(f"forward_dual needs a dual_confidence head, model has {self.config.head!r}")
        feats = self.features(batch)
        return DualPrediction(self._head("head_y", feats).sigmoid(), self._head("head_c", feats).sigmoid())

    def forward_gaussian(self, batch: Tensor) -> GaussianPrediction:
        if self.config.head != "gaussian":
            raise ConfigError(f"forward_gaussian needs a gaussian head, model has {self.config.head!r}")
        feats = self.features(batch)
        mu = self._head("head_mu", feats)
        log_var = self._head("head_logvar", feats).clamp(LOG_VAR_MIN, LOG_VAR_MAX)
        return GaussianPrediction(mu, log_var)


def build_model(config: ModelConfig) -> Model:
    return Model(config)


def ensemble_predict(members: Sequence[Model], batch: Tensor):
    """Moments of the uniform mixture of member Gaussians.

    Returns ``(mu_bar, var_total)`` as float64 arrays of shape B x H x W, where
    ``var_total`` is the mean member variance plus the variance of member means.
    """
    if not members:
        raise ConfigError("ensemble_predict needs at least one member")
    shapes = {tuple(layer_shapes(m.config).items()) for m in members}
    if len(shapes) != 1:
        raise ConfigError("ensemble members do not share an architecture")
    mus, variances = [], []
    for m in members:
        pred = m.forward_gaussian(batch)
        mus.append(pred.mu.data.astype(np.float64))
        variances.append(np.exp(pred.log_var.data.astype(np.float64)))
    mus = np.stack(mus)
    mu_bar = mus.mean(axis=0)
    var_total = np.stack(variances).mean(axis=0) + ((mus - mu_bar) ** 2).mean(axis=0)
    return mu_bar, var_total
