"""Optimizers and training loops.

Two trainables: the classifier (supervised cross-entropy) and the defence
autoencoder (unsupervised; its loss matches classifier prediction
distributions between originals and reconstructions, optionally with
temperature-scaled targets or an extra hidden-layer probe term; an MSE
reconstruction baseline is included for comparison).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .errors import (
    CompositionError,
    ConfigError,
    ContractError,
    DataError,
    DivergenceError,
    ParameterError,
)
from .models import HiddenProbe, Model, build_probe, probe_dist_t

OPTIMIZER_KINDS = ("adam", "sgd_momentum")
LOSS_KINDS = ("kl", "mse", "kl_temperature", "kl_hidden")


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    batch_size: int = 128
    epochs: int = 10
    seed: int = 0
    lr_schedule: tuple[tuple[int, float], ...] = ()  # (after_epoch, factor)

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ParameterError(f"optimizer kind must be one of {OPTIMIZER_KINDS}, got {self.kind!r}")
        if not self.learning_rate > 0:
            raise ParameterError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ParameterError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ParameterError(f"epochs must be >= 0, got {self.epochs}")
        self.lr_schedule = tuple((int(e), float(f)) for e, f in self.lr_schedule)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "momentum": self.momentum,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "lr_schedule": [list(p) for p in self.lr_schedule],
        }

    @staticmethod
    def from_dict(d: dict) -> "OptimizerConfig":
        d = dict(d)
        d["lr_schedule"] = tuple(tuple(p) for p in d.get("lr_schedule", ()))
        return OptimizerConfig(**d)


@dataclass
class ProbeConfig:
    source_layer: int
    dim: int = 10

    def to_dict(self) -> dict:
        return {"source_layer": self.source_layer, "dim": self.dim}


@dataclass
class DefenceLossSpec:
    kind: str = "kl"
    temperature: float = 1.0
    hidden_weight: float = 1.0
    probe: ProbeConfig | None = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ParameterError(f"defence loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if not self.temperature > 0:
            raise ParameterError(f"temperature must be positive, got {self.temperature}")
        if self.hidden_weight < 0:
            raise ParameterError(f"hidden weight must be >= 0, got {self.hidden_weight}")
        if self.kind == "kl_hidden" and self.probe is None:
            raise ConfigError("kl_hidden loss needs a probe config")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "temperature": self.temperature, "hidden_weight": self.hidden_weight}
        if self.probe is not None:
            d["probe"] = self.probe.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "DefenceLossSpec":
        d = dict(d)
        if d.get("probe") is not None:
            d["probe"] = ProbeConfig(**d["probe"])
        return DefenceLossSpec(**d)


@dataclass
class TrainReport:
    kind: str
    seed: int
    loss_spec: dict | str
    epoch_losses: list[float]
    effective_lrs: list[float]
    final_loss: float
    wall_time_s: float

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, (loss, lr) in enumerate(zip(self.epoch_losses, self.effective_lrs), start=1):
                fh.write(json.dumps({"epoch": i, "mean_loss": loss, "effective_lr": lr}, sort_keys=True) + "\n")
            fh.write(
                json.dumps(
                    {
                        "summary": True,
                        "kind": self.kind,
                        "seed": self.seed,
                        "loss_spec": self.loss_spec,
                        "final_loss": self.final_loss,
                        "wall_time_s": self.wall_time_s,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


class Adam:
    def __init__(self, params: list[Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, lr_scale: float = 1.0) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            p.data -= (self.lr * lr_scale) * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)


class SgdMomentum:
    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.vel = [np.zeros_like(p.data) for p in params]

    def step(self, lr_scale: float = 1.0) -> None:
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.vel[i] = self.momentum * self.vel[i] - (self.lr * lr_scale) * g
            p.data += self.vel[i]


def make_optimizer(cfg: OptimizerConfig, params: list[Tensor]):
    if cfg.kind == "adam":
        return Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    return SgdMomentum(params, cfg.learning_rate, cfg.momentum)


def temperature_scale(p: np.ndarray, temperature: float) -> np.ndarray:
    """Renormalized power transform p^(1/T) / sum p^(1/T); preserves argmax."""
    if not (isinstance(temperature, (int, float)) and temperature > 0):
        raise ParameterError(f"temperature must be positive, got {temperature}")
    p = np.asarray(p, dtype=np.float64)
    rows = np.atleast_2d(p)
    if rows.min() < 0:
        raise ParameterError("temperature_scale expects a non-negative distribution")
    peak = rows.max(axis=1, keepdims=True)
    scaled = np.power(rows / np.maximum(peak, 1e-300), 1.0 / temperature)
    out = scaled / scaled.sum(axis=1, keepdims=True)
    return out.reshape(p.shape)


def _effective_lr_factor(schedule: tuple[tuple[int, float], ...], completed_epochs: int) -> float:
    factor = 1.0
    for after_epoch, f in schedule:
        if completed_epochs >= after_epoch:
            factor *= f
    return factor


def _iter_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_classifier(model: Model, x: np.ndarray, y: np.ndarray, cfg: OptimizerConfig) -> TrainReport:
    """Minimize cross-entropy -ln M(x)[y] in place; shuffles per epoch."""
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] != y.shape[0]:
        raise DataError(f"got {x.shape[0]} inputs but {y.shape[0]} labels")
    k = model.num_classes
    if y.size and (y.min() < 0 or y.max() >= k):
        raise DataError(f"labels must be in [0, {k}), got range [{y.min()}, {y.max()}]")
    params = model.store.trainable()
    if not params:
        raise ContractError("classifier has no trainable parameters")
    opt = make_optimizer(cfg, params)
    rng = np.random.default_rng(cfg.seed)
    n = x.shape[0]
    epoch_losses: list[float] = []
    effective_lrs: list[float] = []
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        lr_scale = _effective_lr_factor(cfg.lr_schedule, epoch - 1)
        effective_lrs.append(cfg.learning_rate * lr_scale)
        total = 0.0
        for batch in _iter_batches(n, cfg.batch_size, rng):
            xb = Tensor(x[batch])
            with Tape() as tape:
                logits = model.logits_t(xb, train=True, rng=rng)
                per = ad.sub(ad.logsumexp(logits), ad.take_per_row(logits, y[batch]))
                loss = ad.mean_all(per)
            backward(tape, loss)
            opt.step(lr_scale)
            total += loss.item() * len(batch)
        mean_loss = total / n
        if not np.isfinite(mean_loss):
            raise DivergenceError(f"classifier loss became non-finite at epoch {epoch}", epoch=epoch)
        epoch_losses.append(mean_loss)
    return TrainReport(
        kind="classifier",
        seed=cfg.seed,
        loss_spec="cross_entropy",
        epoch_losses=epoch_losses,
        effective_lrs=effective_lrs,
        final_loss=epoch_losses[-1] if epoch_losses else float("nan"),
        wall_time_s=time.perf_counter() - t0,
    )


def _defence_batch_loss(
    ae: Model,
    classifier: Model,
    xb: np.ndarray,
    loss_spec: DefenceLossSpec,
    probe: HiddenProbe | None,
) -> Tensor:
    """One tape-recorded defence loss value for a batch (tape must be active)."""
    xt = Tensor(xb)
    recon = ae.reconstruct_t(xt)
    if loss_spec.kind == "mse":
        diff = ad.sub(recon, xt)
        return ad.mean_all(ad.mul(diff, diff))
    if loss_spec.kind == "kl_hidden":
        target = Tensor(classifier.predict_proba(xb))
        q, feats_recon = classifier.proba_t_with_capture(recon, probe.source_layer)
        base = ad.kl_divergence(target, q)
        feats_orig = Tensor(classifier.features(xb, probe.source_layer))
        y_orig = probe_dist_t(probe, feats_orig)
        y_recon = probe_dist_t(probe, feats_recon)
        return ad.add(base, ad.mul_scalar(ad.kl_divergence(y_orig, y_recon), loss_spec.hidden_weight))
    target_np = classifier.predict_proba(xb)
    if loss_spec.kind == "kl_temperature":
        target_np = temperature_scale(target_np, loss_spec.temperature)
    return ad.kl_divergence(Tensor(target_np), classifier.proba_t(recon))


def defence_loss_value(ae: Model, classifier: Model, x: np.ndarray, loss_spec: DefenceLossSpec, probe: HiddenProbe | None = None) -> float:
    """Mean defence loss over a dataset, without touching any parameters."""
    if loss_spec.kind == "kl_hidden" and probe is None:
        raise ConfigError("kl_hidden loss needs the trained probe to evaluate")
    return _defence_batch_loss(ae, classifier, x, loss_spec, probe).item()


def train_defence(
    ae: Model,
    classifier: Model,
    x: np.ndarray,
    loss_spec: DefenceLossSpec,
    cfg: OptimizerConfig,
    probe: HiddenProbe | None = None,
    checkpoint_every: int | None = None,
    checkpoint_dir=None,
    checkpoint_prefix: str = "ae",
) -> tuple[TrainReport, HiddenProbe | None]:
    """Train the autoencoder against a frozen classifier; unsupervised.

    Only the autoencoder parameters move (plus the probe projection for the
    hidden-layer loss). Optionally emits a checkpoint every
    ``checkpoint_every`` epochs for later ensembling.
    """
    if not classifier.store.is_fully_frozen():
        raise ContractError("classifier must be frozen before defence training")
    if ae.output_shape != classifier.input_shape:
        raise CompositionError(
            f"autoencoder output {ae.output_shape} does not match classifier input {classifier.input_shape}"
        )
    if loss_spec.kind == "kl_hidden" and probe is None:
        probe = build_probe(classifier, loss_spec.probe.source_layer, loss_spec.probe.dim, seed=cfg.seed + 1)
    params = ae.store.trainable()
    if loss_spec.kind == "kl_hidden":
        params = params + probe.trainable()
    if not params:
        raise ContractError("autoencoder has no trainable parameters")
    opt = make_optimizer(cfg, params)
    rng = np.random.default_rng(cfg.seed)
    n = x.shape[0]
    epoch_losses: list[float] = []
    effective_lrs: list[float] = []
    t0 = time.perf_counter()
    from .models import save_checkpoint  # local import to avoid cycle noise

    for epoch in range(1, cfg.epochs + 1):
        lr_scale = _effective_lr_factor(cfg.lr_schedule, epoch - 1)
        effective_lrs.append(cfg.learning_rate * lr_scale)
        total = 0.0
        for batch in _iter_batches(n, cfg.batch_size, rng):
            with Tape() as tape:
                loss = _defence_batch_loss(ae, classifier, x[batch], loss_spec, probe)
            backward(tape, loss)
            opt.step(lr_scale)
            total += loss.item() * len(batch)
        mean_loss = total / n
        if not np.isfinite(mean_loss):
            raise DivergenceError(f"defence loss became non-finite at epoch {epoch}", epoch=epoch)
        epoch_losses.append(mean_loss)
        if checkpoint_every and checkpoint_dir is not None and epoch % checkpoint_every == 0:
            save_checkpoint(ae, Path(checkpoint_dir) / f"{checkpoint_prefix}_epoch_{epoch:03d}.ckpt")
    report = TrainReport(
        kind="defence",
        seed=cfg.seed,
        loss_spec=loss_spec.to_dict(),
        epoch_losses=epoch_losses,
        effective_lrs=effective_lrs,
        final_loss=epoch_losses[-1] if epoch_losses else float("nan"),
        wall_time_s=time.perf_counter() - t0,
    )
    return report, probe
