"""Optimizers, the four training objectives and saliency-driven weighting.

Objectives (all means over the batch, weight penalty outside the mean):

* classifier:    cross-entropy + weight_decay * sum ||W||^2
* auto-encoder:  (1/N) sum_n ||x_n - D(E(x_n))||^2 + weight penalty
* stacked plain: cross-entropy of classifier(D(E(x))) + penalty on the
  auto-encoder weights only (classifier frozen)
* stacked sparse: adds gamma * (1/N) sum_n ||x_n - r_n||^2 and
  beta * (1/N) sum_n ||r_n||_1 where r = D(E(x)); in auto mode the two
  terms are replaced by saliency-weighted versions
  (1/N) sum_n ||(x_n - r_n) * g_n||^2 + (C/N) sum_n b_n ||r_n||_1 with
  g_n the min-max-scaled input saliency of instance n and b_n the mean of
  its inversion.

Training is deterministic for a fixed seed: initialisation, batch order and
optimizer state all derive from it.  There is no early stopping; the model
is restored to its best-validation epoch after the configured number of
epochs.  A non-finite loss aborts the run with the last good parameters
left in place.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import DataBundle, Dataset, batch_iter
from .engine import Array, EngineError, Tape
from .models import Model, ModelBundle, accuracy, reconstruct

GradFn = Callable[[dict[str, Array]], tuple[float, dict[str, Array]]]


class ConfigError(ValueError):
    """Invalid training configuration."""


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; the model keeps its last good parameters."""


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")


@dataclass
class TSInsightConfig:
    gamma: Optional[float] = None
    beta: Optional[float] = None
    mode: str = "manual"  # manual | auto
    C: float = 10.0  # sparsity-term scale, auto mode only
    scope: str = "dataset"  # dataset | instance
    pointwise_beta: bool = False  # auto mode: per-feature instead of per-instance-mean weights
    instance_steps: int = 200

    def validate(self) -> None:
        if self.mode not in ("manual", "auto"):
            raise ConfigError(f"mode must be 'manual' or 'auto', got {self.mode!r}")
        if self.scope not in ("dataset", "instance"):
            raise ConfigError(f"scope must be 'dataset' or 'instance', got {self.scope!r}")
        if self.mode == "manual":
            if self.gamma is None or self.beta is None:
                raise ConfigError("manual mode requires explicit gamma and beta")
        for name in ("gamma", "beta"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ConfigError(f"{name} must be >= 0, got {value}")
        if self.instance_steps < 1:
            raise ConfigError(f"instance_steps must be >= 1, got {self.instance_steps}")


@dataclass
class FitReport:
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    test_accuracy: Optional[float] = None
    best_epoch: int = -1
    wall_time_s: float = 0.0
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "val_accuracy": self.val_accuracy,
            "test_accuracy": self.test_accuracy,
            "best_epoch": self.best_epoch,
            "wall_time_s": self.wall_time_s,
            "extras": self.extras,
        }


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class Sgd:
    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, params: dict[str, Array], grads: dict[str, Array]) -> dict[str, Array]:
        return {k: params[k] - self.learning_rate * grads[k] for k in params}


class Adam:
    def __init__(self, learning_rate: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, Array] = {}
        self.v: dict[str, Array] = {}

    def step(self, params: dict[str, Array], grads: dict[str, Array]) -> dict[str, Array]:
        self.t += 1
        out = {}
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            self.m[name], self.v[name] = m, v
            m_hat = m / (1.0 - self.beta1**self.t)
            v_hat = v / (1.0 - self.beta2**self.t)
            out[name] = p - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return Sgd(cfg.learning_rate)
    return Adam(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


# ---------------------------------------------------------------------------
# loss-graph builders
# ---------------------------------------------------------------------------


def _weight_penalty(tape: Tape, loss: int, weight_decay: float) -> int:
    if weight_decay == 0.0:
        return loss
    penalty = None
    for name, nid in tape.parameters.items():
        if not tape.nodes[nid].requires_grad:
            continue
        term = tape.l2_norm_sq(nid)
        penalty = term if penalty is None else tape.add(penalty, term)
    if penalty is None:
        return loss
    return tape.add(loss, tape.scalar_mul(penalty, weight_decay))


def _difference(tape: Tape, a: int, b: int) -> int:
    return tape.add(a, tape.scalar_mul(b, -1.0))


def _classifier_loss(tape: Tape, model: Model, x: int, labels: Array, weight_decay: float) -> int:
    logits = model.trace(tape, x)
    return _weight_penalty(tape, tape.cross_entropy(logits, labels), weight_decay)


def _autoencoder_loss(tape: Tape, model: Model, x: int, weight_decay: float) -> int:
    recon = model.trace(tape, x)
    n = tape.value(x).shape[0]
    loss = tape.scalar_mul(tape.l2_norm_sq(_difference(tape, x, recon)), 1.0 / n)
    return _weight_penalty(tape, loss, weight_decay)


@dataclass
class SaliencyWeights:
    """Per-instance reconstruction and sparsity weights from input saliency."""

    gamma_map: Array  # (N, C, T), min-max-scaled |d sum(logits) / dx|
    beta_scalars: Array  # (N,), mean of the inverted map per instance
    beta_map: Array  # (N, C, T), the inverted map itself


def auto_hyperparams(bundle: ModelBundle, batch: Array) -> SaliencyWeights:
    """Saliency-derived weights; constant saliency degenerates to all-ones
    gamma with zero sparsity weight."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3 or batch.shape[0] == 0:
        raise ConfigError(f"batch must be non-empty (N, C, T), got {batch.shape}")
    tape = Tape()
    x = tape.leaf(batch, requires_grad=True)
    logits = bundle.classifier.trace(tape, x, trainable=False)
    grads = tape.backward(tape.sum(logits))
    saliency = np.abs(grads[x])
    lo = saliency.min(axis=(1, 2), keepdims=True)
    hi = saliency.max(axis=(1, 2), keepdims=True)
    flat = (hi == lo).reshape(-1)
    span = np.where(hi == lo, 1.0, hi - lo)
    scaled = (saliency - lo) / span
    scaled[flat] = 1.0
    inverted = 1.0 - scaled
    beta_scalars = inverted.mean(axis=(1, 2))
    beta_scalars[flat] = 0.0
    return SaliencyWeights(scaled, beta_scalars, inverted)


def _stacked_loss(
    tape: Tape,
    bundle: ModelBundle,
    x: int,
    labels: Array,
    weight_decay: float,
    gamma: float = 0.0,
    beta: float = 0.0,
    weights: Optional[SaliencyWeights] = None,
    sparsity_scale: float = 10.0,
    pointwise_beta: bool = False,
) -> int:
    """Fine-tuning objective; zero-coefficient terms are omitted outright so
    the gamma=beta=0 graph is identical to the plain stacked objective."""
    recon, logits = bundle.trace(tape, x)
    n = tape.value(x).shape[0]
    loss = tape.cross_entropy(logits, labels)
    if weights is not None:
        gamma_map = tape.leaf(weights.gamma_map)
        weighted = tape.hadamard(_difference(tape, x, recon), gamma_map)
        loss = tape.add(loss, tape.scalar_mul(tape.l2_norm_sq(weighted), 1.0 / n))
        if pointwise_beta:
            beta_w = tape.leaf(weights.beta_map)
        else:
            beta_w = tape.leaf(weights.beta_scalars[:, None, None])
        sparse = tape.l1_norm(tape.hadamard(recon, beta_w))
        loss = tape.add(loss, tape.scalar_mul(sparse, sparsity_scale / n))
    else:
        if gamma != 0.0:
            recon_err = tape.l2_norm_sq(_difference(tape, x, recon))
            loss = tape.add(loss, tape.scalar_mul(recon_err, gamma / n))
        if beta != 0.0:
            loss = tape.add(loss, tape.scalar_mul(tape.l1_norm(recon), beta / n))
    return _weight_penalty(tape, loss, weight_decay)


def make_stacked_objective(
    bundle: ModelBundle,
    batch: Array,
    labels: Array,
    weight_decay: float,
    gamma: float = 0.0,
    beta: float = 0.0,
    weights: Optional[SaliencyWeights] = None,
    sparsity_scale: float = 10.0,
) -> GradFn:
    """Closure over the trainable (auto-encoder) parameters, for grad_check."""
    batch = np.asarray(batch, dtype=np.float64)

    def f(params: dict[str, Array]) -> tuple[float, dict[str, Array]]:
        trial = ModelBundle(
            classifier=bundle.classifier,
            autoencoder=Model(
                bundle.autoencoder.kind,
                bundle.autoencoder.spec,
                {k[3:]: v for k, v in params.items()},
            ),
            frozen=set(bundle.frozen),
        )
        tape = Tape()
        x = tape.leaf(batch)
        loss = _stacked_loss(
            tape, trial, x, labels, weight_decay, gamma, beta, weights, sparsity_scale
        )
        grads = tape.parameter_grads(tape.backward(loss))
        return float(tape.value(loss)), {k: grads[k] for k in params}

    return f


def make_classifier_objective(
    model: Model, batch: Array, labels: Array, weight_decay: float
) -> GradFn:
    batch = np.asarray(batch, dtype=np.float64)

    def f(params: dict[str, Array]) -> tuple[float, dict[str, Array]]:
        trial = Model(model.kind, model.spec, dict(params))
        tape = Tape()
        x = tape.leaf(batch)
        loss = _classifier_loss(tape, trial, x, labels, weight_decay)
        grads = tape.parameter_grads(tape.backward(loss))
        return float(tape.value(loss)), grads

    return f


def make_autoencoder_objective(model: Model, batch: Array, weight_decay: float) -> GradFn:
    batch = np.asarray(batch, dtype=np.float64)

    def f(params: dict[str, Array]) -> tuple[float, dict[str, Array]]:
        trial = Model(model.kind, model.spec, dict(params))
        tape = Tape()
        x = tape.leaf(batch)
        loss = _autoencoder_loss(tape, trial, x, weight_decay)
        grads = tape.parameter_grads(tape.backward(loss))
        return float(tape.value(loss)), grads

    return f


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def _snapshot(params: dict[str, Array]) -> dict[str, Array]:
    return {k: v.copy() for k, v in params.items()}


def _autoencoder_mse(model: Model, dataset: Dataset) -> float:
    recon = reconstruct(model, dataset.inputs)
    d = recon - dataset.inputs
    return float((d * d).mean())


def train_classifier(model: Model, data: DataBundle, cfg: TrainConfig) -> FitReport:
    """Minimise mean cross-entropy plus the weight penalty; restores the
    best-validation epoch and reports final test accuracy."""
    cfg.validate()
    start = time.perf_counter()
    opt = make_optimizer(cfg)
    report = FitReport()
    best = (-np.inf, _snapshot(model.params))
    for epoch in range(cfg.epochs):
        losses = []
        last_good = _snapshot(model.params)
        try:
            for x, y in batch_iter(data.train, cfg.batch_size, True, cfg.seed, epoch):
                tape = Tape()
                loss = _classifier_loss(tape, model, tape.leaf(x), y, cfg.weight_decay)
                grads = tape.parameter_grads(tape.backward(loss))
                model.params = opt.step(model.params, grads)
                losses.append(float(tape.value(loss)))
        except EngineError as exc:
            model.params = last_good
            raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
        report.train_loss.append(float(np.mean(losses)))
        val_acc = accuracy(model, data.val.inputs, data.val.labels)
        report.val_accuracy.append(val_acc)
        if val_acc > best[0]:
            best = (val_acc, _snapshot(model.params))
            report.best_epoch = epoch
    if cfg.epochs > 0:
        model.params = best[1]
    report.test_accuracy = accuracy(model, data.test.inputs, data.test.labels)
    report.wall_time_s = time.perf_counter() - start
    return report


def train_autoencoder(model: Model, data: DataBundle, cfg: TrainConfig) -> FitReport:
    """Minimise per-instance squared reconstruction error plus weight penalty."""
    cfg.validate()
    start = time.perf_counter()
    opt = make_optimizer(cfg)
    report = FitReport()
    best = (np.inf, _snapshot(model.params))
    val_mse_history = []
    for epoch in range(cfg.epochs):
        losses = []
        last_good = _snapshot(model.params)
        try:
            for x, _ in batch_iter(data.train, cfg.batch_size, True, cfg.seed, epoch):
                tape = Tape()
                loss = _autoencoder_loss(tape, model, tape.leaf(x), cfg.weight_decay)
                grads = tape.parameter_grads(tape.backward(loss))
                model.params = opt.step(model.params, grads)
                losses.append(float(tape.value(loss)))
        except EngineError as exc:
            model.params = last_good
            raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
        report.train_loss.append(float(np.mean(losses)))
        val_mse = _autoencoder_mse(model, data.val)
        val_mse_history.append(val_mse)
        if val_mse < best[0]:
            best = (val_mse, _snapshot(model.params))
            report.best_epoch = epoch
    if cfg.epochs > 0:
        model.params = best[1]
    report.extras["val_mse"] = val_mse_history
    report.extras["test_mse"] = _autoencoder_mse(model, data.test)
    report.wall_time_s = time.perf_counter() - start
    return report


def _stacked_accuracy(bundle: ModelBundle, dataset: Dataset, batch_size: int = 512) -> float:
    hits = 0
    for lo in range(0, dataset.size, batch_size):
        x = dataset.inputs[lo : lo + batch_size]
        tape = Tape()
        xn = tape.leaf(x)
        recon = bundle.autoencoder.trace(tape, xn, trainable=False, prefix="ae/")
        logits = bundle.classifier.trace(tape, recon, trainable=False, prefix="clf/")
        pred = tape.value(logits).argmax(axis=1)
        hits += int((pred == dataset.labels[lo : lo + x.shape[0]]).sum())
    return hits / dataset.size


def _require_frozen_classifier(bundle: ModelBundle) -> None:
    if "classifier" not in bundle.frozen:
        raise ConfigError("fine-tuning requires the classifier parameter group to be frozen")


def _finetune(
    bundle: ModelBundle,
    data: DataBundle,
    cfg: TrainConfig,
    loss_builder: Callable[[Tape, int, Array, Array], int],
    objective_name: str,
) -> FitReport:
    cfg.validate()
    _require_frozen_classifier(bundle)
    start = time.perf_counter()
    opt = make_optimizer(cfg)
    report = FitReport(extras={"objective": objective_name})
    best = (-np.inf, _snapshot(bundle.autoencoder.params))
    for epoch in range(cfg.epochs):
        losses = []
        last_good = _snapshot(bundle.autoencoder.params)
        try:
            for x, y in batch_iter(data.train, cfg.batch_size, True, cfg.seed, epoch):
                tape = Tape()
                loss = loss_builder(tape, tape.leaf(x), x, y)
                trainable = {
                    name: tape.nodes[nid].value
                    for name, nid in tape.parameters.items()
                    if tape.nodes[nid].requires_grad
                }
                grads = tape.parameter_grads(tape.backward(loss))
                updated = opt.step(trainable, {k: grads[k] for k in trainable})
                bundle.apply_update(updated)
                losses.append(float(tape.value(loss)))
        except EngineError as exc:
            bundle.autoencoder.params = last_good
            raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
        report.train_loss.append(float(np.mean(losses)))
        val_acc = _stacked_accuracy(bundle, data.val)
        report.val_accuracy.append(val_acc)
        if val_acc > best[0]:
            best = (val_acc, _snapshot(bundle.autoencoder.params))
            report.best_epoch = epoch
    if cfg.epochs > 0:
        bundle.autoencoder.params = best[1]
    bundle.finetuned_with = objective_name
    report.test_accuracy = _stacked_accuracy(bundle, data.test)
    report.wall_time_s = time.perf_counter() - start
    return report


def finetune_palacio(bundle: ModelBundle, data: DataBundle, cfg: TrainConfig) -> FitReport:
    """Fine-tune encoder and decoder on the stacked cross-entropy alone."""

    def builder(tape: Tape, xn: int, x: Array, y: Array) -> int:
        return _stacked_loss(tape, bundle, xn, y, cfg.weight_decay)

    return _finetune(bundle, data, cfg, builder, "palacio")


def finetune_tsinsight(
    bundle: ModelBundle,
    data: DataBundle,
    cfg: TrainConfig,
    ts: TSInsightConfig,
    instance_index: int = 0,
) -> FitReport:
    """Fine-tune with the sparsity-plus-reconstruction objective."""
    ts.validate()
    manual = ts.mode == "manual"

    def builder(tape: Tape, xn: int, x: Array, y: Array) -> int:
        if manual:
            return _stacked_loss(
                tape, bundle, xn, y, cfg.weight_decay, gamma=ts.gamma, beta=ts.beta
            )
        weights = auto_hyperparams(bundle, x)
        return _stacked_loss(
            tape,
            bundle,
            xn,
            y,
            cfg.weight_decay,
            weights=weights,
            sparsity_scale=ts.C,
            pointwise_beta=ts.pointwise_beta,
        )

    if ts.scope == "instance":
        return _finetune_instance(bundle, data, cfg, ts, builder, instance_index)
    report = _finetune(bundle, data, cfg, builder, "tsinsight")
    report.extras["mode"] = ts.mode
    return report


def _finetune_instance(
    bundle: ModelBundle,
    data: DataBundle,
    cfg: TrainConfig,
    ts: TSInsightConfig,
    builder: Callable[[Tape, int, Array, Array], int],
    index: int,
) -> FitReport:
    """Solve the same objective over a single instance; runs
    ``ts.instance_steps`` optimizer steps on it."""
    cfg.validate()
    _require_frozen_classifier(bundle)
    start = time.perf_counter()
    if not (0 <= index < data.train.size):
        raise ConfigError(f"instance_index {index} outside the train split")
    x = data.train.inputs[index : index + 1]
    y = data.train.labels[index : index + 1]
    opt = make_optimizer(cfg)
    report = FitReport(extras={"objective": "tsinsight", "scope": "instance", "instance_index": index})
    last_good = _snapshot(bundle.autoencoder.params)
    try:
        for _ in range(ts.instance_steps):
            tape = Tape()
            loss = builder(tape, tape.leaf(x), x, y)
            trainable = {
                name: tape.nodes[nid].value
                for name, nid in tape.parameters.items()
                if tape.nodes[nid].requires_grad
            }
            grads = tape.parameter_grads(tape.backward(loss))
            bundle.apply_update(opt.step(trainable, {k: grads[k] for k in trainable}))
            report.train_loss.append(float(tape.value(loss)))
    except EngineError as exc:
        bundle.autoencoder.params = last_good
        raise TrainingDiverged(str(exc)) from exc
    bundle.finetuned_with = "tsinsight"
    report.wall_time_s = time.perf_counter() - start
    return report
