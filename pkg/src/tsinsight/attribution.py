"""Per-feature importance maps, one uniform interface for every technique.

Every method returns an :class:`AttributionMap` shaped like the input
instance (C, T) with non-negative finite values.  Gradient-family methods
target the sum of all class logits; the CAM family and occlusion target the
predicted class (argmax of the unmodified input's logits).

Methods: none, random, input_magnitude, occlusion, tsinsight, palacio,
gradient, gradient_x_input, integrated_gradients, smoothgrad,
guided_backprop, gradcam, guided_gradcam.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .engine import Array, Tape
from .models import Model, ModelBundle, model_checksum

METHODS = (
    "none",
    "random",
    "input_magnitude",
    "occlusion",
    "tsinsight",
    "palacio",
    "gradient",
    "gradient_x_input",
    "integrated_gradients",
    "smoothgrad",
    "guided_backprop",
    "gradcam",
    "guided_gradcam",
)

STOCHASTIC_METHODS = ("random", "smoothgrad")

CAM_METHODS = ("gradcam", "guided_gradcam")

AUTOENCODER_METHODS = ("tsinsight", "palacio")


class AttributionError(ValueError):
    """Unknown method or method/model mismatch."""


@dataclass
class MethodConfig:
    ig_steps: int = 100
    sg_samples: int = 100
    occlusion_width: int = 3
    noise_seed: int = 0
    sg_per_channel_range: bool = False  # noise scale per channel instead of whole instance
    occlusion_fill: str = "zero"  # zero | mean (per-channel instance mean)

    def validate(self) -> None:
        if min(self.ig_steps, self.sg_samples, self.occlusion_width) < 1:
            raise AttributionError("ig_steps, sg_samples and occlusion_width must be >= 1")
        if self.occlusion_fill not in ("zero", "mean"):
            raise AttributionError(f"occlusion_fill must be 'zero' or 'mean', got {self.occlusion_fill!r}")


@dataclass
class AttributionMap:
    values: Array  # (C, T), >= 0, finite
    method: str
    target: str  # all_classes | predicted_class | not_applicable
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)) or (self.values < 0).any():
            raise AttributionError(f"{self.method}: map must be finite and non-negative")


def _check_instance(x: Array) -> Array:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise AttributionError(f"instance must be (C, T), got shape {x.shape}")
    return x


def _batched_logit_grads(model: Model, batch: Array, guided: bool = False) -> Array:
    """d(sum over classes and instances of logits)/dx; rows stay independent."""
    tape = Tape("guided" if guided else "standard")
    x = tape.leaf(batch, requires_grad=True)
    logits = model.trace(tape, x, trainable=False)
    grads = tape.backward(tape.sum(logits))
    return grads[x]


def _predicted_class_grads(model: Model, batch: Array, guided: bool = False):
    """Gradient of each instance's predicted-class logit; also returns the
    tape (for activation capture) and the predicted labels."""
    tape = Tape("guided" if guided else "standard")
    x = tape.leaf(batch, requires_grad=True)
    logits = model.trace(tape, x, trainable=False)
    predicted = tape.value(logits).argmax(axis=1)
    mask = np.zeros(tape.value(logits).shape)
    mask[np.arange(batch.shape[0]), predicted] = 1.0
    score = tape.sum(tape.hadamard(logits, tape.leaf(mask)))
    grads = tape.backward(score)
    return grads[x], tape, predicted


# ---------------------------------------------------------------------------
# batched implementations (single instances are a batch of one)
# ---------------------------------------------------------------------------


def _batch_none(batch: Array) -> Array:
    return np.ones_like(batch)


def _batch_random(batch: Array, seed: int) -> Array:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(7,))))
    return rng.uniform(0.0, 1.0, size=batch.shape)


def _batch_gradient(model: Model, batch: Array) -> Array:
    return np.abs(_batched_logit_grads(model, batch))


def _batch_gradient_x_input(model: Model, batch: Array) -> Array:
    return np.abs(_batched_logit_grads(model, batch) * batch)


def _batch_integrated_gradients(model: Model, batch: Array, steps: int) -> Array:
    total = np.zeros_like(batch)
    for k in range(1, steps + 1):
        total += _batched_logit_grads(model, batch * (k / steps))
    return np.abs(batch * total / steps)


def _batch_smoothgrad(model: Model, batch: Array, cfg: MethodConfig, seed: int) -> Array:
    if cfg.sg_per_channel_range:
        span = batch.max(axis=2, keepdims=True) - batch.min(axis=2, keepdims=True)
    else:
        span = (batch.max(axis=(1, 2)) - batch.min(axis=(1, 2)))[:, None, None]
    # variance 2/range; a constant instance has no range, fall back to sigma 0
    variance = np.where(span > 0, 2.0 / np.where(span > 0, span, 1.0), 0.0)
    sigma = np.sqrt(variance)
    if not sigma.any():
        # noise-free samples are all identical, so the mean IS the gradient
        return np.abs(_batched_logit_grads(model, batch))
    rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence(seed, spawn_key=(8, cfg.noise_seed)))
    )
    total = np.zeros_like(batch)
    for _ in range(cfg.sg_samples):
        noise = rng.normal(0.0, 1.0, size=batch.shape) * sigma
        total += _batched_logit_grads(model, batch + noise)
    return np.abs(total / cfg.sg_samples)


def _batch_guided_backprop(model: Model, batch: Array) -> Array:
    grads, _, _ = _predicted_class_grads(model, batch, guided=True)
    return np.abs(grads)


def _upsample_nearest(values: Array, target: int) -> Array:
    idx = (np.arange(target) * values.shape[-1]) // target
    return values[..., idx]


def _batch_gradcam(model: Model, batch: Array) -> Array:
    if model.kind != "cnn_classifier":
        raise AttributionError(
            f"gradcam requires the cnn classifier variant, got {model.kind}"
        )
    _, tape, _ = _predicted_class_grads(model, batch)
    cap = tape.capture("conv_last")
    weights = cap.gradient.mean(axis=2)  # (N, C') time-averaged
    cam = np.maximum((weights[:, :, None] * cap.activation).sum(axis=1), 0.0)  # (N, T')
    cam = _upsample_nearest(cam, batch.shape[2])
    return np.abs(np.broadcast_to(cam[:, None, :], batch.shape)).copy()


def _batch_autoencoder(bundle: ModelBundle, batch: Array) -> Array:
    tape = Tape()
    x = tape.leaf(batch)
    recon = bundle.autoencoder.trace(tape, x, trainable=False)
    return np.abs(tape.value(recon))


def _occlusion_single(model: Model, x: Array, cfg: MethodConfig) -> Array:
    channels, length = x.shape
    tape = Tape()
    base_logits = tape.value(model.trace(tape, tape.leaf(x[None]), trainable=False))[0]
    predicted = int(base_logits.argmax())
    e = np.exp(base_logits - base_logits.max())
    base_score = float((e / e.sum())[predicted])

    half = cfg.occlusion_width // 2
    fill = x.mean(axis=1, keepdims=True) if cfg.occlusion_fill == "mean" else 0.0
    masked = np.repeat(x[None], channels * length, axis=0)
    pos = 0
    for c in range(channels):
        for t in range(length):
            lo, hi = max(0, t - half), min(length, t + cfg.occlusion_width - half)
            if cfg.occlusion_fill == "mean":
                masked[pos, c, lo:hi] = fill[c]
            else:
                masked[pos, c, lo:hi] = 0.0
            pos += 1
    tape = Tape()
    logits = tape.value(model.trace(tape, tape.leaf(masked), trainable=False))
    z = logits - logits.max(axis=1, keepdims=True)
    scores = (np.exp(z) / np.exp(z).sum(axis=1, keepdims=True))[:, predicted]
    return np.abs(base_score - scores).reshape(channels, length)


# ---------------------------------------------------------------------------
# public interface
# ---------------------------------------------------------------------------


def compute_attribution(
    method: str,
    x: Array,
    classifier: Optional[Model] = None,
    bundle: Optional[ModelBundle] = None,
    cfg: Optional[MethodConfig] = None,
    seed: int = 0,
) -> AttributionMap:
    """Attribution of a single instance ``x`` shaped (C, T)."""
    maps = compute_attribution_batch(method, _check_instance(x)[None], classifier, bundle, cfg, seed)
    return maps[0]


def compute_attribution_batch(
    method: str,
    batch: Array,
    classifier: Optional[Model] = None,
    bundle: Optional[ModelBundle] = None,
    cfg: Optional[MethodConfig] = None,
    seed: int = 0,
) -> list[AttributionMap]:
    """Attribute every instance of ``batch`` (N, C, T) with one method."""
    if method not in METHODS:
        raise AttributionError(f"unknown attribution method {method!r}")
    cfg = cfg or MethodConfig()
    cfg.validate()
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3:
        raise AttributionError(f"batch must be (N, C, T), got shape {batch.shape}")
    metadata: dict = {}
    target = "not_applicable"

    if method in ("gradient", "gradient_x_input", "integrated_gradients", "smoothgrad",
                  "guided_backprop", "gradcam", "guided_gradcam", "occlusion"):
        if classifier is None:
            raise AttributionError(f"{method} needs a classifier model")
        if method in CAM_METHODS and classifier.kind != "cnn_classifier":
            raise AttributionError(
                f"{method} requires the cnn classifier variant, got {classifier.kind}"
            )
        metadata["model_checksum"] = model_checksum(classifier)

    if method == "none":
        values = _batch_none(batch)
    elif method == "random":
        values = _batch_random(batch, seed)
        metadata["seed"] = seed
    elif method == "input_magnitude":
        values = np.abs(batch)
    elif method == "gradient":
        values = _batch_gradient(classifier, batch)
        target = "all_classes"
    elif method == "gradient_x_input":
        values = _batch_gradient_x_input(classifier, batch)
        target = "all_classes"
    elif method == "integrated_gradients":
        values = _batch_integrated_gradients(classifier, batch, cfg.ig_steps)
        target = "all_classes"
        metadata["ig_steps"] = cfg.ig_steps
    elif method == "smoothgrad":
        values = _batch_smoothgrad(classifier, batch, cfg, seed)
        target = "all_classes"
        metadata.update(sg_samples=cfg.sg_samples, seed=seed)
    elif method == "guided_backprop":
        values = _batch_guided_backprop(classifier, batch)
        target = "predicted_class"
    elif method == "gradcam":
        values = _batch_gradcam(classifier, batch)
        target = "predicted_class"
    elif method == "guided_gradcam":
        values = _batch_gradcam(classifier, batch) * _batch_guided_backprop(classifier, batch)
        target = "predicted_class"
    elif method == "occlusion":
        values = np.stack([_occlusion_single(classifier, inst, cfg) for inst in batch])
        target = "predicted_class"
        metadata["occlusion_width"] = cfg.occlusion_width
    elif method in AUTOENCODER_METHODS:
        if bundle is None:
            raise AttributionError(f"{method} needs a fine-tuned model bundle")
        if bundle.finetuned_with != method:
            metadata["warning"] = (
                f"bundle was not fine-tuned with the {method} objective "
                f"(found {bundle.finetuned_with!r})"
            )
        values = _batch_autoencoder(bundle, batch)
        metadata["model_checksum"] = model_checksum(bundle.autoencoder)
    else:  # pragma: no cover - METHODS is exhaustive
        raise AttributionError(f"unknown attribution method {method!r}")

    return [AttributionMap(v, method, target, dict(metadata)) for v in values]


# ---------------------------------------------------------------------------
# serialization: CSV matrix plus JSON sidecar
# ---------------------------------------------------------------------------


def save_attribution(amap: AttributionMap, path: Union[str, Path]) -> tuple[Path, Path]:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    csv_path = path.with_suffix(".csv")
    with csv_path.open("w") as fh:
        for row in amap.values:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    sidecar = {"method": amap.method, "target": amap.target, "metadata": amap.metadata}
    json_path = path.with_suffix(".json")
    json_path.write_text(json.dumps(sidecar, indent=1))
    return csv_path, json_path
