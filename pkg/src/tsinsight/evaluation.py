"""Suppression-test harness and auto-encoder Jacobian spectrum analysis.

The suppression test keeps only the k features an attribution method ranks
highest (k = ceil(keep_fraction * C * T), ties broken by ascending flat
index), zeroes the rest and measures the classifier's accuracy on the
result.  Curves aggregate mean/std over several runs; a run reseeds only
the stochastic methods (random, smoothgrad), so deterministic methods have
zero variance by construction.

The average Jacobian of the auto-encoder is assembled one output coordinate
per backward pass over a seeded sample of test instances; its singular
values come from a cyclic Jacobi eigendecomposition of M^T M.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import attribution as attr
from .data import Dataset
from .engine import Array, Tape
from .models import Model, ModelBundle, model_logits

DEFAULT_FRACTIONS = (0.01, 0.02, 0.05, 0.10, 0.25, 0.50, 0.75, 1.0)


class EvaluationError(ValueError):
    """Bad evaluation inputs (unknown method, shape mismatch, non-finite)."""


@dataclass
class SuppressionCurve:
    method: str
    keep_fractions: list[float]
    accuracy_mean: list[float]
    accuracy_std: list[float]
    run_count: int

    def __post_init__(self) -> None:
        fr = self.keep_fractions
        if any(not (0.0 < f <= 1.0) for f in fr) or any(b <= a for a, b in zip(fr, fr[1:])):
            raise EvaluationError(f"keep_fractions must be strictly increasing in (0, 1]: {fr}")
        if any(not (0.0 <= m <= 1.0) for m in self.accuracy_mean):
            raise EvaluationError("accuracy means must lie in [0, 1]")
        if any(s < 0 for s in self.accuracy_std):
            raise EvaluationError("accuracy stds must be non-negative")


@dataclass
class SpectrumReport:
    singular_values: list[float]
    sample_count: int
    matrix_dimension: int

    def __post_init__(self) -> None:
        sv = self.singular_values
        if any(b > a for a, b in zip(sv, sv[1:])) or (len(sv) and sv[-1] < 0):
            raise EvaluationError("singular values must be non-negative and descending")
        if len(sv) != self.matrix_dimension:
            raise EvaluationError("need one singular value per matrix dimension")


# ---------------------------------------------------------------------------
# suppression
# ---------------------------------------------------------------------------


def _keep_mask(map_values: Array, keep_fraction: float) -> Array:
    """Boolean keep mask over the flattened (C, T) grid, batched."""
    flat = map_values.reshape(map_values.shape[0], -1)
    k = math.ceil(keep_fraction * flat.shape[1])
    order = np.argsort(-flat, axis=1, kind="stable")  # ties fall to ascending index
    mask = np.zeros(flat.shape, dtype=bool)
    np.put_along_axis(mask, order[:, :k], True, axis=1)
    return mask.reshape(map_values.shape)


def suppress_input(x: Array, amap: attr.AttributionMap, keep_fraction: float) -> Array:
    """Copy of ``x`` with everything outside the top-k attributed features zeroed."""
    x = np.asarray(x, dtype=np.float64)
    if not (0.0 < keep_fraction <= 1.0):
        raise EvaluationError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    if amap.values.shape != x.shape:
        raise EvaluationError(
            f"attribution shape {amap.values.shape} does not match input shape {x.shape}"
        )
    mask = _keep_mask(amap.values[None], keep_fraction)[0]
    return np.where(mask, x, 0.0)


def _method_maps(
    method: str,
    inputs: Array,
    classifier: Model,
    bundles: dict[str, ModelBundle],
    cfg: attr.MethodConfig,
    seed: int,
    chunk: int = 256,
) -> Array:
    values = np.empty_like(inputs)
    bundle = bundles.get(method)
    for lo in range(0, inputs.shape[0], chunk):
        batch = inputs[lo : lo + chunk]
        chunk_seed = int(np.random.SeedSequence(seed, spawn_key=(lo,)).generate_state(1)[0])
        maps = attr.compute_attribution_batch(
            method, batch, classifier=classifier, bundle=bundle, cfg=cfg, seed=chunk_seed
        )
        values[lo : lo + batch.shape[0]] = np.stack([m.values for m in maps])
    return values


def _suppressed_accuracy(
    classifier: Model, inputs: Array, labels: Array, maps: Array, fraction: float
) -> float:
    mask = _keep_mask(maps, fraction)
    suppressed = np.where(mask, inputs, 0.0)
    hits = 0
    for lo in range(0, inputs.shape[0], 512):
        logits = model_logits(classifier, suppressed[lo : lo + 512])
        hits += int((logits.argmax(axis=1) == labels[lo : lo + 512]).sum())
    return hits / inputs.shape[0]


def suppression_test(
    classifier: Model,
    dataset: Dataset,
    methods: Sequence[str],
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    runs: int = 5,
    seed: int = 0,
    bundles: Optional[dict[str, ModelBundle]] = None,
    cfg: Optional[attr.MethodConfig] = None,
) -> list[SuppressionCurve]:
    """Accuracy-vs-kept-fraction curve per attribution method."""
    if runs < 1:
        raise EvaluationError(f"runs must be >= 1, got {runs}")
    unknown = [m for m in methods if m not in attr.METHODS]
    if unknown:
        raise EvaluationError(f"unknown attribution methods {unknown}")
    bundles = bundles or {}
    for method in methods:
        if method in attr.AUTOENCODER_METHODS and method not in bundles:
            raise EvaluationError(f"method {method!r} needs a fine-tuned bundle")
    cfg = cfg or attr.MethodConfig()
    fractions = sorted({float(f) for f in fractions})

    curves = []
    for mi, method in enumerate(methods):
        stochastic = method in attr.STOCHASTIC_METHODS
        accs = np.zeros((runs, len(fractions)))
        for run in range(runs):
            if not stochastic and run > 0:
                accs[run] = accs[0]
                continue
            child = int(
                np.random.SeedSequence(seed, spawn_key=(10, mi, run)).generate_state(1)[0]
            )
            maps = _method_maps(method, dataset.inputs, classifier, bundles, cfg, child)
            for fi, fraction in enumerate(fractions):
                accs[run, fi] = _suppressed_accuracy(
                    classifier, dataset.inputs, dataset.labels, maps, fraction
                )
        curves.append(
            SuppressionCurve(
                method,
                list(fractions),
                [float(v) for v in accs.mean(axis=0)],
                [float(v) for v in accs.std(axis=0)],
                runs,
            )
        )
    return curves


def save_curves(
    curves: list[SuppressionCurve], path: Union[str, Path], metadata: Optional[dict] = None
) -> tuple[Path, Path]:
    """CSV of (method, fraction, mean, std) plus a JSON metadata sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    csv_path = path.with_suffix(".csv")
    with csv_path.open("w") as fh:
        fh.write("method,keep_fraction,accuracy_mean,accuracy_std\n")
        for curve in curves:
            for f, m, s in zip(curve.keep_fractions, curve.accuracy_mean, curve.accuracy_std):
                fh.write(f"{curve.method},{repr(float(f))},{repr(m)},{repr(s)}\n")
    meta = dict(metadata or {})
    meta.update(
        methods=[c.method for c in curves],
        run_count=curves[0].run_count if curves else 0,
        axis="fraction of features kept (the rest are zeroed)",
    )
    json_path = path.with_suffix(".json")
    json_path.write_text(json.dumps(meta, indent=1))
    return csv_path, json_path


# ---------------------------------------------------------------------------
# Jacobian spectrum
# ---------------------------------------------------------------------------

ForwardFn = Callable[[Tape, int], int]


def average_jacobian(
    autoencoder: Union[Model, ForwardFn],
    dataset: Dataset,
    sample_count: int = 256,
    seed: int = 0,
) -> Array:
    """Mean input-output Jacobian over a seeded sample of instances.

    Returns a (C*T, C*T) matrix; row j holds d out_j / d x.  One backward
    pass per output coordinate, batched over all sampled instances.
    """
    if sample_count > dataset.size:
        raise EvaluationError(
            f"sample_count {sample_count} exceeds dataset size {dataset.size}"
        )
    if isinstance(autoencoder, Model):
        forward: ForwardFn = lambda tape, x: autoencoder.trace(tape, x, trainable=False)
    else:
        forward = autoencoder
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(9,))))
    idx = rng.choice(dataset.size, size=sample_count, replace=False)
    batch = dataset.inputs[idx]
    dim = batch.shape[1] * batch.shape[2]

    tape = Tape()
    x = tape.leaf(batch, requires_grad=True)
    out = forward(tape, x)
    out_value = tape.value(out)
    if out_value.shape[0] != sample_count or out_value.size != batch.size:
        raise EvaluationError(
            f"forward output shape {out_value.shape} does not match input {batch.shape}"
        )
    jac = np.zeros((dim, dim))
    seed_grad = np.zeros_like(out_value).reshape(sample_count, dim)
    for j in range(dim):
        seed_grad[:, j] = 1.0
        grads = tape.backward(out, seed_grad.reshape(out_value.shape))
        jac[j] = grads[x].reshape(sample_count, dim).sum(axis=0)
        seed_grad[:, j] = 0.0
    return jac / sample_count


def singular_spectrum(matrix: Array, sample_count: int = 0, max_sweeps: int = 100) -> SpectrumReport:
    """Singular values via cyclic Jacobi eigendecomposition of M^T M.

    Sweeps continue until the off-diagonal Frobenius mass of the rotated
    matrix drops below 1e-12 * ||M||_F.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise EvaluationError(f"matrix must be square, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise EvaluationError("matrix contains non-finite entries")
    a = m.T @ m
    n = a.shape[0]
    threshold = 1e-12 * float(np.linalg.norm(m))

    def off_mass(sym: Array) -> float:
        return float(np.sqrt(max((sym * sym).sum() - (np.diag(sym) ** 2).sum(), 0.0)))

    sweeps = 0
    while off_mass(a) > threshold:
        if sweeps >= max_sweeps:
            raise EvaluationError(f"Jacobi iteration failed to converge in {max_sweeps} sweeps")
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau)) if tau != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
        sweeps += 1
    values = np.sqrt(np.clip(np.diag(a), 0.0, None))
    values = np.sort(values)[::-1]
    return SpectrumReport([float(v) for v in values], sample_count, n)


def save_spectrum(
    report: SpectrumReport, path: Union[str, Path], bins: int = 50
) -> tuple[Path, Path]:
    """CSV of singular values plus uniform-bin histogram counts over [0, max]."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    csv_path = path.with_suffix(".csv")
    with csv_path.open("w") as fh:
        fh.write("rank,singular_value\n")
        for i, v in enumerate(report.singular_values):
            fh.write(f"{i},{repr(v)}\n")
    top = report.singular_values[0] if report.singular_values else 0.0
    edges = np.linspace(0.0, top if top > 0 else 1.0, bins + 1)
    counts, _ = np.histogram(report.singular_values, bins=edges)
    hist_path = path.with_suffix(".histogram.csv")
    with hist_path.open("w") as fh:
        fh.write("bin_low,bin_high,count\n")
        for lo, hi, count in zip(edges[:-1], edges[1:], counts):
            fh.write(f"{repr(float(lo))},{repr(float(hi))},{int(count)}\n")
    return csv_path, hist_path
