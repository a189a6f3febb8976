"""Synthetic anomaly dataset, CSV ingestion, normalization and batching.

Randomness is drawn from numpy's Philox counter-based generator, keyed by
``SeedSequence(seed, spawn_key=(stream,))`` so the train/val/test streams
are disjoint and every artifact is reproducible bit-for-bit from the seed.

CSV layout (one file per split, ``train.csv`` / ``val.csv`` / ``test.csv``):
line 1 is ``# shape N C T K``, line 2 the column names, then one row per
instance: label followed by C*T values in channel-major order.  Values are
decimal text with '.' radix, written with enough digits to round-trip
float32 exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

from .engine import Array


class DataError(ValueError):
    """Malformed dataset files or contract violations."""


@dataclass
class NormStats:
    mean: Array  # per channel
    std: Array  # per channel
    source_split: str
    passthrough: list[bool] = field(default_factory=list)  # constant channels


@dataclass
class Dataset:
    inputs: Array  # (N, C, T)
    labels: Array  # (N,) int64 in [0, class_count)
    split: str  # train | val | test
    class_count: int
    normalization: Optional[NormStats] = None

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 3 or self.inputs.shape[0] == 0:
            raise DataError(f"inputs must be a non-empty (N, C, T) array, got {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise DataError("labels length must match instance count")
        if np.isnan(self.inputs).any():
            raise DataError("inputs contain NaN")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataError(f"labels outside [0, {self.class_count})")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    @property
    def channels(self) -> int:
        return self.inputs.shape[1]

    @property
    def length(self) -> int:
        return self.inputs.shape[2]


@dataclass
class DataBundle:
    train: Dataset
    val: Dataset
    test: Dataset


@dataclass
class SynthConfig:
    train_size: int = 45000
    val_size: int = 5000
    test_size: int = 10000
    length: int = 50
    channels: int = 3  # pressure, temperature, torque
    anomaly_rate: float = 0.5
    spike_magnitude: float = 6.0  # in units of per-instance channel std
    seed: int = 0

    def validate(self) -> None:
        if min(self.train_size, self.val_size, self.test_size) <= 0:
            raise DataError("split sizes must be positive")
        if not (0.0 < self.anomaly_rate < 1.0):
            raise DataError(f"anomaly_rate must lie in (0, 1), got {self.anomaly_rate}")
        if self.length < 2 or self.channels < 1:
            raise DataError("length must be >= 2 and channels >= 1")


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=stream)))


def _base_signals(rng: np.random.Generator, n: int, channels: int, length: int) -> Array:
    """Smooth per-channel base: three random sinusoids plus Gaussian noise."""
    t = np.arange(length)
    periods = rng.uniform(10.0, 50.0, size=(n, channels, 3))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(n, channels, 3))
    amplitudes = rng.uniform(0.5, 1.5, size=(n, channels, 3))
    angles = 2.0 * np.pi * t[None, None, None, :] / periods[..., None] + phases[..., None]
    base = (amplitudes[..., None] * np.sin(angles)).sum(axis=2)
    return base + rng.normal(0.0, 0.1, size=(n, channels, length))


def _inject_spikes(rng: np.random.Generator, x: Array, magnitude: float, anomalous: Array) -> None:
    """Add 1-3 point spikes per anomalous instance, never on channel 0."""
    n, channels, length = x.shape
    stds = x.std(axis=2)  # (n, channels), pre-injection scale
    for i in np.flatnonzero(anomalous):
        count = int(rng.integers(1, 4))
        positions = rng.choice(length, size=count, replace=False)
        for pos in positions:
            channel = int(rng.integers(1, channels))
            sign = 1.0 if rng.random() < 0.5 else -1.0
            x[i, channel, pos] += sign * magnitude * stds[i, channel]


def _synth_split(cfg: SynthConfig, split: str, stream: int, n: int) -> Dataset:
    rng = _rng(cfg.seed, stream)
    x = _base_signals(rng, n, cfg.channels, cfg.length)
    anomaly_count = int(round(cfg.anomaly_rate * n))
    labels = np.zeros(n, dtype=np.int64)
    labels[rng.permutation(n)[:anomaly_count]] = 1
    _inject_spikes(rng, x, cfg.spike_magnitude, labels.astype(bool))
    return Dataset(x, labels, split, class_count=2)


def generate_synthetic_anomaly(cfg: SynthConfig) -> DataBundle:
    """Three disjoint splits; label 1 iff the sequence received any spike."""
    cfg.validate()
    if cfg.channels < 2:
        raise DataError("synthetic generator needs >= 2 channels (channel 0 is never spiked)")
    return DataBundle(
        train=_synth_split(cfg, "train", 0, cfg.train_size),
        val=_synth_split(cfg, "val", 1, cfg.val_size),
        test=_synth_split(cfg, "test", 2, cfg.test_size),
    )


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

_SPLIT_FILES = {"train": "train.csv", "val": "val.csv", "test": "test.csv"}


def save_csv_dataset(bundle: DataBundle, dir_path: Union[str, Path]) -> list[Path]:
    """Write train/val/test CSVs; values quantised to float32 text."""
    out_dir = Path(dir_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for split, filename in _SPLIT_FILES.items():
        ds: Dataset = getattr(bundle, split)
        path = out_dir / filename
        n, c, t = ds.inputs.shape
        columns = ["label"] + [f"c{i}_t{j}" for i in range(c) for j in range(t)]
        values = ds.inputs.astype(np.float32).reshape(n, c * t)
        with path.open("w") as fh:
            fh.write(f"# shape {n} {c} {t} {ds.class_count}\n")
            fh.write(",".join(columns) + "\n")
            for row in range(n):
                cells = [str(ds.labels[row])] + [f"{v:.9g}" for v in values[row]]
                fh.write(",".join(cells) + "\n")
        written.append(path)
    return written


def _load_csv_split(path: Path, split: str) -> Dataset:
    if not path.exists():
        raise DataError(f"missing dataset file {path}")
    with path.open() as fh:
        header = fh.readline().strip()
        if not header.startswith("# shape"):
            raise DataError(f"{path}:1: missing '# shape N C T K' header")
        parts = header.split()
        if len(parts) != 6:
            raise DataError(f"{path}:1: malformed shape header {header!r}")
        try:
            n, c, t, k = (int(p) for p in parts[2:])
        except ValueError:
            raise DataError(f"{path}:1: non-integer shape header {header!r}") from None
        names = fh.readline()
        if not names.strip():
            raise DataError(f"{path}:2: missing column-name header")
        inputs = np.empty((n, c * t), dtype=np.float64)
        labels = np.empty(n, dtype=np.int64)
        row = 0
        for lineno, line in enumerate(fh, start=3):
            line = line.strip()
            if not line:
                continue
            if row >= n:
                raise DataError(f"{path}:{lineno}: more rows than the declared {n}")
            cells = line.split(",")
            if len(cells) != c * t + 1:
                raise DataError(
                    f"{path}:{lineno}: ragged row, expected {c * t + 1} cells, got {len(cells)}"
                )
            try:
                label = int(cells[0])
                values = np.array(cells[1:], dtype=np.float32)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric cell") from None
            if not (0 <= label < k):
                raise DataError(
                    f"{path}:{lineno}: label {label} outside declared class count {k}"
                )
            labels[row] = label
            inputs[row] = values.astype(np.float64)
            row += 1
        if row != n:
            raise DataError(f"{path}: declared {n} rows, found {row}")
    return Dataset(inputs.reshape(n, c, t), labels, split, class_count=k)


def load_csv_dataset(dir_path: Union[str, Path]) -> DataBundle:
    base = Path(dir_path)
    return DataBundle(
        **{split: _load_csv_split(base / name, split) for split, name in _SPLIT_FILES.items()}
    )


# ---------------------------------------------------------------------------
# normalization and batching
# ---------------------------------------------------------------------------


def compute_norm_stats(train: Dataset) -> NormStats:
    if train.split != "train":
        raise DataError(
            f"normalization statistics must come from the train split, got {train.split!r}"
        )
    mean = train.inputs.mean(axis=(0, 2))
    std = train.inputs.std(axis=(0, 2))
    passthrough = [bool(s == 0.0) for s in std]
    return NormStats(mean, std, source_split="train", passthrough=passthrough)


def normalize(dataset: Dataset, stats: Optional[NormStats] = None) -> tuple[Dataset, NormStats]:
    """Per-channel z-score using train statistics; constant channels pass through."""
    if stats is None:
        stats = compute_norm_stats(dataset)
    elif stats.source_split != "train":
        raise DataError(
            f"refusing to apply {stats.source_split!r}-split statistics to {dataset.split!r} data"
        )
    scale = np.where(stats.std == 0.0, 1.0, stats.std)
    shift = np.where(stats.std == 0.0, 0.0, stats.mean)
    x = (dataset.inputs - shift[None, :, None]) / scale[None, :, None]
    out = Dataset(x, dataset.labels.copy(), dataset.split, dataset.class_count, stats)
    return out, stats


def normalize_bundle(bundle: DataBundle) -> tuple[DataBundle, NormStats]:
    train, stats = normalize(bundle.train)
    val, _ = normalize(bundle.val, stats)
    test, _ = normalize(bundle.test, stats)
    return DataBundle(train, val, test), stats


def batch_iter(
    dataset: Dataset, batch_size: int, shuffle: bool = True, seed: int = 0, epoch: int = 0
) -> Iterator[tuple[Array, Array]]:
    """Seeded-permutation minibatches; the final short batch is retained."""
    if batch_size < 1:
        raise DataError(f"batch_size must be positive, got {batch_size}")
    order = (
        _rng(seed, 3, epoch).permutation(dataset.size) if shuffle else np.arange(dataset.size)
    )
    for lo in range(0, dataset.size, batch_size):
        idx = order[lo : lo + batch_size]
        yield dataset.inputs[idx], dataset.labels[idx]
