"""Concrete architectures and checkpoint persistence.

Three model kinds are built here:

* ``cnn_classifier`` -- one conv+ReLU block per entry of ``conv_channels``,
  max-pool (width 2, stride 2) after each of the first two blocks, then a
  dense head.  The post-ReLU activation of the final conv block is named
  ``conv_last`` on every traced tape so it can be captured.
* ``lstm_classifier`` -- a single recurrent layer unrolled over the full
  sequence, final hidden state through a dense head.
* ``autoencoder`` -- conv encoder with a pool after every block, mirrored
  decoder using nearest-neighbour upsampling to the recorded pre-pool
  lengths followed by convolutions; the final decoder conv is linear so the
  output shape (and sign range) matches the input exactly.  An empty
  ``encoder_channels`` list yields the identity auto-encoder, which is
  handy as an oracle.

Odd sequence lengths are legal everywhere: pooling floors (the trailing
element of an odd-length axis is dropped) and the decoder upsamples back to
the recorded lengths, so reconstruction shape always equals input shape.

Checkpoints are two files: ``<path>.json`` (manifest with format version,
spec record and tensor table) and ``<path>.bin`` (raw little-endian IEEE-754
32-bit values, row-major, concatenated in manifest order).  Saving therefore
quantises parameters to 32 bits; a load/save round trip after that first
quantisation is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .engine import Array, Tape

CHECKPOINT_VERSION = 1


class SpecError(ValueError):
    """Invalid model specification."""


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint files."""


@dataclass
class ClassifierSpec:
    input_channels: int
    sequence_length: int
    class_count: int
    conv_channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    kernel_width: int = 5
    variant: str = "cnn"
    lstm_hidden: int = 64

    def validate(self) -> None:
        if self.class_count < 2:
            raise SpecError(f"class_count must be >= 2, got {self.class_count}")
        if self.input_channels < 1 or self.sequence_length < 1:
            raise SpecError("input_channels and sequence_length must be positive")
        if self.variant not in ("cnn", "lstm"):
            raise SpecError(f"variant must be 'cnn' or 'lstm', got {self.variant!r}")
        if self.variant == "cnn":
            if not self.conv_channels or any(c < 1 for c in self.conv_channels):
                raise SpecError("conv_channels must be a non-empty list of positive counts")
            if self.kernel_width % 2 == 0 or self.kernel_width < 1:
                raise SpecError(f"kernel_width must be odd, got {self.kernel_width}")
        if self.variant == "lstm" and self.lstm_hidden < 1:
            raise SpecError(f"lstm_hidden must be positive, got {self.lstm_hidden}")

    @property
    def pool_count(self) -> int:
        return min(2, len(self.conv_channels))

    def pooled_length(self) -> int:
        t = self.sequence_length
        for _ in range(self.pool_count):
            t //= 2
        if t < 1:
            raise SpecError(
                f"sequence_length {self.sequence_length} too short for "
                f"{self.pool_count} pooling layers"
            )
        return t


@dataclass
class AutoEncoderSpec:
    input_channels: int
    sequence_length: int
    encoder_channels: list[int] = field(default_factory=lambda: [16, 8])
    kernel_width: int = 5

    def validate(self) -> None:
        if self.input_channels < 1 or self.sequence_length < 1:
            raise SpecError("input_channels and sequence_length must be positive")
        if any(c < 1 for c in self.encoder_channels):
            raise SpecError("encoder_channels entries must be positive")
        if self.kernel_width % 2 == 0 or self.kernel_width < 1:
            raise SpecError(f"kernel_width must be odd, got {self.kernel_width}")

    def stage_lengths(self) -> list[int]:
        """Sequence length entering each encoder stage (index 0 = input)."""
        lengths = [self.sequence_length]
        for _ in self.encoder_channels:
            nxt = lengths[-1] // 2
            if nxt < 1:
                raise SpecError(
                    f"sequence_length {self.sequence_length} too short for "
                    f"{len(self.encoder_channels)} pooling layers"
                )
            lengths.append(nxt)
        return lengths


AnySpec = Union[ClassifierSpec, AutoEncoderSpec]


@dataclass
class Model:
    kind: str  # cnn_classifier | lstm_classifier | autoencoder
    spec: AnySpec
    params: dict[str, Array]

    def trace(self, tape: Tape, x: int, trainable: bool = True, prefix: str = "") -> int:
        """Register parameters on ``tape`` and build the forward graph.

        ``x`` must hold a batch shaped (N, C, T).  Returns the output node:
        logits (N, class_count) for classifiers, reconstruction (N, C, T)
        for auto-encoders.
        """
        nids = {
            name: tape.parameter(prefix + name, value, trainable=trainable)
            for name, value in self.params.items()
        }
        if self.kind == "cnn_classifier":
            return _cnn_trace(tape, self.spec, nids, x, prefix)
        if self.kind == "lstm_classifier":
            return _lstm_trace(tape, self.spec, nids, x, prefix)
        if self.kind == "autoencoder":
            return _autoencoder_trace(tape, self.spec, nids, x, prefix)
        raise SpecError(f"unknown model kind {self.kind!r}")

    def param_names(self) -> list[str]:
        return list(self.params)


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> Array:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def build_model(spec: AnySpec, seed: int) -> Model:
    """Deterministically initialised model; same seed gives identical bits."""
    spec.validate()
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    params: dict[str, Array] = {}
    if isinstance(spec, ClassifierSpec):
        if spec.variant == "cnn":
            c_in = spec.input_channels
            for i, c_out in enumerate(spec.conv_channels):
                k = spec.kernel_width
                params[f"conv{i}.w"] = _glorot(rng, (c_out, c_in, k), c_in * k, c_out * k)
                params[f"conv{i}.b"] = np.zeros((c_out, 1))
                c_in = c_out
            feat = spec.conv_channels[-1] * spec.pooled_length()
            params["head.w"] = _glorot(rng, (feat, spec.class_count), feat, spec.class_count)
            params["head.b"] = np.zeros(spec.class_count)
            return Model("cnn_classifier", spec, params)
        hidden = spec.lstm_hidden
        params["lstm.wx"] = _glorot(
            rng, (spec.input_channels, 4 * hidden), spec.input_channels, 4 * hidden
        )
        params["lstm.wh"] = _glorot(rng, (hidden, 4 * hidden), hidden, 4 * hidden)
        bias = np.zeros(4 * hidden)
        bias[hidden : 2 * hidden] = 1.0  # forget gate starts open
        params["lstm.b"] = bias
        params["head.w"] = _glorot(rng, (hidden, spec.class_count), hidden, spec.class_count)
        params["head.b"] = np.zeros(spec.class_count)
        return Model("lstm_classifier", spec, params)
    if isinstance(spec, AutoEncoderSpec):
        k = spec.kernel_width
        c_in = spec.input_channels
        for i, c_out in enumerate(spec.encoder_channels):
            params[f"enc{i}.w"] = _glorot(rng, (c_out, c_in, k), c_in * k, c_out * k)
            params[f"enc{i}.b"] = np.zeros((c_out, 1))
            c_in = c_out
        dec_channels = list(reversed(spec.encoder_channels[:-1])) + [spec.input_channels]
        for i, c_out in enumerate(dec_channels):
            params[f"dec{i}.w"] = _glorot(rng, (c_out, c_in, k), c_in * k, c_out * k)
            params[f"dec{i}.b"] = np.zeros((c_out, 1))
            c_in = c_out
        return Model("autoencoder", spec, params)
    raise SpecError(f"unsupported spec type {type(spec).__name__}")


def _cnn_trace(tape: Tape, spec: ClassifierSpec, nids: dict[str, int], x: int, prefix: str) -> int:
    h = x
    last = len(spec.conv_channels) - 1
    for i in range(len(spec.conv_channels)):
        h = tape.add(tape.conv1d(h, nids[f"conv{i}.w"]), nids[f"conv{i}.b"])
        h = tape.relu(h)
        if i == last:
            tape.set_name(h, prefix + "conv_last")
        if i < spec.pool_count:
            h = tape.max_pool1d(h)
    return tape.add(tape.dense(h, nids["head.w"]), nids["head.b"])


def _lstm_trace(tape: Tape, spec: ClassifierSpec, nids: dict[str, int], x: int, prefix: str) -> int:
    batch = tape.value(x).shape[0]
    hidden = spec.lstm_hidden
    h = tape.leaf(np.zeros((batch, hidden)))
    c = tape.leaf(np.zeros((batch, hidden)))
    for t in range(spec.sequence_length):
        xt = tape.slice(x, axis=2, start=t, stop=t + 1)
        pre = tape.add(
            tape.add(tape.dense(xt, nids["lstm.wx"]), tape.dense(h, nids["lstm.wh"])),
            nids["lstm.b"],
        )
        gate_in = tape.sigmoid(tape.slice(pre, 1, 0, hidden))
        gate_forget = tape.sigmoid(tape.slice(pre, 1, hidden, 2 * hidden))
        candidate = tape.tanh(tape.slice(pre, 1, 2 * hidden, 3 * hidden))
        gate_out = tape.sigmoid(tape.slice(pre, 1, 3 * hidden, 4 * hidden))
        c = tape.add(tape.hadamard(gate_forget, c), tape.hadamard(gate_in, candidate))
        h = tape.hadamard(gate_out, tape.tanh(c))
    return tape.add(tape.dense(h, nids["head.w"]), nids["head.b"])


def _autoencoder_trace(
    tape: Tape, spec: AutoEncoderSpec, nids: dict[str, int], x: int, prefix: str
) -> int:
    if not spec.encoder_channels:
        return tape.scalar_mul(x, 1.0)  # identity auto-encoder
    lengths = spec.stage_lengths()
    h = x
    for i in range(len(spec.encoder_channels)):
        h = tape.relu(tape.add(tape.conv1d(h, nids[f"enc{i}.w"]), nids[f"enc{i}.b"]))
        h = tape.max_pool1d(h)
    stages = len(spec.encoder_channels)
    for i in range(stages):
        h = tape.nearest_upsample1d(h, lengths[stages - 1 - i])
        h = tape.add(tape.conv1d(h, nids[f"dec{i}.w"]), nids[f"dec{i}.b"])
        if i < stages - 1:
            h = tape.relu(h)
    return h


# ---------------------------------------------------------------------------
# bundle
# ---------------------------------------------------------------------------

PARAM_GROUPS = ("classifier", "encoder", "decoder")


def param_group(prefixed_name: str) -> str:
    """Map a stacked-tape parameter name to its freeze group."""
    if prefixed_name.startswith("clf/"):
        return "classifier"
    if prefixed_name.startswith("ae/enc"):
        return "encoder"
    if prefixed_name.startswith("ae/dec"):
        return "decoder"
    raise SpecError(f"cannot infer parameter group of {prefixed_name!r}")


@dataclass
class ModelBundle:
    """Classifier plus auto-encoder and their stacked composition."""

    classifier: Model
    autoencoder: Model
    frozen: set[str] = field(default_factory=lambda: {"classifier"})
    finetuned_with: Optional[str] = None

    def __post_init__(self) -> None:
        cs, aspec = self.classifier.spec, self.autoencoder.spec
        if (cs.input_channels, cs.sequence_length) != (
            aspec.input_channels,
            aspec.sequence_length,
        ):
            raise SpecError(
                "auto-encoder output shape "
                f"({aspec.input_channels}, {aspec.sequence_length}) does not match "
                f"classifier input ({cs.input_channels}, {cs.sequence_length})"
            )
        unknown = self.frozen - set(PARAM_GROUPS)
        if unknown:
            raise SpecError(f"unknown frozen groups {sorted(unknown)}")

    def trace(self, tape: Tape, x: int) -> tuple[int, int]:
        """Stacked forward; returns (reconstruction nid, logits nid)."""
        recon = self.autoencoder.trace(
            tape,
            x,
            trainable=not ({"encoder", "decoder"} <= self.frozen),
            prefix="ae/",
        )
        # per-group trainability for a partially frozen auto-encoder
        for name, nid in list(tape.parameters.items()):
            if name.startswith("ae/"):
                tape.nodes[nid].requires_grad = param_group(name) not in self.frozen
        logits = self.classifier.trace(
            tape, recon, trainable="classifier" not in self.frozen, prefix="clf/"
        )
        return recon, logits

    def trainable_params(self) -> dict[str, Array]:
        out = {}
        if "classifier" not in self.frozen:
            out.update({f"clf/{k}": v for k, v in self.classifier.params.items()})
        for name, value in self.autoencoder.params.items():
            if param_group(f"ae/{name}") not in self.frozen:
                out[f"ae/{name}"] = value
        return out

    def apply_update(self, updated: dict[str, Array]) -> None:
        for name, value in updated.items():
            if name.startswith("clf/"):
                self.classifier.params[name[4:]] = value
            else:
                self.autoencoder.params[name[3:]] = value


@dataclass
class StackedResult:
    tape: Tape
    reconstruction_nid: int
    logits_nid: int

    @property
    def reconstruction(self) -> Array:
        return self.tape.value(self.reconstruction_nid)

    @property
    def logits(self) -> Array:
        return self.tape.value(self.logits_nid)


def stacked_forward(bundle: ModelBundle, batch: Array) -> StackedResult:
    """Run the stacked composition on a batch; keeps the tape for gradients."""
    tape = Tape()
    x = tape.leaf(np.asarray(batch, dtype=np.float64))
    recon, logits = bundle.trace(tape, x)
    return StackedResult(tape, recon, logits)


# ---------------------------------------------------------------------------
# inference helpers
# ---------------------------------------------------------------------------


def model_logits(model: Model, batch: Array) -> Array:
    tape = Tape()
    x = tape.leaf(np.asarray(batch, dtype=np.float64))
    out = model.trace(tape, x, trainable=False)
    return tape.value(out)


def predict(model: Model, inputs: Array, batch_size: int = 512) -> Array:
    """Argmax class per instance, evaluated in batches."""
    labels = np.empty(inputs.shape[0], dtype=np.int64)
    for lo in range(0, inputs.shape[0], batch_size):
        chunk = inputs[lo : lo + batch_size]
        labels[lo : lo + chunk.shape[0]] = model_logits(model, chunk).argmax(axis=1)
    return labels


def accuracy(model: Model, inputs: Array, labels: Array, batch_size: int = 512) -> float:
    return float((predict(model, inputs, batch_size) == labels).mean())


def reconstruct(model: Model, inputs: Array, batch_size: int = 512) -> Array:
    out = np.empty_like(np.asarray(inputs, dtype=np.float64))
    for lo in range(0, inputs.shape[0], batch_size):
        chunk = inputs[lo : lo + batch_size]
        tape = Tape()
        x = tape.leaf(chunk)
        nid = model.trace(tape, x, trainable=False)
        out[lo : lo + chunk.shape[0]] = tape.value(nid)
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _spec_record(model: Model) -> dict:
    rec = asdict(model.spec)
    rec["spec_type"] = type(model.spec).__name__
    return rec


def _spec_from_record(rec: dict) -> AnySpec:
    rec = dict(rec)
    kind = rec.pop("spec_type", None)
    if kind == "ClassifierSpec":
        return ClassifierSpec(**rec)
    if kind == "AutoEncoderSpec":
        return AutoEncoderSpec(**rec)
    raise CheckpointError(f"manifest declares unknown spec type {kind!r}")


def save_checkpoint(model: Model, path: Union[str, Path]) -> None:
    """Write ``<path>.json`` + ``<path>.bin``; parameters stored as float32."""
    path = Path(path)
    tensors = []
    blobs = []
    offset = 0
    for name, value in model.params.items():
        raw = np.ascontiguousarray(value, dtype="<f4").tobytes()
        tensors.append(
            {
                "name": name,
                "shape": list(value.shape),
                "byte_offset": offset,
                "byte_length": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "spec": _spec_record(model),
        "tensors": tensors,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(manifest, indent=1))
    path.with_suffix(path.suffix + ".bin").write_bytes(b"".join(blobs))


def load_checkpoint(path: Union[str, Path], expect: Optional[str] = None) -> Model:
    """Read a checkpoint pair; ``expect`` may pin 'classifier' or 'autoencoder'."""
    path = Path(path)
    manifest_path = path.with_suffix(path.suffix + ".json")
    blob_path = path.with_suffix(path.suffix + ".bin")
    if not manifest_path.exists() or not blob_path.exists():
        raise CheckpointError(f"checkpoint files missing at {path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable manifest {manifest_path}: {exc}") from exc
    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"version mismatch: manifest declares {version}, reader supports {CHECKPOINT_VERSION}"
        )
    kind = manifest.get("kind")
    if expect is not None:
        category = "autoencoder" if kind == "autoencoder" else "classifier"
        if category != expect:
            raise CheckpointError(f"checkpoint holds a {kind}, expected a {expect}")
    blob = blob_path.read_bytes()
    total = sum(t["byte_length"] for t in manifest["tensors"])
    if len(blob) != total:
        raise CheckpointError(
            f"truncated checkpoint: manifest declares {total} bytes, file holds {len(blob)}"
        )
    params: dict[str, Array] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        expected = 4 * int(np.prod(shape, dtype=np.int64)) if shape else 4
        if entry["byte_length"] != expected:
            raise CheckpointError(
                f"shape/manifest disagreement for tensor {entry['name']!r}: "
                f"shape {shape} needs {expected} bytes, manifest declares {entry['byte_length']}"
            )
        flat = np.frombuffer(
            blob, dtype="<f4", count=expected // 4, offset=entry["byte_offset"]
        )
        params[entry["name"]] = flat.astype(np.float64).reshape(shape)
    spec = _spec_from_record(manifest["spec"])
    spec.validate()
    return Model(kind, spec, params)


def model_checksum(model: Model) -> str:
    """SHA-256 over kind plus the float32 parameter blob (storage precision)."""
    digest = hashlib.sha256(model.kind.encode())
    for name, value in model.params.items():
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return digest.hexdigest()
