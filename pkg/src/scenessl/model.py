"""Small residual encoder, projection head, classifier head and checkpoints.

The encoder keeps the ResNet layout at reduced width: a strided 3×3 stem
followed by 2×2 max-pooling (overall stride 4), then stages of basic
residual blocks (two 3×3 convolutions, normalisation after each, identity
or 1×1 projection shortcut), global average pooling and a linear map to the
embedding. Stage ``i > 0`` halves the spatial extent in its first block.

Parameter count (group or batch norm, each norm layer has a scale and a
shift per channel; ``w₋₁ = channels`` for the stem)::

    stem   = 9·c·w₀ + 2·w₀
    block  = 9·cin·cout + 9·cout² + 4·cout  (+ cin·cout + 2·cout with a projection shortcut)
    head   = w_last·embedding_dim + embedding_dim

A projection shortcut is used when ``cin != cout`` or the block is strided.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ContractError, DimensionError, FingerprintError, NumericInstabilityError
from .fingerprint import fingerprint
from .numerics import Rng, Tensor, conv2d, l2_normalize, max_pool2d, no_grad, relu, standardize

log = logging.getLogger(__name__)

STAGE_TAGS = ("pretext-object", "pretext-scene", "downstream")


@dataclass(frozen=True)
class EncoderConfig:
    input_size: tuple[int, int, int] = (64, 64, 3)
    stage_widths: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: tuple[int, ...] = (2, 2, 2)
    embedding_dim: int = 64
    norm: str = "group"
    groups: int = 8

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(x) for x in self.input_size))
        object.__setattr__(self, "stage_widths", tuple(int(x) for x in self.stage_widths))
        object.__setattr__(self, "blocks_per_stage", tuple(int(x) for x in self.blocks_per_stage))
        if len(self.input_size) != 3 or min(self.input_size) < 1:
            raise ContractError(f"input_size must be (H, W, channels), got {self.input_size}")
        if len(self.stage_widths) != len(self.blocks_per_stage) or not self.stage_widths:
            raise ContractError("stage_widths and blocks_per_stage must be non-empty and equally long")
        if min(self.stage_widths) < 1 or min(self.blocks_per_stage) < 1:
            raise ContractError("stage widths and block counts must be positive")
        if self.embedding_dim < 8:
            raise ContractError(f"embedding_dim must be >= 8, got {self.embedding_dim}")
        if self.norm not in ("group", "batch"):
            raise ContractError(f"norm must be 'group' or 'batch', got {self.norm!r}")
        h, w, _ = self.input_size
        if h % 4 or w % 4:
            raise ContractError(f"input extents must be multiples of 4, got {h}x{w}")


@dataclass(frozen=True)
class ProjectionConfig:
    hidden_dim: int = 128
    output_dim: int = 64
    use_batch_norm: bool = True

    def __post_init__(self):
        if self.hidden_dim < 1 or self.output_dim < 1:
            raise ContractError("projection dimensions must be positive")
        if self.output_dim > self.hidden_dim:
            raise ContractError(f"output_dim {self.output_dim} exceeds hidden_dim {self.hidden_dim}")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    num_classes: int = 8
    prototypes: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["input_size"] = list(self.encoder.input_size)
        d["encoder"]["stage_widths"] = list(self.encoder.stage_widths)
        d["encoder"]["blocks_per_stage"] = list(self.encoder.blocks_per_stage)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(encoder=EncoderConfig(**d["encoder"]), projection=ProjectionConfig(**d["projection"]),
                   num_classes=int(d["num_classes"]), prototypes=int(d.get("prototypes", 0)))

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.to_dict())


def encoder_parameter_count(cfg: EncoderConfig) -> int:
    c = cfg.input_size[2]
    w0 = cfg.stage_widths[0]
    total = 9 * c * w0 + 2 * w0
    cin = w0
    for stage, (width, blocks) in enumerate(zip(cfg.stage_widths, cfg.blocks_per_stage)):
        for b in range(blocks):
            stride = 2 if (stage > 0 and b == 0) else 1
            total += 9 * cin * width + 9 * width * width + 4 * width
            if cin != width or stride != 1:
                total += cin * width + 2 * width
            cin = width
    return total + cin * cfg.embedding_dim + cfg.embedding_dim


# -- layers ---------------------------------------------------------------

class Module:
    training = True

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield f"{name}.{i}", m

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int, rng: Rng):
        bound = np.sqrt(6.0 / (cin * kernel * kernel))
        self.weight = Tensor(rng.uniform(-bound, bound, (cout, cin, kernel, kernel)), requires_grad=True)
        self.stride = stride
        self.padding = kernel // 2

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.stride, self.padding)


class Norm(Module):
    """Group norm (default) or batch norm over NCHW or NC inputs."""

    def __init__(self, channels: int, kind: str = "group", groups: int = 8, zero_scale: bool = False):
        self.kind = kind
        self.groups = _group_count(channels, groups)
        self.weight = Tensor(np.zeros(channels) if zero_scale else np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        if kind == "batch":
            self._buffers = ("running_mean", "running_var")
            self.running_mean = np.zeros(channels, dtype=np.float32)
            self.running_var = np.ones(channels, dtype=np.float32)

    def __call__(self, x: Tensor) -> Tensor:
        c = x.shape[1]
        shape = (1, c) + (1,) * (x.ndim - 2)
        if self.kind == "group":
            if x.ndim != 4:
                raise DimensionError(f"group norm expects NCHW input, got {x.shape}")
            n, _, h, w = x.shape
            y = standardize(x.reshape(n, self.groups, -1), axes=2).reshape(n, c, h, w)
        else:
            axes = (0,) + tuple(range(2, x.ndim))
            if self.training:
                y = standardize(x, axes=axes)
                m = x.data.mean(axis=axes)
                v = x.data.var(axis=axes)
                self.running_mean = (0.9 * self.running_mean + 0.1 * m).astype(np.float32)
                self.running_var = (0.9 * self.running_var + 0.1 * v).astype(np.float32)
            else:
                inv = 1.0 / np.sqrt(self.running_var + 1e-5)
                y = (x - self.running_mean.reshape(shape).astype(x.dtype)) * inv.reshape(shape).astype(x.dtype)
        return y * self.weight.reshape(shape) + self.bias.reshape(shape)


def _group_count(channels: int, groups: int) -> int:
    g = min(groups, channels)
    while channels % g:
        g -= 1
    return g


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: Rng, init: str = "uniform"):
        if init == "identity":
            w = np.eye(fan_in, fan_out)
        elif init == "zeros":
            w = np.zeros((fan_in, fan_out))
        else:
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, (fan_in, fan_out))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise DimensionError(f"linear layer expects (*, {self.weight.shape[0]}) input, got {x.shape}")
        return x @ self.weight + self.bias


class BasicBlock(Module):
    def __init__(self, cin: int, cout: int, stride: int, cfg: EncoderConfig, rng: Rng):
        self.conv1 = Conv2d(cin, cout, 3, stride, rng.child("conv1"))
        self.norm1 = Norm(cout, cfg.norm, cfg.groups)
        self.conv2 = Conv2d(cout, cout, 3, 1, rng.child("conv2"))
        # zero final scale: every block starts as the identity map
        self.norm2 = Norm(cout, cfg.norm, cfg.groups, zero_scale=True)
        if cin != cout or stride != 1:
            self.shortcut = Conv2d(cin, cout, 1, stride, rng.child("shortcut"))
            self.shortcut_norm = Norm(cout, cfg.norm, cfg.groups)
        else:
            self.shortcut = None

    def __call__(self, x: Tensor) -> Tensor:
        h = relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        skip = self.shortcut_norm(self.shortcut(x)) if self.shortcut is not None else x
        return relu(h + skip)


def _check_finite(t: Tensor, layer: str) -> Tensor:
    if not np.isfinite(t.data).all():
        raise NumericInstabilityError(layer)
    return t


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: Rng):
        self.cfg = cfg
        w0 = cfg.stage_widths[0]
        self.stem = Conv2d(cfg.input_size[2], w0, 3, 2, rng.child("stem"))
        self.stem_norm = Norm(w0, cfg.norm, cfg.groups)
        blocks = []
        cin = w0
        for s, (width, count) in enumerate(zip(cfg.stage_widths, cfg.blocks_per_stage)):
            for b in range(count):
                stride = 2 if (s > 0 and b == 0) else 1
                blocks.append(BasicBlock(cin, width, stride, cfg, rng.child("stage", s, b)))
                cin = width
        self.blocks = blocks
        self.fc = Linear(cin, cfg.embedding_dim, rng.child("fc"))

    def block_names(self) -> list[str]:
        names = []
        for s, count in enumerate(self.cfg.blocks_per_stage):
            names += [f"stage{s}.block{b}" for b in range(count)]
        return names

    def __call__(self, images: Tensor) -> Tensor:
        h_, w_, c_ = self.cfg.input_size
        if images.ndim != 4 or images.shape[1:] != (c_, h_, w_):
            raise DimensionError(f"encoder expects (B, {c_}, {h_}, {w_}) images, got {images.shape}")
        x = _check_finite(max_pool2d(relu(self.stem_norm(self.stem(images)))), "stem")
        for name, block in zip(self.block_names(), self.blocks):
            x = _check_finite(block(x), name)
        pooled = x.mean(axis=(2, 3))
        return _check_finite(self.fc(pooled), "fc")


class ProjectionHead(Module):
    def __init__(self, embedding_dim: int, cfg: ProjectionConfig, rng: Rng):
        self.fc1 = Linear(embedding_dim, cfg.hidden_dim, rng.child("fc1"))
        self.norm = Norm(cfg.hidden_dim, "batch") if cfg.use_batch_norm else None
        self.fc2 = Linear(cfg.hidden_dim, cfg.output_dim, rng.child("fc2"))

    def __call__(self, x: Tensor) -> Tensor:
        h = self.fc1(x)
        if self.norm is not None:
            h = self.norm(h)
        return self.fc2(relu(h))


class SceneModel(Module):
    """Encoder plus projection head (pretext), classifier (downstream) and optional prototypes."""

    def __init__(self, cfg: ModelConfig, rng: Rng, classifier_init: str = "uniform"):
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder, rng.child("encoder"))
        self.projector = ProjectionHead(cfg.encoder.embedding_dim, cfg.projection, rng.child("projector"))
        self.classifier = Linear(cfg.encoder.embedding_dim, cfg.num_classes, rng.child("classifier"),
                                 init=classifier_init)
        if cfg.prototypes:
            p = rng.child("prototypes").normal(size=(cfg.prototypes, cfg.projection.output_dim))
            self.prototypes = Tensor(p / np.linalg.norm(p, axis=1, keepdims=True), requires_grad=True)
        else:
            self.prototypes = None

    def encode(self, images: Tensor) -> Tensor:
        return self.encoder(images)

    def project(self, embeddings: Tensor) -> Tensor:
        return self.projector(embeddings)

    def classify(self, embeddings: Tensor) -> Tensor:
        return self.classifier(embeddings)

    def reset_classifier(self, rng: Rng) -> None:
        self.classifier = Linear(self.cfg.encoder.embedding_dim, self.cfg.num_classes, rng)

    def normalize_prototypes(self) -> None:
        if self.prototypes is not None:
            p = self.prototypes.data
            self.prototypes.data = (p / np.linalg.norm(p, axis=1, keepdims=True)).astype(p.dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(own) | set(buffers)) - set(state)
        unexpected = set(state) - set(own) - set(buffers)
        if missing or unexpected:
            raise ContractError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {state[name].shape} != model shape {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for name in buffers:
            owner, attr = self._resolve(name)
            setattr(owner, attr, np.array(state[name], dtype=np.float32))

    def _resolve(self, dotted: str):
        *path, attr = dotted.split(".")
        obj = self
        for part in path:
            obj = obj[int(part)] if isinstance(obj, list) else getattr(obj, part)
        return obj, attr

    def predict(self, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
        """Class probabilities for a float image array (N, C, H, W)."""
        self.eval()
        out = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                logits = self.classify(self.encode(Tensor(images[i:i + batch_size]))).data.astype(np.float64)
                logits -= logits.max(axis=1, keepdims=True)
                p = np.exp(logits)
                out.append(p / p.sum(axis=1, keepdims=True))
        return np.concatenate(out) if out else np.zeros((0, self.cfg.num_classes))

    def embed(self, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
        self.eval()
        with no_grad():
            parts = [l2_normalize(self.encode(Tensor(images[i:i + batch_size])), 1).data
                     for i in range(0, len(images), batch_size)]
        return np.concatenate(parts)


# -- checkpoints ------------------------------------------------------------

MAGIC = b"SSLCKPT\x00"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """Serialisable model state plus provenance.

    File layout: 8-byte magic, little-endian uint32 format version, uint64
    header length, UTF-8 JSON header, then one little-endian float32 block
    per tensor in the order listed in ``header["tensors"]``.
    """

    config: ModelConfig
    tensors: dict[str, np.ndarray]
    lineage: list[str] = field(default_factory=list)
    epoch: int = 0
    seed: int = 0
    rng_state: dict | None = None
    class_names: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint

    @classmethod
    def from_model(cls, model: SceneModel, **kwargs) -> "Checkpoint":
        tensors = {k: np.array(v, dtype=np.float32) for k, v in model.state_dict().items()}
        return cls(config=model.cfg, tensors=tensors, **kwargs)

    def build_model(self) -> SceneModel:
        model = SceneModel(self.config, Rng(0))
        model.load_state_dict(self.tensors)
        return model

    def with_stage(self, tag: str, **changes) -> "Checkpoint":
        if tag not in STAGE_TAGS:
            raise ContractError(f"unknown stage tag {tag!r}")
        fields = dict(config=self.config, tensors=self.tensors, lineage=self.lineage + [tag], epoch=self.epoch,
                      seed=self.seed, rng_state=self.rng_state, class_names=self.class_names, extra=dict(self.extra))
        fields.update(changes)
        return Checkpoint(**fields)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    names = list(ckpt.tensors)
    header = {
        "format": "scenessl-checkpoint",
        "version": FORMAT_VERSION,
        "fingerprint": ckpt.fingerprint,
        "config": ckpt.config.to_dict(),
        "lineage": list(ckpt.lineage),
        "epoch": int(ckpt.epoch),
        "seed": int(ckpt.seed),
        "rng_state": ckpt.rng_state,
        "class_names": list(ckpt.class_names),
        "extra": ckpt.extra,
        "tensors": [{"name": n, "shape": list(ckpt.tensors[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(ckpt.tensors[n], dtype="<f4").tobytes())
    tmp.replace(path)
    return path


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expected`` the stored config must match it exactly."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ContractError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise ContractError(f"{path}: checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    config = ModelConfig.from_dict(header["config"])
    if config.fingerprint != header["fingerprint"]:
        raise FingerprintError({"fingerprint": (header["fingerprint"], config.fingerprint)})
    if expected is not None and expected.fingerprint != config.fingerprint:
        raise FingerprintError(_config_diff(config.to_dict(), expected.to_dict()))
    offset = 20 + hlen
    tensors = {}
    for spec in header["tensors"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(spec["shape"])
        tensors[spec["name"]] = arr.astype(np.float32)
        offset += 4 * count
    return Checkpoint(config=config, tensors=tensors, lineage=header["lineage"], epoch=header["epoch"],
                      seed=header["seed"], rng_state=header["rng_state"], class_names=header["class_names"],
                      extra=header.get("extra", {}))


def _config_diff(a: dict, b: dict, prefix: str = "") -> dict:
    diff = {}
    for key in sorted(set(a) | set(b)):
        va, vb = a.get(key), b.get(key)
        if isinstance(va, dict) and isinstance(vb, dict):
            diff.update(_config_diff(va, vb, f"{prefix}{key}."))
        elif va != vb:
            diff[prefix + key] = (va, vb)
    return diff
