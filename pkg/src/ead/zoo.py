"""Model zoo: train small CNNs, distill them defensively, retrain on
adversarial examples, and persist them in a compact binary format.

Training is deterministic for a fixed config seed: same seed, same data,
bit-identical weights.
"""

from __future__ import annotations

import logging
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .data import Dataset, Example

log = logging.getLogger(__name__)

MODEL_MAGIC = b"EADM"
MODEL_VERSION = 1

_KIND_CODES = {"dense": 1, "conv": 2, "maxpool": 3, "relu": 4, "flatten": 5}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}
_KIND_ARGC = {"dense": 1, "conv": 2, "maxpool": 1, "relu": 0, "flatten": 0}


class ModelFormatError(ValueError):
    """Model file is malformed or from an unsupported version."""


class TrainingDivergedError(RuntimeError):
    """Loss or parameters became non-finite during training."""


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 1e-3
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


def default_arch(num_classes: int = 10):
    """The reference desk-scale classifier: two conv blocks, pool, two dense."""
    return [
        nn.Conv2D(32, 3),
        nn.ReLU(),
        nn.Conv2D(32, 3),
        nn.ReLU(),
        nn.MaxPool2D(2),
        nn.Flatten(),
        nn.Dense(128),
        nn.ReLU(),
        nn.Dense(num_classes),
    ]


def _flatten_params(params):
    flat = []
    for p in params:
        for key in sorted(p):
            flat.append(p[key])
    return flat


def _unflatten_params(flat, template):
    out, i = [], 0
    for p in template:
        d = {}
        for key in sorted(p):
            d[key] = flat[i]
            i += 1
        out.append(d)
    return out


def _mean_loss(net, x, targets, temperature):
    logits = nn.forward(net, x)
    probs = nn.temperature_softmax(logits, temperature)
    if targets.ndim == 1:
        picked = probs[np.arange(len(targets)), targets]
        return float(-np.log(np.maximum(picked, 1e-300)).mean())
    return float(-(targets * np.log(np.maximum(probs, 1e-300))).sum(axis=1).mean())


def _fit(net, x, targets, cfg: TrainConfig):
    """Minibatch training on hard labels (N,) or soft label rows (N, K)."""
    rng = np.random.default_rng(cfg.seed)
    n = x.shape[0]
    flat = _flatten_params(net.params)
    state = nn.AdamState.init(flat) if cfg.optimizer == "adam" else None
    probe = slice(0, min(n, 256))
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            grads = nn.parameter_gradients(net, x[idx], targets[idx], cfg.temperature)
            flat_grads = _flatten_params(grads)
            flat = _flatten_params(net.params)
            if cfg.optimizer == "adam":
                state, flat = nn.adam_step(state, flat, flat_grads, cfg.lr)
            else:
                flat = nn.sgd_step(flat, flat_grads, cfg.lr)
            net.params = _unflatten_params(flat, net.params)
        loss = _mean_loss(net, x[probe], targets[probe], cfg.temperature)
        finite = np.isfinite(loss) and all(
            np.isfinite(a).all() for a in _flatten_params(net.params)
        )
        if not finite:
            raise TrainingDivergedError(
                f"non-finite loss or weights after epoch {epoch + 1}"
            )
        log.debug("epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, loss)
    return net


def train(layers, data: Dataset, cfg: TrainConfig, eval_data: Dataset | None = None):
    """Train a fresh network on hard labels at the config temperature."""
    net = nn.Network.build(layers, data.input_shape, cfg.seed)
    _fit(net, data.x, data.y, cfg)
    if eval_data is not None:
        log.info("test accuracy %.4f", evaluate(net, eval_data))
    return net


def evaluate(net, data: Dataset) -> float:
    """Plain argmax accuracy (temperature plays no role at eval time)."""
    preds = nn.predict(net, data.x)
    return float((preds == data.y).mean())


def distill(teacher, data: Dataset, temperature: float, cfg: TrainConfig):
    """Defensive distillation: retrain the architecture on the teacher's
    temperature-softened label rows.

    The teacher should itself have been trained at `temperature`. The
    student is trained at the same temperature and then used with
    temperature 1 like any other network.
    """
    soft = nn.temperature_softmax(nn.forward(teacher, data.x), temperature)
    student = nn.Network.build(
        [nn.layer_from_descriptor(d) for d in teacher.descriptors()],
        teacher.input_shape,
        cfg.seed,
    )
    _fit(student, data.x, soft, replace(cfg, temperature=temperature))
    return student


def adversarial_retrain(layers, data: Dataset, adversarial: list[Example], cfg: TrainConfig):
    """Train from scratch on the dataset augmented with label-corrected
    adversarial examples (each carries its source image's true label)."""
    if not adversarial:
        warnings.warn("no adversarial examples supplied; training unaugmented")
        return train(layers, data, cfg)
    extra_x = np.stack([ex.x for ex in adversarial])
    extra_y = np.array([ex.label for ex in adversarial], dtype=np.int64)
    augmented = Dataset(
        x=np.concatenate([data.x, extra_x]),
        y=np.concatenate([data.y, extra_y]),
        input_shape=data.input_shape,
        num_classes=data.num_classes,
        split=data.split,
    )
    return train(layers, augmented, cfg)


# ---------------------------------------------------------------------------
# model file format
#
# magic "EADM", u16 version, input shape, layer descriptors, then one
# length-prefixed little-endian float32 blob per parameter array. All
# integers after the magic are little-endian.


def save_model(net, path) -> None:
    chunks = [MODEL_MAGIC, struct.pack("<H", MODEL_VERSION)]
    chunks.append(struct.pack("<B", len(net.input_shape)))
    chunks.append(struct.pack(f"<{len(net.input_shape)}I", *net.input_shape))
    chunks.append(struct.pack("<H", len(net.layers)))
    for desc in net.descriptors():
        kind, *args = desc
        chunks.append(struct.pack("<B", _KIND_CODES[kind]))
        chunks.append(struct.pack(f"<{len(args)}I", *args))
    for p in net.params:
        for key in sorted(p):
            arr = np.ascontiguousarray(p[key], dtype="<f4")
            chunks.append(struct.pack("<B", arr.ndim))
            chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            blob = arr.tobytes()
            chunks.append(struct.pack("<I", len(blob)))
            chunks.append(blob)
    blob = b"".join(chunks)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n):
        if self.off + n > len(self.blob):
            raise ModelFormatError(f"{self.path}: truncated model file")
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_model(path):
    with open(path, "rb") as f:
        r = _Reader(f.read(), path)
    if r.take(4) != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: not a model file (bad magic)")
    (version,) = r.unpack("<H")
    if version != MODEL_VERSION:
        raise ModelFormatError(
            f"{path}: unsupported model version {version}, expected {MODEL_VERSION}"
        )
    (ndim,) = r.unpack("<B")
    input_shape = r.unpack(f"<{ndim}I")
    (n_layers,) = r.unpack("<H")
    layers = []
    for _ in range(n_layers):
        (code,) = r.unpack("<B")
        if code not in _KIND_NAMES:
            raise ModelFormatError(f"{path}: unknown layer code {code}")
        kind = _KIND_NAMES[code]
        args = r.unpack(f"<{_KIND_ARGC[kind]}I")
        layers.append(nn.layer_from_descriptor((kind, *args)))
    shape = input_shape
    params = []
    for layer in layers:
        expected = layer.init_params(shape, np.random.default_rng(0))
        shape = layer.out_shape(shape)
        d = {}
        for key in sorted(expected):
            (pnd,) = r.unpack("<B")
            pshape = r.unpack(f"<{pnd}I")
            (nbytes,) = r.unpack("<I")
            if pshape != expected[key].shape or nbytes != 4 * int(np.prod(pshape)):
                raise ModelFormatError(
                    f"{path}: parameter blob for {key} does not match the architecture"
                )
            d[key] = np.frombuffer(r.take(nbytes), dtype="<f4").reshape(pshape).copy()
        params.append(d)
    if r.off != len(r.blob):
        raise ModelFormatError(f"{path}: trailing bytes after parameters")
    return nn.Network(input_shape, layers, params)
