"""Discriminative models and OOD scoring.

Two desk-scale architectures: an image-wide classifier (a small MLP for 2-D
points or a four-layer convnet for images) and a dense per-pixel model with
a stride-8 encoder and bilinear upsampling back to label resolution.
Scoring works on temperature-scaled posteriors: one minus the maximum
softmax probability, or the softmax entropy. Ties in argmax resolve to the
lowest class index everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import tensorio
from .autodiff import ParameterSet, Tensor
from .checkpoint import save_checkpoint, load_checkpoint


@dataclass
class Posterior:
    """Class probabilities along axis 1, plus the temperature that made them."""

    probs: np.ndarray
    temperature: float = 1.0

    def __post_init__(self):
        p = np.asarray(self.probs)
        if p.ndim < 2:
            p = p.reshape(1, -1)
        self.probs = p
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        sums = p.sum(axis=1)
        if np.any(p < 0) or np.any(np.abs(sums - 1.0) > 1e-6):
            raise ValueError("probabilities must be non-negative and sum to 1")

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    m = logits.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(logits - m).sum(axis=axis, keepdims=True))
    return np.exp(logits - lse)


def softmax_with_temperature(logits: np.ndarray, temperature: float) -> Posterior:
    """softmax(logits / T) via log-sum-exp; the argmax never changes with T."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 1:
        logits = logits[None]
    return Posterior(softmax(logits / temperature, axis=1), temperature)


def msp_score(posterior: Posterior) -> np.ndarray:
    """1 - max class probability; higher means more outlier-like."""
    return 1.0 - posterior.probs.max(axis=1)


def entropy_score(posterior: Posterior) -> np.ndarray:
    """Shannon entropy in nats, with 0 log 0 = 0; at most log C."""
    p = posterior.probs
    return -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=1)


SCORING_FUNCTIONS = {"msp": msp_score, "entropy": entropy_score}


# -- models -----------------------------------------------------------------


class MLPClassifier:
    """Three fully connected layers for 2-D point inputs."""

    def __init__(self, in_dim: int, num_classes: int, hidden: int = 64, seed: int = 0, dtype=np.float32):
        if num_classes < 2:
            raise ValueError("need at least two classes")
        self.descriptor = {"kind": "imagewide", "arch": "mlp", "in_dim": in_dim,
                           "num_classes": num_classes, "hidden": hidden}
        self.num_classes = num_classes
        self.dtype = np.dtype(dtype)
        self.params = ParameterSet()
        rng = np.random.default_rng(seed)
        sizes = [in_dim, hidden, hidden, num_classes]
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            std = math.sqrt(2.0 / a)
            w = (rng.standard_normal((a, b)) * std).astype(self.dtype)
            if i == len(sizes) - 2:
                w[...] = 0.0  # zero final layer: uniform posterior at init
            self.params.add(f"w{i}", w)
            self.params.add(f"b{i}", np.zeros(b, self.dtype))

    def logits_t(self, x: Tensor) -> Tensor:
        h = x
        for i in range(3):
            h = ad.matmul(h, self.params[f"w{i}"]) + self.params[f"b{i}"]
            if i < 2:
                h = ad.elu(h)
        return h


class ConvClassifier:
    """Four-layer convnet for image-wide classification."""

    def __init__(self, in_channels: int, num_classes: int, base: int = 16, seed: int = 0, dtype=np.float32):
        if num_classes < 2:
            raise ValueError("need at least two classes")
        self.descriptor = {"kind": "imagewide", "arch": "conv", "in_channels": in_channels,
                           "num_classes": num_classes, "base": base}
        self.num_classes = num_classes
        self.dtype = np.dtype(dtype)
        self.params = ParameterSet()
        rng = np.random.default_rng(seed)
        widths = [(in_channels, base, 1), (base, 2 * base, 2), (2 * base, 4 * base, 2)]
        for i, (cin, cout, _) in enumerate(widths):
            std = math.sqrt(2.0 / (cin * 9))
            self.params.add(f"conv{i}_w", (rng.standard_normal((cout, cin, 3, 3)) * std).astype(self.dtype))
            self.params.add(f"conv{i}_b", np.zeros(cout, self.dtype))
        self._strides = [s for _, _, s in widths]
        self.params.add("fc_w", np.zeros((4 * base, num_classes), self.dtype))
        self.params.add("fc_b", np.zeros(num_classes, self.dtype))

    def logits_t(self, x: Tensor) -> Tensor:
        h = x
        for i, stride in enumerate(self._strides):
            h = ad.elu(ad.conv2d(h, self.params[f"conv{i}_w"], self.params[f"conv{i}_b"],
                                 stride=stride, padding=1))
        h = h.mean(axis=(2, 3))
        return ad.matmul(h, self.params["fc_w"]) + self.params["fc_b"]


class DenseClassifier:
    """Stride-8 encoder with bilinear upsampling to per-pixel logits."""

    OUTPUT_STRIDE = 8

    def __init__(self, in_channels: int, num_classes: int, base: int = 16, seed: int = 0, dtype=np.float32):
        if num_classes < 2:
            raise ValueError("need at least two classes")
        self.descriptor = {"kind": "dense", "arch": "encdec", "in_channels": in_channels,
                           "num_classes": num_classes, "base": base,
                           "output_stride": self.OUTPUT_STRIDE}
        self.num_classes = num_classes
        self.dtype = np.dtype(dtype)
        self.params = ParameterSet()
        rng = np.random.default_rng(seed)
        layers = [
            (in_channels, base, 1),
            (base, 2 * base, 2),
            (2 * base, 3 * base, 2),
            (3 * base, 4 * base, 2),
            (4 * base, 4 * base, 1),
        ]
        for i, (cin, cout, _) in enumerate(layers):
            std = math.sqrt(2.0 / (cin * 9))
            self.params.add(f"enc{i}_w", (rng.standard_normal((cout, cin, 3, 3)) * std).astype(self.dtype))
            self.params.add(f"enc{i}_b", np.zeros(cout, self.dtype))
        self._strides = [s for _, _, s in layers]
        self.params.add("head_w", np.zeros((num_classes, 4 * base, 1, 1), self.dtype))
        self.params.add("head_b", np.zeros(num_classes, self.dtype))

    def logits_t(self, x: Tensor) -> Tensor:
        h = x
        for i, stride in enumerate(self._strides):
            h = ad.elu(ad.conv2d(h, self.params[f"enc{i}_w"], self.params[f"enc{i}_b"],
                                 stride=stride, padding=1))
        h = ad.conv2d(h, self.params["head_w"], self.params["head_b"])
        return ad.upsample_bilinear(h, self.OUTPUT_STRIDE)


def _validate_input(model, x: np.ndarray) -> np.ndarray:
    desc = model.descriptor
    x = np.asarray(x, dtype=model.dtype)
    if desc["arch"] == "mlp":
        if x.ndim != 2 or x.shape[1] != desc["in_dim"]:
            raise ValueError(f"expected [N,{desc['in_dim']}] input, got {x.shape}")
    else:
        cin = desc["in_channels"]
        if x.ndim != 4 or x.shape[1] != cin:
            raise ValueError(f"expected [N,{cin},H,W] input, got {x.shape}")
        if desc["kind"] == "dense":
            stride = desc["output_stride"]
            if x.shape[2] % stride or x.shape[3] % stride:
                raise ValueError(f"dense input extents must be divisible by {stride}")
    return x


def predict_logits(model, x: np.ndarray, batch: int = 256) -> np.ndarray:
    """Deterministic forward pass; [N,C] image-wide, [N,C,H,W] dense."""
    x = _validate_input(model, x)
    chunks = []
    with ad.no_grad():
        for lo in range(0, x.shape[0], batch):
            chunks.append(model.logits_t(Tensor(x[lo:lo + batch])).data)
    return np.concatenate(chunks, axis=0)


def dense_score_map(model, x: np.ndarray, scoring: str = "msp", temperature: float = 1.0) -> np.ndarray:
    """Per-pixel OOD score map [N,H,W] from the temperature-scaled posterior."""
    if model.descriptor["kind"] != "dense":
        raise ValueError("dense_score_map needs a dense model")
    if scoring not in SCORING_FUNCTIONS:
        raise ValueError(f"unknown scoring {scoring!r}")
    logits = predict_logits(model, x)
    posterior = softmax_with_temperature(logits, temperature)
    return SCORING_FUNCTIONS[scoring](posterior)


def save_score_maps(path, maps: np.ndarray, scoring: str, temperature: float) -> None:
    tensorio.write_tensor_map(path, maps, scoring=scoring, temperature=temperature)


def load_score_maps(path) -> tuple[np.ndarray, dict]:
    data, info = tensorio.read_tensor_map(path)
    return data[:, 0], info


# -- persistence --------------------------------------------------------------


def save_classifier(path, model) -> None:
    meta = {"kind": "classifier", "descriptor": model.descriptor, "dtype": model.dtype.str}
    save_checkpoint(path, model.params.state(), meta)


def classifier_from_descriptor(descriptor: dict, seed: int = 0, dtype=np.float32):
    arch = descriptor["arch"]
    if arch == "mlp":
        return MLPClassifier(descriptor["in_dim"], descriptor["num_classes"],
                             descriptor["hidden"], seed=seed, dtype=dtype)
    if arch == "conv":
        return ConvClassifier(descriptor["in_channels"], descriptor["num_classes"],
                              descriptor["base"], seed=seed, dtype=dtype)
    if arch == "encdec":
        return DenseClassifier(descriptor["in_channels"], descriptor["num_classes"],
                               descriptor["base"], seed=seed, dtype=dtype)
    raise ValueError(f"unknown architecture {arch!r}")


def classifier_from_state(arrays: dict[str, np.ndarray], meta: dict):
    model = classifier_from_descriptor(meta["descriptor"], dtype=np.dtype(meta["dtype"]))
    model.params.load_state(arrays)
    return model


def load_classifier(path):
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "classifier":
        raise ValueError(f"{path}: not a classifier checkpoint")
    return classifier_from_state(arrays, meta)
