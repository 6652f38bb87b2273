"""Joint training of the classifier and the outlier-generating flow.

Per iteration the classifier minimizes cross-entropy on inliers plus a
KL-to-uniform penalty on flow samples; its gradient also reaches the flow
parameters through those samples. The flow then takes a step on its own
negative log-likelihood, accumulated on top of the classifier-derived
gradient, which pushes samples toward the border of the training
distribution. The dense variant pastes one generated patch into every crop
and applies the penalty only on pasted pixels, while the flow maximizes
the likelihood of the image content the paste replaced.

Per-iteration draw order is fixed and documented so single steps can be
replayed outside the loop: data indices, then outlier size (dense), then
latents, then paste offsets (dense), then dequantization noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .classifier import Posterior
from .flow import FlowModel, dequantize
from .optim import AdamState, CosineSchedule, adam_step, cosine_annealed_lr

IGNORE_LABEL = 255

# Reference values for full-scale training on 512x512 crops; desk-scale
# defaults below are what actually runs here.
FULL_SCALE_OUTLIER_SIZES = (64, 72, 80, 88, 96, 104, 112, 120, 128, 136, 144)
FULL_SCALE_CROP = 512


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 64
    lam: float = 1.0                 # penalty weight on generated samples
    n_out: int | None = None         # synthetic samples per image-wide batch
    outlier_sizes: tuple[int, ...] = (8, 10, 12, 14, 16)
    paste_outliers: bool = True
    classifier_lr: float = 1e-3
    classifier_lr_min: float = 1e-7
    classifier_schedule: str = "cosine"
    flow_lr: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 0        # 0: only the final checkpoint

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("loss modulation must be non-negative")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch size must be positive")
        if self.classifier_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.classifier_schedule!r}")


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, message: str):
        super().__init__(f"non-finite loss at iteration {iteration}: {message}")
        self.iteration = iteration


LOG_COLUMNS = ("iteration", "loss_cls", "ce_term", "kl_term", "loss_flow",
               "lr_classifier", "lr_flow", "outlier_h", "outlier_w")


class TrainLogWriter:
    """Append-only CSV training log; one flushed row per iteration."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "a")
        if self._fh.tell() == 0:
            self._fh.write(",".join(LOG_COLUMNS) + "\n")
            self._fh.flush()

    def append(self, row: dict) -> None:
        values = []
        for col in LOG_COLUMNS:
            v = row[col]
            values.append(str(v) if isinstance(v, int) else repr(float(v)))
        self._fh.write(",".join(values) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# -- losses ---------------------------------------------------------------------


def kl_uniform(posterior: Posterior) -> float:
    """KL(U || P), averaged when the posterior holds a batch; zero iff uniform."""
    p = posterior.probs
    if np.any(p == 0):
        raise ValueError("zero class probability makes the divergence infinite")
    c = p.shape[1]
    per_sample = -math.log(c) - np.log(p).mean(axis=1)
    return float(per_sample.mean())


def _log_softmax(logits: Tensor) -> Tensor:
    return logits - ad.logsumexp(logits, axis=1, keepdims=True)


def _kl_uniform_map(logp: Tensor) -> Tensor:
    """KL(U || P) per position from log-probabilities.

    Computing in log space keeps the value finite for any finite logits,
    which replaces clamping vanishing probabilities on the training path.
    """
    c = logp.shape[1]
    return -(logp.mean(axis=1)) - math.log(c)


def _clamp01(t: Tensor) -> Tensor:
    # identity inside [0,1], clamped outside; built from primitives
    return t + ad.relu(-t) - ad.relu(t - 1.0)


@dataclass
class LossParts:
    total: Tensor
    ce: float
    kl: float


def classifier_compound_loss(model, flow: FlowModel | None, x: np.ndarray, y: np.ndarray,
                             n_out: int, lam: float, rng: np.random.Generator | None = None,
                             spatial=None) -> LossParts:
    """Cross-entropy on the labelled batch plus the weighted uniformity
    penalty on freshly generated samples.

    With lam == 0 the generator branch is skipped entirely, so the
    classifier trajectory is bit-identical to training without any flow.
    Gradients of the penalty reach both the classifier and, through the
    generated samples, the flow.
    """
    y = np.asarray(y)
    if np.any((y < 0) | (y >= model.num_classes)):
        raise ValueError("class label outside the model's class range")
    xt = Tensor(np.asarray(x, dtype=model.dtype))
    logp = _log_softmax(model.logits_t(xt))
    ce = -(ad.gather_class(logp, y).mean())
    if lam == 0 or flow is None:
        return LossParts(ce, float(ce.data), 0.0)
    if n_out < 1:
        raise ValueError("need at least one generated sample")
    if rng is None:
        raise ValueError("generation needs a noise source")
    if spatial is None:
        spatial = (1, 1) if flow.config.point_mode else tuple(x.shape[2:])
    z = rng.standard_normal((n_out, flow.latent_dim(spatial))).astype(flow.dtype)
    x_out = flow.inverse_t(Tensor(z), spatial)
    if flow.config.dequant_levels:
        x_out = _clamp01(x_out)  # match the data range of classifier inputs
    logp_out = _log_softmax(model.logits_t(x_out))
    kl = _kl_uniform_map(logp_out).mean()
    total = ce + kl * lam
    return LossParts(total, float(ce.data), float(kl.data))


def flow_nll_loss(flow: FlowModel, x: np.ndarray, rng: np.random.Generator | None = None) -> Tensor:
    """Negative mean log-likelihood of a batch; dequantizes 8-bit-style data."""
    cfg = flow.config
    if cfg.dequant_levels:
        if rng is None:
            raise ValueError("dequantization needs a noise source")
        levels = cfg.dequant_levels
        k = np.round(np.asarray(x, np.float64) * (levels - 1))
        cont = dequantize(k, levels, rng).astype(flow.dtype)
    else:
        cont = np.asarray(x, dtype=flow.dtype)
    return -(flow.log_likelihood_t(Tensor(cont)).mean())


def paste_outlier(crop: np.ndarray, sample: np.ndarray, rng: np.random.Generator):
    """Paste one generated sample at a uniformly random position.

    Returns (pasted crop, binary mask of the pasted rectangle, the original
    patch the paste replaced). The crop outside the mask is untouched.
    """
    c, h_crop, w_crop = crop.shape
    cs, h, w = sample.shape
    if cs != c:
        raise ValueError("channel mismatch between crop and sample")
    if h > h_crop or w > w_crop:
        raise ValueError("sample larger than the crop")
    top = int(rng.integers(0, h_crop - h + 1))
    left = int(rng.integers(0, w_crop - w + 1))
    pasted = crop.copy()
    replaced = crop[:, top:top + h, left:left + w].copy()
    pasted[:, top:top + h, left:left + w] = sample
    mask = np.zeros((h_crop, w_crop), dtype=np.int64)
    mask[top:top + h, left:left + w] = 1
    return pasted, mask, replaced


def dense_openset_loss(model, x_pasted, y: np.ndarray, s: np.ndarray, lam: float) -> LossParts:
    """Per-pixel cross-entropy on unchanged pixels plus the weighted
    uniformity penalty on pasted pixels; each term is a mean over its own
    contributing pixels so the weight is independent of paste size.
    Ignore-labelled pixels contribute to neither term.
    """
    y = np.asarray(y)
    s = np.asarray(s)
    xt = x_pasted if isinstance(x_pasted, Tensor) else Tensor(np.asarray(x_pasted, model.dtype))
    c = model.num_classes
    bad = (s == 0) & (y != IGNORE_LABEL) & ((y < 0) | (y >= c))
    if np.any(bad):
        raise ValueError("inlier pixel with neither a valid class nor the ignore label")
    logp = _log_softmax(model.logits_t(xt))
    dtype = logp.dtype
    ce_mask = (s == 0) & (y != IGNORE_LABEL)
    kl_mask = (s == 1) & (y != IGNORE_LABEL)
    n_in = int(ce_mask.sum())
    n_out = int(kl_mask.sum())
    total = None
    ce_value = 0.0
    kl_value = 0.0
    if n_in:
        y_safe = np.where(ce_mask, y, 0)
        picked = ad.gather_class(logp, y_safe) * Tensor(ce_mask.astype(dtype))
        ce = -(picked.sum()) * (1.0 / n_in)
        total = ce
        ce_value = float(ce.data)
    if n_out and lam > 0:
        kl = (_kl_uniform_map(logp) * Tensor(kl_mask.astype(dtype))).sum() * (1.0 / n_out)
        kl_value = float(kl.data)
        total = kl * lam if total is None else total + kl * lam
    if total is None:
        total = logp.sum() * 0.0  # degenerate: nothing contributes
    return LossParts(total, ce_value, kl_value)


# -- training loops ---------------------------------------------------------------


@dataclass
class LoopState:
    iteration: int
    opt_classifier: AdamState
    opt_flow: AdamState | None
    rngs: dict = field(default_factory=dict)


RNG_STREAMS = ("data", "latent", "paste", "dequant")


def fresh_loop_state(config: TrainConfig, model, flow: FlowModel | None) -> LoopState:
    children = np.random.SeedSequence(config.seed).spawn(len(RNG_STREAMS))
    rngs = {name: np.random.Generator(np.random.PCG64(seq))
            for name, seq in zip(RNG_STREAMS, children)}
    if config.classifier_schedule == "cosine":
        sched = CosineSchedule(config.classifier_lr, config.classifier_lr_min, config.iterations)
    else:
        sched = None
    opt_c = AdamState(model.params, config.classifier_lr, schedule=sched)
    opt_f = AdamState(flow.params, config.flow_lr) if flow is not None else None
    return LoopState(0, opt_c, opt_f, rngs)


def _check_finite(value: float, iteration: int, name: str) -> None:
    if not np.isfinite(value):
        raise DivergenceError(iteration, f"{name} = {value}")


def _flow_step(flow, state, batch, iteration):
    nll = flow_nll_loss(flow, batch, state.rngs["dequant"])
    value = float(nll.data)
    _check_finite(value, iteration, "flow loss")
    nll.backward()
    adam_step(flow.params, state.opt_flow)
    return value


def train_imagewide(config: TrainConfig, model, flow: FlowModel | None,
                    points: np.ndarray, labels: np.ndarray,
                    log: TrainLogWriter | None = None, state: LoopState | None = None,
                    checkpoint_cb=None) -> tuple[list[dict], LoopState]:
    """Alternating two-optimizer training on labelled points or images.

    Per iteration: build the compound classifier loss on a fresh batch and
    freshly generated samples, step the classifier, then add the flow's
    negative log-likelihood gradient on the same batch onto the
    classifier-derived gradient already sitting in the flow accumulators
    and step the flow.
    """
    if state is None:
        state = fresh_loop_state(config, model, flow)
    n = len(points)
    n_out = config.n_out or config.batch_size
    rows = []
    for it in range(state.iteration + 1, config.iterations + 1):
        model.params.zero_grad()
        if flow is not None:
            flow.params.zero_grad()
        idx = state.rngs["data"].integers(0, n, config.batch_size)
        lr_c = cosine_annealed_lr(state.opt_classifier, state.opt_classifier.step_count)
        parts = classifier_compound_loss(model, flow, points[idx], labels[idx],
                                         n_out, config.lam, state.rngs["latent"])
        loss_cls = float(parts.total.data)
        _check_finite(loss_cls, it, "classifier loss")
        parts.total.backward()
        adam_step(model.params, state.opt_classifier)
        if flow is not None:
            loss_flow = _flow_step(flow, state, points[idx], it)
            lr_f = state.opt_flow.lr
        else:
            loss_flow, lr_f = 0.0, 0.0
        if flow is not None and config.lam > 0:
            spatial = (1, 1) if flow.config.point_mode else tuple(points.shape[2:])
        else:
            spatial = (0, 0)
        row = {"iteration": it, "loss_cls": loss_cls, "ce_term": parts.ce,
               "kl_term": parts.kl, "loss_flow": loss_flow, "lr_classifier": lr_c,
               "lr_flow": lr_f, "outlier_h": int(spatial[0]), "outlier_w": int(spatial[1])}
        rows.append(row)
        if log is not None:
            log.append(row)
        state.iteration = it
        if checkpoint_cb is not None:
            last = it == config.iterations
            if last or (config.checkpoint_every and it % config.checkpoint_every == 0):
                checkpoint_cb(state)
    return rows, state


def train_dense(config: TrainConfig, model, flow: FlowModel | None,
                images: np.ndarray, labels: np.ndarray,
                log: TrainLogWriter | None = None, state: LoopState | None = None,
                checkpoint_cb=None) -> tuple[list[dict], LoopState]:
    """Dense variant: paste one generated patch per crop, penalize pasted
    pixels toward uniformity, and fit the flow to the replaced content."""
    crop = images.shape[2]
    if flow is not None:
        if not config.paste_outliers:
            raise ValueError("dense training with a flow requires pasting")
        divisor = 2 ** flow.config.squeeze_count
        for size in config.outlier_sizes:
            if size % divisor or size >= crop:
                raise ValueError(f"outlier size {size} incompatible with squeeze factor "
                                 f"{divisor} and crop extent {crop}")
    if state is None:
        state = fresh_loop_state(config, model, flow)
    n = len(images)
    b = config.batch_size
    rows = []
    for it in range(state.iteration + 1, config.iterations + 1):
        model.params.zero_grad()
        if flow is not None:
            flow.params.zero_grad()
        idx = state.rngs["data"].integers(0, n, b)
        x, y = images[idx], labels[idx]
        lr_c = cosine_annealed_lr(state.opt_classifier, state.opt_classifier.step_count)
        size_h = size_w = 0
        if flow is not None:
            size = int(state.rngs["paste"].choice(np.asarray(config.outlier_sizes)))
            size_h = size_w = size
            z = state.rngs["latent"].standard_normal((b, flow.latent_dim((size, size)))).astype(flow.dtype)
            x_ood = flow.inverse_t(Tensor(z), (size, size))
            if flow.config.dequant_levels:
                x_ood = _clamp01(x_ood)
            tops = state.rngs["paste"].integers(0, crop - size + 1, b)
            lefts = state.rngs["paste"].integers(0, crop - size + 1, b)
            base = np.asarray(x, dtype=model.dtype)
            x_in = ad.overlay(base, x_ood, tops, lefts)
            s = np.zeros((b, crop, crop), dtype=np.int64)
            replaced = np.empty((b, images.shape[1], size, size), dtype=images.dtype)
            for i, (t0, l0) in enumerate(zip(tops, lefts)):
                s[i, t0:t0 + size, l0:l0 + size] = 1
                replaced[i] = x[i, :, t0:t0 + size, l0:l0 + size]
        else:
            x_in = np.asarray(x, dtype=model.dtype)
            s = np.zeros((b, crop, crop), dtype=np.int64)
            replaced = None
        parts = dense_openset_loss(model, x_in, y, s, config.lam)
        loss_cls = float(parts.total.data)
        _check_finite(loss_cls, it, "segmentation loss")
        parts.total.backward()
        adam_step(model.params, state.opt_classifier)
        if flow is not None:
            loss_flow = _flow_step(flow, state, replaced, it)
            lr_f = state.opt_flow.lr
        else:
            loss_flow, lr_f = 0.0, 0.0
        row = {"iteration": it, "loss_cls": loss_cls, "ce_term": parts.ce,
               "kl_term": parts.kl, "loss_flow": loss_flow, "lr_classifier": lr_c,
               "lr_flow": lr_f, "outlier_h": size_h, "outlier_w": size_w}
        rows.append(row)
        if log is not None:
            log.append(row)
        state.iteration = it
        if checkpoint_cb is not None:
            last = it == config.iterations
            if last or (config.checkpoint_every and it % config.checkpoint_every == 0):
                checkpoint_cb(state)
    return rows, state
