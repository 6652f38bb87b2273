"""Coupling-flow bijection with exact log-likelihood and any-size sampling.

The model is a stack of affine coupling layers with alternating binary
masks, interleaved with space-to-channel squeezes. Coupling nets are small
residual convolutions, so one trained model maps latents of any divisible
spatial size back to data space. For 8-bit-style data the bijection starts
with a logit pre-transform on [0, 1) inputs; 2-D point data runs directly
in data space with 1x1 convolutions (i.e. fully connected coupling nets).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .checkpoint import load_checkpoint, save_checkpoint

CHECKER_EVEN = "checkerboard-even"
CHECKER_ODD = "checkerboard-odd"
CHANNEL_FIRST = "channel-first-half"
CHANNEL_SECOND = "channel-second-half"
SQUEEZE = "squeeze"

_MASK_COMPLEMENT = {
    CHECKER_EVEN: CHECKER_ODD,
    CHECKER_ODD: CHECKER_EVEN,
    CHANNEL_FIRST: CHANNEL_SECOND,
    CHANNEL_SECOND: CHANNEL_FIRST,
}


@dataclass(frozen=True)
class FlowConfig:
    in_channels: int
    res_blocks: int = 3
    hidden_channels: int = 32
    squeeze_count: int = 2
    couplings_per_scale: int = 3
    dequant_levels: int = 0      # 256 for 8-bit data, 0 for continuous data
    logit_alpha: float = 0.05    # boundary margin of the [0,1) pre-transform
    point_mode: bool = False     # flat feature vectors, no spatial structure

    def __post_init__(self):
        if self.in_channels < 1 or self.res_blocks < 1 or self.hidden_channels < 1:
            raise ValueError("channel / block counts must be positive")
        if self.squeeze_count < 0 or self.dequant_levels < 0:
            raise ValueError("squeeze count and dequantization levels must be non-negative")
        if self.couplings_per_scale < 2:
            raise ValueError("need at least two couplings per scale so every coordinate is transformed")
        if self.point_mode:
            if self.squeeze_count != 0:
                raise ValueError("point mode has no spatial structure to squeeze")
            if self.dequant_levels != 0:
                raise ValueError("point mode is continuous; disable dequantization")
            if self.in_channels < 2:
                raise ValueError("point mode needs at least two coordinates to couple")
        if self.dequant_levels and not (0.0 < self.logit_alpha < 0.5):
            raise ValueError("logit_alpha must lie in (0, 0.5)")


def build_mask_schedule(config: FlowConfig) -> list[str]:
    """Coupling mask kinds interleaved with squeeze markers.

    Images: per scale, alternating checkerboard couplings, a squeeze, then
    alternating channel-half couplings; the final scale runs one extra
    checkerboard group. Point data alternates channel halves only.
    """
    cps = config.couplings_per_scale
    if config.point_mode:
        kinds = [CHANNEL_FIRST, CHANNEL_SECOND]
        return [kinds[i % 2] for i in range(2 * cps + 2)]
    schedule: list[str] = []
    checker = [CHECKER_EVEN, CHECKER_ODD]
    channel = [CHANNEL_FIRST, CHANNEL_SECOND]
    for _ in range(config.squeeze_count):
        schedule.extend(checker[i % 2] for i in range(cps))
        schedule.append(SQUEEZE)
        schedule.extend(channel[i % 2] for i in range(cps))
    schedule.extend(checker[i % 2] for i in range(cps + 1))
    return schedule


_mask_cache: dict[tuple, np.ndarray] = {}


def _mask_array(kind: str, c: int, h: int, w: int, dtype) -> np.ndarray:
    key = (kind, c, h, w, np.dtype(dtype).str)
    cached = _mask_cache.get(key)
    if cached is not None:
        return cached
    if kind in (CHECKER_EVEN, CHECKER_ODD):
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        board = ((ii + jj) % 2 == 0)
        if kind == CHECKER_ODD:
            board = ~board
        mask = np.broadcast_to(board[None, None], (1, c, h, w)).astype(dtype)
    else:
        half = c // 2
        channels = np.zeros(c, dtype=bool)
        channels[:half] = True
        if kind == CHANNEL_SECOND:
            channels = ~channels
        mask = channels.astype(dtype).reshape(1, c, 1, 1)
        mask = np.broadcast_to(mask, (1, c, 1, 1)).copy()
    mask = np.ascontiguousarray(mask)
    _mask_cache[key] = mask
    return mask


def _squeeze_t(t: Tensor) -> Tensor:
    n, c, h, w = t.shape
    t = t.reshape((n, c, h // 2, 2, w // 2, 2))
    t = t.transpose(0, 1, 3, 5, 2, 4)
    return t.reshape((n, 4 * c, h // 2, w // 2))


def _unsqueeze_t(t: Tensor) -> Tensor:
    n, c4, h, w = t.shape
    c = c4 // 4
    t = t.reshape((n, c, 2, 2, h, w))
    t = t.transpose(0, 1, 4, 2, 5, 3)
    return t.reshape((n, c, 2 * h, 2 * w))


class FlowModel:
    """Parameters plus layer schedule; the latent prior is unit Gaussian."""

    def __init__(self, config: FlowConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.schedule = build_mask_schedule(config)
        self.params = ParameterSet()
        self._coupling_channels: list[int] = []
        rng = np.random.default_rng(seed)
        kernel = 1 if config.point_mode else 3
        self._kernel = kernel
        self._pad = kernel // 2
        channels = config.in_channels
        idx = 0
        for entry in self.schedule:
            if entry == SQUEEZE:
                channels *= 4
                continue
            self._add_coupling_params(idx, channels, rng)
            self._coupling_channels.append(channels)
            idx += 1

    # -- parameters ---------------------------------------------------------

    def _conv_init(self, rng, cout, cin, k):
        std = math.sqrt(2.0 / (cin * k * k))
        return (rng.standard_normal((cout, cin, k, k)) * std).astype(self.dtype)

    def _add_coupling_params(self, idx: int, c: int, rng) -> None:
        cfg = self.config
        k = self._kernel
        hid = cfg.hidden_channels
        p = self.params
        name = f"c{idx:02d}"
        p.add(f"{name}/in_w", self._conv_init(rng, hid, c, k))
        p.add(f"{name}/in_b", np.zeros(hid, self.dtype))
        for j in range(cfg.res_blocks):
            p.add(f"{name}/res{j}_w1", self._conv_init(rng, hid, hid, k))
            p.add(f"{name}/res{j}_b1", np.zeros(hid, self.dtype))
            p.add(f"{name}/res{j}_w2", self._conv_init(rng, hid, hid, k))
            p.add(f"{name}/res{j}_b2", np.zeros(hid, self.dtype))
        # zero output => identity coupling at initialization
        p.add(f"{name}/out_w", np.zeros((2 * c, hid, k, k), self.dtype))
        p.add(f"{name}/out_b", np.zeros(2 * c, self.dtype))
        p.add(f"{name}/s_scale", np.ones(c, self.dtype))

    # -- coupling net ---------------------------------------------------------

    def _coupling_net(self, xm: Tensor, idx: int, c: int) -> tuple[Tensor, Tensor]:
        p = self.params
        name = f"c{idx:02d}"
        pad = self._pad
        h = ad.elu(ad.conv2d(xm, p[f"{name}/in_w"], p[f"{name}/in_b"], padding=pad))
        for j in range(self.config.res_blocks):
            inner = ad.conv2d(ad.elu(h), p[f"{name}/res{j}_w1"], p[f"{name}/res{j}_b1"], padding=pad)
            inner = ad.conv2d(ad.elu(inner), p[f"{name}/res{j}_w2"], p[f"{name}/res{j}_b2"], padding=pad)
            h = h + inner
        out = ad.conv2d(h, p[f"{name}/out_w"], p[f"{name}/out_b"], padding=pad)
        s_raw = out[:, :c]
        t = out[:, c:]
        scale = p[f"{name}/s_scale"].reshape((1, c, 1, 1))
        s = ad.tanh(s_raw) * scale  # bounded scale keeps log-dets from exploding
        return s, t

    def _coupling(self, x: Tensor, idx: int, kind: str, inverse: bool) -> tuple[Tensor, Tensor]:
        c = self._coupling_channels[idx]
        n, _, h, w = x.shape
        mask = _mask_array(kind, c, h, w, self.dtype)
        inv_mask = (1.0 - mask)
        xm = x * Tensor(mask)
        s, t = self._coupling_net(xm, idx, c)
        inv_t = Tensor(inv_mask)
        if inverse:
            y = xm + inv_t * ((x - t) * ad.exp(-s))
            log_det = -(s * inv_t).sum(axis=(1, 2, 3))
        else:
            y = xm + inv_t * (x * ad.exp(s) + t)
            log_det = (s * inv_t).sum(axis=(1, 2, 3))
        return y, log_det

    # -- bijection -------------------------------------------------------------

    def _to_internal(self, x: Tensor) -> Tensor:
        if self.config.point_mode:
            n, d = x.shape
            return x.reshape((n, d, 1, 1))
        return x

    def forward_t(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Data to latent; returns (z flattened per sample, log_det per sample)."""
        cfg = self.config
        t = self._to_internal(x)
        n = t.shape[0]
        log_det = Tensor(np.zeros(n, self.dtype))
        if cfg.dequant_levels:
            a = cfg.logit_alpha
            p = t * (1.0 - 2.0 * a) + a
            lp = ad.log(p)
            lq = ad.log(1.0 - p)
            dims = int(np.prod(t.shape[1:]))
            log_det = log_det + (-(lp + lq)).sum(axis=(1, 2, 3)) + dims * math.log(1.0 - 2.0 * a)
            t = lp - lq
        idx = 0
        for entry in self.schedule:
            if entry == SQUEEZE:
                t = _squeeze_t(t)
                continue
            t, ld = self._coupling(t, idx, entry, inverse=False)
            log_det = log_det + ld
            idx += 1
        z = t.reshape((n, -1))
        return z, log_det

    def inverse_t(self, z: Tensor, spatial: tuple[int, int], with_log_det: bool = False):
        """Latent back to data; exact analytic inverse of every layer."""
        cfg = self.config
        n, d = z.shape
        h, w = spatial
        s = cfg.squeeze_count
        t = z.reshape((n, cfg.in_channels * 4 ** s, h // 2 ** s, w // 2 ** s))
        log_det = Tensor(np.zeros(n, self.dtype))
        idx = len(self._coupling_channels)
        for entry in reversed(self.schedule):
            if entry == SQUEEZE:
                t = _unsqueeze_t(t)
                continue
            idx -= 1
            t, ld = self._coupling(t, idx, entry, inverse=True)
            log_det = log_det + ld
        if cfg.dequant_levels:
            a = cfg.logit_alpha
            p = ad.sigmoid(t)
            if with_log_det:
                dims = int(np.prod(t.shape[1:]))
                log_det = log_det + (ad.log(p) + ad.log(1.0 - p)).sum(axis=(1, 2, 3)) - dims * math.log(1.0 - 2.0 * a)
            t = (p - a) * (1.0 / (1.0 - 2.0 * a))
        if cfg.point_mode:
            t = t.reshape((n, d))
        if with_log_det:
            return t, log_det
        return t

    def log_likelihood_t(self, x: Tensor) -> Tensor:
        """Log-density per sample under the unit-Gaussian latent prior."""
        z, log_det = self.forward_t(x)
        d = z.shape[1]
        prior = (z * z).sum(axis=1) * (-0.5) + (-0.5 * d * math.log(2.0 * math.pi))
        return prior + log_det

    def latent_dim(self, spatial: tuple[int, int]) -> int:
        return self.config.in_channels * spatial[0] * spatial[1]


# -- public operations -------------------------------------------------------


def _check_spatial(model: FlowModel, h: int, w: int) -> None:
    divisor = 2 ** model.config.squeeze_count
    if h % divisor or w % divisor:
        raise ValueError(f"spatial extent {h}x{w} not divisible by {divisor}")


def _validate_input(model: FlowModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=model.dtype)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    if model.config.point_mode:
        if x.ndim != 2 or x.shape[1] != model.config.in_channels:
            raise ValueError(f"expected [N,{model.config.in_channels}] points, got {x.shape}")
    else:
        if x.ndim != 4 or x.shape[1] != model.config.in_channels:
            raise ValueError(f"expected [N,{model.config.in_channels},H,W] input, got {x.shape}")
        _check_spatial(model, x.shape[2], x.shape[3])
        if model.config.dequant_levels and (x.min() < 0.0 or x.max() > 1.0):
            raise ValueError("inputs to a dequantized flow must lie in [0, 1]")
    return x


def forward_transform(model: FlowModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = _validate_input(model, x)
    with ad.no_grad():
        z, log_det = model.forward_t(Tensor(x))
    return z.data, log_det.data


def _resolve_spatial(model: FlowModel, d: int, spatial) -> tuple[int, int]:
    c = model.config.in_channels
    if d % c:
        raise ValueError(f"latent size {d} incompatible with {c} channels")
    hw = d // c
    if spatial is None:
        if model.config.point_mode:
            spatial = (1, 1)
        else:
            side = math.isqrt(hw)
            if side * side != hw:
                raise ValueError("non-square latent; pass spatial=(H, W) explicitly")
            spatial = (side, side)
    h, w = spatial
    if h * w != hw:
        raise ValueError(f"latent size {d} does not match spatial {h}x{w} with {c} channels")
    _check_spatial(model, h, w)
    return h, w


def inverse_transform(model: FlowModel, z: np.ndarray, spatial=None) -> np.ndarray:
    z = np.asarray(z, dtype=model.dtype)
    if z.ndim != 2:
        raise ValueError(f"expected flattened latents [N,D], got {z.shape}")
    h, w = _resolve_spatial(model, z.shape[1], spatial)
    with ad.no_grad():
        x = model.inverse_t(Tensor(z), (h, w))
    return x.data


def inverse_transform_with_log_det(model: FlowModel, z: np.ndarray, spatial=None):
    z = np.asarray(z, dtype=model.dtype)
    h, w = _resolve_spatial(model, z.shape[1], spatial)
    with ad.no_grad():
        x, log_det = model.inverse_t(Tensor(z), (h, w), with_log_det=True)
    return x.data, log_det.data


def log_likelihood(model: FlowModel, x: np.ndarray, batch: int = 65536) -> np.ndarray:
    """Per-sample log-density; for dequantized data, density of the
    already-dequantized continuous input."""
    x = _validate_input(model, x)
    out = np.empty(x.shape[0], model.dtype)
    with ad.no_grad():
        for lo in range(0, x.shape[0], batch):
            chunk = x[lo:lo + batch]
            out[lo:lo + chunk.shape[0]] = model.log_likelihood_t(Tensor(chunk)).data
    return out


def sample(model: FlowModel, n: int, spatial=None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw latents from the unit-Gaussian prior and invert them.

    The coupling nets are convolutional, so one model samples at every
    spatial size divisible by the squeeze factor.
    """
    if rng is None:
        raise ValueError("pass an explicit rng; sampling must own its noise source")
    if model.config.point_mode:
        spatial = (1, 1)
    if spatial is None:
        raise ValueError("spatial size required for image-mode sampling")
    _check_spatial(model, spatial[0], spatial[1])
    d = model.latent_dim(spatial)
    z = rng.standard_normal((n, d)).astype(model.dtype)
    return inverse_transform(model, z, spatial)


def dequantize(x: np.ndarray, levels: int, rng: np.random.Generator) -> np.ndarray:
    """(x + u) / levels with u ~ U[0,1); output strictly inside [0, 1)."""
    x = np.asarray(x)
    if levels < 2:
        raise ValueError("need at least two quantization levels")
    if not np.all(x == np.floor(x)):
        raise ValueError("dequantize expects integer-valued input")
    if x.min() < 0 or x.max() >= levels:
        raise ValueError(f"values outside [0, {levels})")
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    u = rng.random(x.shape, dtype=np.float64).astype(dtype)
    return ((x + u) / levels).astype(dtype)


# -- persistence ---------------------------------------------------------------


def save_flow(path, model: FlowModel) -> None:
    meta = {"kind": "flow", "config": asdict(model.config), "dtype": model.dtype.str}
    save_checkpoint(path, model.params.state(), meta)


def load_flow(path) -> FlowModel:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "flow":
        raise ValueError(f"{path}: not a flow checkpoint")
    return flow_from_state(arrays, meta)


def flow_from_state(arrays: dict[str, np.ndarray], meta: dict) -> FlowModel:
    config = FlowConfig(**meta["config"])
    model = FlowModel(config, seed=0, dtype=np.dtype(meta["dtype"]))
    model.params.load_state(arrays)
    return model
