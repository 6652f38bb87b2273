"""Procedural desk-scale datasets.

Image-wide experiments run on labelled 2-D point sets (Gaussian mixtures or
two moons) with a held-out outlier region sampled from an annulus around
the data. Dense experiments run on 64x64 "shapes world" scenes: a textured
background plus a few axis-aligned textured rectangles, with exact label
maps. Evaluation scenes additionally contain one object drawn from a
held-out outlier texture bank, masked for metrics and labelled ignore.

Every generator is a pure function of (seed, spec); corpora are
bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensorio

IGNORE_LABEL = 255


# -- 2-D point sets -----------------------------------------------------------


@dataclass(frozen=True)
class GaussianMixtureSpec:
    means: tuple[tuple[float, float], ...]
    covariances: tuple[tuple[tuple[float, float], tuple[float, float]], ...]

    @property
    def num_classes(self) -> int:
        return len(self.means)

    @staticmethod
    def symmetric_pair(distance: float = 2.0, sigma: float = 0.5) -> "GaussianMixtureSpec":
        cov = ((sigma ** 2, 0.0), (0.0, sigma ** 2))
        return GaussianMixtureSpec(means=((-distance, 0.0), (distance, 0.0)),
                                   covariances=(cov, cov))


@dataclass(frozen=True)
class TwoMoonsSpec:
    noise_sigma: float = 0.1
    radius: float = 2.0

    @property
    def num_classes(self) -> int:
        return 2


@dataclass
class PointDataset:
    points: np.ndarray  # [N, 2]
    labels: np.ndarray  # [N] in [0, C)
    num_classes: int


def _class_counts(n: int, c: int) -> np.ndarray:
    counts = np.full(c, n // c, dtype=np.int64)
    counts[: n % c] += 1
    return counts


def gen_point_dataset(spec, n: int, seed: int) -> PointDataset:
    """Class-balanced (within one point) labelled sample, deterministic under seed."""
    c = spec.num_classes
    if n < c:
        raise ValueError(f"need at least {c} points to cover every class")
    rng = np.random.default_rng(seed)
    counts = _class_counts(n, c)
    points = []
    labels = []
    if isinstance(spec, GaussianMixtureSpec):
        for k, count in enumerate(counts):
            cov = np.asarray(spec.covariances[k], dtype=np.float64)
            try:
                chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError as err:
                raise ValueError(f"degenerate covariance for class {k}") from err
            raw = rng.standard_normal((count, 2))
            points.append(np.asarray(spec.means[k]) + raw @ chol.T)
            labels.append(np.full(count, k, dtype=np.int64))
    elif isinstance(spec, TwoMoonsSpec):
        r = spec.radius
        for k, count in enumerate(counts):
            phi = rng.uniform(0.0, np.pi, count)
            if k == 0:
                base = np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1)
            else:
                base = np.stack([r - r * np.cos(phi), -r * np.sin(phi) + r / 2.0], axis=1)
            base += rng.standard_normal((count, 2)) * spec.noise_sigma
            points.append(base)
            labels.append(np.full(count, k, dtype=np.int64))
    else:
        raise TypeError(f"unknown point spec {type(spec).__name__}")
    points = np.concatenate(points, axis=0)
    labels = np.concatenate(labels, axis=0)
    order = rng.permutation(n)
    return PointDataset(points[order], labels[order], c)


def gen_annulus_outliers(n: int, seed: int, center=(0.0, 0.0),
                         r_min: float = 3.5, r_max: float = 5.0) -> np.ndarray:
    """Uniform sample from an annulus: the held-out outlier region."""
    if not (0.0 <= r_min < r_max):
        raise ValueError("need 0 <= r_min < r_max")
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    radius = np.sqrt(rng.uniform(r_min ** 2, r_max ** 2, n))
    pts = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    return pts + np.asarray(center, dtype=np.float64)


# -- textured scenes ------------------------------------------------------------


@dataclass(frozen=True)
class TextureSpec:
    base_color: tuple[float, float, float]
    noise: float = 0.03
    stripes: tuple[str, int, tuple[float, float, float]] | None = None  # (orientation, period, color)


@dataclass(frozen=True)
class SceneLayout:
    size: int = 64
    min_shapes: int = 2
    max_shapes: int = 5
    min_extent: int = 12
    max_extent: int = 36


def default_inlier_bank() -> tuple[TextureSpec, ...]:
    return (
        TextureSpec((0.20, 0.32, 0.55)),
        TextureSpec((0.25, 0.55, 0.25), stripes=("h", 6, (0.15, 0.42, 0.15))),
        TextureSpec((0.62, 0.30, 0.22)),
        TextureSpec((0.55, 0.52, 0.48), stripes=("v", 8, (0.42, 0.40, 0.36))),
        TextureSpec((0.75, 0.68, 0.25)),
    )


def default_outlier_bank() -> tuple[TextureSpec, ...]:
    return (
        TextureSpec((0.78, 0.22, 0.70)),
        TextureSpec((0.18, 0.72, 0.74), stripes=("v", 4, (0.10, 0.50, 0.55))),
        TextureSpec((0.88, 0.48, 0.10), stripes=("h", 5, (0.95, 0.70, 0.20))),
    )


def _render_texture(rng: np.random.Generator, texture: TextureSpec, h: int, w: int) -> np.ndarray:
    img = np.empty((3, h, w), dtype=np.float64)
    img[:] = np.asarray(texture.base_color).reshape(3, 1, 1)
    if texture.stripes is not None:
        orientation, period, color = texture.stripes
        coord = np.arange(h if orientation == "h" else w)
        band = (coord // max(period // 2, 1)) % 2 == 1
        color = np.asarray(color).reshape(3, 1)
        if orientation == "h":
            img[:, band, :] = color[:, :, None]
        else:
            img[:, :, band] = color[:, None, :]
    img += rng.standard_normal((3, h, w)) * texture.noise
    img = np.clip(img, 0.0, 1.0)
    # quantize to 8-bit steps so the flow sees properly discretized data
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


def gen_scene(seed: int, bank: tuple[TextureSpec, ...], layout: SceneLayout = SceneLayout()):
    """One inlier scene: (image [3,H,W] in [0,1], label map [H,W])."""
    if not bank:
        raise ValueError("texture bank is empty")
    rng = np.random.default_rng(seed)
    size = layout.size
    c = len(bank)
    background = int(rng.integers(c))
    image = _render_texture(rng, bank[background], size, size)
    labels = np.full((size, size), background, dtype=np.int64)
    for _ in range(int(rng.integers(layout.min_shapes, layout.max_shapes + 1))):
        cls = int(rng.integers(c))
        h = int(rng.integers(layout.min_extent, layout.max_extent + 1))
        w = int(rng.integers(layout.min_extent, layout.max_extent + 1))
        top = int(rng.integers(0, size - h + 1))
        left = int(rng.integers(0, size - w + 1))
        image[:, top:top + h, left:left + w] = _render_texture(rng, bank[cls], h, w)
        labels[top:top + h, left:left + w] = cls
    return image, labels


def gen_eval_scene_with_outlier(seed: int, inlier_bank, outlier_bank,
                                layout: SceneLayout = SceneLayout()):
    """Inlier scene occluded by one held-out-texture object.

    Returns (image, label map with the object marked ignore, binary outlier
    mask covering exactly the object).
    """
    if set(inlier_bank) & set(outlier_bank):
        raise ValueError("outlier bank shares textures with the inlier bank")
    if not outlier_bank:
        raise ValueError("outlier bank is empty")
    image, labels = gen_scene(seed, inlier_bank, layout)
    rng = np.random.default_rng((seed, 7919))  # distinct stream from the base scene
    size = layout.size
    # extents keep the outlier share of the scene within the 0.5-8% band
    lo = max(int(np.ceil(np.sqrt(0.005) * size)), 2)
    hi = int(np.floor(np.sqrt(0.08) * size / 1.0))
    h = int(rng.integers(lo, hi + 1))
    w_lo = max(lo, int(np.ceil(0.005 * size * size / h)))
    w_hi = min(hi, int(np.floor(0.08 * size * size / h)))
    w = int(rng.integers(w_lo, w_hi + 1))
    top = int(rng.integers(0, size - h + 1))
    left = int(rng.integers(0, size - w + 1))
    texture = outlier_bank[int(rng.integers(len(outlier_bank)))]
    image = image.copy()
    image[:, top:top + h, left:left + w] = _render_texture(rng, texture, h, w)
    labels = labels.copy()
    labels[top:top + h, left:left + w] = IGNORE_LABEL
    mask = np.zeros((size, size), dtype=np.int64)
    mask[top:top + h, left:left + w] = 1
    return image, labels, mask


def gen_scene_corpus(n: int, seed: int, bank, layout: SceneLayout = SceneLayout()):
    images = np.empty((n, 3, layout.size, layout.size), dtype=np.float32)
    labels = np.empty((n, layout.size, layout.size), dtype=np.int64)
    for i in range(n):
        images[i], labels[i] = gen_scene(seed + i, bank, layout)
    return images, labels


def gen_eval_corpus(n: int, seed: int, inlier_bank, outlier_bank,
                    layout: SceneLayout = SceneLayout()):
    images = np.empty((n, 3, layout.size, layout.size), dtype=np.float32)
    labels = np.empty((n, layout.size, layout.size), dtype=np.int64)
    masks = np.empty((n, layout.size, layout.size), dtype=np.int64)
    for i in range(n):
        images[i], labels[i], masks[i] = gen_eval_scene_with_outlier(
            seed + i, inlier_bank, outlier_bank, layout)
    return images, labels, masks


# -- corpus storage --------------------------------------------------------------


@dataclass
class Corpus:
    kind: str  # "points" | "scenes"
    manifest: dict
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)


def _write_manifest(path: Path, manifest: dict) -> None:
    lines = [f"{key} = {json.dumps(value)}" for key, value in sorted(manifest.items())]
    path.write_text("\n".join(lines) + "\n")


def _read_manifest(path: Path) -> dict:
    manifest = {}
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        manifest[key.strip()] = json.loads(value.strip())
    return manifest


def save_point_corpus(root, train: PointDataset, eval_in: PointDataset,
                      eval_out: np.ndarray, manifest: dict) -> None:
    root = Path(root)
    for split in ("train", "eval"):
        (root / split).mkdir(parents=True, exist_ok=True)
    tensorio.write_tensor_map(root / "train" / "points.bin", train.points)
    tensorio.write_tensor_map(root / "train" / "labels.bin", train.labels.astype(np.float32))
    tensorio.write_tensor_map(root / "eval" / "points.bin", eval_in.points)
    tensorio.write_tensor_map(root / "eval" / "labels.bin", eval_in.labels.astype(np.float32))
    tensorio.write_tensor_map(root / "eval" / "outliers.bin", eval_out)
    manifest = dict(manifest, kind="points", num_classes=train.num_classes)
    _write_manifest(root / "manifest.txt", manifest)


def save_scene_corpus(root, train_images, train_labels, eval_images, eval_labels,
                      eval_masks, manifest: dict) -> None:
    root = Path(root)
    for split in ("train", "eval"):
        (root / split).mkdir(parents=True, exist_ok=True)
    tensorio.write_tensor_map(root / "train" / "images.bin", train_images)
    tensorio.write_tensor_map(root / "train" / "labels.bin", train_labels.astype(np.float32))
    tensorio.write_tensor_map(root / "eval" / "images.bin", eval_images)
    tensorio.write_tensor_map(root / "eval" / "labels.bin", eval_labels.astype(np.float32))
    tensorio.write_tensor_map(root / "eval" / "masks.bin", eval_masks.astype(np.float32))
    _write_manifest(root / "manifest.txt", dict(manifest, kind="scenes"))


def load_corpus(root) -> Corpus:
    root = Path(root)
    manifest = _read_manifest(root / "manifest.txt")
    kind = manifest["kind"]
    corpus = Corpus(kind=kind, manifest=manifest)
    if kind == "points":
        tp, _ = tensorio.read_tensor_map(root / "train" / "points.bin")
        tl, _ = tensorio.read_tensor_map(root / "train" / "labels.bin")
        ep, _ = tensorio.read_tensor_map(root / "eval" / "points.bin")
        el, _ = tensorio.read_tensor_map(root / "eval" / "labels.bin")
        eo, _ = tensorio.read_tensor_map(root / "eval" / "outliers.bin")
        corpus.train = {"points": tp[:, :, 0, 0], "labels": tl.reshape(len(tl)).astype(np.int64)}
        corpus.eval = {"points": ep[:, :, 0, 0], "labels": el.reshape(len(el)).astype(np.int64),
                       "outliers": eo[:, :, 0, 0]}
    elif kind == "scenes":
        ti, _ = tensorio.read_tensor_map(root / "train" / "images.bin")
        tl, _ = tensorio.read_tensor_map(root / "train" / "labels.bin")
        ei, _ = tensorio.read_tensor_map(root / "eval" / "images.bin")
        el, _ = tensorio.read_tensor_map(root / "eval" / "labels.bin")
        em, _ = tensorio.read_tensor_map(root / "eval" / "masks.bin")
        corpus.train = {"images": ti, "labels": tl[:, 0].astype(np.int64)}
        corpus.eval = {"images": ei, "labels": el[:, 0].astype(np.int64),
                       "masks": em[:, 0].astype(np.int64)}
    else:
        raise ValueError(f"unknown corpus kind {kind!r}")
    return corpus


def texture_bank_to_json(bank) -> list:
    return [asdict(t) for t in bank]


def texture_bank_from_json(data) -> tuple[TextureSpec, ...]:
    out = []
    for item in data:
        stripes = item.get("stripes")
        if stripes is not None:
            stripes = (stripes[0], stripes[1], tuple(stripes[2]))
        out.append(TextureSpec(tuple(item["base_color"]), item["noise"], stripes))
    return tuple(out)
