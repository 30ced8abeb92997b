"""Synthetic two-window chest images, patchification and random masking.

Every image is a latent "anatomy" field in Hounsfield-like units (air, body,
two lungs, a few solid nodules, smooth texture) pushed through a display
window ``clamp((x - center + width/2) / width, 0, 1)``. Two domains that share
the generator seed share anatomy and differ only in the window, which is the
whole point of the two-domain setup.

Pixel values are quantised to multiples of 1/65535 so that a 16-bit PNG
export followed by an import reproduces the in-memory arrays exactly.

Patch layout convention (checkpoints depend on it): patch ``k`` is the k-th
V x V block in raster order (row-major over the patch grid) and is flattened
row-major with the channel index varying fastest, i.e. ``(V, V, C)`` order.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import InvalidArgument

log = logging.getLogger(__name__)

QUANT = 65535
LABEL_RULES = ("none", "blob_count_parity")


@dataclass(frozen=True)
class DomainSpec:
    window_center: float
    window_width: float
    texture_seed_scale: float = 20.0
    label_rule: str = "none"
    name: str = ""

    def __post_init__(self):
        if not self.window_width > 0:
            raise InvalidArgument(f"window_width must be > 0, got {self.window_width}")
        if self.label_rule not in LABEL_RULES:
            raise InvalidArgument(f"unknown label_rule {self.label_rule!r}")

    def window(self, latent):
        c, w = self.window_center, self.window_width
        return np.clip((latent - c + w / 2.0) / w, 0.0, 1.0)


# Mediastinal-like and lung-like windows on the same latent anatomy, plus a
# labelled third window used only for fine-tuning and evaluation.
MEDIASTINAL = DomainSpec(40.0, 400.0, 20.0, "none", "mediastinal")
LUNG = DomainSpec(-600.0, 1500.0, 30.0, "none", "lung")
FINETUNE = DomainSpec(-300.0, 1000.0, 25.0, "blob_count_parity", "finetune")


@dataclass
class ImageBatch:
    """S x C x H x W intensities in [0, 1] from a single domain."""

    data: torch.Tensor
    domain_id: int
    sample_ids: list

    def __post_init__(self):
        if self.data.dim() != 4:
            raise InvalidArgument(f"expected S x C x H x W, got shape {tuple(self.data.shape)}")
        if len(self.sample_ids) != self.data.shape[0]:
            raise InvalidArgument("sample_ids length does not match batch size")

    def __len__(self):
        return self.data.shape[0]


@dataclass
class DomainDataset:
    images: np.ndarray  # N x C x H x W float32
    sample_ids: np.ndarray
    labels: np.ndarray  # -1 when the domain carries no labels
    domain_id: int
    seed: int
    spec: DomainSpec | None = None

    def __len__(self):
        return len(self.sample_ids)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return DomainDataset(self.images[idx], self.sample_ids[idx], self.labels[idx],
                             self.domain_id, self.seed, self.spec)

    def index_of(self, sample_ids):
        lookup = {int(s): i for i, s in enumerate(self.sample_ids)}
        try:
            return np.array([lookup[int(s)] for s in sample_ids], dtype=np.int64)
        except KeyError as exc:
            raise InvalidArgument(f"sample_id {exc.args[0]} not in dataset") from None

    def batch(self, indices, dtype=torch.float32):
        idx = np.asarray(indices, dtype=np.int64)
        data = torch.from_numpy(self.images[idx]).to(dtype)
        return ImageBatch(data, self.domain_id, [int(s) for s in self.sample_ids[idx]])


def concat_datasets(parts, domain_id=-1):
    """Stack datasets into one; sample ids are re-numbered to stay unique."""
    images = np.concatenate([p.images for p in parts])
    labels = np.concatenate([p.labels for p in parts])
    return DomainDataset(images, np.arange(len(images), dtype=np.int64), labels, domain_id,
                         parts[0].seed if parts else 0)


# ---------------------------------------------------------------------------
# generation


def _image_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _latent_anatomy(rng, H, W, blob_range):
    """Return (texture-free latent field, smooth unit texture, blob count)."""
    ys = (np.arange(H) + 0.5) / H * 2 - 1
    xs = (np.arange(W) + 0.5) / W * 2 - 1
    yy, xx = np.meshgrid(ys, xs, indexing="ij")

    field_ = np.full((H, W), -1000.0)
    bx, by = rng.uniform(0.8, 0.95), rng.uniform(0.65, 0.8)
    body = (xx / bx) ** 2 + (yy / by) ** 2 <= 1.0
    field_[body] = 40.0 + 30.0 * yy[body]

    lungs = []
    for side in (-1, 1):
        cx = side * rng.uniform(0.38, 0.46)
        cy = rng.uniform(-0.08, 0.08)
        ax, ay = rng.uniform(0.24, 0.32), rng.uniform(0.42, 0.55)
        inside = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0
        field_[inside & body] = -760.0 + 40.0 * yy[inside & body]
        lungs.append((cx, cy, ax, ay))

    count = int(rng.integers(blob_range[0], blob_range[1] + 1))
    for _ in range(count):
        cx, cy, ax, ay = lungs[int(rng.integers(2))]
        t, rad = rng.uniform(0, 2 * np.pi), 0.55 * np.sqrt(rng.uniform())
        px, py = cx + rad * ax * np.cos(t), cy + rad * ay * np.sin(t)
        sigma = rng.uniform(0.14, 0.22)
        amp = rng.uniform(350.0, 550.0)
        field_ += amp * np.exp(-((xx - px) ** 2 + (yy - py) ** 2) / (2 * sigma ** 2))

    noise = rng.standard_normal((H, W))
    # 3x3 box blur keeps the texture spatially correlated like tissue
    padded = np.pad(noise, 1, mode="reflect")
    texture = sum(padded[i:i + H, j:j + W] for i in range(3) for j in range(3)) / 3.0
    return field_, texture, count


def generate_domain_dataset(spec, count, image_size=(32, 32), seed=0, *, channels=1,
                            domain_id=0, blob_range=(1, 2)):
    """Deterministically render ``count`` images of one domain.

    Image ``i`` depends only on ``(seed, i)`` and the spec, so generation is
    reproducible regardless of how it is split across workers.
    """
    H, W = (int(v) for v in image_size)
    if H <= 0 or W <= 0:
        raise InvalidArgument(f"image_size must be positive, got {image_size}")
    if H < 8 or W < 8:
        raise InvalidArgument(f"image_size must be at least 8 x 8, got {image_size}")
    if count < 0:
        raise InvalidArgument(f"count must be >= 0, got {count}")
    if not 0 <= blob_range[0] <= blob_range[1]:
        raise InvalidArgument(f"invalid blob_range {blob_range}")

    images = np.zeros((count, channels, H, W), dtype=np.float32)
    labels = np.full(count, -1, dtype=np.int64)
    for i in range(count):
        latent, texture, blobs = _latent_anatomy(_image_rng(seed, i), H, W, blob_range)
        pix = spec.window(latent + spec.texture_seed_scale * texture)
        pix = np.round(pix * QUANT) / QUANT
        images[i] = pix[None].astype(np.float32)
        if spec.label_rule == "blob_count_parity":
            labels[i] = blobs % 2
    return DomainDataset(images, np.arange(count, dtype=np.int64), labels, domain_id, seed, spec)


# ---------------------------------------------------------------------------
# patches and masks


@dataclass
class PatchGrid:
    V: int
    n: int
    patches: object  # n x (V*V*C), numpy or torch
    image_shape: tuple  # (C, H, W)


def _check_divisible(H, W, V):
    if V <= 0 or H % V or W % V:
        raise InvalidArgument(f"image {H}x{W} is not divisible into {V}x{V} patches")


def patchify_batch(x, V):
    """S x C x H x W -> S x n x (V*V*C) in raster, channel-last order."""
    S, C, H, W = x.shape
    _check_divisible(H, W, V)
    h, w = H // V, W // V
    x = x.reshape(S, C, h, V, w, V)
    axes = (0, 2, 4, 3, 5, 1)
    x = x.permute(*axes) if isinstance(x, torch.Tensor) else np.transpose(x, axes)
    return x.reshape(S, h * w, V * V * C)


def unpatchify_batch(p, V, image_shape):
    C, H, W = image_shape
    _check_divisible(H, W, V)
    h, w = H // V, W // V
    S = p.shape[0]
    x = p.reshape(S, h, w, V, V, C)
    axes = (0, 5, 1, 3, 2, 4)
    x = x.permute(*axes) if isinstance(x, torch.Tensor) else np.transpose(x, axes)
    return x.reshape(S, C, H, W)


def patchify(image, V):
    """Split one C x H x W image into its patch grid."""
    if image.ndim != 3:
        raise InvalidArgument("patchify expects a single C x H x W image")
    patches = patchify_batch(image[None], V)[0]
    return PatchGrid(V, patches.shape[0], patches, tuple(image.shape))


def unpatchify(grid):
    return unpatchify_batch(grid.patches[None], grid.V, grid.image_shape)[0]


@dataclass
class MaskSpec:
    n: int
    r: float
    m: int
    masked_indices: np.ndarray = field(repr=False)

    @property
    def visible_indices(self):
        return np.setdiff1d(np.arange(self.n), self.masked_indices)


def masked_count(n, r):
    if not 0.0 <= r <= 1.0:
        raise InvalidArgument(f"mask ratio must lie in [0, 1], got {r}")
    # small epsilon so that e.g. 16 * 0.75 never floors to 11 from rounding noise
    return min(n, int(math.floor(n * r + 1e-9)))


def sample_mask(n, r, seed):
    m = masked_count(n, r)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=m, replace=False)) if m else np.zeros(0, dtype=np.int64)
    return MaskSpec(n, r, m, idx.astype(np.int64))


def sample_batch_masks(S, n, r, generator=None):
    """Independent uniform masks for a batch as an S x m tensor of sorted indices."""
    m = masked_count(n, r)
    noise = torch.rand(S, n, generator=generator)
    idx = torch.argsort(noise, dim=1)[:, :m]
    return torch.sort(idx, dim=1).values


def stack_masks(masks):
    ms = {mk.m for mk in masks}
    if len(ms) > 1:
        raise InvalidArgument("all masks in a batch must have the same masked count")
    return torch.as_tensor(np.stack([mk.masked_indices for mk in masks]), dtype=torch.long)


# ---------------------------------------------------------------------------
# export / import


def export_dataset(ds, out_dir):
    """Write 16-bit grayscale PNGs plus ``manifest.jsonl`` (one record per image)."""
    out = Path(out_dir)
    if ds.images.shape[1] != 1 and len(ds):
        raise InvalidArgument("only single-channel datasets can be exported as PNG")
    (out / "images").mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.jsonl", "w") as fh:
        for img, sid, lab in zip(ds.images, ds.sample_ids, ds.labels):
            name = f"images/{int(sid):06d}.png"
            q = np.round(img[0].astype(np.float64) * QUANT).astype(np.uint16)
            Image.fromarray(q).save(out / name)
            rec = {"sample_id": int(sid), "domain_id": ds.domain_id, "label": int(lab),
                   "seed": ds.seed, "file": name}
            fh.write(json.dumps(rec) + "\n")
    info = {"count": len(ds), "image_shape": list(ds.image_shape) if len(ds) else None,
            "spec": asdict(ds.spec) if ds.spec else None}
    (out / "domain.json").write_text(json.dumps(info, indent=1) + "\n")
    return out


def read_manifest(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_dataset(in_dir):
    root = Path(in_dir)
    records = read_manifest(root / "manifest.jsonl")
    spec = None
    if (root / "domain.json").exists():
        raw = json.loads((root / "domain.json").read_text()).get("spec")
        spec = DomainSpec(**raw) if raw else None
    if not records:
        return DomainDataset(np.zeros((0, 1, 8, 8), np.float32), np.zeros(0, np.int64),
                             np.zeros(0, np.int64), 0, 0, spec)
    imgs = [np.asarray(Image.open(root / r["file"]), dtype=np.float64) / QUANT for r in records]
    images = np.stack(imgs)[:, None].astype(np.float32)
    return DomainDataset(images,
                         np.array([r["sample_id"] for r in records], dtype=np.int64),
                         np.array([r["label"] for r in records], dtype=np.int64),
                         int(records[0]["domain_id"]), int(records[0]["seed"]), spec)
