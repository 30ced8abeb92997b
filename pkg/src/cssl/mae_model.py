"""A small masked-autoencoder ViT with an explicit tokenizer / encoder / decoder split.

The three parts live in separate submodules (``tokenizer``, ``encoder``,
``decoder``) so training code can update or freeze each one independently:
continual training on replayed images updates only the first two.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .datasets import ImageBatch, patchify_batch
from .errors import CheckpointError, InvalidArgument

log = logging.getLogger(__name__)

STAGES = ("init", "stage1", "stage3", "finetuned", "diagnostic")
CHECKPOINT_FORMAT = "cssl-npz-v1"


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 1
    patch_size: int = 8
    d_enc: int = 64
    enc_layers: int = 4
    enc_heads: int = 4
    d_dec: int = 32
    dec_layers: int = 2
    dec_heads: int = 4
    mlp_ratio: float = 4.0
    pooling: str = "mean"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise InvalidArgument("image_size must be divisible by patch_size")
        if self.d_enc % self.enc_heads or self.d_dec % self.dec_heads:
            raise InvalidArgument("embedding widths must be divisible by head counts")
        if self.pooling not in ("mean", "first", "max"):
            raise InvalidArgument(f"unknown pooling {self.pooling!r}")

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels


PRESETS = {
    "tiny": ModelConfig(),
    # ViT-B encoder with the usual 8-layer, 512-wide MAE decoder on 512 x 512 inputs
    "full": ModelConfig(image_size=512, patch_size=16, d_enc=768, enc_layers=12, enc_heads=12,
                         d_dec=512, dec_layers=8, dec_heads=16),
}


class Attention(nn.Module):
    # hand-rolled so that zero-length sequences pass through without special cases
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        S, L, D = x.shape
        h = self.heads
        q, k, v = self.qkv(x).reshape(S, L, 3, h, D // h).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(D // h)
        out = att.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(S, L, D))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Tokenizer(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.proj = nn.Linear(cfg.patch_dim, cfg.d_enc)
        self.pos = nn.Parameter(torch.zeros(cfg.num_patches, cfg.d_enc))


class Encoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.blocks = nn.ModuleList(Block(cfg.d_enc, cfg.enc_heads, cfg.mlp_ratio)
                                    for _ in range(cfg.enc_layers))
        # a zero-layer encoder is the identity, so the final norm goes with the blocks
        self.norm = nn.LayerNorm(cfg.d_enc) if cfg.enc_layers else nn.Identity()

    def forward(self, x):
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class Decoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.embed = nn.Linear(cfg.d_enc, cfg.d_dec)
        self.mask_token = nn.Parameter(torch.zeros(cfg.d_dec))
        self.pos = nn.Parameter(torch.zeros(cfg.num_patches, cfg.d_dec))
        self.blocks = nn.ModuleList(Block(cfg.d_dec, cfg.dec_heads, cfg.mlp_ratio)
                                    for _ in range(cfg.dec_layers))
        self.norm = nn.LayerNorm(cfg.d_dec)
        self.pred = nn.Linear(cfg.d_dec, cfg.patch_dim)


def _visible_indices(masked, n):
    S = masked.shape[0]
    keep = torch.ones(S, n, dtype=torch.bool)
    if masked.numel():
        keep.scatter_(1, masked, False)
    return keep.nonzero()[:, 1].reshape(S, -1)


def _as_tensor(batch):
    return batch.data if isinstance(batch, ImageBatch) else batch


class MAE(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tokenizer = Tokenizer(cfg)
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self._init_weights()

    def _init_weights(self):
        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                nn.init.trunc_normal_(mod.weight, std=0.02)
                nn.init.zeros_(mod.bias)
        nn.init.trunc_normal_(self.tokenizer.pos, std=0.02)
        nn.init.trunc_normal_(self.decoder.pos, std=0.02)
        nn.init.normal_(self.decoder.mask_token, std=0.02)

    # parameter groups -----------------------------------------------------

    def tokenizer_encoder_parameters(self):
        return list(self.tokenizer.parameters()) + list(self.encoder.parameters())

    def decoder_parameters(self):
        return list(self.decoder.parameters())

    # forward pieces -------------------------------------------------------

    def patches(self, x):
        x = _as_tensor(x)
        C, H, W = x.shape[1:]
        cfg = self.cfg
        if (C, H, W) != (cfg.channels, cfg.image_size, cfg.image_size):
            raise InvalidArgument(
                f"batch shape {(C, H, W)} does not match model input "
                f"{(cfg.channels, cfg.image_size, cfg.image_size)}")
        return patchify_batch(x, cfg.patch_size)

    def _masked(self, masked, S):
        if masked is None:
            return torch.zeros(S, 0, dtype=torch.long)
        masked = torch.as_tensor(masked, dtype=torch.long)
        if masked.dim() != 2 or masked.shape[0] != S:
            raise InvalidArgument("mask must be an S x m index tensor")
        if masked.numel() and (masked.min() < 0 or masked.max() >= self.cfg.num_patches):
            raise InvalidArgument("masked index out of range")
        return masked

    def tokenize(self, x, masked=None):
        """Project the visible patches and add their positional embeddings.

        ``masked`` is an S x m tensor of masked patch indices (None for no
        masking). Returns S x (n - m) x d_enc tokens in ascending patch order.
        """
        p = self.patches(x)
        S, n, _ = p.shape
        masked = self._masked(masked, S)
        vis = _visible_indices(masked, n)
        p_vis = torch.gather(p, 1, vis.unsqueeze(-1).expand(-1, -1, p.shape[-1]))
        return self.tokenizer.proj(p_vis) + self.tokenizer.pos[vis]

    def encode(self, tokens):
        if not torch.isfinite(tokens).all():
            raise InvalidArgument("non-finite values in encoder input")
        return self.encoder(tokens)

    def decode(self, features, masked):
        """Reconstruct the masked patches: returns S x m x (V*V*C)."""
        S = features.shape[0]
        n = self.cfg.num_patches
        masked = self._masked(masked, S)
        m = masked.shape[1]
        if features.shape[1] != n - m:
            raise InvalidArgument(
                f"{features.shape[1]} feature tokens inconsistent with {m} of {n} masked")
        dec = self.decoder
        y = dec.embed(features)
        vis = _visible_indices(masked, n)
        d = y.shape[-1]
        full = dec.mask_token.expand(S, n, d).scatter(1, vis.unsqueeze(-1).expand(-1, -1, d), y)
        full = full + dec.pos
        for blk in dec.blocks:
            full = blk(full)
        out = dec.pred(dec.norm(full))
        return torch.gather(out, 1, masked.unsqueeze(-1).expand(-1, -1, out.shape[-1]))

    def features(self, x):
        """Encoder output over the full, unmasked token sequence (S x n x d_enc)."""
        return self.encode(self.tokenize(x))

    def embed_image(self, x, pooling=None):
        feats = self.features(x)
        pooling = pooling or self.cfg.pooling
        if pooling == "mean":
            return feats.mean(dim=1)
        if pooling == "first":
            return feats[:, 0]
        return feats.max(dim=1).values

    def reconstruction_loss(self, x, masked):
        """Masked-patch MSE for one batch; returns (loss, Y_m, X_m)."""
        cfg = self.cfg
        tokens = self.tokenize(x, masked)
        y = self.decode(self.encode(tokens), masked)
        p = self.patches(x).to(y.dtype)
        masked = self._masked(masked, p.shape[0])
        target = torch.gather(p, 1, masked.unsqueeze(-1).expand(-1, -1, p.shape[-1]))
        return mse_loss(y, target, masked.shape[1], cfg.patch_size, cfg.channels), y, target


def mse_loss(y_m, x_m, m, V, C):
    """||Y_m - X_m||^2 / (m V^2 C) per image, averaged over the batch.

    Returns a zero scalar when nothing is masked; callers skip the update.
    """
    if y_m.shape != x_m.shape:
        raise InvalidArgument(f"shape mismatch {tuple(y_m.shape)} vs {tuple(x_m.shape)}")
    if m == 0:
        log.debug("mse_loss called with m=0; returning 0")
        return y_m.new_zeros(())
    per_image = ((y_m - x_m) ** 2).sum(dim=(1, 2)) / (m * V * V * C)
    return per_image.mean()


def build_model(cfg: ModelConfig, seed: int = 0, dtype=torch.float32):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = MAE(cfg)
    return model.to(dtype)


# ---------------------------------------------------------------------------
# checkpoints


def params_digest(module):
    """SHA-256 over every parameter and buffer in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def params_equal(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


def save_checkpoint(module, path, stage, model_cfg=None, extra=None):
    """Write an ``.npz`` container: one little-endian array per tensor + a JSON header.

    Tensors are stored under their state-dict names; ``__meta__`` holds the
    format tag, the stage, the model config and the tensor name order.
    """
    if stage not in STAGES:
        raise InvalidArgument(f"unknown stage tag {stage!r}")
    cfg = model_cfg or module.cfg
    state = module.state_dict()
    arrays = {}
    for name, t in state.items():
        a = t.detach().cpu().numpy()
        arrays[name] = a.astype(a.dtype.newbyteorder("<"), copy=False)
    meta = {"format": CHECKPOINT_FORMAT, "stage": stage, "config": asdict(cfg),
            "tensors": list(state), "dtype": str(next(iter(state.values())).dtype),
            "extra": extra or {}}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)
    return path


def read_checkpoint(path):
    """Return (meta, {name: array}) without building a module."""
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            arrays = {k: z[k] for k in meta["tensors"]}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    return meta, arrays


def load_into(module, path, expected_cfg=None):
    meta, arrays = read_checkpoint(path)
    cfg = expected_cfg or getattr(module, "cfg", None)
    if cfg is not None and meta["config"] != asdict(cfg):
        raise CheckpointError(
            f"checkpoint config {meta['config']} does not match expected {asdict(cfg)}")
    state = module.state_dict()
    missing = set(state) - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    module.load_state_dict({k: torch.from_numpy(np.ascontiguousarray(arrays[k])) for k in state},
                           strict=True)
    return meta


def load_mae(path, expected_cfg=None):
    meta, _ = read_checkpoint(path)
    cfg = ModelConfig(**meta["config"])
    if expected_cfg is not None and cfg != expected_cfg:
        raise CheckpointError(f"checkpoint config {cfg} does not match expected {expected_cfg}")
    dtype = getattr(torch, meta["dtype"].replace("torch.", ""))
    model = build_model(cfg, dtype=dtype)
    load_into(model, path, cfg)
    return model, meta
