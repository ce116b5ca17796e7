"""A miniature pre-norm vision transformer used as the frozen backbone.

Token batches are tensors of shape ``(..., L + 1, d)``: row 0 is the class
token, rows 1..L are patch tokens in raster order of the patch grid.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor

log = logging.getLogger(__name__)

# hook(h, block) -> residual tokens with the same shape as h
AdapterHook = Callable[[Tensor, int], Tensor]


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 1
    depth: int = 3
    dim: int = 32
    heads: int = 4
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise DimensionError("image_size must be divisible by patch_size")
        if self.dim % self.heads:
            raise DimensionError("dim must be divisible by heads")
        if min(self.image_size, self.patch_size, self.channels, self.depth, self.dim, self.heads, self.mlp_ratio) < 1:
            raise DimensionError("all backbone sizes must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return asdict(self)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, L, patch*patch*C), patches in raster order."""
    b, h, w, c = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(b, gh, patch, gw, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, patch * patch * c)


def _xavier(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Backbone:
    """Patch embedding, ``depth`` pre-norm blocks and a final LayerNorm."""

    def __init__(self, config: BackboneConfig | None = None, seed: int = 0):
        self.config = config or BackboneConfig()
        self.params: dict[str, Tensor] = self._init_params(np.random.default_rng(seed))
        self.frozen = False

    def _init_params(self, rng) -> dict[str, Tensor]:
        c = self.config
        d, hidden = c.dim, c.dim * c.mlp_ratio
        p: dict[str, np.ndarray] = {
            "patch.w": _xavier(rng, c.patch_dim, d),
            "patch.b": np.zeros(d),
            "cls": rng.normal(0.0, 0.02, size=d),
            "pos": rng.normal(0.0, 0.02, size=(c.seq_len, d)),
        }
        for i in range(c.depth):
            p.update({
                f"blocks.{i}.ln1.g": np.ones(d),
                f"blocks.{i}.ln1.b": np.zeros(d),
                f"blocks.{i}.attn.qkv.w": _xavier(rng, d, 3 * d),
                f"blocks.{i}.attn.qkv.b": np.zeros(3 * d),
                f"blocks.{i}.attn.proj.w": _xavier(rng, d, d),
                f"blocks.{i}.attn.proj.b": np.zeros(d),
                f"blocks.{i}.ln2.g": np.ones(d),
                f"blocks.{i}.ln2.b": np.zeros(d),
                f"blocks.{i}.mlp.fc1.w": _xavier(rng, d, hidden),
                f"blocks.{i}.mlp.fc1.b": np.zeros(hidden),
                f"blocks.{i}.mlp.fc2.w": _xavier(rng, hidden, d),
                f"blocks.{i}.mlp.fc2.b": np.zeros(d),
            })
        p["norm.g"] = np.ones(d)
        p["norm.b"] = np.zeros(d)
        return {k: Tensor(v, requires_grad=True) for k, v in p.items()}

    # ---- state -------------------------------------------------------------
    def freeze(self) -> Backbone:
        self.frozen = True
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
        return self

    def parameters(self) -> list[Tensor]:
        return [] if self.frozen else list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"backbone.{k}": v.data for k, v in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            arr = np.asarray(state[f"backbone.{k}"], dtype=np.float64)
            if arr.shape != t.shape:
                raise DimensionError(f"{k}: checkpoint shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def copy(self) -> Backbone:
        clone = copy.copy(self)
        clone.params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return clone

    # ---- forward -----------------------------------------------------------
    def patch_embed(self, images) -> Tensor:
        """Images ``(B, H, W, C)`` or ``(H, W, C)`` to token batches ``(B, L+1, d)``."""
        c = self.config
        imgs = np.asarray(images, dtype=np.float64)
        if imgs.ndim == 3:
            imgs = imgs[None]
        if imgs.ndim != 4 or imgs.shape[1:] != (c.image_size, c.image_size, c.channels):
            raise DimensionError(
                f"expected images of shape (B, {c.image_size}, {c.image_size}, {c.channels}), got {imgs.shape}"
            )
        b = imgs.shape[0]
        p = self.params
        patches = T.matmul(patchify(imgs, c.patch_size), p["patch.w"]) + p["patch.b"]
        cls = T.reshape(p["cls"], (1, 1, c.dim)) + np.zeros((b, 1, c.dim))
        return T.concat([cls, patches], axis=1) + p["pos"]

    def attention(self, h: Tensor, i: int) -> Tensor:
        c = self.config
        p = self.params
        b, n, d = h.shape
        hd = d // c.heads
        qkv = T.matmul(h, p[f"blocks.{i}.attn.qkv.w"]) + p[f"blocks.{i}.attn.qkv.b"]
        qkv = T.transpose(T.reshape(qkv, (b, n, 3, c.heads, hd)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = T.softmax(T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(hd)), axis=-1)
        o = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (b, n, d))
        return T.matmul(o, p[f"blocks.{i}.attn.proj.w"]) + p[f"blocks.{i}.attn.proj.b"]

    def mlp(self, h: Tensor, i: int) -> Tensor:
        p = self.params
        z = T.gelu(T.matmul(h, p[f"blocks.{i}.mlp.fc1.w"]) + p[f"blocks.{i}.mlp.fc1.b"])
        return T.matmul(z, p[f"blocks.{i}.mlp.fc2.w"]) + p[f"blocks.{i}.mlp.fc2.b"]

    def block_forward(self, x: Tensor, block: int, adapter_hook: AdapterHook | None = None) -> Tensor:
        """``x' = x + MHSA(LN(x))``; ``out = x' + MLP(LN(x')) + hook(LN(x'))``."""
        if not 0 <= block < self.config.depth:
            raise DimensionError(f"block {block} out of range for depth {self.config.depth}")
        p = self.params
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        h = T.layer_norm(x, p[f"blocks.{block}.ln1.g"], p[f"blocks.{block}.ln1.b"])
        x = x + self.attention(h, block)
        h = T.layer_norm(x, p[f"blocks.{block}.ln2.g"], p[f"blocks.{block}.ln2.b"])
        out = x + self.mlp(h, block)
        if adapter_hook is not None:
            out = out + adapter_hook(h, block)
        if squeeze:
            out = T.reshape(out, out.shape[1:])
        return out

    def forward_tokens(self, images, adapter_hook: AdapterHook | None = None) -> Tensor:
        """Final post-norm token batch ``(B, L+1, d)``."""
        x = self.patch_embed(images)
        for i in range(self.config.depth):
            x = self.block_forward(x, i, adapter_hook)
        return T.layer_norm(x, self.params["norm.g"], self.params["norm.b"])


def extract_features(backbone: Backbone, images, adapter_bank=None, task_count: int | None = None):
    """Return ``(class_feature (B, d), patch_features (B, L, d))`` after the final norm.

    ``adapter_bank`` may be None or empty for pure backbone features;
    ``task_count`` defaults to every task in the bank.
    """
    hook = None
    if adapter_bank is not None and adapter_bank.num_tasks:
        hook = adapter_bank.hook(task_count)
    tokens = backbone.forward_tokens(images, hook)
    return tokens[:, 0, :], tokens[:, 1:, :]


def pretrain_backbone(
    config: BackboneConfig,
    images: np.ndarray,
    labels: np.ndarray,
    *,
    epochs: int = 15,
    batch_size: int = 64,
    lr: float = 2e-3,
    seed: int = 0,
) -> Backbone:
    """Supervised pre-training on a held-out base class set; returns a frozen backbone."""
    from .optim import Adam

    rng = np.random.default_rng(seed)
    backbone = Backbone(config, seed=seed)
    classes = np.unique(labels)
    remap = {c: i for i, c in enumerate(classes)}
    y = np.array([remap[c] for c in labels])
    head_w = Tensor(rng.normal(0.0, 0.02, size=(config.dim, len(classes))), requires_grad=True)
    head_b = Tensor(np.zeros(len(classes)), requires_grad=True)
    opt = Adam(backbone.parameters() + [head_w, head_b], lr=lr)
    n = len(images)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            tokens = backbone.forward_tokens(images[idx])
            logits = T.matmul(tokens[:, 0, :], head_w) + head_b
            loss = -T.getitem(T.log_softmax(logits, axis=-1), (np.arange(len(idx)), y[idx])).mean()
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        log.info("pretrain epoch %d loss %.4f", epoch, total / n)
    return backbone.freeze()
