"""The conditional denoiser: transformer blocks over layout slots.

Pipeline per forward pass: the noisy layout tensor is embedded per slot
and self-attended (layout encoder); the canvas and saliency map are
patchified and encoded ViT-style (image encoder); salient-region boxes
go through a small softplus MLP (bounding encoder, with a learned null
token when a map has no regions); a q-former with learnable queries
predicts a nonnegative balance factor omega from the image and layout
features plus the timestep; the decoder then runs, per block,
self-attention, image cross-attention scaled by omega, box
cross-attention, and a feed-forward, and a zero-initialized head emits
the predicted noise in layout-tensor shape.

omega is one scalar per sample, shared by every decoder block in the
pass; samplers recompute it at each step since the layout features
change with x_t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn


class ConfigError(ValueError):
    """Model/input dimension mismatch."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 512
    n_heads: int = 8
    enc_layers: int = 2
    dec_layers: int = 4
    img_layers: int = 6
    cgbfp_layers: int = 2
    ffn_layout: int = 1024  # layout encoder and decoder
    ffn_img: int = 2048
    ffn_cgbfp: int = 2048
    cgbfp_queries: int = 8
    patch_size: int = 32
    img_h: int = 384
    img_w: int = 256
    n_max: int = 11
    n_categories: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.img_h % self.patch_size or self.img_w % self.patch_size:
            raise ConfigError(
                f"resolution {self.img_h}x{self.img_w} not divisible by patch {self.patch_size}"
            )

    @property
    def n_channels(self) -> int:
        return self.n_categories + 4

    @property
    def grid_h(self) -> int:
        return self.img_h // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.img_w // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w


PRESETS = {
    # full-scale poster model
    "pku": ModelConfig(),
    # same architecture, CGL-style corpus (training preset differs, not the net)
    "cgl": ModelConfig(),
    # small CPU-friendly model for the synthetic corpus
    "desk": ModelConfig(
        d_model=64,
        n_heads=4,
        enc_layers=2,
        dec_layers=4,
        img_layers=4,
        cgbfp_layers=2,
        ffn_layout=128,
        ffn_img=256,
        ffn_cgbfp=256,
        cgbfp_queries=8,
        patch_size=16,
        img_h=96,
        img_w=64,
    ),
}


def preset_config(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[name]
    return replace(cfg, **overrides) if overrides else cfg


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of integer timesteps. t: (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half
    ).to(t.device)
    args = t[:, None].to(freqs.dtype) * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.nn.functional.pad(emb, (0, 1))
    return emb


def trunc_normal_(tensor: torch.Tensor, std: float = 0.02) -> None:
    nn.init.trunc_normal_(tensor, std=std, a=-2 * std, b=2 * std)


class Attention(nn.Module):
    """Multi-head attention over explicit query/key-value sequences."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.scale = self.head_dim**-0.5
        self.to_q = nn.Linear(d_model, d_model)
        self.to_k = nn.Linear(d_model, d_model)
        self.to_v = nn.Linear(d_model, d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, q_in, kv_in, key_mask=None):
        # q_in (B, Nq, D), kv_in (B, Nk, D), key_mask (B, Nk) True = usable
        b, nq, d = q_in.shape
        nk = kv_in.shape[1]
        q = self.to_q(q_in).view(b, nq, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.to_k(kv_in).view(b, nk, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.to_v(kv_in).view(b, nk, self.n_heads, self.head_dim).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1)) * self.scale  # (B, H, Nq, Nk)
        if key_mask is not None:
            attn = attn.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, nq, d)
        return self.proj(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d_model, hidden), nn.GELU(), nn.Linear(hidden, d_model))

    def forward(self, x):
        return self.net(x)


class SelfAttnBlock(nn.Module):
    """Pre-norm transformer block: self-attention then feed-forward."""

    def __init__(self, d_model: int, n_heads: int, ffn_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = Attention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ffn_dim)

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h)
        x = x + self.ffn(self.norm2(x))
        return x


class DecoderBlock(nn.Module):
    """Self-attention, omega-scaled image cross-attention, box
    cross-attention, feed-forward; all pre-norm residuals."""

    def __init__(self, d_model: int, n_heads: int, ffn_dim: int):
        super().__init__()
        self.norm_sa = nn.LayerNorm(d_model)
        self.self_attn = Attention(d_model, n_heads)
        self.norm_img = nn.LayerNorm(d_model)
        self.img_attn = Attention(d_model, n_heads)
        self.norm_box = nn.LayerNorm(d_model)
        self.box_attn = Attention(d_model, n_heads)
        self.norm_ffn = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ffn_dim)

    def forward(self, x, f_img, f_box, box_mask, omega):
        h = self.norm_sa(x)
        x = x + self.self_attn(h, h)
        x = x + omega[:, None, None] * self.img_attn(self.norm_img(x), f_img)
        x = x + self.box_attn(self.norm_box(x), f_box, key_mask=box_mask)
        x = x + self.ffn(self.norm_ffn(x))
        return x


class QFormerBlock(nn.Module):
    """Query self-attention, cross-attention to a context, feed-forward."""

    def __init__(self, d_model: int, n_heads: int, ffn_dim: int):
        super().__init__()
        self.norm_sa = nn.LayerNorm(d_model)
        self.self_attn = Attention(d_model, n_heads)
        self.norm_ca = nn.LayerNorm(d_model)
        self.cross_attn = Attention(d_model, n_heads)
        self.norm_ffn = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ffn_dim)

    def forward(self, q, context):
        h = self.norm_sa(q)
        q = q + self.self_attn(h, h)
        q = q + self.cross_attn(self.norm_ca(q), context)
        q = q + self.ffn(self.norm_ffn(q))
        return q


class LayoutEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.in_proj = nn.Linear(cfg.n_channels, cfg.d_model)
        self.pos = nn.Parameter(torch.zeros(cfg.n_max, cfg.d_model))
        trunc_normal_(self.pos)
        self.blocks = nn.ModuleList(
            SelfAttnBlock(cfg.d_model, cfg.n_heads, cfg.ffn_layout) for _ in range(cfg.enc_layers)
        )
        self.norm = nn.LayerNorm(cfg.d_model)

    def forward(self, x_t, t_emb):
        # x_t (B, N, C), t_emb (B, D) -> (B, N, D)
        x = self.in_proj(x_t) + self.pos[None] + t_emb[:, None, :]
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class ImageEncoder(nn.Module):
    """ViT-style encoder over 4-channel (RGB + saliency) canvases."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.patch = cfg.patch_size
        in_dim = 4 * cfg.patch_size**2
        self.embed = nn.Linear(in_dim, cfg.d_model)
        self.row_pos = nn.Parameter(torch.zeros(cfg.grid_h, cfg.d_model))
        self.col_pos = nn.Parameter(torch.zeros(cfg.grid_w, cfg.d_model))
        trunc_normal_(self.row_pos)
        trunc_normal_(self.col_pos)
        self.blocks = nn.ModuleList(
            SelfAttnBlock(cfg.d_model, cfg.n_heads, cfg.ffn_img) for _ in range(cfg.img_layers)
        )
        self.norm = nn.LayerNorm(cfg.d_model)

    def forward(self, images):
        # images (B, 4, H, W) -> tokens (B, P, D), row-major patch order
        b, c, h, w = images.shape
        p = self.patch
        x = images.unfold(2, p, p).unfold(3, p, p)  # (B, 4, gh, gw, p, p)
        gh, gw = x.shape[2], x.shape[3]
        x = x.permute(0, 2, 3, 1, 4, 5).reshape(b, gh * gw, c * p * p)
        x = self.embed(x)
        pos = (self.row_pos[:, None, :] + self.col_pos[None, :, :]).reshape(gh * gw, -1)
        x = x + pos[None]
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class BoundingEncoder(nn.Module):
    """Three softplus MLP layers from box coordinates to d_model, plus a
    learned null token standing in for empty box sets."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.mlp = nn.Sequential(
            nn.Linear(4, d), nn.Softplus(), nn.Linear(d, d), nn.Softplus(),
            nn.Linear(d, d), nn.Softplus(),
        )
        self.null_token = nn.Parameter(torch.zeros(1, d))
        trunc_normal_(self.null_token)

    def forward(self, boxes, device, dtype):
        """boxes: per-sample arrays (K_i, 4) -> (B, K_max, D), (B, K_max) mask."""
        tensors = []
        for arr in boxes:
            t = torch.as_tensor(np.asarray(arr), device=device, dtype=dtype).reshape(-1, 4)
            tensors.append(t)
        k_max = max(1, max(t.shape[0] for t in tensors))
        d = self.null_token.shape[1]
        out = torch.zeros(len(tensors), k_max, d, device=device, dtype=dtype)
        mask = torch.zeros(len(tensors), k_max, dtype=torch.bool, device=device)
        for i, t in enumerate(tensors):
            if t.shape[0] == 0:
                out[i, 0] = self.null_token[0].to(dtype)
                mask[i, 0] = True
            else:
                out[i, : t.shape[0]] = self.mlp(t)
                mask[i, : t.shape[0]] = True
        return out, mask


class BalancePredictor(nn.Module):
    """Learnable queries cross-attend to image+layout features and emit a
    nonnegative per-sample scalar (softplus output)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.queries = nn.Parameter(torch.zeros(cfg.cgbfp_queries, cfg.d_model))
        trunc_normal_(self.queries)
        self.blocks = nn.ModuleList(
            QFormerBlock(cfg.d_model, cfg.n_heads, cfg.ffn_cgbfp) for _ in range(cfg.cgbfp_layers)
        )
        self.norm = nn.LayerNorm(cfg.d_model)
        self.out = nn.Linear(cfg.d_model, 1)

    def forward(self, f_img, f_layout, t_emb):
        context = torch.cat([f_img, f_layout], dim=1)
        q = self.queries[None] + t_emb[:, None, :]
        for block in self.blocks:
            q = block(q, context)
        pooled = self.norm(q).mean(dim=1)  # (B, D)
        return nn.functional.softplus(self.out(pooled)[:, 0])


class ConditionalDenoiser(nn.Module):
    """Noise predictor eps_theta(x_t, t, canvas, saliency boxes)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.t_mlp = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))
        self.layout_encoder = LayoutEncoder(cfg)
        self.image_encoder = ImageEncoder(cfg)
        self.bounding_encoder = BoundingEncoder(cfg)
        self.balance = BalancePredictor(cfg)
        self.dec_blocks = nn.ModuleList(
            DecoderBlock(d, cfg.n_heads, cfg.ffn_layout) for _ in range(cfg.dec_layers)
        )
        self.dec_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, cfg.n_channels)
        self.apply(self._init_weights)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    @staticmethod
    def _init_weights(module):
        if isinstance(module, nn.Linear):
            trunc_normal_(module.weight)
            if module.bias is not None:
                nn.init.zeros_(module.bias)

    @property
    def layout_shape(self) -> tuple[int, int]:
        return (self.cfg.n_max, self.cfg.n_channels)

    def embed_timestep(self, t: torch.Tensor) -> torch.Tensor:
        dtype = next(self.parameters()).dtype
        return self.t_mlp(timestep_embedding(t, self.cfg.d_model).to(dtype))

    def decode(self, f_layout, f_img, f_box, box_mask, omega, t_emb):
        x = f_layout + t_emb[:, None, :]
        for block in self.dec_blocks:
            x = block(x, f_img, f_box, box_mask, omega)
        return self.head(self.dec_norm(x))

    def forward(self, x_t, t, images, boxes, omega_override=None):
        """x_t (B, N, C), t (B,) int, images (B, 4, H, W), boxes: per-sample
        (K_i, 4) arrays. Returns (eps_hat (B, N, C), omega (B,))."""
        cfg = self.cfg
        if x_t.shape[1:] != (cfg.n_max, cfg.n_channels):
            raise ConfigError(f"layout tensor {tuple(x_t.shape[1:])} != {self.layout_shape}")
        if images.shape[1:] != (4, cfg.img_h, cfg.img_w):
            raise ConfigError(
                f"images {tuple(images.shape[1:])} != (4, {cfg.img_h}, {cfg.img_w})"
            )
        if len(boxes) != x_t.shape[0]:
            raise ConfigError(f"{len(boxes)} box sets for batch of {x_t.shape[0]}")
        t_emb = self.embed_timestep(t)
        f_layout = self.layout_encoder(x_t, t_emb)
        f_img = self.image_encoder(images)
        f_box, box_mask = self.bounding_encoder(boxes, x_t.device, x_t.dtype)
        omega = self.balance(f_img, f_layout, t_emb)
        if omega_override is not None:
            omega = torch.full_like(omega, omega_override)
        eps_hat = self.decode(f_layout, f_img, f_box, box_mask, omega, t_emb)
        return eps_hat, omega

    @torch.no_grad()
    def predict_eps(self, x: np.ndarray, t: int, cond) -> np.ndarray:
        """Single-sample inference glue for the numpy sampling loop."""
        self.eval()
        dtype = next(self.parameters()).dtype
        device = next(self.parameters()).device
        x_t = torch.as_tensor(x, dtype=dtype, device=device)[None]
        t_vec = torch.tensor([t], device=device)
        images = torch.as_tensor(cond.images, dtype=dtype, device=device)[None]
        eps_hat, _ = self.forward(x_t, t_vec, images, [cond.boxes])
        return eps_hat[0].double().cpu().numpy()


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
