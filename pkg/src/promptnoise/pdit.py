"""Prompt DiT: a transformer over latent tokens conditioned on prompts and the clean image.

Conditioning enters three ways:

* a timestep embedding of ``ln(sigma)`` plus the pooled conditional features,
  which drives every AdaLN modulation;
* the conditional feature map itself, projected into additive Q/K/V
  contributions inside each block's attention (cosine attention with a learned,
  clamped temperature);
* the EDM-style skip/out scaling in :func:`consistency_fn`, which pins the
  output to the input at ``sigma_0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import RunConfig
from .errors import ConfigError, ContractError
from .pae import NUM_SCALES, PromptFeatures, pixel_down
from .schedule import EDMCoefficients, edm_coeffs

TEMP_INIT = math.log(10.0)
TEMP_MAX = math.log(100.0)


@dataclass
class PDiTConfig:
    num_blocks: int = 4
    hidden_dim: int = 128
    num_heads: int = 4
    token_patch: int = 1
    mlp_ratio: float = 4.0
    dropout: float = 0.1
    cond_channels: int = 32
    cond_noise_std: float = 0.05
    cond_downsample: int = 2

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.token_patch < 1:
            raise ConfigError("token_patch must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.cond_noise_std < 0:
            raise ConfigError("cond_noise_std must be >= 0")
        if self.cond_downsample not in (1, 2, 4, 8):
            raise ConfigError("cond_downsample must divide 8")

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "PDiTConfig":
        return cls(**cfg["pdit"])


@dataclass
class ConditionalEmbedding:
    """``f_cond``: ``(B, C, h, w)`` at latent resolution; ``pooled``: ``(B, hidden)``."""

    f_cond: torch.Tensor
    pooled: torch.Tensor


def sincos_2d(h: int, w: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed 2-D sine/cosine position table, ``(h*w, dim)``."""
    if dim % 4:
        raise ConfigError("hidden_dim must be divisible by 4 for 2-D positions")
    q = dim // 4
    omega = 1.0 / 10000 ** (torch.arange(q, dtype=torch.float64) / q)
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64), indexing="ij")
    ay = ys.reshape(-1, 1) * omega
    ax = xs.reshape(-1, 1) * omega
    return torch.cat([ay.sin(), ay.cos(), ax.sin(), ax.cos()], dim=1).to(dtype)


def tokenize(z: torch.Tensor, p: int) -> torch.Tensor:
    """``(B, C, H, W)`` -> ``(B, (H/p)*(W/p), C*p*p)``."""
    return pixel_down(z, p).flatten(2).transpose(1, 2)


def detokenize(tokens: torch.Tensor, p: int, h: int, w: int) -> torch.Tensor:
    """Inverse of :func:`tokenize` for a latent of spatial size ``h x w``."""
    B, _, D = tokens.shape
    x = tokens.transpose(1, 2).reshape(B, D, h // p, w // p)
    return x if p == 1 else F.pixel_shuffle(x, p)


class TimestepEmbedder(nn.Module):
    """Sinusoidal features of ``ln(sigma)`` (``hidden/2`` frequencies) and a 2-layer MLP."""

    def __init__(self, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.mlp = nn.Sequential(nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, hidden))

    def sinusoid(self, sigma: torch.Tensor) -> torch.Tensor:
        half = self.hidden // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=sigma.dtype, device=sigma.device) / half)
        args = sigma.log()[:, None] * freqs[None]
        return torch.cat([args.cos(), args.sin()], dim=-1)

    def forward(self, sigma: torch.Tensor) -> torch.Tensor:
        if bool((sigma <= 0).any()):
            raise ContractError("sigma must be positive")
        return self.mlp(self.sinusoid(sigma))


class AdaLN(nn.Module):
    """Layer norm without affine parameters, then ``(1 + scale) * x + shift``.

    ``scale`` and ``shift`` come from a zero-initialised linear map of the
    conditioning vector, so the module starts as a plain layer norm.
    """

    def __init__(self, dim: int, cond_dim: int):
        super().__init__()
        self.dim = dim
        self.mod = nn.Linear(cond_dim, 2 * dim)
        nn.init.zeros_(self.mod.weight)
        nn.init.zeros_(self.mod.bias)

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift, scale = self.mod(F.silu(c)).chunk(2, dim=-1)
        x = F.layer_norm(x, (self.dim,), eps=1e-6)
        return x * (1 + scale[:, None]) + shift[:, None]


def pixel_norm(x: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    return x * torch.rsqrt((x * x).mean(dim=-1, keepdim=True) + eps)


class PromptAttention(nn.Module):
    """Multi-head cosine attention whose Q/K/V also receive projected condition tokens."""

    def __init__(self, hidden: int, heads: int, cond_dim: int, vec_dim: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.cond_norm = AdaLN(cond_dim, vec_dim)
        self.cond_qkv = nn.Linear(cond_dim, 3 * hidden)
        self.logit_scale = nn.Parameter(torch.full((heads, 1, 1), TEMP_INIT))
        self.proj = nn.Linear(hidden, hidden)

    def temperature(self) -> torch.Tensor:
        return self.logit_scale.clamp(0.0, TEMP_MAX).exp()

    def forward(self, x, cond_tokens, c, return_weights: bool = False):
        B, T, D = x.shape
        if cond_tokens.shape[:2] != (B, T):
            raise ContractError(f"condition tokens {tuple(cond_tokens.shape)} not aligned with {tuple(x.shape)}")
        qkv = self.qkv(x) + self.cond_qkv(self.cond_norm(cond_tokens, c))
        q, k, v = qkv.chunk(3, dim=-1)
        q, k = pixel_norm(q), pixel_norm(k)

        def heads(t):
            return t.reshape(B, T, self.heads, D // self.heads).transpose(1, 2)

        q, k, v = heads(q), heads(k), heads(v)
        q, k = F.normalize(q, dim=-1), F.normalize(k, dim=-1)
        logits = self.temperature() * (q @ k.transpose(-2, -1))
        attn = logits.softmax(dim=-1)
        out = self.proj((attn @ v).transpose(1, 2).reshape(B, T, D))
        if return_weights:
            return out, attn, logits
        return out


class PDiTBlock(nn.Module):
    def __init__(self, hidden: int, heads: int, cond_dim: int, mlp_ratio: float, dropout: float):
        super().__init__()
        self.norm1 = AdaLN(hidden, hidden)
        self.attn = PromptAttention(hidden, heads, cond_dim, hidden)
        self.norm2 = AdaLN(hidden, hidden)
        inner = int(hidden * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(hidden, inner), nn.GELU(approximate="tanh"), nn.Dropout(dropout), nn.Linear(inner, hidden))
        self.gates = nn.Linear(hidden, 2 * hidden)
        nn.init.zeros_(self.gates.weight)
        nn.init.zeros_(self.gates.bias)

    def forward(self, x, cond_tokens, c):
        g_attn, g_mlp = self.gates(F.silu(c)).chunk(2, dim=-1)
        x = x + g_attn[:, None] * self.attn(self.norm1(x, c), cond_tokens, c)
        x = x + g_mlp[:, None] * self.mlp(self.norm2(x, c))
        return x


class ConditionalEmbedder(nn.Module):
    """Clean image, local prompts and per-scale global prompts -> latent-resolution features.

    Sources are concatenated in the fixed order clean, local, global 0..3.
    """

    def __init__(self, global_ch: int, local_ch: int, cond_ch: int, hidden: int, cond_downsample: int = 2):
        super().__init__()
        self.cond_downsample = cond_downsample
        clean_factor = 8 // cond_downsample
        in_chs = [3 * clean_factor**2, local_ch * 64] + [global_ch * (8 >> l) ** 2 for l in range(NUM_SCALES)]
        self.convs = nn.ModuleList(nn.Conv2d(c, cond_ch, 3, padding=1) for c in in_chs)
        self.out_channels = cond_ch * len(in_chs)
        self.pool_proj = nn.Linear(self.out_channels, hidden)

    def forward(self, clean: torch.Tensor, prompts: PromptFeatures) -> ConditionalEmbedding:
        H, W = clean.shape[-2:]
        if H % 8 or W % 8:
            raise ContractError(f"clean dims {H}x{W} not divisible by 8")
        if tuple(prompts.local.shape[-2:]) != (H, W) or len(prompts.global_) != NUM_SCALES:
            raise ContractError("prompt features do not match the clean image")
        ds = self.cond_downsample
        clean_lr = F.avg_pool2d(clean, ds) if ds > 1 else clean
        sources = [pixel_down(clean_lr, 8 // ds), pixel_down(prompts.local, 8)]
        for l, g in enumerate(prompts.global_):
            if tuple(g.shape[-2:]) != (H >> l, W >> l):
                raise ContractError(f"global prompt {l} has shape {tuple(g.shape)}")
            sources.append(pixel_down(g, 8 >> l))
        f_cond = torch.cat([conv(s) for conv, s in zip(self.convs, sources)], dim=1)
        return ConditionalEmbedding(f_cond, self.pool_proj(f_cond.mean(dim=(2, 3))))


class PromptDiT(nn.Module):
    def __init__(self, latent_ch: int, global_ch: int, local_ch: int, cfg: PDiTConfig = PDiTConfig()):
        super().__init__()
        self.cfg = cfg
        self.latent_ch = latent_ch
        p, D = cfg.token_patch, cfg.hidden_dim
        self.x_embed = nn.Linear(latent_ch * p * p, D)
        self.t_embed = TimestepEmbedder(D)
        self.cond = ConditionalEmbedder(global_ch, local_ch, cfg.cond_channels, D, cfg.cond_downsample)
        cond_dim = self.cond.out_channels * p * p
        self.blocks = nn.ModuleList(
            PDiTBlock(D, cfg.num_heads, cond_dim, cfg.mlp_ratio, cfg.dropout) for _ in range(cfg.num_blocks)
        )
        self.final_norm = AdaLN(D, D)
        self.head = nn.Linear(D, latent_ch * p * p)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "PromptDiT":
        pae = cfg["pae"]
        return cls(pae["latent_channels"], pae["global_channels"], pae["local_channels"], PDiTConfig.from_config(cfg))

    def cond_embed(self, clean: torch.Tensor, prompts: PromptFeatures) -> ConditionalEmbedding:
        return self.cond(clean, prompts)

    def timestep_embed(self, sigma: torch.Tensor) -> torch.Tensor:
        return self.t_embed(sigma)

    def network(self, x_in: torch.Tensor, sigma: torch.Tensor, cond: ConditionalEmbedding) -> torch.Tensor:
        """The free-form network ``F_theta`` (input already scaled by ``c_in``)."""
        B, C, h, w = x_in.shape
        p = self.cfg.token_patch
        if C != self.latent_ch or h % p or w % p:
            raise ContractError(f"latent {tuple(x_in.shape)} incompatible with model")
        if tuple(cond.f_cond.shape[-2:]) != (h, w):
            raise ContractError(f"condition {tuple(cond.f_cond.shape[-2:])} vs latent {(h, w)}")
        x = self.x_embed(tokenize(x_in, p))
        x = x + sincos_2d(h // p, w // p, x.shape[-1], x.dtype).to(x.device)
        c = self.t_embed(sigma) + cond.pooled
        cond_tokens = tokenize(cond.f_cond, p)
        for block in self.blocks:
            x = block(x, cond_tokens, c)
        return detokenize(self.head(self.final_norm(x, c)), p, h, w)


def consistency_fn(
    model: PromptDiT,
    z_t: torch.Tensor,
    sigma_t: torch.Tensor | float,
    sigma_0: float,
    cond: ConditionalEmbedding,
    edm: EDMCoefficients = EDMCoefficients(),
) -> torch.Tensor:
    """``c_skip * z_t + c_out * F(c_in * z_t, sigma_t, cond)``.

    ``sigma_t`` is a scalar or a ``(B,)`` tensor. The EDM coefficients are
    computed in float64 and cast to the latent dtype.
    """
    B = z_t.shape[0]
    sig = torch.as_tensor(sigma_t, dtype=torch.float64)
    if sig.ndim == 0:
        sig = sig.expand(B)
    if sig.shape != (B,):
        raise ContractError(f"sigma_t must be scalar or ({B},), got {tuple(sig.shape)}")
    c_in, c_skip, c_out = edm_coeffs(sig, sigma_0, edm)
    view = (B,) + (1,) * (z_t.ndim - 1)
    c_in, c_skip, c_out = (c.to(z_t.dtype).to(z_t.device).view(view) for c in (c_in, c_skip, c_out))
    f = model.network(c_in * z_t, sig.to(z_t.dtype).to(z_t.device), cond)
    return c_skip * z_t + c_out * f
