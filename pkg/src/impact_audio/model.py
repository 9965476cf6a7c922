"""Spectrogram autoencoder network: CNN encoder, patch-token transformer, CNN decoder.

Geometry for the default configuration:

    1x128x128 spectrogram
      -> Conv2d(stride 2) -> 32x64x64 feature map
      -> 16x16 patches on a 4x4 grid, flattened and projected to 384
      -> CLS + 16 tokens through 8 pre-norm transformer blocks (16 heads)
      -> per-token Linear 384->512, reshaped to a (128, 8, 8) base map
      -> four stride-2 ConvTranspose stages (8 -> 128 spatial)
      -> stride-1 output convolution back to 1x128x128

Positional encoding is a fixed 2D sinusoid over the patch grid (row 0
reserved for CLS) and is excluded from the trainable parameter count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeMismatch


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 128
    cnn_channels: int = 32
    patch_size: int = 16
    embed_dim: int = 384
    n_layers: int = 8
    n_heads: int = 16
    mlp_ratio: int = 4
    decoder_proj_dim: int = 512
    decoder_channels: tuple[int, ...] = (128, 128, 64, 32, 16, 1)

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError("embed_dim must be divisible by n_heads")
        if self.embed_dim % 4 != 0:
            raise ConfigError("embed_dim must be divisible by 4 for 2D positions")
        if self.input_size % 2 != 0:
            raise ConfigError("input_size must be even")
        feat = self.input_size // 2
        if feat % self.patch_size != 0:
            raise ConfigError("patch_size must tile the CNN feature map")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be nonnegative")
        if len(self.decoder_channels) < 2 or self.decoder_channels[-1] != 1:
            raise ConfigError("decoder_channels must end in a single output channel")
        tile_sq = self.decoder_proj_dim / self.decoder_channels[0]
        tile = int(round(math.sqrt(tile_sq)))
        if tile * tile * self.decoder_channels[0] != self.decoder_proj_dim:
            raise ConfigError("decoder_proj_dim must be decoder_channels[0] * k^2")
        doublings = len(self.decoder_channels) - 2
        if self.grid_size * tile * (2**doublings) != self.input_size:
            raise ConfigError(
                f"decoder geometry does not close: grid {self.grid_size} * tile {tile}"
                f" * 2^{doublings} != {self.input_size}"
            )

    @property
    def feature_size(self) -> int:
        return self.input_size // 2

    @property
    def grid_size(self) -> int:
        return self.feature_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_size**2

    @property
    def patch_dim(self) -> int:
        return self.cnn_channels * self.patch_size**2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    @property
    def mlp_hidden(self) -> int:
        return self.embed_dim * self.mlp_ratio

    @property
    def decoder_tile(self) -> int:
        return int(round(math.sqrt(self.decoder_proj_dim / self.decoder_channels[0])))

    @classmethod
    def quarter(cls) -> "ModelConfig":
        """Reduced-width variant for fast CPU runs; same geometry."""
        return cls(
            cnn_channels=16,
            embed_dim=192,
            n_layers=4,
            n_heads=8,
            decoder_proj_dim=256,
            decoder_channels=(64, 64, 32, 16, 8, 1),
        )

    @classmethod
    def tiny(cls) -> "ModelConfig":
        """Minimal geometry (2x2 patch grid) for gradient checks."""
        return cls(
            input_size=16,
            cnn_channels=4,
            patch_size=4,
            embed_dim=8,
            n_layers=1,
            n_heads=2,
            decoder_proj_dim=16,
            decoder_channels=(4, 4, 4, 1),
        )


@dataclass
class TokenSequence:
    """CLS + patch tokens with mask bookkeeping.

    tokens: (batch, 1 + n_patches_kept, dim); index 0 is CLS.
    mask:   (batch, n_patches) bool over the full grid, True = masked.
            None means the sequence is complete and unmasked.
    """

    tokens: torch.Tensor
    grid_shape: tuple[int, int]
    mask: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.tokens.ndim != 3:
            raise ShapeMismatch("tokens must be (batch, seq, dim)")
        if self.mask is not None and self.mask.shape[-1] != self.n_patches:
            raise ShapeMismatch("mask length must equal the patch count")

    @property
    def n_patches(self) -> int:
        return self.grid_shape[0] * self.grid_shape[1]

    @property
    def cls(self) -> torch.Tensor:
        return self.tokens[:, 0]


def sincos_position_table(embed_dim: int, grid_size: int) -> torch.Tensor:
    """Fixed 2D sinusoidal positions over the grid; row 0 (CLS) is zero."""
    half = embed_dim // 2
    omega = 1.0 / 10000.0 ** (np.arange(half // 2, dtype=np.float64) / (half / 2.0))

    def encode(positions):
        args = np.outer(positions, omega)
        return np.concatenate([np.sin(args), np.cos(args)], axis=1)

    coords = np.arange(grid_size, dtype=np.float64)
    rows = np.repeat(coords, grid_size)
    cols = np.tile(coords, grid_size)
    table = np.concatenate([encode(rows), encode(cols)], axis=1)
    full = np.zeros((grid_size * grid_size + 1, embed_dim))
    full[1:] = table
    return torch.from_numpy(full).to(torch.float32)


class TransformerBlock(nn.Module):
    """Pre-norm block: self-attention and GELU MLP, both residual."""

    def __init__(self, dim: int, n_heads: int, mlp_hidden: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.scale = self.head_dim**-0.5
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, dim * 3)
        self.attn_out = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp_fc1 = nn.Linear(dim, mlp_hidden)
        self.mlp_fc2 = nn.Linear(mlp_hidden, dim)

    def forward(self, x, return_attention=False):
        batch, seq, dim = x.shape
        h = self.norm1(x)
        qkv = (
            self.qkv(h)
            .reshape(batch, seq, 3, self.n_heads, self.head_dim)
            .permute(2, 0, 3, 1, 4)
        )
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        context = (attn @ v).transpose(1, 2).reshape(batch, seq, dim)
        x = x + self.attn_out(context)
        x = x + self.mlp_fc2(F.gelu(self.mlp_fc1(self.norm2(x))))
        if return_attention:
            return x, attn
        return x


class ImpactNet(nn.Module):
    """One branch of the student-teacher pair."""

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        config = config or ModelConfig()
        self.config = config

        self.conv = nn.Conv2d(1, config.cnn_channels, kernel_size=3, stride=2, padding=1)
        self.conv_norm = nn.BatchNorm2d(config.cnn_channels)

        self.patch_proj = nn.Linear(config.patch_dim, config.embed_dim)
        self.cls_token = nn.Parameter(torch.zeros(config.embed_dim))
        self.mask_token = nn.Parameter(torch.zeros(config.embed_dim))
        self.register_buffer(
            "pos_table", sincos_position_table(config.embed_dim, config.grid_size)
        )

        self.blocks = nn.ModuleList(
            TransformerBlock(config.embed_dim, config.n_heads, config.mlp_hidden)
            for _ in range(config.n_layers)
        )
        self.final_norm = nn.LayerNorm(config.embed_dim)

        self.decoder_proj = nn.Linear(config.embed_dim, config.decoder_proj_dim)
        stages = []
        chain = config.decoder_channels
        for c_in, c_out in zip(chain[:-2], chain[1:-1]):
            stages.append(
                nn.Sequential(
                    nn.ConvTranspose2d(c_in, c_out, kernel_size=4, stride=2, padding=1),
                    nn.BatchNorm2d(c_out),
                    nn.GELU(),
                )
            )
        self.decoder_stages = nn.ModuleList(stages)
        # Stride-1 output layer closes the geometry on input_size exactly.
        self.decoder_out = nn.Conv2d(chain[-2], 1, kernel_size=3, stride=1, padding=1)

    # --- encoder -------------------------------------------------------------

    def cnn_encode(self, spec: torch.Tensor) -> torch.Tensor:
        """(B, 1, S, S) spectrogram -> (B, C, S/2, S/2) feature map."""
        if spec.ndim == 2:
            spec = spec[None, None]
        elif spec.ndim == 3:
            spec = spec[:, None]
        size = self.config.input_size
        if spec.shape[1] != 1 or spec.shape[2] != size or spec.shape[3] != size:
            raise ShapeMismatch(f"expected (B, 1, {size}, {size}), got {tuple(spec.shape)}")
        return F.gelu(self.conv_norm(self.conv(spec)))

    def patchify_embed(self, featmap: torch.Tensor) -> TokenSequence:
        """Feature map -> CLS + projected patch tokens with fixed positions."""
        cfg = self.config
        if featmap.ndim == 3:
            featmap = featmap[None]
        batch, channels, height, width = featmap.shape
        if channels != cfg.cnn_channels or height != cfg.feature_size or width != cfg.feature_size:
            raise ShapeMismatch(
                f"expected (B, {cfg.cnn_channels}, {cfg.feature_size}, {cfg.feature_size}), "
                f"got {tuple(featmap.shape)}"
            )
        g, p = cfg.grid_size, cfg.patch_size
        patches = (
            featmap.reshape(batch, channels, g, p, g, p)
            .permute(0, 2, 4, 1, 3, 5)
            .reshape(batch, g * g, cfg.patch_dim)
        )
        tokens = self.patch_proj(patches) + self.pos_table[1:]
        cls = (self.cls_token + self.pos_table[0]).expand(batch, 1, -1)
        return TokenSequence(torch.cat([cls, tokens], dim=1), (g, g))

    def tokenize(self, spec: torch.Tensor) -> TokenSequence:
        return self.patchify_embed(self.cnn_encode(spec))

    # --- transformer ----------------------------------------------------------

    @staticmethod
    def _visible_order(mask: torch.Tensor) -> torch.Tensor:
        """Patch indices sorted visible-first, original order preserved."""
        return torch.argsort(mask.to(torch.int64), dim=1, stable=True)

    def transformer_forward(
        self,
        seq: TokenSequence,
        visible_only: bool = False,
        return_attention: bool = False,
    ):
        """Run all blocks; returns (per-layer outputs, final-norm output).

        Per-layer outputs are the raw residual-stream states, stacked as
        (n_layers, batch, seq, dim). With `visible_only`, masked patch
        tokens are dropped before attention (CLS always kept) and the
        returned sequences cover only the kept tokens.
        """
        tokens = seq.tokens
        if tokens.shape[-1] != self.config.embed_dim:
            raise ShapeMismatch(f"token dim {tokens.shape[-1]} != {self.config.embed_dim}")
        if visible_only:
            if seq.mask is None:
                raise ShapeMismatch("visible_only requires a mask")
            mask = seq.mask
            n_keep = int((~mask[0]).sum())
            if not torch.all((~mask).sum(dim=1) == n_keep):
                raise ShapeMismatch("per-sample mask counts must match within a batch")
            order = self._visible_order(mask)[:, :n_keep]
            gather = (order + 1).unsqueeze(-1).expand(-1, -1, tokens.shape[-1])
            tokens = torch.cat([tokens[:, :1], torch.gather(tokens, 1, gather)], dim=1)

        layer_outputs = []
        attentions = []
        x = tokens
        for block in self.blocks:
            if return_attention:
                x, attn = block(x, return_attention=True)
                attentions.append(attn)
            else:
                x = block(x)
            layer_outputs.append(x)
        stacked = (
            torch.stack(layer_outputs)
            if layer_outputs
            else x.unsqueeze(0)[:0]
        )
        final = self.final_norm(x)
        if return_attention:
            return stacked, final, attentions
        return stacked, final

    def fill_masked(self, encoded: torch.Tensor, mask: torch.Tensor) -> TokenSequence:
        """Rebuild the full grid from visible-token encodings.

        encoded: (B, 1 + n_visible, dim) in the order produced by
        `transformer_forward(..., visible_only=True)`. Masked positions
        are filled with the learned mask embedding plus their fixed
        positional code.
        """
        batch, _, dim = encoded.shape
        n_patches = mask.shape[1]
        fill = (self.mask_token + self.pos_table[1:]).expand(batch, n_patches, dim)
        n_keep = encoded.shape[1] - 1
        order = self._visible_order(mask)[:, :n_keep]
        full = torch.scatter(
            fill, 1, order.unsqueeze(-1).expand(-1, -1, dim), encoded[:, 1:]
        )
        grid = self.config.grid_size
        return TokenSequence(
            torch.cat([encoded[:, :1], full], dim=1), (grid, grid), mask
        )

    # --- decoder ---------------------------------------------------------------

    def cnn_decode(self, seq: TokenSequence) -> torch.Tensor:
        """Full token sequence -> (B, 1, S, S) reconstruction. CLS is ignored."""
        cfg = self.config
        tokens = seq.tokens
        if tokens.shape[1] != 1 + cfg.n_patches:
            raise ShapeMismatch(
                f"decoder needs the full {1 + cfg.n_patches}-token sequence, "
                f"got {tokens.shape[1]}"
            )
        g, tile, c0 = cfg.grid_size, cfg.decoder_tile, cfg.decoder_channels[0]
        x = self.decoder_proj(tokens[:, 1:])
        x = (
            x.reshape(-1, g, g, c0, tile, tile)
            .permute(0, 3, 1, 4, 2, 5)
            .reshape(-1, c0, g * tile, g * tile)
        )
        for stage in self.decoder_stages:
            x = stage(x)
        return self.decoder_out(x)

    # --- composite passes --------------------------------------------------------

    def forward_features(self, spec: torch.Tensor):
        """Unmasked pass; returns (layer_outputs, final-normed tokens)."""
        return self.transformer_forward(self.tokenize(spec))

    def reconstruct(self, spec: torch.Tensor) -> torch.Tensor:
        """Unmasked end-to-end autoencode, mainly for shape checks."""
        seq = self.tokenize(spec)
        _, final = self.transformer_forward(seq)
        full = TokenSequence(final, seq.grid_shape)
        return self.cnn_decode(full)


def param_count(net: nn.Module) -> int:
    """Trainable element count; fixed positional table excluded."""
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


def _trunc_normal_(tensor: torch.Tensor, std: float, generator: torch.Generator) -> None:
    """Truncated normal on [-2*std, 2*std] via inverse-CDF sampling."""
    norm_cdf = lambda x: (1.0 + math.erf(x / math.sqrt(2.0))) / 2.0
    low, high = norm_cdf(-2.0), norm_cdf(2.0)
    with torch.no_grad():
        tensor.uniform_(2 * low - 1, 2 * high - 1, generator=generator)
        tensor.erfinv_()
        tensor.mul_(std * math.sqrt(2.0))


def initialize_parameters(net: ImpactNet, seed: int = 0, std: float = 0.02) -> ImpactNet:
    """Deterministic init: truncated-normal weights, zero biases, unit norms."""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
                _trunc_normal_(module.weight, std, generator)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, (nn.BatchNorm2d, nn.LayerNorm)):
                if module.weight is not None:
                    module.weight.fill_(1.0)
                if module.bias is not None:
                    module.bias.zero_()
                if isinstance(module, nn.BatchNorm2d):
                    module.reset_running_stats()
        _trunc_normal_(net.cls_token, std, generator)
        _trunc_normal_(net.mask_token, std, generator)
    return net


def build_model(config: ModelConfig | None = None, seed: int = 0) -> ImpactNet:
    return initialize_parameters(ImpactNet(config), seed)
