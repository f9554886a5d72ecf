"""3D patch Vision Transformer encoder.

Volumes are cut into non-overlapping cubes in raster order (depth-major,
then height, then width). Each cube is flattened channel-major into one
token, projected, offset by a fixed 3-axis sine-cosine table and run
through a pre-norm transformer with a CLS token.
"""

from dataclasses import dataclass
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch import nn

from src.preprocess import MultiChannelVolume, WindowSpec
from src.utils.constants import INIT_STD, POOLINGS, POSITIONAL_BASE
from src.utils.errors import EncoderError
from src.utils.logger import setup_logger
from src.utils.seeding import torch_seed

logger = setup_logger(__name__)

Dims = Tuple[int, int, int]


class EncoderConfig(BaseModel):
    """ViT shape parameters."""

    model_config = ConfigDict(extra="forbid")

    input_dims: Dims = (96, 96, 96)
    channels: int = Field(default=3, ge=1)
    patch_size: int = Field(default=12, ge=1)
    embed_dim: int = Field(default=768, ge=6)
    depth: int = Field(default=12, ge=1)
    heads: int = Field(default=12, ge=1)
    mlp_hidden: int = Field(default=3072, ge=1)

    @model_validator(mode="after")
    def validate_shapes(self) -> "EncoderConfig":
        """Validate divisibility constraints."""
        if any(d % self.patch_size for d in self.input_dims):
            raise ValueError(f"input_dims {self.input_dims} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.embed_dim % 6:
            raise ValueError(f"embed_dim {self.embed_dim} must be divisible by 6")
        return self

    @property
    def grid(self) -> Dims:
        d, h, w = (n // self.patch_size for n in self.input_dims)
        return d, h, w

    @property
    def n_tokens(self) -> int:
        return int(np.prod(self.grid))

    @property
    def token_dim(self) -> int:
        return self.channels * self.patch_size**3

    @classmethod
    def desk(cls) -> "EncoderConfig":
        return cls(input_dims=(32, 32, 32), patch_size=8, embed_dim=96, depth=4, heads=4, mlp_hidden=384)


@dataclass
class PatchSequence:
    """Flattened patch tokens of one volume and their grid."""

    tokens: np.ndarray
    grid: Dims
    patch_size: int

    @property
    def n_tokens(self) -> int:
        return int(self.tokens.shape[0])


@dataclass
class TokenEmbeddings:
    """Encoder output for a batch: CLS (B, E), tokens (B, N, E), optional attention (B, depth, heads, N+1, N+1)."""

    cls: torch.Tensor
    tokens: torch.Tensor
    attn: Optional[torch.Tensor] = None


def _grid_of(dims: Sequence[int], patch_size: int) -> Dims:
    if patch_size < 1 or any(d % patch_size for d in dims):
        raise EncoderError(f"dims {tuple(dims)} not divisible by patch_size {patch_size}")
    d, h, w = (n // patch_size for n in dims)
    return d, h, w


def patchify_tensor(x: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, C, D, H, W) -> (B, N, C * p^3)."""
    if x.ndim != 5:
        raise EncoderError(f"expected a (B, C, D, H, W) batch, got shape {tuple(x.shape)}")
    b, c = x.shape[:2]
    gd, gh, gw = _grid_of(x.shape[2:], patch_size)
    p = patch_size
    x = x.reshape(b, c, gd, p, gh, p, gw, p).permute(0, 2, 4, 6, 1, 3, 5, 7)
    return x.reshape(b, gd * gh * gw, c * p**3)


def unpatchify_tensor(tokens: torch.Tensor, grid: Dims, patch_size: int) -> torch.Tensor:
    """(B, N, C * p^3) -> (B, C, D, H, W); exact inverse of patchify_tensor."""
    b, n, token_dim = tokens.shape
    gd, gh, gw = grid
    p = patch_size
    if n != gd * gh * gw or token_dim % p**3:
        raise EncoderError(f"{n} tokens of length {token_dim} do not fit grid {grid} with patch {p}")
    c = token_dim // p**3
    x = tokens.reshape(b, gd, gh, gw, c, p, p, p).permute(0, 4, 1, 5, 2, 6, 3, 7)
    return x.reshape(b, c, gd * p, gh * p, gw * p)


def patchify(m: MultiChannelVolume, patch_size: int) -> PatchSequence:
    """Cut a windowed volume into raster-ordered, channel-major flattened cubes."""
    grid = _grid_of(m.dims, patch_size)
    tokens = patchify_tensor(torch.from_numpy(m.channels)[None], patch_size)[0]
    return PatchSequence(tokens=tokens.numpy().copy(), grid=grid, patch_size=patch_size)


def unpatchify(
    tokens: Union[np.ndarray, torch.Tensor],
    grid: Dims,
    patch_size: int,
    channel_windows: Optional[List[WindowSpec]] = None,
) -> MultiChannelVolume:
    """Reassemble (N, C * p^3) tokens into a volume."""
    t = torch.as_tensor(np.asarray(tokens, dtype=np.float32) if isinstance(tokens, np.ndarray) else tokens)
    if t.ndim != 2:
        raise EncoderError(f"expected (N, token_dim) tokens, got shape {tuple(t.shape)}")
    volume = unpatchify_tensor(t.detach().float()[None], grid, patch_size)[0].cpu().numpy()
    if channel_windows is None:
        channel_windows = [WindowSpec(center=0.5, width=1.0)] * volume.shape[0]
    return MultiChannelVolume(channels=volume, channel_windows=list(channel_windows))


def positional_encoding(grid: Dims, embed_dim: int) -> np.ndarray:
    """
    Fixed 3-axis sine-cosine table of shape (N, embed_dim).

    The embedding splits into three equal axis blocks (depth, height,
    width); each block interleaves sin/cos of the patch coordinate over
    geometrically spaced frequencies.
    """
    if embed_dim % 6:
        raise EncoderError(f"embed_dim {embed_dim} must be divisible by 6")
    block = embed_dim // 3
    n_freq = block // 2
    omega = 1.0 / POSITIONAL_BASE ** (np.arange(n_freq, dtype=np.float64) * 2.0 / block)

    coords = np.indices(grid, dtype=np.float64).reshape(3, -1).T
    table = np.empty((coords.shape[0], embed_dim), dtype=np.float64)
    for axis in range(3):
        angles = coords[:, axis : axis + 1] * omega[None, :]
        base = axis * block
        table[:, base : base + block : 2] = np.sin(angles)
        table[:, base + 1 : base + block : 2] = np.cos(angles)
    return table.astype(np.float32)


class Attention(nn.Module):
    """Multi-head self-attention that can return its post-softmax weights."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        b, t, e = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, e // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        weights = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, t, e)
        return self.proj(out), weights


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_hidden: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_hidden), nn.GELU(), nn.Linear(mlp_hidden, dim))

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        attn_out, weights = self.attn(self.norm1(x))
        x = x + attn_out
        x = x + self.mlp(self.norm2(x))
        return x, weights


def init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=INIT_STD)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class VolumeEncoder(nn.Module):
    """3D ViT over patch tokens."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.token_dim, cfg.embed_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        self.register_buffer(
            "pos_embed",
            torch.from_numpy(positional_encoding(cfg.grid, cfg.embed_dim))[None],
            persistent=False,
        )
        self.blocks = nn.ModuleList(
            [Block(cfg.embed_dim, cfg.heads, cfg.mlp_hidden) for _ in range(cfg.depth)]
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)

        self.apply(init_weights)
        nn.init.trunc_normal_(self.cls_token, std=INIT_STD)

    def forward(
        self,
        patches: torch.Tensor,
        positions: Optional[torch.Tensor] = None,
        capture_attention: bool = False,
    ) -> TokenEmbeddings:
        """
        Encode patch tokens.

        Args:
            patches: (B, n, token_dim) tokens
            positions: Optional (n,) or (B, n) grid indices of the given tokens;
                all N tokens in raster order when None
            capture_attention: Return stacked post-softmax attention weights

        Returns:
            TokenEmbeddings for the batch

        Raises:
            EncoderError: On shape mismatch or non-finite activations
        """
        if patches.ndim != 3 or patches.shape[-1] != self.cfg.token_dim:
            raise EncoderError(
                f"expected (B, n, {self.cfg.token_dim}) patches, got shape {tuple(patches.shape)}"
            )

        x = self.patch_embed(patches)
        if positions is None:
            if patches.shape[1] != self.cfg.n_tokens:
                raise EncoderError(f"expected {self.cfg.n_tokens} tokens, got {patches.shape[1]}")
            x = x + self.pos_embed
        elif positions.ndim == 1:
            x = x + self.pos_embed[:, positions]
        else:
            x = x + self.pos_embed[0][positions]

        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1)

        captured = []
        for layer, block in enumerate(self.blocks):
            x, weights = block(x)
            if not torch.isfinite(x).all():
                raise EncoderError(f"non-finite activations at layer {layer}")
            if capture_attention:
                captured.append(weights)
        x = self.norm(x)

        attn = torch.stack(captured, dim=1) if capture_attention else None
        return TokenEmbeddings(cls=x[:, 0], tokens=x[:, 1:], attn=attn)

    def encode_volumes(self, volumes: torch.Tensor, capture_attention: bool = False) -> TokenEmbeddings:
        """Encode a (B, C, D, H, W) batch at the configured input dims."""
        if tuple(volumes.shape[1:]) != (self.cfg.channels, *self.cfg.input_dims):
            raise EncoderError(
                f"expected volumes of shape (B, {self.cfg.channels}, {self.cfg.input_dims}), "
                f"got {tuple(volumes.shape)}"
            )
        return self(patchify_tensor(volumes, self.cfg.patch_size), capture_attention=capture_attention)


def extract_embedding(te: TokenEmbeddings, pooling: str = "cls") -> torch.Tensor:
    """CLS vector or mean of patch tokens, per batch item."""
    if pooling not in POOLINGS:
        raise EncoderError(f"Unknown pooling '{pooling}'. Must be one of {sorted(POOLINGS)}")
    if pooling == "cls":
        return te.cls
    return te.tokens.mean(dim=1)


def build_encoder(cfg: EncoderConfig, seed: int) -> VolumeEncoder:
    """Initialise an encoder deterministically from ``seed``."""
    with torch_seed(seed):
        encoder = VolumeEncoder(cfg)
    logger.debug(
        f"Built encoder: {cfg.n_tokens} tokens, embed {cfg.embed_dim}, depth {cfg.depth}, "
        f"{sum(p.numel() for p in encoder.parameters())} parameters"
    )
    return encoder


@dataclass(frozen=True)
class CostEstimate:
    """Token counts and self-attention cost between two patch sizes."""

    input_dims: Dims
    patch_before: int
    patch_after: int
    tokens_before: int
    tokens_after: int
    embed_dim: int

    @property
    def token_ratio(self) -> Fraction:
        return Fraction(self.tokens_after, self.tokens_before)

    @property
    def attn_flops_ratio(self) -> Fraction:
        return self.token_ratio**2

    @property
    def attn_flops_before(self) -> int:
        # QK^T and AV products, one multiply-add each
        return 2 * self.tokens_before**2 * self.embed_dim

    @property
    def attn_flops_after(self) -> int:
        return 2 * self.tokens_after**2 * self.embed_dim

    def to_dict(self) -> dict:
        return {
            "input_dims": list(self.input_dims),
            "patch_before": self.patch_before,
            "patch_after": self.patch_after,
            "tokens_before": self.tokens_before,
            "tokens_after": self.tokens_after,
            "token_ratio": float(self.token_ratio),
            "attn_flops_ratio": float(self.attn_flops_ratio),
            "attn_flops_before": self.attn_flops_before,
            "attn_flops_after": self.attn_flops_after,
        }


def compare_patch_sizes(input_dims: Dims, patch_a: int, patch_b: int, embed_dim: int = 768) -> CostEstimate:
    """Cost of moving from patch size ``patch_a`` to ``patch_b``."""
    tokens_a = int(np.prod(_grid_of(input_dims, patch_a)))
    tokens_b = int(np.prod(_grid_of(input_dims, patch_b)))
    return CostEstimate(
        input_dims=tuple(input_dims),  # type: ignore[arg-type]
        patch_before=patch_a,
        patch_after=patch_b,
        tokens_before=tokens_a,
        tokens_after=tokens_b,
        embed_dim=embed_dim,
    )


def attention_cost_estimate(
    input_dims: Dims, patch_size: int, embed_dim: int, shrink_factor: Union[int, Fraction]
) -> CostEstimate:
    """
    Cost of shrinking the patch side by ``shrink_factor``.

    Tokens grow as s^3 and self-attention cost as s^6.
    """
    s = Fraction(shrink_factor)
    if s <= 0:
        raise EncoderError(f"shrink_factor must be positive, got {shrink_factor}")
    new_patch = Fraction(patch_size) / s
    if new_patch.denominator != 1:
        raise EncoderError(f"patch_size {patch_size} is not divisible by shrink factor {s}")
    return compare_patch_sizes(input_dims, patch_size, int(new_patch), embed_dim)
