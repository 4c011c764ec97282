"""Cooperative deformable aggregation over multi-spectral local feature maps.

The three modalities' patch grids are mixed into one low-resolution map, a
single offset field is predicted from it, and all three maps are sampled at
the same deformed positions (bilinear, with analytic gradients through both
values and positions). The sampled local features are fused into the global
tokens by one cross-attention block with a residual connection.

Coordinate convention: normalized align-corners coordinates in [-1, 1] with
(x, y) order in the trailing dimension; x runs over width, y over height.
Pixel (0, 0) maps to (-1, -1) and (W-1, H-1) to (+1, +1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn


class ShapeMismatch(ValueError):
    """Tensor arguments disagree with the declared token/map geometry."""


@dataclass
class LocalMap:
    """Patch tokens of one modality laid out as an H x W x C map."""

    values: torch.Tensor  # [B, H, W, C]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def channels(self) -> int:
        return self.values.shape[3]


@dataclass
class SamplingGrid:
    """Reference points, raw offsets and clipped sampling positions.

    One grid per batch element, shared by all three modality samplers.
    Every component of reference_points and positions lies in [-1, 1].
    """

    reference_points: torch.Tensor  # [B, Hs, Ws, 2]
    offsets: torch.Tensor  # [B, Hs, Ws, 2]
    positions: torch.Tensor  # [B, Hs, Ws, 2] = clip(P + dP, -1, 1)
    scale: float

    @property
    def n_cells(self) -> int:
        return self.positions.shape[1] * self.positions.shape[2]


def split_tokens(tokens: torch.Tensor, height: int, width: int):
    """Split [B, N_l+2, C] into (class token, pseudo token, local map).

    Token order is [pseudo, patch_1..patch_Nl, class] with patches row-major.
    """
    if tokens.ndim != 3:
        raise ShapeMismatch(f"expected [B, N+2, C] tokens, got shape {tuple(tokens.shape)}")
    n_l = height * width
    if tokens.shape[1] != n_l + 2:
        raise ShapeMismatch(
            f"token count {tokens.shape[1]} does not match {height}x{width} patches + 2"
        )
    pseudo = tokens[:, 0]
    cls = tokens[:, -1]
    local = tokens[:, 1:-1].reshape(tokens.shape[0], height, width, tokens.shape[2])
    return cls, pseudo, LocalMap(local)


def merge_tokens(cls: torch.Tensor, pseudo: torch.Tensor, local: LocalMap) -> torch.Tensor:
    """Inverse of split_tokens."""
    flat = local.values.reshape(local.values.shape[0], -1, local.channels)
    return torch.cat([pseudo[:, None], flat, cls[:, None]], dim=1)


class LocalMixer(nn.Module):
    """Point-wise conv -> GELU -> non-overlapping depth-wise conv -> GELU.

    Concatenates the three modality maps on channels (3C -> C) and reduces
    the spatial grid by the stride, one cell per depth-wise kernel position.
    """

    def __init__(self, channels: int, stride: tuple, bias: bool = True):
        super().__init__()
        self.stride = tuple(stride)
        self.pointwise = nn.Conv2d(3 * channels, channels, kernel_size=1, bias=bias)
        self.depthwise = nn.Conv2d(
            channels,
            channels,
            kernel_size=self.stride,
            stride=self.stride,
            groups=channels,
            bias=bias,
        )

    def forward(self, maps: list) -> torch.Tensor:
        if len(maps) != 3:
            raise ShapeMismatch("local mixer expects the three modality maps")
        shapes = {m.values.shape for m in maps}
        if len(shapes) != 1:
            raise ShapeMismatch(f"modality maps disagree in shape: {shapes}")
        h, w = maps[0].height, maps[0].width
        if h % self.stride[0] or w % self.stride[1]:
            raise ShapeMismatch(f"map {h}x{w} not divisible by stride {self.stride}")
        x = torch.cat([m.values for m in maps], dim=3).permute(0, 3, 1, 2)
        x = torch.nn.functional.gelu(self.pointwise(x))
        x = torch.nn.functional.gelu(self.depthwise(x))
        return x.permute(0, 2, 3, 1)


def normalized_centers(
    map_hw: tuple, stride: tuple, dtype=torch.float32, device=None
) -> torch.Tensor:
    """Centers of the depth-wise receptive fields in normalized coordinates.

    Cell (r, c) covers pixels [r*sh, (r+1)*sh) x [c*sw, (c+1)*sw); its center
    is mapped through x_norm = 2 * x_pix / (dim - 1) - 1.
    """
    h, w = map_hw
    sh, sw = stride
    hs, ws = h // sh, w // sw
    ys = torch.arange(hs, dtype=dtype, device=device) * sh + (sh - 1) / 2.0
    xs = torch.arange(ws, dtype=dtype, device=device) * sw + (sw - 1) / 2.0
    ys = 2.0 * ys / (h - 1) - 1.0 if h > 1 else torch.zeros_like(ys)
    xs = 2.0 * xs / (w - 1) - 1.0 if w > 1 else torch.zeros_like(xs)
    grid_y, grid_x = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([grid_x, grid_y], dim=-1)


def make_grid(
    mixed: torch.Tensor,
    offset_head: nn.Linear,
    scale: float,
    map_hw: tuple,
    stride: tuple,
) -> SamplingGrid:
    """Predict offsets from the mixed map and build the shared sampling grid.

    The raw linear output is interpreted in pixel units of the offset scale:
    a unit raw offset moves the point by `scale` pixels, converted to
    normalized units via 2 / max(H-1, W-1). Positions are clipped to the
    valid [-1, 1] range component-wise.
    """
    if mixed.ndim != 4:
        raise ShapeMismatch(f"expected [B, Hs, Ws, C] mixed map, got {tuple(mixed.shape)}")
    h, w = map_hw
    denom = max(h - 1, w - 1, 1)
    raw = offset_head(mixed)
    offsets = raw * (2.0 * scale / denom)
    refs = normalized_centers(map_hw, stride, dtype=mixed.dtype, device=mixed.device)
    refs = refs.expand(mixed.shape[0], -1, -1, -1)
    positions = torch.clamp(refs + offsets, -1.0, 1.0)
    return SamplingGrid(
        reference_points=refs, offsets=offsets, positions=positions, scale=scale
    )


def bilinear_sample(local: LocalMap, grid: SamplingGrid) -> torch.Tensor:
    """Sample the map at the grid positions; returns [B, N_S, C].

    Uses the four neighbors of each position with weights
    (1-|m-dx|)(1-|n-dy|); exact at integer pixel coordinates. Gradients are
    piecewise linear in the positions; at integer coordinates the
    right-continuous sub-gradient is used (floor is taken before the
    fractional part, so d(dx)/dx = 1 from the right).
    """
    values = local.values
    b, h, w, c = values.shape
    pos = grid.positions.reshape(b, -1, 2)
    x = (pos[..., 0] + 1.0) * (w - 1) / 2.0
    y = (pos[..., 1] + 1.0) * (h - 1) / 2.0

    x0 = x.floor().long().clamp(0, max(w - 2, 0))
    y0 = y.floor().long().clamp(0, max(h - 2, 0))
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    dx = x - x0.to(x.dtype)
    dy = y - y0.to(y.dtype)

    bidx = torch.arange(b, device=values.device)[:, None]
    v00 = values[bidx, y0, x0]
    v10 = values[bidx, y0, x1]
    v01 = values[bidx, y1, x0]
    v11 = values[bidx, y1, x1]

    wx1 = dx[..., None]
    wx0 = 1.0 - wx1
    wy1 = dy[..., None]
    wy0 = 1.0 - wy1
    return wy0 * (wx0 * v00 + wx1 * v10) + wy1 * (wx0 * v01 + wx1 * v11)


class CrossAttentionFusion(nn.Module):
    """One multi-head cross-attention block with a residual connection."""

    def __init__(self, dim: int, heads: int = 4):
        super().__init__()
        if dim % heads:
            raise ShapeMismatch(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def attention(self, queries: torch.Tensor, keys_values: torch.Tensor) -> torch.Tensor:
        b, nq, _ = queries.shape
        ns = keys_values.shape[1]
        dh = self.dim // self.heads

        def heads_view(t, n):
            return t.reshape(b, n, self.heads, dh).transpose(1, 2)

        q = heads_view(self.q_proj(queries), nq)
        k = heads_view(self.k_proj(keys_values), ns)
        v = heads_view(self.v_proj(keys_values), ns)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        mixed = (attn @ v).transpose(1, 2).reshape(b, nq, self.dim)
        return self.out_proj(mixed)

    def forward(self, queries: torch.Tensor, keys_values: torch.Tensor) -> torch.Tensor:
        if queries.ndim != 3 or keys_values.ndim != 3:
            raise ShapeMismatch("fusion expects [B, N, C] token tensors")
        if queries.shape[-1] != self.dim or keys_values.shape[-1] != self.dim:
            raise ShapeMismatch("token width does not match fusion dim")
        return queries + self.attention(queries, keys_values)


class CooperativeAggregation(nn.Module):
    """Full block: split -> mix -> offsets -> shared sampling -> fusion."""

    def __init__(
        self,
        channels: int,
        map_hw: tuple,
        offset_scale: float,
        stride: tuple = None,
        heads: int = 4,
        mixer_bias: bool = True,
    ):
        super().__init__()
        self.map_hw = tuple(map_hw)
        if stride is None:
            stride = (max(self.map_hw[0] // 2, 1), max(self.map_hw[1] // 2, 1))
        self.stride = tuple(stride)
        self.offset_scale = float(offset_scale)
        self.mixer = LocalMixer(channels, self.stride, bias=mixer_bias)
        self.offset_head = nn.Linear(channels, 2)
        # Zero-init so training starts from the identity (reference) grid.
        nn.init.zeros_(self.offset_head.weight)
        nn.init.zeros_(self.offset_head.bias)
        self.fusion = CrossAttentionFusion(channels, heads=heads)

    def forward(self, modality_tokens: list, global_tokens: torch.Tensor):
        """modality_tokens: [B, N_l+2, C] per modality in (RGB, NIR, TIR) order.

        Returns (sampled tokens [B, 3*N_S, C], fused tokens [B, 6, C], grid).
        The identical grid object is consumed by all three samplers.
        """
        h, w = self.map_hw
        locals_ = [split_tokens(t, h, w)[2] for t in modality_tokens]
        mixed = self.mixer.forward(locals_)
        grid = make_grid(mixed, self.offset_head, self.offset_scale, self.map_hw, self.stride)
        sampled = [bilinear_sample(m, grid) for m in locals_]
        sampled_tokens = torch.cat(sampled, dim=1)
        fused = self.fusion(global_tokens, sampled_tokens)
        return sampled_tokens, fused, grid


def grid_export(sample_ids: list, grid: SamplingGrid) -> list:
    """Serializable per-sample offset records for external visualization."""
    out = []
    for i, sample_id in enumerate(sample_ids):
        out.append(
            {
                "sample_id": sample_id,
                "reference_points": grid.reference_points[i].detach().tolist(),
                "offsets": grid.offsets[i].detach().tolist(),
                "positions": grid.positions[i].detach().tolist(),
            }
        )
    return out
