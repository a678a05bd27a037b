"""Low-rank bilinear pooling of pollutant and meteorological stacks.

Pointwise form::

    x = W_x^T (W_p^T p  *  W_q^T q)

The receptive-field form applies the same map to the flattened r x r
neighbourhood of every cell. Neighbourhood vectors are flattened in
(row offset, column offset, channel) order, so row ``(a*r + b)*K + k`` of
``W_p`` multiplies channel ``k`` at offset ``(a - r//2, b - r//2)``. Of the
unflattened output patch only the centre cell is kept, which makes ``W_x``
``H x G`` for every ``r``. Boundaries wrap in longitude and replicate in
latitude.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from aircouple.errors import ShapeError


@dataclasses.dataclass(frozen=True)
class FusionParams:
    W_p: np.ndarray
    W_q: np.ndarray
    W_x: np.ndarray
    r: int = 1

    def __post_init__(self):
        if self.r < 1 or self.r % 2 == 0:
            raise ValueError(f"receptive field must be odd, got {self.r}")
        rr = self.r * self.r
        if self.W_p.ndim != 2 or self.W_q.ndim != 2 or self.W_x.ndim != 2:
            raise ShapeError("fusion weights must be matrices")
        if self.W_p.shape[0] % rr or self.W_q.shape[0] % rr:
            raise ShapeError(f"input rows must be a multiple of r*r={rr}")
        if not (self.W_p.shape[1] == self.W_q.shape[1] == self.W_x.shape[0]):
            raise ShapeError("W_p, W_q and W_x disagree on the hidden width")

    @property
    def hidden(self):
        return self.W_x.shape[0]

    @property
    def out_channels(self):
        return self.W_x.shape[1]

    @property
    def p_channels(self):
        return self.W_p.shape[0] // (self.r * self.r)

    @property
    def q_channels(self):
        return self.W_q.shape[0] // (self.r * self.r)

    @classmethod
    def random(cls, p_channels, q_channels, hidden, out_channels, r=1, rng=None):
        rng = np.random.default_rng(rng)
        rr = r * r
        return cls(
            rng.standard_normal((rr * p_channels, hidden)) / math.sqrt(rr * p_channels),
            rng.standard_normal((rr * q_channels, hidden)) / math.sqrt(rr * q_channels),
            rng.standard_normal((hidden, out_channels)) / math.sqrt(hidden),
            r,
        )

    def centre_only(self) -> FusionParams:
        """Receptive-field weights reduced to their centre block (as r=1)."""
        c = (self.r * self.r) // 2
        kp, kq = self.p_channels, self.q_channels
        return FusionParams(self.W_p[c * kp:(c + 1) * kp], self.W_q[c * kq:(c + 1) * kq], self.W_x, 1)


def fuse_pointwise(p, q, params: FusionParams):
    """Fuse one cell's vectors (or any leading batch of them)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if params.r != 1:
        raise ValueError("fuse_pointwise needs r=1 params")
    if p.shape[-1] != params.W_p.shape[0] or q.shape[-1] != params.W_q.shape[0]:
        raise ShapeError(
            f"vectors of length {p.shape[-1]}, {q.shape[-1]} do not match "
            f"weights {params.W_p.shape}, {params.W_q.shape}"
        )
    return ((p @ params.W_p) * (q @ params.W_q)) @ params.W_x


def bilinear_oracle(p, q, params: FusionParams):
    """Explicit bilinear form x_g = p^T B_g q with B_g = W_p diag(W_x[:, g]) W_q^T.

    Built by plain summation; deliberately independent of the factored path.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    W_p, W_q, W_x = params.W_p, params.W_q, params.W_x
    n_p, hidden = W_p.shape
    n_q = W_q.shape[0]
    out = np.zeros(W_x.shape[1])
    for g in range(W_x.shape[1]):
        B = np.zeros((n_p, n_q))
        for a in range(n_p):
            for b in range(n_q):
                s = 0.0
                for h in range(hidden):
                    s += W_p[a, h] * W_x[h, g] * W_q[b, h]
                B[a, b] = s
        total = 0.0
        for a in range(n_p):
            for b in range(n_q):
                total += p[a] * B[a, b] * q[b]
        out[g] = total
    return out


def neighbourhoods(field, r):
    """``M x N x K`` -> ``M x N x (r*r*K)`` flattened neighbourhoods."""
    h = r // 2
    padded = np.pad(field, ((h, h), (0, 0), (0, 0)), mode="edge")
    padded = np.pad(padded, ((0, 0), (h, h), (0, 0)), mode="wrap")
    m, n, k = field.shape
    out = np.empty((m, n, r, r, k), dtype=np.result_type(field, np.float64))
    for a in range(r):
        for b in range(r):
            out[:, :, a, b, :] = padded[a:a + m, b:b + n, :]
    return out.reshape(m, n, r * r * k)


def fuse_field(P_in, Q_in, params: FusionParams):
    """Fuse ``M x N x 2C'`` and ``M x N x 2D`` stacks into ``M x N x G``."""
    P_in = np.asarray(P_in, dtype=np.float64)
    Q_in = np.asarray(Q_in, dtype=np.float64)
    if P_in.shape[:2] != Q_in.shape[:2]:
        raise ShapeError(f"grids differ: {P_in.shape[:2]} vs {Q_in.shape[:2]}")
    if P_in.shape[2] != params.p_channels or Q_in.shape[2] != params.q_channels:
        raise ShapeError(
            f"channels {P_in.shape[2]}, {Q_in.shape[2]} do not match params "
            f"({params.p_channels}, {params.q_channels})"
        )
    vp = neighbourhoods(P_in, params.r)
    vq = neighbourhoods(Q_in, params.r)
    return ((vp @ params.W_p) * (vq @ params.W_q)) @ params.W_x


def sphere_pad(x: torch.Tensor, pad_lat: int, pad_lon: int) -> torch.Tensor:
    """Pad ``[..., M, N]``: replicate rows, wrap columns (any pad width)."""
    m, n = x.shape[-2:]
    if pad_lon:
        cols = torch.arange(-pad_lon, n + pad_lon, device=x.device) % n
        x = x.index_select(-1, cols)
    if pad_lat:
        rows = torch.arange(-pad_lat, m + pad_lat, device=x.device).clamp(0, m - 1)
        x = x.index_select(-2, rows)
    return x


class BilinearFusion(nn.Module):
    """Torch layer for the receptive-field fusion, on ``B x K x M x N`` tensors.

    ``augment`` appends a constant-one channel to both inputs before the
    mapping, so the fused output also carries terms linear in each modality
    (and survives an all-zero meteorology stack).
    """

    def __init__(self, p_channels, q_channels, hidden, out_channels, r=3, augment=True):
        super().__init__()
        if r < 1 or r % 2 == 0:
            raise ValueError(f"receptive field must be odd, got {r}")
        self.r = r
        self.augment = augment
        self.p_channels = p_channels
        self.q_channels = q_channels
        kp = p_channels + int(augment)
        kq = q_channels + int(augment)
        self.W_p = nn.Parameter(torch.randn(r * r * kp, hidden) / math.sqrt(r * r * kp))
        self.W_q = nn.Parameter(torch.randn(r * r * kq, hidden) / math.sqrt(r * r * kq))
        self.W_x = nn.Parameter(torch.randn(hidden, out_channels) / math.sqrt(hidden))

    def _kernel(self, W, k):
        # (r, r, K, H) -> (H, K, r, r) conv weight
        return W.reshape(self.r, self.r, k, -1).permute(3, 2, 0, 1)

    def _map(self, x, W):
        if self.augment:
            x = torch.cat([x, torch.ones_like(x[:, :1])], dim=1)
        h = self.r // 2
        return F.conv2d(sphere_pad(x, h, h), self._kernel(W, x.shape[1]))

    def forward(self, p, q):
        if p.shape[1] != self.p_channels or q.shape[1] != self.q_channels:
            raise ShapeError(
                f"fusion expects {self.p_channels} + {self.q_channels} channels, "
                f"got {p.shape[1]} + {q.shape[1]}"
            )
        if p.shape[-2:] != q.shape[-2:]:
            raise ShapeError(f"grids differ: {tuple(p.shape[-2:])} vs {tuple(q.shape[-2:])}")
        hidden = self._map(p, self.W_p) * self._map(q, self.W_q)
        return torch.einsum("bhmn,hg->bgmn", hidden, self.W_x)

    def params(self) -> FusionParams:
        """Weights as numpy, for the augmented input vectors."""
        return FusionParams(
            self.W_p.detach().double().cpu().numpy(),
            self.W_q.detach().double().cpu().numpy(),
            self.W_x.detach().double().cpu().numpy(),
            self.r,
        )
