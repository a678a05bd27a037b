"""U-Net backbone with convolutional-modulation bottleneck and (Psi, Delta) heads."""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from aircouple.errors import ShapeError
from aircouple.fusion import BilinearFusion, sphere_pad
from aircouple.grid import as_utc

CHECKPOINT_VERSION = 1
DAY_WAVELENGTH = 366.0
HOUR_WAVELENGTH = 24.0


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    n_pollutants: int
    n_met: int
    n_static: int = 5
    fusion_hidden: int = 32
    fused_channels: int = 16
    receptive_field: int = 3
    fusion_augment: bool = True
    encoder_depth: int = 4
    base_width: int = 8
    width_mult: int = 2
    n_hidden_blocks: int = 4
    hidden_kernel: int = 11
    mlp_ratio: int = 2
    time_embed_dim: int = 32
    psi_bound: float = 3.0
    angular_factor: float = 2 * math.pi

    def __post_init__(self):
        if self.encoder_depth != 4:
            raise ValueError("encoder_depth is fixed at 4")
        if self.hidden_kernel % 2 == 0:
            raise ValueError("hidden_kernel must be odd")

    @property
    def multiple(self) -> int:
        return 2 ** self.encoder_depth

    @property
    def p_channels(self) -> int:
        return 2 * self.n_pollutants + self.n_static

    @property
    def q_channels(self) -> int:
        return 2 * self.n_met

    def widths(self) -> list[int]:
        return [self.base_width * self.width_mult ** level for level in range(self.encoder_depth + 1)]

    @classmethod
    def full_scale(cls) -> ModelConfig:
        """73 pollutant / 70 met channels; about 178 M parameters."""
        return cls(
            n_pollutants=73, n_met=70, n_static=5, fusion_hidden=512, fused_channels=256,
            base_width=98, n_hidden_blocks=4, time_embed_dim=256,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


def time_embed(timestamp, angular_factor=2 * math.pi) -> np.ndarray:
    """[cos, sin] of day-of-year / 366 and hour-of-day / 24, scaled by ``angular_factor``."""
    t = as_utc(timestamp)
    doy = t.timetuple().tm_yday - 1
    hod = t.hour + t.minute / 60 + t.second / 3600
    a = angular_factor
    return np.array([
        math.cos(a * doy / DAY_WAVELENGTH), math.sin(a * doy / DAY_WAVELENGTH),
        math.cos(a * hod / HOUR_WAVELENGTH), math.sin(a * hod / HOUR_WAVELENGTH),
    ])


@dataclasses.dataclass(frozen=True)
class CropRecord:
    top: int
    left: int
    n_lat: int
    n_lon: int


def pad_to_multiple(x, multiple=16):
    """Pad the last two axes up to a multiple: replicate rows, wrap columns.

    Works on torch tensors and numpy arrays shaped ``[..., M, N]``. Padding
    is split as evenly as possible, the extra cell going to the bottom/right.
    """
    m, n = x.shape[-2:]
    pm = -m % multiple
    pn = -n % multiple
    record = CropRecord(pm // 2, pn // 2, m, n)
    if isinstance(x, np.ndarray):
        rows = np.clip(np.arange(-record.top, m + pm - record.top), 0, m - 1)
        cols = np.arange(-record.left, n + pn - record.left) % n
        return x[..., rows, :][..., cols], record
    rows = torch.arange(-record.top, m + pm - record.top, device=x.device).clamp(0, m - 1)
    cols = torch.arange(-record.left, n + pn - record.left, device=x.device) % n
    return x.index_select(-2, rows).index_select(-1, cols), record


def crop(x, record: CropRecord):
    return x[..., record.top:record.top + record.n_lat, record.left:record.left + record.n_lon]


class SphereConv(nn.Module):
    """Convolution with wrap-around longitude and replicated latitude padding."""

    def __init__(self, cin, cout, k=3, groups=1):
        super().__init__()
        self.pad = k // 2
        self.conv = nn.Conv2d(cin, cout, k, groups=groups)

    def forward(self, x):
        return self.conv(sphere_pad(x, self.pad, self.pad))


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel axis of ``B x C x M x N``."""

    def __init__(self, ch, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(ch))
        self.bias = nn.Parameter(torch.zeros(ch))
        self.eps = eps

    def forward(self, x):
        mean = x.mean(1, keepdim=True)
        var = (x - mean).pow(2).mean(1, keepdim=True)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, temb_dim):
        super().__init__()
        self.conv1 = SphereConv(cin, cout)
        self.conv2 = SphereConv(cout, cout)
        self.norm1 = nn.GroupNorm(1, cout)
        self.norm2 = nn.GroupNorm(1, cout)
        self.time = nn.Linear(temb_dim, cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(x) + self.time(temb)[:, :, None, None]
        h = F.gelu(self.norm1(h))
        h = F.gelu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


class ConvModBlock(nn.Module):
    """Convolutional modulation: large-kernel depthwise output gates a linear value."""

    def __init__(self, dim, temb_dim, kernel=11, mlp_ratio=2):
        super().__init__()
        self.time = nn.Linear(temb_dim, dim)
        self.norm1 = LayerNorm2d(dim)
        self.a_in = nn.Conv2d(dim, dim, 1)
        self.a_dw = SphereConv(dim, dim, kernel, groups=dim)
        self.v = nn.Conv2d(dim, dim, 1)
        self.proj = nn.Conv2d(dim, dim, 1)
        self.norm2 = LayerNorm2d(dim)
        self.fc1 = nn.Conv2d(dim, dim * mlp_ratio, 1)
        self.fc2 = nn.Conv2d(dim * mlp_ratio, dim, 1)

    def forward(self, x, temb):
        x = x + self.time(temb)[:, :, None, None]
        h = self.norm1(x)
        a = self.a_dw(F.gelu(self.a_in(h)))
        x = x + self.proj(a * self.v(h))
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x


class UNet(nn.Module):
    """Depth-4 encoder/decoder. Input spatial dims must be multiples of 16."""

    def __init__(self, in_channels, out_channels, config: ModelConfig):
        super().__init__()
        w = config.widths()
        td = config.time_embed_dim
        self.multiple = config.multiple
        self.psi_bound = config.psi_bound
        self.time_mlp = nn.Sequential(nn.Linear(4, td), nn.GELU(), nn.Linear(td, td))
        self.stem = SphereConv(in_channels, w[0])
        self.enc = nn.ModuleList([ConvBlock(w[0], w[0], td)])
        self.down = nn.ModuleList()
        for level in range(1, len(w)):
            self.down.append(nn.Conv2d(w[level - 1], w[level], 2, stride=2))
            self.enc.append(ConvBlock(w[level], w[level], td))
        self.hidden = nn.ModuleList(
            [ConvModBlock(w[-1], td, config.hidden_kernel, config.mlp_ratio) for _ in range(config.n_hidden_blocks)]
        )
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for level in range(len(w) - 1, 0, -1):
            self.up.append(SphereConv(w[level], w[level - 1]))
            self.dec.append(ConvBlock(2 * w[level - 1], w[level - 1], td))
        self.psi_head = nn.Conv2d(w[0], out_channels, 1)
        self.delta_head = nn.Conv2d(w[0], out_channels, 1)
        # start as the identity on the base: Psi = exp(0) = 1, Delta = 0
        for head in (self.psi_head, self.delta_head):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, x, emb):
        m, n = x.shape[-2:]
        if m % self.multiple or n % self.multiple:
            raise ShapeError(f"input {m}x{n} is not padded to a multiple of {self.multiple}")
        temb = self.time_mlp(emb)
        h = self.enc[0](self.stem(x), temb)
        skips = [h]
        for down, block in zip(self.down, self.enc[1:]):
            h = block(down(h), temb)
            skips.append(h)
        for block in self.hidden:
            h = block(h, temb)
        for up, block, skip in zip(self.up, self.dec, reversed(skips[:-1])):
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = block(torch.cat([h, skip], dim=1), temb)
        s = self.psi_head(h)
        psi = torch.exp(self.psi_bound * torch.tanh(s / self.psi_bound))
        return psi, self.delta_head(h)


class ForecastModel(nn.Module):
    """Fusion layer feeding the U-Net; maps one step's inputs to (Psi, Delta).

    Inputs are channel-first batches: ``p_in`` holds ``[P^{t-1}, P^t, statics]``
    and ``q_in`` holds ``[Q^t, Q^{t+1}]``, both normalized.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.fusion = BilinearFusion(
            config.p_channels, config.q_channels, config.fusion_hidden, config.fused_channels,
            r=config.receptive_field, augment=config.fusion_augment,
        )
        self.unet = UNet(config.fused_channels, config.n_pollutants, config)

    def forward(self, p_in, q_in, emb):
        x = self.fusion(p_in, q_in)
        x, record = pad_to_multiple(x, self.config.multiple)
        psi, delta = self.unet(x, emb)
        return crop(psi, record), crop(delta, record)


def count_parameters(config: ModelConfig) -> int:
    """Parameter count without allocating weights."""
    with torch.device("meta"):
        model = ForecastModel(config)
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(path, model: ForecastModel, norm_stats=None, **extra):
    payload = {
        "format": "aircouple-checkpoint",
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "norm_stats": norm_stats.to_dict() if norm_stats is not None else None,
        **extra,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path, map_location="cpu"):
    """Returns ``(model, payload)``; the model is in eval mode."""
    payload = torch.load(path, map_location=map_location, weights_only=False)
    if payload.get("format") != "aircouple-checkpoint":
        raise ValueError(f"{path}: not a checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    model = ForecastModel(ModelConfig.from_dict(payload["model_config"]))
    first = next(iter(payload["state_dict"].values()))
    model.to(first.dtype)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
