"""Octave-equivariant convnet over cropped constant-Q inputs.

The backbone is fully convolutional in frequency (84 rows in, 84 rows out) so
that shifting the input along the pitch axis shifts the output feature vector
the same way. Pooling into a 12-bin profile is the non-trainable operator
`octave_pool_g`: sum the 84-dim feature over its 7 octaves, then softmax.
The two-channel variant feeds per-channel octave sums through running-stat
channel normalization and a single softmax over all 24 logits, yielding a
12x2 key/mode matrix whose marginals are `lambda_profile` (pitch classes,
equivariant) and `mode_marginal` (mode, invariant).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

N_CHROMA = 12
N_OCTAVES = 7
N_ROWS = N_CHROMA * N_OCTAVES  # 84


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class ChromaNetConfig:
    n_blocks: int = 7
    channels: tuple[int, ...] = (8, 16, 32, 32, 64, 64, 64)
    time_strides: tuple[int, ...] = (2, 2, 2, 2, 2, 2, 2)
    out_channels: int = 1
    ablation_fc_head: bool = False
    norm_momentum: float = 0.1
    norm_eps: float = 1e-5
    head_init: str = "zero"

    def __post_init__(self):
        if len(self.channels) != self.n_blocks:
            raise NetworkError("channels must list one width per block")
        if len(self.time_strides) != self.n_blocks:
            raise NetworkError("time_strides must list one stride per block")
        if self.out_channels not in (1, 2):
            raise NetworkError("out_channels must be 1 (profile) or 2 (key/mode)")
        if any(c <= 0 for c in self.channels) or any(s <= 0 for s in self.time_strides):
            raise NetworkError("channel widths and strides must be positive")
        if self.ablation_fc_head and self.out_channels != 1:
            raise NetworkError("the dense-head ablation is defined for the 12-bin variant")
        if self.head_init not in ("zero", "normal"):
            raise NetworkError("head_init must be 'zero' or 'normal'")


class _LayerNorm2d(nn.Module):
    """LayerNorm over the channel dim of NCHW tensors (per-position)."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class ConvNeXtBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dwconv = nn.Conv2d(dim, dim, kernel_size=7, padding=0, groups=dim)
        self.norm = nn.LayerNorm(dim)
        self.pwconv1 = nn.Linear(dim, 4 * dim)
        self.act = nn.GELU()
        self.pwconv2 = nn.Linear(4 * dim, dim)

    def forward(self, x):
        residual = x
        # zero-pad time, wrap frequency: circular rows keep the stack exactly
        # equivariant to circular pitch shifts, so a non-uniform output cannot
        # be synthesized from window-edge artifacts independently of content
        x = F.pad(x, (3, 3, 0, 0))
        x = F.pad(x, (0, 0, 3, 3), mode="circular")
        x = self.dwconv(x)
        x = x.permute(0, 2, 3, 1)
        x = self.norm(x)
        x = self.pwconv2(self.act(self.pwconv1(x)))
        x = x.permute(0, 3, 1, 2)
        return residual + x


class _TimeDownsample(nn.Module):
    """Strided conv along time only; frequency rows pass through untouched."""

    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel_size=(1, 3), stride=(1, stride),
                              padding=(0, 1))
        self.norm = _LayerNorm2d(cout)

    def forward(self, x):
        return self.norm(self.conv(x))


class ModeNorm(nn.Module):
    """Non-learnable per-channel normalization with running statistics.

    Keeps both mode channels active ahead of the joint softmax. Batch
    statistics are used (and folded into the running state) in training mode;
    inference requires previously accumulated statistics.
    """

    def __init__(self, n_channels: int = 2, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.register_buffer("running_mean", torch.zeros(n_channels))
        self.register_buffer("running_var", torch.ones(n_channels))
        self.register_buffer("initialized", torch.zeros(1, dtype=torch.long))

    def forward(self, x):  # x: [B, C, 12]
        if self.training:
            mean = x.mean(dim=(0, 2))
            var = x.var(dim=(0, 2), unbiased=False)
            with torch.no_grad():
                if int(self.initialized.item()) == 0:
                    self.running_mean.copy_(mean)
                    self.running_var.copy_(var)
                    self.initialized.fill_(1)
                else:
                    m = self.momentum
                    self.running_mean.mul_(1 - m).add_(mean, alpha=m)
                    self.running_var.mul_(1 - m).add_(var, alpha=m)
        else:
            if int(self.initialized.item()) == 0:
                raise NetworkError("normalization statistics missing: train or load "
                                   "a checkpoint before inference")
            mean = self.running_mean
            var = self.running_var
        return (x - mean[:, None]) / torch.sqrt(var[:, None] + self.eps)


def octave_pool_g(v: torch.Tensor) -> torch.Tensor:
    """Sum an 84-dim feature over its 7 octaves and softmax to a 12-bin profile.

    Accepts [..., 84]; returns [..., 12]. Non-trainable; exactly equivariant to
    circular shifts by whole rows (mod 84 in, mod 12 out).
    """
    if v.shape[-1] != N_ROWS:
        raise NetworkError(f"bad frequency span: expected {N_ROWS} features, got {v.shape[-1]}")
    sums = v.unflatten(-1, (N_OCTAVES, N_CHROMA)).sum(dim=-2)
    return F.softmax(sums, dim=-1)


def lambda_profile(y: torch.Tensor) -> torch.Tensor:
    """Pitch-class marginal of a [.., 12, 2] key/mode matrix."""
    return y.sum(dim=-1)


def mode_marginal(y: torch.Tensor) -> torch.Tensor:
    """Mode marginal of a [.., 12, 2] key/mode matrix (index 0 major, 1 minor)."""
    return y.sum(dim=-2)


class ChromaNet(nn.Module):
    """Backbone + head. forward() returns the 84-row feature map pooled over time.

    Use `profile(x)` for the 12-bin variant and `key_mode(x)` for the 24-bin
    structured variant, depending on cfg.out_channels.
    """

    def __init__(self, cfg: ChromaNetConfig):
        super().__init__()
        self.cfg = cfg
        blocks = []
        cin = 1
        for width, stride in zip(cfg.channels, cfg.time_strides):
            blocks.append(_TimeDownsample(cin, width, stride))
            blocks.append(ConvNeXtBlock(width))
            cin = width
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Conv2d(cin, cfg.out_channels, kernel_size=1)
        if cfg.head_init == "zero":
            # zero-init so an untrained model emits exactly uniform profiles;
            # note this ties the two mode channels of the 24-bin head (their
            # SSL gradients stay identical), so mode separation then relies on
            # calibration/supervision rather than on the pretext task
            nn.init.zeros_(self.head.weight)
        else:
            nn.init.normal_(self.head.weight, std=0.01)
        nn.init.zeros_(self.head.bias)
        self.mode_norm = ModeNorm(2, cfg.norm_momentum, cfg.norm_eps) \
            if cfg.out_channels == 2 else None
        self.fc_head = nn.Linear(N_ROWS, N_CHROMA) if cfg.ablation_fc_head else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: [B, 1, 84, T] -> features [B, out_channels, 84]."""
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != N_ROWS:
            raise NetworkError(
                f"bad input shape {tuple(x.shape)}: expected [B, 1, {N_ROWS}, T]")
        h = self.blocks(x)
        if h.shape[2] != N_ROWS:
            raise NetworkError("frequency rows were not preserved by the backbone")
        h = self.head(h)
        return h.mean(dim=3)  # global average pooling over time

    def profile(self, x: torch.Tensor) -> torch.Tensor:
        """12-bin profile, [B, 12]. Softmax output sums to 1."""
        if self.cfg.out_channels != 1:
            raise NetworkError("profile() requires out_channels=1")
        v = self.forward(x)[:, 0]  # [B, 84]
        if self.fc_head is not None:
            return F.softmax(self.fc_head(v), dim=-1)
        return octave_pool_g(v)

    def key_mode(self, x: torch.Tensor) -> torch.Tensor:
        """Key/mode matrix, [B, 12, 2]. Entries sum to 1 per item."""
        if self.cfg.out_channels != 2:
            raise NetworkError("key_mode() requires out_channels=2")
        v = self.forward(x)  # [B, 2, 84]
        sums = v.unflatten(-1, (N_OCTAVES, N_CHROMA)).sum(dim=-2)  # [B, 2, 12]
        normed = self.mode_norm(sums)
        logits = normed.permute(0, 2, 1).reshape(v.shape[0], 2 * N_CHROMA)  # q-major
        flat = F.softmax(logits, dim=-1)
        return flat.reshape(v.shape[0], N_CHROMA, 2)


def scaled_channels(base: tuple[int, ...], multiplier: float) -> tuple[int, ...]:
    """Width-scaled copy of a channel tuple (minimum width 2)."""
    return tuple(max(2, int(round(c * multiplier))) for c in base)
