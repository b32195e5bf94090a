"""Prosodic (F0) and spectral branches, each reducing an utterance to one vector."""

from __future__ import annotations

import enum

import numpy as np
import torch
from torch import nn

from .diffcore import Linear, TransformerEncoderLayer, glorot_, mean_pool
from .errors import ConfigError, DataError, IngestionError

F0_BINS = 256
F0_FMIN = 50.0
F0_FMAX = 1100.0
F0_EMBED_DIM = 256
BRANCH_DIM = 512
CNN_CHANNELS = 256
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def hz_to_mel(hz):
    """HTK mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def quantize_f0(
    hz: np.ndarray,
    fmin: float = F0_FMIN,
    fmax: float = F0_FMAX,
    bins: int = F0_BINS,
) -> np.ndarray:
    """Map an F0 track in Hz to bin indices; unvoiced frames (<= 0 Hz) get index ``bins``."""
    if not 0 < fmin < fmax:
        raise ConfigError(f"need 0 < fmin < fmax, got fmin={fmin}, fmax={fmax}")
    if bins < 2:
        raise ConfigError(f"need at least 2 bins, got {bins}")
    hz = np.asarray(hz, dtype=np.float64).reshape(-1)
    if hz.size == 0:
        raise IngestionError("empty F0 track")
    lo, hi = hz_to_mel(fmin), hz_to_mel(fmax)
    voiced = hz > 0
    pos = (hz_to_mel(np.where(voiced, hz, fmin)) - lo) / (hi - lo) * bins
    idx = np.clip(np.floor(pos), 0, bins - 1).astype(np.int64)
    return np.where(voiced, idx, bins)


class F0EmbedBranch(nn.Module):
    """Quantized-F0 lookup, per-frame projection, mean over time."""

    def __init__(self, bins: int = F0_BINS, embed_dim: int = F0_EMBED_DIM, out_dim: int = BRANCH_DIM):
        super().__init__()
        self.bins = bins
        self.table = nn.Parameter(torch.randn(bins + 1, embed_dim))
        with torch.no_grad():
            self.table[bins].zero_()
        self.proj = Linear(embed_dim, out_dim)
        self.out_dim = out_dim

    def forward(self, indices: torch.Tensor) -> torch.Tensor:
        indices = torch.as_tensor(indices).reshape(-1)
        bad = ((indices < 0) | (indices > self.bins)).nonzero().flatten()
        if bad.numel():
            pos = int(bad[0])
            raise DataError(
                f"F0 index {int(indices[pos])} at frame {pos} outside [0, {self.bins}]"
            )
        return mean_pool(self.proj(self.table[indices]))


class F0CNNBranch(nn.Module):
    """Raw-F0 baseline: conv1d(k=3, same padding), batch norm, ReLU, projection, mean."""

    def __init__(self, channels: int = CNN_CHANNELS, out_dim: int = BRANCH_DIM):
        super().__init__()
        self.kernel = nn.Parameter(glorot_(torch.empty(3, channels)))
        self.conv_bias = nn.Parameter(torch.zeros(channels))
        self.bn_scale = nn.Parameter(torch.ones(channels))
        self.bn_shift = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))
        self.proj = Linear(channels, out_dim)
        self.out_dim = out_dim

    def forward(self, track: torch.Tensor) -> torch.Tensor:
        track = track.reshape(-1)
        n = track.shape[0]
        if n < 3:
            raise DataError(f"F0 CNN branch needs at least 3 frames, got {n}")
        padded = torch.cat([track.new_zeros(1), track, track.new_zeros(1)])
        windows = torch.stack([padded[:-2], padded[1:-1], padded[2:]], dim=1)
        h = windows @ self.kernel + self.conv_bias
        if self.training:
            # statistics over the frames of this utterance
            mu = h.mean(dim=0)
            var = h.var(dim=0, unbiased=False)
            with torch.no_grad():
                self.running_mean.mul_(1 - BN_MOMENTUM).add_(BN_MOMENTUM * mu.detach())
                self.running_var.mul_(1 - BN_MOMENTUM).add_(
                    BN_MOMENTUM * h.detach().var(dim=0, unbiased=True)
                )
        else:
            mu, var = self.running_mean, self.running_var
        h = (h - mu) / torch.sqrt(var + BN_EPS) * self.bn_scale + self.bn_shift
        return mean_pool(self.proj(torch.relu(h)))


class SpectralMode(str, enum.Enum):
    PRECOMPUTED = "PRECOMPUTED"
    LOCAL = "LOCAL"


class SpectralBranch(nn.Module):
    """Spectral embedding: pass-through of a precomputed vector, or a small local encoder.

    LOCAL: band projection to ``width``, one transformer layer, mean pool,
    projection to ``out_dim``.
    """

    def __init__(
        self,
        mode: SpectralMode | str = SpectralMode.LOCAL,
        bands: int = 64,
        out_dim: int = BRANCH_DIM,
        width: int = 128,
        heads: int = 4,
    ):
        super().__init__()
        self.mode = SpectralMode(mode)
        self.out_dim = out_dim
        if self.mode is SpectralMode.LOCAL:
            self.band_proj = Linear(bands, width)
            self.encoder = TransformerEncoderLayer(width, heads)
            self.out = Linear(width, out_dim)

    def forward(
        self, mel: torch.Tensor | None = None, precomputed: torch.Tensor | None = None
    ) -> torch.Tensor:
        if self.mode is SpectralMode.PRECOMPUTED:
            if precomputed is None:
                raise IngestionError("spectral branch is PRECOMPUTED but no embedding was loaded")
            vec = precomputed.reshape(-1)
            if vec.shape[0] != self.out_dim:
                raise DataError(
                    f"precomputed spectral embedding has dim {vec.shape[0]}, expected {self.out_dim}"
                )
            return vec
        if mel is None or mel.shape[0] < 1:
            raise DataError("spectral branch needs a mel filterbank with at least one frame")
        return self.out(mean_pool(self.encoder(self.band_proj(mel))))
