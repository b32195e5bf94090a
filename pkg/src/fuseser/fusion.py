"""Speech/text fusion strategies and the classifier that sits on top of them.

All strategies take the two projected sequences and return a
:class:`FusedRepresentation` whose ``pooled`` vector has ``2 * model_dim``
entries, so any strategy can feed the same classifier.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

from .diffcore import (
    AttentivePool,
    BiGRU,
    GATLayer,
    Linear,
    MultiHeadAttention,
    ReluMLP,
    SwiGLU,
    TransformerEncoderLayer,
    glorot_,
    mean_pool,
)
from .errors import ConfigError, DataError, IngestionError
from .featpipe import (
    F0CNNBranch,
    F0EmbedBranch,
    SpectralBranch,
    SpectralMode,
    quantize_f0,
)


class Strategy(str, enum.Enum):
    SIMPLE = "SIMPLE"
    TRANSFORMER = "TRANSFORMER"
    HCAM = "HCAM"
    MDAT = "MDAT"


class F0Variant(str, enum.Enum):
    QUANT = "QUANT"
    CNN = "CNN"


class MLPKind(str, enum.Enum):
    RELU_DEFAULT = "RELU_DEFAULT"
    SWIGLU = "SWIGLU"


@dataclass
class HeadConfig:
    strategy: Strategy = Strategy.SIMPLE
    num_classes: int = 8
    speech_dim: int = 64
    text_dim: int = 48
    model_dim: int = 64
    heads: Optional[int] = None
    use_f0: bool = False
    f0_variant: F0Variant = F0Variant.QUANT
    use_spectral: bool = False
    spectral_mode: SpectralMode = SpectralMode.LOCAL
    mel_bands: int = 16
    mlp: MLPKind = MLPKind.RELU_DEFAULT
    mlp_hidden: int = 128
    dropout: float = 0.1
    # branch widths; the defaults are the published sizes
    f0_bins: int = 256
    f0_embed_dim: int = 256
    branch_dim: int = 512
    cnn_channels: int = 256
    spectral_width: int = 128
    spectral_heads: int = 4

    def __post_init__(self) -> None:
        self.strategy = Strategy(self.strategy)
        self.f0_variant = F0Variant(self.f0_variant)
        self.spectral_mode = SpectralMode(self.spectral_mode)
        self.mlp = MLPKind(self.mlp)
        if self.heads is None:
            self.heads = 8 if self.strategy is Strategy.MDAT else 4
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.heads < 1 or self.model_dim % self.heads:
            raise ConfigError(
                f"model_dim {self.model_dim} is not divisible by heads {self.heads}"
            )
        if self.strategy is Strategy.HCAM and self.model_dim % 2:
            raise ConfigError(f"HCAM needs an even model_dim, got {self.model_dim}")
        for name in ("speech_dim", "text_dim", "model_dim", "mlp_hidden", "mel_bands"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, enum.Enum):
                d[k] = v.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HeadConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown head config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FusedRepresentation:
    speech_refined: torch.Tensor
    text_refined: torch.Tensor
    pooled: torch.Tensor
    attention: dict[str, torch.Tensor] = field(default_factory=dict)


class ModalityProjection(nn.Module):
    def __init__(self, speech_dim: int, text_dim: int, model_dim: int):
        super().__init__()
        self.speech = Linear(speech_dim, model_dim)
        self.text = Linear(text_dim, model_dim)

    def forward(self, speech: torch.Tensor, text: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        for name, x, lin in (("speech", speech, self.speech), ("text", text, self.text)):
            if x.dim() != 2 or x.shape[1] != lin.in_dim:
                raise IngestionError(
                    f"{name} features have shape {tuple(x.shape)}, expected (T, {lin.in_dim})"
                )
        return self.speech(speech), self.text(text)


class SimpleFusion(nn.Module):
    def forward(self, speech: torch.Tensor, text: torch.Tensor) -> FusedRepresentation:
        return FusedRepresentation(
            speech, text, torch.cat([mean_pool(speech), mean_pool(text)])
        )


class TransformerFusion(nn.Module):
    """One shared encoder layer over the time-concatenated sequence."""

    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.type_embed = nn.Parameter(glorot_(torch.empty(2, dim)))
        self.encoder = TransformerEncoderLayer(dim, heads, dropout)

    def forward(self, speech: torch.Tensor, text: torch.Tensor) -> FusedRepresentation:
        n_s = speech.shape[0]
        joint = torch.cat([speech + self.type_embed[0], text + self.type_embed[1]])
        out = self.encoder(joint)
        s, t = out[:n_s], out[n_s:]
        return FusedRepresentation(s, t, torch.cat([mean_pool(s), mean_pool(t)]))


class HCAMFusion(nn.Module):
    """BiGRU + self-attention per modality, cross-attention both ways, attentive pooling."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.gru_s = BiGRU(dim, dim // 2)
        self.gru_t = BiGRU(dim, dim // 2)
        self.self_s = MultiHeadAttention(dim, 1)
        self.self_t = MultiHeadAttention(dim, 1)
        self.cross_s = MultiHeadAttention(dim, heads)
        self.cross_t = MultiHeadAttention(dim, heads)
        self.pool_s = AttentivePool(dim)
        self.pool_t = AttentivePool(dim)

    def forward(self, speech: torch.Tensor, text: torch.Tensor) -> FusedRepresentation:
        s = self.gru_s(speech)
        t = self.gru_t(text)
        s = s + self.self_s(s, s, s)[0]
        t = t + self.self_t(t, t, t)[0]
        s_ctx, w_st = self.cross_s(s, t, t)
        t_ctx, w_ts = self.cross_t(t, s, s)
        s, t = s + s_ctx, t + t_ctx
        pooled = torch.cat([self.pool_s(s), self.pool_t(t)])
        return FusedRepresentation(s, t, pooled, {"speech_to_text": w_st, "text_to_speech": w_ts})


class MDATFusion(nn.Module):
    """GAT per modality, cross-attention both ways, one encoder layer per modality."""

    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.gat_s = GATLayer(dim, dim)
        self.gat_t = GATLayer(dim, dim)
        self.cross_s = MultiHeadAttention(dim, heads)
        self.cross_t = MultiHeadAttention(dim, heads)
        self.enc_s = TransformerEncoderLayer(dim, heads, dropout)
        self.enc_t = TransformerEncoderLayer(dim, heads, dropout)

    def forward(self, speech: torch.Tensor, text: torch.Tensor) -> FusedRepresentation:
        g_s, a_s = self.gat_s(speech)
        g_t, a_t = self.gat_t(text)
        # residual keeps frames distinct; a fully connected GAT alone averages them together
        s, t = speech + g_s, text + g_t
        s_ctx, w_st = self.cross_s(s, t, t)
        t_ctx, w_ts = self.cross_t(t, s, s)
        s = self.enc_s(s + s_ctx)
        t = self.enc_t(t + t_ctx)
        pooled = torch.cat([mean_pool(s), mean_pool(t)])
        attn = {"gat_speech": a_s, "gat_text": a_t, "speech_to_text": w_st, "text_to_speech": w_ts}
        return FusedRepresentation(s, t, pooled, attn)


def build_fusion(cfg: HeadConfig) -> nn.Module:
    if cfg.strategy is Strategy.SIMPLE:
        return SimpleFusion()
    if cfg.strategy is Strategy.TRANSFORMER:
        return TransformerFusion(cfg.model_dim, cfg.heads, cfg.dropout)
    if cfg.strategy is Strategy.HCAM:
        return HCAMFusion(cfg.model_dim, cfg.heads)
    return MDATFusion(cfg.model_dim, cfg.heads, cfg.dropout)


class SERModel(nn.Module):
    """Projection, fusion, optional F0/spectral branches and the classifier head."""

    def __init__(self, cfg: HeadConfig):
        super().__init__()
        self.cfg = cfg
        self.project = ModalityProjection(cfg.speech_dim, cfg.text_dim, cfg.model_dim)
        self.fusion = build_fusion(cfg)
        in_dim = 2 * cfg.model_dim
        self.f0 = None
        self.spectral = None
        if cfg.use_f0:
            if cfg.f0_variant is F0Variant.QUANT:
                self.f0 = F0EmbedBranch(cfg.f0_bins, cfg.f0_embed_dim, cfg.branch_dim)
            else:
                self.f0 = F0CNNBranch(cfg.cnn_channels, cfg.branch_dim)
            in_dim += cfg.branch_dim
        if cfg.use_spectral:
            self.spectral = SpectralBranch(
                cfg.spectral_mode, cfg.mel_bands, cfg.branch_dim,
                cfg.spectral_width, cfg.spectral_heads,
            )
            in_dim += cfg.branch_dim
        self.head_in_dim = in_dim
        if cfg.mlp is MLPKind.SWIGLU:
            self.head = SwiGLU(in_dim, cfg.mlp_hidden, cfg.num_classes, cfg.dropout)
        else:
            self.head = ReluMLP(in_dim, cfg.mlp_hidden, cfg.num_classes, cfg.dropout)

    def fuse(self, speech: torch.Tensor, text: torch.Tensor) -> FusedRepresentation:
        return self.fusion(*self.project(speech, text))

    def classify(
        self,
        fused: FusedRepresentation,
        f0: torch.Tensor | None = None,
        spectral: torch.Tensor | None = None,
    ) -> torch.Tensor:
        parts = [fused.pooled]
        if self.f0 is not None:
            if f0 is None:
                raise DataError("F0 branch is enabled but no F0 embedding was supplied")
            parts.append(f0)
        if self.spectral is not None:
            if spectral is None:
                raise DataError("spectral branch is enabled but no spectral embedding was supplied")
            parts.append(spectral)
        return self.head(torch.cat(parts))

    def forward(
        self,
        speech: torch.Tensor,
        text: torch.Tensor,
        f0: torch.Tensor | None = None,
        mel: torch.Tensor | None = None,
        spectral: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Logits for one utterance.

        ``f0`` is a bin-index track for the QUANT variant and a Hz track for CNN
        (see :meth:`prepare`).
        """
        fused = self.fuse(speech, text)
        f0_vec = spec_vec = None
        if self.f0 is not None:
            if f0 is None:
                raise DataError("F0 branch is enabled but the example has no F0 track")
            f0_vec = self.f0(f0)
        if self.spectral is not None:
            spec_vec = self.spectral(mel, spectral)
        return self.classify(fused, f0_vec, spec_vec)

    def prepare(self, example, dtype: torch.dtype = torch.float32) -> dict[str, torch.Tensor]:
        """Turn a loaded example into forward() keyword arguments."""
        out = {
            "speech": torch.as_tensor(np.asarray(example.speech), dtype=dtype),
            "text": torch.as_tensor(np.asarray(example.text), dtype=dtype),
        }
        cfg = self.cfg
        if self.f0 is not None:
            if example.f0 is None:
                raise DataError(f"example {example.id}: F0 branch enabled but no F0 track")
            hz = np.asarray(example.f0, dtype=np.float64).reshape(-1)
            if cfg.f0_variant is F0Variant.QUANT:
                out["f0"] = torch.as_tensor(quantize_f0(hz, bins=cfg.f0_bins))
            else:
                out["f0"] = torch.as_tensor(hz, dtype=dtype)
        if self.spectral is not None:
            if cfg.spectral_mode is SpectralMode.PRECOMPUTED:
                if example.spectral is None:
                    raise DataError(f"example {example.id}: no precomputed spectral embedding")
                out["spectral"] = torch.as_tensor(np.asarray(example.spectral), dtype=dtype)
            else:
                if example.mel is None:
                    raise DataError(f"example {example.id}: spectral branch enabled but no mel bank")
                out["mel"] = torch.as_tensor(np.asarray(example.mel), dtype=dtype)
        return out
