"""SeqAug with independent per-dimension temporal permutations."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .dataio import Example
from .errors import ConfigError


@dataclass(frozen=True)
class AugmentConfig:
    apply_prob: float = 0.5
    beta_a: float = 0.5
    beta_b: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ConfigError(f"apply_prob must be in [0, 1], got {self.apply_prob}")
        if self.beta_a <= 0 or self.beta_b <= 0:
            raise ConfigError(f"beta parameters must be > 0, got ({self.beta_a}, {self.beta_b})")

    def to_dict(self) -> dict:
        return asdict(self)


def seqaug(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Permute a random subset of feature columns along time, each column independently.

    With probability ``1 - apply_prob`` the input is returned untouched.
    Otherwise ``rho ~ Beta(beta_a, beta_b)`` and ``ceil(rho * D)`` columns are
    chosen without replacement; every chosen column gets its own permutation.
    """
    if rng.random() >= cfg.apply_prob:
        return x
    T, D = x.shape
    rho = rng.beta(cfg.beta_a, cfg.beta_b)
    k = min(D, math.ceil(rho * D))
    dims = rng.choice(D, size=k, replace=False)
    if T == 1:
        return x
    y = x.copy()
    for d in dims:
        y[:, d] = x[rng.permutation(T), d]
    return y


def stream_for(seed: int, epoch: int, uid: str) -> np.random.SeedSequence:
    """Per-utterance seed sequence; independent of worker count and visiting order."""
    uid_key = int.from_bytes(hashlib.sha256(uid.encode()).digest()[:8], "little")
    return np.random.SeedSequence([seed, epoch, uid_key])


def augment_example(ex: Example, cfg: AugmentConfig, state: np.random.SeedSequence) -> Example:
    """Apply :func:`seqaug` to speech and text with independent coin flips and streams.

    F0, mel and spectral inputs are left as they are.
    """
    speech_seq, text_seq = state.spawn(2)
    speech = seqaug(ex.speech, cfg, np.random.default_rng(speech_seq))
    text = seqaug(ex.text, cfg, np.random.default_rng(text_seq))
    if speech is ex.speech and text is ex.text:
        return ex
    return replace(ex, speech=speech, text=text)
