"""Overlapping 16x16 patch extraction and token embedding.

A 128 x F spectrogram is cut into 16x16 patches on a stride-10 grid (overlap
6 on both axes), each patch is flattened row-major to length 256 and mapped
through a linear projection to dimension d; positional embeddings and a
leading [CLS] token complete the encoder input. With 128 mel bins the grid
always has 12 frequency rows, so a t-second clip gives N = 12 time-patch
columns per the ceil((100t - 16) / 10) law (valid-origin counting at the
exact-fit boundary).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .features import Spectrogram, frames_for_duration


@dataclass(frozen=True)
class PatchConfig:
    patch_size: int = 16
    stride: int = 10
    embed_dim: int = 192

    def __post_init__(self) -> None:
        if self.patch_size < 1 or self.stride < 1:
            raise ConfigError("patch_size and stride must be positive")
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be positive, got {self.embed_dim}")

    @property
    def overlap(self) -> int:
        return self.patch_size - self.stride

    @property
    def patch_values(self) -> int:
        return self.patch_size * self.patch_size


@dataclass(frozen=True)
class PatchGrid:
    n_freq_patches: int
    n_time_patches: int

    @property
    def total(self) -> int:
        return self.n_freq_patches * self.n_time_patches


@dataclass
class TokenSequence:
    """Token embeddings with per-token merge sizes.

    ``tokens`` is [n_tokens x d] float32, ``sizes`` [n_tokens] float32 (all
    1.0 at creation; merging accumulates them). After
    ``add_positional_and_cls`` token 0 is the [CLS] token and stays at
    index 0 through merging.
    """

    tokens: np.ndarray
    sizes: np.ndarray

    def __post_init__(self) -> None:
        self.tokens = np.asarray(self.tokens, dtype=np.float32)
        self.sizes = np.asarray(self.sizes, dtype=np.float32)
        if self.tokens.ndim != 2:
            raise ShapeError(f"tokens must be 2-D, got shape {self.tokens.shape}")
        if self.sizes.shape != (self.tokens.shape[0],):
            raise ShapeError(
                f"sizes shape {self.sizes.shape} does not match "
                f"{self.tokens.shape[0]} tokens"
            )

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]


@dataclass
class EmbeddingWeights:
    projection: np.ndarray  # [256 x d]
    projection_bias: np.ndarray  # [d]
    positional: np.ndarray  # [(N+1) x d]
    cls_token: np.ndarray  # [d]


def _axis_patches(extent: int, cfg: PatchConfig) -> int:
    # Valid-origin counting: origins 0, stride, 2*stride, ... that still fit.
    if extent < cfg.patch_size:
        return 0
    return (extent - cfg.patch_size) // cfg.stride + 1


def patch_count(clip_seconds: float, cfg: PatchConfig | None = None) -> int:
    """Token count N for a t-second clip at 100 frames/s.

    Counts valid stride-10 patch origins over ceil(100t) frames and 128 mel
    bins; for every whole-second t this equals 12 * ceil((100t - 16) / 10),
    and a clip of exactly 16 frames still yields one time column.
    """
    cfg = cfg or PatchConfig()
    n_frames = frames_for_duration(clip_seconds)
    if n_frames < cfg.patch_size:
        raise ConfigError(
            f"clip of {clip_seconds} s ({n_frames} frames) is shorter than one "
            f"{cfg.patch_size}-frame patch"
        )
    return 12 * _axis_patches(n_frames, cfg)


def patch_grid(n_mels: int, n_frames: int, cfg: PatchConfig) -> PatchGrid:
    nf = _axis_patches(n_mels, cfg)
    nt = _axis_patches(n_frames, cfg)
    if nf == 0 or nt == 0:
        raise ShapeError(
            f"spectrogram {n_mels} x {n_frames} is smaller than one "
            f"{cfg.patch_size} x {cfg.patch_size} patch"
        )
    return PatchGrid(n_freq_patches=nf, n_time_patches=nt)


def extract_patches(
    s: Spectrogram | np.ndarray, cfg: PatchConfig
) -> tuple[np.ndarray, PatchGrid]:
    """Cut the spectrogram into flattened patches.

    Patch (i, j) covers mel rows [stride*i, stride*i + 16) and frames
    [stride*j, stride*j + 16), flattened row-major. Enumeration order is
    frequency-fastest: patch index = j * n_freq_patches + i. A pure gather;
    no arithmetic touches the values.
    """
    values = s.values if isinstance(s, Spectrogram) else np.asarray(s)
    values = values.astype(np.float32, copy=False)
    grid = patch_grid(values.shape[0], values.shape[1], cfg)
    p, st = cfg.patch_size, cfg.stride
    windows = np.lib.stride_tricks.sliding_window_view(values, (p, p))
    windows = windows[::st, ::st]  # [nf, nt, p, p]
    patches = (
        windows[: grid.n_freq_patches, : grid.n_time_patches]
        .transpose(1, 0, 2, 3)  # time-major, frequency varies fastest
        .reshape(grid.total, cfg.patch_values)
    )
    return np.ascontiguousarray(patches), grid


def embed_patches(patches: np.ndarray, w: EmbeddingWeights) -> np.ndarray:
    """Linear patch embedding: row i -> patches[i] @ projection + bias."""
    patches = np.asarray(patches, dtype=np.float32)
    if patches.ndim != 2 or patches.shape[1] != w.projection.shape[0]:
        raise ShapeError(
            f"patches {patches.shape} incompatible with projection "
            f"{w.projection.shape}"
        )
    return patches @ w.projection + w.projection_bias


def add_positional_and_cls(x: np.ndarray, w: EmbeddingWeights) -> TokenSequence:
    """Prepend [CLS] and add positional rows; all merge sizes start at 1."""
    x = np.asarray(x, dtype=np.float32)
    n = x.shape[0]
    if w.positional.shape[0] != n + 1:
        raise ConfigError(
            f"positional table has {w.positional.shape[0]} rows but the input "
            f"needs {n + 1} (N={n} patches + CLS); model and clip length disagree"
        )
    tokens = np.empty((n + 1, x.shape[1]), dtype=np.float32)
    tokens[0] = w.cls_token + w.positional[0]
    tokens[1:] = x + w.positional[1:]
    return TokenSequence(tokens=tokens, sizes=np.ones(n + 1, dtype=np.float32))
