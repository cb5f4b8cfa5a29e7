import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from astmerge import ModelConfig, generate_synthetic_model


@pytest.fixture(scope="session")
def tiny_model():
    """One-time-patch model: 13 tokens, 1 block; fast enough for any test."""
    cfg = ModelConfig(
        depth=1, embed_dim=16, n_heads=2, mlp_ratio=2.0,
        clip_seconds=0.16, n_classes=3,
    )
    return generate_synthetic_model(0, cfg)


@pytest.fixture(scope="session")
def small_model():
    """109-token, 3-block model for encoder-level checks."""
    cfg = ModelConfig(
        depth=3, embed_dim=32, n_heads=4, mlp_ratio=4.0,
        clip_seconds=1.0, n_classes=5,
    )
    return generate_synthetic_model(1, cfg)


def random_token_sequence(rng: np.random.Generator, n: int, d: int):
    from astmerge import TokenSequence

    return TokenSequence(
        tokens=rng.standard_normal((n, d)).astype(np.float32),
        sizes=np.ones(n, dtype=np.float32),
    )
