"""Seed derivation shared by every generator and predictor."""

import numpy as np


def derive_seed(*keys: int) -> int:
    """Derive a child seed from a base seed and integer keys (scene id, stage, index...)."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])
