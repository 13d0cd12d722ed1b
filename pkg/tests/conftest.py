from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from infradiag.corpus import HashingEmbedder
from infradiag.synthetic import build_default_taxonomy, build_kb, build_store, synthetic_records

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    assert FIXTURES.exists(), "run scripts/make_fixtures.py first"
    return FIXTURES


@pytest.fixture(scope="session")
def provider() -> HashingEmbedder:
    return HashingEmbedder()


@pytest.fixture(scope="session")
def world():
    """(taxonomy, registry, records, store, kb) for the synthetic world."""
    taxonomy, registry = build_default_taxonomy()
    records = synthetic_records()
    return taxonomy, registry, records, build_store(records), build_kb()


class RandomVectorProvider:
    """Deterministic random unit vector per distinct text; test-only."""

    def __init__(self, dimension: int = 32, seed: int = 0):
        self.dimension = dimension
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def embed(self, text: str) -> np.ndarray:
        if text not in self._cache:
            spawn = np.random.default_rng([self.seed, abs(hash(text)) % 2**31])
            vec = spawn.normal(size=self.dimension)
            self._cache[text] = (vec / np.linalg.norm(vec)).astype(np.float32)
        return self._cache[text]


class BasisVectorProvider:
    """Maps each new text to the next standard basis vector (exact orthogonality)."""

    def __init__(self, dimension: int = 64):
        self.dimension = dimension
        self._seen: dict[str, int] = {}

    def embed(self, text: str) -> np.ndarray:
        index = self._seen.setdefault(text, len(self._seen))
        vec = np.zeros(self.dimension, dtype=np.float32)
        vec[index % self.dimension] = 1.0
        return vec
