import numpy as np
import pytest

from lmad.afpc import write_sample
from lmad.dataset import (CATEGORIES, VOCAB_WORDS, DatasetManifest, generate_sample,
                          sample_seed)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Eight small samples (2 per category) with train=val=test, for fast e2e tests."""
    out = tmp_path_factory.mktemp("corpus")
    names = []
    for cat in CATEGORIES:
        for i in range(2):
            s = generate_sample(cat, sample_seed(7, cat, i), n_points=128)
            fname = f"{cat}_{i:04d}.afpc"
            write_sample(s, out / fname)
            names.append(fname)
    idx = list(range(len(names)))
    manifest = DatasetManifest(affordances=list(VOCAB_WORDS), samples=names,
                               splits={"train": idx, "val": idx, "test": idx},
                               generator={"n_points": 128, "per_category": 2, "seed": 7})
    manifest.save(out / "manifest.json")
    return out
