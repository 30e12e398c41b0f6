import numpy as np
import pytest

from dualvla import data as D
from dualvla import env as E


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """20 deterministic episodes plus QA samples, shared across tests."""
    root = tmp_path_factory.mktemp("dataset")
    data_dir = root / "episodes"
    qa_dir = root / "qa"
    D.generate_dataset(str(data_dir), 20, seed=1234)
    D.save_qa(str(qa_dir), D.generate_qa(20, seed=1234))
    return str(data_dir), str(qa_dir)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def make_two_motion_pairs(rng, n):
    """Frame pairs where a red block moves either left or right."""
    pairs = []
    for _ in range(n):
        img = np.full((32, 32, 3), 0.1)
        img[14:18, 14:18] = (0.9, 0.2, 0.2)
        fut = np.full((32, 32, 3), 0.1)
        shift = 6 if rng.integers(2) else -6
        fut[14:18, 14 + shift : 18 + shift] = (0.9, 0.2, 0.2)
        pairs.append((img, fut))
    cur = np.stack([p[0] for p in pairs])
    fut = np.stack([p[1] for p in pairs])
    return cur, fut
