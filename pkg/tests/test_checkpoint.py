from collections import OrderedDict

import numpy as np
import pytest

from dualvla.checkpoint import load_checkpoint, save_checkpoint


def test_round_trip_bit_exact(tmp_path, rng):
    params = OrderedDict(
        [
            ("a/w", rng.normal(size=(3, 4))),
            ("a/b", rng.normal(size=(4,))),
            ("scalar", np.float64(1.2345678901234567)),
            ("deep/nested/t", rng.normal(size=(2, 2, 2))),
        ]
    )
    path = tmp_path / "p.ckpt"
    save_checkpoint(path, params, meta={"note": "x"})
    loaded, meta = load_checkpoint(path, with_meta=True)
    assert list(loaded) == list(params)  # serialization order preserved
    for name in params:
        assert np.asarray(params[name]).tobytes() == loaded[name].tobytes()
        assert loaded[name].shape == np.asarray(params[name]).shape
    assert meta == {"note": "x"}


def test_manifest_lists_names_in_order(tmp_path, rng):
    params = OrderedDict((f"p{i}", rng.normal(size=(2,))) for i in range(5))
    path = tmp_path / "p.ckpt"
    save_checkpoint(path, params)
    import zipfile

    with zipfile.ZipFile(path) as zf:
        names = [line.split("\t")[0] for line in zf.read("manifest.txt").decode().splitlines()]
    assert names == [f"p{i}" for i in range(5)]


def test_illegal_name_rejected(tmp_path):
    with pytest.raises(ValueError):
        save_checkpoint(tmp_path / "p.ckpt", {"bad\tname": np.zeros(1)})
