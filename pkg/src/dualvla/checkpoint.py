"""Flat parameter archive with a bit-exact round trip.

Layout: a ZIP (stored, uncompressed) containing
    manifest.txt          one line per tensor, "name<TAB>d0 d1 ...", in
                          serialization order (scalars list no dims)
    data/<index>.f64      raw little-endian float64, row-major
    meta.json             optional free-form metadata (vocab maps, configs)

Names are arbitrary non-empty strings without tabs or newlines.
"""

import json
import zipfile
from collections import OrderedDict

import numpy as np


def save_checkpoint(path, params, meta=None):
    """Write an ordered {name: ndarray} map (and optional JSON metadata)."""
    lines = []
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for i, (name, arr) in enumerate(params.items()):
            if "\t" in name or "\n" in name or not name:
                raise ValueError(f"illegal parameter name {name!r}")
            a = np.asarray(arr, dtype="<f8")
            if not a.flags["C_CONTIGUOUS"]:
                a = np.ascontiguousarray(a)
            dims = " ".join(str(d) for d in a.shape)
            lines.append(f"{name}\t{dims}".rstrip())
            zf.writestr(f"data/{i:06d}.f64", a.tobytes())
        zf.writestr("manifest.txt", "\n".join(lines) + ("\n" if lines else ""))
        if meta is not None:
            zf.writestr("meta.json", json.dumps(meta, sort_keys=True, indent=1))


def load_checkpoint(path, with_meta=False):
    """Read back an ordered {name: ndarray} map, bit-exact."""
    params = OrderedDict()
    with zipfile.ZipFile(path, "r") as zf:
        manifest = zf.read("manifest.txt").decode("utf-8").splitlines()
        for i, line in enumerate(manifest):
            if not line:
                continue
            name, _, dims = line.partition("\t")
            shape = tuple(int(d) for d in dims.split()) if dims else ()
            raw = zf.read(f"data/{i:06d}.f64")
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            params[name] = arr
        if with_meta:
            meta = None
            if "meta.json" in zf.namelist():
                meta = json.loads(zf.read("meta.json").decode("utf-8"))
            return params, meta
    return params
