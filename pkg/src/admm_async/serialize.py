"""Self-describing binary instance container plus JSON metadata sidecar.

Layout (all little-endian, floats are 64-bit):

    magic   b"ADMM"
    u8      container version (1)
    u8      family: 1 = l1 least squares, 2 = sparse pca
    u32     N (number of blocks)
    u32     n (dimension)
    f64     theta
    blocks  family-specific payloads, N times:
              family 1: u32 m | f64[m*n] A row-major | f64[m] b
              family 2: u32 m | u32 nnz | u32[nnz] rows | u32[nnz] cols
                        | f64[nnz] values
    family 1 only:
            u8 has_w0 | f64[n] w0 (when has_w0 = 1)

The sidecar (same basename, .json) records generator parameters and the
container's sha256 so runs can verify they used the intended instance.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import scipy.sparse

from .model import ProblemInstance
from .problems import make_lasso_instance, make_spca_instance

MAGIC = b"ADMM"
VERSION = 1
FAMILY_CODES = {"lasso": 1, "spca": 2}
FAMILY_NAMES = {v: k for k, v in FAMILY_CODES.items()}


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ValueError(message)


def instance_to_bytes(instance: ProblemInstance) -> bytes:
    """Serialize an instance built by the generators (needs source_data)."""
    data = instance.source_data
    _require(data is not None and "family" in data,
             "instance carries no source data; only generated/loaded "
             "instances can be serialized")
    family = data["family"]
    theta = float(data["theta"])
    n = instance.dim
    out = [MAGIC, struct.pack("<BBIId", VERSION, FAMILY_CODES[family],
                              instance.n_blocks, n, theta)]
    if family == "lasso":
        for A, b in zip(data["A"], data["b"]):
            A = np.ascontiguousarray(A, dtype="<f8")
            b = np.ascontiguousarray(b, dtype="<f8")
            out.append(struct.pack("<I", A.shape[0]))
            out.append(A.tobytes())
            out.append(b.tobytes())
        w0 = data.get("w0")
        if w0 is None:
            out.append(struct.pack("<B", 0))
        else:
            out.append(struct.pack("<B", 1))
            out.append(np.ascontiguousarray(w0, dtype="<f8").tobytes())
    else:
        for B in data["B"]:
            coo = scipy.sparse.coo_matrix(B)
            order = np.lexsort((coo.col, coo.row))
            rows = np.ascontiguousarray(coo.row[order], dtype="<u4")
            cols = np.ascontiguousarray(coo.col[order], dtype="<u4")
            vals = np.ascontiguousarray(coo.data[order], dtype="<f8")
            out.append(struct.pack("<II", B.shape[0], len(vals)))
            out.append(rows.tobytes())
            out.append(cols.tobytes())
            out.append(vals.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def array(self, dtype: str, count: int) -> np.ndarray:
        arr = np.frombuffer(self.buf, dtype=dtype, count=count, offset=self.pos)
        self.pos += arr.nbytes
        return np.array(arr)  # writable copy


def instance_from_bytes(buf: bytes) -> ProblemInstance:
    """Rebuild an instance from its container bytes."""
    _require(buf[:4] == MAGIC, "not an instance container (bad magic)")
    r = _Reader(buf)
    r.pos = 4
    version, fam_code, N, n, theta = r.take("<BBIId")
    _require(version == VERSION, f"unsupported container version {version}")
    _require(fam_code in FAMILY_NAMES, f"unknown family code {fam_code}")
    family = FAMILY_NAMES[fam_code]
    if family == "lasso":
        A_list, b_list = [], []
        for _ in range(N):
            (m,) = r.take("<I")
            A_list.append(r.array("<f8", m * n).reshape(m, n))
            b_list.append(r.array("<f8", m))
        (has_w0,) = r.take("<B")
        w0 = r.array("<f8", n) if has_w0 else None
        return make_lasso_instance(A_list, b_list, theta, w0=w0)
    B_list = []
    for _ in range(N):
        m, nnz = r.take("<II")
        rows = r.array("<u4", nnz)
        cols = r.array("<u4", nnz)
        vals = r.array("<f8", nnz)
        B_list.append(scipy.sparse.coo_matrix((vals, (rows, cols)),
                                              shape=(m, n)).tocsr())
    return make_spca_instance(B_list, theta)


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_instance(instance: ProblemInstance, path, extra_meta: dict | None = None) -> dict:
    """Write container + sidecar; returns the sidecar metadata."""
    path = Path(path)
    blob = instance_to_bytes(instance)
    path.write_bytes(blob)
    data = instance.source_data
    sizes = {"N": instance.n_blocks, "n": instance.dim}
    if data["family"] == "lasso":
        sizes["m"] = [int(A.shape[0]) for A in data["A"]]
    else:
        sizes["m"] = [int(B.shape[0]) for B in data["B"]]
        sizes["nnz"] = data.get("nnz")
    meta = {
        "format": "admm-async-instance",
        "version": VERSION,
        "family": data["family"],
        "theta": data["theta"],
        "seed": data.get("seed"),
        "noise_var": data.get("noise_var"),
        "density": data.get("density"),
        "sizes": sizes,
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    if extra_meta:
        meta.update(extra_meta)
    sidecar_path(path).write_text(json.dumps(meta, sort_keys=True, indent=2)
                                  + "\n", encoding="utf-8")
    return meta


def load_instance(path) -> tuple[ProblemInstance, dict]:
    """Read container (+ sidecar when present); returns (instance, meta)."""
    path = Path(path)
    blob = path.read_bytes()
    instance = instance_from_bytes(blob)
    meta = {"sha256": hashlib.sha256(blob).hexdigest()}
    side = sidecar_path(path)
    if side.exists():
        stored = json.loads(side.read_text(encoding="utf-8"))
        meta.update(stored)
        instance.source_data["seed"] = stored.get("seed")
    return instance, meta


def write_shards(instance: ProblemInstance, out_dir) -> list:
    """Split an instance into one single-block container per worker.

    Workers in the socket runtime load only their own shard; nothing but
    vectors ever crosses the wire.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = instance.source_data
    _require(data is not None, "instance carries no source data")
    full_sha = hashlib.sha256(instance_to_bytes(instance)).hexdigest()
    paths = []
    for i in range(instance.n_blocks):
        if data["family"] == "lasso":
            shard = make_lasso_instance([data["A"][i]], [data["b"][i]],
                                        data["theta"])
        else:
            shard = make_spca_instance([data["B"][i]], data["theta"])
        p = out_dir / f"shard{i:04d}.bin"
        save_instance(shard, p, extra_meta={"shard_of": full_sha, "worker": i})
        paths.append(p)
    return paths
