"""Binary file formats and dataset directories.

All binary files are little-endian and written with write-then-rename.

``BMSH`` mesh:     magic | u32 version | u64 nodes | u64 tets | f64 xyz | u32 tets
                   | u8 labels | u8 bc flags (bit0 fixed, bit1 loaded)
``BMSD`` sample:   magic | u32 version | u64 nodes | f64 features (7 or 9 per node)
                   | f64 ground truth (3 per node) | u8 labels
``BMPR`` prediction: magic | u64 nodes | f64 displacement triplets | u32 pass counts
                   | f64 latency ms
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .fesolver import SimulationSample
from .geometry import PhantomSpec, TetMesh

MESH_MAGIC = b"BMSH"
SAMPLE_MAGIC = b"BMSD"
PREDICTION_MAGIC = b"BMPR"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _check_magic(data: bytes, magic: bytes, path) -> None:
    if data[:4] != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, found {data[:4]!r}")


def encode_mesh(mesh: TetMesh) -> bytes:
    head = MESH_MAGIC + struct.pack("<IQQ", FORMAT_VERSION, mesh.n_nodes, mesh.n_tets)
    return b"".join([
        head,
        np.ascontiguousarray(mesh.nodes, dtype="<f8").tobytes(),
        np.ascontiguousarray(mesh.tets, dtype="<u4").tobytes(),
        np.ascontiguousarray(mesh.labels, dtype="u1").tobytes(),
        mesh.bc_flags().astype("u1").tobytes(),
    ])


def write_mesh(path, mesh: TetMesh) -> None:
    atomic_write(path, encode_mesh(mesh))


def read_mesh(path, spec: Optional[PhantomSpec] = None) -> TetMesh:
    data = Path(path).read_bytes()
    _check_magic(data, MESH_MAGIC, path)
    version, n, m = struct.unpack_from("<IQQ", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported mesh version {version}")
    off = 24
    nodes = np.frombuffer(data, "<f8", 3 * n, off).reshape(n, 3)
    off += 24 * n
    tets = np.frombuffer(data, "<u4", 4 * m, off).reshape(m, 4)
    off += 16 * m
    labels = np.frombuffer(data, "u1", n, off)
    off += n
    flags = np.frombuffer(data, "u1", n, off)
    return TetMesh(nodes.copy(), tets.astype(np.int64), labels.copy(),
                   np.flatnonzero(flags & 1), np.flatnonzero(flags & 2), spec)


def encode_sample(sample: SimulationSample) -> bytes:
    n = sample.n_nodes
    return b"".join([
        SAMPLE_MAGIC + struct.pack("<IQ", FORMAT_VERSION, n),
        np.ascontiguousarray(sample.features, dtype="<f8").tobytes(),
        np.ascontiguousarray(sample.displacements, dtype="<f8").tobytes(),
        np.ascontiguousarray(sample.labels, dtype="u1").tobytes(),
    ])


def write_sample(path, sample: SimulationSample) -> None:
    atomic_write(path, encode_sample(sample))


def read_sample(path, meta: Optional[dict] = None) -> SimulationSample:
    data = Path(path).read_bytes()
    _check_magic(data, SAMPLE_MAGIC, path)
    version, n = struct.unpack_from("<IQ", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported sample version {version}")
    rest = len(data) - 16
    width, rem = divmod(rest - 25 * n, 8 * n) if n else (0, 0)
    if rem or width not in (7, 9):
        raise FormatError(f"{path}: inconsistent payload size for {n} nodes")
    off = 16
    feats = np.frombuffer(data, "<f8", width * n, off).reshape(n, width)
    off += 8 * width * n
    disp = np.frombuffer(data, "<f8", 3 * n, off).reshape(n, 3)
    off += 24 * n
    labels = np.frombuffer(data, "u1", n, off)
    return SimulationSample(feats.copy(), disp.copy(), labels.copy(), dict(meta or {}))


@dataclass
class Dataset:
    """Simulations on one phantom plus the mesh they were computed on."""

    mesh: TetMesh
    samples: list
    manifest: dict = field(default_factory=dict)

    @property
    def split(self) -> str:
        return self.manifest.get("split", "train")

    @property
    def phantom_id(self):
        return self.manifest.get("phantom_id", self.manifest.get("phantom", {}).get("seed"))

    @property
    def feature_mode(self) -> str:
        return self.manifest.get("features", "pbk")


def write_dataset(directory, dataset: Dataset) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_mesh(directory / "mesh.bmsh", dataset.mesh)
    metas = []
    for i, s in enumerate(dataset.samples):
        name = f"sample_{i:05d}.bmsd"
        write_sample(directory / name, s)
        metas.append({"file": name, **s.meta})
    manifest = dict(dataset.manifest)
    manifest["samples"] = metas
    if dataset.samples:
        manifest["features"] = dataset.samples[0].feature_mode
    write_json(directory / "manifest.json", manifest)


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    with open(path) as fh:
        return json.load(fh)


def read_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = read_manifest(directory)
    spec = PhantomSpec.from_dict(manifest["phantom"]) if "phantom" in manifest else None
    mesh = read_mesh(directory / "mesh.bmsh", spec)
    samples = []
    for meta in manifest.get("samples", []):
        s = read_sample(directory / meta["file"], meta)
        s.meta.setdefault("split", manifest.get("split", "train"))
        s.meta.setdefault("phantom_id", manifest.get("phantom_id"))
        samples.append(s)
    return Dataset(mesh, samples, manifest)


def write_prediction(path, displacement: np.ndarray, pass_counts: np.ndarray,
                     latency_ms: float) -> None:
    n = len(displacement)
    atomic_write(path, b"".join([
        PREDICTION_MAGIC + struct.pack("<Q", n),
        np.ascontiguousarray(displacement, dtype="<f8").tobytes(),
        np.ascontiguousarray(pass_counts, dtype="<u4").tobytes(),
        struct.pack("<d", latency_ms),
    ]))


def read_prediction(path) -> tuple[np.ndarray, np.ndarray, float]:
    data = Path(path).read_bytes()
    _check_magic(data, PREDICTION_MAGIC, path)
    (n,) = struct.unpack_from("<Q", data, 4)
    off = 12
    disp = np.frombuffer(data, "<f8", 3 * n, off).reshape(n, 3).copy()
    off += 24 * n
    counts = np.frombuffer(data, "<u4", n, off).astype(np.int64)
    off += 4 * n
    (latency,) = struct.unpack_from("<d", data, off)
    return disp, counts, latency
