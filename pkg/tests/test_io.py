import json
import struct

import numpy as np
import pytest

from fesurrogate import io
from fesurrogate.fesolver import SimulationSample


def test_mesh_roundtrip(tmp_path, phantom):
    path = tmp_path / "m.bmsh"
    io.write_mesh(path, phantom)
    data = path.read_bytes()
    assert data[:4] == b"BMSH"
    version, n, m = struct.unpack_from("<IQQ", data, 4)
    assert (version, n, m) == (1, phantom.n_nodes, phantom.n_tets)
    assert len(data) == 24 + 24 * n + 16 * m + 2 * n
    back = io.read_mesh(path, phantom.spec)
    assert np.array_equal(back.nodes, phantom.nodes)
    assert np.array_equal(back.tets, phantom.tets)
    assert np.array_equal(back.labels, phantom.labels)
    assert np.array_equal(back.fixed_nodes, phantom.fixed_nodes)
    assert np.array_equal(back.loaded_nodes, phantom.loaded_nodes)
    # first node x coordinate, little-endian f64
    assert struct.unpack_from("<d", data, 24)[0] == phantom.nodes[0, 0]


@pytest.mark.parametrize("width", [9, 7])
def test_sample_roundtrip(tmp_path, width):
    rng = np.random.default_rng(0)
    s = SimulationSample(rng.standard_normal((11, width)), rng.standard_normal((11, 3)),
                         rng.integers(0, 4, 11).astype(np.uint8))
    path = tmp_path / "s.bmsd"
    io.write_sample(path, s)
    data = path.read_bytes()
    assert data[:4] == b"BMSD" and struct.unpack_from("<IQ", data, 4) == (1, 11)
    back = io.read_sample(path)
    assert back.features.tobytes() == s.features.tobytes()
    assert back.displacements.tobytes() == s.displacements.tobytes()
    assert np.array_equal(back.labels, s.labels)


def test_bad_magic(tmp_path):
    path = tmp_path / "x.bmsd"
    path.write_bytes(b"XXXX" + bytes(40))
    with pytest.raises(io.FormatError, match="magic"):
        io.read_sample(path)


def test_truncated_sample(tmp_path):
    s = SimulationSample(np.zeros((4, 9)), np.zeros((4, 3)), np.zeros(4, dtype=np.uint8))
    path = tmp_path / "s.bmsd"
    io.write_sample(path, s)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(io.FormatError):
        io.read_sample(path)


def test_prediction_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    disp = rng.standard_normal((7, 3))
    counts = rng.integers(1, 5, 7)
    path = tmp_path / "p.bmpr"
    io.write_prediction(path, disp, counts, 12.5)
    data = path.read_bytes()
    assert data[:4] == b"BMPR" and len(data) == 4 + 8 + 24 * 7 + 4 * 7 + 8
    d2, c2, ms = io.read_prediction(path)
    assert np.array_equal(d2, disp) and np.array_equal(c2, counts) and ms == 12.5


def test_dataset_roundtrip(tmp_path, small_phantom, small_dataset):
    samples, _ = small_dataset
    ds = io.Dataset(small_phantom, samples, {"split": "holdout", "phantom_id": 4,
                                            "phantom": small_phantom.spec.to_dict()})
    io.write_dataset(tmp_path / "d", ds)
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["features"] == "pbk" and len(manifest["samples"]) == len(samples)
    back = io.read_dataset(tmp_path / "d")
    assert back.split == "holdout" and back.phantom_id == 4
    assert back.mesh.spec == small_phantom.spec
    for a, b in zip(samples, back.samples):
        assert a.displacements.tobytes() == b.displacements.tobytes()
        assert b.meta["phantom_id"] == 4 and b.meta["split"] == "holdout"


def test_atomic_write_leaves_no_partial(tmp_path, monkeypatch):
    target = tmp_path / "out.bin"

    class Boom(Exception):
        pass

    def failing_replace(src, dst):
        raise Boom()
    monkeypatch.setattr(io.os, "replace", failing_replace)
    with pytest.raises(Boom):
        io.atomic_write(target, b"data")
    assert list(tmp_path.iterdir()) == []
