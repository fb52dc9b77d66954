import json
import struct

import numpy as np
import pytest

from msranet.errors import FormatError, IOFailure
from msranet.layers import Mode
from msranet.model import ModelConfig, build, forward
from msranet.serialize import (
    ALIGN,
    export_feature_pairs,
    import_feature_pairs,
    load_weights,
    read_container,
    save_weights,
    write_container,
)

CFG = ModelConfig(input_size=32, c1=16, c2=32, r=4, n_classes=3, hidden=8)


def test_container_layout(tmp_path):
    arrays = {"b": np.arange(3, dtype=np.float32), "a": np.ones((2, 2), np.float32)}
    path = tmp_path / "w.msrw"
    write_container(path, arrays)
    blob = path.read_bytes()
    magic, version, hlen = struct.unpack_from("<4sIQ", blob)
    assert (magic, version) == (b"MSRW", 1)
    header = json.loads(blob[16 : 16 + hlen])
    assert list(header) == ["a", "b"]
    for name, meta in header.items():
        assert meta["offset"] % ALIGN == 0 and meta["dtype"] == "f32"
        n = int(np.prod(meta["shape"]))
        got = np.frombuffer(blob, "<f4", n, meta["offset"]).reshape(meta["shape"])
        assert np.array_equal(got, arrays[name])


def test_weights_round_trip_bit_exact(tmp_path, rng):
    m = build(CFG, seed=5)
    path = tmp_path / "m.msrw"
    save_weights(m, path)
    m2 = load_weights(path, CFG)
    for k, v in m.registry().items():
        assert v.data.tobytes() == m2.registry()[k].data.tobytes()
    x = rng.random((2, 32, 32, 3)).astype(np.float32)
    assert np.array_equal(forward(m, x, Mode.EVAL)[0].data, forward(m2, x, Mode.EVAL)[0].data)
    save_weights(m2, tmp_path / "again.msrw")
    assert (tmp_path / "again.msrw").read_bytes() == path.read_bytes()


def test_missing_entry_is_named(tmp_path):
    m = build(CFG, seed=0)
    reg = dict(m.registry())
    del reg["head.d_out.weight"]
    write_container(tmp_path / "w.msrw", reg)
    with pytest.raises(FormatError, match="head.d_out.weight"):
        load_weights(tmp_path / "w.msrw", CFG)


def test_mismatched_config(tmp_path):
    save_weights(build(CFG, seed=0), tmp_path / "w.msrw")
    with pytest.raises(FormatError, match="shape"):
        load_weights(tmp_path / "w.msrw", ModelConfig(**{**CFG.__dict__, "n_classes": 4}))
    with pytest.raises(FormatError, match="unexpected"):
        load_weights(tmp_path / "w.msrw", ModelConfig(**{**CFG.__dict__, "se_shared": True}))


def test_corrupt_files(tmp_path):
    path = tmp_path / "w.msrw"
    write_container(path, {"x": np.ones(10, np.float32)})
    blob = path.read_bytes()
    cases = {
        "magic": b"XXXX" + blob[4:],
        "version": blob[:4] + struct.pack("<I", 2) + blob[8:],
        "truncated": blob[:-8],
        "short": blob[:10],
    }
    for name, data in cases.items():
        (tmp_path / name).write_bytes(data)
        with pytest.raises(FormatError):
            read_container(tmp_path / name)
    hlen = struct.unpack_from("<Q", blob, 8)[0]
    header = json.loads(blob[16 : 16 + hlen])
    header["x"]["offset"] += 4
    hdr = json.dumps(header).encode()
    (tmp_path / "misaligned").write_bytes(blob[:8] + struct.pack("<Q", len(hdr)) + hdr + blob[16 + hlen :])
    with pytest.raises(FormatError):
        read_container(tmp_path / "misaligned")
    with pytest.raises(IOFailure):
        read_container(tmp_path / "nope.msrw")


def test_feature_pairs_round_trip(tmp_path, rng):
    recs = [(rng.random((4, 4, 16)).astype(np.float32), rng.random((2, 2, 32)).astype(np.float32), i % 3) for i in range(5)]
    export_feature_pairs(tmp_path / "f.msrw", recs)
    back = import_feature_pairs(tmp_path / "f.msrw")
    assert len(back) == 5
    for (f1, f2, y), (g1, g2, z) in zip(recs, back):
        assert np.array_equal(f1, g1.data) and np.array_equal(f2, g2.data) and y == z
    write_container(tmp_path / "bad.msrw", {"f1/0": recs[0][0], "label/0": np.array([1.0], np.float32)})
    with pytest.raises(FormatError, match="incomplete"):
        import_feature_pairs(tmp_path / "bad.msrw")
