import json

import numpy as np
import pytest

from moeforge import checkpoint as ck
from moeforge.model import EXPERT, GATE, LARGE, NON_EXPERT, TOY, build_model


@pytest.fixture
def saved(tmp_path):
    m = build_model(TOY, 0)
    path = tmp_path / "ckpt"
    ck.save(m, path, meta={"step": 3})
    return m, path


def edit_manifest(path, fn):
    mf = path / ck.MANIFEST
    data = json.loads(mf.read_text())
    fn(data)
    mf.write_text(json.dumps(data))


def test_round_trip_bit_exact(saved):
    m, path = saved
    back = ck.load(path)
    assert back.arch == m.arch
    assert back.names() == m.names()
    for n in m.names():
        assert back[n].data.tobytes() == m[n].data.tobytes()
        assert back.roles[n] == m.roles[n]
    assert ck.load_meta(path) == {"step": 3}


def test_overwrite_is_atomic_replace(saved):
    m, path = saved
    m2 = build_model(TOY, 1)
    ck.save(m2, path)
    assert np.array_equal(ck.load(path)["embed"].data, m2["embed"].data)
    assert sorted(p.name for p in path.parent.iterdir() if not p.name.startswith(".")) == ["ckpt"]


def test_corrupt_byte_fails_checksum(saved):
    _, path = saved
    blob = bytearray((path / ck.BLOB).read_bytes())
    blob[100] ^= 0xFF
    (path / ck.BLOB).write_bytes(bytes(blob))
    with pytest.raises(ck.ChecksumError):
        ck.load(path)
    assert any(v.kind == "checksum" for v in ck.validate(path))


def test_truncated_blob(saved):
    _, path = saved
    blob = (path / ck.BLOB).read_bytes()
    (path / ck.BLOB).write_bytes(blob[:-8])
    with pytest.raises(ck.TruncatedError):
        ck.load(path)


def test_version_mismatch(saved):
    _, path = saved
    edit_manifest(path, lambda d: d.update(format="other/9"))
    with pytest.raises(ck.VersionError):
        ck.load(path)


def test_fresh_save_validates(saved):
    assert ck.validate(saved[1]) == []


def test_overlap_reported(saved):
    _, path = saved

    def shift(d):
        d["tensors"][2]["offset"] -= 8
    edit_manifest(path, shift)
    assert "overlap" in {v.kind for v in ck.validate(path)}


def test_missing_expert_index_reported(saved):
    _, path = saved

    def strip(d):
        rec = next(r for r in d["tensors"] if r["role"] == EXPERT)
        rec["expert"] = None
    edit_manifest(path, strip)
    assert [v.kind for v in ck.validate(path)] == ["tagging"]


def test_roles_partition_tensors(saved):
    _, path = saved
    recs = ck.read_manifest(path)["tensors"]
    assert {r["role"] for r in recs} <= {NON_EXPERT, EXPERT, GATE}
    assert len({r["name"] for r in recs}) == len(recs)


def test_large_layout_has_18_gates():
    recs = ck.layout(LARGE)
    assert sum(r["role"] == GATE for r in recs) == 18
    assert all(r["shape"] == [1024, 64] for r in recs if r["role"] == GATE)
    assert recs[-1]["offset"] + recs[-1]["length"] == 8 * sum(int(np.prod(r["shape"])) for r in recs)


def test_layout_matches_saved_records(saved):
    _, path = saved
    recs = ck.read_manifest(path)["tensors"]
    assert [{k: v for k, v in r.items() if k != "crc32"} for r in recs] == ck.layout(TOY)


def test_unreadable_manifest(tmp_path):
    with pytest.raises(ck.CheckpointError):
        ck.load(tmp_path)
