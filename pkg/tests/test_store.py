import json
import struct

import numpy as np
import pytest

from ppgmamba import store
from ppgmamba.data import Segment


def make_segments(n=5, seed=0):
    rng = np.random.default_rng(seed)
    splits = ["train", "val", "test"]
    return [Segment(rng.standard_normal(750), 60.0 + i, f"sub{i % 2}", i, splits[i % 3],
                    rng.standard_normal(750)) for i in range(n)]


def test_round_trip(tmp_path):
    segs = make_segments()
    store.write_store(tmp_path / "s", segs, extra={"seed": 3})
    back, manifest = store.read_store(tmp_path / "s")
    assert manifest["version"] == 1 and manifest["seed"] == 3
    assert manifest["counts"] == {"train": 2, "val": 2, "test": 1}
    for a, b in zip(segs, back):
        assert np.array_equal(b.samples, a.samples.astype(np.float32))
        assert np.array_equal(b.noisy, a.noisy.astype(np.float32))
        assert (b.bpm_label, b.subject_id, b.window_index, b.split) == \
               (a.bpm_label, a.subject_id, a.window_index, a.split)


def test_binary_layout_matches_struct_parse(tmp_path):
    segs = make_segments(3)
    store.write_store(tmp_path, segs)
    raw = (tmp_path / "segments.ppgs").read_bytes()
    magic, version, fs, n = struct.unpack_from("<4sIfI", raw, 0)
    assert (magic, version, fs, n) == (b"PPGS", 1, 125.0, 3)
    rec = 750 * 4 * 2 + 4 + 1
    assert len(raw) == 16 + 3 * rec
    off = 16 + rec  # second segment
    clean = struct.unpack_from("<750f", raw, off)
    noisy = struct.unpack_from("<750f", raw, off + 3000)
    bpm, tag = struct.unpack_from("<fB", raw, off + 6000)
    assert np.array_equal(clean, segs[1].samples.astype(np.float32))
    assert np.array_equal(noisy, segs[1].noisy.astype(np.float32))
    assert bpm == 61.0 and tag == 1


def test_clean_only_segments_store_clean_as_noisy(tmp_path):
    seg = Segment(np.ones(750), 70.0, "x", 0)
    store.write_store(tmp_path, [seg])
    back, _ = store.read_store(tmp_path)
    assert np.array_equal(back[0].noisy, back[0].samples)


def test_manifest_is_stable_text(tmp_path):
    store.write_store(tmp_path / "a", make_segments(), extra={"z": 1, "a": 2})
    store.write_store(tmp_path / "b", make_segments(), extra={"a": 2, "z": 1})
    a = (tmp_path / "a" / "manifest.json").read_bytes()
    assert a == (tmp_path / "b" / "manifest.json").read_bytes()
    assert (tmp_path / "a" / "segments.ppgs").read_bytes() == (tmp_path / "b" / "segments.ppgs").read_bytes()
    assert list(json.loads(a)) == sorted(json.loads(a))


def _corrupt(tmp_path, mutate):
    store.write_store(tmp_path, make_segments(4))
    p = tmp_path / "segments.ppgs"
    p.write_bytes(mutate(p.read_bytes()))


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + struct.pack("<I", 2) + b[8:],
    lambda b: b[:-10],
    lambda b: b + b"\0",
    lambda b: b[:10],
], ids=["magic", "version", "truncated", "trailing", "header"])
def test_corrupt_binary_rejected(tmp_path, mutate):
    _corrupt(tmp_path, mutate)
    with pytest.raises(store.StoreError):
        store.read_store(tmp_path)


def test_bad_split_tag_rejected(tmp_path):
    store.write_store(tmp_path, make_segments(2))
    p = tmp_path / "segments.ppgs"
    raw = bytearray(p.read_bytes())
    raw[16 + 6004] = 9
    p.write_bytes(bytes(raw))
    with pytest.raises(store.StoreError):
        store.read_store(tmp_path)


def test_manifest_mismatch_rejected(tmp_path):
    store.write_store(tmp_path, make_segments(3))
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["segments"] = m["segments"][:2]
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(store.StoreError):
        store.read_store(tmp_path)


def test_missing_files(tmp_path):
    with pytest.raises(store.StoreError):
        store.read_store(tmp_path)
    store.write_store(tmp_path, make_segments(1))
    (tmp_path / "segments.ppgs").unlink()
    with pytest.raises(store.StoreError):
        store.read_store(tmp_path)


def test_arrays_by_split():
    segs = make_segments(6)
    clean, noisy, bpm = store.arrays(segs, "val")
    assert clean.shape == (2, 750) and noisy.shape == (2, 750)
    assert list(bpm) == [61.0, 64.0]
    assert store.arrays(segs)[0].shape == (6, 750)
    assert store.arrays([], "test")[0].shape == (0, 750)
