import numpy as np
import pytest

from mvdiff.bundle import BundleError, file_sha256, load_bundle, save_bundle


def test_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    entries = {
        "a.weights": rng.normal(size=(3, 4, 5)).astype(np.float32),
        "b": np.array(2.5, dtype=np.float64),
        "c.empty": np.zeros((0, 7), dtype=np.float32),
        "d.special": np.array([np.nan, np.inf, -np.inf, -0.0], dtype=np.float64),
    }
    p = tmp_path / "t.bundle"
    save_bundle(p, entries)
    back = load_bundle(p)
    assert list(back) == list(entries)
    for k in entries:
        assert back[k].dtype == entries[k].dtype
        assert back[k].shape == entries[k].shape
        assert back[k].tobytes() == entries[k].tobytes()


def test_header_layout(tmp_path):
    p = tmp_path / "h.bundle"
    save_bundle(p, {"x": np.zeros((2,), dtype=np.float32)})
    raw = p.read_bytes()
    assert raw[:4] == b"DLPH"
    assert raw[4:6] == (1).to_bytes(2, "little")          # version u16
    assert raw[6:10] == (1).to_bytes(4, "little")         # count u32
    assert raw[10:12] == (1).to_bytes(2, "little")        # name length u16
    assert raw[12:13] == b"x"
    assert raw[13] == 0                                    # dtype byte f32
    assert raw[14] == 1                                    # rank u8
    assert raw[15:23] == (2).to_bytes(8, "little")        # extent u64


def test_save_is_deterministic(tmp_path):
    entries = {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}
    p1, p2 = tmp_path / "a", tmp_path / "b"
    save_bundle(p1, entries)
    save_bundle(p2, entries)
    assert file_sha256(p1) == file_sha256(p2)


def test_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(BundleError, match="magic"):
        load_bundle(p)


def test_rejects_unstorable_dtype(tmp_path):
    with pytest.raises(BundleError, match="dtype"):
        save_bundle(tmp_path / "x", {"i": np.zeros(3, dtype=np.int32)})


def test_rejects_trailing_garbage(tmp_path):
    p = tmp_path / "t"
    save_bundle(p, {"x": np.zeros(1, dtype=np.float32)})
    p.write_bytes(p.read_bytes() + b"\x00")
    with pytest.raises(BundleError, match="trailing"):
        load_bundle(p)


def test_missing_file_has_path_context(tmp_path):
    with pytest.raises(BundleError, match="nowhere"):
        load_bundle(tmp_path / "nowhere")
