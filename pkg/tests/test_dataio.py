import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from twinvit import dataio as D
from twinvit.errors import (BadMagicError, ChecksumError, LayoutError, ManifestError, ParseError,
                            VersionError)


def ppm(w, h, payload: bytes, maxval=255) -> bytes:
    return f"P6\n{w} {h}\n{maxval}\n".encode() + payload


class TestPpm:
    def test_white_pixel(self, tmp_path):
        path = tmp_path / "w.ppm"
        path.write_bytes(ppm(1, 1, b"\xff\xff\xff"))
        np.testing.assert_array_equal(D.load_image(path), np.ones((3, 1, 1)))

    def test_two_by_two(self):
        # Row-major RGB triples: (0,51,102) (153,204,255) / (255,0,0) (0,0,255)
        payload = bytes([0, 51, 102, 153, 204, 255, 255, 0, 0, 0, 0, 255])
        img = D.decode_ppm(ppm(2, 2, payload))
        expected = np.array([
            [[0.0, 0.6], [1.0, 0.0]],
            [[0.2, 0.8], [0.0, 0.0]],
            [[0.4, 1.0], [0.0, 1.0]],
        ], dtype=np.float32)
        np.testing.assert_allclose(img, expected, atol=1e-7)

    def test_comments_in_header(self):
        img = D.decode_ppm(b"P6 # made by hand\n1 1\n255\n\x00\x80\xff")
        np.testing.assert_allclose(img[:, 0, 0], [0, 128 / 255, 1], atol=1e-7)

    def test_truncated(self):
        with pytest.raises(ParseError) as info:
            D.decode_ppm(ppm(2, 2, b"\x00" * 11))
        assert info.value.offset == len(ppm(2, 2, b"\x00" * 11))

    @pytest.mark.parametrize("buf,offset", [(b"P5\n1 1\n255\n\x00", 0), (b"P6\n1 x\n255\n", 5)])
    def test_malformed_header_offset(self, buf, offset):
        with pytest.raises(ParseError) as info:
            D.decode_ppm(buf)
        assert info.value.offset == offset

    def test_sixteen_bit_rejected(self):
        with pytest.raises(ParseError):
            D.decode_ppm(ppm(1, 1, b"\x00" * 6, maxval=65535))

    def test_round_trip(self, rng, tmp_path):
        img = np.round(rng.random((3, 5, 7)) * 255) / 255
        D.save_image(tmp_path / "a.ppm", img)
        np.testing.assert_allclose(D.load_image(tmp_path / "a.ppm"), img, atol=1e-6)

    def test_pgm_round_trip(self, tmp_path, rng):
        gray = rng.integers(0, 256, size=(4, 6)).astype(np.uint8)
        D.write_pgm(tmp_path / "g.pgm", gray)
        np.testing.assert_array_equal(D.read_pgm(tmp_path / "g.pgm"), gray)


def ckpt_of(tensors):
    return D.Checkpoint("hybrid", {"epochs": 1, "method": "hybrid"}, tensors)


class TestCheckpoint:
    def test_round_trip_bitwise(self, rng, tmp_path):
        tensors = {"a": rng.normal(size=(3, 4)).astype(np.float32), "b/c": rng.normal(size=(5,)).astype(np.float32),
                   "scalar": np.array(1.5, dtype=np.float32)}
        D.save_checkpoint(ckpt_of(tensors), tmp_path / "x.ckpt")
        back = D.load_checkpoint(tmp_path / "x.ckpt")
        assert back.method == "hybrid" and back.config == {"epochs": 1, "method": "hybrid"}
        assert list(back.tensors) == list(tensors)
        for k, v in tensors.items():
            assert back.tensors[k].shape == v.shape
            assert back.tensors[k].tobytes() == v.tobytes()

    @settings(max_examples=30, deadline=None)
    @given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=5),
                      elements=st.floats(width=32, allow_nan=False)))
    def test_round_trip_property(self, arr):
        back = D.decode_checkpoint(D.encode_checkpoint(ckpt_of({"t": arr})))
        assert back.tensors["t"].shape == arr.shape
        assert back.tensors["t"].tobytes() == arr.tobytes()

    def test_empty_tensor_list(self):
        back = D.decode_checkpoint(D.encode_checkpoint(ckpt_of({})))
        assert back.tensors == {}

    def test_layout(self):
        buf = D.encode_checkpoint(D.Checkpoint("barlow", {}, {"w": np.array([1.0, 2.0], dtype=np.float32)}))
        assert buf[:4] == b"DTWN"
        assert struct.unpack("<I", buf[4:8])[0] == 1
        meta_len = struct.unpack("<I", buf[8:12])[0]
        pos = 12 + meta_len
        assert struct.unpack("<I", buf[pos:pos + 4])[0] == 1
        record = buf[pos + 4:-4]
        assert record == struct.pack("<I", 1) + b"w" + struct.pack("<II", 1, 2) + struct.pack("<2f", 1.0, 2.0)
        assert struct.unpack("<I", buf[-4:])[0] == zlib.crc32(buf[8:-4])

    def test_flipped_byte_fails_checksum(self, rng):
        buf = bytearray(D.encode_checkpoint(ckpt_of({"w": rng.normal(size=(4, 4)).astype(np.float32)})))
        buf[-10] ^= 0x01
        with pytest.raises(ChecksumError):
            D.decode_checkpoint(bytes(buf))

    def test_bad_magic(self):
        with pytest.raises(BadMagicError):
            D.decode_checkpoint(b"NOPE" + b"\x00" * 20)

    def test_version_mismatch(self):
        buf = bytearray(D.encode_checkpoint(ckpt_of({})))
        buf[4:8] = struct.pack("<I", 2)
        with pytest.raises(VersionError):
            D.decode_checkpoint(bytes(buf))

    def test_inconsistent_byte_count(self):
        good = D.encode_checkpoint(ckpt_of({"w": np.zeros(3, dtype=np.float32)}))
        body = good[8:-8]  # drop one float and the CRC
        forged = good[:8] + body + struct.pack("<I", zlib.crc32(body))
        with pytest.raises(LayoutError):
            D.decode_checkpoint(forged)

    def test_failed_write_leaves_no_temp(self, tmp_path):
        bad = D.Checkpoint("x", {"k": object()}, {})
        with pytest.raises(TypeError):
            D.save_checkpoint(bad, tmp_path / "c.ckpt")
        assert list(tmp_path.iterdir()) == []


class TestManifest:
    def test_empty_dir(self, tmp_path):
        assert len(D.build_manifest(tmp_path)) == 0

    def test_sorted_unlabeled(self, tmp_path):
        for name in ("c.ppm", "B.ppm", "a.ppm"):
            (tmp_path / name).write_bytes(ppm(1, 1, b"\x00\x00\x00"))
        (tmp_path / "notes.txt").write_text("ignored")
        m = D.build_manifest(tmp_path)
        assert [e.path for e in m.entries] == ["B.ppm", "a.ppm", "c.ppm"]
        assert not m.labeled

    def test_labels_join(self, tmp_path):
        for name in ("a.ppm", "b.ppm"):
            (tmp_path / name).write_bytes(ppm(1, 1, b"\x00\x00\x00"))
        (tmp_path / "labels.csv").write_text("path,label\nb.ppm,1\na.ppm,0\n")
        m = D.resolve_dataset(tmp_path)
        assert [(e.path, e.label) for e in m.entries] == [("a.ppm", 0), ("b.ppm", 1)]
        assert m.labeled and m.num_classes == 2

    def test_missing_file(self, tmp_path):
        (tmp_path / "a.ppm").write_bytes(ppm(1, 1, b"\x00\x00\x00"))
        csv = tmp_path / "l.csv"
        csv.write_text("a.ppm,0\nghost.ppm,1\n")
        with pytest.raises(ManifestError, match="ghost.ppm"):
            D.build_manifest(tmp_path, csv)

    def test_non_contiguous_labels(self, tmp_path):
        with pytest.raises(ManifestError):
            D.DatasetManifest(tmp_path, [D.ManifestEntry("a", 0), D.ManifestEntry("b", 2)])

    def test_duplicate_paths(self, tmp_path):
        with pytest.raises(ManifestError):
            D.DatasetManifest(tmp_path, [D.ManifestEntry("a"), D.ManifestEntry("a")])

    def test_manifest_csv_round_trip(self, tmp_path):
        for name in ("x.ppm", "y.ppm"):
            (tmp_path / name).write_bytes(ppm(1, 1, b"\x00\x00\x00"))
        m = D.DatasetManifest(tmp_path, [D.ManifestEntry("x.ppm", 1), D.ManifestEntry("y.ppm", 0)])
        D.write_manifest(m, tmp_path / "m.csv")
        back = D.resolve_dataset(tmp_path / "m.csv")
        assert back.entries == m.entries

    def test_dataset_missing(self, tmp_path):
        with pytest.raises(ManifestError):
            D.build_manifest(tmp_path / "nope")
