import io as _io
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from superscan import io as sio
from superscan.model import build, preset
from superscan.weights import WeightTree


class TestPng:
    def test_round_trip(self, tmp_path, nprng):
        img = nprng.integers(0, 256, size=(7, 9, 3), dtype=np.uint8)
        sio.png_write(tmp_path / "a.png", img)
        np.testing.assert_array_equal(sio.png_read(tmp_path / "a.png"), img)

    def test_grey_promoted(self, tmp_path, nprng):
        g = nprng.integers(0, 256, size=(5, 4), dtype=np.uint8)
        sio.png_write(tmp_path / "g.png", g)
        out = sio.png_read(tmp_path / "g.png")
        assert out.shape == (5, 4, 3)
        for c in range(3):
            np.testing.assert_array_equal(out[:, :, c], g)

    def test_alpha_dropped(self, nprng):
        rgba = nprng.integers(0, 256, size=(3, 3, 4), dtype=np.uint8)
        buf = _io.BytesIO()
        Image.fromarray(rgba, "RGBA").save(buf, format="PNG")
        np.testing.assert_array_equal(sio.png_decode(buf.getvalue()), rgba[:, :, :3])

    def test_truncated(self, nprng):
        buf = _io.BytesIO()
        Image.fromarray(nprng.integers(0, 256, (8, 8, 3), dtype=np.uint8)).save(buf, format="PNG")
        data = buf.getvalue()
        with pytest.raises(sio.FormatError) as info:
            sio.png_decode(data[:-20])
        assert info.value.offset is not None

    def test_bad_signature(self):
        with pytest.raises(sio.FormatError):
            sio.png_decode(b"GIF89a" + b"\0" * 40)

    def test_sixteen_bit_rejected(self):
        buf = _io.BytesIO()
        Image.fromarray(np.zeros((4, 4), np.uint16)).save(buf, format="PNG")
        with pytest.raises(sio.FormatError, match="bit depth 16"):
            sio.png_decode(buf.getvalue())

    def test_crc_corruption(self, nprng):
        buf = _io.BytesIO()
        Image.fromarray(nprng.integers(0, 256, (8, 8, 3), dtype=np.uint8)).save(buf, format="PNG")
        data = bytearray(buf.getvalue())
        data[20] ^= 0xFF  # inside IHDR
        with pytest.raises(sio.FormatError, match="CRC"):
            sio.png_decode(bytes(data))

    def test_write_rejects_float(self, tmp_path):
        with pytest.raises(TypeError):
            sio.png_write(tmp_path / "f.png", np.zeros((2, 2, 3)))

    def test_float_conversion(self):
        img = np.array([[[0, 128, 255]]], np.uint8)
        chw = sio.to_float(img)
        assert chw.shape == (3, 1, 1) and chw[2, 0, 0] == 1.0
        np.testing.assert_array_equal(sio.to_u8(chw), img)
        np.testing.assert_array_equal(sio.to_u8(np.full((3, 1, 1), 2.0)), 255)


class TestWeights:
    def test_empty_tree(self):
        data = sio.dumps_weights(WeightTree())
        assert len(sio.loads_weights(data)) == 0

    def test_preset_round_trip(self, tmp_path):
        _, w = build(preset("T", 4), 0)
        sio.save_weights(w, tmp_path / "t.spmm")
        back = sio.load_weights(tmp_path / "t.spmm")
        assert list(back) == list(w)
        for k in w:
            assert back[k].dtype == w[k].dtype and back[k].shape == w[k].shape
            np.testing.assert_array_equal(back[k], w[k])

    def test_layout(self):
        tree = WeightTree({"b": np.ones(3, np.float32), "a": np.zeros((2, 2))})
        data = sio.dumps_weights(tree)
        magic, version, mlen = struct.unpack_from("<4sHI", data)
        assert magic == b"SPMM" and version == 1
        entries = json.loads(data[10:10 + mlen])["tensors"]
        assert [e["name"] for e in entries] == ["a", "b"]
        assert all(e["offset"] % 64 == 0 for e in entries)
        assert entries[0]["offset"] + entries[0]["nbytes"] <= entries[1]["offset"]

    def test_flipped_byte_fails_crc(self):
        _, w = build(preset("T-mini", 2), 0)
        data = bytearray(sio.dumps_weights(w))
        data[len(data) // 2] ^= 0x01
        with pytest.raises(sio.FormatError, match="CRC"):
            sio.loads_weights(bytes(data))

    def test_version_mismatch(self):
        data = bytearray(sio.dumps_weights(WeightTree({"a": np.ones(2)})))
        data[4:6] = struct.pack("<H", 2)
        with pytest.raises(sio.FormatError, match="version 2"):
            sio.loads_weights(bytes(data))

    def test_bad_magic_and_short(self):
        with pytest.raises(sio.FormatError):
            sio.loads_weights(b"NOPE" + b"\0" * 20)
        with pytest.raises(sio.FormatError):
            sio.loads_weights(b"SP")

    def test_unsupported_dtype(self):
        with pytest.raises(TypeError):
            sio.dumps_weights({"i": np.arange(3)})

    @given(st.lists(st.tuples(st.sampled_from([np.float32, np.float64]),
                              st.lists(st.integers(0, 4), max_size=3)), max_size=5))
    @settings(max_examples=40, deadline=None)
    def test_round_trip_property(self, specs):
        rng = np.random.default_rng(0)
        tree = WeightTree({f"t{i}": rng.normal(size=shape).astype(dt)
                           for i, (dt, shape) in enumerate(specs)})
        back = sio.loads_weights(sio.dumps_weights(tree))
        for k in tree:
            assert back[k].dtype == tree[k].dtype and back[k].shape == tree[k].shape
            assert back[k].tobytes() == tree[k].tobytes()


class TestRunConfig:
    def test_defaults_and_model(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"preset": "T-mini", "scale": 2, "model": {"T": 3}}))
        cfg = sio.load_config(p)
        mc = cfg.model_config()
        assert mc.channels == 16 and mc.T == 3 and mc.upscale == 2

    def test_unknown_keys(self):
        with pytest.raises(ValueError, match="bogus"):
            sio.RunConfig.from_dict({"bogus": 1})
        with pytest.raises(ValueError, match="widht"):
            sio.RunConfig.from_dict({"model": {"widht": 3}})
