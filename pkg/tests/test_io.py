import numpy as np
import pytest

from sokd.errors import BadMagicError, DataError, TruncatedPayloadError, UnsupportedFormatError
from sokd.io import load_tensor, save_tensor
from sokd.tensor import Rng, Tensor


class TestContainerRoundTrip:
    @pytest.mark.parametrize("dims", [(1,), (3, 4), (2, 3, 4, 5)])
    def test_float_bit_exact(self, tmp_path, dims):
        t = Tensor(Rng(1).normal(dims).astype(np.float32))
        path = tmp_path / "t.sokt"
        save_tensor(path, t)
        back = load_tensor(path)
        assert back.dims == dims
        assert back.data.tobytes() == t.data.tobytes()

    def test_uint32_labels(self, tmp_path):
        labels = np.array([0, 7, 3, 9], dtype=np.uint32)
        path = tmp_path / "labels.sokt"
        save_tensor(path, labels)
        back = load_tensor(path)
        assert back.dtype == np.uint32
        np.testing.assert_array_equal(back, labels)

    def test_save_is_deterministic(self, tmp_path):
        t = Tensor(Rng(2).normal((4, 4)).astype(np.float32))
        save_tensor(tmp_path / "a.sokt", t)
        save_tensor(tmp_path / "b.sokt", t)
        assert (tmp_path / "a.sokt").read_bytes() == (tmp_path / "b.sokt").read_bytes()


class TestContainerErrors:
    def _write_valid(self, path):
        save_tensor(path, Tensor(np.arange(100, dtype=np.float32).reshape(10, 10)))
        return path.read_bytes()

    def test_bad_magic(self, tmp_path):
        blob = self._write_valid(tmp_path / "t.sokt")
        bad = tmp_path / "bad.sokt"
        bad.write_bytes(b"XOKT" + blob[4:])
        with pytest.raises(BadMagicError):
            load_tensor(bad)

    def test_unsupported_version(self, tmp_path):
        blob = self._write_valid(tmp_path / "t.sokt")
        bad = tmp_path / "bad.sokt"
        bad.write_bytes(blob[:4] + b"\x02" + blob[5:])
        with pytest.raises(UnsupportedFormatError):
            load_tensor(bad)

    def test_unsupported_dtype(self, tmp_path):
        blob = self._write_valid(tmp_path / "t.sokt")
        bad = tmp_path / "bad.sokt"
        bad.write_bytes(blob[:5] + b"\x07" + blob[6:])
        with pytest.raises(UnsupportedFormatError):
            load_tensor(bad)

    def test_truncated_payload(self, tmp_path):
        blob = self._write_valid(tmp_path / "t.sokt")
        bad = tmp_path / "bad.sokt"
        bad.write_bytes(blob[: len(blob) - 200])  # 50 of 100 elements remain
        with pytest.raises(TruncatedPayloadError):
            load_tensor(bad)

    def test_trailing_bytes(self, tmp_path):
        blob = self._write_valid(tmp_path / "t.sokt")
        bad = tmp_path / "bad.sokt"
        bad.write_bytes(blob + b"\x00\x00")
        with pytest.raises(DataError):
            load_tensor(bad)
