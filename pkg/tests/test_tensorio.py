"""Round-trip and error-path tests for the file formats."""

import numpy as np
import pytest

from voxelstereo.geometry import Intrinsics, Pose, look_at
from voxelstereo.tensorio import (
    TensorFormatError,
    export_ply,
    load_cameras,
    read_tensor,
    save_cameras,
    write_tensor,
)


class TestTensorRoundTrip:
    def test_float_2x3_bit_exact(self, tmp_path):
        x = np.array([[1.5, -2.25, 3.0], [0.1, 1e-20, -7.0]], dtype=np.float32)
        p = tmp_path / "t.lsmt"
        write_tensor(p, x)
        y = read_tensor(p)
        assert y.dtype == np.float32
        assert y.shape == (2, 3)
        assert x.tobytes() == y.tobytes()

    def test_u8_round_trip(self, tmp_path):
        x = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
        p = tmp_path / "t.lsmt"
        write_tensor(p, x)
        y = read_tensor(p)
        assert y.dtype == np.uint8
        np.testing.assert_array_equal(x, y)

    @pytest.mark.parametrize("rank", [1, 2, 3, 4, 8])
    def test_all_ranks(self, tmp_path, rank):
        shape = (2,) * rank
        x = np.random.default_rng(rank).random(shape).astype(np.float32)
        p = tmp_path / "t.lsmt"
        write_tensor(p, x)
        y = read_tensor(p)
        assert y.shape == shape
        assert x.tobytes() == y.tobytes()

    def test_float64_input_stored_as_f32(self, tmp_path):
        x = np.array([1.0, 2.0, np.pi])
        p = tmp_path / "t.lsmt"
        write_tensor(p, x)
        np.testing.assert_array_equal(read_tensor(p), x.astype(np.float32))


class TestTensorErrors:
    def test_bad_magic_named_with_offset(self, tmp_path):
        p = tmp_path / "t.lsmt"
        write_tensor(p, np.zeros(3, dtype=np.float32))
        data = bytearray(p.read_bytes())
        data[:4] = b"XXXX"
        p.write_bytes(bytes(data))
        with pytest.raises(TensorFormatError, match="magic at offset 0"):
            read_tensor(p)

    def test_bad_version(self, tmp_path):
        p = tmp_path / "t.lsmt"
        write_tensor(p, np.zeros(3, dtype=np.float32))
        data = bytearray(p.read_bytes())
        data[4] = 9
        p.write_bytes(bytes(data))
        with pytest.raises(TensorFormatError, match="version"):
            read_tensor(p)

    def test_bad_dtype_code(self, tmp_path):
        p = tmp_path / "t.lsmt"
        write_tensor(p, np.zeros(3, dtype=np.float32))
        data = bytearray(p.read_bytes())
        data[6] = 77
        p.write_bytes(bytes(data))
        with pytest.raises(TensorFormatError, match="dtype"):
            read_tensor(p)

    def test_rank_zero_write_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="rank"):
            write_tensor(tmp_path / "t.lsmt", np.float32(3.0))

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "t.lsmt"
        write_tensor(p, np.zeros((4, 4), dtype=np.float32))
        p.write_bytes(p.read_bytes()[:-5])
        with pytest.raises(TensorFormatError, match="payload"):
            read_tensor(p)


class TestCameraFile:
    def test_round_trip(self, tmp_path):
        cams = [
            (Intrinsics(fx=100.0, fy=101.0, cx=31.5, cy=30.5, width=64, height=64),
             look_at([2.0, 0.3, -0.4], [0, 0, 0])),
            (Intrinsics(fx=60.0, fy=60.0, cx=31.5, cy=31.5, width=64, height=64),
             Pose(rotation=np.eye(3), translation=np.array([0.0, 0.0, 2.0]))),
        ]
        p = tmp_path / "cameras.txt"
        save_cameras(p, cams)
        loaded = load_cameras(p)
        assert len(loaded) == 2
        for (c0, p0), (c1, p1) in zip(cams, loaded):
            assert c0 == c1
            np.testing.assert_array_equal(p0.rotation, p1.rotation)
            np.testing.assert_array_equal(p0.translation, p1.translation)

    def test_orthonormality_enforced_on_load(self, tmp_path):
        p = tmp_path / "cameras.txt"
        nums = [100.0, 100.0, 32.0, 32.0, 64, 64] + [1.1, 0, 0, 0, 1, 0, 0, 0, 1] + [0, 0, 2]
        p.write_text(" ".join(str(x) for x in nums) + "\n")
        with pytest.raises(ValueError, match="orthonormal"):
            load_cameras(p)

    def test_wrong_field_count(self, tmp_path):
        p = tmp_path / "cameras.txt"
        p.write_text("1 2 3\n")
        with pytest.raises(ValueError, match="18 values"):
            load_cameras(p)


class TestPly:
    def test_single_point(self, tmp_path):
        p = tmp_path / "cloud.ply"
        export_ply(np.array([[0.0, 0.0, 0.0]]), p)
        text = p.read_text().splitlines()
        assert "element vertex 1" in text
        assert text[-1] == "0 0 0"

    def test_empty_cloud(self, tmp_path):
        p = tmp_path / "cloud.ply"
        export_ply(np.zeros((0, 3)), p)
        text = p.read_text()
        assert "element vertex 0" in text
        assert text.rstrip().endswith("end_header")

    def test_nan_rejected_with_index(self, tmp_path):
        pts = np.zeros((5, 3))
        pts[3, 1] = np.nan
        with pytest.raises(ValueError, match="index 3"):
            export_ply(pts, tmp_path / "cloud.ply")

    def test_colors_written(self, tmp_path):
        p = tmp_path / "cloud.ply"
        export_ply(np.array([[1.0, 2.0, 3.0]]), p, colors=np.array([[255, 0, 10]], dtype=np.uint8))
        text = p.read_text()
        assert "property uchar red" in text
        assert text.splitlines()[-1] == "1 2 3 255 0 10"
