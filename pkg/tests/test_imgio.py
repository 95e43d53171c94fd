import gzip
import struct

import numpy as np
import pytest

from icreg.imgio import (
    read_field,
    read_landmarks,
    read_nifti,
    write_landmarks,
    write_nifti,
)
from icreg.landmarks import Landmark, LandmarkSet
from icreg.transform import DisplacementField
from icreg.volume import Volume

from oracles import independent_nifti_read


def f32(a):
    # squeeze through float32 so written files round-trip bitwise
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def craft_nifti(
    path,
    order,
    dims,
    datatype,
    payload,
    slope=1.0,
    inter=0.0,
    pixdim3=(1.0, 1.0, 1.0),
    magic=b"n+1\x00",
    vox_offset=352.0,
):
    """Build a NIfTI-1 file byte by byte, independent of the writer under test."""
    hdr = bytearray(348)
    struct.pack_into(order + "i", hdr, 0, 348)
    dim8 = [len(dims)] + list(dims) + [1] * (7 - len(dims))
    struct.pack_into(order + "8h", hdr, 40, *dim8)
    struct.pack_into(order + "h", hdr, 70, datatype)
    pix8 = [1.0] + list(pixdim3) + [1.0] * 4
    struct.pack_into(order + "8f", hdr, 76, *pix8)
    struct.pack_into(order + "f", hdr, 108, vox_offset)
    struct.pack_into(order + "2f", hdr, 112, slope, inter)
    hdr[344:348] = magic
    blob = bytes(hdr) + b"\x00" * 4 + payload.tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


class TestVolumeRoundTrip:
    def test_volume_bitwise(self, tmp_path):
        rng = np.random.default_rng(80)
        v = Volume(f32(rng.random((1, 4, 5, 6))), spacing=(1.0, 1.5, 2.0))
        p = str(tmp_path / "v.nii")
        write_nifti(v, p)
        back = read_nifti(p)
        assert np.array_equal(back.data, v.data)
        assert back.spacing == v.spacing

    def test_multichannel_bitwise(self, tmp_path):
        rng = np.random.default_rng(81)
        v = Volume(f32(rng.random((3, 4, 4, 4))))
        p = str(tmp_path / "mc.nii")
        write_nifti(v, p)
        back = read_nifti(p)
        assert back.channels == 3
        assert np.array_equal(back.data, v.data)

    def test_gzip_bitwise(self, tmp_path):
        rng = np.random.default_rng(82)
        v = Volume(f32(rng.random((1, 3, 3, 3))))
        p = str(tmp_path / "v.nii.gz")
        write_nifti(v, p)
        with open(p, "rb") as fh:
            assert fh.read(2) == b"\x1f\x8b"
        assert np.array_equal(read_nifti(p).data, v.data)

    def test_repeat_writes_are_bitwise_identical_files(self, tmp_path):
        rng = np.random.default_rng(83)
        v = Volume(f32(rng.random((1, 4, 4, 4))))
        p1, p2 = str(tmp_path / "a.nii.gz"), str(tmp_path / "b.nii.gz")
        write_nifti(v, p1)
        write_nifti(v, p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_int16_slope_inter(self, tmp_path):
        vals = np.arange(-4, 4, dtype="<i2").reshape(2, 2, 2)
        p = str(tmp_path / "s.nii")
        craft_nifti(p, "<", (2, 2, 2), 4, vals, slope=2.0, inter=1.0)
        back = read_nifti(p)
        assert np.array_equal(back.data[0], vals.astype(np.float64) * 2.0 + 1.0)

    def test_big_endian_matches_little_endian(self, tmp_path):
        rng = np.random.default_rng(84)
        src = rng.random((3, 4, 5)).astype(np.float32)
        ple, pbe = str(tmp_path / "le.nii"), str(tmp_path / "be.nii")
        craft_nifti(ple, "<", (5, 4, 3), 16, src.astype("<f4"))
        craft_nifti(pbe, ">", (5, 4, 3), 16, src.astype(">f4"))
        le, be = read_nifti(ple), read_nifti(pbe)
        assert np.array_equal(le.data, be.data)
        assert le.spacing == be.spacing

    def test_uint8_payload(self, tmp_path):
        vals = np.arange(8, dtype=np.uint8).reshape(2, 2, 2)
        p = str(tmp_path / "u8.nii")
        craft_nifti(p, "<", (2, 2, 2), 2, vals)
        assert np.array_equal(read_nifti(p).data[0], vals.astype(np.float64))

    def test_float64_payload(self, tmp_path):
        vals = np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).reshape(2, 2, 2)
        p = str(tmp_path / "f8.nii")
        craft_nifti(p, "<", (2, 2, 2), 64, vals.astype("<f8"))
        assert np.array_equal(read_nifti(p).data[0], vals)

    def test_nonpositive_pixdim_falls_back_to_unit(self, tmp_path):
        vals = np.zeros((2, 2, 2), dtype="<f4")
        p = str(tmp_path / "z.nii")
        craft_nifti(p, "<", (2, 2, 2), 16, vals, pixdim3=(0.0, -1.0, 2.0))
        assert read_nifti(p).spacing == (1.0, 1.0, 2.0)

    def test_independent_reader_agrees(self, tmp_path):
        rng = np.random.default_rng(85)
        v = Volume(f32(rng.random((2, 3, 4, 5))), spacing=(1.0, 2.0, 3.0))
        p = str(tmp_path / "x.nii")
        write_nifti(v, p)
        shape, pixdim, arr = independent_nifti_read(p)
        assert shape == (5, 4, 3, 2)
        assert pixdim == pytest.approx((1.0, 2.0, 3.0))
        assert np.array_equal(arr, v.data)


class TestFieldRoundTrip:
    def test_field_bitwise(self, tmp_path):
        rng = np.random.default_rng(86)
        u = DisplacementField(f32(rng.standard_normal((3, 4, 5, 6))), spacing=(2.0, 1.0, 1.0))
        p = str(tmp_path / "u.nii.gz")
        write_nifti(u, p)
        back = read_field(p)
        assert np.array_equal(back.components, u.components)
        assert back.spacing == u.spacing

    def test_zero_field_file_size(self, tmp_path):
        u = DisplacementField.zero((4, 4, 4))
        p = str(tmp_path / "z.nii")
        write_nifti(u, p)
        import os

        assert os.path.getsize(p) == 352 + 4 * 4**3 * 3

    def test_field_layout_on_disk(self, tmp_path):
        u = DisplacementField.zero((6, 5, 4))
        p = str(tmp_path / "l.nii")
        write_nifti(u, p)
        shape, _, arr = independent_nifti_read(p)
        assert shape == (6, 5, 4, 1, 3)
        assert arr.shape == (3, 1, 4, 5, 6)

    def test_independent_reader_agrees_on_components(self, tmp_path):
        rng = np.random.default_rng(87)
        u = DisplacementField(f32(rng.standard_normal((3, 3, 3, 3))))
        p = str(tmp_path / "c.nii")
        write_nifti(u, p)
        _, _, arr = independent_nifti_read(p)
        assert np.array_equal(arr[:, 0], u.components)

    def test_read_nifti_refuses_field_file(self, tmp_path):
        p = str(tmp_path / "f.nii")
        write_nifti(DisplacementField.zero((3, 3, 3)), p)
        with pytest.raises(ValueError, match="read_field"):
            read_nifti(p)

    def test_read_field_refuses_plain_volume(self, tmp_path):
        p = str(tmp_path / "v.nii")
        write_nifti(Volume(np.zeros((1, 3, 3, 3))), p)
        with pytest.raises(ValueError, match="5-D"):
            read_field(p)

    def test_read_field_rejects_wrong_vector_layout(self, tmp_path):
        payload = np.zeros((2, 2, 2, 2, 2), dtype="<f4")
        p = str(tmp_path / "bad.nii")
        craft_nifti(p, "<", (2, 2, 2, 2, 2), 16, payload)
        with pytest.raises(ValueError, match="layout"):
            read_field(p)


class TestHeaderErrors:
    def write_valid(self, tmp_path):
        p = str(tmp_path / "v.nii")
        write_nifti(Volume(np.zeros((1, 3, 3, 3))), p)
        return p

    def patch(self, path, offset, blob):
        with open(path, "r+b") as fh:
            fh.seek(offset)
            fh.write(blob)

    def test_truncated_header(self, tmp_path):
        p = self.write_valid(tmp_path)
        blob = open(p, "rb").read()[:100]
        open(p, "wb").write(blob)
        with pytest.raises(ValueError, match="header"):
            read_nifti(p)

    def test_truncated_payload_reports_byte_counts(self, tmp_path):
        p = self.write_valid(tmp_path)
        blob = open(p, "rb").read()
        open(p, "wb").write(blob[:400])
        with pytest.raises(ValueError, match="108"):
            read_nifti(p)

    def test_bad_magic(self, tmp_path):
        p = self.write_valid(tmp_path)
        self.patch(p, 344, b"XXX\x00")
        with pytest.raises(ValueError, match="magic"):
            read_nifti(p)

    def test_pair_files_rejected(self, tmp_path):
        p = self.write_valid(tmp_path)
        self.patch(p, 344, b"ni1\x00")
        with pytest.raises(ValueError, match="pair"):
            read_nifti(p)

    def test_not_a_nifti(self, tmp_path):
        p = str(tmp_path / "junk.nii")
        open(p, "wb").write(b"\x00" * 500)
        with pytest.raises(ValueError, match="header size"):
            read_nifti(p)

    def test_unsupported_datatype_names_code(self, tmp_path):
        p = self.write_valid(tmp_path)
        self.patch(p, 70, struct.pack("<h", 128))
        with pytest.raises(ValueError, match="128"):
            read_nifti(p)

    def test_unsupported_ndim(self, tmp_path):
        p = self.write_valid(tmp_path)
        self.patch(p, 40, struct.pack("<h", 7))
        with pytest.raises(ValueError, match="dimensions"):
            read_nifti(p)

    def test_nonpositive_dim_entry(self, tmp_path):
        p = self.write_valid(tmp_path)
        self.patch(p, 42, struct.pack("<h", 0))
        with pytest.raises(ValueError, match="dim"):
            read_nifti(p)

    def test_vox_offset_inside_header(self, tmp_path):
        p = self.write_valid(tmp_path)
        self.patch(p, 108, struct.pack("<f", 100.0))
        with pytest.raises(ValueError, match="vox_offset"):
            read_nifti(p)

    def test_oversized_volume_rejected(self, tmp_path):
        p = self.write_valid(tmp_path)
        self.patch(p, 42, struct.pack("<3h", 2000, 2000, 2000))
        with pytest.raises(ValueError, match="exceeds"):
            read_nifti(p)


class TestLandmarkCsv:
    def test_round_trip_exact(self, tmp_path):
        lms = LandmarkSet(
            [Landmark("1", 10.0, 20.0, 30.0), Landmark("2", 1.5, 2.5, 3.5)]
        )
        p = str(tmp_path / "lm.csv")
        write_landmarks(lms, p)
        back = read_landmarks(p)
        assert back.entries == lms.entries

    def test_parse_example_rows(self, tmp_path):
        p = str(tmp_path / "lm.csv")
        open(p, "w").write("Landmark,X,Y,Z\n1,10,20,30\n2,1.5,2.5,3.5\n")
        back = read_landmarks(p)
        assert len(back) == 2
        assert back.by_id()["2"] == Landmark("2", 1.5, 2.5, 3.5)

    def test_crlf_equals_lf(self, tmp_path):
        body = "Landmark,X,Y,Z\nA,1,2,3\nB,4,5,6\n"
        p_lf = str(tmp_path / "lf.csv")
        p_crlf = str(tmp_path / "crlf.csv")
        open(p_lf, "w", newline="").write(body)
        open(p_crlf, "w", newline="").write(body.replace("\n", "\r\n") + "\r\n")
        assert read_landmarks(p_lf).entries == read_landmarks(p_crlf).entries

    def test_empty_body_is_valid(self, tmp_path):
        p = str(tmp_path / "e.csv")
        open(p, "w").write("Landmark,X,Y,Z\n")
        assert len(read_landmarks(p)) == 0

    def test_malformed_line_reports_number(self, tmp_path):
        p = str(tmp_path / "bad.csv")
        open(p, "w").write("Landmark,X,Y,Z\nA,1,2,3\nB,4,5\n")
        with pytest.raises(ValueError, match="line 3"):
            read_landmarks(p)

    def test_non_numeric_coordinate_reports_number(self, tmp_path):
        p = str(tmp_path / "nn.csv")
        open(p, "w").write("Landmark,X,Y,Z\nA,1,two,3\n")
        with pytest.raises(ValueError, match="line 2"):
            read_landmarks(p)

    def test_duplicate_id_rejected(self, tmp_path):
        p = str(tmp_path / "dup.csv")
        open(p, "w").write("Landmark,X,Y,Z\nA,1,2,3\nA,4,5,6\n")
        with pytest.raises(ValueError, match="duplicate"):
            read_landmarks(p)

    def test_missing_header_rejected(self, tmp_path):
        p = str(tmp_path / "nh.csv")
        open(p, "w").write("A,1,2,3\n")
        with pytest.raises(ValueError, match="header"):
            read_landmarks(p)

    def test_blank_lines_ignored(self, tmp_path):
        p = str(tmp_path / "bl.csv")
        open(p, "w").write("\nLandmark,X,Y,Z\n\nA,1,2,3\n\n")
        assert len(read_landmarks(p)) == 1
