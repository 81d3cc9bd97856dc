import numpy as np
import pytest
from numpy.testing import assert_array_equal

from foundation.core.checkpoint import MAGIC, load_arrays, save_arrays
from foundation.core.errors import CorruptFileError, ParseError
from foundation.core.metaimage import read_volume, write_volume
from foundation.core.volume import Volume

HEADER = """ObjectType = Image
NDims = 3
BinaryData = True
BinaryDataByteOrderMSB = False
ElementSpacing = 0.5 0.4 0.75
DimSize = 4 3 2
ElementType = MET_SHORT
ElementDataFile = case.raw
"""


class TestMetaImage:
    @pytest.mark.parametrize("suffix", [".mha", ".mhd"])
    def test_float_round_trip_bit_identical(self, tmp_path, suffix):
        data = np.random.default_rng(0).normal(size=(5, 4, 3)).astype(np.float32)
        v = Volume(data, (0.5, 0.4, 0.75), (-3.0, 2.5, 10.0))
        back = read_volume(write_volume(v, tmp_path / f"img{suffix}"))
        assert back.data.dtype == np.float32
        assert_array_equal(back.data, data)
        assert back.spacing == v.spacing
        assert back.origin == v.origin

    def test_mhd_writes_raw_sibling(self, tmp_path):
        v = Volume(np.ones((2, 2, 2), dtype=np.uint8), (1.0, 1.0, 1.0))
        write_volume(v, tmp_path / "mask.mhd")
        assert (tmp_path / "mask.raw").stat().st_size == 8

    def test_body_is_x_fastest(self, tmp_path):
        (tmp_path / "case.mhd").write_text(HEADER)
        (tmp_path / "case.raw").write_bytes(np.arange(24, dtype="<i2").tobytes())
        v = read_volume(tmp_path / "case.mhd")
        assert v.dims == (4, 3, 2)
        assert v.spacing == (0.5, 0.4, 0.75)
        assert v.origin == (0.0, 0.0, 0.0)
        assert v.data[1, 0, 0] == 1
        assert v.data[0, 1, 0] == 4
        assert v.data[0, 0, 1] == 12

    def test_body_size_checked(self, tmp_path):
        (tmp_path / "case.mhd").write_text(HEADER)
        (tmp_path / "case.raw").write_bytes(np.zeros(23, dtype="<i2").tobytes())
        with pytest.raises(CorruptFileError, match="48 bytes"):
            read_volume(tmp_path / "case.mhd")

    def test_missing_spacing_names_line(self, tmp_path):
        text = "\n".join(line for line in HEADER.splitlines() if not line.startswith("ElementSpacing"))
        (tmp_path / "case.mhd").write_text(text + "\n")
        (tmp_path / "case.raw").write_bytes(np.zeros(24, dtype="<i2").tobytes())
        with pytest.raises(ParseError) as info:
            read_volume(tmp_path / "case.mhd")
        assert "ElementSpacing" in str(info.value)
        assert info.value.line_number == 7

    def test_bad_value_names_line(self, tmp_path):
        (tmp_path / "case.mhd").write_text(HEADER.replace("DimSize = 4 3 2", "DimSize = 4 x 2"))
        with pytest.raises(ParseError) as info:
            read_volume(tmp_path / "case.mhd")
        assert info.value.line_number == 6

    def test_unknown_key_ignored(self, tmp_path):
        (tmp_path / "case.mhd").write_text("Modality = MET_MOD_MR\n" + HEADER)
        (tmp_path / "case.raw").write_bytes(np.zeros(24, dtype="<i2").tobytes())
        assert read_volume(tmp_path / "case.mhd").dims == (4, 3, 2)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope.mha"):
            read_volume(tmp_path / "nope.mha")


class TestParameterFile:
    def test_round_trip(self, tmp_path):
        arrays = {"a": np.arange(6.0).reshape(2, 3), "scalar": np.array(2.5), "b.weight": np.ones((1, 1, 3, 3, 3))}
        save_arrays(tmp_path / "p.bin", arrays)
        back = load_arrays(tmp_path / "p.bin")
        assert list(back) == list(arrays)
        for name in arrays:
            assert_array_equal(back[name], arrays[name])

    def test_bad_magic(self, tmp_path):
        (tmp_path / "p.bin").write_bytes(b"NOTMAGIC" + bytes(8))
        with pytest.raises(CorruptFileError):
            load_arrays(tmp_path / "p.bin")

    def test_truncated(self, tmp_path):
        save_arrays(tmp_path / "p.bin", {"a": np.ones(10)})
        raw = (tmp_path / "p.bin").read_bytes()
        (tmp_path / "p.bin").write_bytes(raw[:-5])
        with pytest.raises(CorruptFileError):
            load_arrays(tmp_path / "p.bin")

    def test_header_layout(self, tmp_path):
        save_arrays(tmp_path / "p.bin", {})
        assert (tmp_path / "p.bin").read_bytes() == MAGIC + bytes(8)
