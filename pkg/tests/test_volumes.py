import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synctseg.volumes import (
    MaskVolume,
    Modality,
    Units,
    UnitsError,
    Volume,
    VolumeFormatError,
    central_crop,
    normalize,
    read_mask,
    read_volume,
    window_clip,
    write_mask,
    write_volume,
)


def make_volume(data, units=Units.HU, modality=Modality.CT, spacing=(3.0, 1.0, 1.0)):
    return Volume(np.asarray(data, dtype=np.float32), spacing, modality, units)


def random_volume(rng, shape=(4, 6, 8), units=Units.ARBITRARY, modality=Modality.MR):
    return make_volume(rng.normal(size=shape) * 100, units=units, modality=modality)


class TestVolumeInvariants:
    def test_rejects_non_3d(self):
        with pytest.raises(ValueError, match="3D"):
            make_volume(np.zeros((4, 4)))

    def test_rejects_non_finite(self):
        data = np.zeros((2, 2, 2))
        data[0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="finite"):
            make_volume(data)

    def test_rejects_hu_for_mr(self):
        with pytest.raises(UnitsError):
            make_volume(np.zeros((2, 2, 2)), units=Units.HU, modality=Modality.MR)

    def test_rejects_out_of_range_normalized(self):
        with pytest.raises(ValueError, match="NORMALIZED"):
            make_volume(np.full((2, 2, 2), 1.5), units=Units.NORMALIZED, modality=Modality.MR)

    def test_data_is_immutable(self):
        v = make_volume(np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            v.data[0, 0, 0] = 1.0

    def test_mask_rejects_non_binary(self):
        with pytest.raises(ValueError, match="0 or 1"):
            MaskVolume(np.full((2, 2, 2), 2), (1.0, 1.0, 1.0))


class TestWindowClip:
    def test_clips_high_value(self):
        v = make_volume(np.full((1, 1, 1), 700.0))
        assert window_clip(v, -500, 500).data[0, 0, 0] == 500.0

    def test_keeps_in_window_value(self):
        v = make_volume(np.full((1, 1, 1), 0.0))
        assert window_clip(v, -500, 500).data[0, 0, 0] == 0.0

    def test_identity_on_in_range_volume(self):
        rng = np.random.default_rng(0)
        v = make_volume(rng.uniform(-400, 400, size=(3, 5, 5)))
        out = window_clip(v, -500, 500)
        np.testing.assert_array_equal(out.data, v.data)
        assert out.spacing == v.spacing and out.modality == v.modality

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        v = make_volume(rng.uniform(-900, 900, size=(3, 5, 5)))
        once = window_clip(v, -500, 500)
        twice = window_clip(once, -500, 500)
        np.testing.assert_array_equal(once.data, twice.data)

    def test_requires_hu(self):
        v = make_volume(np.zeros((2, 2, 2)), units=Units.ARBITRARY, modality=Modality.MR)
        with pytest.raises(UnitsError):
            window_clip(v, -500, 500)

    def test_rejects_bad_window(self):
        v = make_volume(np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            window_clip(v, 500, -500)


class TestNormalize:
    @pytest.mark.parametrize("value,expected", [(10.0, -1.0), (15.0, 0.0), (20.0, 1.0)])
    def test_endpoints_and_midpoint(self, value, expected):
        v = make_volume(np.full((1, 1, 1), value), units=Units.ARBITRARY, modality=Modality.MR)
        out = normalize(v, 10.0, 20.0)
        assert out.data[0, 0, 0] == pytest.approx(expected, abs=1e-7)
        assert out.units == Units.NORMALIZED

    def test_clamps_outside_values(self):
        v = make_volume(np.array([[[-5.0, 50.0]]]), units=Units.ARBITRARY, modality=Modality.MR)
        out = normalize(v, 0.0, 10.0)
        np.testing.assert_array_equal(out.data[0, 0], [-1.0, 1.0])

    def test_rejects_bad_range(self):
        v = make_volume(np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            normalize(v, 1.0, 1.0)

    @given(st.floats(-100, 100), st.floats(0.5, 100))
    @settings(max_examples=30, deadline=None)
    def test_output_always_in_unit_range(self, lo, width):
        rng = np.random.default_rng(7)
        v = make_volume(rng.normal(scale=200, size=(2, 3, 3)),
                        units=Units.ARBITRARY, modality=Modality.MR)
        out = normalize(v, lo, lo + width)
        assert out.data.min() >= -1.0 and out.data.max() <= 1.0


class TestCentralCrop:
    def test_even_half_crop(self):
        v = make_volume(np.zeros((2, 256, 256)))
        out = central_crop(v, 0.5)
        assert out.shape == (2, 128, 128)

    def test_fraction_one_is_identity(self):
        rng = np.random.default_rng(2)
        v = random_volume(rng)
        out = central_crop(v, 1.0)
        np.testing.assert_array_equal(out.data, v.data)

    def test_odd_dimension_rounding(self):
        # 257 -> 128 rows: 129 removed, the extra one from the low-index side.
        data = np.arange(257, dtype=np.float32).reshape(1, 257, 1) * np.ones((1, 257, 4))
        v = make_volume(data)
        out = central_crop(v, 0.5)
        assert out.shape == (1, 128, 2)
        # enumerate: rows kept must be 65 .. 192 inclusive
        np.testing.assert_array_equal(out.data[0, :, 0], np.arange(65, 193, dtype=np.float32))

    def test_crop_composition_on_even_dims(self):
        v = make_volume(np.zeros((2, 64, 64)))
        once = central_crop(central_crop(v, 0.5), 0.5)
        direct = central_crop(v, 0.25)
        assert once.shape == direct.shape

    def test_crops_mask_identically(self):
        rng = np.random.default_rng(3)
        labels = (rng.random((2, 17, 17)) < 0.3).astype(np.uint8)
        m = MaskVolume(labels, (1.0, 1.0, 1.0))
        out = central_crop(m, 0.5)
        assert out.shape == (2, 8, 8)
        np.testing.assert_array_equal(out.labels, labels[:, 5:13, 5:13])

    def test_rejects_empty_result(self):
        v = make_volume(np.zeros((1, 2, 2)))
        with pytest.raises(ValueError):
            central_crop(v, 0.1)

    def test_rejects_bad_fraction(self):
        v = make_volume(np.zeros((1, 4, 4)))
        with pytest.raises(ValueError):
            central_crop(v, 0.0)
        with pytest.raises(ValueError):
            central_crop(v, 1.5)


class TestFileFormat:
    def test_volume_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(4)
        v = make_volume(rng.normal(size=(3, 7, 5)) * 300, spacing=(3.6, 0.5, 0.5))
        path = tmp_path / "v.mv01"
        write_volume(v, path)
        back = read_volume(path)
        np.testing.assert_array_equal(back.data, v.data)
        assert back.spacing == v.spacing
        assert back.modality == v.modality and back.units == v.units

    def test_mask_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        m = MaskVolume((rng.random((3, 4, 4)) < 0.4).astype(np.uint8), (3.0, 1.0, 1.0))
        path = tmp_path / "m.mv01"
        write_mask(m, path)
        back = read_mask(path)
        np.testing.assert_array_equal(back.labels, m.labels)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.mv01"
        path.write_bytes(b"XXXX" + bytes(60))
        with pytest.raises(VolumeFormatError, match="magic") as err:
            read_volume(path)
        assert err.value.offset == 0

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "trunc.mv01"
        path.write_bytes(b"MV01" + bytes(10))
        with pytest.raises(VolumeFormatError, match="truncated"):
            read_volume(path)

    def test_payload_mismatch_names_byte_counts(self, tmp_path):
        v = make_volume(np.zeros((2, 3, 4)))
        path = tmp_path / "short.mv01"
        write_volume(v, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])  # drop two voxels
        with pytest.raises(VolumeFormatError, match=r"96 bytes.*88") as err:
            read_volume(path)
        assert err.value.offset == 32

    def test_header_spacing_survives(self, tmp_path):
        v = make_volume(np.zeros((1, 1, 1)), spacing=(2.5, 0.75, 1.25))
        path = tmp_path / "s.mv01"
        write_volume(v, path)
        assert read_volume(path).spacing == (2.5, 0.75, 1.25)

    def test_mask_file_rejects_non_binary_payload(self, tmp_path):
        v = make_volume(np.full((1, 1, 1), 0.5), units=Units.ARBITRARY, modality=Modality.MR)
        path = tmp_path / "notmask.mv01"
        write_volume(v, path)
        with pytest.raises(VolumeFormatError, match="outside"):
            read_mask(path)
