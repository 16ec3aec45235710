import numpy as np
import pytest

from oracles import conv2d_naive, conv3d_naive, maxpool_naive, sigmoid_scalar
from voxelnet.convnet import (
    ConvFeatureBank,
    VolumeFeaturizer,
    export_feature_slice,
    feature_map,
    featurize2d,
    featurize3d,
    read_feature_cache,
    read_pgm,
    write_feature_cache,
)
from voxelnet.exceptions import DimensionError, FormatError, ParameterError

SCAN_SHAPE = (68, 95, 79)


def vsigmoid(a):
    return np.vectorize(sigmoid_scalar)(a)


def stagewise_3d(scan, filters, biases, window):
    blocks = [maxpool_naive(vsigmoid(conv3d_naive(scan, w) + b), window).reshape(-1)
              for w, b in zip(filters, biases)]
    return np.concatenate(blocks)


def stagewise_2d(scan, filters, biases, window):
    blocks = []
    for w, b in zip(filters, biases):
        for z in range(scan.shape[0]):
            blocks.append(maxpool_naive(vsigmoid(conv2d_naive(scan[z], w) + b), window).reshape(-1))
    return np.concatenate(blocks)


class TestFeatureMap:
    def test_full_size_shape(self):
        fm = feature_map(np.zeros(SCAN_SHAPE), np.zeros((5, 5, 5)), 0.0)
        assert fm.shape == (64, 91, 75)

    def test_zero_filter(self):
        fm = feature_map(np.random.default_rng(0).normal(size=(6, 6, 6)), np.zeros((2, 2, 2)), 0.0)
        assert np.all(fm == 0.5)

    def test_composition(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(6, 7, 5))
        w = rng.normal(size=(3, 2, 3))
        np.testing.assert_allclose(feature_map(x, w, 0.3), vsigmoid(conv3d_naive(x, w) + 0.3),
                                   rtol=1e-13)
        x2 = rng.normal(size=(8, 9))
        w2 = rng.normal(size=(3, 3))
        np.testing.assert_allclose(feature_map(x2, w2, -0.2), vsigmoid(conv2d_naive(x2, w2) - 0.2),
                                   rtol=1e-13)


class TestFeaturize:
    def test_full_size_lengths(self):
        bank3 = ConvFeatureBank("3d", np.zeros((150, 5, 5, 5)), np.zeros(150), (5, 5, 5), SCAN_SHAPE)
        assert bank3.map_shape == (64, 91, 75)
        assert bank3.pooled_shape == (12, 18, 15)
        assert bank3.n_features == 486_000
        bank2 = ConvFeatureBank("2d", np.zeros((150, 11, 11)), np.zeros(150), (10, 10), SCAN_SHAPE)
        assert bank2.map_shape == (85, 69)
        assert bank2.pooled_shape == (8, 6)
        assert bank2.n_features == 489_600

    def test_single_filter_single_output(self):
        bank = ConvFeatureBank("3d", np.ones((1, 3, 3, 3)), [0.0], (1, 1, 1), (3, 3, 3))
        assert featurize3d(np.ones((3, 3, 3)), bank).shape == (1,)

    def test_3d_stagewise(self):
        rng = np.random.default_rng(2)
        scan = rng.normal(size=(12, 12, 12))
        filters = rng.normal(scale=0.3, size=(2, 3, 3, 3))
        biases = rng.normal(size=2)
        bank = ConvFeatureBank("3d", filters, biases, (4, 3, 5), scan.shape)
        np.testing.assert_allclose(featurize3d(scan, bank),
                                   stagewise_3d(scan, filters, biases, (4, 3, 5)), rtol=1e-13)

    def test_2d_single_slice(self):
        bank = ConvFeatureBank("2d", np.ones((1, 3, 3)), [0.0], (2, 2), (1, 9, 8))
        assert featurize2d(np.zeros((1, 9, 8)), bank).shape == (3 * 3,)

    def test_2d_stagewise(self):
        rng = np.random.default_rng(3)
        scan = rng.normal(size=(4, 11, 10))
        filters = rng.normal(scale=0.3, size=(3, 3, 4))
        biases = rng.normal(size=3)
        bank = ConvFeatureBank("2d", filters, biases, (3, 2), scan.shape)
        np.testing.assert_allclose(featurize2d(scan, bank),
                                   stagewise_2d(scan, filters, biases, (3, 2)), rtol=1e-13)

    def test_values_in_open_unit_interval(self):
        rng = np.random.default_rng(4)
        bank = ConvFeatureBank("3d", rng.normal(scale=5, size=(3, 3, 3, 3)), [40.0, -40.0, 0.0],
                               (2, 2, 2), (8, 8, 8))
        v = featurize3d(rng.normal(size=(8, 8, 8)), bank)
        assert np.all(v > 0) and np.all(v < 1)

    def test_permuting_filters_permutes_blocks(self):
        rng = np.random.default_rng(5)
        filters = rng.normal(size=(4, 2, 2, 2))
        biases = rng.normal(size=4)
        scan = rng.normal(size=(7, 6, 8))
        perm = [2, 0, 3, 1]
        a = featurize3d(scan, ConvFeatureBank("3d", filters, biases, (2, 2, 2), scan.shape))
        b = featurize3d(scan, ConvFeatureBank("3d", filters[perm], biases[perm], (2, 2, 2),
                                              scan.shape))
        np.testing.assert_array_equal(b.reshape(4, -1), a.reshape(4, -1)[perm])

    def test_deterministic(self):
        rng = np.random.default_rng(6)
        bank = ConvFeatureBank("2d", rng.normal(size=(3, 3, 3)), rng.normal(size=3), (2, 2),
                               (5, 9, 9))
        scan = rng.normal(size=(5, 9, 9))
        assert featurize2d(scan, bank).tobytes() == featurize2d(scan.copy(), bank).tobytes()

    @pytest.mark.parametrize("shape", [(9, 9, 9), (8, 9, 9), (8, 8, 9)])
    def test_length_law(self, shape):
        bank = ConvFeatureBank("3d", np.zeros((3, 2, 3, 4)), np.zeros(3), (2, 3, 2), shape)
        expected = 3 * ((shape[0] - 1) // 2) * ((shape[1] - 2) // 3) * ((shape[2] - 3) // 2)
        assert featurize3d(np.zeros(shape), bank).shape == (expected,)

    def test_shape_mismatch_names_axis(self):
        bank = ConvFeatureBank("3d", np.zeros((1, 2, 2, 2)), [0.0], (1, 1, 1), (4, 4, 4))
        with pytest.raises(DimensionError, match="axis 1"):
            featurize3d(np.zeros((4, 5, 4)), bank)

    def test_wrong_mode(self):
        bank = ConvFeatureBank("2d", np.zeros((1, 2, 2)), [0.0], (1, 1), (4, 4, 4))
        with pytest.raises(ParameterError):
            featurize3d(np.zeros((4, 4, 4)), bank)

    def test_bank_is_frozen(self):
        bank = ConvFeatureBank("3d", np.zeros((1, 2, 2, 2)), [0.0], (1, 1, 1), (4, 4, 4))
        with pytest.raises(ValueError):
            bank.filters[0, 0, 0, 0] = 1.0

    def test_bank_validation(self):
        with pytest.raises(DimensionError):
            ConvFeatureBank("3d", np.zeros((2, 2, 2, 2)), [0.0], (1, 1, 1), (4, 4, 4))
        with pytest.raises(DimensionError):
            ConvFeatureBank("3d", np.zeros((1, 2, 2, 2)), [0.0], (5, 1, 1), (4, 4, 4))

    def test_transformer(self):
        rng = np.random.default_rng(7)
        bank = ConvFeatureBank("3d", rng.normal(size=(2, 2, 2, 2)), [0.1, -0.1], (2, 2, 2),
                               (5, 5, 5))
        X = rng.normal(size=(3, 5, 5, 5))
        F = VolumeFeaturizer(bank).fit_transform(X)
        assert F.shape == (3, bank.n_features)
        np.testing.assert_array_equal(F[1], featurize3d(X[1], bank))


class TestExport:
    def test_full_size_slice(self, tmp_path):
        rng = np.random.default_rng(8)
        filters = rng.normal(scale=0.1, size=(4, 5, 5, 5))
        bank = ConvFeatureBank("3d", filters, np.zeros(4), (5, 5, 5), SCAN_SHAPE)
        scan = rng.normal(size=SCAN_SHAPE)
        path = tmp_path / "basis4.pgm"
        image = export_feature_slice(scan, bank, 3, 31, path)
        assert image.shape == (91, 75)
        assert path.read_bytes().startswith(b"P5\n75 91\n255\n")
        np.testing.assert_array_equal(read_pgm(path), image)
        fm = feature_map(scan, filters[3], 0.0)[31]
        lo, hi = fm.min(), fm.max()
        np.testing.assert_array_equal(image, np.rint((fm - lo) / (hi - lo) * 255).astype(np.uint8))

    def test_constant_is_mid_gray(self, tmp_path):
        bank = ConvFeatureBank("3d", np.zeros((1, 2, 2, 2)), [0.0], (1, 1, 1), (6, 6, 6))
        image = export_feature_slice(np.full((6, 6, 6), 3.0), bank, 0, 2, tmp_path / "g.pgm")
        assert np.all(image == 128)

    def test_2d_mode(self, tmp_path):
        bank = ConvFeatureBank("2d", np.ones((2, 3, 3)), [0.0, 0.0], (2, 2), (4, 9, 9))
        scan = np.random.default_rng(9).normal(size=(4, 9, 9))
        assert export_feature_slice(scan, bank, 1, 3, tmp_path / "s.pgm").shape == (7, 7)

    @pytest.mark.parametrize("f, s", [(1, 0), (-1, 0), (0, 5), (0, -1)])
    def test_index_out_of_range(self, tmp_path, f, s):
        bank = ConvFeatureBank("3d", np.zeros((1, 2, 2, 2)), [0.0], (1, 1, 1), (6, 6, 6))
        with pytest.raises(ParameterError):
            export_feature_slice(np.zeros((6, 6, 6)), bank, f, s, tmp_path / "x.pgm")


class TestFeatureCache:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(10)
        vectors = [rng.uniform(size=n).astype(np.float32) for n in (5, 0, 12)]
        path = tmp_path / "f.vxfv"
        write_feature_cache(path, vectors)
        loaded = read_feature_cache(path)
        assert [v.tobytes() for v in loaded] == [v.tobytes() for v in vectors]
        raw = path.read_bytes()
        write_feature_cache(tmp_path / "g.vxfv", loaded)
        assert (tmp_path / "g.vxfv").read_bytes() == raw
        assert raw[:4] == b"VXFV" and int.from_bytes(raw[8:16], "little") == 5

    def test_truncated(self, tmp_path):
        path = tmp_path / "f.vxfv"
        write_feature_cache(path, [np.ones(4, dtype=np.float32)])
        path.write_bytes(path.read_bytes()[:-2])
        with pytest.raises(FormatError, match="offset"):
            read_feature_cache(path)
