"""Illumination prior, pyramid, semantic prior ingestion and synthesis."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isalux import container as C
from isalux import priors as P
from isalux import tensor as T
from isalux.errors import DataError
from helpers import bilinear_naive


def img(arr):
    return T.Tensor(np.asarray(arr, dtype=np.float32))


class TestIlluminationPrior:
    def test_black_pixel(self):
        out = P.illumination_prior(img(np.zeros((3, 1, 1))))
        assert out.data[0, 0, 0] == 1.0

    def test_white_pixel(self):
        out = P.illumination_prior(img(np.ones((3, 1, 1))))
        assert out.data[0, 0, 0] == 0.0

    def test_analytic_pixel(self):
        out = P.illumination_prior(img(np.array([0.2, 0.5, 0.3]).reshape(3, 1, 1)))
        assert np.isclose(out.data[0, 0, 0], 0.5)

    def test_wrong_channel_count_rejected(self):
        with pytest.raises(DataError, match="3 channels"):
            P.illumination_prior(img(np.zeros((4, 2, 2))))

    def test_matches_one_minus_max_on_random_pixels(self):
        rng = np.random.default_rng(123)
        px = rng.uniform(0, 1, size=(3, 1000, 1)).astype(np.float32)
        out = P.illumination_prior(img(px))
        expect = 1.0 - px.max(axis=0, keepdims=True)
        assert np.array_equal(out.data, expect.astype(np.float32))

    @settings(max_examples=50, deadline=None)
    @given(
        st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)),
        st.integers(0, 2),
        st.floats(0.001, 0.5),
    )
    def test_monotone_nonincreasing_per_channel(self, pixel, ch, bump):
        base = np.array(pixel, dtype=np.float32).reshape(3, 1, 1)
        raised = base.copy()
        raised[ch, 0, 0] = min(1.0, raised[ch, 0, 0] + bump)
        lo = P.illumination_prior(img(base)).data[0, 0, 0]
        hi = P.illumination_prior(img(raised)).data[0, 0, 0]
        assert hi <= lo


class TestPyramid:
    def test_shapes(self):
        pyr = P.build_pyramid(img(np.zeros((1, 8, 8))))
        assert [lv.shape for lv in pyr.levels] == [(1, 8, 8), (1, 4, 4), (1, 2, 2)]

    def test_level0_is_input_unchanged(self):
        rng = np.random.default_rng(5)
        base = rng.uniform(0, 1, (1, 8, 8)).astype(np.float32)
        pyr = P.build_pyramid(img(base))
        assert np.array_equal(pyr.levels[0].data, base)

    def test_constant_stays_constant(self):
        pyr = P.build_pyramid(img(np.full((1, 16, 16), 0.37, dtype=np.float32)))
        for lv in pyr.levels:
            assert np.allclose(lv.data, 0.37, atol=1e-6)

    def test_checkerboard_level1_is_half(self):
        yy, xx = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
        board = ((yy + xx) % 2).astype(np.float32).reshape(1, 8, 8)
        pyr = P.build_pyramid(img(board))
        ref = bilinear_naive(board[None], 4, 4)[0]
        assert np.allclose(pyr.levels[1].data, ref, atol=1e-6)
        assert np.allclose(pyr.levels[1].data, 0.5, atol=1e-6)

    def test_indivisible_extent_rejected_with_pad_hint(self):
        with pytest.raises(DataError, match="pad"):
            P.build_pyramid(img(np.zeros((1, 6, 8))))

    def test_level_out_of_range(self):
        pyr = P.build_pyramid(img(np.zeros((1, 8, 8))))
        with pytest.raises(DataError, match="out of range"):
            pyr.level(3)


class TestSemanticLoad:
    def one_hot_map(self, h=4, w=4):
        rng = np.random.default_rng(11)
        labels = rng.integers(0, P.SEMANTIC_CLASSES, size=(h, w))
        m = np.zeros((P.SEMANTIC_CLASSES, h, w), dtype=np.float32)
        for i in range(h):
            for j in range(w):
                m[labels[i, j], i, j] = 1.0
        return m

    def test_one_hot_unchanged(self, tmp_path):
        m = self.one_hot_map()
        path = tmp_path / "p.isat"
        C.write_records(str(path), {P.SEMANTIC_RECORD: m})
        sem = P.load_semantic_prior(str(path))
        assert np.array_equal(sem.map.data, m)

    def test_probabilities_renormalized(self, tmp_path):
        rng = np.random.default_rng(12)
        m = rng.uniform(0.01, 1, size=(P.SEMANTIC_CLASSES, 3, 5))
        m = (m / m.sum(axis=0)) * rng.uniform(0.995, 1.005, size=(1, 3, 5))
        path = tmp_path / "p.isat"
        C.write_records(str(path), {P.SEMANTIC_RECORD: m.astype(np.float32)})
        sem = P.load_semantic_prior(str(path))
        sums = sem.map.data.sum(axis=0)
        assert np.abs(sums - 1.0).max() <= 1e-4

    def test_logits_get_softmaxed(self, tmp_path):
        rng = np.random.default_rng(13)
        logits = rng.normal(0, 3, size=(P.SEMANTIC_CLASSES, 4, 4)).astype(np.float32)
        path = tmp_path / "l.isat"
        C.write_records(str(path), {P.SEMANTIC_RECORD: logits})
        sem = P.load_semantic_prior(str(path))
        sums = sem.map.data.sum(axis=0)
        assert np.abs(sums - 1.0).max() <= 1e-6
        assert (sem.map.data >= 0).all()

    def test_wrong_channel_count_rejected(self, tmp_path):
        path = tmp_path / "bad.isat"
        C.write_records(str(path), {P.SEMANTIC_RECORD: np.zeros((20, 4, 4), dtype=np.float32)})
        with pytest.raises(DataError, match="21"):
            P.load_semantic_prior(str(path))

    def test_corrupt_header_rejected(self, tmp_path):
        path = tmp_path / "corrupt.isat"
        path.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(DataError):
            P.load_semantic_prior(str(path))

    def test_wrong_record_name_rejected(self, tmp_path):
        path = tmp_path / "named.isat"
        C.write_records(str(path), {"something_else": np.zeros((21, 2, 2), dtype=np.float32)})
        with pytest.raises(DataError, match="semantic_prior"):
            P.load_semantic_prior(str(path))


class TestSyntheticPrior:
    def test_uniform_image_identical_distributions(self):
        sem = P.synthetic_semantic_prior(img(np.full((3, 8, 8), 0.4)), seed=3)
        flat = sem.map.data.reshape(P.SEMANTIC_CLASSES, -1)
        assert np.allclose(flat, flat[:, :1], atol=1e-7)

    def test_per_pixel_sum_is_one(self):
        rng = np.random.default_rng(21)
        sem = P.synthetic_semantic_prior(
            img(rng.uniform(0, 1, (3, 8, 8)).astype(np.float32)), seed=4
        )
        sums = sem.map.data.sum(axis=0)
        assert np.abs(sums - 1.0).max() <= 1e-6

    def test_two_color_regions_get_consistent_argmax(self):
        m = np.zeros((3, 8, 8), dtype=np.float32)
        m[:, :, 4:] = 0.9  # left half black, right half near-white
        sem = P.synthetic_semantic_prior(img(m), seed=0)
        argmax = sem.map.data.argmax(axis=0)
        left = argmax[:, :4]
        right = argmax[:, 4:]
        assert (left == left[0, 0]).all()
        assert (right == right[0, 0]).all()
        assert left[0, 0] != right[0, 0]

    def test_deterministic_across_calls(self):
        rng = np.random.default_rng(8)
        image = img(rng.uniform(0, 1, (3, 8, 8)).astype(np.float32))
        a = P.synthetic_semantic_prior(image, seed=9)
        b = P.synthetic_semantic_prior(image, seed=9)
        assert np.array_equal(a.map.data, b.map.data)


class TestAdaptPriors:
    def bundle(self, n=1, h=8, w=8, seed=0):
        rng = np.random.default_rng(seed)
        images = T.Tensor(rng.uniform(0, 1, (n, 3, h, w)).astype(np.float32))
        sem = T.Tensor(rng.dirichlet(np.ones(21), size=(n, h, w)).transpose(0, 3, 1, 2).astype(np.float32))
        return P.compute_priors(images, sem)

    def test_level0_shapes(self):
        store = T.ParamStore()
        adapter = P.PriorAdapter(store, "enc0.prior", 0, 16, np.random.default_rng(0))
        fi, fs = adapter.adapt(self.bundle())
        assert fi.shape == (1, 16, 8, 8)
        assert fs.shape == (1, 16, 8, 8)

    def test_level2_shapes(self):
        store = T.ParamStore()
        adapter = P.PriorAdapter(store, "bot.prior", 2, 16, np.random.default_rng(0))
        fi, fs = adapter.adapt(self.bundle())
        assert fi.shape == (1, 64, 2, 2)
        assert fs.shape == (1, 64, 2, 2)

    def test_zero_kernels_give_zero_features(self):
        store = T.ParamStore()
        adapter = P.PriorAdapter(store, "enc1.prior", 1, 8, np.random.default_rng(0))
        adapter.illum_kernel.data[:] = 0
        adapter.sem_kernel.data[:] = 0
        fi, fs = adapter.adapt(self.bundle())
        assert not fi.data.any()
        assert not fs.data.any()

    def test_bad_level_rejected(self):
        with pytest.raises(DataError, match="level"):
            P.PriorAdapter(T.ParamStore(), "x", 3, 8, np.random.default_rng(0))
