import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from protoxct.data import (
    LOW_INTENSITY,
    MANIFEST_HEADER,
    PATCH,
    AugmentationPolicy,
    DatasetManifest,
    Patch,
    SyntheticTruth,
    Volume,
    VolumeSpec,
    augment,
    augment_batch,
    auto_label_low_intensity,
    generate_synthetic_volume,
    inspect_patches,
    matrix_median,
    normalize_patch,
    normalize_tiles,
    patch_means,
    read_manifest,
    read_patch_store,
    read_volume,
    rebalance,
    rotate_tile,
    sample_patches,
    split,
    uniform_sample_patches,
    write_manifest,
    write_patch_store,
    write_volume,
)
from protoxct.maps import tile
from protoxct.numerics import derive_rng, make_rng
from protoxct.pipeline import Stage, synthesize

SMALL = dict(depth=2, height=256, width=320)


def records(n_neg, n_pos, start=0):
    out = []
    for i in range(n_neg + n_pos):
        lab = 0 if i < n_neg else 1
        t = np.full((PATCH, PATCH), 0.2 + 0.6 * ((i * 37) % 101) / 101)
        out.append(Patch(start + i, 0, 0, 0, 0, t, lab, "matrix" if lab == 0 else "pores"))
    return out


@pytest.fixture(scope="module")
def default_volume():
    return generate_synthetic_volume(VolumeSpec(), make_rng(7))


class TestVolume:
    def test_requires_uint16(self):
        with pytest.raises(TypeError):
            Volume(np.zeros((1, 64, 64), dtype=np.float32))

    def test_requires_in_plane_64(self):
        with pytest.raises(ValueError):
            Volume(np.zeros((1, 63, 64), dtype=np.uint16))

    def test_from_float_clips_and_windows(self):
        v = Volume.from_float(np.array([[[-1.0, 0.5, 2.0] * 22] * 64]))
        assert v.data.min() == 0 and v.data.max() == 65535
        s = v.slice(0)
        assert s.min() == 0.0 and s.max() == 1.0


class TestGenerator:
    def test_dims_too_small(self):
        with pytest.raises(ValueError, match="too small"):
            VolumeSpec(height=32)

    def test_negative_density(self):
        with pytest.raises(ValueError):
            VolumeSpec(pore_density=-1)

    def test_zero_density_has_empty_mask_and_no_defect_labels(self):
        vol, truth = generate_synthetic_volume(VolumeSpec(pore_density=0, line_density=0, **SMALL), make_rng(1))
        assert not truth.defect.any()
        decided, _ = inspect_patches(sample_patches(vol, 200, make_rng(2)), truth)
        assert decided and all(p.label == 0 for p in decided)

    def test_pure_air_is_dark_everywhere(self):
        vol, truth = generate_synthetic_volume(VolumeSpec(part_scale=0.0, **SMALL), make_rng(3))
        assert not truth.matrix.any()
        g = tile(SMALL["height"], SMALL["width"], 16)
        for s in range(SMALL["depth"]):
            means = patch_means(vol, np.full(len(g), s), g.origins[:, 0], g.origins[:, 1])
            assert means.max() < LOW_INTENSITY

    def test_default_seed7_defect_fraction_by_exhaustive_tiling(self, default_volume):
        vol, truth = default_volume
        g = tile(vol.shape[1], vol.shape[2], PATCH)
        any_defect, labelled_defect = [], []
        for s in range(vol.shape[0]):
            for r, c in g.origins:
                n = int(truth.defect[s, r:r + PATCH, c:c + PATCH].sum())
                any_defect.append(n > 0)
                labelled_defect.append(n >= 100)
        assert 0.01 <= np.mean(any_defect) <= 0.10
        assert 0.01 <= np.mean(labelled_defect) <= 0.10

    def test_all_six_types_occur(self, default_volume):
        vol, truth = default_volume
        decided, _ = inspect_patches(
            sample_patches(vol, 4000, make_rng(5)), truth, min_defect_px=100, pure_fraction=0.002, min_sliver=0.25, min_component=50, max_defect_air=0.25
        )
        assert {p.semantic_type for p in decided} == {"air", "matrix", "matrix+air", "pores", "lines", "pores+lines"}

    def test_deterministic(self):
        a, ta = generate_synthetic_volume(VolumeSpec(**SMALL), make_rng(9))
        b, tb = generate_synthetic_volume(VolumeSpec(**SMALL), make_rng(9))
        np.testing.assert_array_equal(a.data, b.data)
        np.testing.assert_array_equal(ta.pores, tb.pores)

    def test_defects_are_darker_than_matrix(self, default_volume):
        vol, truth = default_volume
        v = vol.data.astype(float) / 65535
        healthy = truth.matrix & ~truth.defect
        assert v[truth.pores].mean() < v[healthy].mean() - 0.15
        assert v[truth.lines & ~truth.pores].mean() < v[healthy].mean()


class TestSampling:
    def test_single_patch_in_bounds(self, default_volume):
        vol, _ = default_volume
        (p,) = sample_patches(vol, 1, make_rng(0))
        assert p.tile.shape == (PATCH, PATCH)
        assert 0 <= p.row <= vol.shape[1] - PATCH and 0 <= p.col <= vol.shape[2] - PATCH
        assert 0.0 <= p.tile.min() and p.tile.max() <= 1.0

    def test_n_must_be_positive(self, default_volume):
        with pytest.raises(ValueError):
            sample_patches(default_volume[0], 0, make_rng(0))

    def test_tile_matches_provenance(self, default_volume):
        vol, _ = default_volume
        for p in sample_patches(vol, 20, make_rng(4)):
            np.testing.assert_array_equal(p.tile, vol.slice(p.slice)[p.row:p.row + PATCH, p.col:p.col + PATCH])

    def test_uniform_volume_accepts_every_proposal(self):
        vol = Volume(np.full((2, 128, 160), 30000, dtype=np.uint16))
        n = 10
        got = sample_patches(vol, n, make_rng(11))
        # oracle: the first n uniform proposals, drawn in the sampler's order
        r = make_rng(11)
        m = max(4 * n, 64)
        s, rows, cols = r.integers(0, 2, m), r.integers(0, 128 - PATCH + 1, m), r.integers(0, 160 - PATCH + 1, m)
        assert [(p.slice, p.row, p.col) for p in got] == list(zip(s[:n].tolist(), rows[:n].tolist(), cols[:n].tolist()))

    def test_bias_toward_median_on_bimodal_volume(self):
        data = np.full((1, 256, 512), int(0.05 * 65535), dtype=np.uint16)
        data[:, :, 256:] = int(0.45 * 65535)
        vol = Volume(data)
        med = matrix_median(vol)

        def near(ps):
            return np.mean([abs(p.tile.mean() - med) < 0.05 for p in ps])

        biased = near(sample_patches(vol, 10000, make_rng(1)))
        unbiased = near(uniform_sample_patches(vol, 10000, make_rng(1)))
        assert biased > unbiased + 0.2

    def test_patch_means_match_direct(self, default_volume):
        vol, _ = default_volume
        ps = sample_patches(vol, 30, make_rng(8))
        got = patch_means(vol, [p.slice for p in ps], [p.row for p in ps], [p.col for p in ps])
        np.testing.assert_allclose(got, [p.tile.mean() for p in ps], rtol=0, atol=1e-12)


class TestAutoLabel:
    def test_all_zero_patch(self):
        auto, rest = auto_label_low_intensity([Patch(0, 0, 0, 0, 0, np.zeros((PATCH, PATCH)))])
        assert len(auto) == 1 and auto[0].label == 0 and not rest

    def test_boundary_is_strict(self):
        t = np.zeros((PATCH, PATCH))
        t[0, 0] = 30 / 255 * t.size  # a constant tile's float mean misses the boundary by an ulp
        p = Patch(0, 0, 0, 0, 0, t)
        assert LOW_INTENSITY == 30 / 255 and p.tile.mean() == LOW_INTENSITY
        auto, rest = auto_label_low_intensity([p])
        assert not auto and len(rest) == 1 and rest[0].label is None

    @given(st.lists(st.floats(0, 0.3), min_size=0, max_size=30))
    def test_partition_matches_means(self, means):
        ps = [Patch(i, 0, 0, 0, 0, np.full((4, 4), m)) for i, m in enumerate(means)]
        auto, rest = auto_label_low_intensity(ps)
        assert sorted(p.id for p in auto + rest) == list(range(len(means)))
        assert {p.id for p in auto} == {i for i, m in enumerate(means) if np.mean(np.full((4, 4), m)) < LOW_INTENSITY}

    def test_pipeline_keeps_every_low_intensity_patch(self):
        spec = VolumeSpec(depth=1, height=256, width=320, part_scale=0.5, pore_density=400.0)
        vols, truths, m = synthesize(3, spec, n_volumes=1, samples_per_volume=3000, ratio=1e6, fractions=(1.0, 0.0, 0.0))
        auto, _ = auto_label_low_intensity(sample_patches(vols[0], 3000, derive_rng(3, Stage.SAMPLE, 0)))
        assert auto
        kept = {p.id: p for p in m.patches}
        for p in auto:
            assert kept[p.id].label == 0
            air = 1.0 - truths[0].matrix[0, p.row:p.row + 64, p.col:p.col + 64].mean()
            assert kept[p.id].semantic_type == ("air" if air >= 1 - 0.002 else "matrix+air")


class TestInspect:
    def truth(self):
        shape = (1, 64, 256)
        matrix = np.ones(shape, bool)
        matrix[0, :, 192:] = False
        pores = np.zeros(shape, bool)
        lines = np.zeros(shape, bool)
        pores[0, 10:20, 10:20] = True  # 100 px in the first window
        lines[0, 5, 64:190] = True  # 64 px in the second window, 62 in the third
        pores[0, 40:46, 150:160] = True  # 60 px in the third window
        return SyntheticTruth(matrix, pores, lines)

    def patch(self, pid, col):
        return Patch(pid, 0, 0, 0, col, np.zeros((PATCH, PATCH)))

    def test_types_from_masks(self):
        ps = [self.patch(0, 0), self.patch(1, 64), self.patch(2, 128), self.patch(3, 192), self.patch(4, 70)]
        decided, unclear = inspect_patches(ps, self.truth(), min_defect_px=50, min_component=50)
        kinds = {p.id: (p.label, p.semantic_type) for p in decided}
        assert kinds[0] == (1, "pores")
        assert kinds[1] == (1, "lines")
        assert kinds[2] == (1, "pores+lines")
        assert kinds[3] == (0, "air")
        assert kinds[4] == (1, "lines")
        assert not unclear

    def test_small_components_are_inconclusive(self):
        decided, unclear = inspect_patches([self.patch(0, 128)], self.truth(), min_defect_px=50, min_component=61)
        assert not decided and len(unclear) == 1

    def test_below_pixel_threshold_is_inconclusive(self):
        decided, unclear = inspect_patches([self.patch(1, 64)], self.truth(), min_defect_px=100)
        assert not decided and [p.id for p in unclear] == [1]

    def test_slivers_are_inconclusive(self):
        p = self.patch(0, 160)  # 32 of 64 columns are air: a clean interface
        q = self.patch(1, 140)  # 12 of 64 columns are air: a sliver
        truth = SyntheticTruth(self.truth().matrix, np.zeros((1, 64, 256), bool), np.zeros((1, 64, 256), bool))
        decided, unclear = inspect_patches([p, q], truth, min_sliver=0.25)
        assert [x.semantic_type for x in decided] == ["matrix+air"] and [x.id for x in unclear] == [1]


class TestRebalance:
    def test_already_balanced_is_unchanged(self):
        m = DatasetManifest(records(20, 10))
        out = rebalance(m, 2.0, make_rng(0))
        assert out.ids == m.ids and out.rebalance_ratio == 2.0

    def test_raw_imbalance_reaches_target(self):
        m = DatasetManifest(records(3600, 100))
        out = rebalance(m, 2.0, make_rng(0))
        assert 1.8 <= out.ratio() <= 2.2
        assert out.rebalance_ratio == out.ratio()
        assert {p.id for p in m.patches if p.label == 1} <= set(out.ids)

    def test_deterministic(self):
        m = DatasetManifest(records(500, 40))
        assert rebalance(m, 2.0, make_rng(3)).ids == rebalance(m, 2.0, make_rng(3)).ids

    def test_empty_positive_class(self):
        with pytest.raises(ValueError, match="cannot rebalance empty positive class"):
            rebalance(DatasetManifest(records(10, 0)), 2.0, make_rng(0))

    def test_prefers_patches_far_from_median(self):
        neg = [Patch(i, 0, 0, 0, 0, np.full((4, 4), 0.5 if i < 500 else 0.9), 0) for i in range(1000)]
        pos = [Patch(1000 + i, 0, 0, 0, 0, np.full((4, 4), 0.5), 1) for i in range(50)]
        out = rebalance(DatasetManifest(neg + pos), 2.0, make_rng(0), median=0.5)
        kept_far = sum(1 for p in out.patches if p.label == 0 and p.id >= 500)
        assert kept_far == 100


class TestSplit:
    def test_stratified_counts_at_full_scale(self):
        m = split(DatasetManifest(records(2784, 1400)), (0.8, 0.1, 0.1), make_rng(0))
        for c, n in ((0, 2784), (1, 1400)):
            for name, f in zip(("train", "val", "test"), (0.8, 0.1, 0.1)):
                got = sum(1 for p in m.select(name) if p.label == c)
                assert abs(got - n * f) <= 1

    def test_ten_records(self):
        m = split(DatasetManifest(records(10, 0)), (0.8, 0.1, 0.1), make_rng(0))
        assert [len(m.select(s)) for s in ("train", "val", "test")] == [8, 1, 1]

    def test_same_seed_same_split(self):
        m = DatasetManifest(records(50, 25))
        assert split(m, rng=make_rng(4)).splits == split(m, rng=make_rng(4)).splits

    def test_fraction_sum_checked(self):
        with pytest.raises(ValueError):
            split(DatasetManifest(records(5, 5)), (0.8, 0.1, 0.2))

    @given(st.integers(0, 60), st.integers(0, 60), st.integers(0, 2**31))
    def test_partition(self, n0, n1, seed):
        m = split(DatasetManifest(records(n0, n1)), (0.8, 0.1, 0.1), make_rng(seed))
        parts = [set(p.id for p in m.select(s)) for s in ("train", "val", "test")]
        assert set.union(*parts) == set(m.ids)
        assert sum(len(p) for p in parts) == n0 + n1


class TestAugmentation:
    def tile(self):
        return make_rng(0).random((PATCH, PATCH))

    def test_policy_validation(self):
        with pytest.raises(ValueError):
            AugmentationPolicy(flip_p=1.5)
        with pytest.raises(ValueError):
            AugmentationPolicy(max_degrees=60)

    def test_double_flip_is_identity(self):
        pol = AugmentationPolicy(flip_p=1.0, rotate_p=0.0, normalize=False)
        p = Patch(0, 0, 0, 0, 0, self.tile())
        once = augment(p, pol, make_rng(0))
        np.testing.assert_array_equal(once.tile, p.tile[::-1, ::-1])
        np.testing.assert_array_equal(augment(once, pol, make_rng(0)).tile, p.tile)

    def test_zero_rotation_is_identity(self):
        t = self.tile()
        np.testing.assert_array_equal(rotate_tile(t, 0.0), t)

    def test_rotation_replicates_edges(self):
        t = np.ones((PATCH, PATCH))
        np.testing.assert_allclose(rotate_tile(t, 15.0), t, atol=1e-12)

    def test_normalized_output(self):
        out = augment(Patch(0, 0, 0, 0, 0, self.tile()), AugmentationPolicy(), make_rng(2)).tile
        assert abs(out.mean()) < 1e-6 and abs(out.std() - 1) < 1e-6

    def test_all_off_is_identity(self):
        pol = AugmentationPolicy(flip_p=0.0, rotate_p=0.0, normalize=False)
        t = self.tile()
        np.testing.assert_array_equal(augment(Patch(0, 0, 0, 0, 0, t), pol, make_rng(1)).tile, t)

    def test_batch_streams_depend_only_on_index(self):
        tiles = make_rng(0).random((4, PATCH, PATCH))
        full = augment_batch(tiles, AugmentationPolicy(), 5, [10, 11, 12, 13])
        part = augment_batch(tiles[2:], AugmentationPolicy(), 5, [12, 13])
        np.testing.assert_array_equal(full[2:], part)


class TestNormalize:
    def test_constant_tile(self):
        np.testing.assert_array_equal(normalize_patch(np.full((8, 8), 0.3)), np.zeros((8, 8)))

    @given(st.floats(0.1, 10), st.floats(-5, 5))
    def test_affine_invariance(self, a, b):
        t = make_rng(0).random((PATCH, PATCH))
        np.testing.assert_allclose(normalize_patch(a * t + b), normalize_patch(t), atol=1e-9)

    def test_moments(self):
        out = normalize_patch(make_rng(1).random((PATCH, PATCH)))
        assert abs(out.mean()) < 1e-12 and abs(out.std() - 1) < 1e-12

    def test_batch_matches_single(self):
        tiles = make_rng(2).random((3, PATCH, PATCH))
        tiles[1] = 0.7
        np.testing.assert_allclose(normalize_tiles(tiles), np.stack([normalize_patch(t) for t in tiles]), atol=1e-14)


class TestFormats:
    def test_manifest_round_trip(self, tmp_path):
        m = split(DatasetManifest(records(6, 3)), rng=make_rng(0))
        path = tmp_path / "manifest.csv"
        write_manifest(m, path)
        raw = path.read_bytes()
        assert raw.startswith(",".join(MANIFEST_HEADER).encode() + b"\n") and b"\r" not in raw
        back = read_manifest(path)
        assert back.ids == m.ids and back.splits == m.splits
        assert [p.semantic_type for p in back.patches] == [p.semantic_type for p in m.patches]
        np.testing.assert_array_equal(back.labels(), m.labels())

    def test_patch_store_round_trip(self, tmp_path):
        tiles = make_rng(0).random((3, PATCH, PATCH)).astype(np.float32)
        write_patch_store(tiles, tmp_path / "p.ppat")
        raw = (tmp_path / "p.ppat").read_bytes()
        assert raw[:4] == b"PPAT" and len(raw) == 16 + 3 * PATCH * PATCH * 4
        np.testing.assert_array_equal(read_patch_store(tmp_path / "p.ppat"), tiles)

    def test_patch_store_truncated(self, tmp_path):
        write_patch_store(np.zeros((2, PATCH, PATCH)), tmp_path / "p.ppat")
        (tmp_path / "p.ppat").write_bytes((tmp_path / "p.ppat").read_bytes()[:-4])
        with pytest.raises(ValueError, match="expected"):
            read_patch_store(tmp_path / "p.ppat")

    def test_patch_store_bad_magic(self, tmp_path):
        (tmp_path / "p.ppat").write_bytes(b"XXXX" + bytes(12))
        with pytest.raises(ValueError, match="magic"):
            read_patch_store(tmp_path / "p.ppat")

    def test_volume_round_trip(self, tmp_path):
        vol = Volume(make_rng(0).integers(0, 65536, (2, 64, 70)).astype(np.uint16), 3)
        write_volume(vol, tmp_path / "v.raw")
        assert (tmp_path / "v.raw.json").exists()
        back = read_volume(tmp_path / "v.raw", 3)
        np.testing.assert_array_equal(back.data, vol.data)
        assert back.volume_id == 3
