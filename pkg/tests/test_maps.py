import json
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import random_model
from protoxct.cli import load_model_dir
from protoxct.data import VolumeSpec, generate_synthetic_volume, normalize_tiles
from protoxct.encoder import CompactEncoder, encode, fit_standardizer, load_embeddings
from protoxct.head import PrototypeModel, class_probabilities, forward
from protoxct.maps import (
    UNCOVERED,
    DefectMap,
    aggregate_majority,
    export_embeddings,
    extract_tiles,
    model_checksum,
    nearest_anchors,
    predict_map,
    read_defect_map,
    read_pgm,
    tile,
    write_defect_map,
    write_pgm,
)
from protoxct.numerics import make_rng


def brute_votes(grid, labels):
    cov = np.zeros((grid.height, grid.width), int)
    hit = np.zeros_like(cov)
    for (r, c), lab in zip(grid.origins, labels):
        cov[r:r + grid.side, c:c + grid.side] += 1
        hit[r:r + grid.side, c:c + grid.side] += lab
    out = np.where(cov == 0, UNCOVERED, np.where(2 * hit >= cov, 1, 0))
    return out, hit, cov


def labelled_map(h, w, stride, labels):
    g = tile(h, w, stride)
    labels = np.asarray(labels, dtype=np.int64)
    return DefectMap(g, labels.astype(float), labels, np.zeros(len(g), dtype=np.int64), 0.5)


class TestTiling:
    def test_full_slice_stride_64(self):
        g = tile(930, 1485, 64)
        assert len(g) == 322 and g.shape == (14, 23)

    def test_full_slice_stride_32(self):
        assert tile(930, 1485, 32).shape == (28, 45)

    @pytest.mark.parametrize("stride", [1, 7, 64, 100])
    def test_single_window(self, stride):
        assert tile(64, 64, stride).origins.tolist() == [[0, 0]]

    @given(st.integers(64, 300), st.integers(64, 300), st.integers(1, 80))
    def test_origins_are_the_fitting_multiples(self, h, w, s):
        g = tile(h, w, s)
        expect = [[r, c] for r in range(0, h, s) for c in range(0, w, s) if r + 64 <= h and c + 64 <= w]
        assert g.origins.tolist() == expect
        assert len(g) == ((h - 64) // s + 1) * ((w - 64) // s + 1)

    def test_errors(self):
        with pytest.raises(ValueError):
            tile(63, 100, 8)
        with pytest.raises(ValueError):
            tile(100, 100, 0)

    def test_extract_tiles(self):
        img = make_rng(0).random((130, 200))
        g = tile(130, 200, 40)
        t = extract_tiles(img, g)
        for (r, c), x in zip(g.origins, t):
            np.testing.assert_array_equal(x, img[r:r + 64, c:c + 64])
        with pytest.raises(ValueError):
            extract_tiles(img[:-1], g)


class TestMajority:
    def test_stride_64_is_identity_lift(self):
        labels = make_rng(1).integers(0, 2, 14 * 23)
        px = aggregate_majority(labelled_map(930, 1485, 64, labels))
        g = tile(930, 1485, 64)
        for (r, c), lab in zip(g.origins, labels):
            assert np.all(px.label[r:r + 64, c:c + 64] == lab)
        assert np.all(px.label[896:, :] == UNCOVERED) and np.all(px.label[:, 1472:] == UNCOVERED)

    def test_interior_stride_32_votes(self):
        px = aggregate_majority(labelled_map(256, 256, 32, np.zeros(49)))
        assert np.all(px.coverage[64:192, 64:192] == 4)
        assert px.coverage[0, 0] == 1 and px.coverage[32, 40] == 4 and px.coverage[40, 0] == 2

    def test_three_defect_votes_beat_one(self):
        g = tile(96, 96, 32)  # four windows all cover the centre block
        px = aggregate_majority(labelled_map(96, 96, 32, [1, 1, 1, 0]))
        assert px.defect_votes[48, 48] == 3 and px.label[48, 48] == 1
        assert len(g) == 4

    def test_tie_is_defect(self):
        px = aggregate_majority(labelled_map(96, 96, 32, [1, 0, 0, 1]))
        assert px.label[48, 48] == 1

    @pytest.mark.parametrize("stride", [16, 32, 48, 64])
    def test_matches_brute_force(self, stride):
        g = tile(256, 256, stride)
        labels = make_rng(stride).integers(0, 2, len(g))
        px = aggregate_majority(labelled_map(256, 256, stride, labels))
        lab, hit, cov = brute_votes(g, labels)
        np.testing.assert_array_equal(px.label, lab)
        np.testing.assert_array_equal(px.defect_votes, hit)
        np.testing.assert_array_equal(px.coverage, cov)


class TestNearestAnchors:
    def test_prototype_on_a_record_ranks_it_first(self):
        m = random_model(0)
        Z = make_rng(0).normal(size=(30, 8))
        Z[17] = m.prototypes[2]
        top = nearest_anchors(m, Z, np.arange(100, 130), 3)[2]
        assert top[0] == (117, 0.0)

    def test_full_ordering_matches_sort(self):
        m = random_model(1)
        Z = make_rng(1).integers(-2, 3, (25, 8)).astype(float)  # integer grid: many tied distances
        ids = make_rng(2).permutation(1000)[:25]
        res = nearest_anchors(m, Z, ids, 25)
        d = ((Z[:, None, :] - m.prototypes) ** 2).mean(-1)
        for k, rows in enumerate(res):
            assert [i for i, _ in rows] == [int(i) for _, i in sorted(zip(d[:, k], ids))]

    def test_k_clamped_with_warning(self):
        m = random_model(0)
        with pytest.warns(UserWarning, match="exceeds"):
            res = nearest_anchors(m, np.zeros((3, 8)), [1, 2, 3], 10)
        assert all(len(r) == 3 for r in res)

    def test_k_must_be_positive(self):
        with pytest.raises(ValueError):
            nearest_anchors(random_model(0), np.zeros((3, 8)), [1, 2, 3], 0)

    def test_separated_clusters(self):
        m = random_model(0)
        rng = make_rng(3)
        Z = np.concatenate([p + 0.05 * rng.normal(size=(10, 8)) for p in m.prototypes])
        owner = np.repeat(np.arange(6), 10)
        for k, rows in enumerate(nearest_anchors(m, Z, np.arange(60), 5)):
            assert {owner[i] for i, _ in rows} == {k}


class TestPredictMap:
    def model_for_blank_tiles(self, seed=0):
        enc = CompactEncoder(dim=8, channels=(2, 3), seed=seed)
        tiles = normalize_tiles(make_rng(seed).random((40, 64, 64)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            std = fit_standardizer(encode(enc, tiles).X)
        blank = (encode(enc, np.zeros((1, 64, 64))).X - std.mean) / std.scale
        P = np.concatenate([blank, 3.0 + make_rng(seed + 1).normal(size=(5, 8))])
        return PrototypeModel(P, 1.0, P.copy()), enc, std

    def test_pure_air_slice(self):
        vol, _ = generate_synthetic_volume(VolumeSpec(depth=1, height=256, width=320, part_scale=0.0), make_rng(0))
        model, enc, std = self.model_for_blank_tiles()
        flat = np.full(vol.slice(0).shape, vol.slice(0).mean())  # constant air normalizes to a blank tile
        dm = predict_map(flat, model, enc, std, threshold=0.5, stride=64)
        assert len(dm) == 20 and not dm.labels.any() and np.all(dm.proto_index == 0)

    def test_probability_is_marginal_attribution(self):
        model, enc, std = self.model_for_blank_tiles()
        img = make_rng(5).random((192, 192))
        dm = predict_map(img, model, enc, std, threshold=0.3, stride=32)
        Z = (encode(enc, normalize_tiles(extract_tiles(img, dm.grid))).X - std.mean) / std.scale
        _, l, c = forward(Z, model)
        pi = np.exp(l - l.max(1, keepdims=True))
        pi /= pi.sum(1, keepdims=True)
        np.testing.assert_allclose(dm.p_defect, pi[:, model.class_index == 1].sum(1), atol=1e-12)
        np.testing.assert_allclose(dm.p_defect, class_probabilities(c)[:, 1], atol=1e-12)
        np.testing.assert_array_equal(dm.labels, dm.p_defect >= 0.3)
        assert set(dm.proto_index.tolist()) <= set(range(6))

    def test_deterministic(self):
        model, enc, std = self.model_for_blank_tiles()
        img = make_rng(6).random((128, 160))
        a = predict_map(img, model, enc, std, 0.5, 32)
        b = predict_map(img, model, enc, std, 0.5, 32)
        np.testing.assert_array_equal(a.p_defect, b.p_defect)
        assert a.checksum == b.checksum == model_checksum(model)

    def test_threshold_range(self):
        model, enc, std = self.model_for_blank_tiles()
        with pytest.raises(ValueError):
            predict_map(np.zeros((64, 64)), model, enc, std, 1.5)

    @staticmethod
    def pore_cluster_slice():
        """Defect-free slice with four pore disks inserted in one window well inside the part."""
        spec = VolumeSpec(depth=1, pore_density=0.0, line_density=0.0)
        vol, truth = generate_synthetic_volume(spec, make_rng(11))
        img = vol.slice(0).copy()
        g = tile(*img.shape, 64)
        # a window at least two windows from any air
        inside = [i for i, (r, c) in enumerate(g.origins) if truth.matrix[0, max(r - 128, 0):r + 192, max(c - 128, 0):c + 192].all()]
        r0, c0 = g.origins[inside[len(inside) // 2]]
        yy, xx = np.mgrid[: img.shape[0], : img.shape[1]]
        mask = np.zeros(img.shape, bool)
        for dr, dc, rad in ((20, 20, 6), (24, 36, 5), (38, 26, 7), (42, 44, 5)):
            mask |= (yy - r0 - dr) ** 2 + (xx - c0 - dc) ** 2 <= rad**2
        img[mask] = spec.pore_level
        counts = np.array([mask[r:r + 64, c:c + 64].sum() for r, c in g.origins])
        in_part = np.array([truth.matrix[0, r:r + 64, c:c + 64].all() for r, c in g.origins])
        return img, counts >= 100, in_part

    @staticmethod
    def trained_map(run_dirs, img):
        model, enc, std = load_model_dir(run_dirs["model"])
        cal = json.loads((run_dirs["cal"] / "calibration.json").read_text())
        dm = predict_map(img, model, enc, std, cal["threshold"], stride=64, temperature=cal["temperature"])
        return dm.labels.astype(bool)

    @pytest.mark.slow
    def test_inserted_pore_cluster_whole_slice(self, default_run):
        img, truth_lab, _ = self.pore_cluster_slice()
        assert truth_lab.sum() == 1
        pred = self.trained_map(default_run[0], img)
        iou = (pred & truth_lab).sum() / (pred | truth_lab).sum()
        assert iou > 0.8, f"IoU {iou:.3f}; predicted {np.flatnonzero(pred).tolist()}"

    @pytest.mark.slow
    def test_inserted_pore_cluster_inside_part(self, default_run):
        img, truth_lab, in_part = self.pore_cluster_slice()
        pred = self.trained_map(default_run[0], img)[in_part]
        truth_lab = truth_lab[in_part]
        assert in_part.sum() > 100 and truth_lab.sum() == 1
        iou = (pred & truth_lab).sum() / (pred | truth_lab).sum()
        assert iou > 0.8, f"IoU {iou:.3f}; predicted {np.flatnonzero(pred).tolist()}"


class TestExport:
    def test_columns_and_error_flags(self, tmp_path):
        m = random_model(0)
        Z, _ = np.concatenate([m.prototypes] * 2), None
        y = np.array([0, 0, 0, 1, 1, 1] * 2)
        splits = ["train"] * 6 + ["test"] * 6
        p = np.where(y == 1, 0.2, 0.9)  # every record is misclassified
        export_embeddings(m, Z, np.arange(12), y, splits, tmp_path / "e.pemb", p_defect=p, threshold=0.5)
        rows = (tmp_path / "e.csv").read_text().splitlines()
        assert rows[0] == "id,label,split,proto_index,error"
        err = [r.split(",")[-1] for r in rows[1:]]
        assert err == [""] * 6 + ["FP"] * 3 + ["FN"] * 3
        assert [int(r.split(",")[3]) for r in rows[1:]] == list(range(6)) * 2
        back = load_embeddings(tmp_path / "e.pemb")
        np.testing.assert_allclose(back.X, Z, rtol=1e-6)
        assert len(back) == 12

    def test_threshold_required(self, tmp_path):
        with pytest.raises(ValueError):
            export_embeddings(random_model(0), np.zeros((2, 8)), [0, 1], [0, 1], ["test"] * 2, tmp_path / "e.pemb", p_defect=[0.1, 0.9])


class TestFiles:
    def test_defect_map_round_trip(self, tmp_path):
        g = tile(200, 260, 64)
        rng = make_rng(0)
        dm = DefectMap(g, rng.random(len(g)), rng.integers(0, 2, len(g)), rng.integers(0, 6, len(g)), 0.42, 0.8, "abc", ("a",) * 6)
        write_defect_map(dm, tmp_path / "m.csv")
        assert (tmp_path / "m.csv").read_text().startswith("row,col,p_defect,label,proto_index\n")
        back = read_defect_map(tmp_path / "m.csv")
        np.testing.assert_array_equal(back.p_defect, dm.p_defect)
        np.testing.assert_array_equal(back.labels, dm.labels)
        assert (back.threshold, back.temperature, back.checksum) == (0.42, 0.8, "abc")

    def test_pgm_round_trip(self, tmp_path):
        px = aggregate_majority(labelled_map(100, 150, 32, make_rng(2).integers(0, 2, 6)))
        write_pgm(px, tmp_path / "p.pgm")
        raw = (tmp_path / "p.pgm").read_bytes()
        assert raw.startswith(b"P5\n150 100\n255\n")
        img = read_pgm(tmp_path / "p.pgm")
        expect = np.where(px.label == UNCOVERED, 128, np.where(px.label == 1, 255, 0))
        np.testing.assert_array_equal(img, expect)
        assert set(np.unique(img)) <= {0, 128, 255}
