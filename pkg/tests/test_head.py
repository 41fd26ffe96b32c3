import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import batch_near, random_anchorset, random_model
from protoxct.head import (
    DEFAULT_CLASS_MAP,
    SEMANTIC_TYPES,
    Anchor,
    AnchorSet,
    PrototypeModel,
    SemanticType,
    centroid,
    class_logits,
    class_probabilities,
    defect_logit,
    distances,
    forward,
    init_prototypes,
    load_model,
    medoid,
    predict,
    prototype_distribution,
    prototype_logits,
    save_model,
)
from protoxct.loss import loss_anchor
from protoxct.numerics import make_rng


def brute_medoid(ids, E):
    c = [sum(col) / len(E) for col in zip(*E.tolist())]
    best = None
    for i, e in zip(ids, E.tolist()):
        key = (sum((a - b) ** 2 for a, b in zip(e, c)), i)
        best = key if best is None or key < best else best
    return best[1]


class TestSemanticTypes:
    def test_taxonomy(self):
        assert SEMANTIC_TYPES == ("air", "matrix", "matrix+air", "pores", "lines", "pores+lines")
        assert DEFAULT_CLASS_MAP == (0, 0, 0, 1, 1, 1)

    def test_tag_round_trip(self):
        for t in SemanticType:
            assert SemanticType.from_tag(t.tag) is t
        with pytest.raises(ValueError):
            SemanticType.from_tag("crack")


class TestCentroidMedoid:
    def test_centroid(self):
        np.testing.assert_array_equal(centroid([[0.0, 0.0], [2.0, 4.0]]), [1.0, 2.0])

    def test_empty(self):
        with pytest.raises(ValueError):
            centroid(np.zeros((0, 3)))
        with pytest.raises(ValueError):
            medoid([], np.zeros((0, 3)))

    def test_medoid_example(self):
        # centroid 2, squared distances 4, 1, 9
        mid, emb = medoid([10, 11, 12], np.array([[0.0], [1.0], [5.0]]))
        assert mid == 11 and emb.tolist() == [1.0]

    def test_tie_goes_to_lowest_id(self):
        assert medoid([7, 3], np.array([[-1.0], [1.0]]))[0] == 3

    @given(st.integers(0, 2**31), st.integers(1, 9))
    def test_matches_brute_force(self, seed, n):
        rng = make_rng(seed)
        E = rng.integers(-3, 4, (n, 2)).astype(float)  # small integers make ties common
        ids = rng.permutation(100)[:n].tolist()
        assert medoid(ids, E)[0] == brute_medoid(ids, E)

    def test_medoid_is_an_input_row(self):
        E = make_rng(0).normal(size=(6, 4))
        mid, emb = medoid(list(range(6)), E)
        np.testing.assert_array_equal(emb, E[mid])


class TestInit:
    def test_rows_are_type_medoids(self):
        A = random_anchorset(1)
        m = init_prototypes(A, tau0=0.5)
        assert m.tau == 0.5 and m.types == SEMANTIC_TYPES
        for k, t in enumerate(SEMANTIC_TYPES):
            assert m.medoid_ids[k] == brute_medoid(A.ids(t), A.embeddings(t))
            np.testing.assert_array_equal(m.prototypes[k], A.embeddings(t)[A.ids(t).index(m.medoid_ids[k])])
        np.testing.assert_array_equal(m.medoids, m.prototypes)

    def test_missing_type(self):
        A = random_anchorset(0)
        A.anchors["lines"] = []
        with pytest.raises(ValueError, match="incomplete anchor set"):
            init_prototypes(A)

    def test_validate(self):
        A = random_anchorset(0)
        A.validate(train_ids=range(36))
        with pytest.raises(ValueError, match="outside the training split"):
            A.validate(train_ids=range(30))
        A.anchors["pores"] = [Anchor(a.record_id, a.embedding, False) for a in A.anchors["pores"]]
        with pytest.raises(ValueError, match="edge anchors"):
            A.validate()

    def test_with_embeddings(self):
        A = random_anchorset(0, dim=3)
        B = A.with_embeddings({i: np.full(3, float(i)) for i in range(36)})
        np.testing.assert_array_equal(B.embeddings("matrix")[0], np.full(3, 6.0))
        assert B.anchors["pores"][0].edge

    def test_anchor_loss_at_init_matches_direct_computation(self):
        A = random_anchorset(2)
        m = init_prototypes(A)
        direct = np.mean([np.mean([np.sum((m.prototypes[k] - a.embedding) ** 2) / m.dim for a in A.anchors[t]]) for k, t in enumerate(SEMANTIC_TYPES)])
        np.testing.assert_allclose(loss_anchor(m, A)[0], direct, rtol=1e-12)


class TestForward:
    def test_distance_loop_oracle(self):
        rng = make_rng(0)
        Z, P = rng.normal(size=(4, 5)), rng.normal(size=(3, 5))
        expect = [[sum((Z[i, j] - P[k, j]) ** 2 for j in range(5)) / 5 for k in range(3)] for i in range(4)]
        np.testing.assert_allclose(distances(Z, P), expect, rtol=1e-13)
        np.testing.assert_allclose(distances(Z[0], P), expect[0], rtol=1e-13)

    def test_distance_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension mismatch"):
            distances(np.zeros(3), np.zeros((2, 4)))

    def test_logits(self):
        np.testing.assert_array_equal(prototype_logits([2.0, 0.5], 0.5), [-4.0, -1.0])
        with pytest.raises(ValueError):
            prototype_logits([1.0], 0.0)

    def test_class_logits_pool_by_log_sum_exp(self):
        l = np.array([-1.0, -2.0, -3.0, -0.5, -4.0, -6.0])
        got = class_logits(l, DEFAULT_CLASS_MAP)
        np.testing.assert_allclose(got, [np.log(np.exp(l[:3]).sum()), np.log(np.exp(l[3:]).sum())], rtol=1e-14)

    def test_class_logits_need_both_classes(self):
        with pytest.raises(ValueError, match="no prototypes"):
            class_logits(np.zeros(3), (0, 0, 0))

    def test_large_logits_stay_finite(self):
        l = np.array([-1e4, -1e4 - 1, -2e4, -1e4 - 2, -3e4, -5e4])
        p = class_probabilities(class_logits(l, DEFAULT_CLASS_MAP))
        assert np.all(np.isfinite(p)) and abs(p.sum() - 1) < 1e-15

    @given(st.integers(0, 2**31), st.floats(0.05, 5.0))
    def test_class_probability_is_summed_attribution(self, seed, tau):
        m = random_model(seed % 1000, tau=tau)
        Z, _ = batch_near(m, 7, seed)
        _, l, c = forward(Z, m)
        pi = prototype_distribution(l)
        np.testing.assert_allclose(class_probabilities(c)[:, 1], pi[:, m.class_index == 1].sum(1), atol=1e-12)

    def test_defect_logit(self):
        c = np.array([[0.0, np.log(3.0)]])
        np.testing.assert_allclose(defect_logit(c), [np.log(3.0)])


class TestPredict:
    def test_at_prototype(self):
        m = random_model(0)
        pred = predict(m.prototypes[3], m, threshold=0.5)
        assert pred.label == 1 and pred.attributed_type == "pores"
        assert abs(pred.attribution.sum() - 1) < 1e-12

    def test_threshold_is_inclusive(self):
        m = random_model(0)
        z = m.prototypes[0] + 0.3
        p = predict(z, m, 0.5).p_defect
        assert predict(z, m, p).label == 1
        assert predict(z, m, np.nextafter(p, 1.0)).label == 0

    def test_temperature_scales_logit(self):
        m = random_model(0)
        z = m.prototypes[4] + 0.1
        p1, p2 = predict(z, m, 0.5).p_defect, predict(z, m, 0.5, temperature=2.0).p_defect
        logit = np.log(p1 / (1 - p1))
        np.testing.assert_allclose(np.log(p2 / (1 - p2)), logit / 2, rtol=1e-9)

    def test_threshold_range(self):
        with pytest.raises(ValueError):
            predict(np.zeros(8), random_model(0), 1.5)


class TestModel:
    def test_validation(self):
        with pytest.raises(ValueError):
            PrototypeModel(np.zeros((6, 2)), 0.0, np.zeros((6, 2)))
        with pytest.raises(ValueError):
            PrototypeModel(np.zeros((6, 2)), 1.0, np.zeros((5, 2)))
        with pytest.raises(ValueError):
            PrototypeModel(np.zeros((5, 2)), 1.0, np.zeros((5, 2)))

    def test_copy_is_deep(self):
        m = random_model(0)
        c = m.copy()
        c.prototypes[0, 0] += 1
        assert c.prototypes[0, 0] != m.prototypes[0, 0]

    def test_file_round_trip(self, tmp_path):
        m = random_model(3, dim=5, tau=0.7)
        m.prototypes[0] += 0.25
        save_model(m, tmp_path / "m.pmdl")
        raw = (tmp_path / "m.pmdl").read_bytes()
        assert raw[:4] == b"PMDL"
        back = load_model(tmp_path / "m.pmdl")
        np.testing.assert_array_equal(back.prototypes, m.prototypes)
        np.testing.assert_array_equal(back.medoids, m.medoids)
        assert back.tau == m.tau and back.types == m.types and back.class_map == m.class_map
        assert tuple(back.medoid_ids) == tuple(m.medoid_ids) and back.anchor_ids == m.anchor_ids

    def test_file_errors(self, tmp_path):
        save_model(random_model(0), tmp_path / "m.pmdl")
        raw = (tmp_path / "m.pmdl").read_bytes()
        (tmp_path / "a.pmdl").write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(ValueError, match="bad magic"):
            load_model(tmp_path / "a.pmdl")
        (tmp_path / "b.pmdl").write_bytes(raw[:40])
        with pytest.raises(ValueError, match="truncated"):
            load_model(tmp_path / "b.pmdl")

    def test_custom_taxonomy(self):
        A = random_anchorset(0)
        five = AnchorSet({t: A.anchors[t] for t in ("air", "matrix", "pores", "lines", "pores+lines")},
                         ("air", "matrix", "pores", "lines", "pores+lines"), (0, 0, 1, 1, 1))
        m = init_prototypes(five)
        assert m.n_prototypes == 5 and m.class_index.tolist() == [0, 0, 1, 1, 1]
