import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from maskclip import corpus
from maskclip import evaluation as ev
from maskclip.objectives import MaskCLIP

from conftest import small_config


@pytest.fixture(scope="module")
def model():
    return MaskCLIP(small_config())


@pytest.fixture(scope="module")
def scenes():
    return corpus.build_corpus(24, 9)


# ---------------------------------------------------------------- prompts and banks


def test_prompt_set_validation():
    with pytest.raises(ev.PromptError):
        ev.PromptSet(())
    with pytest.raises(ev.PromptError):
        ev.PromptSet(("a photo",))
    with pytest.raises(ev.PromptError):
        ev.PromptSet(("{label} and {label}",))
    assert ev.PromptSet(("a {label}", "a {label}")).unique() == ("a {label}",)
    assert len(ev.DEFAULT_PROMPTS.templates) == 7


def test_single_template_bank_equals_prompt_embeddings(model):
    bank = ev.build_label_embeddings(("circle", "cross"), ev.PromptSet(("a photo of a {label}",)), model)
    want = ev.embed_texts(model, ["a photo of a circle", "a photo of a cross"])
    np.testing.assert_allclose(bank.embeddings, want, atol=1e-12)


def test_duplicate_templates_do_not_change_bank(model):
    t = ("a photo of a {label}", "there is a {label}")
    a = ev.build_label_embeddings(corpus.SHAPES, ev.PromptSet(t), model)
    b = ev.build_label_embeddings(corpus.SHAPES, ev.PromptSet(t + t[:1] + t), model)
    assert a.embeddings.tobytes() == b.embeddings.tobytes()


def test_bank_rows_unit_norm(model):
    bank = ev.segmentation_bank(model)
    assert bank.classes == corpus.CLASSES
    np.testing.assert_allclose(np.linalg.norm(bank.embeddings, axis=1), 1.0, atol=1e-6)
    with pytest.raises(ValueError):
        ev.build_label_embeddings((), ev.DEFAULT_PROMPTS, model)


def test_bank_average_then_renormalise(model):
    prompts = ev.PromptSet(("a photo of a {label}", "this shows a {label}"))
    bank = ev.build_label_embeddings(("square",), prompts, model)
    e = ev.embed_texts(model, ["a photo of a square", "this shows a square"]).mean(axis=0)
    np.testing.assert_allclose(bank.embeddings[0], e / np.linalg.norm(e), atol=1e-12)


# ---------------------------------------------------------------- zero-shot classification


def test_one_class_bank_accuracy_is_class_frequency(model, scenes):
    bank = ev.LabelBank(("circle",), np.array([[1.0] + [0.0] * 7]))
    labels = np.array([0, 1, 0, 2] * 6)
    pred, acc = ev.zero_shot_classify(model, scenes.images, bank, labels)
    assert (pred == 0).all() and acc == pytest.approx(0.5)


@given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 100), shift=st.floats(-5, 5))
def test_argmax_invariant_to_monotone_rescaling(seed, scale, shift):
    rng = np.random.default_rng(seed)
    e = rng.standard_normal((6, 4))
    bank = ev.LabelBank(tuple("abc"), rng.standard_normal((3, 4)))
    sims = e @ bank.embeddings.T
    assert np.array_equal(np.argmax(sims, axis=1), np.argmax(np.exp(scale * sims + shift), axis=1))
    assert np.array_equal(ev.classify_embeddings(e, bank), np.argmax(scale * sims + shift, axis=1))


def test_ties_go_to_lowest_class():
    bank = ev.LabelBank(("a", "b"), np.array([[1.0, 0.0], [1.0, 0.0]]))
    assert ev.classify_embeddings(np.array([[1.0, 0.0]]), bank).tolist() == [0]


# ---------------------------------------------------------------- segmentation


def test_perfect_segmentation_scores_one(scenes):
    ious = ev.iou_scores(scenes.labels, scenes.labels, len(corpus.CLASSES))
    present = np.unique(scenes.labels)
    assert np.all(ious[present] == 1.0)
    assert ev.mean_iou(ious) == 1.0


def test_one_class_bank_segments_everything(model, scenes):
    bank = ev.LabelBank(("background",), np.eye(8)[:1])
    pred, ious, miou = ev.dense_zero_shot_segment(model, scenes.images, bank, scenes.labels)
    assert pred.shape == (24, 4, 4) and (pred == 0).all()
    # IoU of the single class = background share of all patches
    assert ious[0] == pytest.approx(np.mean(scenes.labels == 0))


def test_absent_classes_are_left_out_of_the_mean():
    truth = np.array([0, 0, 1, 1])
    pred = np.array([0, 0, 1, 0])
    ious = ev.iou_scores(pred, truth, 4)
    assert ious[0] == pytest.approx(2 / 3) and ious[1] == 0.5
    assert np.isnan(ious[2]) and np.isnan(ious[3])
    assert ev.mean_iou(ious) == pytest.approx((2 / 3 + 0.5) / 2)
    assert np.isnan(ev.mean_iou([np.nan]))


@given(seed=st.integers(0, 10_000))
def test_miou_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    ious = ev.iou_scores(rng.integers(0, 5, 40), rng.integers(0, 5, 40), 5)
    assert 0.0 <= ev.mean_iou(ious) <= 1.0


# ---------------------------------------------------------------- retrieval


def tie_break_oracle(sim):
    """Rank by explicit sort on (-score, index)."""
    out = []
    for i, row in enumerate(sim):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        out.append(order.index(i))
    return np.array(out)


@pytest.mark.parametrize("n", [1, 3, 7, 12])
def test_identical_embeddings_tie_break(n):
    e = np.tile([[0.6, 0.8]], (n, 1))
    r = ev.retrieval_from_embeddings(e, e)
    for k in (1, 5, 10):
        assert r["image_to_text"][f"R@{k}"] == min(k, n) / n
        assert r["text_to_image"][f"R@{k}"] == min(k, n) / n


@given(seed=st.integers(0, 10_000), n=st.integers(1, 15), levels=st.integers(1, 4))
def test_ranks_match_sort_oracle(seed, n, levels):
    sim = np.random.default_rng(seed).integers(0, levels, (n, n)).astype(float)
    assert np.array_equal(ev.tie_break_ranks(sim), tie_break_oracle(sim.tolist()))
    r = ev.recall_at(ev.tie_break_ranks(sim))
    assert r["R@1"] <= r["R@5"] <= r["R@10"]


def test_aligned_pairs_give_perfect_recall():
    e = np.eye(6)
    r = ev.retrieval_from_embeddings(e, e)
    assert r["image_to_text"]["R@1"] == 1.0 and r["text_to_image"]["R@1"] == 1.0


def test_retrieval_length_mismatch(model, scenes):
    with pytest.raises(ValueError):
        ev.retrieval_eval(model, scenes.images[:3], scenes.captions[:2])


# ---------------------------------------------------------------- linear probe


def test_probe_separates_toy_classes():
    rng = np.random.default_rng(0)
    x = np.vstack([rng.normal(-2, 0.5, (40, 3)), rng.normal(2, 0.5, (40, 3))])
    y = np.array([0] * 40 + [1] * 40)
    res = ev.linear_probe(x, y, x, y)
    assert res.train_accuracy == 1.0 and res.test_accuracy == 1.0


def test_probe_permutation_control():
    rng = np.random.default_rng(1)
    C = 4
    centers = rng.normal(0, 0.6, (C, 32))
    y = rng.integers(0, C, 2000)
    x = centers[y] + rng.normal(0, 1, (2000, 32))
    real = ev.linear_probe(x[:1000], y[:1000], x[1000:], y[1000:])
    # average over a few shuffles; one shuffle alone wanders by a few points
    shuffled = [ev.linear_probe(x[:1000], rng.permutation(y[:1000]), x[1000:], y[1000:]).test_accuracy
                for _ in range(5)]
    assert real.test_accuracy > 0.9
    assert abs(np.mean(shuffled) - 1 / C) <= 0.05


def test_probe_is_deterministic_and_converges():
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal((60, 4)), rng.integers(0, 3, 60)
    a, b = ev.linear_probe(x, y, x, y), ev.linear_probe(x, y, x, y)
    assert a.weights.tobytes() == b.weights.tobytes()
    assert a.grad_norm < 1e-6 or a.iterations == 10_000


def test_probe_rejects_single_class():
    with pytest.raises(ValueError):
        ev.linear_probe(np.ones((5, 2)), np.zeros(5, dtype=int), np.ones((2, 2)), np.zeros(2, dtype=int))


def test_probe_features_are_pre_projection_means(model, scenes):
    f = ev.pooled_features(model, scenes.images[:3])
    assert f.shape == (3, 16)
    np.testing.assert_allclose(f, ev.image_features(model, scenes.images[:3])[:, 1:].mean(axis=1))


# ---------------------------------------------------------------- heatmaps and localization


def test_heatmap_grid_and_files(model, scenes, tmp_path):
    a = ev.similarity_heatmap(model, scenes.images[0], scenes.captions[0], tmp_path / "h")
    b = ev.similarity_heatmap(model, scenes.images[0], scenes.captions[0])
    assert a.shape == (4, 4) and a.tobytes() == b.tobytes()
    np.testing.assert_array_equal(ev.read_heatmap_csv(tmp_path / "h.csv"), a)
    img = corpus.read_ppm(tmp_path / "h.ppm")
    assert img.shape == (32, 32, 3) and img.min() == 0 and img.max() == 255
    dense = ev.dense_embeddings(model, scenes.images[:1])[0]
    np.testing.assert_allclose(a.ravel(), dense @ ev.embed_texts(model, [scenes.captions[0]])[0], atol=1e-12)


def test_flat_grid_renders_black():
    assert (ev.grid_to_gray(np.ones((2, 2)), 3) == 0).all()


def test_localization_probe_counts(model, scenes):
    frac, pairs = ev.localization_probe(model, scenes)
    usable = sum(1 for i, m in enumerate(scenes.mentioned)
                 if len(m) == 1 and (scenes.owners[i] == m[0]).any() and not (scenes.owners[i] == m[0]).all())
    assert len(pairs) == usable and 0.0 <= frac <= 1.0


def test_report_writer_handles_nan(tmp_path):
    ev.write_report(tmp_path / "r.json", {"ious": np.array([0.5, np.nan]), "n": np.int64(3)})
    import json
    assert json.loads((tmp_path / "r.json").read_text()) == {"ious": [0.5, None], "n": 3}
