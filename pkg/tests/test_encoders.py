import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from maskclip import corpus
from maskclip.config import TextConfig, VisionConfig
from maskclip.encoders import (
    GeometryError,
    ProjectionHead,
    TextEncoder,
    VisionEncoder,
    dense_image_embeddings,
    global_image_embedding,
    global_text_embedding,
)
from maskclip.nn import init_rng
from maskclip.numerics import Tensor


@pytest.fixture(scope="module")
def vision():
    return VisionEncoder(VisionConfig(), init_rng(0, "visual"))


@pytest.fixture(scope="module")
def text():
    return TextEncoder(TextConfig(), init_rng(0, "text"))


def images(n, seed=0):
    return corpus.build_corpus(n, seed).images


def test_desk_image_gives_seventeen_tokens(vision):
    feats = vision.encode_images(images(2))
    assert feats.shape == (2, 17, 64)
    assert np.isfinite(feats.data).all()


def test_geometry_mismatch_raises(vision):
    with pytest.raises(GeometryError):
        vision.encode_images(np.zeros((1, 24, 24, 3)))
    with pytest.raises(GeometryError):
        vision(np.zeros((1, 15, 192)))
    with pytest.raises(IndexError):
        vision(np.zeros((1, 2, 192)), positions=np.array([[0, 1]]))


def test_identical_images_identical_features(vision):
    img = images(1)
    a = vision.encode_images(np.concatenate([img, img]))
    assert a.data[0].tobytes() == a.data[1].tobytes()


def test_patch_permutation_equivariance(vision):
    patches = corpus.patchify(images(1), 8)
    N = patches.shape[1]
    pos = np.arange(1, N + 1)[None]
    ref = vision(patches, pos).data
    perm = np.arange(N)
    perm[[2, 9]] = perm[[9, 2]]
    out = vision(patches[:, perm], pos[:, perm]).data
    np.testing.assert_allclose(out[:, 1:], ref[:, 1:][:, perm], rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(out[:, 0], ref[:, 0], rtol=1e-12, atol=1e-12)


def test_explicit_positions_match_default(vision):
    patches = corpus.patchify(images(2), 8)
    pos = np.tile(np.arange(1, 17), (2, 1))
    np.testing.assert_allclose(vision(patches).data, vision(patches, pos).data, rtol=1e-13, atol=1e-13)


def test_observer_sees_token_count(vision):
    seen = []
    enc = VisionEncoder(VisionConfig(depth=1), init_rng(1, "visual"))
    enc.observe(seen.append)
    enc.encode_images(images(1))
    enc(np.zeros((1, 4, 192)), positions=np.array([[1, 5, 9, 13]]))
    assert seen == [17, 5]


# ---------------------------------------------------------------- text


def test_text_features_and_eos_index(text):
    ids, eos = corpus.tokenize_batch(["a red circle", "there is a large blue square and a small cross"])
    feats, f_eos = text(ids, eos)
    assert feats.shape == (2, 32, 64)
    assert np.array_equal(f_eos.data, feats.data[np.arange(2), eos])


def test_tokens_after_eos_do_not_reach_eos_feature(text):
    ids, eos = corpus.tokenize_batch(["a red circle"])
    edited = ids.copy()
    edited[0, eos[0] + 1:] = corpus.tokenize("square " * 40).ids[1:32 - eos[0]]
    a = text(ids, eos)[0].data
    b = text(edited, eos)[0].data
    assert np.array_equal(a[:, :eos[0] + 1], b[:, :eos[0] + 1])
    assert not np.array_equal(a, b)


@given(pos=st.integers(1, 30), seed=st.integers(0, 1000))
def test_causal_prefix_independence(text, pos, seed):
    rng = np.random.default_rng(seed)
    ids = rng.integers(4, corpus.vocab_size(), (1, 32))
    ids[0, 31] = corpus.EOS_ID
    edited = ids.copy()
    edited[0, pos] = 4 + (ids[0, pos] - 3) % (corpus.vocab_size() - 4)
    a = text(ids, np.array([31]))[0].data
    b = text(edited, np.array([31]))[0].data
    assert np.array_equal(a[:, :pos], b[:, :pos])


def test_missing_eos_raises(text):
    ids, eos = corpus.tokenize_batch(["a red circle"])
    with pytest.raises(ValueError):
        text(ids, eos + 1)


def test_identical_captions_identical_embeddings(text):
    head = ProjectionHead(64, 32, init_rng(0, "text_head"))
    _, f = text.encode_texts(["a red circle", "a red circle"])
    e = global_text_embedding(f, head).data
    assert e[0].tobytes() == e[1].tobytes()
    np.testing.assert_allclose(np.linalg.norm(e, axis=-1), 1.0, atol=1e-6)


# ---------------------------------------------------------------- global embeddings


def test_constant_patch_tokens_give_normalised_projection():
    head = ProjectionHead(6, 4, init_rng(0, "h"))
    v = np.random.default_rng(0).standard_normal(6)
    feats = np.tile(v, (1, 5, 1))
    feats[:, 0] = 99.0  # cls must not leak into the mean
    e = global_image_embedding(Tensor(feats), head).data[0]
    want = v @ head.proj.weight.data
    np.testing.assert_allclose(e, want / np.linalg.norm(want), rtol=1e-12)


@given(seed=st.integers(0, 10_000), B=st.integers(1, 4), scale=st.floats(0.01, 100))
def test_image_embedding_unit_norm_and_scale_invariant(seed, B, scale):
    rng = np.random.default_rng(seed)
    head = ProjectionHead(8, 5, init_rng(seed, "h"))
    feats = rng.standard_normal((B, 7, 8))
    e = global_image_embedding(Tensor(feats), head).data
    np.testing.assert_allclose(np.linalg.norm(e, axis=-1), 1.0, atol=1e-6)
    e2 = global_image_embedding(Tensor(feats * 2.0), head).data
    np.testing.assert_allclose(e2, e, atol=1e-12)
    e3 = global_image_embedding(Tensor(feats * scale), head).data
    np.testing.assert_allclose(e3, e, atol=1e-9)


def test_dense_embeddings_one_per_patch():
    head = ProjectionHead(8, 5, init_rng(0, "h"))
    d = dense_image_embeddings(Tensor(np.random.default_rng(0).standard_normal((2, 17, 8))), head).data
    assert d.shape == (2, 16, 5)
    np.testing.assert_allclose(np.linalg.norm(d, axis=-1), 1.0, atol=1e-12)


def test_initialisation_statistics():
    enc = VisionEncoder(VisionConfig(), init_rng(3, "visual"))
    w = enc.patch_embed.weight.data
    assert abs(w.std() - 0.02 * 0.88) < 0.002  # two-sigma truncation shrinks std by ~0.88
    assert np.abs(w).max() <= 0.04
    ln = enc.blocks[0].ln1
    assert (ln.weight.data == 1).all() and (ln.bias.data == 0).all()


def test_width_must_divide_heads():
    from maskclip.config import ConfigError
    from conftest import small_config

    with pytest.raises(ConfigError):
        small_config(model={"vision": {"width": 18, "heads": 4}})
