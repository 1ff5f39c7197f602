import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from maskclip import corpus
from maskclip.numerics import Tensor, finite_difference_check
from maskclip.objectives import (
    MaskCLIP,
    UnitNormError,
    clamp_temperature,
    contrastive_loss,
    normalized_pixel_targets,
    pixel_reconstruction_loss,
)
from maskclip.trainer import Trainer

from conftest import small_config


def unit(x):
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def logt(sigma):
    return Tensor(np.array(math.log(sigma)), requires_grad=True)


def oracle_infonce(a, b, sigma):
    """Plain-Python cross-entropy over rows of a @ b.T / sigma."""
    B = len(a)
    total = 0.0
    for i in range(B):
        s = [sum(a[i][k] * b[j][k] for k in range(len(a[i]))) / sigma for j in range(B)]
        top = max(s)
        total += -(s[i] - top - math.log(sum(math.exp(v - top) for v in s)))
    return total / B


def test_single_pair_loss_is_zero():
    e = Tensor(unit([[0.3, -0.2, 0.9]]))
    li, lt = contrastive_loss(e, e, logt(0.07))
    assert float(li.data) == 0.0 and float(lt.data) == 0.0


def test_orthonormal_pair_closed_form():
    e = Tensor(np.eye(2))
    li, lt = contrastive_loss(e, e, logt(1.0))
    want = math.log(1 + math.exp(-1))
    assert abs(float(li.data) - want) <= 1e-9 and abs(float(lt.data) - want) <= 1e-9
    assert abs(want - 0.31326) < 1e-5


@given(seed=st.integers(0, 10_000), B=st.integers(1, 6), sigma=st.floats(0.05, 3.0))
def test_matches_loop_oracle_and_is_nonnegative(seed, B, sigma):
    rng = np.random.default_rng(seed)
    a, b = unit(rng.standard_normal((B, 4))), unit(rng.standard_normal((B, 4)))
    li, lt = contrastive_loss(Tensor(a), Tensor(b), logt(sigma))
    assert float(li.data) == pytest.approx(oracle_infonce(a.tolist(), b.tolist(), sigma), rel=1e-10, abs=1e-12)
    assert float(lt.data) == pytest.approx(oracle_infonce(b.tolist(), a.tolist(), sigma), rel=1e-10, abs=1e-12)
    assert float(li.data) >= 0 and float(lt.data) >= 0


@given(seed=st.integers(0, 10_000), B=st.integers(2, 6))
def test_joint_permutation_invariance(seed, B):
    rng = np.random.default_rng(seed)
    a, b = unit(rng.standard_normal((B, 5))), unit(rng.standard_normal((B, 5)))
    perm = rng.permutation(B)
    x = contrastive_loss(Tensor(a), Tensor(b), logt(0.5))
    y = contrastive_loss(Tensor(a[perm]), Tensor(b[perm]), logt(0.5))
    for u, v in zip(x, y):
        assert float(u.data) == pytest.approx(float(v.data), rel=1e-13)


def test_equal_similarities_give_log_batch():
    B = 5
    e = Tensor(np.tile(unit([1.0, 2.0]), (B, 1)))
    li, lt = contrastive_loss(e, e, logt(0.1))
    assert float(li.data) == pytest.approx(math.log(B), rel=1e-12)
    assert float(lt.data) == pytest.approx(math.log(B), rel=1e-12)


def test_temperature_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = Tensor(unit(rng.standard_normal((4, 3)))), Tensor(unit(rng.standard_normal((4, 3))))

    def f(p):
        li, lt = contrastive_loss(a, b, p[0])
        return li + lt

    assert finite_difference_check(f, [logt(0.3)], eps=1e-6) < 1e-7


def test_contrastive_errors():
    with pytest.raises(UnitNormError):
        contrastive_loss(Tensor(np.ones((2, 2))), Tensor(np.eye(2)), logt(1.0))
    with pytest.raises(ValueError):
        contrastive_loss(Tensor(np.zeros((0, 2))), Tensor(np.zeros((0, 2))), logt(1.0))
    with pytest.raises(ValueError):
        contrastive_loss(Tensor(np.eye(2)), Tensor(np.eye(3)[:2]), logt(1.0))


def test_temperature_clamp():
    t = logt(1e-4)
    clamp_temperature(t)
    assert math.exp(float(t.data)) == pytest.approx(0.01)
    t = logt(1e4)
    clamp_temperature(t)
    assert math.exp(float(t.data)) == pytest.approx(100.0)


# ---------------------------------------------------------------- pixel arm


def pixel_loop_oracle(pred, patches, masked):
    total, count = 0.0, 0
    for b in range(len(masked)):
        for k in masked[b]:
            row = patches[b][k - 1]
            mu = sum(row) / len(row)
            var = sum((v - mu) ** 2 for v in row) / len(row)
            for j, v in enumerate(row):
                d = pred[b][k - 1][j] - (v - mu) / math.sqrt(var + 1e-6)
                total += d * d
                count += 1
    return total / count


@given(seed=st.integers(0, 10_000))
def test_pixel_loss_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    patches = rng.random((2, 5, 12))
    pred = rng.standard_normal((2, 5, 12))
    masked = np.stack([np.sort(rng.permutation(np.arange(1, 6))[:3]) for _ in range(2)])
    got = float(pixel_reconstruction_loss(Tensor(pred), patches, masked).data)
    assert abs(got - pixel_loop_oracle(pred.tolist(), patches.tolist(), masked.tolist())) < 1e-10


def test_pixel_loss_zero_on_exact_targets_and_finite_on_flat_patch():
    rng = np.random.default_rng(1)
    patches = rng.random((1, 4, 12))
    patches[0, 2] = 0.5
    target = normalized_pixel_targets(patches)
    assert float(pixel_reconstruction_loss(Tensor(target), patches, np.array([[1, 3]])).data) == 0.0
    assert np.isfinite(target).all() and (target[0, 2] == 0).all()
    with pytest.raises(ValueError):
        pixel_reconstruction_loss(Tensor(np.zeros((1, 4, 6))), patches, np.array([[1]]))


# ---------------------------------------------------------------- combined loss


def batch(n=4, seed=0):
    c = corpus.build_corpus(n, seed)
    ids, eos = corpus.tokenize_batch(c.captions)
    return c.images, ids, eos


def test_lambda_zero_is_bitwise_clip_sum():
    m = MaskCLIP(small_config(lambda_dist=0.0))
    out = m.losses(*batch(), np.random.default_rng(0))
    assert float(out["L_Dist"].data) > 0
    assert out["total"].data.tobytes() == (out["L_I"] + out["L_T"]).data.tobytes()


def test_zero_mask_ratio_gives_zero_distillation():
    for objective, key in (("maskclip", "L_Dist"), ("clip_pixel", "L_Pix")):
        m = MaskCLIP(small_config(objective, mask_ratio=0.0))
        assert float(m.losses(*batch(), np.random.default_rng(0))[key].data) == 0.0


def test_combined_gradient_reaches_every_trainable_component():
    m = MaskCLIP(small_config())
    m.losses(*batch(), np.random.default_rng(0))["total"].backward()
    for name, p in m.trainable():
        assert p.grad is not None and np.abs(p.grad).sum() > 0, name
    assert float(np.abs(m.log_temperature.grad).sum()) > 0


def test_arms_allocate_only_their_components():
    clip = MaskCLIP(small_config("clip"))
    assert clip.teacher is None and clip.decoder is None and clip.mask_token is None
    assert not any(k.startswith(("teacher", "decoder", "mask_token", "pixel_head"))
                   for k, _ in clip.named_parameters())
    pix = MaskCLIP(small_config("clip_pixel"))
    assert pix.teacher is None and pix.pixel_head is not None
    mc = MaskCLIP(small_config("maskclip"))
    assert mc.teacher is not None and mc.pixel_head is None


def test_arms_share_initialisation_and_data_order():
    data = corpus.build_corpus(10, 0)
    trainers = {o: Trainer(small_config(o, batch_size=4), data) for o in ("clip", "clip_pixel", "maskclip")}
    ref = trainers["clip"].model.state_dict()
    for tr in trainers.values():
        sd = tr.model.state_dict()
        for k in ref:
            assert sd[k].tobytes() == ref[k].tobytes(), k
        for e in range(3):
            assert [b.tolist() for b in tr.batches(e)] == [b.tolist() for b in trainers["clip"].batches(e)]


def test_normalised_embeddings_are_unit():
    m = MaskCLIP(small_config())
    e = m.embed_images(batch()[0]).data
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-6)
    e = m.embed_texts(["a red circle"]).data
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-6)
