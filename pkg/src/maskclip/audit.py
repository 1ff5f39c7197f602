"""Finite-difference audit suite: every primitive, then the full combined loss on a tiny model."""

from __future__ import annotations

import numpy as np

from . import corpus
from .config import TrainConfig
from .numerics import Tensor, finite_difference_check, ops
from .objectives import MaskCLIP

PRIMITIVE_TOL = 1e-6
PRIMITIVE_EPS = 1e-5
COMBINED_TOL = 1e-4


# Input classes are chosen so that every analytic gradient coordinate stays
# bounded away from zero: relative error is meaningless for a coordinate whose
# true derivative is at the level of the central-difference rounding noise.


def _leaf(rng, shape, low=None, positive=False):
    x = rng.standard_normal(shape)
    if positive:
        x = 0.5 + np.abs(x)
    elif low is not None:
        # keep magnitudes away from zero for abs/log/sqrt-style kinks and poles
        x = np.sign(x) * (low + np.abs(x))
    return Tensor(x, requires_grad=True)


def _weights(rng, shape):
    # positive cotangent: sums of positive terms cannot cancel
    return Tensor(0.5 + np.abs(rng.standard_normal(shape)))


def _dot(y, w):
    return (y * w).sum()


def primitive_cases(seed=0):
    """name -> (f, params) with a scalar-valued ``f`` built around one primitive."""
    rng = np.random.default_rng(seed)
    cases = {}
    expected = {}

    def add_case(name, build):
        cases[name] = build()

    def unary(fn, shape=(3, 4), low=None, positive=False):
        def build():
            a = _leaf(rng, shape, low, positive)
            w = _weights(rng, fn(Tensor(a.data)).shape)
            return (lambda p: _dot(fn(p[0]), w)), [a]
        return build

    def binary(fn, sa=(3, 4), sb=(4,)):
        def build():
            a, b = _leaf(rng, sa, positive=True), _leaf(rng, sb, positive=True)
            w = _weights(rng, np.broadcast_shapes(sa, sb))
            return (lambda p: _dot(fn(p[0], p[1]), w)), [a, b]
        return build

    add_case("add", binary(ops.add))
    add_case("sub", binary(ops.sub, (2, 1, 4), (3, 1)))
    add_case("mul", binary(ops.mul))
    add_case("div", binary(ops.div))
    add_case("neg", unary(ops.neg))
    add_case("exp", unary(ops.exp))
    add_case("log", unary(ops.log, positive=True))
    add_case("abs", unary(ops.abs, low=0.1))
    add_case("square", unary(ops.square, low=0.1))
    add_case("sqrt", unary(ops.sqrt, positive=True))
    def build_gelu():
        a = _leaf(rng, (3, 4))
        # gelu' vanishes near x = -0.7518; step inputs off that neighbourhood
        near = np.abs(a.data + 0.7518) < 0.2
        a.data[near] += 0.4
        w = _weights(rng, (3, 4))
        return (lambda p: _dot(ops.gelu(p[0]), w)), [a]
    add_case("gelu", build_gelu)

    def build_matmul():
        a, b = _leaf(rng, (2, 3, 4), positive=True), _leaf(rng, (4, 5), positive=True)
        c = _leaf(rng, (2, 5, 3), positive=True)
        w1, w2 = _weights(rng, (2, 3, 5)), _weights(rng, (2, 3, 3))

        def f(p):
            y = ops.matmul(p[0], p[1])
            return _dot(y, w1) + _dot(ops.matmul(y, p[2]), w2)
        return f, [a, b, c]
    add_case("matmul", build_matmul)

    def build_reduce(fn):
        def build():
            a = _leaf(rng, (3, 4, 5))
            w1, w2 = _weights(rng, (3, 5)), _weights(rng, (1, 4, 1))
            return (lambda p: _dot(fn(p[0], axis=1), w1) + _dot(fn(p[0], axis=(0, 2), keepdims=True), w2)), [a]
        return build
    add_case("sum", build_reduce(ops.sum))
    add_case("mean", build_reduce(ops.mean))

    add_case("reshape", unary(lambda a: ops.reshape(a, (4, 3)), shape=(3, 4)))
    add_case("transpose", unary(lambda a: ops.transpose(a, (2, 0, 1)), shape=(2, 3, 4)))
    add_case("swapaxes", unary(lambda a: ops.swapaxes(a, 0, -1), shape=(2, 3, 4)))
    add_case("broadcast_to", unary(lambda a: ops.broadcast_to(a, (2, 3, 4)), shape=(3, 1)))

    def build_concat():
        a, b = _leaf(rng, (2, 3)), _leaf(rng, (2, 5))
        w = _weights(rng, (2, 8))
        return (lambda p: _dot(ops.concat([p[0], p[1]], axis=1), w)), [a, b]
    add_case("concat", build_concat)

    def build_getitem():
        a = _leaf(rng, (4, 5))
        idx = (np.array([0, 2, 2, 3]), np.array([1, 1, 1, 4]))
        w1, w2 = _weights(rng, (4,)), _weights(rng, (2, 3))
        return (lambda p: _dot(ops.getitem(p[0], idx), w1) + _dot(ops.getitem(p[0], (slice(1, 3), slice(0, 3))), w2)), [a]
    add_case("getitem", build_getitem)

    def build_gather():
        a = _leaf(rng, (3, 6))
        idx = np.array([[5, 0], [0, 2]])
        w = _weights(rng, (3, 2, 2))
        return (lambda p: _dot(ops.gather(p[0], idx, axis=1), w)), [a]
    add_case("gather", build_gather)

    def build_scatter():
        v = _leaf(rng, (3, 2))
        idx = (np.array([0, 2, 0]),)
        w = _weights(rng, (4, 2))
        return (lambda p: _dot(ops.scatter(p[0], idx, (4, 2)), w)), [v]
    add_case("scatter", build_scatter)

    def build_embedding():
        t = _leaf(rng, (5, 3))
        ids = np.array([[0, 4, 4], [2, 0, 1]])
        w = _weights(rng, (2, 3, 3))
        return (lambda p: _dot(ops.embedding(p[0], ids), w)), [t]
    add_case("embedding", build_embedding)

    def one_hot_rows(shape, axis=-1):
        # a softmax gradient is y * (w - <y, w>), which a smooth cotangent can
        # cancel; a single spike per row cannot
        w = np.zeros(shape)
        moved = np.moveaxis(w, axis, -1)
        flat = moved.reshape(-1, moved.shape[-1])
        flat[np.arange(len(flat)), rng.integers(0, moved.shape[-1], len(flat))] = 3.0
        return Tensor(np.moveaxis(flat.reshape(moved.shape), -1, axis))

    def build_softmax():
        a = _leaf(rng, (2, 3, 4))
        keep = np.tril(np.ones((3, 4), dtype=bool))
        w1 = one_hot_rows((2, 3, 4), axis=1)
        w2 = Tensor(np.zeros((2, 3, 4)))
        # spike on a kept column in every row of the masked variant
        w2.data[:, np.arange(3), rng.integers(0, np.arange(3) + 1)] = 3.0
        return (lambda p: _dot(ops.softmax(p[0], axis=1), w1) + _dot(ops.softmax(p[0], keep=keep), w2)), [a]
    add_case("softmax", build_softmax)

    def build_log_softmax():
        a = _leaf(rng, (3, 5))
        w1, w2 = one_hot_rows((3, 5), axis=0), one_hot_rows((3, 5))
        return (lambda p: _dot(ops.log_softmax(p[0], axis=0), w1) + _dot(ops.log_softmax(p[0]), w2)), [a]
    add_case("log_softmax", build_log_softmax)

    def build_layer_norm():
        a, g, b = _leaf(rng, (2, 3, 6)), _leaf(rng, (6,)), _leaf(rng, (6,))
        w = _weights(rng, (2, 3, 6))
        return (lambda p: _dot(ops.layer_norm(p[0], p[1], p[2]), w)), [a, g, b]
    add_case("layer_norm", build_layer_norm)

    add_case("l2_normalize", unary(ops.l2_normalize, shape=(3, 5)))

    def build_smooth_l1():
        a, b = _leaf(rng, (4, 5)), _leaf(rng, (4, 5))
        # spread differences over both branches while staying clear of |d| = beta
        d = rng.choice([-1, 1], size=(4, 5)) * rng.uniform(0.1, 3.5, size=(4, 5))
        d[np.abs(np.abs(d) - 2.0) < 0.1] += 0.3
        a.data[...] = b.data + d
        w = _weights(rng, (4, 5))
        return (lambda p: _dot(ops.smooth_l1(p[0], p[1], 2.0), w)), [a, b]
    add_case("smooth_l1", build_smooth_l1)

    def build_stop_gradient():
        a = _leaf(rng, (3, 4))
        w = _weights(rng, (3, 4))
        # d/dx sum(w * x * sg(x)) = w * x: the stopped factor contributes nothing
        expected[0] = lambda: w.data * a.data
        return (lambda p: _dot(p[0] * ops.stop_gradient(p[0]), w)), [a]
    add_case("stop_gradient", build_stop_gradient)
    cases["stop_gradient"] += (expected.pop(0),)
    return cases


def check_primitives(seed=0) -> dict:
    """name -> max relative error of the tape gradient.

    Finite differences see through ``stop_gradient`` by design, so that one
    primitive is compared with its closed-form gradient instead.
    """
    out = {}
    for name, case in primitive_cases(seed).items():
        f, params = case[0], case[1]
        if len(case) == 3:
            for p in params:
                p.zero_grad()
            f(params).backward()
            want = case[2]()
            got = params[0].grad
            out[name] = float(np.max(np.abs(got - want) / np.maximum(np.maximum(np.abs(got), np.abs(want)), 1e-12)))
            continue
        out[name] = finite_difference_check(f, params, eps=PRIMITIVE_EPS)
    return out


# ---------------------------------------------------------------- combined loss


def tiny_config(objective="maskclip", seed=0) -> TrainConfig:
    d = TrainConfig().to_dict()
    d.update(objective=objective, seed=seed, precision="float64")
    d["model"]["vision"].update(image_size=32, patch_size=16, depth=1, width=8, heads=2, mlp_ratio=2)
    d["model"]["text"].update(depth=1, width=8, heads=2, mlp_ratio=2, context_length=16)
    d["model"]["embed_dim"] = 4
    # a large init temperature keeps logits O(1) so relative errors stay meaningful
    d["model"]["init_temperature"] = 0.5
    return TrainConfig.from_dict(d)


def _perturb_teacher(model, seed):
    # start the teacher away from the student so the distillation term is nontrivial
    rng = np.random.default_rng(seed + 17)
    for _, p in model.teacher.named_parameters():
        p.data += 0.05 * rng.standard_normal(p.shape)


def combined_loss_case(objective="maskclip", seed=0, batch=2):
    """(f, named trainable params, model) for the full loss on a 2-pair batch with a fixed mask."""
    cfg = tiny_config(objective, seed)
    model = MaskCLIP(cfg)
    if model.teacher is not None:
        _perturb_teacher(model, seed)
    rng = np.random.default_rng(seed)
    for name, p in model.trainable():
        # larger weights than the init so every block contributes visibly to the loss
        if p.ndim >= 2:
            p.data += 0.3 * rng.standard_normal(p.shape)
    data = corpus.build_corpus(batch, 100 + seed)
    images = data.images.astype(np.float64)
    ids, eos = corpus.tokenize_batch(data.captions, cfg.model.text.context_length)
    named = model.trainable()

    def f(_params):
        return model.losses(images, ids, eos, np.random.default_rng(1234))["total"]

    return f, named, model


def check_combined_loss(objective="maskclip", seed=0, max_coords=12, eps=1e-6) -> dict:
    """Component -> max relative error over sampled coordinates of each parameter."""
    f, named, _ = combined_loss_case(objective, seed)
    params = [p for _, p in named]
    _, per = finite_difference_check(f, params, eps=eps, max_coords=max_coords, seed=seed, report=True)
    out = {}
    for k, (name, _) in enumerate(named):
        comp = name.split(".", 1)[0]
        out[comp] = max(out.get(comp, 0.0), per[k])
    return out


def gradcheck_suite(seed=0) -> dict:
    """Runs both layers of the audit; ``passed`` is the conjunction of every tolerance."""
    prim = check_primitives(seed)
    combined = {obj: check_combined_loss(obj, seed) for obj in ("clip", "clip_pixel", "maskclip")}
    prim_ok = max(prim.values()) < PRIMITIVE_TOL
    comb_ok = all(max(v.values()) < COMBINED_TOL for v in combined.values())
    return {
        "primitives": prim,
        "primitive_tolerance": PRIMITIVE_TOL,
        "combined": combined,
        "combined_tolerance": COMBINED_TOL,
        "passed": bool(prim_ok and comb_ok),
    }
