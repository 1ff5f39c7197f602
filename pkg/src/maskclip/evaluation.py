"""Zero-shot classification, dense zero-shot segmentation, retrieval, linear probing and heatmaps."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import corpus
from .encoders import dense_image_embeddings, global_image_embedding, global_text_embedding
from .numerics import no_grad

EVAL_BATCH = 64


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptSet:
    templates: tuple

    def __post_init__(self):
        if not self.templates:
            raise PromptError("prompt set is empty")
        for t in self.templates:
            if t.count("{label}") != 1:
                raise PromptError(f"template {t!r} must contain '{{label}}' exactly once")

    def unique(self) -> tuple:
        return tuple(dict.fromkeys(self.templates))

    def fill(self, label: str) -> list:
        return [t.replace("{label}", label) for t in self.unique()]


DEFAULT_PROMPTS = PromptSet(corpus.PROMPT_TEMPLATES)


@dataclass
class LabelBank:
    classes: tuple
    embeddings: np.ndarray  # (C, D), unit rows

    def __len__(self):
        return len(self.classes)


# ---------------------------------------------------------------- embedding helpers


def _chunks(n, size=EVAL_BATCH):
    for i in range(0, n, size):
        yield slice(i, min(n, i + size))


def image_features(model, images) -> np.ndarray:
    """Full visual token features (B, N+1, W) from the student encoder."""
    images = np.asarray(images, dtype=model.dtype)
    with no_grad():
        return np.concatenate([model.visual.encode_images(images[s]).data for s in _chunks(len(images))])


def embed_images(model, images) -> np.ndarray:
    images = np.asarray(images, dtype=model.dtype)
    out = []
    with no_grad():
        for s in _chunks(len(images)):
            feats = model.visual.encode_images(images[s])
            out.append(global_image_embedding(feats, model.image_head).data)
    return np.concatenate(out)


def embed_texts(model, texts) -> np.ndarray:
    texts = list(texts)
    out = []
    with no_grad():
        for s in _chunks(len(texts)):
            _, eos = model.text.encode_texts(texts[s])
            out.append(global_text_embedding(eos, model.text_head).data)
    return np.concatenate(out)


def dense_embeddings(model, images) -> np.ndarray:
    """Unit-norm projected patch tokens (B, N, D), patches in row-major order."""
    images = np.asarray(images, dtype=model.dtype)
    out = []
    with no_grad():
        for s in _chunks(len(images)):
            feats = model.visual.encode_images(images[s])
            out.append(dense_image_embeddings(feats, model.image_head).data)
    return np.concatenate(out)


def pooled_features(model, images) -> np.ndarray:
    """Mean of the patch tokens before projection; the linear-probe input."""
    return image_features(model, images)[:, 1:].mean(axis=1)


def _unit_rows(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


# ---------------------------------------------------------------- label banks and zero-shot


def build_label_embeddings(classes, prompts: PromptSet, model, class_prompts=None) -> LabelBank:
    """Average the unit text embeddings of every prompted string per class, then renormalise.

    ``class_prompts`` maps a class to explicit strings used instead of the
    templates (the background class is described by its own phrases).
    Duplicate templates count once.
    """
    classes = tuple(classes)
    if not classes:
        raise ValueError("label bank needs at least one class")
    class_prompts = class_prompts or {}
    rows = []
    for c in classes:
        texts = list(dict.fromkeys(class_prompts[c])) if c in class_prompts else prompts.fill(c)
        e = embed_texts(model, texts)
        rows.append(e.mean(axis=0))
    return LabelBank(classes, _unit_rows(np.stack(rows)))


def segmentation_bank(model, prompts: PromptSet = DEFAULT_PROMPTS) -> LabelBank:
    return build_label_embeddings(corpus.CLASSES, prompts, model,
                                  class_prompts={"background": corpus.BACKGROUND_PROMPTS})


def shape_bank(model, prompts: PromptSet = DEFAULT_PROMPTS) -> LabelBank:
    return build_label_embeddings(corpus.SHAPES, prompts, model)


def classify_embeddings(e_img, bank: LabelBank):
    """argmax cosine class per row; ties go to the lowest class index."""
    return np.argmax(np.asarray(e_img) @ bank.embeddings.T, axis=1)


def zero_shot_classify(model, images, bank: LabelBank, labels=None):
    """Returns (predictions, top-1 accuracy or None when ``labels`` is None)."""
    pred = classify_embeddings(embed_images(model, images), bank)
    acc = None
    if labels is not None:
        acc = float(np.mean(pred == np.asarray(labels)))
    return pred, acc


# ---------------------------------------------------------------- dense segmentation


def segment_embeddings(dense, bank: LabelBank) -> np.ndarray:
    """(B, N, D) unit patch embeddings -> (B, N) class ids by argmax cosine."""
    return np.argmax(np.asarray(dense) @ bank.embeddings.T, axis=-1)


def iou_scores(pred, truth, n_classes):
    """Per-class IoU accumulated over the whole set; classes absent from both sides get NaN."""
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {truth.shape} differ")
    ious = np.full(n_classes, np.nan)
    for c in range(n_classes):
        p, t = pred == c, truth == c
        union = int(np.sum(p | t))
        if union:
            ious[c] = np.sum(p & t) / union
    return ious


def mean_iou(ious) -> float:
    ious = np.asarray(ious, dtype=np.float64)
    if np.all(np.isnan(ious)):
        return float("nan")
    return float(np.nanmean(ious))


def dense_zero_shot_segment(model, images, bank: LabelBank, labels=None):
    """Per-patch class maps (B, g, g); with ground-truth ``labels`` also per-class IoU and mIoU.

    A class that is neither predicted nor present anywhere in the set has no
    defined IoU and is left out of the mean.
    """
    images = np.asarray(images)
    g = model.cfg.model.vision.grid
    pred = segment_embeddings(dense_embeddings(model, images), bank).reshape(len(images), g, g)
    if labels is None:
        return pred, None, None
    ious = iou_scores(pred, labels, len(bank))
    return pred, ious, mean_iou(ious)


# ---------------------------------------------------------------- retrieval


def tie_break_ranks(sim) -> np.ndarray:
    """0-based rank of the true (diagonal) item per query row.

    rank = #(score > true) + #(score == true with a lower index).
    """
    sim = np.asarray(sim)
    n = sim.shape[0]
    true = sim[np.arange(n), np.arange(n)][:, None]
    lower = np.arange(n)[None, :] < np.arange(n)[:, None]
    return np.sum(sim > true, axis=1) + np.sum((sim == true) & lower, axis=1)


def recall_at(ranks, ks=(1, 5, 10)) -> dict:
    ranks = np.asarray(ranks)
    return {f"R@{k}": float(np.mean(ranks < k)) for k in ks}


def retrieval_from_embeddings(e_img, e_txt, ks=(1, 5, 10)) -> dict:
    e_img, e_txt = np.asarray(e_img), np.asarray(e_txt)
    if len(e_img) != len(e_txt):
        raise ValueError(f"{len(e_img)} images but {len(e_txt)} captions")
    if len(e_img) == 0:
        raise ValueError("retrieval needs at least one pair")
    sim = e_img @ e_txt.T
    return {"image_to_text": recall_at(tie_break_ranks(sim), ks),
            "text_to_image": recall_at(tie_break_ranks(sim.T), ks)}


def retrieval_eval(model, images, captions, ks=(1, 5, 10)) -> dict:
    if len(images) != len(captions):
        raise ValueError(f"{len(images)} images but {len(captions)} captions")
    return retrieval_from_embeddings(embed_images(model, images), embed_texts(model, captions), ks)


# ---------------------------------------------------------------- linear probe


@dataclass
class ProbeResult:
    train_accuracy: float
    test_accuracy: float
    iterations: int
    grad_norm: float
    weights: np.ndarray
    mean: np.ndarray
    std: np.ndarray


def _softmax_rows(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def linear_probe(train_x, train_y, test_x, test_y, l2=1e-4, tol=1e-6, max_iter=10_000) -> ProbeResult:
    """Multinomial logistic regression on standardised frozen features.

    Features are standardised with the training split's mean and std, a bias
    column is appended, and full-batch gradient descent with step 1/L (L the
    Lipschitz bound of the regularised objective) runs until the gradient norm
    drops below ``tol`` or ``max_iter`` iterations pass.
    """
    x = np.asarray(train_x, dtype=np.float64)
    y = np.asarray(train_y)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("linear probe needs at least two classes in the training split")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0] = 1.0

    def design(f):
        f = (np.asarray(f, dtype=np.float64) - mean) / std
        return np.hstack([f, np.ones((len(f), 1))])

    X = design(x)
    n, d = X.shape
    C = int(max(classes.max(), np.asarray(test_y).max()) + 1)
    Y = np.zeros((n, C))
    Y[np.arange(n), y] = 1.0
    lip = 0.5 * np.linalg.eigvalsh(X.T @ X / n).max() + l2
    step = 1.0 / lip
    W = np.zeros((d, C))
    reg = np.ones((d, 1))
    reg[-1] = 0.0  # bias is not regularised
    gnorm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        grad = X.T @ (_softmax_rows(X @ W) - Y) / n + l2 * reg * W
        gnorm = float(np.linalg.norm(grad))
        if gnorm < tol:
            break
        W -= step * grad
    train_acc = float(np.mean(np.argmax(X @ W, axis=1) == y))
    test_acc = float(np.mean(np.argmax(design(test_x) @ W, axis=1) == np.asarray(test_y)))
    return ProbeResult(train_acc, test_acc, it, gnorm, W, mean, std)


def probe_model(model, train_images, train_y, test_images, test_y, **kw) -> ProbeResult:
    return linear_probe(pooled_features(model, train_images), train_y,
                        pooled_features(model, test_images), test_y, **kw)


# ---------------------------------------------------------------- heatmaps and localization


def similarity_grid(model, image, text) -> np.ndarray:
    """(g, g) cosine similarity between each projected patch token and the caption embedding."""
    image = np.asarray(image)
    dense = dense_embeddings(model, image[None])[0]
    e_t = embed_texts(model, [text])[0]
    g = model.cfg.model.vision.grid
    return (dense @ e_t).reshape(g, g)


def grid_to_gray(grid, scale=1) -> np.ndarray:
    """Min-max normalise to 0..255 and upscale each cell to ``scale`` pixels (grayscale in RGB)."""
    grid = np.asarray(grid, dtype=np.float64)
    lo, hi = grid.min(), grid.max()
    norm = np.zeros_like(grid) if hi == lo else (grid - lo) / (hi - lo)
    gray = np.rint(norm * 255).astype(np.uint8)
    gray = np.repeat(np.repeat(gray, scale, axis=0), scale, axis=1)
    return np.repeat(gray[..., None], 3, axis=2)


def write_heatmap(prefix, grid, scale=8):
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    with open(prefix.with_suffix(".csv"), "w", encoding="utf-8") as fh:
        for row in np.asarray(grid):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    corpus.write_ppm(prefix.with_suffix(".ppm"), grid_to_gray(grid, scale))


def read_heatmap_csv(path) -> np.ndarray:
    rows = Path(path).read_text(encoding="utf-8").strip().splitlines()
    return np.array([[float(v) for v in r.split(",")] for r in rows])


def similarity_heatmap(model, image, text, out_prefix=None) -> np.ndarray:
    grid = similarity_grid(model, image, text)
    if out_prefix is not None:
        write_heatmap(out_prefix, grid, scale=model.cfg.model.vision.patch_size)
    return grid


def localization_probe(model, data: corpus.Corpus):
    """For every single-object caption, does the mean in-object similarity beat the outside mean?

    Returns (fraction of wins, per-item (inside_mean, outside_mean) array).
    Items whose object owns no patch, or owns every patch, are skipped.
    """
    idx, obj = [], []
    for i, m in enumerate(data.mentioned):
        if len(m) == 1:
            inside = data.owners[i] == m[0]
            if inside.any() and not inside.all():
                idx.append(i)
                obj.append(m[0])
    if not idx:
        raise ValueError("no usable single-object captions")
    dense = dense_embeddings(model, data.images[idx])
    e_t = embed_texts(model, [data.captions[i] for i in idx])
    sims = np.einsum("bnd,bd->bn", dense, e_t)
    pairs = []
    for k, i in enumerate(idx):
        inside = (data.owners[i] == obj[k]).ravel()
        pairs.append((sims[k][inside].mean(), sims[k][~inside].mean()))
    pairs = np.array(pairs)
    return float(np.mean(pairs[:, 0] > pairs[:, 1])), pairs


# ---------------------------------------------------------------- reports


def write_report(path, report: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, sort_keys=True, indent=2, default=_jsonable) + "\n", encoding="utf-8")


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return [None if (isinstance(v, float) and np.isnan(v)) else v for v in x.tolist()]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"cannot serialise {type(x).__name__}")
