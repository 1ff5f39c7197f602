"""Synthetic image-caption corpus, closed-vocabulary tokenizer, PPM I/O, patchify.

Images are procedural scenes: 1-3 coloured shapes placed in a 2x2 grid of
cells over a patterned background. Captions mention a random nonempty subset
of the objects and never the background, so some image content is always
undescribed.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = {
    "red": (230, 25, 25),
    "green": (25, 205, 25),
    "blue": (40, 75, 245),
    "yellow": (245, 230, 25),
    "cyan": (25, 230, 230),
    "magenta": (230, 25, 230),
    "orange": (255, 140, 0),
    "white": (245, 245, 245),
}
SIZES = ("small", "large")
BACKGROUNDS = ("plain", "striped", "checker", "gradient")
BACKGROUND_COLORS = {
    "charcoal": (50, 50, 50),
    "brown": (90, 75, 60),
    "navy": (35, 50, 90),
    "olive": (75, 90, 75),
}
CLASSES = ("background",) + SHAPES  # per-patch ground-truth class ids

CAPTION_PREFIXES = (
    "a photo of",
    "a picture of",
    "an image of",
    "a drawing of",
    "a rendering of",
    "there is",
    "this shows",
)
PROMPT_TEMPLATES = tuple(f"{p} a {{label}}" for p in CAPTION_PREFIXES)
BACKGROUND_PROMPTS = ("the background", "a plain background", "a striped background",
                      "a checker background", "a gradient background")

PAD, SOS, EOS, UNK = "<pad>", "<sos>", "<eos>", "<unk>"
_WORDS = sorted(
    {w for p in CAPTION_PREFIXES for w in p.split()}
    | {"a", "and", "the", "background"}
    | set(SHAPES) | set(COLORS) | set(SIZES) | set(BACKGROUNDS)
)
VOCAB = (PAD, SOS, EOS, UNK) + tuple(_WORDS)
_IDS = {w: i for i, w in enumerate(VOCAB)}
PAD_ID, SOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

IMAGE_SIZE = 32
CELL = 16  # objects sit in a 2x2 grid of 16-pixel cells
CELLS = [(r, c) for r in range(IMAGE_SIZE // CELL) for c in range(IMAGE_SIZE // CELL)]
PATCH = 8
MAX_OBJECTS = 3
LABEL_MIN_PIXELS = 8  # an object claims a patch when it covers at least this many pixels


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: tuple
    size: str
    offset: tuple = (0, 0)


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple
    background: str
    background_color: str


@dataclass(frozen=True)
class CaptionRecord:
    text: str
    mentioned: tuple  # indices into SceneSpec.objects
    image_id: str
    template_id: int


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray
    eos_position: int


# ---------------------------------------------------------------- scenes


def sample_scene(rng, n_objects=None):
    k = int(rng.integers(1, MAX_OBJECTS + 1)) if n_objects is None else n_objects
    if not 1 <= k <= MAX_OBJECTS:
        raise ValueError(f"scenes hold 1..{MAX_OBJECTS} objects, got {k}")
    cells = rng.permutation(len(CELLS))[:k]
    objects = []
    for ci in sorted(cells.tolist()):
        objects.append(SceneObject(
            shape=SHAPES[rng.integers(len(SHAPES))],
            color=list(COLORS)[rng.integers(len(COLORS))],
            cell=CELLS[ci],
            size=SIZES[rng.integers(len(SIZES))],
            offset=(int(rng.integers(-2, 3)), int(rng.integers(-2, 3))),
        ))
    return SceneSpec(
        objects=tuple(objects),
        background=BACKGROUNDS[rng.integers(len(BACKGROUNDS))],
        background_color=list(BACKGROUND_COLORS)[rng.integers(len(BACKGROUND_COLORS))],
    )


def validate_scene(scene: SceneSpec) -> None:
    if not 1 <= len(scene.objects) <= MAX_OBJECTS:
        raise ValueError(f"scene must hold 1-{MAX_OBJECTS} objects")
    cells = [o.cell for o in scene.objects]
    if len(set(cells)) != len(cells):
        raise ValueError("two objects share a grid cell")
    for o in scene.objects:
        if o.shape not in SHAPES or o.color not in COLORS or o.size not in SIZES or o.cell not in CELLS:
            raise ValueError(f"object outside the closed vocabulary: {o}")
    if scene.background not in BACKGROUNDS or scene.background_color not in BACKGROUND_COLORS:
        raise ValueError("background outside the closed vocabulary")


def _shape_mask(obj: SceneObject):
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE] + 0.5
    cy = obj.cell[0] * CELL + CELL / 2 + obj.offset[0]
    cx = obj.cell[1] * CELL + CELL / 2 + obj.offset[1]
    r = 7.0 if obj.size == "large" else 4.5
    dy, dx = yy - cy, xx - cx
    if obj.shape == "circle":
        return dy * dy + dx * dx <= r * r
    if obj.shape == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= 0.85 * r
    if obj.shape == "triangle":
        return (dy >= -r) & (dy <= 0.8 * r) & (np.abs(dx) <= (dy + r) / 1.8)
    arm = r / 3.0
    return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))


def render_scene(scene: SceneSpec):
    """Return (uint8 HxWx3 image, per-object boolean pixel masks)."""
    base = np.array(BACKGROUND_COLORS[scene.background_color], dtype=np.float64)
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    if scene.background == "plain":
        shade = np.ones((IMAGE_SIZE, IMAGE_SIZE))
    elif scene.background == "striped":
        shade = np.where((yy // 4) % 2 == 0, 1.0, 0.6)
    elif scene.background == "checker":
        shade = np.where(((yy // 4) + (xx // 4)) % 2 == 0, 1.0, 0.6)
    else:
        shade = 1.0 - 0.6 * xx / (IMAGE_SIZE - 1)
    img = np.rint(shade[..., None] * base).astype(np.uint8)
    masks = []
    for obj in scene.objects:
        m = _shape_mask(obj)
        img[m] = COLORS[obj.color]
        masks.append(m)
    return img, masks


def patch_labels(scene: SceneSpec, masks, patch=PATCH):
    """Class id per patch (row-major grid): the covering object's shape, else background."""
    g = IMAGE_SIZE // patch
    labels = np.zeros((g, g), dtype=np.int64)
    owner = np.full((g, g), -1, dtype=np.int64)
    for r in range(g):
        for c in range(g):
            best, best_count = -1, 0
            for k, m in enumerate(masks):
                # later objects are painted over earlier ones
                visible = m.copy()
                for later in masks[k + 1:]:
                    visible &= ~later
                count = int(visible[r * patch:(r + 1) * patch, c * patch:(c + 1) * patch].sum())
                if count > best_count:
                    best, best_count = k, count
            if best >= 0 and best_count >= LABEL_MIN_PIXELS:
                labels[r, c] = CLASSES.index(scene.objects[best].shape)
                owner[r, c] = best
    return labels, owner


def object_phrase(obj: SceneObject) -> str:
    return f"a {obj.size} {obj.color} {obj.shape}"


def caption_text(template_id: int, scene: SceneSpec, mentioned) -> str:
    phrases = " and ".join(object_phrase(scene.objects[i]) for i in mentioned)
    return f"{CAPTION_PREFIXES[template_id]} {phrases}"


def make_record(seed: int, index: int, n_objects=None):
    """Deterministic (image, scene, caption, labels, owners) for one corpus index."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    scene = sample_scene(rng, n_objects)
    img, masks = render_scene(scene)
    labels, owner = patch_labels(scene, masks)
    k = len(scene.objects)
    n_mention = int(rng.integers(1, k + 1))
    mentioned = tuple(sorted(rng.permutation(k)[:n_mention].tolist()))
    template_id = int(rng.integers(len(CAPTION_PREFIXES)))
    image_id = f"{index:06d}"
    cap = CaptionRecord(caption_text(template_id, scene, mentioned), mentioned, image_id, template_id)
    return img, scene, cap, labels, owner


def validate_caption(scene: SceneSpec, cap: CaptionRecord) -> None:
    if not cap.mentioned:
        raise ValueError(f"{cap.image_id}: caption mentions nothing")
    for i in cap.mentioned:
        if not 0 <= i < len(scene.objects):
            raise ValueError(f"{cap.image_id}: mentions object {i} absent from the scene")
    if caption_text(cap.template_id, scene, cap.mentioned) != cap.text:
        raise ValueError(f"{cap.image_id}: caption text does not regenerate")


# ---------------------------------------------------------------- tokenizer


def tokenize(text: str, context_length: int = 32) -> TokenSequence:
    """Lower-cased word-level ids: sos, words, eos, then padding; truncation keeps eos."""
    if context_length < 2:
        raise ValueError("context_length must be >= 2")
    words = text.lower().split()[: context_length - 2]
    ids = np.full(context_length, PAD_ID, dtype=np.int64)
    ids[0] = SOS_ID
    ids[1:1 + len(words)] = [_IDS.get(w, UNK_ID) for w in words]
    eos = 1 + len(words)
    ids[eos] = EOS_ID
    return TokenSequence(ids, eos)


def tokenize_batch(texts, context_length=32):
    seqs = [tokenize(t, context_length) for t in texts]
    return np.stack([s.ids for s in seqs]), np.array([s.eos_position for s in seqs], dtype=np.int64)


def detokenize(ids) -> str:
    words = []
    for i in np.asarray(ids).tolist():
        if i == SOS_ID:
            continue
        if i == EOS_ID:
            break
        words.append(VOCAB[i])
    return " ".join(words)


def vocab_size() -> int:
    return len(VOCAB)


# ---------------------------------------------------------------- image geometry


def patchify(image, patch_size):
    """(..., H, W, C) -> (..., N, P*P*C), patches in row-major order."""
    image = np.asarray(image)
    *lead, H, W, C = image.shape
    P = patch_size
    if H % P or W % P:
        raise ValueError(f"image {H}x{W} is not divisible by patch size {P}")
    gh, gw = H // P, W // P
    x = image.reshape(*lead, gh, P, gw, P, C)
    nl = len(lead)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return x.reshape(*lead, gh * gw, P * P * C)


def unpatchify(patches, patch_size, height, width, channels=3):
    patches = np.asarray(patches)
    *lead, N, _ = patches.shape
    P = patch_size
    gh, gw = height // P, width // P
    if gh * gw != N:
        raise ValueError(f"{N} patches do not tile a {height}x{width} image at patch size {P}")
    x = patches.reshape(*lead, gh, gw, P, P, channels)
    nl = len(lead)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return x.reshape(*lead, height, width, channels)


def to_float(img_u8):
    return np.asarray(img_u8, dtype=np.float64) / 255.0


# ---------------------------------------------------------------- files


def write_ppm(path, img_u8):
    img = np.ascontiguousarray(img_u8, dtype=np.uint8)
    h, w, c = img.shape
    if c != 3:
        raise ValueError("PPM needs 3 channels")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path):
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    data = np.frombuffer(raw[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    return data.reshape(h, w, 3).copy()


def write_vocabulary(path):
    Path(path).write_text("\n".join(VOCAB) + "\n", encoding="utf-8")


def read_vocabulary(path):
    return tuple(Path(path).read_text(encoding="utf-8").splitlines())


def _scene_json(scene: SceneSpec):
    d = asdict(scene)
    d["objects"] = [dict(o, cell=list(o["cell"]), offset=list(o["offset"])) for o in d["objects"]]
    return d


def scene_from_json(d) -> SceneSpec:
    objs = tuple(SceneObject(o["shape"], o["color"], tuple(o["cell"]), o["size"], tuple(o["offset"]))
                 for o in d["objects"])
    return SceneSpec(objs, d["background"], d["background_color"])


def generate_corpus(out_dir, n, seed, force=False, n_objects=None):
    """Write ``n`` image-caption pairs to ``out_dir``; a pure function of (n, seed, n_objects).

    Layout: ``corpus.json`` (metadata), ``manifest.jsonl`` (one record per
    pair), ``vocab.txt``, ``images/NNNNNN.ppm``. Returns the manifest path.
    """
    if n < 1:
        raise ValueError("corpus needs n >= 1")
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} is not empty; pass force=True to overwrite")
        for sub in ("images",):
            d = out / sub
            if d.exists():
                for f in d.iterdir():
                    f.unlink()
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(n):
        img, scene, cap, labels, owner = make_record(seed, i, n_objects)
        rel = f"images/{cap.image_id}.ppm"
        write_ppm(out / rel, img)
        rec = {
            "id": cap.image_id,
            "image": rel,
            "caption": cap.text,
            "labels": labels.tolist(),
            "owners": owner.tolist(),
            "mentioned": list(cap.mentioned),
            "template": cap.template_id,
            "scene": _scene_json(scene),
        }
        lines.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_vocabulary(out / "vocab.txt")
    meta = {"n": n, "seed": seed, "n_objects": n_objects, "classes": list(CLASSES),
            "image_size": IMAGE_SIZE, "patch_size": PATCH, "vocab": "vocab.txt"}
    (out / "corpus.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return out / "manifest.jsonl"


@dataclass
class Corpus:
    """In-memory view of a corpus: float images, captions, labels and scenes."""

    images: np.ndarray  # (n, H, W, 3) float in [0, 1]
    captions: list
    labels: np.ndarray  # (n, g, g) class ids
    owners: np.ndarray  # (n, g, g) object index or -1
    mentioned: list
    scenes: list
    ids: list

    def __len__(self):
        return len(self.captions)

    def subset(self, idx):
        idx = list(idx)
        return Corpus(self.images[idx], [self.captions[i] for i in idx], self.labels[idx],
                      self.owners[idx], [self.mentioned[i] for i in idx],
                      [self.scenes[i] for i in idx], [self.ids[i] for i in idx])


def build_corpus(n, seed, n_objects=None) -> Corpus:
    """Same records as ``generate_corpus`` without touching the filesystem."""
    imgs, caps, labels, owners, mentioned, scenes, ids = [], [], [], [], [], [], []
    for i in range(n):
        img, scene, cap, lab, own = make_record(seed, i, n_objects)
        imgs.append(to_float(img))
        caps.append(cap.text)
        labels.append(lab)
        owners.append(own)
        mentioned.append(cap.mentioned)
        scenes.append(scene)
        ids.append(cap.image_id)
    return Corpus(np.stack(imgs), caps, np.stack(labels), np.stack(owners), mentioned, scenes, ids)


def load_corpus(path) -> Corpus:
    root = Path(path)
    manifest = root / "manifest.jsonl" if root.is_dir() else root
    root = manifest.parent
    imgs, caps, labels, owners, mentioned, scenes, ids = [], [], [], [], [], [], []
    with open(manifest, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            imgs.append(to_float(read_ppm(root / rec["image"])))
            caps.append(rec["caption"])
            labels.append(np.asarray(rec["labels"], dtype=np.int64))
            owners.append(np.asarray(rec.get("owners", -np.ones_like(rec["labels"])), dtype=np.int64))
            mentioned.append(tuple(rec.get("mentioned", ())))
            scenes.append(scene_from_json(rec["scene"]) if "scene" in rec else None)
            ids.append(rec["id"])
    if not caps:
        raise ValueError(f"{manifest}: empty corpus")
    return Corpus(np.stack(imgs), caps, np.stack(labels), np.stack(owners), mentioned, scenes, ids)


def file_digests(out_dir):
    """SHA-256 of every file under ``out_dir``, keyed by relative path."""
    root = Path(out_dir)
    out = {}
    for dirpath, _, files in sorted(os.walk(root)):
        for f in sorted(files):
            p = Path(dirpath) / f
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out
