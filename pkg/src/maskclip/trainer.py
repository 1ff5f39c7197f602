"""Pretraining loop: AdamW, schedules, EMA stepping, checkpoints and metric logs."""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from .config import TrainConfig
from .distillation import alpha_at, ema_update
from .numerics import NonFiniteError, finite_checks
from .objectives import MaskCLIP, clamp_temperature

CKPT_MAGIC = b"MCLP"
CKPT_VERSION = 1
_NO_DECAY_NAMES = {"log_temperature", "mask_token", "pos_embed", "cls_token"}


class CheckpointError(ValueError):
    pass


def stream_rng(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode()), *extra]))


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Sample order for one epoch; a pure function of (seed, epoch)."""
    return stream_rng(seed, "shuffle", epoch).permutation(n)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def decays(name: str, p) -> bool:
    """Weight decay applies to matrices only; norms, biases and the named special tensors are exempt."""
    if p.ndim < 2:
        return False
    return name.rsplit(".", 1)[-1] not in _NO_DECAY_NAMES


@dataclass
class Schedule:
    base: float
    final: float
    warmup_steps: int
    total_steps: int

    def lr_at(self, step: int) -> float:
        """Linear warmup 0 -> base over ``warmup_steps``, then cosine base -> final at ``total_steps``."""
        if step < 0 or step > self.total_steps:
            raise ValueError(f"step {step} outside 0..{self.total_steps}")
        w, t = self.warmup_steps, self.total_steps
        if step < w:
            return self.base * step / w
        if t <= w:
            return self.base
        frac = (step - w) / (t - w)
        return self.final + (self.base - self.final) * 0.5 * (1.0 + math.cos(math.pi * frac))


def make_schedule(cfg: TrainConfig, n_items: int) -> Schedule:
    spe = steps_per_epoch(n_items, cfg.batch_size)
    total = cfg.max_steps or cfg.epochs * spe
    warm = min(int(round(cfg.warmup_epochs * spe)), total)
    return Schedule(cfg.lr, cfg.final_lr, warm, total)


class AdamW:
    """Adaptive moments with decoupled, multiplicative weight decay.

    Update ``t`` (1-based) does ``p *= 1 - lr*wd`` for decaying parameters
    (``p *= 1 - wd`` when ``lr_scaled_decay`` is off), then
    ``p -= lr * m_hat / (sqrt(v_hat) + eps)``.
    """

    def __init__(self, named_params, beta1=0.9, beta2=0.98, eps=1e-8, weight_decay=0.0, lr_scaled_decay=True):
        self.params = list(named_params)
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.lr_scaled_decay = lr_scaled_decay
        self.m = {k: np.zeros_like(p.data) for k, p in self.params}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params}
        self.decay = {k: decays(k, p) for k, p in self.params}
        self.t = 0

    def step(self, lr: float, grad_scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params:
            g = p.grad if grad_scale == 1.0 else p.grad * grad_scale
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.decay[k] and self.weight_decay:
                p.data *= 1.0 - (lr * self.weight_decay if self.lr_scaled_decay else self.weight_decay)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def global_grad_norm(params) -> float:
    return math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for _, p in params))


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0  # epochs fully completed
    metrics: list = field(default_factory=list)


class Trainer:
    """Owns the model, optimizer, RNG streams and step counter for one run."""

    def __init__(self, cfg: TrainConfig, data: corpus_mod.Corpus):
        self.cfg = cfg
        self.data = data
        self.model = MaskCLIP(cfg)
        self.dtype = np.dtype(cfg.precision)
        self.images = np.ascontiguousarray(data.images, dtype=self.dtype)
        ctx = cfg.model.text.context_length
        self.ids, self.eos = corpus_mod.tokenize_batch(data.captions, ctx)
        self.schedule = make_schedule(cfg, len(data))
        self.spe = steps_per_epoch(len(data), cfg.batch_size)
        self.optimizer = AdamW(self.model.trainable(), cfg.adam_beta1, cfg.adam_beta2,
                               cfg.adam_eps, cfg.weight_decay, cfg.decay_mode == "lr_scaled")
        self.mask_rng = stream_rng(cfg.seed, "mask")
        self.state = TrainState()

    @property
    def total_steps(self) -> int:
        return self.schedule.total_steps

    def lr_at(self, step: int) -> float:
        return self.schedule.lr_at(step)

    def alpha(self, step: int) -> float:
        if not self.cfg.use_ema:
            return 0.0
        return alpha_at(step, self.total_steps, self.cfg.ema_start, self.cfg.ema_end)

    def train_step(self, idx) -> dict:
        """One optimizer update on the items ``idx``; returns the step's metrics."""
        cfg, model = self.cfg, self.model
        step = self.state.step
        for _, p in self.optimizer.params:
            p.grad[...] = 0.0
        with finite_checks(False):
            losses = model.losses(self.images[idx], self.ids[idx], self.eos[idx], self.mask_rng)
        for name, value in losses.items():
            if not np.isfinite(value.data).all():
                raise NonFiniteError(f"non-finite loss term {name} at step {step}")
        with finite_checks(False):
            losses["total"].backward()
        params = self.optimizer.params
        norm = global_grad_norm(params)
        if not math.isfinite(norm):
            bad = [k for k, p in params if not np.isfinite(p.grad).all()]
            raise NonFiniteError(f"non-finite gradient at step {step} in {bad[:3]}")
        scale = 1.0
        if cfg.grad_clip > 0 and norm > cfg.grad_clip:
            scale = cfg.grad_clip / norm
        lr = self.lr_at(step + 1)
        self.optimizer.step(lr, scale)
        clamp_temperature(model.log_temperature)
        alpha = None
        if model.teacher is not None:
            alpha = self.alpha(step)
            ema_update(model.visual, model.teacher, alpha)
        self.state.step = step + 1
        out = {"type": "step", "step": step + 1, "epoch": self.state.epoch}
        for name, value in losses.items():
            out[name] = float(value.data)
        out.update({"sigma": model.temperature, "alpha": alpha, "lr": lr, "grad_norm": norm})
        return out

    def batches(self, epoch: int):
        order = epoch_order(self.cfg.seed, epoch, len(self.data))
        bs = self.cfg.batch_size
        for i in range(0, len(order), bs):
            yield order[i:i + bs]

    def run_epoch(self, log=None) -> list:
        """Train one epoch (stopping early at the step budget); returns its step metrics."""
        epoch = self.state.epoch
        rows = []
        for idx in self.batches(epoch):
            if self.state.step >= self.total_steps:
                break
            row = self.train_step(idx)
            rows.append(row)
            if log is not None:
                log(row)
        self.state.epoch = epoch + 1
        summary = epoch_summary(epoch, self.state.step, rows)
        if log is not None:
            log(summary)
        return rows

    def finished(self) -> bool:
        return self.state.step >= self.total_steps

    # ------------------------------------------------------------ checkpoints

    def arrays(self) -> dict:
        out = {}
        for k, p in self.model.named_parameters():
            out["model/" + k] = p.data
        for k in self.optimizer.m:
            out["adam_m/" + k] = self.optimizer.m[k]
            out["adam_v/" + k] = self.optimizer.v[k]
        return out

    def header_state(self) -> dict:
        return {
            "step": self.state.step,
            "epoch": self.state.epoch,
            "adam_t": self.optimizer.t,
            "mask_rng": self.mask_rng.bit_generator.state,
        }

    def save(self, path) -> None:
        write_checkpoint(path, self.cfg, self.header_state(), self.arrays())

    def restore(self, ckpt: "Checkpoint") -> None:
        if ckpt.config.to_dict() != self.cfg.to_dict():
            raise CheckpointError("checkpoint config differs from the trainer's config")
        own = self.arrays()
        if set(own) != set(ckpt.arrays):
            missing = sorted(set(own) - set(ckpt.arrays))[:3]
            extra = sorted(set(ckpt.arrays) - set(own))[:3]
            raise CheckpointError(f"checkpoint arrays mismatch; missing={missing} unexpected={extra}")
        for k, arr in own.items():
            src = ckpt.arrays[k]
            if src.shape != arr.shape or src.dtype != arr.dtype:
                raise CheckpointError(f"{k}: {src.dtype}{src.shape} != {arr.dtype}{arr.shape}")
            arr[...] = src
        st = ckpt.state
        self.state.step = int(st["step"])
        self.state.epoch = int(st["epoch"])
        self.optimizer.t = int(st["adam_t"])
        self.mask_rng.bit_generator.state = st["mask_rng"]


def epoch_summary(epoch: int, step: int, rows: list) -> dict:
    out = {"type": "epoch", "epoch": epoch, "step": step, "steps": len(rows)}
    if rows:
        for key in ("L_I", "L_T", "L_Dist", "L_Pix", "total"):
            if key in rows[0]:
                out["mean_" + key] = float(np.mean([r[key] for r in rows]))
    return out


# ---------------------------------------------------------------- checkpoint file format


@dataclass
class Checkpoint:
    config: TrainConfig
    state: dict
    arrays: dict


def _header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_checkpoint(cfg: TrainConfig, state: dict, arrays: dict) -> bytes:
    """Serialise to the MCLP layout: magic, u32 version, u64 header length, JSON header, arrays."""
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = _header_bytes({"config": cfg.to_dict(), "state": state, "arrays": entries})
    return b"".join([CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<Q", len(header)), header,
                     *blobs])


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < 16 or blob[:4] != CKPT_MAGIC:
        raise CheckpointError("not an MCLP checkpoint (bad magic)")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + hlen > len(blob):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    cfg = TrainConfig.from_dict(header["config"])
    base = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(blob):
            raise CheckpointError(f"truncated array {e['name']}")
        dt = np.dtype(e["dtype"])
        arr = np.frombuffer(blob, dtype=dt, count=e["nbytes"] // dt.itemsize, offset=start)
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="))
    return Checkpoint(cfg, header["state"], arrays)


def write_checkpoint(path, cfg: TrainConfig, state: dict, arrays: dict) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(cfg, state, arrays))
    tmp.replace(path)


def read_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def load_model(path):
    """Model with the parameters stored in a checkpoint (optimizer state discarded)."""
    ckpt = read_checkpoint(path) if not isinstance(path, Checkpoint) else path
    model = MaskCLIP(ckpt.config)
    model.load_state_dict({k[len("model/"):]: v for k, v in ckpt.arrays.items() if k.startswith("model/")})
    return model


# ---------------------------------------------------------------- whole runs


def _dump(row: dict) -> str:
    return json.dumps(row, sort_keys=True, separators=(",", ":"))


def checkpoint_name(epoch: int) -> str:
    return f"epoch_{epoch:04d}.ckpt"


def run(cfg: TrainConfig, out_dir=None, data=None, resume=None, stop_after_epoch=None) -> Trainer:
    """Train to the step budget, checkpointing every epoch and logging JSON lines.

    ``data`` defaults to the corpus at ``cfg.corpus``. With ``resume`` (a
    checkpoint path) the state is restored and the metric log is cut back to
    the checkpoint's step before appending, so an interrupted-and-resumed run
    leaves the same log as an uninterrupted one.
    """
    if data is None:
        if not cfg.corpus:
            raise ValueError("no corpus given (set `corpus` in the config)")
        data = corpus_mod.load_corpus(cfg.corpus)
    trainer = Trainer(cfg, data)
    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "metrics.jsonl"
    if resume is not None:
        trainer.restore(read_checkpoint(resume))
        if log_path is not None:
            keep = []
            if log_path.exists():
                for line in log_path.read_text(encoding="utf-8").splitlines():
                    row = json.loads(line)
                    if row["step"] < trainer.state.step or (
                            row["step"] == trainer.state.step and row["epoch"] < trainer.state.epoch):
                        keep.append(line)
            log_path.write_text("".join(x + "\n" for x in keep), encoding="utf-8")
    elif log_path is not None:
        log_path.write_text("", encoding="utf-8")

    fh = open(log_path, "a", encoding="utf-8") if log_path is not None else None
    rows = trainer.state.metrics

    def log(row):
        rows.append(row)
        if fh is not None:
            fh.write(_dump(row) + "\n")

    try:
        while not trainer.finished():
            trainer.run_epoch(log)
            if fh is not None:
                fh.flush()
            if out is not None:
                trainer.save(out / checkpoint_name(trainer.state.epoch))
            if stop_after_epoch is not None and trainer.state.epoch >= stop_after_epoch:
                break
    finally:
        if fh is not None:
            fh.close()
    if out is not None and trainer.finished():
        trainer.save(out / "final.ckpt")
    return trainer
