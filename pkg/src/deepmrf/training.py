"""Patch sampling, rmsprop with momentum, the binary checkpoint format and
the training loop."""

from __future__ import annotations

import csv
import logging
import os
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .lattice import zigzag
from .model import ModelParams, backward, cap_infer
from .numerics import ActivationKind, RngStream

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    patch_size: int = 25
    batch_size: int = 8
    epochs: int = 10
    steps_per_epoch: int = 100
    learning_rate: float = 1e-3
    rms_decay: float = 0.95
    momentum: float = 0.95
    epsilon: float = 1e-4
    seed: int = 0
    n_cycles: int = 1
    K: int = 20
    d: int = 32
    kind: str = "sigmoid"
    task: str = "texture"
    clip_norm: float = 5.0  # <= 0 disables clipping
    checkpoint_every: int = 1
    fixed_var: float | None = None
    sr_factor: int = 0
    observe_pixels: bool = True  # False: state updates see an all-zero pixel field
    threads: int = 1

    def __post_init__(self):
        if not 5 <= self.patch_size <= 64:
            raise ValueError(f"patch_size must be in [5, 64], got {self.patch_size}")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 < self.rms_decay < 1:
            raise ValueError("rms_decay must be in (0, 1)")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.task not in ("texture", "sr"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.steps_per_epoch < 1:
            raise ValueError("batch_size/steps_per_epoch must be >= 1 and epochs >= 0")
        ActivationKind.parse(self.kind)

    @classmethod
    def for_texture(cls, **kw) -> "TrainConfig":
        return cls(**{"patch_size": 25, "K": 20, "learning_rate": 1e-3, "task": "texture", **kw})

    @classmethod
    def for_sr(cls, **kw) -> "TrainConfig":
        base = {"patch_size": 16, "K": 1, "fixed_var": 0.01, "learning_rate": 1e-3,
                "task": "sr", "observe_pixels": False, "sr_factor": 2}
        return cls(**{**base, **kw})

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# --- data ----------------------------------------------------------------------


@dataclass
class TrainImage:
    """One training image: pixel targets (H, W, p) and optional conditioning (H, W, d_c)."""

    x: np.ndarray
    c: np.ndarray | None = None


@dataclass
class Patch:
    x: np.ndarray
    c: np.ndarray | None = None


@dataclass
class PatchBatch:
    patches: list[Patch] = field(default_factory=list)

    def __len__(self):
        return len(self.patches)


def _to_unit(a):
    a = np.asarray(a)
    if a.dtype == np.uint8:
        return a.astype(np.float32) / 255.0
    return a


def _as_train_image(img) -> TrainImage:
    if isinstance(img, TrainImage):
        x, c = img.x, img.c
    else:
        x, c = img, None
    x = _to_unit(x)
    if x.ndim == 2:
        x = x[..., None]
    if c is not None:
        c = _to_unit(c)
        if c.ndim == 2:
            c = c[..., None]
    return TrainImage(x, c)


def sample_patches(images, s: int, n: int, rng: RngStream) -> PatchBatch:
    """Uniformly random ``s``x``s`` crops (random image, random top-left corner)."""
    imgs = [_as_train_image(im) for im in images]
    for i, im in enumerate(imgs):
        if im.x.shape[0] < s or im.x.shape[1] < s:
            raise ValueError(f"image {i} is {im.x.shape[0]}x{im.x.shape[1]}, smaller than patch {s}")
    batch = PatchBatch()
    for _ in range(n):
        i = int(rng.integers(len(imgs)))
        im = imgs[i]
        r = int(rng.integers(im.x.shape[0] - s + 1))
        c = int(rng.integers(im.x.shape[1] - s + 1))
        batch.patches.append(Patch(
            im.x[r:r + s, c:c + s].copy(),
            None if im.c is None else im.c[r:r + s, c:c + s].copy(),
        ))
    return batch


# --- optimizer --------------------------------------------------------------------


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    n: dict[str, np.ndarray]
    gbar: dict[str, np.ndarray]
    delta: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        z = lambda: {k: np.zeros_like(a) for k, a in params.arrays().items()}
        return cls(z(), z(), z())

    def copy(self) -> "OptimizerState":
        return OptimizerState(*({k: a.copy() for k, a in d.items()} for d in (self.n, self.gbar, self.delta)))


def rmsprop_step(params: ModelParams, grads: dict, opt: OptimizerState, cfg: TrainConfig):
    """Variance-normalised rmsprop with momentum, applied in place.

    n <- rho n + (1-rho) g^2;  gbar <- rho gbar + (1-rho) g
    delta <- mu delta - lr g / sqrt(n - gbar^2 + eps);  theta <- theta + delta
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.flatnonzero(~np.isfinite(g))[0])
            raise NonFiniteGradientError(f"non-finite gradient in {name} at flat index {bad}")
    rho, mu, lr, eps = cfg.rms_decay, cfg.momentum, cfg.learning_rate, cfg.epsilon
    for name, g in grads.items():
        theta = getattr(params, name)
        n, gb, dl = opt.n[name], opt.gbar[name], opt.delta[name]
        dt = theta.dtype
        n *= dt.type(rho)
        n += dt.type(1 - rho) * g * g
        gb *= dt.type(rho)
        gb += dt.type(1 - rho) * g
        denom = np.sqrt(np.maximum(n - gb * gb, 0) + dt.type(eps))
        dl *= dt.type(mu)
        dl -= dt.type(lr) * g / denom
        theta += dl
    return params, opt


def clip_global_norm(grads: dict, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] *= grads[k].dtype.type(s)
    return norm


# --- gradients over a batch ----------------------------------------------------------


def patch_loss_and_grad(params: ModelParams, patch: Patch, n_cycles: int, observe_pixels: bool,
                        scale: float = 1.0):
    h, w = patch.x.shape[:2]
    dec = zigzag(h, w)
    x = patch.x.astype(params.dtype, copy=False)
    x_in = x if observe_pixels else np.zeros_like(x)
    tape = cap_infer(x_in, patch.c, dec, params, n_cycles)
    return backward(tape, x, params, scale=scale)


def batch_loss_and_grad(params: ModelParams, batch: PatchBatch, n_cycles: int = 1,
                        observe_pixels: bool = True, threads: int = 1, schedule=None):
    """Mean loss and gradient over a batch.

    Patches may be processed in any order (``schedule``) or concurrently;
    per-patch results are always combined in patch-index order, so the
    result is bit-identical regardless of processing order.
    """
    B = len(batch)
    if B == 0:
        raise ValueError("empty batch")
    schedule = list(range(B)) if schedule is None else list(schedule)
    if sorted(schedule) != list(range(B)):
        raise ValueError("schedule must be a permutation of patch indices")
    results = [None] * B

    def work(i):
        results[i] = patch_loss_and_grad(params, batch.patches[i], n_cycles, observe_pixels, 1.0 / B)

    if threads > 1 and B > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(work, schedule))
    else:
        for i in schedule:
            work(i)
    loss = 0.0
    grads = {k: np.zeros_like(a) for k, a in params.arrays().items()}
    for lo, g in results:
        loss += lo
        for k in grads:
            grads[k] += g[k]
    return loss, grads


# --- checkpoints ---------------------------------------------------------------------

MAGIC = b"DMRFCKPT"
VERSION = 1
_HEAD = struct.Struct("<8sI8IdQQI")


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    opt: OptimizerState | None = None
    rng_state: bytes = b""
    epoch: int = 0
    step: int = 0
    n_cycles: int = 1
    sr_factor: int = 0

    @property
    def dims(self) -> dict:
        p = self.params
        return {"d": p.d, "K": p.K, "p": p.p, "d_c": p.d_c, "kind": p.kind}


def encode_checkpoint(ck: Checkpoint) -> bytes:
    p = ck.params
    flags = (1 if p.fixed_var is not None else 0) | (2 if ck.opt is not None else 0)
    head = _HEAD.pack(MAGIC, VERSION, p.d, p.K, p.p, p.d_c, int(p.kind), ck.n_cycles,
                      ck.sr_factor, flags, float(p.fixed_var or 0.0), ck.epoch, ck.step,
                      len(ck.rng_state))
    parts = [head, ck.rng_state]
    arrays = [getattr(p, n) for n in p.names]
    if ck.opt is not None:
        for d in (ck.opt.n, ck.opt.gbar, ck.opt.delta):
            arrays += [d[n] for n in p.names]
    parts += [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < 8 or blob[:8] != MAGIC:
        raise CheckpointCorruptError("not a checkpoint file (bad magic)")
    if len(blob) < _HEAD.size:
        raise CheckpointTruncatedError("checkpoint truncated inside header")
    (_, version, d, K, p, d_c, kind, n_cycles, sr_factor, flags, fixed_var,
     epoch, step, rng_len) = _HEAD.unpack_from(blob)
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
    try:
        kind = ActivationKind(kind)
    except ValueError:
        raise CheckpointCorruptError(f"unknown activation code {kind}") from None
    shapes = [(d, d), (d, p), (d, K * (1 + 2 * p))] + ([(d, d_c)] if d_c else [])
    n_groups = 4 if flags & 2 else 1
    need = _HEAD.size + rng_len + 4 * n_groups * sum(a * b for a, b in shapes) + 4
    if len(blob) < need:
        raise CheckpointTruncatedError(f"checkpoint truncated: {len(blob)} of {need} bytes")
    if len(blob) > need:
        raise CheckpointCorruptError("trailing bytes after checkpoint payload")
    (crc,) = struct.unpack_from("<I", blob, need - 4)
    if zlib.crc32(blob[: need - 4]) != crc:
        raise CheckpointCorruptError("checkpoint checksum mismatch")
    off = _HEAD.size
    rng_state = blob[off:off + rng_len]
    off += rng_len
    groups = []
    for _ in range(n_groups):
        arrs = []
        for shp in shapes:
            cnt = shp[0] * shp[1]
            arrs.append(np.frombuffer(blob, "<f4", cnt, off).reshape(shp).astype(np.float32))
            off += 4 * cnt
        groups.append(arrs)
    W, R, Q, *S = groups[0]
    params = ModelParams(d, K, p, d_c, kind, W, R, Q, S[0] if S else None,
                         fixed_var if flags & 1 else None)
    opt = None
    if flags & 2:
        names = params.names
        opt = OptimizerState(*({n: a for n, a in zip(names, g)} for g in groups[1:]))
    return Checkpoint(params, opt, rng_state, epoch, step, n_cycles, sr_factor)


def save_checkpoint(ck: Checkpoint, path) -> None:
    """Atomic write: temp file in the same directory, then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(encode_checkpoint(ck))
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def load_checkpoint(path, expect: dict | None = None) -> Checkpoint:
    with open(path, "rb") as f:
        ck = decode_checkpoint(f.read())
    if expect:
        dims = ck.dims
        for k, v in expect.items():
            if k in dims and dims[k] != (ActivationKind.parse(v) if k == "kind" else v):
                raise CheckpointMismatchError(f"checkpoint {k}={dims[k]} but expected {v}")
    return ck


# --- training loop -----------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[tuple[int, int, float]]   # (epoch, step, loss)
    epoch_losses: list[float]


def init_params(cfg: TrainConfig, p: int, d_c: int, rng: RngStream) -> ModelParams:
    return ModelParams.init(cfg.d, cfg.K, p, d_c, cfg.kind, rng, np.float32, fixed_var=cfg.fixed_var)


def train(corpus, cfg: TrainConfig, ckpt_path=None, resume: Checkpoint | None = None,
          history_csv=None, max_epochs: int | None = None) -> TrainResult:
    """Run ``cfg.epochs`` epochs of ``cfg.steps_per_epoch`` rmsprop steps.

    Each step samples a fresh batch of random patches. With ``resume`` the run
    continues from the checkpoint's epoch, parameters, optimizer and RNG
    state, and matches an uninterrupted run step for step. ``max_epochs``
    stops early (after that many epochs in this call) without changing what
    the run would otherwise compute.
    """
    images = [_as_train_image(im) for im in corpus]
    if not images:
        raise ValueError("empty corpus")
    p = images[0].x.shape[2]
    d_c = 0 if images[0].c is None else images[0].c.shape[2]
    if resume is not None:
        params = resume.params.copy()
        opt = resume.opt.copy() if resume.opt is not None else OptimizerState.zeros_like(params)
        rng = RngStream.from_state(resume.rng_state)
        start_epoch, step = resume.epoch, resume.step
    else:
        rng = RngStream(cfg.seed)
        params = init_params(cfg, p, d_c, rng.split(0))
        opt = OptimizerState.zeros_like(params)
        start_epoch, step = 0, 0
    if params.p != p or params.d_c != d_c:
        raise CheckpointMismatchError("checkpoint dimensions do not match corpus")

    history, epoch_losses = [], []
    ck = Checkpoint(params, opt, rng.get_state(), start_epoch, step, cfg.n_cycles, cfg.sr_factor)
    end_epoch = cfg.epochs if max_epochs is None else min(cfg.epochs, start_epoch + max_epochs)
    hist_f = open(history_csv, "a" if resume is not None else "w", newline="") if history_csv else None
    try:
        writer = csv.writer(hist_f) if hist_f else None
        if writer and resume is None:
            writer.writerow(["epoch", "step", "loss"])
        for epoch in range(start_epoch, end_epoch):
            losses = []
            for _ in range(cfg.steps_per_epoch):
                batch = sample_patches(images, cfg.patch_size, cfg.batch_size, rng)
                loss, grads = batch_loss_and_grad(params, batch, cfg.n_cycles,
                                                  cfg.observe_pixels, cfg.threads)
                if not np.isfinite(loss):
                    raise NonFiniteGradientError(f"non-finite loss at step {step}")
                clip_global_norm(grads, cfg.clip_norm)
                rmsprop_step(params, grads, opt, cfg)
                step += 1
                losses.append(loss)
                history.append((epoch, step, loss))
                if writer:
                    writer.writerow([epoch, step, repr(loss)])
            epoch_losses.append(float(np.mean(losses)))
            log.info("epoch %d  mean loss %.5f", epoch, epoch_losses[-1])
            ck = Checkpoint(params, opt, rng.get_state(), epoch + 1, step, cfg.n_cycles, cfg.sr_factor)
            if ckpt_path and ((epoch + 1) % max(cfg.checkpoint_every, 1) == 0 or epoch + 1 == end_epoch):
                save_checkpoint(ck, ckpt_path)
    finally:
        if hist_f:
            hist_f.close()
    return TrainResult(ck, history, epoch_losses)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
