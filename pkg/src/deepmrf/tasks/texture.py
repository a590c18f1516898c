"""Texture training and sequential zigzag synthesis."""

from __future__ import annotations

import numpy as np

from ..lattice import zigzag
from ..model import (EmissionParams, ModelParams, _split_raw, _variances, cap_infer,
                     emission_project, gmm_sample, neighbor_sum)
from ..numerics import RngStream, sigma
from ..training import Checkpoint, TrainConfig, TrainResult, train
from .imageio import as_image


def train_texture(sample, cfg: TrainConfig | None = None, **kw) -> TrainResult:
    cfg = cfg or TrainConfig.for_texture()
    img = as_image(sample).astype(np.float32)
    s = cfg.patch_size
    if img.shape[0] < s or img.shape[1] < s:
        raise ValueError(f"texture {img.shape[:2]} smaller than patch size {s}")
    return train([img], cfg, **kw)


def synthesize_texture(model, out_size, rng: RngStream, refine_cycles: int = 0,
                       n_cycles: int | None = None) -> np.ndarray:
    """Sample an (H, W, p) texture from an unconditioned model.

    Pixels and states start at zero. One forward zigzag sweep computes each
    state from the neighbours written so far and immediately samples the
    pixel from its emission, shifted by those neighbours' states.
    ``refine_cycles`` extra rounds re-infer all states on the sampled image
    and resample every pixel.
    """
    ck = model if isinstance(model, Checkpoint) else None
    params: ModelParams = ck.params if ck else model
    if params.d_c:
        raise ValueError("texture synthesis needs an unconditioned model")
    n_cycles = n_cycles or (ck.n_cycles if ck else 1)
    H, W = (int(v) for v in out_size)
    dec = zigzag(H, W)
    P = params.astype(np.float64)
    n = H * W
    h = np.zeros((n, P.d))
    x = np.zeros((n, P.p))
    nbr = dec.neighbor_table
    for u in dec.order:
        vs = [v for v in nbr[u] if v >= 0]
        s = h[vs].sum(axis=0) if vs else np.zeros(P.d)
        xs = x[vs].sum(axis=0) if vs else np.zeros(P.p)
        h[u] = sigma(P.W @ s + P.R @ xs, P.kind)
        e = emission_project(h[u], P)
        e.means = e.means + e.variances * (s @ P.R)
        x[u] = gmm_sample(e, rng)
    for _ in range(refine_cycles):
        tape = cap_infer(x, None, dec, P, n_cycles)
        hf = tape.final
        logits, means, logv = _split_raw(hf @ P.Q, P.K, P.p)
        var, _ = _variances(logv, P.fixed_var)
        mu = means + var * (neighbor_sum(hf, nbr) @ P.R)[:, None, :]
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        for u in dec.order:
            x[u] = gmm_sample(EmissionParams(w[u], mu[u], var[u]), rng)
    return x.reshape(H, W, P.p)
