"""Deep MRF core: parameters, GMM emission head, site-wise MAP update,
coupled acyclic passes over the zigzag decomposition, the per-pixel
likelihood loss and its exact reverse-mode gradient."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .lattice import GridSpec, ZigzagDecomposition
from .numerics import ActivationKind, RngStream, sigma

VAR_FLOOR = 1e-4
VAR_CEIL = 25.0
_LOG_FLOOR = float(np.log(VAR_FLOOR))
_LOG_CEIL = float(np.log(VAR_CEIL))
_LOG_2PI = float(np.log(2 * np.pi))


@dataclass
class ModelParams:
    """Learnable weights plus architecture hyperparameters.

    Shapes: W (d, d), R (d, p), Q (d, K*(1+2p)), S (d, d_c) or None.
    Q's columns are grouped per mixture component as
    ``[weight logit, p means, p log-variances]``.
    ``fixed_var`` pins every component variance (Q's variance columns are
    then ignored and receive zero gradient).
    """

    d: int
    K: int
    p: int
    d_c: int
    kind: ActivationKind
    W: np.ndarray
    R: np.ndarray
    Q: np.ndarray
    S: np.ndarray | None = None
    fixed_var: float | None = None

    def __post_init__(self):
        self.kind = ActivationKind.parse(self.kind)
        expect = {
            "W": (self.d, self.d),
            "R": (self.d, self.p),
            "Q": (self.d, self.K * (1 + 2 * self.p)),
        }
        if self.d_c:
            expect["S"] = (self.d, self.d_c)
        elif self.S is not None:
            raise ValueError("S given but d_c == 0")
        for name, shape in expect.items():
            arr = getattr(self, name)
            if arr is None or arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {None if arr is None else arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")

    @classmethod
    def init(cls, d, K, p=1, d_c=0, kind="sigmoid", rng=None, dtype=np.float32,
             fixed_var=None, q_scale=0.01):
        rng = rng if rng is not None else RngStream(0)
        b = 1.0 / np.sqrt(d)
        W = rng.uniform(-b, b, (d, d))
        R = rng.uniform(-b, b, (d, p))
        Q = rng.uniform(-q_scale, q_scale, (d, K * (1 + 2 * p)))
        S = rng.uniform(-b, b, (d, d_c)) if d_c else None
        return cls(d, K, p, d_c, kind, W.astype(dtype), R.astype(dtype), Q.astype(dtype),
                   None if S is None else S.astype(dtype), fixed_var)

    @property
    def names(self) -> tuple[str, ...]:
        return ("W", "R", "Q", "S") if self.d_c else ("W", "R", "Q")

    @property
    def dtype(self):
        return self.W.dtype

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in self.names}

    def with_arrays(self, arrays: dict) -> "ModelParams":
        return replace(self, **arrays)

    def copy(self) -> "ModelParams":
        return self.with_arrays({n: a.copy() for n, a in self.arrays().items()})

    def astype(self, dtype) -> "ModelParams":
        return self.with_arrays({n: a.astype(dtype) for n, a in self.arrays().items()})


@dataclass
class EmissionParams:
    weights: np.ndarray    # (K,)
    means: np.ndarray      # (K, p)
    variances: np.ndarray  # (K, p)


@dataclass
class HiddenField:
    grid: GridSpec
    t: int
    states: np.ndarray  # (n_nodes, d)


# --- emission head -----------------------------------------------------------


def _split_raw(raw, K, p):
    raw = raw.reshape(raw.shape[:-1] + (K, 1 + 2 * p))
    return raw[..., 0], raw[..., 1:1 + p], raw[..., 1 + p:]


def _variances(logv, fixed_var):
    if fixed_var is not None:
        return np.full_like(logv, fixed_var), np.zeros(logv.shape, dtype=bool)
    inside = (logv > _LOG_FLOOR) & (logv < _LOG_CEIL)
    return np.exp(np.clip(logv, _LOG_FLOOR, _LOG_CEIL)), inside


def emission_project(h, params: ModelParams) -> EmissionParams:
    raw = np.asarray(h, dtype=params.dtype) @ params.Q
    logits, means, logv = _split_raw(raw, params.K, params.p)
    w = np.exp(logits - logits.max())
    var, _ = _variances(logv, params.fixed_var)
    return EmissionParams(w / w.sum(), means.copy(), var)


def shifted_means(e: EmissionParams, neighbor_states, R) -> np.ndarray:
    if len(neighbor_states) == 0:
        return e.means.copy()
    total = np.sum(np.asarray(neighbor_states), axis=0)
    return e.means + e.variances * (total @ R)


def gmm_logpdf(x, e: EmissionParams) -> float:
    """Log density of a diagonal mixture; ``e.means`` are used as given."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    var = e.variances.astype(np.float64)
    diff = x[None, :] - e.means
    with np.errstate(divide="ignore"):
        logw = np.log(e.weights.astype(np.float64))
    comp = logw - 0.5 * np.sum(_LOG_2PI + np.log(var) + diff * diff / var, axis=1)
    m = comp.max()
    return float(m + np.log(np.sum(np.exp(comp - m))))


def gmm_sample(e: EmissionParams, rng: RngStream, clamp=True) -> np.ndarray:
    u = rng.random()
    c = int(np.searchsorted(np.cumsum(e.weights), u, side="right"))
    c = min(c, len(e.weights) - 1)
    while e.weights[c] <= 0 and c > 0:
        c -= 1
    z = rng.normal(e.means.shape[1])
    x = e.means[c] + np.sqrt(e.variances[c]) * z
    return np.clip(x, 0.0, 1.0) if clamp else x


# --- MAP update ----------------------------------------------------------------


def preactivation(neighbor_states, neighbor_pixels, conditioning, params: ModelParams):
    a = np.zeros(params.d, dtype=np.float64)
    if len(neighbor_states):
        a += params.W @ np.sum(np.asarray(neighbor_states, dtype=np.float64), axis=0)
    if len(neighbor_pixels):
        a += params.R @ np.sum(np.asarray(neighbor_pixels, dtype=np.float64).reshape(-1, params.p), axis=0)
    if params.d_c:
        if conditioning is None:
            raise ValueError("model is conditioned; conditioning vector required")
        a += params.S @ np.asarray(conditioning, dtype=np.float64).reshape(params.d_c)
    elif conditioning is not None:
        raise ValueError("model is unconditioned; got a conditioning vector")
    return a


def map_update(neighbor_states, neighbor_pixels, conditioning, params: ModelParams):
    """Closed-form local MAP of a hidden state given its neighbourhood."""
    a = preactivation(neighbor_states, neighbor_pixels, conditioning, params)
    return sigma(a, params.kind).astype(params.dtype)


# --- coupled acyclic passes ------------------------------------------------------


@numba.njit(cache=True, nogil=True)
def _cap_forward(base, nbr, order, n_passes, W, relu, H, A, S):
    n, d = base.shape
    h = np.zeros((n, d), dtype=base.dtype)
    s = np.empty(d, dtype=base.dtype)
    for k in range(n_passes):
        for i in range(n):
            u = order[i] if k % 2 == 0 else order[n - 1 - i]
            for j in range(d):
                s[j] = 0.0
            for m in range(nbr.shape[1]):
                v = nbr[u, m]
                if v < 0:
                    break
                for j in range(d):
                    s[j] += h[v, j]
            for j in range(d):
                acc = base[u, j]
                for l in range(d):
                    acc += W[j, l] * s[l]
                A[k, u, j] = acc
                S[k, u, j] = s[j]
                if relu:
                    h[u, j] = acc if acc > 0 else 0.0
                else:
                    h[u, j] = 1.0 / (1.0 + np.exp(-acc))
        H[k] = h


@numba.njit(cache=True, nogil=True)
def _cap_backward(g_final, H, A, S, nbr, order, W, relu, dW, dbase):
    n_passes, n, d = H.shape
    g = g_final.copy()
    da = np.empty(d, dtype=g.dtype)
    gs = np.empty(d, dtype=g.dtype)
    for k in range(n_passes - 1, -1, -1):
        for i in range(n - 1, -1, -1):
            u = order[i] if k % 2 == 0 else order[n - 1 - i]
            for j in range(d):
                if relu:
                    sp = 1.0 if A[k, u, j] > 0 else 0.0
                else:
                    hj = H[k, u, j]
                    sp = hj * (1.0 - hj)
                da[j] = g[u, j] * sp
                g[u, j] = 0.0
                dbase[u, j] += da[j]
            for j in range(d):
                for l in range(d):
                    dW[j, l] += da[j] * S[k, u, l]
            for l in range(d):
                acc = 0.0
                for j in range(d):
                    acc += W[j, l] * da[j]
                gs[l] = acc
            for m in range(nbr.shape[1]):
                v = nbr[u, m]
                if v < 0:
                    break
                for l in range(d):
                    g[v, l] += gs[l]


def _as_field(arr, spec: GridSpec, channels: int, what: str, dtype):
    arr = np.asarray(arr, dtype=dtype)
    n = spec.n_nodes
    if arr.ndim == 2 and channels == 1 and arr.shape == (spec.height, spec.width):
        arr = arr[..., None]
    if arr.ndim == 3:
        if arr.shape != (spec.height, spec.width, channels):
            raise ValueError(f"{what} field shape {arr.shape} does not match grid "
                             f"{spec.height}x{spec.width}x{channels}")
        arr = arr.reshape(n, channels)
    if arr.shape != (n, channels):
        raise ValueError(f"{what} field shape {arr.shape} does not match {(n, channels)}")
    return np.ascontiguousarray(arr)


def neighbor_sum(values, nbr):
    """Sum of ``values`` over each node's 4-neighbourhood; ``nbr`` padded with -1."""
    pad = np.concatenate([values, np.zeros((1,) + values.shape[1:], dtype=values.dtype)])
    g = pad[nbr]
    return ((g[:, 0] + g[:, 1]) + g[:, 2]) + g[:, 3]


@dataclass
class CapTape:
    """Everything recorded by ``cap_infer`` that ``backward`` replays."""

    decomp: ZigzagDecomposition
    x_in: np.ndarray             # (N, p) pixel input to the state updates
    cond: np.ndarray | None      # (N, d_c)
    snapshots: np.ndarray        # (P, N, d) buffer after each pass
    pre: np.ndarray              # (P, N, d) pre-activations per visit
    nsum: np.ndarray             # (P, N, d) neighbour-state sums per visit
    kind: ActivationKind
    shape: tuple = field(default=())

    @property
    def n_passes(self) -> int:
        return self.snapshots.shape[0]

    @property
    def final(self) -> np.ndarray:
        return self.snapshots[-1]

    @property
    def fields(self) -> list[HiddenField]:
        return [HiddenField(self.decomp.spec, k + 1, self.snapshots[k]) for k in range(self.n_passes)]


def cap_infer(x, conditioning, decomp: ZigzagDecomposition, params: ModelParams,
              n_cycles: int = 1) -> CapTape:
    """Run ``n_cycles`` forward+backward zigzag sweeps from an all-zero state."""
    if n_cycles < 1:
        raise ValueError("n_cycles must be >= 1")
    spec = decomp.spec
    dt = params.dtype
    xf = _as_field(x, spec, params.p, "pixel", dt)
    cf = None
    if params.d_c:
        if conditioning is None:
            raise ValueError("conditioned model requires a conditioning field")
        cf = _as_field(conditioning, spec, params.d_c, "conditioning", dt)
    elif conditioning is not None:
        raise ValueError("unconditioned model given a conditioning field")
    nbr = decomp.neighbor_table
    base = neighbor_sum(xf, nbr) @ params.R.T
    if cf is not None:
        base = base + cf @ params.S.T
    base = np.ascontiguousarray(base, dtype=dt)
    P, n = 2 * n_cycles, spec.n_nodes
    H = np.empty((P, n, params.d), dtype=dt)
    A = np.empty_like(H)
    S = np.empty_like(H)
    order = np.asarray(decomp.order, dtype=np.int64)
    _cap_forward(base, nbr, order, P, np.ascontiguousarray(params.W),
                 params.kind is ActivationKind.RELU, H, A, S)
    return CapTape(decomp, xf, cf, H, A, S, params.kind)


# --- loss and gradients ----------------------------------------------------------


@dataclass
class _EmissionCache:
    T: np.ndarray        # neighbour-state sums of the final states (N, d)
    shift: np.ndarray    # T @ R (N, p)
    logpi: np.ndarray    # (N, K)
    mu: np.ndarray       # shifted means (N, K, p)
    var: np.ndarray      # (N, K, p)
    inside: np.ndarray   # variance not clamped (N, K, p)
    comp: np.ndarray     # per-component joint log terms (N, K)
    ll: np.ndarray       # per-site log-likelihood (N,)


def _emission_forward(x, Hf, nbr, params: ModelParams) -> _EmissionCache:
    T = neighbor_sum(Hf, nbr)
    shift = T @ params.R
    logits, means, logv = _split_raw(Hf @ params.Q, params.K, params.p)
    var, inside = _variances(logv, params.fixed_var)
    m = logits.max(axis=1, keepdims=True)
    logpi = logits - (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))
    mu = means + var * shift[:, None, :]
    diff = x[:, None, :] - mu
    logN = -0.5 * np.sum(_LOG_2PI + np.log(var) + diff * diff / var, axis=2)
    comp = logpi + logN
    cm = comp.max(axis=1, keepdims=True)
    ll = (cm + np.log(np.exp(comp - cm).sum(axis=1, keepdims=True)))[:, 0]
    return _EmissionCache(T, shift, logpi, mu, var, inside, comp, ll)


def nll_loss(x, final_states, params: ModelParams, decomp: ZigzagDecomposition) -> float:
    """Mean per-pixel negative log-likelihood given the final hidden states."""
    spec = decomp.spec
    states = final_states.states if isinstance(final_states, HiddenField) else final_states
    xf = _as_field(x, spec, params.p, "pixel", params.dtype)
    cache = _emission_forward(xf, np.asarray(states, dtype=params.dtype), decomp.neighbor_table, params)
    return float(-cache.ll.astype(np.float64).mean())


def backward(tape: CapTape, x, params: ModelParams, scale: float = 1.0):
    """Gradient of ``scale * nll_loss`` w.r.t. every learnable array.

    Returns ``(loss, grads)`` with ``grads`` keyed like ``params.arrays()``.
    """
    if tape.kind is not params.kind or tape.snapshots.shape[2] != params.d:
        raise ValueError("tape was recorded with a different model configuration")
    if (tape.cond is None) != (params.d_c == 0):
        raise ValueError("tape conditioning does not match params")
    spec = tape.decomp.spec
    dt = params.dtype
    xf = _as_field(x, spec, params.p, "pixel", dt)
    nbr = tape.decomp.neighbor_table
    Hf = tape.final
    c = _emission_forward(xf, Hf, nbr, params)
    n = spec.n_nodes
    coef = -scale / n

    r = np.exp(c.comp - c.ll[:, None])
    pi = np.exp(c.logpi)
    diff = xf[:, None, :] - c.mu
    e = diff / c.var
    d_logits = r - pi
    d_means = r[..., None] * e
    d_var = r[..., None] * (-0.5 / c.var + 0.5 * e * e + e * c.shift[:, None, :])
    d_logv = np.where(c.inside, d_var * c.var, 0)
    d_shift = np.sum(r[..., None] * diff, axis=1)

    draw = np.concatenate([d_logits[..., None], d_means, d_logv], axis=2)
    draw = (coef * draw.reshape(n, -1)).astype(dt)
    d_shift = (coef * d_shift).astype(dt)

    dQ = Hf.T @ draw
    dR = c.T.T @ d_shift
    g_final = draw @ params.Q.T + neighbor_sum(d_shift @ params.R.T, nbr)
    g_final = np.ascontiguousarray(g_final, dtype=dt)

    dW = np.zeros((params.d, params.d), dtype=dt)
    dbase = np.zeros((n, params.d), dtype=dt)
    order = np.asarray(tape.decomp.order, dtype=np.int64)
    _cap_backward(g_final, tape.snapshots, tape.pre, tape.nsum, nbr, order,
                  np.ascontiguousarray(params.W), params.kind is ActivationKind.RELU, dW, dbase)

    dR = dR + dbase.T @ neighbor_sum(tape.x_in, nbr)
    grads = {"W": dW, "R": dR, "Q": dQ}
    if params.d_c:
        grads["S"] = dbase.T @ tape.cond
    loss = float(-c.ll.astype(np.float64).mean()) * scale
    return loss, grads


def loss_and_grad(x, conditioning, decomp, params: ModelParams, n_cycles=1, x_in=None):
    """Infer states from ``x_in`` (defaults to ``x``) and score ``x``."""
    tape = cap_infer(x if x_in is None else x_in, conditioning, decomp, params, n_cycles)
    return backward(tape, x, params)


def loss_only(x, conditioning, decomp, params: ModelParams, n_cycles=1, x_in=None) -> float:
    tape = cap_infer(x if x_in is None else x_in, conditioning, decomp, params, n_cycles)
    return nll_loss(x, tape.final, params, decomp)


def predict_means(tape: CapTape, params: ModelParams) -> np.ndarray:
    """Shifted mean of the most probable component at each site, (N, p)."""
    nbr = tape.decomp.neighbor_table
    Hf = tape.final
    logits, means, logv = _split_raw(Hf @ params.Q, params.K, params.p)
    var, _ = _variances(logv, params.fixed_var)
    mu = means + var * (neighbor_sum(Hf, nbr) @ params.R)[:, None, :]
    best = np.argmax(logits, axis=1)
    return mu[np.arange(len(best)), best]
