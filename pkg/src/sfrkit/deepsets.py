"""Permutation-equivariant estimator of complex modal coefficients.

The network maps an unordered set of eigenvalues (polar form) plus flat
system features (commitment bits, disturbance magnitude/type/target) to one
polar-encoded coefficient per set element:

    phi     shared per-element encoder (two dense layers, width d)
    pool    masked mean over the set (permutation invariant)
    h       dense projection of the flat features
    rho     dense combiner of [pool, h] -> context c
    psi     shared per-element decoder of [phi(lambda_i), c] -> 3 outputs
            ( standardized |gamma|, sin angle, cos angle )

Everything is plain numpy with hand-written reverse-mode gradients and an
Adam optimizer, verified against central finite differences. Weight sharing
across set positions plus mean pooling make inference exactly equivariant;
the pooled sum is evaluated in sorted order so equal sets give bitwise
equal outputs under any permutation.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import ModelError, ModelIntegrityError

MODEL_FORMAT = "sfrkit-model"
MODEL_VERSION = 1
ANGLE_CLAMP_EPS = 1e-7          # derivative-side clamp for arccos
NORM_EPS = 1e-24                # added under the norm square root


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def _softplus(z):
    return np.logaddexp(0.0, z)


def _softplus_prime(z):
    return 1.0 / (1.0 + np.exp(-z))


def _tanh_prime(z):
    return 1.0 - np.tanh(z) ** 2


ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "softplus": (_softplus, _softplus_prime),
    "tanh": (np.tanh, _tanh_prime),
    "relu": (lambda z: np.maximum(z, 0.0),
             lambda z: (z > 0.0).astype(float)),
}


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormStats:
    """Standardization fitted on the training split only."""
    flat_mean: np.ndarray
    flat_std: np.ndarray
    mag_mean: float
    mag_std: float


@dataclass(frozen=True)
class EncodedSample:
    set_x: np.ndarray       # [M, 2] polar eigenvalues
    flat: np.ndarray        # [F] standardized flat features
    target: Optional[np.ndarray] = None    # [M, 3]
    mask: Optional[np.ndarray] = None      # [M] bool


def flat_features_raw(u_on, dp_mw: float, kind: int, index: int,
                      n_g: int) -> np.ndarray:
    """Unstandardized flat block [u_on bits, dP_L, type, one-hot index]."""
    u = np.asarray(u_on, dtype=float).ravel()
    if len(u) != n_g:
        raise ModelError(f"u_on length {len(u)} != n_g {n_g}")
    if not (0 <= int(index) < n_g):
        raise ModelError(f"element index {index} out of range for "
                         f"{n_g} generators")
    onehot = np.zeros(n_g)
    onehot[int(index)] = 1.0
    return np.concatenate([u, [float(dp_mw), float(kind)], onehot])


def eigen_polar(lambdas) -> np.ndarray:
    lam = np.asarray(lambdas, complex)
    return np.stack([np.abs(lam), np.angle(lam)], axis=-1)


def fit_stats(flat_raw: np.ndarray, gamma_mags: np.ndarray,
              mask: Optional[np.ndarray] = None) -> NormStats:
    """Element-wise flat standardization and |gamma| standardization.

    Near-constant flat entries (binary blocks in a single-commitment set)
    get unit scale so they pass through centered but unscaled.
    """
    mean = flat_raw.mean(axis=0)
    std = flat_raw.std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    mags = gamma_mags[mask] if mask is not None else gamma_mags
    m_std = float(mags.std())
    return NormStats(flat_mean=mean, flat_std=std,
                     mag_mean=float(mags.mean()),
                     mag_std=m_std if m_std > 1e-12 else 1.0)


def encode_inputs(lambdas, u_on, x_j, stats: NormStats, n_g: int,
                  m_modes: Optional[int] = None,
                  mask=None) -> EncodedSample:
    """Deterministic encoding of one (mode set, commitment, disturbance).

    ``x_j`` is the (dP_L in MW, type flag, element index) triple; the index
    is one-hot encoded over the generators.
    """
    set_x = eigen_polar(lambdas)
    if m_modes is not None and set_x.shape[0] != m_modes:
        raise ModelError(f"mode-set size {set_x.shape[0]} does not match "
                         f"the model's M = {m_modes}")
    dp, kind, index = x_j
    raw = flat_features_raw(u_on, dp, int(kind), int(index), n_g)
    flat = (raw - stats.flat_mean) / stats.flat_std
    return EncodedSample(set_x=set_x, flat=flat,
                         mask=None if mask is None
                         else np.asarray(mask, bool))


def encode_targets(gammas, stats: NormStats) -> np.ndarray:
    """Polar target tensor [standardized |gamma|, sin, cos] per element."""
    g = np.asarray(gammas, complex)
    mag = (np.abs(g) - stats.mag_mean) / stats.mag_std
    ang = np.angle(g)
    return np.stack([mag, np.sin(ang), np.cos(ang)], axis=-1)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

PARAM_SHAPES = ("phi1_w", "phi1_b", "phi2_w", "phi2_b", "h_w", "h_b",
                "rho_w", "rho_b", "psi1_w", "psi1_b", "psi2_w", "psi2_b")


class EquivariantModel:
    """Deep-Sets-style equivariant regressor with fixed set size M."""

    def __init__(self, m_modes: int, n_g: int, d: int = 64,
                 activation: str = "softplus", dropout: float = 0.1,
                 stats: Optional[NormStats] = None,
                 params: Optional[dict] = None, seed: int = 0):
        if activation not in ACTIVATIONS:
            raise ModelError(f"unknown activation {activation!r}")
        self.m_modes = m_modes
        self.n_g = n_g
        self.d = d
        self.flat_dim = 2 * n_g + 2
        self.activation = activation
        self.dropout = dropout
        self.stats = stats
        self.params = params if params is not None \
            else self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng) -> dict:
        d, f = self.d, self.flat_dim

        def glorot(n_in, n_out):
            s = np.sqrt(2.0 / (n_in + n_out))
            return rng.normal(0.0, s, size=(n_in, n_out))

        return {
            "phi1_w": glorot(2, d), "phi1_b": np.zeros(d),
            "phi2_w": glorot(d, d), "phi2_b": np.zeros(d),
            "h_w": glorot(f, d), "h_b": np.zeros(d),
            "rho_w": glorot(2 * d, d), "rho_b": np.zeros(d),
            "psi1_w": glorot(2 * d, d), "psi1_b": np.zeros(d),
            "psi2_w": glorot(d, 3), "psi2_b": np.zeros(3),
        }

    def copy_params(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}

    # -- forward / backward ------------------------------------------------

    def forward(self, set_x: np.ndarray, flat: np.ndarray,
                mask: Optional[np.ndarray] = None, training: bool = False,
                rng=None):
        """Batch forward pass.

        set_x [N, M, 2], flat [N, F], optional mask [N, M] marking real set
        positions (the padding path). Returns (out [N, M, 3], cache).
        Dropout draws from ``rng`` only when ``training`` is set.
        """
        set_x = np.asarray(set_x, float)
        flat = np.asarray(flat, float)
        if set_x.ndim != 3 or set_x.shape[2] != 2:
            raise ModelError(f"set tensor must be [N, M, 2], got "
                             f"{set_x.shape}")
        n, m = set_x.shape[:2]
        if m != self.m_modes:
            raise ModelError(f"mode-set size {m} does not match the model's "
                             f"M = {self.m_modes}")
        if flat.shape != (n, self.flat_dim):
            raise ModelError(f"flat tensor must be [N, {self.flat_dim}], "
                             f"got {flat.shape}")
        act, _ = ACTIVATIONS[self.activation]
        p = self.params

        z1 = set_x @ p["phi1_w"] + p["phi1_b"]
        a1 = act(z1)
        z2 = a1 @ p["phi2_w"] + p["phi2_b"]
        e = act(z2)
        drop1 = None
        if training and self.dropout > 0.0:
            if rng is None:
                raise ModelError("training forward pass needs an rng")
            drop1 = (rng.random(e.shape) >= self.dropout) / (1 - self.dropout)
            e = e * drop1

        if mask is not None:
            mask = np.asarray(mask, bool)
            e_pool = e * mask[:, :, None]
            count = np.maximum(mask.sum(axis=1, keepdims=True), 1)
        else:
            e_pool = e
            count = np.full((n, 1), m)
        # sorted accumulation keeps the pooled value bitwise independent of
        # the set order (floating addition is not otherwise commutative)
        pool = np.sort(e_pool, axis=1).sum(axis=1) / count

        zh = flat @ p["h_w"] + p["h_b"]
        ah = act(zh)
        g = np.concatenate([pool, ah], axis=1)
        zr = g @ p["rho_w"] + p["rho_b"]
        c = act(zr)

        u = np.concatenate([e, np.repeat(c[:, None, :], m, axis=1)], axis=2)
        zd = u @ p["psi1_w"] + p["psi1_b"]
        d1 = act(zd)
        drop2 = None
        if training and self.dropout > 0.0:
            drop2 = (rng.random(d1.shape) >= self.dropout) / (1 - self.dropout)
            d1 = d1 * drop2
        out = d1 @ p["psi2_w"] + p["psi2_b"]
        cache = {"set_x": set_x, "flat": flat, "z1": z1, "a1": a1, "z2": z2,
                 "e": e, "drop1": drop1, "mask": mask, "count": count,
                 "zh": zh, "g": g, "zr": zr, "zd": zd, "d1": d1,
                 "drop2": drop2}
        return out, cache

    def backward(self, cache: dict, dout: np.ndarray) -> dict:
        """Parameter gradients for a given output gradient."""
        _, dact = ACTIVATIONS[self.activation]
        p = self.params
        m = self.m_modes
        grads = {}

        d1 = cache["d1"]
        grads["psi2_w"] = np.einsum("nmd,nmk->dk", d1, dout)
        grads["psi2_b"] = dout.sum(axis=(0, 1))
        dd1 = dout @ p["psi2_w"].T
        if cache["drop2"] is not None:
            dd1 = dd1 * cache["drop2"]
        dzd = dd1 * dact(cache["zd"])
        # rebuild the decoder input from cached pieces rather than caching it
        act, _ = ACTIVATIONS[self.activation]
        c = act(cache["zr"])
        u = np.concatenate([cache["e"],
                            np.repeat(c[:, None, :], m, axis=1)], axis=2)
        grads["psi1_w"] = np.einsum("nmi,nmk->ik", u, dzd)
        grads["psi1_b"] = dzd.sum(axis=(0, 1))
        du = dzd @ p["psi1_w"].T
        de_dec = du[:, :, :self.d]
        dc = du[:, :, self.d:].sum(axis=1)

        dzr = dc * dact(cache["zr"])
        grads["rho_w"] = cache["g"].T @ dzr
        grads["rho_b"] = dzr.sum(axis=0)
        dg = dzr @ p["rho_w"].T
        dpool = dg[:, :self.d]
        dah = dg[:, self.d:]

        dzh = dah * dact(cache["zh"])
        grads["h_w"] = cache["flat"].T @ dzh
        grads["h_b"] = dzh.sum(axis=0)

        de_pool = np.repeat((dpool / cache["count"])[:, None, :], m, axis=1)
        if cache["mask"] is not None:
            de_pool = de_pool * cache["mask"][:, :, None]
        de = de_dec + de_pool
        if cache["drop1"] is not None:
            de = de * cache["drop1"]
        dz2 = de * dact(cache["z2"])
        grads["phi2_w"] = np.einsum("nmi,nmk->ik", cache["a1"], dz2)
        grads["phi2_b"] = dz2.sum(axis=(0, 1))
        da1 = dz2 @ p["phi2_w"].T
        dz1 = da1 * dact(cache["z1"])
        grads["phi1_w"] = np.einsum("nmi,nmk->ik", cache["set_x"], dz1)
        grads["phi1_b"] = dz1.sum(axis=(0, 1))
        return grads


# ---------------------------------------------------------------------------
# polar loss
# ---------------------------------------------------------------------------

def polar_loss(pred: np.ndarray, target: np.ndarray, alpha: float,
               beta: float, mask: Optional[np.ndarray] = None) -> float:
    loss, _, _ = polar_loss_grad(pred, target, alpha, beta, mask)
    return loss


def polar_loss_grad(pred: np.ndarray, target: np.ndarray, alpha: float,
                    beta: float, mask: Optional[np.ndarray] = None):
    """Weighted magnitude-MSE plus squared angular distance, with gradient.

    The angular term is the squared arccos of the normalized dot product of
    the (sin, cos) direction vectors. The loss value uses the exact [-1, 1]
    clip (so identical directions give 0 and antipodal ones pi^2); only the
    derivative factor clamps to [-1+eps, 1-eps] to stay bounded.
    """
    pred = np.asarray(pred, float)
    target = np.asarray(target, float)
    if pred.shape != target.shape or pred.shape[-1] != 3:
        raise ModelError(f"prediction/target shape mismatch: {pred.shape} "
                         f"vs {target.shape}")
    if alpha < 0 or beta < 0 or (alpha == 0 and beta == 0):
        raise ModelError("loss weights must be nonnegative and not both zero")
    if mask is None:
        w = np.ones(pred.shape[:-1])
    else:
        w = np.asarray(mask, float)
    n_eff = w.sum()

    r_p, r_t = pred[..., 0], target[..., 0]
    dr = r_p - r_t
    l_r = float((w * dr ** 2).sum() / n_eff)

    vp = pred[..., 1:3]
    vt = target[..., 1:3]
    np_raw = np.sqrt((vp ** 2).sum(-1) + NORM_EPS)
    nt_raw = np.sqrt((vt ** 2).sum(-1) + NORM_EPS)
    degenerate = bool(np.any((np_raw < 1e-7) & (w > 0)))
    dot = (vp * vt).sum(-1)
    u = dot / (np_raw * nt_raw)
    u_val = np.clip(u, -1.0, 1.0)
    theta = np.arccos(u_val)
    l_t = float((w * theta ** 2).sum() / n_eff)

    loss = alpha * l_r + beta * l_t

    grad = np.zeros_like(pred)
    grad[..., 0] = alpha * 2.0 * dr * w / n_eff
    u_c = np.clip(u, -1.0 + ANGLE_CLAMP_EPS, 1.0 - ANGLE_CLAMP_EPS)
    dtheta2_du = -2.0 * theta / np.sqrt(1.0 - u_c ** 2)
    du_dvp = vt / (np_raw * nt_raw)[..., None] \
        - (u / np_raw ** 2)[..., None] * vp
    grad[..., 1:3] = beta * (w * dtheta2_du / n_eff)[..., None] * du_dvp
    info = {"l_r": l_r, "l_theta": l_t,
            "flags": ("degenerate_direction",) if degenerate else ()}
    return loss, grad, info


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def decode_gamma(outputs: np.ndarray, stats: NormStats,
                 pair_units=None, conjugate_sym: bool = True):
    """Reconstruct complex coefficients from the polar network outputs.

    Returns (gammas [M] complex, flags). Magnitudes are de-standardized and
    clamped at zero; the angle comes from atan2 of the direction channels.
    With ``conjugate_sym`` the coefficients of known conjugate-pair
    positions are averaged into an exactly conjugate pair.
    """
    out = np.asarray(outputs, float)
    if out.ndim != 2 or out.shape[1] != 3:
        raise ModelError(f"expected [M, 3] outputs, got {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ModelError("non-finite network outputs")
    flags = []
    mag = out[:, 0] * stats.mag_std + stats.mag_mean
    if np.any(mag < 0):
        flags.append("negative_magnitude_clamped")
        mag = np.maximum(mag, 0.0)
    ang = np.arctan2(out[:, 1], out[:, 2])
    gam = mag * np.exp(1j * ang)
    if conjugate_sym and pair_units is not None:
        for unit in pair_units:
            if len(unit) == 2:
                a, b = unit
                avg = 0.5 * (gam[a] + np.conj(gam[b]))
                gam[a] = avg
                gam[b] = np.conj(avg)
            else:
                # real-mode coefficient: only its real part acts on a real
                # response
                gam[unit[0]] = gam[unit[0]].real
    return gam, tuple(flags)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    beta: float = 1.0
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 64
    dropout: float = 0.1
    seed: int = 0
    val_fraction: float = 0.30

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or \
                (self.alpha == 0 and self.beta == 0):
            raise ModelError("alpha, beta must be >= 0 and not both zero")
        if not (0.0 < self.val_fraction < 1.0):
            raise ModelError("validation fraction must be in (0, 1)")


@dataclass
class GammaDataset:
    """Raw training material for the coefficient estimator."""
    lambdas: np.ndarray     # [N, M] complex
    u_on: np.ndarray        # [N, n_g] 0/1
    dp_mw: np.ndarray       # [N]
    kind: np.ndarray        # [N] 0 trip / 1 load
    index: np.ndarray       # [N] generator position
    gammas: np.ndarray      # [N, M] complex
    mask: Optional[np.ndarray] = None   # [N, M] bool, padding path

    def __len__(self):
        return len(self.lambdas)


class Adam:
    """Standard adaptive-moment optimizer over a parameter dict."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / b1t) / \
                (np.sqrt(self.v[k] / b2t) + self.eps)


def train(dataset: GammaDataset, config: TrainConfig, d: int = 64,
          activation: str = "softplus"):
    """Train an equivariant estimator; deterministic given the seed.

    The 70/30-style split happens first; normalization statistics are
    fitted on the training rows only. Returns (model, history) with the
    best-validation parameters retained.
    """
    n = len(dataset)
    if n < 4:
        raise ModelError("dataset too small to split")
    m_modes = dataset.lambdas.shape[1]
    n_g = dataset.u_on.shape[1]
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(n)
    n_val = max(1, int(round(n * config.val_fraction)))
    val_idx = order[:n_val]
    tr_idx = order[n_val:]

    flat_raw = np.stack([
        flat_features_raw(dataset.u_on[i], dataset.dp_mw[i],
                          int(dataset.kind[i]), int(dataset.index[i]), n_g)
        for i in range(n)])
    mags = np.abs(dataset.gammas)
    mask_all = dataset.mask
    stats = fit_stats(flat_raw[tr_idx], mags[tr_idx],
                      None if mask_all is None else mask_all[tr_idx])

    set_x = eigen_polar(dataset.lambdas)
    flat = (flat_raw - stats.flat_mean) / stats.flat_std
    targets = encode_targets(dataset.gammas, stats)

    model = EquivariantModel(m_modes=m_modes, n_g=n_g, d=d,
                             activation=activation, dropout=config.dropout,
                             stats=stats, seed=config.seed)
    opt = Adam(model.params, lr=config.lr)
    history = {"train": [], "val": [], "best_epoch": -1}
    best_val = np.inf
    best_params = model.copy_params()

    def eval_loss(idx):
        out, _ = model.forward(set_x[idx], flat[idx],
                               None if mask_all is None else mask_all[idx])
        return polar_loss(out, targets[idx], config.alpha, config.beta,
                          None if mask_all is None else mask_all[idx])

    for epoch in range(config.epochs):
        perm = rng.permutation(len(tr_idx))
        for start in range(0, len(tr_idx), config.batch_size):
            bidx = tr_idx[perm[start:start + config.batch_size]]
            bmask = None if mask_all is None else mask_all[bidx]
            out, cache = model.forward(set_x[bidx], flat[bidx], bmask,
                                       training=True, rng=rng)
            loss, dout, _ = polar_loss_grad(out, targets[bidx], config.alpha,
                                            config.beta, bmask)
            if not np.isfinite(loss):
                raise ModelError(f"NaN loss at epoch {epoch}, batch starting "
                                 f"row {start}")
            if loss > 1e6:
                raise ModelError(f"training diverged (loss {loss:.3e})")
            grads = model.backward(cache, dout)
            opt.step(model.params, grads)
        tr_loss = eval_loss(tr_idx)
        val_loss = eval_loss(val_idx)
        history["train"].append(tr_loss)
        history["val"].append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_params = model.copy_params()
            history["best_epoch"] = epoch
    model.params = best_params
    return model, history


def gradient_check(model: EquivariantModel, set_x, flat, target,
                   alpha: float = 1.0, beta: float = 1.0,
                   n_params: int = 200, step: float = 1e-5,
                   seed: int = 0, mask=None) -> float:
    """Max relative error of analytic vs central-difference gradients.

    Dropout is disabled (deterministic forward). Relative error uses a
    floored denominator so vanishing components do not dominate.
    """
    rng = np.random.default_rng(seed)

    def loss_value():
        out, _ = model.forward(set_x, flat, mask)
        return polar_loss(out, target, alpha, beta, mask)

    out, cache = model.forward(set_x, flat, mask)
    _, dout, _ = polar_loss_grad(out, target, alpha, beta, mask)
    grads = model.backward(cache, dout)

    keys = sorted(model.params)
    sizes = [model.params[k].size for k in keys]
    total = sum(sizes)
    picks = rng.choice(total, size=min(n_params, total), replace=False)
    worst = 0.0
    for flat_i in sorted(int(v) for v in picks):
        k, off = _locate(keys, sizes, flat_i)
        param = model.params[k].reshape(-1)
        orig = param[off]
        param[off] = orig + step
        lp = loss_value()
        param[off] = orig - step
        lm = loss_value()
        param[off] = orig
        g_num = (lp - lm) / (2 * step)
        g_ana = grads[k].reshape(-1)[off]
        rel = abs(g_ana - g_num) / max(abs(g_ana) + abs(g_num), 1e-6)
        worst = max(worst, rel)
    return worst


def _locate(keys, sizes, flat_index):
    for k, s in zip(keys, sizes):
        if flat_index < s:
            return k, flat_index
        flat_index -= s
    raise IndexError(flat_index)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _model_payload(model: EquivariantModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "kind": "equivariant",
        "m_modes": model.m_modes,
        "n_g": model.n_g,
        "d": model.d,
        "activation": model.activation,
        "dropout": model.dropout,
        "stats": {
            "flat_mean": model.stats.flat_mean.tolist(),
            "flat_std": model.stats.flat_std.tolist(),
            "mag_mean": model.stats.mag_mean,
            "mag_std": model.stats.mag_std,
        },
        "weights": {k: v.tolist() for k, v in model.params.items()},
    }


def save_model(model: EquivariantModel, path) -> None:
    if model.stats is None:
        raise ModelError("refusing to save a model without fitted "
                         "normalization statistics")
    payload = _model_payload(model)
    payload["checksum"] = _checksum(payload)
    with open(path, "w") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_model(path) -> EquivariantModel:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise ModelIntegrityError(f"{path}: truncated or not a valid model "
                                  f"file")
    if doc.get("format") != MODEL_FORMAT:
        raise ModelIntegrityError(f"{path}: not a {MODEL_FORMAT} file")
    if doc.get("version") != MODEL_VERSION:
        raise ModelIntegrityError(f"{path}: unsupported version "
                                  f"{doc.get('version')}")
    stored = doc.pop("checksum", None)
    if stored != _checksum(doc):
        raise ModelIntegrityError(f"{path}: checksum mismatch (corrupt "
                                  f"model file)")
    stats = NormStats(flat_mean=np.array(doc["stats"]["flat_mean"]),
                      flat_std=np.array(doc["stats"]["flat_std"]),
                      mag_mean=doc["stats"]["mag_mean"],
                      mag_std=doc["stats"]["mag_std"])
    params = {k: np.array(v, dtype=float)
              for k, v in doc["weights"].items()}
    if set(params) != set(PARAM_SHAPES):
        raise ModelIntegrityError(f"{path}: unexpected weight set")
    return EquivariantModel(m_modes=doc["m_modes"], n_g=doc["n_g"],
                            d=doc["d"], activation=doc["activation"],
                            dropout=doc["dropout"], stats=stats,
                            params=params)


def _checksum(payload: dict) -> str:
    body = json.dumps({k: v for k, v in payload.items() if k != "checksum"},
                      sort_keys=True)
    return hashlib.sha256(body.encode()).hexdigest()


# ---------------------------------------------------------------------------
# plain feed-forward regressor (baseline machinery)
# ---------------------------------------------------------------------------

class DenseNet:
    """Small fully-connected regressor reusing the same layer math and
    optimizer; used by the measurement-driven baseline."""

    def __init__(self, dims: list[int], activation: str = "softplus",
                 seed: int = 0):
        if len(dims) < 2:
            raise ModelError("need at least input and output dims")
        self.dims = list(dims)
        self.activation = activation
        rng = np.random.default_rng(seed)
        self.params = {}
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            s = np.sqrt(2.0 / (a + b))
            self.params[f"w{i}"] = rng.normal(0.0, s, size=(a, b))
            self.params[f"b{i}"] = np.zeros(b)
        self.n_layers = len(dims) - 1

    def forward(self, x: np.ndarray):
        act, _ = ACTIVATIONS[self.activation]
        cache = [x]
        h = x
        for i in range(self.n_layers):
            z = h @ self.params[f"w{i}"] + self.params[f"b{i}"]
            cache.append(z)
            h = act(z) if i < self.n_layers - 1 else z
            cache.append(h)
        return h, cache

    def backward(self, cache, dout):
        _, dact = ACTIVATIONS[self.activation]
        grads = {}
        dh = dout
        for i in reversed(range(self.n_layers)):
            z = cache[1 + 2 * i]
            h_in = cache[2 * i]
            dz = dh if i == self.n_layers - 1 else dh * dact(z)
            grads[f"w{i}"] = h_in.T @ dz
            grads[f"b{i}"] = dz.sum(axis=0)
            dh = dz @ self.params[f"w{i}"].T
        return grads
