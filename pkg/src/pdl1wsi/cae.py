"""Convolutional autoencoder over 64x64 RGB tiles, trained from scratch.

Encoder: three stages of same-padded convolution + batch norm + ReLU +
2x2 max-pool (64 -> 32 -> 16 -> 8 spatial), then two fully connected
layers down to a 32-wide embedding. Decoder mirrors it: two fully
connected layers back up, then three stages of 2x nearest-neighbor
upsampling + same-padded convolution, the last squashed through a
logistic to [0,1]. Loss is mean squared reconstruction error; the
optimizer is Adam. Everything is plain numpy; backprop is hand-rolled
and validated against central finite differences on a reduced net.

Layout is NHWC; conv kernels are (k, k, c_in, c_out). All math runs in
the dtype of the weights (float32 by default, float64 for the gradient
check). Backward recomputes im2col matrices from cached layer inputs
instead of caching them, which keeps peak memory at batch 64 modest.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .util import read_exact

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8

WEIGHTS_MAGIC = b"PDL1CAE\x00"
WEIGHTS_VERSION = 1
EMBED_MAGIC = b"PDL1EMB\x00"
EMBED_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; carries epoch/batch context in the message."""


@dataclass(frozen=True)
class CaeArchitecture:
    input_size: int = 64
    channels: tuple[int, int, int] = (16, 32, 64)
    kernel_sizes: tuple[int, int, int] = (5, 3, 3)
    fc_hidden: int = 256
    embedding_dim: int = 32

    def __post_init__(self):
        if self.input_size % 8 != 0 or self.input_size < 8:
            raise ValueError("input_size must survive three 2x2 pools")
        if len(self.channels) != 3 or len(self.kernel_sizes) != 3:
            raise ValueError("exactly three convolution stages")
        if any(k % 2 == 0 or k < 1 for k in self.kernel_sizes):
            raise ValueError("kernels must be odd for same padding")
        if min(self.channels) < 1 or self.fc_hidden < 1 or self.embedding_dim < 1:
            raise ValueError("all widths must be positive")

    @property
    def bottleneck_size(self) -> int:
        return self.input_size // 8

    @property
    def flat_dim(self) -> int:
        return self.bottleneck_size ** 2 * self.channels[2]


REDUCED_ARCH = CaeArchitecture(
    input_size=8, channels=(2, 3, 4), kernel_sizes=(3, 3, 3), fc_hidden=8, embedding_dim=4
)


@dataclass
class CaeWeights:
    arch: CaeArchitecture
    params: dict[str, np.ndarray]
    running: dict[str, np.ndarray]
    seed: int

    def astype(self, dtype) -> "CaeWeights":
        return CaeWeights(
            arch=self.arch,
            params={k: v.astype(dtype) for k, v in self.params.items()},
            running={k: v.astype(dtype) for k, v in self.running.items()},
            seed=self.seed,
        )


def _param_specs(arch: CaeArchitecture) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical parameter order; also the serialization order."""
    c1, c2, c3 = arch.channels
    k1, k2, k3 = arch.kernel_sizes
    flat, hid, emb = arch.flat_dim, arch.fc_hidden, arch.embedding_dim
    return [
        ("enc_c1_w", (k1, k1, 3, c1)), ("enc_c1_b", (c1,)),
        ("enc_bn1_g", (c1,)), ("enc_bn1_b", (c1,)),
        ("enc_c2_w", (k2, k2, c1, c2)), ("enc_c2_b", (c2,)),
        ("enc_bn2_g", (c2,)), ("enc_bn2_b", (c2,)),
        ("enc_c3_w", (k3, k3, c2, c3)), ("enc_c3_b", (c3,)),
        ("enc_bn3_g", (c3,)), ("enc_bn3_b", (c3,)),
        ("enc_f1_w", (flat, hid)), ("enc_f1_b", (hid,)),
        ("enc_f2_w", (hid, emb)), ("enc_f2_b", (emb,)),
        ("dec_g1_w", (emb, hid)), ("dec_g1_b", (hid,)),
        ("dec_g2_w", (hid, flat)), ("dec_g2_b", (flat,)),
        ("dec_d1_w", (k3, k3, c3, c2)), ("dec_d1_b", (c2,)),
        ("dec_bn1_g", (c2,)), ("dec_bn1_b", (c2,)),
        ("dec_d2_w", (k2, k2, c2, c1)), ("dec_d2_b", (c1,)),
        ("dec_bn2_g", (c1,)), ("dec_bn2_b", (c1,)),
        ("dec_d3_w", (k1, k1, c1, 3)), ("dec_d3_b", (3,)),
    ]


def _running_specs(arch: CaeArchitecture) -> list[tuple[str, tuple[int, ...]]]:
    c1, c2, c3 = arch.channels
    return [
        ("enc_bn1_mean", (c1,)), ("enc_bn1_var", (c1,)),
        ("enc_bn2_mean", (c2,)), ("enc_bn2_var", (c2,)),
        ("enc_bn3_mean", (c3,)), ("enc_bn3_var", (c3,)),
        ("dec_bn1_mean", (c2,)), ("dec_bn1_var", (c2,)),
        ("dec_bn2_mean", (c1,)), ("dec_bn2_var", (c1,)),
    ]


def cae_init(seed: int, arch: CaeArchitecture = CaeArchitecture(), dtype=np.float32) -> CaeWeights:
    """Fan-in-scaled normal init; batch-norm scale 1 shift 0; deterministic."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _param_specs(arch):
        if name.endswith("_w"):
            fan_in = int(np.prod(shape[:-1]))
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        elif name.endswith("_g"):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    running = {}
    for name, shape in _running_specs(arch):
        running[name] = (np.ones if name.endswith("_var") else np.zeros)(shape, dtype=dtype)
    return CaeWeights(arch=arch, params=params, running=running, seed=seed)


# ---------------------------------------------------------------- layers

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(B,H,W,C) -> (B*H*W, k*k*C) same-padded sliding windows. Built with
    k*k bulk slice copies, which beats a strided gather by a wide margin."""
    bsz, h, w, c = x.shape
    p = k // 2
    padded = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = np.empty((bsz, h, w, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = padded[:, i:i + h, j:j + w, :]
    return cols.reshape(bsz * h * w, k * k * c)


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None,
                  keep_cols: list | None = None) -> np.ndarray:
    """Same-padded stride-1 convolution. Channel-expanding layers go through
    im2col (k*k*c_in columns); channel-shrinking layers instead run the GEMM
    on the padded grid first (k*k*c_out wide) and accumulate shifted views,
    whichever keeps the intermediate tensor smaller. Passing a list as
    keep_cols stashes the column matrix there for reuse in the backward
    pass (the dW GEMM needs the identical matrix)."""
    k, _, cin, cout = w.shape
    bsz, h, wd, _ = x.shape
    if cin <= cout:
        cols = _im2col(x, k)
        if keep_cols is not None:
            keep_cols.append(cols)
        out = (cols @ w.reshape(k * k * cin, cout)).reshape(bsz, h, wd, cout)
    else:
        p = k // 2
        padded = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        w2 = np.ascontiguousarray(w.transpose(2, 0, 1, 3)).reshape(cin, k * k * cout)
        per_px = (padded.reshape(-1, cin) @ w2).reshape(
            bsz, h + 2 * p, wd + 2 * p, k, k, cout
        )
        out = np.zeros((bsz, h, wd, cout), dtype=per_px.dtype)
        for i in range(k):
            for j in range(k):
                out += per_px[:, i:i + h, j:j + wd, i, j, :]
    if b is not None:
        out += b
    return out


def _conv_backward(x: np.ndarray, w: np.ndarray, dout: np.ndarray, need_dx: bool = True,
                   cols: np.ndarray | None = None):
    """dx is the same-padded convolution of dout with the kernel flipped
    spatially and swapped in/out; dW uses whichever of the two column
    layouts (k*k*c_in of x, or k*k*c_out of dout on the padded grid) is
    smaller. Everything funnels into large GEMMs."""
    k, _, cin, cout = w.shape
    bsz, h, wd, _ = x.shape
    p = k // 2
    db = dout.reshape(-1, cout).sum(axis=0)
    if cin <= cout:
        if cols is None:
            cols = _im2col(x, k)
        dw = (cols.T @ dout.reshape(-1, cout)).reshape(w.shape)
    else:
        padded = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        shifted = np.zeros((bsz, h + 2 * p, wd + 2 * p, k, k, cout), dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                shifted[:, i:i + h, j:j + wd, i, j, :] = dout
        dw2 = padded.reshape(-1, cin).T @ shifted.reshape(-1, k * k * cout)
        dw = np.ascontiguousarray(dw2.reshape(cin, k, k, cout).transpose(1, 2, 0, 3))
    dx = None
    if need_dx:
        w_flip = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
        dx = _conv_forward(dout, w_flip, None)
    return dx, dw, db


def _bn_forward(x, gamma, beta, running_mean, running_var, training, update_running):
    if training:
        mu = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
        if update_running:
            running_mean *= 1.0 - BN_MOMENTUM
            running_mean += BN_MOMENTUM * mu
            running_var *= 1.0 - BN_MOMENTUM
            running_var += BN_MOMENTUM * var
    else:
        mu, var = running_mean, running_var
    ivar = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu) * ivar
    return gamma * xhat + beta, (xhat, ivar)


def _bn_backward(bn_cache, gamma, dout, training):
    xhat, ivar = bn_cache
    dgamma = (dout * xhat).sum(axis=(0, 1, 2))
    dbeta = dout.sum(axis=(0, 1, 2))
    dxhat = dout * gamma
    if training:
        dx = ivar * (
            dxhat
            - dxhat.mean(axis=(0, 1, 2))
            - xhat * (dxhat * xhat).mean(axis=(0, 1, 2))
        )
    else:
        dx = dxhat * ivar
    return dx, dgamma, dbeta


def _pool_forward(x):
    bsz, h, w, c = x.shape
    xw = x.reshape(bsz, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    xw = np.ascontiguousarray(xw).reshape(bsz, h // 2, w // 2, c, 4)
    idx = xw.argmax(axis=-1)
    out = np.take_along_axis(xw, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(dout, idx, in_shape, dtype):
    bsz, h, w, c = in_shape
    dxw = np.zeros((bsz, h // 2, w // 2, c, 4), dtype=dtype)
    np.put_along_axis(dxw, idx[..., None], dout[..., None], axis=-1)
    dx = dxw.reshape(bsz, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(dx).reshape(bsz, h, w, c)


def _upsample(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _upsample_backward(dout):
    bsz, h, w, c = dout.shape
    return dout.reshape(bsz, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ------------------------------------------------------------- network

def _forward(weights: CaeWeights, x: np.ndarray, training: bool, update_running: bool = False,
             linear: bool = False):
    """Full pass; returns (recon, embedding, cache) with cache consumable by
    _backward. Inference mode (training=False) normalizes with running stats
    and is a pure deterministic function of weights and input. linear=True
    swaps every nonlinearity for the identity and bypasses batch norm, which
    makes the loss exactly quadratic in each single parameter; the gradient
    check uses it to pin truncation-free finite differences."""
    p, r, arch = weights.params, weights.running, weights.arch
    act = (lambda z: z) if linear else (lambda z: np.maximum(z, 0.0))
    cache = {"linear": linear}

    h = x
    for i in (1, 2, 3):
        kept: list = []
        z = _conv_forward(h, p[f"enc_c{i}_w"], p[f"enc_c{i}_b"], keep_cols=kept)
        if linear:
            bn, bn_cache = z, None
        else:
            bn, bn_cache = _bn_forward(
                z, p[f"enc_bn{i}_g"], p[f"enc_bn{i}_b"],
                r[f"enc_bn{i}_mean"], r[f"enc_bn{i}_var"], training, update_running,
            )
        a = act(bn)
        pooled, idx = _pool_forward(a)
        cache[f"enc{i}"] = (h, kept[0] if kept else None, bn_cache, bn, a.shape, idx)
        h = pooled

    pooled_shape = h.shape
    flat = h.reshape(h.shape[0], -1)
    f1 = flat @ p["enc_f1_w"] + p["enc_f1_b"]
    a1 = act(f1)
    emb = a1 @ p["enc_f2_w"] + p["enc_f2_b"]
    cache["enc_fc"] = (pooled_shape, flat, f1, a1)
    cache["emb"] = emb

    g1 = emb @ p["dec_g1_w"] + p["dec_g1_b"]
    ag1 = act(g1)
    g2 = ag1 @ p["dec_g2_w"] + p["dec_g2_b"]
    ag2 = act(g2)
    cache["dec_fc"] = (g1, ag1, g2)

    s = arch.bottleneck_size
    h = ag2.reshape(-1, s, s, arch.channels[2])
    for i in (1, 2):
        up = _upsample(h)
        z = _conv_forward(up, p[f"dec_d{i}_w"], p[f"dec_d{i}_b"])
        if linear:
            bn, bn_cache = z, None
        else:
            bn, bn_cache = _bn_forward(
                z, p[f"dec_bn{i}_g"], p[f"dec_bn{i}_b"],
                r[f"dec_bn{i}_mean"], r[f"dec_bn{i}_var"], training, update_running,
            )
        a = act(bn)
        cache[f"dec{i}"] = (up, bn_cache, bn)
        h = a

    up = _upsample(h)
    z = _conv_forward(up, p["dec_d3_w"], p["dec_d3_b"])
    recon = z if linear else _sigmoid(z)
    cache["dec3"] = (up, recon)
    return recon, emb, cache


def _backward(weights: CaeWeights, cache: dict, target: np.ndarray, training: bool = True):
    """Gradients of mean squared reconstruction error wrt every parameter.
    In the linear variant batch-norm scale/shift fall out of the loss, so
    their gradients are exactly zero."""
    p = weights.params
    linear = cache["linear"]
    grads = {}

    def relu_grad(d, pre):
        return d if linear else d * (pre > 0.0)

    up3, recon = cache["dec3"]
    dz = (2.0 / recon.size) * (recon - target)
    if not linear:
        dz = dz * recon * (1.0 - recon)
    dup, grads["dec_d3_w"], grads["dec_d3_b"] = _conv_backward(up3, p["dec_d3_w"], dz)
    dh = _upsample_backward(dup)

    for i in (2, 1):
        up, bn_cache, bn = cache[f"dec{i}"]
        da = relu_grad(dh, bn)
        if linear:
            dz = da
            grads[f"dec_bn{i}_g"] = np.zeros_like(p[f"dec_bn{i}_g"])
            grads[f"dec_bn{i}_b"] = np.zeros_like(p[f"dec_bn{i}_b"])
        else:
            dz, grads[f"dec_bn{i}_g"], grads[f"dec_bn{i}_b"] = _bn_backward(
                bn_cache, p[f"dec_bn{i}_g"], da, training
            )
        dup, grads[f"dec_d{i}_w"], grads[f"dec_d{i}_b"] = _conv_backward(up, p[f"dec_d{i}_w"], dz)
        dh = _upsample_backward(dup)

    dag2 = dh.reshape(dh.shape[0], -1)
    g1, ag1, g2 = cache["dec_fc"]
    dg2 = relu_grad(dag2, g2)
    grads["dec_g2_w"] = ag1.T @ dg2
    grads["dec_g2_b"] = dg2.sum(axis=0)
    dag1 = dg2 @ p["dec_g2_w"].T
    dg1 = relu_grad(dag1, g1)
    emb = cache["emb"]
    grads["dec_g1_w"] = emb.T @ dg1
    grads["dec_g1_b"] = dg1.sum(axis=0)
    demb = dg1 @ p["dec_g1_w"].T

    pooled_shape, flat, f1, a1 = cache["enc_fc"]
    grads["enc_f2_w"] = a1.T @ demb
    grads["enc_f2_b"] = demb.sum(axis=0)
    da1 = demb @ p["enc_f2_w"].T
    df1 = relu_grad(da1, f1)
    grads["enc_f1_w"] = flat.T @ df1
    grads["enc_f1_b"] = df1.sum(axis=0)
    dh = (df1 @ p["enc_f1_w"].T).reshape(pooled_shape)

    for i in (3, 2, 1):
        x_in, cols, bn_cache, bn, a_shape, idx = cache[f"enc{i}"]
        da = _pool_backward(dh, idx, a_shape, dh.dtype)
        da = relu_grad(da, bn)
        if linear:
            dz = da
            grads[f"enc_bn{i}_g"] = np.zeros_like(p[f"enc_bn{i}_g"])
            grads[f"enc_bn{i}_b"] = np.zeros_like(p[f"enc_bn{i}_b"])
        else:
            dz, grads[f"enc_bn{i}_g"], grads[f"enc_bn{i}_b"] = _bn_backward(
                bn_cache, p[f"enc_bn{i}_g"], da, training
            )
        # the input image needs no gradient, so skip dx on the first conv
        dh, grads[f"enc_c{i}_w"], grads[f"enc_c{i}_b"] = _conv_backward(
            x_in, p[f"enc_c{i}_w"], dz, need_dx=(i != 1), cols=cols
        )

    return grads


def _loss(recon: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean((recon - target) ** 2))


def _as_batch(tiles: np.ndarray, arch: CaeArchitecture, dtype) -> np.ndarray:
    """Accept (N,s,s,3) uint8 or float in [0,1]; return a float batch."""
    t = np.asarray(tiles)
    if t.ndim == 3:
        t = t[None]
    s = arch.input_size
    if t.ndim != 4 or t.shape[1:] != (s, s, 3):
        raise ValueError(f"expected tiles shaped (n, {s}, {s}, 3), got {t.shape}")
    if t.dtype == np.uint8:
        return t.astype(dtype) / dtype(255.0)
    t = t.astype(dtype, copy=False)
    if t.size and (t.min() < 0.0 or t.max() > 1.0):
        raise ValueError("float tiles must lie in [0, 1]")
    return t


def cae_forward(weights: CaeWeights, tiles: np.ndarray, training: bool = False):
    """Reconstruction and embedding for a batch (inference mode by default)."""
    dtype = weights.params["enc_c1_w"].dtype.type
    x = _as_batch(tiles, weights.arch, dtype)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    recon, emb, _ = _forward(weights, x, training=training, update_running=False)
    return recon, emb


def encode(weights: CaeWeights, tiles: np.ndarray) -> np.ndarray:
    _, emb = cae_forward(weights, tiles, training=False)
    return emb


# ------------------------------------------------------------- training

def cae_train(
    tiles: np.ndarray,
    epochs: int = 20,
    lr: float = 0.001,
    batch_size: int = 64,
    seed: int = 0,
    arch: CaeArchitecture = CaeArchitecture(),
    weights: CaeWeights | None = None,
    log=None,
) -> tuple[CaeWeights, list[float]]:
    """Train on a tile stack, return (weights, mean loss per epoch).

    Init, shuffling, and batch order are all driven by `seed`, so runs are
    reproducible. A non-finite batch loss aborts immediately with the
    epoch/batch of the blow-up rather than training onward on garbage.
    """
    if weights is None:
        weights = cae_init(seed, arch=arch)
    else:
        arch = weights.arch
    dtype = weights.params["enc_c1_w"].dtype.type
    x_all = _as_batch(tiles, arch, dtype)
    n = x_all.shape[0]
    if n == 0:
        raise ValueError("no tiles to train on")
    if epochs < 1 or batch_size < 1:
        raise ValueError("epochs and batch_size must be positive")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    m = {k: np.zeros_like(v) for k, v in weights.params.items()}
    v = {k: np.zeros_like(val) for k, val in weights.params.items()}
    t = 0
    epoch_losses = []

    for epoch in range(epochs):
        order = rng.permutation(n)
        running_loss = 0.0
        for start in range(0, n, batch_size):
            batch = x_all[order[start:start + batch_size]]
            recon, _, cache = _forward(weights, batch, training=True, update_running=True)
            loss = _loss(recon, batch)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss} at epoch {epoch + 1}, "
                    f"batch starting at sample {start} (lr={lr})"
                )
            running_loss += loss * batch.shape[0]
            grads = _backward(weights, cache, batch)
            t += 1
            bc1 = 1.0 - ADAM_BETA1 ** t
            bc2 = 1.0 - ADAM_BETA2 ** t
            for key, g in grads.items():
                g = g.astype(dtype, copy=False)
                m[key] = ADAM_BETA1 * m[key] + (1.0 - ADAM_BETA1) * g
                v[key] = ADAM_BETA2 * v[key] + (1.0 - ADAM_BETA2) * g * g
                weights.params[key] -= (
                    dtype(lr) * (m[key] / bc1) / (np.sqrt(v[key] / bc2) + dtype(ADAM_EPS))
                )
        epoch_losses.append(running_loss / n)
        if log is not None:
            log(f"epoch {epoch + 1}/{epochs}: loss {epoch_losses[-1]:.6f}")
    return weights, epoch_losses


def gradient_check(
    seed: int = 0,
    arch: CaeArchitecture = REDUCED_ARCH,
    weights: CaeWeights | None = None,
    batch: np.ndarray | None = None,
    step: float = 1e-4,
    linear: bool = False,
) -> float:
    """Max relative error between backprop and central differences, checked
    for every parameter scalar. Runs the training-mode forward (batch-stat
    normalization) without touching running stats, so the loss is a pure
    function of the parameters. Everything in float64. With linear=True the
    net drops every nonlinearity and batch norm; the loss is then quadratic
    in each parameter and central differences are exact up to rounding."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    if weights is None:
        weights = cae_init(seed, arch=arch, dtype=np.float64)
    else:
        weights = weights.astype(np.float64)
        arch = weights.arch
    if batch is None:
        batch = rng.uniform(0.02, 0.98, size=(2, arch.input_size, arch.input_size, 3))
    x = _as_batch(batch, arch, np.float64)

    def loss_now() -> float:
        recon = _forward(weights, x, training=True, update_running=False, linear=linear)[0]
        return _loss(recon, x)

    recon, _, cache = _forward(weights, x, training=True, update_running=False, linear=linear)
    grads = _backward(weights, cache, x)

    worst = 0.0
    for name in weights.params:
        flat = weights.params[name].reshape(-1)
        analytic = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = loss_now()
            flat[i] = orig - step
            lm = loss_now()
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * step)
            err = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def encode_all(weights: CaeWeights, tiles: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Embed every tile in order; inference mode, deterministic. Returns
    (n, embedding_dim) float64. Raises on an empty stack: no region of
    interest means there is nothing to embed."""
    t = np.asarray(tiles)
    if t.ndim == 3:
        t = t[None]
    if t.shape[0] == 0:
        raise ValueError("no tiles to embed (empty region of interest)")
    out = np.empty((t.shape[0], weights.arch.embedding_dim), dtype=np.float64)
    for start in range(0, t.shape[0], batch_size):
        out[start:start + batch_size] = encode(weights, t[start:start + batch_size])
    return out


# ------------------------------------------------------------ weight io

def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode("ascii")
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_tensor(fh, path) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<H", read_exact(fh, 2, path))
    name = read_exact(fh, nlen, path).decode("ascii")
    (ndim,) = struct.unpack("<B", read_exact(fh, 1, path))
    shape = tuple(struct.unpack("<I", read_exact(fh, 4, path))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = read_exact(fh, 4 * count, path)
    return name, np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)


def save_weights(weights: CaeWeights, path) -> None:
    """Versioned binary: magic, format version, architecture descriptor,
    seed, then each tensor (name, shape, little-endian float32 data) in
    the canonical parameter order followed by batch-norm running stats."""
    arch = weights.arch
    with open(Path(path), "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", WEIGHTS_VERSION))
        fh.write(struct.pack(
            "<9I",
            arch.input_size, *arch.channels, *arch.kernel_sizes,
            arch.fc_hidden, arch.embedding_dim,
        ))
        fh.write(struct.pack("<q", weights.seed))
        names = [n for n, _ in _param_specs(arch)] + [n for n, _ in _running_specs(arch)]
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            src = weights.params if name in weights.params else weights.running
            _write_tensor(fh, name, src[name])


def load_weights(path) -> CaeWeights:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(WEIGHTS_MAGIC))
        if magic != WEIGHTS_MAGIC:
            raise ValueError(f"{path}: not a weight file (bad magic)")
        (version,) = struct.unpack("<I", read_exact(fh, 4, path))
        if version != WEIGHTS_VERSION:
            raise ValueError(f"{path}: unsupported weight format version {version}")
        vals = struct.unpack("<9I", read_exact(fh, 36, path))
        arch = CaeArchitecture(
            input_size=vals[0], channels=tuple(vals[1:4]),
            kernel_sizes=tuple(vals[4:7]), fc_hidden=vals[7], embedding_dim=vals[8],
        )
        (seed,) = struct.unpack("<q", read_exact(fh, 8, path))
        (count,) = struct.unpack("<I", read_exact(fh, 4, path))
        expected = dict(_param_specs(arch) + _running_specs(arch))
        if count != len(expected):
            raise ValueError(f"{path}: expected {len(expected)} tensors, header says {count}")
        params, running = {}, {}
        running_names = {n for n, _ in _running_specs(arch)}
        for _ in range(count):
            name, arr = _read_tensor(fh, path)
            if name not in expected:
                raise ValueError(f"{path}: unexpected tensor {name!r}")
            if arr.shape != expected[name]:
                raise ValueError(
                    f"{path}: tensor {name!r} has shape {arr.shape}, expected {expected[name]}"
                )
            (running if name in running_names else params)[name] = arr
        if len(params) + len(running) != len(expected):
            raise ValueError(f"{path}: duplicate tensor names")
    return CaeWeights(arch=arch, params=params, running=running, seed=int(seed))


# --------------------------------------------------------- embedding io

def write_embeddings(path, slide_id: str, embeddings: np.ndarray) -> None:
    """Binary: magic, version, slide id, tile count, embedding width, then
    row-major little-endian float32 values (one row per tile, tile order
    preserved from the region-of-interest scan)."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2:
        raise ValueError(f"embeddings must be 2-d, got shape {emb.shape}")
    sid = slide_id.encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(EMBED_MAGIC)
        fh.write(struct.pack("<I", EMBED_VERSION))
        fh.write(struct.pack("<H", len(sid)))
        fh.write(sid)
        fh.write(struct.pack("<II", emb.shape[0], emb.shape[1]))
        fh.write(np.ascontiguousarray(emb, dtype="<f4").tobytes())


def read_embeddings(path) -> tuple[str, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(EMBED_MAGIC))
        if magic != EMBED_MAGIC:
            raise ValueError(f"{path}: not an embedding file (bad magic)")
        (version,) = struct.unpack("<I", read_exact(fh, 4, path))
        if version != EMBED_VERSION:
            raise ValueError(f"{path}: unsupported embedding format version {version}")
        (nlen,) = struct.unpack("<H", read_exact(fh, 2, path))
        slide_id = read_exact(fh, nlen, path).decode("utf-8")
        n, dim = struct.unpack("<II", read_exact(fh, 8, path))
        data = read_exact(fh, 4 * n * dim, path)
        emb = np.frombuffer(data, dtype="<f4").reshape(n, dim).astype(np.float64)
    return slide_id, emb
