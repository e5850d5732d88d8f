"""Dual-branch point-wise mask network: forward, loss, hand-derived gradients.

Two input sets (region inliers and neighbor candidates) are encoded by
separate point-wise MLP branches, max-pooled into one global vector, and two
decoder branches score every point: the inlier branch emits removal
probabilities, the neighbor branch admission probabilities. Gradients are
derived by hand for this fixed graph; there is no autodiff involved.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .simulate import load_dataset

PROB_EPS = 1e-7

FULL_ENC_WIDTHS = (64, 64, 64, 128, 512)
FULL_DEC_WIDTHS = (256, 128, 1)
DESK_ENC_WIDTHS = (32, 32, 32, 64, 128)
DESK_DEC_WIDTHS = (64, 32, 1)


class CheckpointError(ValueError):
    """A parameter file is malformed or does not match expectations."""


@dataclass
class BranchParams:
    enc_w: list[np.ndarray]
    enc_b: list[np.ndarray]
    dec_w: list[np.ndarray]
    dec_b: list[np.ndarray]


@dataclass
class NetworkParams:
    inlier: BranchParams
    neighbor: BranchParams
    enc_widths: tuple[int, ...]
    dec_widths: tuple[int, ...]
    skip_layer: int          # 1-based encoder layer whose output feeds the decoder
    n_features: int
    i_size: int
    j_size: int
    feature_columns: tuple[int, ...]
    normalize: bool = True

    @property
    def global_width(self) -> int:
        return self.enc_widths[-1]

    @property
    def dtype(self):
        return self.inlier.enc_w[0].dtype

    def astype(self, dtype) -> "NetworkParams":
        def cast(bp: BranchParams) -> BranchParams:
            return BranchParams([w.astype(dtype) for w in bp.enc_w],
                                [b.astype(dtype) for b in bp.enc_b],
                                [w.astype(dtype) for w in bp.dec_w],
                                [b.astype(dtype) for b in bp.dec_b])
        return replace(self, inlier=cast(self.inlier), neighbor=cast(self.neighbor))


def param_tensors(params: NetworkParams):
    """(name, array) pairs in fixed declaration order."""
    out = []
    for branch_name, bp in (("inlier", params.inlier), ("neighbor", params.neighbor)):
        for l, (w, b) in enumerate(zip(bp.enc_w, bp.enc_b), start=1):
            out.append((f"{branch_name}.enc{l}.w", w))
            out.append((f"{branch_name}.enc{l}.b", b))
        for l, (w, b) in enumerate(zip(bp.dec_w, bp.dec_b), start=1):
            out.append((f"{branch_name}.dec{l}.w", w))
            out.append((f"{branch_name}.dec{l}.b", b))
    return out


def _glorot(rng, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def init_params(enc_widths=FULL_ENC_WIDTHS, dec_widths=FULL_DEC_WIDTHS,
                skip_layer: int = 2, n_features: int = 13, i_size: int = 512,
                j_size: int = 512, feature_columns=None, normalize: bool = True,
                seed: int = 0, dtype=np.float32) -> NetworkParams:
    """Seeded uniform (Glorot-range) weights, zero biases."""
    enc_widths = tuple(int(w) for w in enc_widths)
    dec_widths = tuple(int(w) for w in dec_widths)
    if dec_widths[-1] != 1:
        raise ValueError("last decoder width must be 1 (per-point logit)")
    if not 1 <= skip_layer <= len(enc_widths):
        raise ValueError(f"skip_layer must be in 1..{len(enc_widths)}")
    if feature_columns is None:
        feature_columns = tuple(range(n_features))
    feature_columns = tuple(int(c) for c in feature_columns)
    if len(feature_columns) != n_features:
        raise ValueError("feature_columns length must equal n_features")
    rng = np.random.default_rng(seed)
    dec_in = enc_widths[skip_layer - 1] + 2 * enc_widths[-1]

    def make_branch() -> BranchParams:
        enc_w, enc_b, dec_w, dec_b = [], [], [], []
        fan = n_features
        for w in enc_widths:
            enc_w.append(_glorot(rng, fan, w, dtype))
            enc_b.append(np.zeros(w, dtype=dtype))
            fan = w
        fan = dec_in
        for w in dec_widths:
            dec_w.append(_glorot(rng, fan, w, dtype))
            dec_b.append(np.zeros(w, dtype=dtype))
            fan = w
        return BranchParams(enc_w, enc_b, dec_w, dec_b)

    return NetworkParams(make_branch(), make_branch(), enc_widths, dec_widths,
                         skip_layer, n_features, i_size, j_size, feature_columns,
                         normalize)


def zeros_like_params(params: NetworkParams) -> NetworkParams:
    def z(bp: BranchParams) -> BranchParams:
        return BranchParams([np.zeros_like(w) for w in bp.enc_w],
                            [np.zeros_like(b) for b in bp.enc_b],
                            [np.zeros_like(w) for w in bp.dec_w],
                            [np.zeros_like(b) for b in bp.dec_b])
    return replace(params, inlier=z(params.inlier), neighbor=z(params.neighbor))


@dataclass
class MaskPrediction:
    """Per-point probabilities, clamped into (0, 1)."""

    remove_prob: np.ndarray  # (I,)
    add_prob: np.ndarray     # (J,)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _pointwise(h: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Shared linear layer over all points: one flat matmul instead of a
    batched one (substantially faster through BLAS)."""
    batch, n, din = h.shape
    out = h.reshape(batch * n, din) @ w
    out += b
    return out.reshape(batch, n, w.shape[1])


def _encode(bp: BranchParams, x: np.ndarray):
    """Point-wise MLP with rectifier activations. x: (B, n, F)."""
    zs, acts = [], [x]
    h = x
    for w, b in zip(bp.enc_w, bp.enc_b):
        z = _pointwise(h, w, b)
        h = np.maximum(z, 0)
        zs.append(z)
        acts.append(h)
    return zs, acts


def _decode(bp: BranchParams, skip: np.ndarray, global_vec: np.ndarray):
    """Per-point decoder: skip features concatenated with the global vector."""
    n = skip.shape[1]
    tiled = np.broadcast_to(global_vec[:, None, :], (skip.shape[0], n, global_vec.shape[1]))
    d0 = np.concatenate([skip, tiled], axis=2)
    zs, acts = [], [d0]
    h = d0
    last = len(bp.dec_w) - 1
    for l, (w, b) in enumerate(zip(bp.dec_w, bp.dec_b)):
        z = _pointwise(h, w, b)
        h = np.maximum(z, 0) if l < last else z
        zs.append(z)
        acts.append(h)
    return zs, acts, zs[-1][..., 0]  # logits (B, n)


def forward_batch(params: NetworkParams, xi: np.ndarray, xn: np.ndarray,
                  want_cache: bool = False):
    """Forward pass over a batch. xi: (B, I, F), xn: (B, J, F).

    Returns (remove_prob (B, I), add_prob (B, J)[, cache]).
    """
    dtype = params.dtype
    xi = np.asarray(xi, dtype=dtype)
    xn = np.asarray(xn, dtype=dtype)
    if xi.ndim != 3 or xn.ndim != 3 or xi.shape[2] != params.n_features \
            or xn.shape[2] != params.n_features or xi.shape[0] != xn.shape[0]:
        raise ValueError(
            f"expected (B, n, {params.n_features}) inputs, got {xi.shape} and {xn.shape}")
    zi, ai = _encode(params.inlier, xi)
    zn, an = _encode(params.neighbor, xn)
    gi = ai[-1].max(axis=1)
    argi = ai[-1].argmax(axis=1)
    gn = an[-1].max(axis=1)
    argn = an[-1].argmax(axis=1)
    global_vec = np.concatenate([gi, gn], axis=1)
    skip_i = ai[params.skip_layer]
    skip_n = an[params.skip_layer]
    ui, di, logit_i = _decode(params.inlier, skip_i, global_vec)
    un, dn, logit_n = _decode(params.neighbor, skip_n, global_vec)
    p_remove = np.clip(_sigmoid(logit_i), PROB_EPS, 1.0 - PROB_EPS)
    p_add = np.clip(_sigmoid(logit_n), PROB_EPS, 1.0 - PROB_EPS)
    if not want_cache:
        return p_remove, p_add
    cache = {
        "zi": zi, "ai": ai, "zn": zn, "an": an,
        "argi": argi, "argn": argn,
        "ui": ui, "di": di, "un": un, "dn": dn,
        "logit_i": logit_i, "logit_n": logit_n,
        "p_remove": p_remove, "p_add": p_add,
        "raw_i": _sigmoid(logit_i), "raw_n": _sigmoid(logit_n),
    }
    return p_remove, p_add, cache


def forward(params: NetworkParams, inliers: np.ndarray, neighbors: np.ndarray,
            want_cache: bool = False):
    """Single-sample forward: inliers (I, F), neighbors (J, F) -> MaskPrediction."""
    out = forward_batch(params, inliers[None], neighbors[None], want_cache=want_cache)
    if want_cache:
        p_remove, p_add, cache = out
        return MaskPrediction(p_remove[0], p_add[0]), cache
    p_remove, p_add = out
    return MaskPrediction(p_remove[0], p_add[0])


def _bce_batch(p: np.ndarray, target: np.ndarray) -> float:
    """Mean-over-points cross entropy, averaged over the batch (float64)."""
    p = p.astype(np.float64)
    t = target.astype(np.float64)
    per_point = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
    return float(per_point.mean(axis=1).mean())


def bce_loss(pred: MaskPrediction, remove_target: np.ndarray,
             add_target: np.ndarray) -> float:
    """Sum of the mean removal BCE and the mean addition BCE for one sample."""
    return (_bce_batch(pred.remove_prob[None], np.asarray(remove_target)[None])
            + _bce_batch(pred.add_prob[None], np.asarray(add_target)[None]))


def batch_loss(p_remove: np.ndarray, p_add: np.ndarray, remove_t: np.ndarray,
               add_t: np.ndarray) -> float:
    return _bce_batch(p_remove, remove_t) + _bce_batch(p_add, add_t)


def backward(params: NetworkParams, cache: dict, remove_t: np.ndarray,
             add_t: np.ndarray) -> NetworkParams:
    """Gradients of the batch loss for every parameter.

    Max-pool routes each global feature's gradient to the argmax point (first
    index on ties); clamped output probabilities receive zero gradient.
    """
    grads = zeros_like_params(params)
    dtype = params.dtype
    batch = cache["p_remove"].shape[0]
    g_width = params.global_width

    def head_grad(p_clamped, p_raw, target, n):
        d = (p_clamped.astype(np.float64) - target.astype(np.float64)) / (n * batch)
        clamped = (p_raw < PROB_EPS) | (p_raw > 1.0 - PROB_EPS)
        d[clamped] = 0.0
        return d.astype(dtype)[..., None]  # (B, n, 1)

    dlogit_i = head_grad(cache["p_remove"], cache["raw_i"], np.asarray(remove_t),
                         cache["p_remove"].shape[1])
    dlogit_n = head_grad(cache["p_add"], cache["raw_n"], np.asarray(add_t),
                         cache["p_add"].shape[1])

    def layer_grads(inp, dz, w):
        """(dW, db, d_input) for one shared linear layer via flat matmuls."""
        batch_n = inp.shape[0] * inp.shape[1]
        flat_in = inp.reshape(batch_n, -1)
        flat_dz = dz.reshape(batch_n, -1)
        dw = flat_in.T @ flat_dz
        db = flat_dz.sum(axis=0)
        dinp = (flat_dz @ w.T).reshape(inp.shape)
        return dw.astype(dtype), db.astype(dtype), dinp

    def decoder_backward(bp, gbp, us, ds, dlogit):
        """Returns (d_skip, d_global_contribution)."""
        last = len(bp.dec_w) - 1
        dh = dlogit
        for l in range(last, -1, -1):
            dz = dh if l == last else dh * (us[l] > 0)
            dw, db, dh = layer_grads(ds[l], dz, bp.dec_w[l])
            gbp.dec_w[l] += dw
            gbp.dec_b[l] += db
        skip_width = ds[0].shape[2] - 2 * g_width
        d_skip = dh[..., :skip_width]
        d_global = dh[..., skip_width:].sum(axis=1)  # (B, 2G)
        return d_skip, d_global

    d_skip_i, d_glob_i = decoder_backward(params.inlier, grads.inlier,
                                          cache["ui"], cache["di"], dlogit_i)
    d_skip_n, d_glob_n = decoder_backward(params.neighbor, grads.neighbor,
                                          cache["un"], cache["dn"], dlogit_n)
    d_global = d_glob_i + d_glob_n
    dgi = d_global[:, :g_width]
    dgn = d_global[:, g_width:]

    def encoder_backward(bp, gbp, zs, acts, arg, dg, d_skip):
        dtop = np.zeros_like(acts[-1])
        np.put_along_axis(dtop, arg[:, None, :], dg[:, None, :], axis=1)
        dh = dtop
        for l in range(len(bp.enc_w) - 1, -1, -1):
            if l + 1 == params.skip_layer:
                dh = dh + d_skip
            dz = dh * (zs[l] > 0)
            dw, db, dh = layer_grads(acts[l], dz, bp.enc_w[l])
            gbp.enc_w[l] += dw
            gbp.enc_b[l] += db

    encoder_backward(params.inlier, grads.inlier, cache["zi"], cache["ai"],
                     cache["argi"], dgi, d_skip_i)
    encoder_backward(params.neighbor, grads.neighbor, cache["zn"], cache["an"],
                     cache["argn"], dgn, d_skip_n)
    return grads


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: NetworkParams, lr: float = 0.001) -> "AdamState":
        tensors = [t for _, t in param_tensors(params)]
        return cls([np.zeros_like(t) for t in tensors],
                   [np.zeros_like(t) for t in tensors], 0, lr)


def adam_step(state: AdamState, params: NetworkParams, grads: NetworkParams) -> None:
    """Standard bias-corrected update, in place on the parameter arrays."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, ((_, p), (_, g)) in enumerate(zip(param_tensors(params), param_tensors(grads))):
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


@dataclass
class TrainConfig:
    enc_widths: tuple[int, ...] = FULL_ENC_WIDTHS
    dec_widths: tuple[int, ...] = FULL_DEC_WIDTHS
    skip_layer: int = 2
    lr: float = 0.001
    batch_size: int = 100
    epochs: int = 40
    seed: int = 0
    checkpoint: str | None = None
    feature_columns: tuple[int, ...] | None = None
    normalize: bool = True
    expect_i: int | None = None
    expect_j: int | None = None


def train(dataset_path, cfg: TrainConfig):
    """Train on a simulated dataset; returns (params, per-epoch mean losses)."""
    ds = load_dataset(dataset_path)
    cols = cfg.feature_columns if cfg.feature_columns is not None else tuple(range(ds.n_features))
    if len(cols) != ds.n_features:
        raise ValueError(
            f"feature columns ({len(cols)}) do not match dataset features ({ds.n_features})")
    if cfg.expect_i is not None and cfg.expect_i != ds.i_size:
        raise ValueError(f"dataset inlier size {ds.i_size} != configured {cfg.expect_i}")
    if cfg.expect_j is not None and cfg.expect_j != ds.j_size:
        raise ValueError(f"dataset neighbor size {ds.j_size} != configured {cfg.expect_j}")
    params = init_params(cfg.enc_widths, cfg.dec_widths, cfg.skip_layer,
                         n_features=ds.n_features, i_size=ds.i_size, j_size=ds.j_size,
                         feature_columns=cols, normalize=cfg.normalize, seed=cfg.seed)
    adam = AdamState.init(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    n = len(ds)
    losses = []
    for _epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            xi = ds.inlier_features[sel]
            xn = ds.neighbor_features[sel]
            rt = ds.remove_target[sel]
            at = ds.add_target[sel]
            p_remove, p_add, cache = forward_batch(params, xi, xn, want_cache=True)
            loss = batch_loss(p_remove, p_add, rt, at)
            grads = backward(params, cache, rt, at)
            adam_step(adam, params, grads)
            total += loss * len(sel)
        losses.append(total / n)
        if cfg.checkpoint:
            save_params(params, cfg.checkpoint)
    return params, losses


class Predictor:
    """Callable mask scorer backed by trained parameters."""

    def __init__(self, params: NetworkParams):
        self.params = params

    def __call__(self, inlier_feats: np.ndarray, neighbor_feats: np.ndarray):
        p_remove, p_add = forward_batch(self.params, inlier_feats[None],
                                        neighbor_feats[None])
        return p_remove[0].astype(np.float64), p_add[0].astype(np.float64)


CHECKPOINT_MAGIC = b"RGNW"
CHECKPOINT_VERSION = 1


def save_params(params: NetworkParams, path) -> None:
    """Self-describing binary checkpoint, float32 tensors in declaration order."""
    header = [CHECKPOINT_VERSION, params.n_features, params.i_size, params.j_size,
              len(params.enc_widths), *params.enc_widths,
              len(params.dec_widths), *params.dec_widths,
              params.skip_layer,
              len(params.feature_columns), *params.feature_columns,
              1 if params.normalize else 0]
    with open(Path(path), "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack(f"<{len(header)}I", *header))
        for _, tensor in param_tensors(params):
            fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def load_params(path) -> NetworkParams:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a network checkpoint")
    off = 4

    def read_u32(count=1):
        nonlocal off
        if off + 4 * count > len(raw):
            raise CheckpointError(f"{path}: truncated header")
        vals = struct.unpack_from(f"<{count}I", raw, off)
        off += 4 * count
        return vals if count > 1 else vals[0]

    version = read_u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    n_features, i_size, j_size = read_u32(3)
    n_enc = read_u32()
    enc_widths = read_u32(n_enc) if n_enc > 1 else (read_u32(),)
    n_dec = read_u32()
    dec_widths = read_u32(n_dec) if n_dec > 1 else (read_u32(),)
    skip_layer = read_u32()
    n_cols = read_u32()
    cols = read_u32(n_cols) if n_cols > 1 else (read_u32(),)
    normalize = bool(read_u32())
    params = init_params(enc_widths, dec_widths, skip_layer, n_features=n_features,
                         i_size=i_size, j_size=j_size, feature_columns=cols,
                         normalize=normalize, seed=0)
    for _, tensor in param_tensors(params):
        nbytes = tensor.size * 4
        if off + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated tensor data")
        tensor[...] = np.frombuffer(raw, "<f4", tensor.size, off).reshape(tensor.shape)
        off += nbytes
    if off != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after tensor data")
    return params
