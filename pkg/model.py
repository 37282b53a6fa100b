"""
Dual-branch encoder: a shared two-layer region MLP emitting K view features,
per-branch pooling and L2 normalization, with the analytic backward pass and
the UAMP checkpoint format.
"""

import logging
import math
import struct
from dataclasses import dataclass

import numpy as np

from dataset import DataError
from numerics import NumericError, l2_normalize, make_rng

POOLING_KINDS = ("mean", "max", "gpo-lite")

# Flatten order of every parameter vector (checkpoints, Adam state, grad checks)
PARAM_ORDER = ("W1", "b1", "W2", "b2", "Wt", "bt", "pool_img", "pool_txt")

CHECKPOINT_MAGIC = b"UAMP"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sI")
# d1, d2, d_emb, K, hidden, pooling code, gpo_size
_CKPT_CONFIG = struct.Struct("<IIIIIBI")

NORM_EPS = 1e-12


@dataclass
class ModelConfig:
    d1: int = 32
    d2: int = 24
    d_emb: int = 32
    K: int = 4
    hidden: int = 64
    pooling: str = "mean"
    gpo_size: int = 16

    def validate(self):
        for name in ("d1", "d2", "d_emb", "K", "hidden", "gpo_size"):
            if int(getattr(self, name)) < 1:
                raise NumericError(f"ModelConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.pooling not in POOLING_KINDS:
            raise NumericError(f"Unknown pooling '{self.pooling}', expected one of {', '.join(POOLING_KINDS)}")
        return self

    def shapes(self):
        return {
            "W1": (self.hidden, self.d1),
            "b1": (self.hidden,),
            "W2": (self.K * self.d_emb, self.hidden),
            "b2": (self.K * self.d_emb,),
            "Wt": (self.d_emb, self.d2),
            "bt": (self.d_emb,),
            "pool_img": (self.gpo_size,),
            "pool_txt": (self.gpo_size,),
        }


def _split_vector(vector, shapes):
    vector = np.asarray(vector, dtype=np.float64)
    total = sum(int(np.prod(shapes[name])) for name in PARAM_ORDER)
    if vector.shape != (total,):
        raise NumericError(f"Parameter vector has shape {vector.shape}, expected ({total},)")
    tensors, offset = {}, 0
    for name in PARAM_ORDER:
        size = int(np.prod(shapes[name]))
        tensors[name] = vector[offset:offset + size].reshape(shapes[name]).copy()
        offset += size
    return tensors


@dataclass
class ModelParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    Wt: np.ndarray
    bt: np.ndarray
    pool_img: np.ndarray
    pool_txt: np.ndarray

    def tensors(self):
        return [getattr(self, name) for name in PARAM_ORDER]

    def flatten(self):
        return np.concatenate([t.ravel() for t in self.tensors()])

    @classmethod
    def unflatten(cls, vector, cfg):
        return cls(**_split_vector(vector, cfg.shapes()))

    @classmethod
    def zeros(cls, cfg):
        return cls(**{name: np.zeros(shape) for name, shape in cfg.shapes().items()})

    def with_vector(self, vector):
        """New ModelParams with this instance's shapes, filled from a flat vector."""
        return ModelParams(**_split_vector(vector, {name: getattr(self, name).shape for name in PARAM_ORDER}))

    def check_shapes(self, cfg):
        for name, shape in cfg.shapes().items():
            if getattr(self, name).shape != shape:
                raise NumericError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        return self


class Gradients(ModelParams):
    """One gradient tensor per ModelParams tensor, same shapes."""

    def global_norm(self):
        return math.sqrt(math.fsum(float(np.sum(t * t)) for t in self.tensors()))

    def scale(self, factor):
        for name in PARAM_ORDER:
            setattr(self, name, getattr(self, name) * factor)
        return self


def init_params(cfg, seed):
    """Xavier-uniform weights, zero biases, gpo-lite coefficients at 1/P."""
    cfg.validate()
    rng = make_rng(seed)

    def xavier(fan_out, fan_in):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_out, fan_in))

    params = ModelParams(
        W1=xavier(cfg.hidden, cfg.d1),
        b1=np.zeros(cfg.hidden),
        W2=xavier(cfg.K * cfg.d_emb, cfg.hidden),
        b2=np.zeros(cfg.K * cfg.d_emb),
        Wt=xavier(cfg.d_emb, cfg.d2),
        bt=np.zeros(cfg.d_emb),
        pool_img=np.full(cfg.gpo_size, 1.0 / cfg.gpo_size),
        pool_txt=np.full(cfg.gpo_size, 1.0 / cfg.gpo_size),
    )
    logging.debug(f"Initialized {params.flatten().size} parameters (seed {seed})")
    return params


def interpolation_matrix(n, size):
    """(n x size) linear-interpolation map from a size-P coefficient vector to n positions."""
    weights = np.zeros((n, size))
    if n == 1 or size == 1:
        positions = np.zeros(n)
    else:
        positions = np.arange(n) * (size - 1) / (n - 1)
    lo = np.minimum(np.floor(positions).astype(np.int64), size - 1)
    hi = np.minimum(lo + 1, size - 1)
    frac = positions - lo
    rows = np.arange(n)
    np.add.at(weights, (rows, lo), 1.0 - frac)
    np.add.at(weights, (rows, hi), frac)
    return weights


def _pool_forward(features, kind, coeffs=None, frozen=None):
    n, dim = features.shape
    if n < 1:
        raise NumericError("Cannot pool zero feature vectors")
    cache = {"kind": kind, "n": n}
    if kind == "mean":
        return features.mean(axis=0), cache
    if kind == "max":
        index = frozen["index"] if frozen else np.argmax(features, axis=0)
        cache["index"] = index
        return features[index, np.arange(dim)], cache
    if kind == "gpo-lite":
        if coeffs is None:
            raise NumericError("gpo-lite pooling needs a coefficient vector")
        order = frozen["order"] if frozen else np.argsort(-features, axis=0, kind="stable")
        ranked = np.take_along_axis(features, order, axis=0)
        interp = interpolation_matrix(n, coeffs.size)
        raw = interp @ coeffs
        total = float(np.sum(raw))
        if abs(total) < 1e-12:
            raise NumericError(f"gpo-lite coefficients sum to {total:.3e}, cannot normalize pooling weights")
        weights = raw / total
        pooled = weights @ ranked
        cache.update(order=order, ranked=ranked, interp=interp, total=total, weights=weights, pooled=pooled)
        return pooled, cache
    raise NumericError(f"Unknown pooling '{kind}', expected one of {', '.join(POOLING_KINDS)}")


def _pool_backward(grad_out, features, cache):
    """Gradients w.r.t. the pooled features and (gpo-lite only) the coefficients."""
    kind, n = cache["kind"], cache["n"]
    grad_features = np.zeros_like(features)
    if kind == "mean":
        grad_features += grad_out / n
        return grad_features, None
    dim = features.shape[1]
    if kind == "max":
        grad_features[cache["index"], np.arange(dim)] = grad_out
        return grad_features, None
    grad_ranked = np.outer(cache["weights"], grad_out)
    np.put_along_axis(grad_features, cache["order"], grad_ranked, axis=0)
    # d pooled_d / d raw_r = (ranked_rd - pooled_d) / total
    grad_raw = (cache["ranked"] - cache["pooled"]) @ grad_out / cache["total"]
    return grad_features, cache["interp"].T @ grad_raw


def pool(features, kind, coeffs=None):
    """Aggregate n feature vectors into one: mean, max or gpo-lite.

    gpo-lite divides the interpolated coefficients by their sum. The sum is
    not constrained during training, so a run whose coefficients drift to a
    near-zero total stops with NumericError at the batch where it happens.
    """
    features = np.asarray(features, dtype=np.float64)
    if coeffs is not None:
        coeffs = np.asarray(coeffs, dtype=np.float64)
    pooled, _ = _pool_forward(features, kind, coeffs)
    return pooled


def _normalize_backward(grad_y, y, norm):
    return (grad_y - y * np.dot(y, grad_y)) / norm


def encode_image_forward(regions, params, cfg, frozen=None):
    """Forward pass of the image branch keeping what the backward pass needs.

    Args:
        regions: N x d1 region features
        params: ModelParams
        cfg: ModelConfig
        frozen: Optional cache from an earlier call; its ReLU mask and pooling
            selections are reused instead of being recomputed

    Returns:
        Tuple of (K x d_emb unit-norm view embeddings, cache)
    """
    regions = np.asarray(regions, dtype=np.float64)
    if regions.ndim != 2 or regions.shape[0] < 1:
        raise NumericError(f"Image needs at least one region, got shape {regions.shape}")
    if regions.shape[1] != cfg.d1:
        raise NumericError(f"Region dim {regions.shape[1]} does not match d1={cfg.d1}")

    pre = regions @ params.W1.T + params.b1
    mask = frozen["mask"] if frozen else pre > 0
    hidden = pre * mask
    views = hidden @ params.W2.T + params.b2

    d = cfg.d_emb
    emb = np.empty((cfg.K, d))
    pools, norms = [], []
    for k in range(cfg.K):
        pooled, pool_cache = _pool_forward(views[:, k * d:(k + 1) * d], cfg.pooling, params.pool_img,
                                           frozen["pools"][k] if frozen else None)
        emb[k], norm = l2_normalize(pooled, NORM_EPS)
        pools.append(pool_cache)
        norms.append(norm)

    cache = {"regions": regions, "mask": mask, "hidden": hidden, "views": views,
             "pools": pools, "norms": norms, "emb": emb}
    return emb, cache


def encode_image_backward(grad_emb, cache, params, cfg, grads):
    """Accumulate the image-branch gradients into grads."""
    d = cfg.d_emb
    views = cache["views"]
    grad_views = np.zeros_like(views)
    for k in range(cfg.K):
        grad_pooled = _normalize_backward(grad_emb[k], cache["emb"][k], cache["norms"][k])
        grad_slice, grad_coeffs = _pool_backward(grad_pooled, views[:, k * d:(k + 1) * d], cache["pools"][k])
        grad_views[:, k * d:(k + 1) * d] = grad_slice
        if grad_coeffs is not None:
            grads.pool_img += grad_coeffs

    grads.W2 += grad_views.T @ cache["hidden"]
    grads.b2 += grad_views.sum(axis=0)
    grad_pre = (grad_views @ params.W2) * cache["mask"]
    grads.W1 += grad_pre.T @ cache["regions"]
    grads.b1 += grad_pre.sum(axis=0)


def encode_image(regions, params, cfg):
    """Encode one image's regions into K unit-norm view embeddings."""
    emb, _ = encode_image_forward(regions, params, cfg)
    return emb


def encode_text_forward(tokens, params, cfg, frozen=None):
    """Forward pass of the text branch. Returns (d_emb unit vector, cache)."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise NumericError(f"Caption needs at least one token, got shape {tokens.shape}")
    if tokens.shape[1] != cfg.d2:
        raise NumericError(f"Token dim {tokens.shape[1]} does not match d2={cfg.d2}")

    projected = tokens @ params.Wt.T + params.bt
    pooled, pool_cache = _pool_forward(projected, cfg.pooling, params.pool_txt,
                                       frozen["pool"] if frozen else None)
    emb, norm = l2_normalize(pooled, NORM_EPS)
    cache = {"tokens": tokens, "projected": projected, "pool": pool_cache, "norm": norm, "emb": emb}
    return emb, cache


def encode_text_backward(grad_emb, cache, params, cfg, grads):
    """Accumulate the text-branch gradients into grads."""
    grad_pooled = _normalize_backward(grad_emb, cache["emb"], cache["norm"])
    grad_projected, grad_coeffs = _pool_backward(grad_pooled, cache["projected"], cache["pool"])
    if grad_coeffs is not None:
        grads.pool_txt += grad_coeffs
    grads.Wt += grad_projected.T @ cache["tokens"]
    grads.bt += grad_projected.sum(axis=0)


def encode_text(tokens, params, cfg):
    """Encode one caption's tokens into a unit-norm embedding."""
    emb, _ = encode_text_forward(tokens, params, cfg)
    return emb


def save_checkpoint(path, params, cfg):
    """Write config and parameters (float64, PARAM_ORDER) to a UAMP file."""
    cfg.validate()
    params.check_shapes(cfg)
    with open(path, "wb") as f:
        f.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION))
        f.write(_CKPT_CONFIG.pack(cfg.d1, cfg.d2, cfg.d_emb, cfg.K, cfg.hidden,
                                  POOLING_KINDS.index(cfg.pooling), cfg.gpo_size))
        f.write(np.ascontiguousarray(params.flatten(), dtype="<f8").tobytes())
    logging.debug(f"Checkpoint saved to {path}")


def load_checkpoint(path):
    """Read a UAMP checkpoint. Returns (ModelParams, ModelConfig)."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4 or data[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad magic at byte offset 0")
    if len(data) < _CKPT_HEADER.size + _CKPT_CONFIG.size:
        raise DataError(f"{path}: truncated header at byte offset {len(data)}")
    _, version = _CKPT_HEADER.unpack_from(data, 0)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported version {version} at byte offset 4")
    d1, d2, d_emb, views, hidden, pooling, gpo_size = _CKPT_CONFIG.unpack_from(data, _CKPT_HEADER.size)
    if pooling >= len(POOLING_KINDS):
        raise DataError(f"{path}: unknown pooling code {pooling} at byte offset {_CKPT_HEADER.size + 20}")
    cfg = ModelConfig(d1=d1, d2=d2, d_emb=d_emb, K=views, hidden=hidden,
                      pooling=POOLING_KINDS[pooling], gpo_size=gpo_size).validate()

    offset = _CKPT_HEADER.size + _CKPT_CONFIG.size
    expected = sum(int(np.prod(s)) for s in cfg.shapes().values())
    if len(data) - offset != expected * 8:
        raise DataError(f"{path}: expected {expected * 8} parameter bytes at byte offset {offset}, "
                        f"found {len(data) - offset}")
    vector = np.frombuffer(data, dtype="<f8", count=expected, offset=offset).astype(np.float64)
    return ModelParams.unflatten(vector, cfg), cfg
