"""Desk-scale pre-norm transformer encoder with a manual backward pass.

Parameters live in a flat dict keyed by dotted names. Names ending in
".weight" are matrices subject to weight decay; ".bias" and layer-norm
".gain" entries are not. Both output heads always exist so that switching
objectives never changes the parameter set; the unused head gets a zero
gradient.
"""

import logging
from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import expit

from pretraining.corpus import NUM_SPECIALS
from pretraining.errors import HeadMismatchError, ModelError
from pretraining.objectives import BINARY_OBJECTIVES, CorruptedBatch

logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]

TOKEN_EMBEDDING = "embeddings.token.weight"
POSITION_EMBEDDING = "embeddings.position.weight"

_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_K = 0.044715


class HeadType(str, Enum):
    BINARY = "binary"
    LM = "lm"


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    layers: int = Field(2, ge=1)
    hidden: int = Field(64, ge=1)
    heads: int = Field(4, ge=1)
    intermediate: int = Field(256, ge=1)
    max_len: int = Field(128, ge=3)
    vocab_size: int = Field(..., gt=NUM_SPECIALS)
    head_type: HeadType = HeadType.BINARY
    dropout: float = Field(0.0, ge=0.0, lt=1.0)
    tie_lm_head: bool = True
    dtype: Literal["float64", "float32"] = "float64"
    init_std: float = Field(0.02, gt=0)
    layer_norm_eps: float = Field(1e-5, gt=0)

    @model_validator(mode="after")
    def check_heads(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} is not divisible by {self.heads} heads")
        return self

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @classmethod
    def base_size(cls, vocab_size: int = 50265, head_type: HeadType = HeadType.BINARY) -> "ModelConfig":
        return cls(layers=12, hidden=768, heads=12, intermediate=3072, max_len=512,
                   vocab_size=vocab_size, head_type=head_type)

    @classmethod
    def base_generator(cls, vocab_size: int = 50265) -> "ModelConfig":
        return cls(layers=12, hidden=256, heads=4, intermediate=1024, max_len=512,
                   vocab_size=vocab_size, head_type=HeadType.LM)


def init_params(config: ModelConfig, seed: int = 0) -> Params:
    """Normal(0, init_std) matrices, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    h, i, V = config.hidden, config.intermediate, config.vocab_size

    def normal(*shape):
        return rng.normal(0.0, config.init_std, size=shape)

    params: Params = {
        TOKEN_EMBEDDING: normal(V, h),
        POSITION_EMBEDDING: normal(config.max_len, h),
    }
    for layer in range(config.layers):
        prefix = f"layers.{layer}."
        params[prefix + "ln1.gain"] = np.ones(h)
        params[prefix + "ln1.bias"] = np.zeros(h)
        for name in "qkvo":
            params[prefix + f"attn.{name}.weight"] = normal(h, h)
            params[prefix + f"attn.{name}.bias"] = np.zeros(h)
        params[prefix + "ln2.gain"] = np.ones(h)
        params[prefix + "ln2.bias"] = np.zeros(h)
        params[prefix + "ffn.in.weight"] = normal(h, i)
        params[prefix + "ffn.in.bias"] = np.zeros(i)
        params[prefix + "ffn.out.weight"] = normal(i, h)
        params[prefix + "ffn.out.bias"] = np.zeros(h)
    params["ln_f.gain"] = np.ones(h)
    params["ln_f.bias"] = np.zeros(h)
    params["head.binary.weight"] = normal(h)
    params["head.binary.bias"] = np.zeros(1)
    params["head.lm.bias"] = np.zeros(V)
    if not config.tie_lm_head:
        params["head.lm.weight"] = normal(h, V)
    return params


def zero_params(config: ModelConfig) -> Params:
    return {name: np.zeros_like(value) for name, value in init_params(config).items()}


def parameter_count(config: ModelConfig) -> int:
    h, i, V = config.hidden, config.intermediate, config.vocab_size
    per_layer = 4 * (h * h + h) + (h * i + i) + (i * h + h) + 4 * h
    total = V * h + config.max_len * h + config.layers * per_layer + 2 * h + (h + 1) + V
    if not config.tie_lm_head:
        total += h * V
    return total


def _sub(params: Params, prefix: str) -> Params:
    return {name[len(prefix):]: value for name, value in params.items() if name.startswith(prefix)}


def _layer_norm(x, gain, bias, eps):
    mean = x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + eps)
    xhat = (x - mean) * inv
    return xhat * gain + bias, (xhat, inv, gain)


def _layer_norm_backward(dy, cache):
    xhat, inv, gain = cache
    dgain = (dy * xhat).sum(axis=(0, 1))
    dbias = dy.sum(axis=(0, 1))
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


def _gelu(u):
    t = np.tanh(_GELU_C * (u + _GELU_K * u ** 3))
    return 0.5 * u * (1.0 + t), t


def _gelu_grad(u, t):
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * u * u)


def self_attention(x: np.ndarray, key_mask: np.ndarray, weights: Params, heads: int) -> Tuple[np.ndarray, Dict[str, Any]]:
    """Multi-head scaled dot-product attention over the unmasked keys.

    weights holds q/k/v/o ".weight" (h x h) and ".bias" (h) entries.
    """
    B, L, h = x.shape
    dh = h // heads

    def split(t):
        return t.reshape(B, L, heads, dh).transpose(0, 2, 1, 3)

    q = split(x @ weights["q.weight"] + weights["q.bias"])
    k = split(x @ weights["k.weight"] + weights["k.bias"])
    v = split(x @ weights["v.weight"] + weights["v.bias"])
    scale = float(1.0 / np.sqrt(dh))

    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    scores = np.where(np.asarray(key_mask, dtype=bool)[:, None, None, :], scores, -np.inf)
    top = scores.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(scores - top)
    denom = e.sum(axis=-1, keepdims=True)
    probs = e / np.where(denom > 0, denom, 1.0)

    ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, L, h)
    out = ctx @ weights["o.weight"] + weights["o.bias"]
    return out, {"x": x, "q": q, "k": k, "v": v, "probs": probs, "ctx": ctx, "scale": scale}


def _self_attention_backward(dout, cache, weights: Params, heads: int) -> Tuple[np.ndarray, Params]:
    x, q, k, v, probs, ctx = (cache[key] for key in ("x", "q", "k", "v", "probs", "ctx"))
    B, L, h = x.shape
    dh = h // heads
    grads: Params = {}

    dout2 = dout.reshape(-1, h)
    grads["o.weight"] = ctx.reshape(-1, h).T @ dout2
    grads["o.bias"] = dout2.sum(axis=0)
    dctx = (dout @ weights["o.weight"].T).reshape(B, L, heads, dh).transpose(0, 2, 1, 3)

    dprobs = dctx @ v.transpose(0, 1, 3, 2)
    dv = probs.transpose(0, 1, 3, 2) @ dctx
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * cache["scale"]
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q

    x2 = x.reshape(-1, h)
    dx = np.zeros_like(x2)
    for name, d in (("q", dq), ("k", dk), ("v", dv)):
        d2 = d.transpose(0, 2, 1, 3).reshape(-1, h)
        grads[f"{name}.weight"] = x2.T @ d2
        grads[f"{name}.bias"] = d2.sum(axis=0)
        dx += d2 @ weights[f"{name}.weight"].T
    return dx.reshape(B, L, h), grads


def _dropout_mask(shape, rate: float, rng: Optional[np.random.Generator], dtype):
    if rng is None or rate <= 0.0:
        return None
    return ((rng.random(shape) >= rate) / (1.0 - rate)).astype(dtype)


def forward(
    params: Params, config: ModelConfig, cb: CorruptedBatch, rng: Optional[np.random.Generator] = None
) -> Tuple[np.ndarray, Dict[str, Any]]:
    """Logits (B x L x 1 for BINARY, B x L x V for LM) plus the activation cache.

    Dropout is applied only when an rng is passed and config.dropout > 0.
    """
    ids = np.asarray(cb.input_ids)
    attention = np.asarray(cb.attention_mask, dtype=bool)
    B, L = ids.shape
    if L > config.max_len:
        raise ModelError(f"sequence length {L} exceeds max_len {config.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ModelError(f"token ids must lie in [0, {config.vocab_size})")

    dtype = np.dtype(config.dtype)
    P = {name: value.astype(dtype, copy=False) for name, value in params.items()}
    eps = config.layer_norm_eps

    x = P[TOKEN_EMBEDDING][ids] + P[POSITION_EMBEDDING][:L]
    layers: List[Dict[str, Any]] = []
    for layer in range(config.layers):
        prefix = f"layers.{layer}."
        a_in, ln1 = _layer_norm(x, P[prefix + "ln1.gain"], P[prefix + "ln1.bias"], eps)
        attn, attn_cache = self_attention(a_in, attention, _sub(P, prefix + "attn."), config.heads)
        drop1 = _dropout_mask(attn.shape, config.dropout, rng, dtype)
        if drop1 is not None:
            attn = attn * drop1
        x = x + attn

        f_in, ln2 = _layer_norm(x, P[prefix + "ln2.gain"], P[prefix + "ln2.bias"], eps)
        u = f_in @ P[prefix + "ffn.in.weight"] + P[prefix + "ffn.in.bias"]
        a, t = _gelu(u)
        f = a @ P[prefix + "ffn.out.weight"] + P[prefix + "ffn.out.bias"]
        drop2 = _dropout_mask(f.shape, config.dropout, rng, dtype)
        if drop2 is not None:
            f = f * drop2
        x = x + f
        layers.append({"ln1": ln1, "attn": attn_cache, "drop1": drop1, "ln2": ln2,
                       "f_in": f_in, "u": u, "t": t, "a": a, "drop2": drop2})

    hf, lnf = _layer_norm(x, P["ln_f.gain"], P["ln_f.bias"], eps)
    if config.head_type == HeadType.BINARY:
        logits = (hf @ P["head.binary.weight"] + P["head.binary.bias"])[..., None]
    else:
        weight = P[TOKEN_EMBEDDING].T if config.tie_lm_head else P["head.lm.weight"]
        logits = hf @ weight + P["head.lm.bias"]

    cache = {"config": config, "params": P, "ids": ids, "hf": hf, "lnf": lnf, "layers": layers, "logits": logits}
    return logits, cache


def _loss_and_grad(cb: CorruptedBatch, logits: np.ndarray) -> Tuple[float, np.ndarray]:
    binary = logits.shape[-1] == 1
    if binary != (cb.objective_tag in BINARY_OBJECTIVES):
        head = "binary" if binary else "LM"
        raise HeadMismatchError(f"{head} head cannot score objective {cb.objective_tag.value}")

    mask = np.asarray(cb.loss_mask, dtype=bool)
    count = int(mask.sum())
    dlogits = np.zeros(logits.shape, dtype=np.float64)
    if count == 0:
        return 0.0, dlogits

    labels = np.asarray(cb.labels)[mask]
    if (labels < 0).any():
        raise ModelError("loss positions must carry a label")

    if binary:
        z = logits[..., 0][mask].astype(np.float64)
        y = labels.astype(np.float64)
        losses = np.logaddexp(0.0, z) - y * z
        dbin = dlogits[..., 0]
        dbin[mask] = (expit(z) - y) / count
    else:
        z = logits[mask].astype(np.float64)
        rows = np.arange(len(labels))
        top = z.max(axis=-1, keepdims=True)
        lse = top[:, 0] + np.log(np.exp(z - top).sum(axis=-1))
        losses = lse - z[rows, labels]
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        dlogits[mask] = p / count
    return float(losses.sum() / count), dlogits


def loss(cb: CorruptedBatch, logits: np.ndarray) -> float:
    """Mean binary or token cross-entropy over cb.loss_mask; 0 for an empty mask."""
    return _loss_and_grad(cb, logits)[0]


def backward(params: Params, cache: Dict[str, Any], cb: CorruptedBatch) -> Params:
    """Exact gradient of loss(cb, logits) with respect to every parameter."""
    config: ModelConfig = cache["config"]
    P = cache["params"]
    _, dlogits = _loss_and_grad(cb, cache["logits"])
    grads: Params = {name: np.zeros(value.shape, dtype=np.float64) for name, value in params.items()}
    h = config.hidden
    hf = cache["hf"]

    if config.head_type == HeadType.BINARY:
        dz = dlogits[..., 0]
        grads["head.binary.weight"] = np.einsum("blh,bl->h", hf, dz)
        grads["head.binary.bias"] = np.array([dz.sum()])
        dhf = dz[..., None] * P["head.binary.weight"]
    else:
        hf2 = hf.reshape(-1, h)
        d2 = dlogits.reshape(-1, config.vocab_size)
        grads["head.lm.bias"] = d2.sum(axis=0)
        if config.tie_lm_head:
            grads[TOKEN_EMBEDDING] += d2.T @ hf2
            dhf = dlogits @ P[TOKEN_EMBEDDING]
        else:
            grads["head.lm.weight"] = hf2.T @ d2
            dhf = dlogits @ P["head.lm.weight"].T

    dx, grads["ln_f.gain"], grads["ln_f.bias"] = _layer_norm_backward(dhf, cache["lnf"])

    for layer in reversed(range(config.layers)):
        prefix = f"layers.{layer}."
        c = cache["layers"][layer]

        df = dx if c["drop2"] is None else dx * c["drop2"]
        df2 = df.reshape(-1, h)
        grads[prefix + "ffn.out.weight"] = c["a"].reshape(df2.shape[0], -1).T @ df2
        grads[prefix + "ffn.out.bias"] = df2.sum(axis=0)
        du = (df @ P[prefix + "ffn.out.weight"].T) * _gelu_grad(c["u"], c["t"])
        du2 = du.reshape(df2.shape[0], -1)
        grads[prefix + "ffn.in.weight"] = c["f_in"].reshape(-1, h).T @ du2
        grads[prefix + "ffn.in.bias"] = du2.sum(axis=0)
        d_ln2, grads[prefix + "ln2.gain"], grads[prefix + "ln2.bias"] = _layer_norm_backward(
            du @ P[prefix + "ffn.in.weight"].T, c["ln2"]
        )
        dx = dx + d_ln2

        dattn = dx if c["drop1"] is None else dx * c["drop1"]
        d_a_in, attn_grads = _self_attention_backward(dattn, c["attn"], _sub(P, prefix + "attn."), config.heads)
        for name, value in attn_grads.items():
            grads[prefix + "attn." + name] = value
        d_ln1, grads[prefix + "ln1.gain"], grads[prefix + "ln1.bias"] = _layer_norm_backward(d_a_in, c["ln1"])
        dx = dx + d_ln1

    ids = cache["ids"]
    np.add.at(grads[TOKEN_EMBEDDING], ids, dx)
    grads[POSITION_EMBEDDING][: ids.shape[1]] += dx.sum(axis=0)
    return {name: np.asarray(value, dtype=np.float64) for name, value in grads.items()}


def predict_binary(logits: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """True where sigmoid(logit) > threshold, i.e. predicted replaced."""
    if logits.shape[-1] != 1:
        raise HeadMismatchError("predict_binary needs binary-head logits")
    return expit(logits[..., 0]) > threshold
