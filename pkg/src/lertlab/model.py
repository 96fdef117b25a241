"""Post-LN transformer encoder with a tied-embedding MLM head and linguistic tag heads.

Forward and backward passes are written out by hand in numpy. All arithmetic
runs in the parameters' dtype: float32 for training, float64 for gradient
checks.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import erf

from .corpus import NO_TARGET
from .masking import MaskedExample
from .tags import TAGSETS, TASKS

ParamStore = dict  # name -> np.ndarray, insertion-ordered

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ModelConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    vocab: int = 0  # 0: resolved from the corpus vocabulary at training time
    max_len: int = 128
    ffn_inner: int | None = None
    segments: int = 2
    layernorm_eps: float = 1e-12
    init_std: float = 0.02
    tasks: tuple[str, ...] = TASKS

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if self.ffn_inner is None:
            object.__setattr__(self, "ffn_inner", 4 * self.hidden)
        for name in ("layers", "hidden", "heads", "max_len", "ffn_inner", "segments"):
            if getattr(self, name) < 1:
                raise ModelConfigError(f"{name} must be >= 1")
        if self.vocab < 0:
            raise ModelConfigError("vocab must be >= 1 (0 = take the size from the corpus vocabulary)")
        if self.hidden % self.heads:
            raise ModelConfigError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        for t in self.tasks:
            if t not in TASKS:
                raise ModelConfigError(f"unknown task head {t!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def tag_size(self, task: str) -> int:
        return len(TAGSETS[task])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "tasks": tuple(d.get("tasks", TASKS))})


# sizes from the published model table; "micro" is the desk preset
PRESETS = {
    "micro": dict(layers=2, hidden=64, heads=4, max_len=128),
    "small": dict(layers=12, hidden=256, heads=4, max_len=512),
    "base": dict(layers=12, hidden=768, heads=12, max_len=512),
    "large": dict(layers=24, hidden=1024, heads=16, max_len=512),
}


def preset(name: str, vocab: int, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ModelConfigError(f"unknown model preset {name!r}")
    return ModelConfig(**{**PRESETS[name], "vocab": vocab, **overrides})


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, V = cfg.hidden, cfg.ffn_inner, cfg.vocab
    shapes = {
        "embeddings.token": (V, d),
        "embeddings.position": (cfg.max_len, d),
        "embeddings.segment": (cfg.segments, d),
        "embeddings.ln.gamma": (d,),
        "embeddings.ln.beta": (d,),
    }
    for i in range(cfg.layers):
        p = f"layer{i}."
        for proj in ("q", "k", "v", "o"):
            shapes[p + f"attn.{proj}.weight"] = (d, d)
            shapes[p + f"attn.{proj}.bias"] = (d,)
        shapes[p + "attn.ln.gamma"] = (d,)
        shapes[p + "attn.ln.beta"] = (d,)
        shapes[p + "ffn.in.weight"] = (f, d)
        shapes[p + "ffn.in.bias"] = (f,)
        shapes[p + "ffn.out.weight"] = (d, f)
        shapes[p + "ffn.out.bias"] = (d,)
        shapes[p + "ffn.ln.gamma"] = (d,)
        shapes[p + "ffn.ln.beta"] = (d,)
    shapes["mlm.transform.weight"] = (d, d)
    shapes["mlm.transform.bias"] = (d,)
    shapes["mlm.ln.gamma"] = (d,)
    shapes["mlm.ln.beta"] = (d,)
    shapes["mlm.bias"] = (V,)
    for t in cfg.tasks:
        shapes[f"head.{t}.weight"] = (cfg.tag_size(t), d)
        shapes[f"head.{t}.bias"] = (cfg.tag_size(t),)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(cfg).values())


def is_decay_exempt(name: str) -> bool:
    return name.endswith(".bias") or name.endswith(".gamma") or name.endswith(".beta")


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(cfg: ModelConfig, seed: int | np.random.Generator = 0, dtype=np.float32) -> ParamStore:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(".bias") or name.endswith(".beta"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = _truncated_normal(rng, shape, cfg.init_std).astype(dtype)
    return params


# --- batch ------------------------------------------------------------------

@dataclass
class Batch:
    input_ids: np.ndarray       # (B, T)
    segment_ids: np.ndarray     # (B, T)
    attention_mask: np.ndarray  # (B, T) bool, False at padding
    masked_index: np.ndarray    # (k,) flat indices into B*T, row-major
    targets: dict[str, np.ndarray] = field(default_factory=dict)  # "mlm"/task -> (k,)

    @property
    def k(self) -> int:
        return len(self.masked_index)


def collate(examples: Sequence[MaskedExample], pad_id: int = 0) -> Batch:
    B = len(examples)
    T = max(len(e) for e in examples)
    ids = np.full((B, T), pad_id, dtype=np.int64)
    seg = np.zeros((B, T), dtype=np.int64)
    att = np.zeros((B, T), dtype=bool)
    is_masked = np.zeros((B, T), dtype=bool)
    tgt = {key: np.full((B, T), NO_TARGET, dtype=np.int64) for key in ("mlm",) + TASKS}
    for b, e in enumerate(examples):
        n = len(e)
        ids[b, :n] = e.input_ids
        seg[b, :n] = e.segment_ids
        att[b, :n] = True
        is_masked[b, :n] = e.is_masked
        for key in tgt:
            tgt[key][b, :n] = e.targets(key)
    flat = np.flatnonzero(is_masked.reshape(-1))
    return Batch(ids, seg, att, flat, {key: v.reshape(-1)[flat] for key, v in tgt.items()})


# --- primitives -------------------------------------------------------------

def _layer_norm(x, gamma, beta, eps):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd)


def _layer_norm_backward(dy, gamma, cache):
    xhat, rstd = cache
    axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dgamma, dbeta


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def _log_softmax(logits):
    z = logits - logits.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def _linear(x, w, b):
    return x @ w.T + b


def _check_finite(x, where: str):
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite activation in {where}")


# --- encoder ----------------------------------------------------------------

def encoder_forward(params: ParamStore, batch: Batch, cfg: ModelConfig):
    """Last-layer hidden states (B, T, d) and the cache needed by encoder_backward."""
    ids = batch.input_ids
    B, T = ids.shape
    if T > cfg.max_len:
        raise InputError(f"sequence length {T} exceeds max_len {cfg.max_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab:
        raise InputError(f"token id out of range [0, {cfg.vocab})")
    eps = cfg.layernorm_eps
    A, dh = cfg.heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    key_ok = batch.attention_mask[:, None, None, :]

    x = params["embeddings.token"][ids] + params["embeddings.position"][:T][None] \
        + params["embeddings.segment"][batch.segment_ids]
    h, ln0 = _layer_norm(x, params["embeddings.ln.gamma"], params["embeddings.ln.beta"], eps)
    _check_finite(h, "embeddings")
    caches = []
    for i in range(cfg.layers):
        p = f"layer{i}."

        def heads(t):
            return t.reshape(B, T, A, dh).transpose(0, 2, 1, 3)

        q = heads(_linear(h, params[p + "attn.q.weight"], params[p + "attn.q.bias"]))
        k = heads(_linear(h, params[p + "attn.k.weight"], params[p + "attn.k.bias"]))
        v = heads(_linear(h, params[p + "attn.v.weight"], params[p + "attn.v.bias"]))
        scores = np.where(key_ok, (q @ k.transpose(0, 1, 3, 2)) * scale, -np.inf)
        attn = softmax(scores)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, T, -1)
        o = _linear(ctx, params[p + "attn.o.weight"], params[p + "attn.o.bias"])
        h1, ln1 = _layer_norm(h + o, params[p + "attn.ln.gamma"], params[p + "attn.ln.beta"], eps)
        z = _linear(h1, params[p + "ffn.in.weight"], params[p + "ffn.in.bias"])
        g = _gelu(z)
        f = _linear(g, params[p + "ffn.out.weight"], params[p + "ffn.out.bias"])
        h_out, ln2 = _layer_norm(h1 + f, params[p + "ffn.ln.gamma"], params[p + "ffn.ln.beta"], eps)
        _check_finite(h_out, f"layer {i}")
        caches.append(dict(h_in=h, q=q, k=k, v=v, attn=attn, ctx=ctx, ln1=ln1, h1=h1, z=z, g=g, ln2=ln2))
        h = h_out
    return h, dict(ln0=ln0, layers=caches, ids=ids, seg=batch.segment_ids, T=T)


def encoder_backward(params: ParamStore, cache: dict, dH: np.ndarray, cfg: ModelConfig,
                     grads: ParamStore) -> ParamStore:
    """Accumulate encoder parameter gradients into ``grads`` given dLoss/dH."""
    B, T, d = dH.shape
    A, dh = cfg.heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    dh_cur = dH
    for i in reversed(range(cfg.layers)):
        p = f"layer{i}."
        c = cache["layers"][i]
        # ffn block
        ds2, dgam, dbet = _layer_norm_backward(dh_cur, params[p + "ffn.ln.gamma"], c["ln2"])
        grads[p + "ffn.ln.gamma"] += dgam
        grads[p + "ffn.ln.beta"] += dbet
        df = ds2.reshape(-1, d)
        grads[p + "ffn.out.weight"] += df.T @ c["g"].reshape(B * T, -1)
        grads[p + "ffn.out.bias"] += df.sum(0)
        dg = ds2 @ params[p + "ffn.out.weight"]
        dz = dg * _gelu_grad(c["z"])
        dz2 = dz.reshape(B * T, -1)
        grads[p + "ffn.in.weight"] += dz2.T @ c["h1"].reshape(-1, d)
        grads[p + "ffn.in.bias"] += dz2.sum(0)
        dh1 = ds2 + dz @ params[p + "ffn.in.weight"]
        # attention block
        ds1, dgam, dbet = _layer_norm_backward(dh1, params[p + "attn.ln.gamma"], c["ln1"])
        grads[p + "attn.ln.gamma"] += dgam
        grads[p + "attn.ln.beta"] += dbet
        do = ds1.reshape(-1, d)
        grads[p + "attn.o.weight"] += do.T @ c["ctx"].reshape(-1, d)
        grads[p + "attn.o.bias"] += do.sum(0)
        dctx = (ds1 @ params[p + "attn.o.weight"]).reshape(B, T, A, dh).transpose(0, 2, 1, 3)
        attn = c["attn"]
        dattn = dctx @ c["v"].transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ dctx
        dscores = attn * (dattn - (dattn * attn).sum(-1, keepdims=True)) * scale
        dq = dscores @ c["k"]
        dk = dscores.transpose(0, 1, 3, 2) @ c["q"]
        h_in = c["h_in"].reshape(-1, d)
        dx = ds1.copy()
        for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
            dflat = dproj.transpose(0, 2, 1, 3).reshape(B * T, d)
            grads[p + f"attn.{name}.weight"] += dflat.T @ h_in
            grads[p + f"attn.{name}.bias"] += dflat.sum(0)
            dx += (dflat @ params[p + f"attn.{name}.weight"]).reshape(B, T, d)
        dh_cur = dx
    dx0, dgam, dbet = _layer_norm_backward(dh_cur, params["embeddings.ln.gamma"], cache["ln0"])
    grads["embeddings.ln.gamma"] += dgam
    grads["embeddings.ln.beta"] += dbet
    np.add.at(grads["embeddings.token"], cache["ids"].reshape(-1), dx0.reshape(-1, d))
    grads["embeddings.position"][: cache["T"]] += dx0.sum(0)
    np.add.at(grads["embeddings.segment"], cache["seg"].reshape(-1), dx0.reshape(-1, d))
    return grads


# --- heads ------------------------------------------------------------------

def mlm_transform(Hm: np.ndarray, params: ParamStore, eps: float = 1e-12):
    """Dense layer + GELU + LayerNorm over the masked-position states."""
    z = _linear(Hm, params["mlm.transform.weight"], params["mlm.transform.bias"])
    g = _gelu(z)
    Ht, ln = _layer_norm(g, params["mlm.ln.gamma"], params["mlm.ln.beta"], eps)
    return Ht, dict(Hm=Hm, z=z, ln=ln)


def mlm_logits(Ht: np.ndarray, E: np.ndarray, b: np.ndarray) -> np.ndarray:
    return Ht @ E.T + b


def mlm_probs(Ht: np.ndarray, E: np.ndarray, b: np.ndarray) -> np.ndarray:
    return softmax(mlm_logits(Ht, E, b))


def linguistic_probs(Ht: np.ndarray, W: np.ndarray, b: np.ndarray, task: str | None = None) -> np.ndarray:
    if task is not None and W.shape[0] != len(TAGSETS[task]):
        raise ModelConfigError(
            f"{task} head has {W.shape[0]} rows but the tag set has {len(TAGSETS[task])} labels")
    if W.shape[0] != b.shape[0]:
        raise ModelConfigError("head weight and bias sizes differ")
    return softmax(Ht @ W.T + b)


# counts batches whose loss was taken over zero masked predictions
degenerate_batches = 0


def cross_entropy(probs: np.ndarray, targets: np.ndarray) -> float:
    """Mean negative log-probability of the target ids; 0 for an empty batch."""
    global degenerate_batches
    M = len(targets)
    if M == 0:
        degenerate_batches += 1
        return 0.0
    if targets.min() < 0 or targets.max() >= probs.shape[1]:
        raise InputError("target id outside probability row width")
    return float(-np.log(probs[np.arange(M), targets]).mean())


@dataclass
class LossBreakdown:
    mlm_loss: float
    pos_loss: float
    ner_loss: float
    dep_loss: float
    masked_count: int
    combined: float | None = None

    def task_loss(self, task: str) -> float:
        return getattr(self, f"{task}_loss")

    def as_dict(self) -> dict[str, float]:
        return {t: self.task_loss(t) for t in TASKS}


@dataclass
class ForwardOutput:
    H: np.ndarray
    Hm: np.ndarray
    Ht: np.ndarray
    probs: dict[str, np.ndarray]
    losses: LossBreakdown
    nll_sums: dict[str, float] = field(repr=False, default_factory=dict)
    cache: dict = field(repr=False, default_factory=dict)


def forward(params: ParamStore, batch: Batch | Sequence[MaskedExample], cfg: ModelConfig) -> ForwardOutput:
    if not isinstance(batch, Batch):
        batch = collate(batch)
    H, enc_cache = encoder_forward(params, batch, cfg)
    d = cfg.hidden
    Hm = H.reshape(-1, d)[batch.masked_index]
    Ht, head_cache = mlm_transform(Hm, params, cfg.layernorm_eps)
    logits = {"mlm": mlm_logits(Ht, params["embeddings.token"], params["mlm.bias"])}
    for t in cfg.tasks:
        logits[t] = Ht @ params[f"head.{t}.weight"].T + params[f"head.{t}.bias"]
    probs, logp, sums = {}, {}, {}
    M = batch.k
    for key, lg in logits.items():
        logp[key] = _log_softmax(lg)
        probs[key] = np.exp(logp[key])
        tgt = batch.targets[key]
        sums[key] = float(-logp[key][np.arange(M), tgt].sum(dtype=np.float64)) if M else 0.0
    mean = {key: (s / M if M else 0.0) for key, s in sums.items()}
    losses = LossBreakdown(mean["mlm"], mean.get("pos", 0.0), mean.get("ner", 0.0), mean.get("dep", 0.0), M)
    for key, v in mean.items():
        if not math.isfinite(v):
            raise NumericError(f"non-finite {key} loss")
    return ForwardOutput(H, Hm, Ht, probs, losses, sums,
                         dict(encoder=enc_cache, head=head_cache, batch=batch))


def backward(params: ParamStore, out: ForwardOutput, weights: dict[str, float], cfg: ModelConfig,
             denom: float | None = None, grads: ParamStore | None = None) -> ParamStore:
    """Gradients of ``sum_key weight_key * nll_sum_key / denom``; the MLM weight is 1.

    ``denom`` defaults to the batch's masked count, giving the mean loss. The
    token embedding receives both the lookup and the output-projection terms.
    """
    batch: Batch = out.cache["batch"]
    if grads is None:
        grads = {name: np.zeros_like(p) for name, p in params.items()}
    M = batch.k
    if M == 0:
        return grads
    denom = float(M if denom is None else denom)
    d = cfg.hidden
    E = params["embeddings.token"]
    rows = np.arange(M)
    Ht = out.Ht

    def dlogits(key, w):
        g = out.probs[key].copy()
        g[rows, batch.targets[key]] -= 1.0
        return g * (w / denom)

    dl = dlogits("mlm", 1.0)
    grads["embeddings.token"] += dl.T @ Ht
    grads["mlm.bias"] += dl.sum(0)
    dHt = dl @ E
    for t in cfg.tasks:
        dl = dlogits(t, weights.get(t, 0.0))
        grads[f"head.{t}.weight"] += dl.T @ Ht
        grads[f"head.{t}.bias"] += dl.sum(0)
        dHt += dl @ params[f"head.{t}.weight"]
    hc = out.cache["head"]
    dg, dgam, dbet = _layer_norm_backward(dHt, params["mlm.ln.gamma"], hc["ln"])
    grads["mlm.ln.gamma"] += dgam
    grads["mlm.ln.beta"] += dbet
    dz = dg * _gelu_grad(hc["z"])
    grads["mlm.transform.weight"] += dz.T @ hc["Hm"]
    grads["mlm.transform.bias"] += dz.sum(0)
    dHm = dz @ params["mlm.transform.weight"]
    B, T = batch.input_ids.shape
    dH = np.zeros((B * T, d), dtype=dHm.dtype)
    dH[batch.masked_index] = dHm
    encoder_backward(params, out.cache["encoder"], dH.reshape(B, T, d), cfg, grads)
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
    return grads


def combined_loss(out: ForwardOutput, weights: dict[str, float]) -> float:
    lb = out.losses
    return lb.mlm_loss + sum(weights.get(t, 0.0) * lb.task_loss(t) for t in TASKS)
