"""Decoder-only pre-norm transformer built on the numerics engine.

Two forward paths exist on purpose:

  * `full_forward` — batched, teacher-forced, autodiff-tracked. Used for
    training and as the source of per-layer hidden states for distillation.
  * `layer_forward` / `embed_position` — single-position numpy path against a
    `KvCache`. Used for decoding. No tape, no gradients.

The two are cross-checked against each other in the test suite (parallel vs
incremental agreement within 1e-5).
"""

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import ParamStore, Tensor

NEG_INF = -1e9  # additive causal mask value
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass
class ModelConfig:
    L: int = 6            # transformer layers
    d: int = 96           # hidden width
    n_heads: int = 4
    V: int = 32           # vocabulary size
    d_ff: int = 256
    max_len: int = 192
    d_adapter: int = 24   # bottleneck width of routers/adapters

    def __post_init__(self):
        if self.L < 2 or self.d < 8 or self.V < 16:
            raise ValueError("model too small: need L >= 2, d >= 8, V >= 16")
        if self.d % self.n_heads != 0:
            raise ValueError("d must be divisible by n_heads")

    @property
    def head_dim(self):
        return self.d // self.n_heads

    def to_dict(self):
        return {"L": self.L, "d": self.d, "n_heads": self.n_heads, "V": self.V,
                "d_ff": self.d_ff, "max_len": self.max_len, "d_adapter": self.d_adapter}


def init_transformer_params(store: ParamStore, cfg: ModelConfig, rng: np.random.Generator,
                            prefix: str = "", dtype=np.float32):
    """Add one transformer's parameters to `store` under `prefix`.

    Projections start at normal(0, 0.02); the output projections of attention
    and FFN start at zero so every block is the identity at init.
    """
    def n(shape):
        return rng.normal(0.0, 0.02, size=shape).astype(dtype)

    def z(shape):
        return np.zeros(shape, dtype=dtype)

    p = prefix
    store.add(p + "tok_emb", n((cfg.V, cfg.d)))
    store.add(p + "pos_emb", n((cfg.max_len, cfg.d)))
    for l in range(1, cfg.L + 1):
        b = f"{p}blk{l}."
        store.add(b + "ln1_g", np.ones(cfg.d, dtype=dtype))
        store.add(b + "ln1_b", z(cfg.d))
        store.add(b + "wq", n((cfg.d, cfg.d)))
        store.add(b + "bq", z(cfg.d))
        store.add(b + "wk", n((cfg.d, cfg.d)))
        store.add(b + "bk", z(cfg.d))
        store.add(b + "wv", n((cfg.d, cfg.d)))
        store.add(b + "bv", z(cfg.d))
        store.add(b + "wo", z((cfg.d, cfg.d)))
        store.add(b + "bo", z(cfg.d))
        store.add(b + "ln2_g", np.ones(cfg.d, dtype=dtype))
        store.add(b + "ln2_b", z(cfg.d))
        store.add(b + "w1", n((cfg.d, cfg.d_ff)))
        store.add(b + "b1", z(cfg.d_ff))
        store.add(b + "w2", z((cfg.d_ff, cfg.d)))
        store.add(b + "b2", z(cfg.d))
    store.add(p + "lnf_g", np.ones(cfg.d, dtype=dtype))
    store.add(p + "lnf_b", z(cfg.d))
    store.add(p + "head_w", n((cfg.d, cfg.V)))
    store.add(p + "head_b", z(cfg.V))


def transformer_param_names(cfg: ModelConfig, prefix: str = ""):
    names = [prefix + "tok_emb", prefix + "pos_emb"]
    for l in range(1, cfg.L + 1):
        for part in ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                     "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"):
            names.append(f"{prefix}blk{l}.{part}")
    names += [prefix + "lnf_g", prefix + "lnf_b", prefix + "head_w", prefix + "head_b"]
    return names


# ---------------------------------------------------------------------------
# batched, autodiff-tracked path
# ---------------------------------------------------------------------------

def embed(store, cfg, tokens, prefix: str = "") -> Tensor:
    """tokens int (B, T) -> H_0 (B, T, d): token embedding + position embedding."""
    tokens = np.asarray(tokens)
    T = tokens.shape[-1]
    if T > cfg.max_len:
        raise nm.NumericsError(f"sequence length {T} exceeds max_len {cfg.max_len}")
    tok = nm.embedding(store[prefix + "tok_emb"], tokens)
    pos = store[prefix + "pos_emb"][0:T]
    return tok + pos


def layer_forward_batch(store, cfg, l, x: Tensor, prefix: str = "") -> Tensor:
    """One pre-norm block over a full (B, T, d) tensor with causal masking."""
    b = f"{prefix}blk{l}."
    a = nm.layer_norm(x, store[b + "ln1_g"], store[b + "ln1_b"])
    q = nm.affine(a, store[b + "wq"], store[b + "bq"])
    k = nm.affine(a, store[b + "wk"], store[b + "bk"])
    v = nm.affine(a, store[b + "wv"], store[b + "bv"])
    ctx = nm.causal_self_attention(q, k, v, cfg.n_heads)
    x = x + nm.affine(ctx, store[b + "wo"], store[b + "bo"])

    f = nm.layer_norm(x, store[b + "ln2_g"], store[b + "ln2_b"])
    f = nm.gelu(nm.affine(f, store[b + "w1"], store[b + "b1"]))
    return x + nm.affine(f, store[b + "w2"], store[b + "b2"])


def lm_head(store, cfg, x: Tensor, prefix: str = "") -> Tensor:
    """Final layer-norm then projection to vocabulary logits."""
    z = nm.layer_norm(x, store[prefix + "lnf_g"], store[prefix + "lnf_b"])
    return nm.affine(z, store[prefix + "head_w"], store[prefix + "head_b"])


def full_forward(store, cfg, tokens=None, x0: Tensor = None, prefix: str = ""):
    """Teacher-forced parallel pass.

    Either `tokens` (B, T) or a pre-built input `x0` (B, T, d) must be given;
    x0 is how distillation injects hidden states in place of embeddings.
    Returns (states, logits) where states[l] is H_l (B, T, d) for l in 0..L.
    """
    if x0 is None:
        x0 = embed(store, cfg, tokens, prefix)
    states = [x0]
    x = x0
    for l in range(1, cfg.L + 1):
        x = layer_forward_batch(store, cfg, l, x, prefix)
        states.append(x)
    return states, lm_head(store, cfg, x, prefix)


# ---------------------------------------------------------------------------
# incremental numpy path with a layered KV cache
# ---------------------------------------------------------------------------

class KvCache:
    """Per-layer, per-position key/value store for one decode session.

    Also tracks each position's deepest materialized hidden state so that
    missing-KV gaps left by early exits can be filled lazily (see
    inference.kv_fill)."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        L, M, d = cfg.L, cfg.max_len, cfg.d
        self.k = np.zeros((L + 1, M, d), dtype=np.float32)
        self.v = np.zeros((L + 1, M, d), dtype=np.float32)
        self.have_kv = np.zeros((L + 1, M), dtype=bool)
        self.deepest_state = np.zeros((M, d), dtype=np.float32)
        self.deepest_layer = np.full(M, -1, dtype=np.int64)
        self.n_pos = 0  # positions occupied so far

    def note_state(self, t, l, h):
        """Record h as position t's deepest state if l is the deepest so far."""
        if l >= self.deepest_layer[t]:
            self.deepest_layer[t] = l
            self.deepest_state[t] = h
        self.n_pos = max(self.n_pos, t + 1)

    def missing(self, l, upto):
        """Positions < upto lacking layer-l KV."""
        return np.nonzero(~self.have_kv[l, :upto])[0]


def _mm(a, b):
    out = a @ b
    nm.record_macs((a.size // a.shape[-1]) * a.shape[-1] * b.shape[-1])
    return out


def _np_layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * g + b


def _np_gelu(x):
    inner = _GELU_C * (x + 0.044715 * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def _w(store, name):
    return store[name].data


def embed_position(store, cfg, token_id, t, prefix: str = ""):
    """Single-position H_0: token embedding + position embedding (numpy)."""
    if t >= cfg.max_len:
        raise nm.NumericsError(f"position {t} exceeds max_len {cfg.max_len}")
    return _w(store, prefix + "tok_emb")[token_id] + _w(store, prefix + "pos_emb")[t]


def write_kv(store, cfg, l, h_in, cache: KvCache, t, prefix: str = ""):
    """Materialize layer-l K/V for position t from input state h_in.

    This is the projection-only half of a layer; kv_fill uses it to patch
    positions whose deeper layers never ran."""
    b = f"{prefix}blk{l}."
    a = _np_layer_norm(h_in, _w(store, b + "ln1_g"), _w(store, b + "ln1_b"))
    cache.k[l, t] = _mm(a, _w(store, b + "wk")) + _w(store, b + "bk")
    cache.v[l, t] = _mm(a, _w(store, b + "wv")) + _w(store, b + "bv")
    cache.have_kv[l, t] = True


def layer_forward(store, cfg, l, h_in, cache: KvCache, t, prefix: str = ""):
    """One vanilla layer at a single position, reading/writing the cache.

    Requires layer-l KV for all positions < t to be present (the decode loop
    fills gaps first). Attends causally over positions 0..t."""
    b = f"{prefix}blk{l}."
    h, hd = cfg.n_heads, cfg.head_dim
    if t > 0 and not cache.have_kv[l, :t].all():
        raise nm.NumericsError(f"missing KV at layer {l} below position {t}")

    a = _np_layer_norm(h_in, _w(store, b + "ln1_g"), _w(store, b + "ln1_b"))
    q = _mm(a, _w(store, b + "wq")) + _w(store, b + "bq")
    cache.k[l, t] = _mm(a, _w(store, b + "wk")) + _w(store, b + "bk")
    cache.v[l, t] = _mm(a, _w(store, b + "wv")) + _w(store, b + "bv")
    cache.have_kv[l, t] = True

    keys = cache.k[l, :t + 1].reshape(t + 1, h, hd)
    vals = cache.v[l, :t + 1].reshape(t + 1, h, hd)
    qh = q.reshape(h, hd)
    scores = np.einsum("phd,hd->hp", keys, qh) / math.sqrt(hd)
    nm.record_macs((t + 1) * cfg.d)
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    ctx = np.einsum("hp,phd->hd", w, vals).reshape(cfg.d)
    nm.record_macs((t + 1) * cfg.d)
    x = h_in + _mm(ctx, _w(store, b + "wo")) + _w(store, b + "bo")

    f = _np_layer_norm(x, _w(store, b + "ln2_g"), _w(store, b + "ln2_b"))
    f = _np_gelu(_mm(f, _w(store, b + "w1")) + _w(store, b + "b1"))
    return x + _mm(f, _w(store, b + "w2")) + _w(store, b + "b2")


def lm_head_np(store, cfg, h, prefix: str = ""):
    z = _np_layer_norm(h, _w(store, prefix + "lnf_g"), _w(store, prefix + "lnf_b"))
    return _mm(z, _w(store, prefix + "head_w")) + _w(store, prefix + "head_b")
