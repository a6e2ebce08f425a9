"""Router-adapter shortcut modules.

Each layer l in 1..L owns a router (d -> d_adapter -> 1 -> sigmoid) whose
output w gates a shortcut branch against the vanilla transformer layer.
Adapters are residual bottlenecks g_k(h) = h + W_up * gelu(W_down * h) and
are indexed 0..L: producing the layer-l state uses adapter l-1 on the
depth path and adapter l on the step-carry path — the two roles are
deliberately distinct maps.

With W_up at zero an adapter is exactly the identity, so a freshly
initialized shortcut model copies states through unchanged at w=1.
"""

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import ParamStore, Tensor
from .transformer import ModelConfig, _mm, _np_gelu, _w

STAGE_TEACHER = "teacher"
STAGE_STUDENT = "student"
STAGE_SYSTEM15 = "system-1.5"


def init_router_params(store: ParamStore, cfg: ModelConfig, rng, l, prefix="",
                       bias_init=0.0, dtype=np.float32):
    b = f"{prefix}router{l}."
    store.add(b + "w1", rng.normal(0, 0.02, size=(cfg.d, cfg.d_adapter)).astype(dtype))
    store.add(b + "b1", np.zeros(cfg.d_adapter, dtype=dtype))
    store.add(b + "w2", rng.normal(0, 0.02, size=(cfg.d_adapter, 1)).astype(dtype))
    store.add(b + "b2", np.full(1, bias_init, dtype=dtype))


def init_adapter_params(store: ParamStore, cfg: ModelConfig, rng, k, prefix="", dtype=np.float32):
    b = f"{prefix}adapter{k}."
    store.add(b + "down", rng.normal(0, 0.02, size=(cfg.d, cfg.d_adapter)).astype(dtype))
    store.add(b + "bd", np.zeros(cfg.d_adapter, dtype=dtype))
    store.add(b + "up", np.zeros((cfg.d_adapter, cfg.d), dtype=dtype))  # identity at init
    store.add(b + "bu", np.zeros(cfg.d, dtype=dtype))


def shortcut_param_names(cfg: ModelConfig, prefix=""):
    names = []
    for l in range(1, cfg.L + 1):
        names += [f"{prefix}router{l}.{p}" for p in ("w1", "b1", "w2", "b2")]
    for k in range(cfg.L + 1):
        names += [f"{prefix}adapter{k}.{p}" for p in ("down", "bd", "up", "bu")]
    return names


# ---------------------------------------------------------------------------
# autodiff-tracked forms (training)
# ---------------------------------------------------------------------------

def route(store, l, h: Tensor, prefix="") -> Tensor:
    """Exit confidence w in (0,1) for layer l given the layer-(l-1) state.

    h (..., d) -> (..., 1)."""
    b = f"{prefix}router{l}."
    z = nm.gelu(nm.affine(h, store[b + "w1"], store[b + "b1"]))
    return nm.sigmoid(nm.affine(z, store[b + "w2"], store[b + "b2"]))


def adapter_apply(store, k, h: Tensor, prefix="") -> Tensor:
    """g_k(h) = h + up(gelu(down(h)))."""
    b = f"{prefix}adapter{k}."
    z = nm.gelu(nm.affine(h, store[b + "down"], store[b + "bd"]))
    return h + nm.affine(z, store[b + "up"], store[b + "bu"])


def mixed_depth(store, l, h_prev_layer: Tensor, layer_fn, prefix="", w: Tensor = None) -> Tensor:
    """Soft depth-shortcut mixture:
        g_{l-1}(h) * w + f_l(h) * (1 - w),  w = route(l, h).

    layer_fn computes the vanilla f_l output for h_prev_layer; w may be
    supplied to reuse an already-computed routing decision."""
    if w is None:
        w = route(store, l, h_prev_layer, prefix)
    short = adapter_apply(store, l - 1, h_prev_layer, prefix)
    van = layer_fn(h_prev_layer)
    return short * w + van * (nm.scale(w, -1.0) + 1.0)


def mixed_full(store, l, h_prev_layer: Tensor, h_prev_step, layer_fn, prefix="",
               w: Tensor = None) -> Tensor:
    """Combined depth+step mixture:
        (g_{l-1}(h_prev_layer) + g_l(h_prev_step)) * w + f_l(h_prev_layer) * (1 - w)

    h_prev_step is the layer-l state of the previous decoding step (or None at
    the first reasoning position, where the step term is dropped and the form
    reduces to the pure depth mixture). One shared w gates both terms."""
    if h_prev_step is None:
        return mixed_depth(store, l, h_prev_layer, layer_fn, prefix, w=w)
    if w is None:
        w = route(store, l, h_prev_layer, prefix)
    short = adapter_apply(store, l - 1, h_prev_layer, prefix) + adapter_apply(store, l, h_prev_step, prefix)
    van = layer_fn(h_prev_layer)
    return short * w + van * (nm.scale(w, -1.0) + 1.0)


def exit_decision(w: float, lam_depth: float):
    """Hard inference rule: exit iff w > lam_depth (strictly).

    lam_depth = 1.0 can never fire since sigmoid output is < 1."""
    return w > lam_depth


# ---------------------------------------------------------------------------
# numpy forms (inference)
# ---------------------------------------------------------------------------

def route_np(store, l, h, prefix=""):
    b = f"{prefix}router{l}."
    z = _np_gelu(_mm(h, _w(store, b + "w1")) + _w(store, b + "b1"))
    logit = _mm(z, _w(store, b + "w2")) + _w(store, b + "b2")
    return float(1.0 / (1.0 + np.exp(-logit[0])))


def adapter_apply_np(store, k, h, prefix=""):
    b = f"{prefix}adapter{k}."
    z = _np_gelu(_mm(h, _w(store, b + "down")) + _w(store, b + "bd"))
    return h + _mm(z, _w(store, b + "up")) + _w(store, b + "bu")


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------

@dataclass
class ShortcutModel:
    """A transformer parameter stack plus (optionally) routers and adapters.

    stage: "teacher" (CoT, token space), "student" (latent, full depth) or
    "system-1.5" (latent + shortcuts; transformer parameters frozen)."""
    cfg: ModelConfig
    params: ParamStore
    stage: str
    prefix: str = ""

    @property
    def has_shortcuts(self):
        return f"{self.prefix}router1.w1" in self.params

    def frozen_backbone(self):
        from .transformer import transformer_param_names
        return all(not self.params.is_trainable(n)
                   for n in transformer_param_names(self.cfg, self.prefix))
