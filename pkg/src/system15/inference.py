"""Dynamic latent decoding with depth exits and step carries.

One decode session = (1) full vanilla encoding of the question, (2) a fixed
number of latent steps in which the router may exit a layer early (the state
then rides an adapter to the next step at the same layer), (3) greedy
full-depth decoding of the answer tokens.

A traversal that reaches layer L closes a *cycle*; the layer-L state is fed
back as the next latent position's input. If the step budget runs out
mid-cycle, the remaining layers run vanilla once so answer decoding always
starts from a layer-L state.

Positions exited early leave KV gaps at the layers they skipped; attention
from later positions fills them lazily by pushing the position's deepest
state through the key/value projections only (state-copy fill).

Every compute event lands in a ReasoningTrace; benchmark.count_flops turns
the event log into analytic FLOPs.
"""

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .shortcuts import STAGE_SYSTEM15, ShortcutModel, adapter_apply_np, exit_decision, route_np
from .taskgen import A_MARK_ID, EOA_ID
from .transformer import (KvCache, ModelConfig, _mm, _np_gelu, _np_layer_norm, _w,
                          layer_forward, lm_head_np, write_kv)


@dataclass
class BudgetConfig:
    lam_depth: float = 0.5      # exit iff router confidence > lam_depth
    lam_step: int = 2           # latent decoding steps before the answer
    max_answer_len: int = 6

    def __post_init__(self):
        if not 0.0 <= self.lam_depth <= 1.0:
            raise ValueError("lam_depth must lie in [0, 1]")
        if self.lam_step < 1:
            raise ValueError("lam_step must be >= 1")


@dataclass
class LatentStep:
    position: int
    cycle: int
    entry_layer: int
    exit_layer: int = 0
    ws: list = field(default_factory=list)     # router confidences, entry..exit
    n_vanilla: int = 0
    n_forced: int = 0                          # vanilla layers from force-completion
    n_adapter: int = 0
    n_router: int = 0
    n_kvfill: int = 0
    vanilla_ctx: list = field(default_factory=list)


@dataclass
class AnswerStep:
    position: int
    n_kvfill: int = 0


@dataclass
class ReasoningTrace:
    t_q: int
    steps: list = field(default_factory=list)          # LatentStep
    answer_steps: list = field(default_factory=list)   # AnswerStep
    cycles: int = 0
    answer_tokens: list = field(default_factory=list)  # generated (digits + <eoa>)
    ns: int = 0
    eoa_found: bool = True
    flops: dict = None                                 # set by benchmark.count_flops

    def check_invariants(self):
        """Step-chain structure the decode loop must maintain."""
        assert all(s.exit_layer >= s.entry_layer for s in self.steps)
        prev = None
        for s in self.steps:
            if prev is not None:
                if prev.cycle == s.cycle:
                    assert s.entry_layer == prev.exit_layer
                else:
                    assert s.entry_layer == 1
            prev = s
        return True

    def to_json(self):
        return json.dumps({
            "steps": [{"entry": s.entry_layer, "exit": s.exit_layer, "w": [round(w, 6) for w in s.ws],
                       "flops": None if self.flops is None else self.flops["per_step"][i]}
                      for i, s in enumerate(self.steps)],
            "cycles": self.cycles,
            "answer": self.answer_tokens,
            "ns": self.ns,
        })


# ---------------------------------------------------------------------------
# batched numpy forward (prompt encoding & parallel reference)
# ---------------------------------------------------------------------------

def np_full_forward(store, cfg: ModelConfig, x0, prefix=""):
    """Vanilla parallel forward over raw input rows x0 (T, d).

    Returns (states [L+1 x (T, d)], k_layers, v_layers) — the K/V tensors let
    prompt encoding seed an incremental cache."""
    T, d = x0.shape
    h, hd = cfg.n_heads, cfg.head_dim
    states = [x0]
    ks, vs = [None], [None]
    x = x0
    mask = np.triu(np.full((T, T), -1e9, dtype=x0.dtype), k=1)
    for l in range(1, cfg.L + 1):
        b = f"{prefix}blk{l}."
        a = _np_layer_norm(x, _w(store, b + "ln1_g"), _w(store, b + "ln1_b"))
        q = _mm(a, _w(store, b + "wq")) + _w(store, b + "bq")
        k = _mm(a, _w(store, b + "wk")) + _w(store, b + "bk")
        v = _mm(a, _w(store, b + "wv")) + _w(store, b + "bv")
        qh = q.reshape(T, h, hd).transpose(1, 0, 2)
        kh = k.reshape(T, h, hd).transpose(1, 0, 2)
        vh = v.reshape(T, h, hd).transpose(1, 0, 2)
        scores = np.matmul(qh, kh.transpose(0, 2, 1)) / math.sqrt(hd) + mask
        nm.record_macs(h * T * T * hd)
        scores -= scores.max(axis=-1, keepdims=True)
        wts = np.exp(scores)
        wts /= wts.sum(axis=-1, keepdims=True)
        ctx = np.matmul(wts, vh).transpose(1, 0, 2).reshape(T, d)
        nm.record_macs(h * T * T * hd)
        x = x + _mm(ctx, _w(store, b + "wo")) + _w(store, b + "bo")
        f = _np_layer_norm(x, _w(store, b + "ln2_g"), _w(store, b + "ln2_b"))
        f = _np_gelu(_mm(f, _w(store, b + "w1")) + _w(store, b + "b1"))
        x = x + _mm(f, _w(store, b + "w2")) + _w(store, b + "b2")
        states.append(x)
        ks.append(k)
        vs.append(v)
    return states, ks, vs


def embed_rows(store, cfg, tokens, prefix=""):
    tokens = np.asarray(tokens)
    return (_w(store, prefix + "tok_emb")[tokens]
            + _w(store, prefix + "pos_emb")[np.arange(len(tokens))])


def prompt_encode(store, cfg, tokens, cache: KvCache, prefix=""):
    """Full vanilla pass over the question; seeds the cache at every layer."""
    T = len(tokens)
    if T + 1 > cfg.max_len:
        raise nm.NumericsError("question does not fit max_len")
    states, ks, vs = np_full_forward(store, cfg, embed_rows(store, cfg, tokens, prefix), prefix)
    for l in range(1, cfg.L + 1):
        cache.k[l, :T] = ks[l]
        cache.v[l, :T] = vs[l]
        cache.have_kv[l, :T] = True
    cache.deepest_layer[:T] = cfg.L
    cache.deepest_state[:T] = states[cfg.L]
    cache.n_pos = T
    return states


# ---------------------------------------------------------------------------
# kv gap filling
# ---------------------------------------------------------------------------

def kv_fill(store, cfg, cache: KvCache, l: int, upto: int, prefix=""):
    """Materialize layer-l KV for every position < upto that lacks it.

    State-copy fill: the position's deepest hidden state is pushed through
    the layer's K/V projections only. Returns the number of positions filled."""
    missing = cache.missing(l, upto)
    for p in missing:
        write_kv(store, cfg, l, cache.deepest_state[p], cache, p, prefix)
    return len(missing)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def _vanilla_layer(store, cfg, l, h, cache, pos, prefix, rec):
    filled = kv_fill(store, cfg, cache, l, pos, prefix)
    out = layer_forward(store, cfg, l, h, cache, pos, prefix)
    rec.n_kvfill += filled
    if isinstance(rec, LatentStep):
        rec.n_vanilla += 1
        rec.vanilla_ctx.append(pos + 1)
    cache.note_state(pos, l, out)
    return out


def latent_decode(model: ShortcutModel, question_tokens, budget: BudgetConfig,
                  router_override=None, routers_active=True, collect_states=False):
    """Latent-space decode: returns (answer_tokens, ReasoningTrace).

    router_override(l, h, pos) -> w replaces the learned router (test stub).
    routers_active=False runs the pure full-depth latent path (the student
    model has no shortcut modules; no router cost is recorded)."""
    cfg, store, prefix = model.cfg, model.params, model.prefix
    if routers_active and not model.has_shortcuts:
        raise ValueError("model has no shortcut modules; use routers_active=False")
    t_start = time.perf_counter_ns()
    tq = len(question_tokens)
    if tq + budget.lam_step + budget.max_answer_len + 1 > cfg.max_len:
        raise nm.NumericsError("question + latent budget + answer exceeds max_len")

    cache = KvCache(cfg)
    prompt_states = prompt_encode(store, cfg, question_tokens, cache, prefix)
    trace = ReasoningTrace(t_q=tq)
    collected = []

    h_feed = prompt_states[cfg.L][tq - 1]   # layer-L state above the last question token
    carried = None                          # (layer, state) when the previous step exited below L
    cycle = 0
    pos = tq
    for _ in range(budget.lam_step):
        states_here = {}
        if carried is None:
            h = h_feed + _w(store, prefix + "pos_emb")[pos]
            rec = LatentStep(position=pos, cycle=cycle, entry_layer=1)
            cache.note_state(pos, 0, h)
            states_here[0] = h
            l_start = 1
        else:
            l_entry, h_prev = carried
            h = adapter_apply_np(store, l_entry, h_prev, prefix)
            rec = LatentStep(position=pos, cycle=cycle, entry_layer=l_entry)
            rec.n_adapter += 1
            cache.note_state(pos, l_entry, h)
            states_here[l_entry] = h
            l_start = l_entry + 1
        carried = None

        exit_layer = cfg.L
        for l in range(l_start, cfg.L + 1):
            if routers_active:
                w = router_override(l, h, pos) if router_override else route_np(store, l, h, prefix)
                rec.n_router += 1
                rec.ws.append(float(w))
                if exit_decision(w, budget.lam_depth):
                    h = adapter_apply_np(store, l - 1, h, prefix)
                    rec.n_adapter += 1
                    cache.note_state(pos, l, h)
                    states_here[l] = h
                    exit_layer = l
                    break
            h = _vanilla_layer(store, cfg, l, h, cache, pos, prefix, rec)
            states_here[l] = h
            exit_layer = l

        rec.exit_layer = exit_layer
        if exit_layer == cfg.L:
            h_feed = h
            trace.cycles += 1
            cycle += 1
        else:
            carried = (exit_layer, h)
        trace.steps.append(rec)
        if collect_states:
            collected.append(states_here)
        pos += 1

    if carried is not None:
        # budget exhausted mid-cycle: run the remaining layers vanilla once
        l_entry, h = carried
        rec = trace.steps[-1]
        back = pos - 1
        for l in range(l_entry + 1, cfg.L + 1):
            h = _vanilla_layer(store, cfg, l, h, cache, back, prefix, rec)
            rec.n_forced += 1
            if collect_states:
                collected[-1][l] = h
        h_feed = h

    answer = _greedy_answer(store, cfg, cache, pos, h_feed, budget, trace, prefix)
    trace.answer_tokens = answer
    trace.ns = time.perf_counter_ns() - t_start
    trace.check_invariants()
    if collect_states:
        return answer, trace, collected
    return answer, trace


def _greedy_answer(store, cfg, cache, pos, h_feed, budget, trace, prefix):
    """Force <a>, then decode greedily full-depth until <eoa> or the cap."""
    token = A_MARK_ID
    out = []
    for _ in range(budget.max_answer_len + 1):
        h = _w(store, prefix + "tok_emb")[token] + _w(store, prefix + "pos_emb")[pos]
        rec = AnswerStep(position=pos)
        cache.note_state(pos, 0, h)
        for l in range(1, cfg.L + 1):
            h = _vanilla_layer(store, cfg, l, h, cache, pos, prefix, rec)
        trace.answer_steps.append(rec)
        logits = lm_head_np(store, cfg, h, prefix)
        token = int(np.argmax(logits))
        pos += 1
        if token == EOA_ID:
            out.append(token)
            return out
        out.append(token)
    trace.eoa_found = False
    return out


def cot_decode(model: ShortcutModel, question_tokens, max_new_tokens=120):
    """Greedy token-space decode (the CoT teacher baseline).

    Returns (generated tokens, trace-like record with per-token positions)."""
    cfg, store, prefix = model.cfg, model.params, model.prefix
    t_start = time.perf_counter_ns()
    cache = KvCache(cfg)
    states = prompt_encode(store, cfg, question_tokens, cache, prefix)
    pos = len(question_tokens)
    h_top = states[cfg.L][pos - 1]
    out = []
    logits = lm_head_np(store, cfg, h_top, prefix)
    token = int(np.argmax(logits))
    n_lm_head = 1
    while True:
        out.append(token)
        if token == EOA_ID or len(out) >= max_new_tokens or pos >= cfg.max_len - 1:
            break
        h = _w(store, prefix + "tok_emb")[token] + _w(store, prefix + "pos_emb")[pos]
        for l in range(1, cfg.L + 1):
            h = layer_forward(store, cfg, l, h, cache, pos, prefix)
        cache.note_state(pos, cfg.L, h)
        logits = lm_head_np(store, cfg, h, prefix)
        n_lm_head += 1
        token = int(np.argmax(logits))
        pos += 1
    ns = time.perf_counter_ns() - t_start
    return out, {"t_q": len(question_tokens), "n_generated": len(out),
                 "n_lm_head": n_lm_head, "ns": ns,
                 "eoa_found": bool(out and out[-1] == EOA_ID)}


def latent_reference_states(model: ShortcutModel, question_tokens, lam_step):
    """Oracle for the full-depth latent path: rebuilt each step as a parallel
    teacher-forced pass instead of incremental cached decoding.

    Returns the list of per-step state dicts {layer: vec} for the latent
    positions, mirroring latent_decode(collect_states=True)."""
    cfg, store, prefix = model.cfg, model.params, model.prefix
    rows = embed_rows(store, cfg, question_tokens, prefix)
    tq = len(question_tokens)
    per_step = []
    for s in range(lam_step):
        states, _, _ = np_full_forward(store, cfg, rows, prefix)
        top = states[cfg.L][-1]
        pos = tq + s
        rows = np.vstack([rows, top + _w(store, prefix + "pos_emb")[pos]])
        per_step.append(None)  # filled after the final pass
    states, _, _ = np_full_forward(store, cfg, rows, prefix)
    for s in range(lam_step):
        pos = tq + s
        per_step[s] = {l: states[l][pos] for l in range(cfg.L + 1)}
    return per_step


def extract_answer_digits(tokens):
    """Digit tokens of a decoded sequence: everything after the first <a>
    (if present) and before <eoa>."""
    if A_MARK_ID in tokens:
        tokens = tokens[tokens.index(A_MARK_ID) + 1:]
    if EOA_ID in tokens:
        tokens = tokens[:tokens.index(EOA_ID)]
    return list(tokens)
