"""Two-stage distillation.

Stage 1 (language-to-latent alignment): a CoT teacher and a latent student
train jointly. The teacher sees the token sequence <Q : R : A> and carries
NLL over R and A. The student sees <Q : H_L_teacher : A> — the teacher's
(stop-gradient) last-layer states stand in for the reasoning-token
embeddings — and carries NLL over A plus a consistency MSE pulling its
last-layer answer states onto the teacher's.

Stage 2 (shortcut learning): the transformer backbone is inherited from the
student and frozen; only routers and adapters train. Teacher forcing is kept
fully parallel via a bootstrap chain per batch:

    teacher forward (tokens)            -> H_L_teacher
    frozen student forward (injected)   -> H_L_student
    frozen vanilla forward on X         -> reference states r_{l,t}
    mixed shortcut forward on X         -> states u_{l,t}, answer logits

where X = <Q : H_L_student : A>. Both of the last two forwards read the same
input, so with all routers forced to w=0 the mixed states equal the reference
states exactly. The early-exit loss weights per-layer state consistency by
the criticality schedule; the LM loss reaches the shortcut parameters through
the attention of answer positions over mixed reasoning states.
"""

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import ParamStore, Tensor
from .transformer import ModelConfig, embed, full_forward, init_transformer_params, lm_head, transformer_param_names
from .shortcuts import (STAGE_STUDENT, STAGE_SYSTEM15, STAGE_TEACHER, ShortcutModel,
                        adapter_apply, init_adapter_params, init_router_params, route)
from .taskgen import PAD_ID


@dataclass
class Stage1Config:
    alpha: float = 1.0          # consistency weight
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    warmup_steps: int = 200
    cosine_decay: bool = True
    final_lr_frac: float = 0.1
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")


@dataclass
class Stage2Config:
    beta: float = 1.0           # early-exit weight
    lr: float = 1e-3
    epochs: int = 4
    batch_size: int = 64
    seed: int = 1
    warmup_steps: int = 100
    cosine_decay: bool = True
    final_lr_frac: float = 0.1
    clip_norm: float = 1.0
    router_bias_init: float = 0.85   # sigmoid(0.85) ~ 0.7: mostly-shortcut start

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")


def early_exit_weight(l: int, L: int, c: int) -> float:
    """Criticality-scheduled weight for the layer-l consistency term.

    Uses the triangular prefix ratio S_l/S_L with S_k = k(k+1)/2: non-critical
    steps (c=0) are weighted toward deep-layer consistency (cheap to deviate
    early = may exit early), critical steps (c=1) the complement."""
    if not 1 <= l <= L:
        raise ValueError("layer index out of range")
    ratio = (l * (l + 1)) / (L * (L + 1))
    return (1 - c) * ratio + c * (1.0 - ratio)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

class Batch:
    """Padded token matrix plus every mask the two stages need.

    Masks are over *logit positions* for NLL (position t scores token t+1)
    and over *sequence positions* for state-level terms."""

    def __init__(self, samples, dtype=np.float32):
        self.samples = samples
        B = len(samples)
        self.t_q = np.array([s.t_q for s in samples])
        self.t_r = np.array([s.t_r for s in samples])
        self.t_a = np.array([s.t_a for s in samples])
        lens = self.t_q + self.t_r + self.t_a
        T = int(lens.max())
        self.tokens = np.full((B, T), PAD_ID, dtype=np.int64)
        self.crit = np.zeros((B, T), dtype=np.int64)
        for b, s in enumerate(samples):
            toks = s.full_tokens()
            self.tokens[b, :len(toks)] = toks
            cs = s.token_criticality()
            self.crit[b, s.t_q:s.t_q + s.t_r] = cs
        self.targets = np.zeros((B, T), dtype=np.int64)
        self.targets[:, :-1] = self.tokens[:, 1:]

        pos = np.arange(T)[None, :]
        tq, tr, ta = self.t_q[:, None], self.t_r[:, None], self.t_a[:, None]
        self.reason_mask = ((pos >= tq) & (pos < tq + tr)).astype(dtype)       # R slots
        self.answer_mask = ((pos >= tq + tr) & (pos < tq + tr + ta)).astype(dtype)
        self.step_mask = ((pos > tq) & (pos < tq + tr)).astype(dtype)          # R slots minus the first
        self.teacher_nll_mask = ((pos >= tq - 1) & (pos < tq + tr + ta - 1)).astype(dtype)
        self.student_nll_mask = ((pos >= tq + tr - 1) & (pos < tq + tr + ta - 1)).astype(dtype)

    def __len__(self):
        return len(self.samples)

    @property
    def T(self):
        return self.tokens.shape[1]


def _shift_right(arr):
    """arr (B, T, d) -> same with rows moved one position later; row 0 zeroed."""
    out = np.zeros_like(arr)
    out[:, 1:] = arr[:, :-1]
    return out


def _masked_mean_sq(diff: Tensor, weights) -> Tensor:
    """sum over (b, t) of weights[b,t] * mean_d(diff[b,t]^2)."""
    sq = nm.mean(diff * diff, axis=2)
    return nm.sum_(sq * weights)


def build_student_input(student_store, cfg, batch: Batch, injected, prefix="") -> Tensor:
    """<Q : injected-states : A> as layer-0 input for a latent model.

    injected (B, T, d) must already be zero outside reasoning slots; token
    embeddings are kept at Q and A positions, and position embeddings apply
    everywhere (injected states included)."""
    dtype = student_store[prefix + "tok_emb"].dtype
    keep = (1.0 - batch.reason_mask)[:, :, None].astype(dtype)
    tok = nm.embedding(student_store[prefix + "tok_emb"], batch.tokens)
    pos = student_store[prefix + "pos_emb"][0:batch.T]
    return tok * keep + Tensor(injected.astype(dtype)) + pos


def inject_rows(last_layer_states, batch: Batch):
    """Reasoning-slot inputs: slot t receives the state from position t-1
    (the state whose next-token prediction is slot t's token)."""
    return _shift_right(last_layer_states) * batch.reason_mask[:, :, None].astype(last_layer_states.dtype)


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------

def stage1_step(teacher_store, student_store, cfg: ModelConfig, batch: Batch, alpha: float,
                pinned_teacher_states=None):
    """Loss for one stage-1 batch. Returns (total, parts dict).

    Caller is responsible for backward + optimizer steps on both stores.
    pinned_teacher_states replaces the teacher's last-layer states in the
    injection/consistency roles; the finite-difference oracle uses it to hold
    the stop-gradient quantities constant while perturbing teacher weights."""
    B = len(batch)
    t_states, t_logits = full_forward(teacher_store, cfg, tokens=batch.tokens)
    l_teacher = nm.scale(nm.nll(t_logits, batch.targets, batch.teacher_nll_mask), 1.0 / B)

    # stop-gradient: raw values only
    h_teacher_top = t_states[cfg.L].data if pinned_teacher_states is None else pinned_teacher_states
    x0 = build_student_input(student_store, cfg, batch, inject_rows(h_teacher_top, batch))
    s_states, s_logits = full_forward(student_store, cfg, x0=x0)
    l_student = nm.scale(nm.nll(s_logits, batch.targets, batch.student_nll_mask), 1.0 / B)

    w_ans = batch.answer_mask / np.maximum(batch.t_a[:, None], 1)
    diff = s_states[cfg.L] - Tensor(h_teacher_top)
    l_cons = nm.scale(_masked_mean_sq(diff, w_ans.astype(h_teacher_top.dtype)), 1.0 / B)

    total = l_teacher + l_student + nm.scale(l_cons, alpha)
    parts = {"l_teacher_lm": l_teacher.item(), "l_student_lm": l_student.item(),
             "l_consistency": l_cons.item(), "total": total.item()}
    return total, parts


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------

def mixed_forward(sys15_store, cfg: ModelConfig, x0: Tensor, ref_states, batch: Batch, prefix=""):
    """Shortcut-mixed forward over <Q : injected : A>.

    Reasoning positions take the soft depth+step mixture; question and answer
    positions stay vanilla. ref_states[l] (numpy) supplies the teacher-forced
    step-shortcut inputs. Returns (per-layer mixed states u, per-layer w)."""
    dtype = x0.dtype
    rmask = batch.reason_mask[:, :, None].astype(dtype)
    smask = batch.step_mask[:, :, None].astype(dtype)
    from .transformer import layer_forward_batch

    u = x0
    us, ws = [x0], [None]
    for l in range(1, cfg.L + 1):
        w = route(sys15_store, l, u, prefix)
        van = layer_forward_batch(sys15_store, cfg, l, u, prefix)
        short = adapter_apply(sys15_store, l - 1, u, prefix)
        step_in = Tensor(_shift_right(ref_states[l]))
        short = short + adapter_apply(sys15_store, l, step_in, prefix) * smask
        # u_l = van + (short - van) * w on reasoning positions, van elsewhere
        u = van + (short - van) * (w * rmask)
        us.append(u)
        ws.append(w)
    return us, ws


def stage2_prepare(teacher_store, student_store, sys15_store, cfg: ModelConfig,
                   batch: Batch, prefix=""):
    """Teacher-forcing bootstrap for one stage-2 batch (all stop-gradient).

    teacher(tokens) -> H_L_teacher; frozen student on <Q:H_L_teacher:A> ->
    H_L_student; the system-1.5 input is X = <Q:H_L_student:A>, and the
    frozen backbone's vanilla states on X are the consistency targets and
    step-shortcut inputs. Returns (x0 array, reference states per layer)."""
    with nm.no_grad():
        t_states, _ = full_forward(teacher_store, cfg, tokens=batch.tokens)
        x_student = build_student_input(student_store, cfg, batch,
                                        inject_rows(t_states[cfg.L].data, batch))
        s_states, _ = full_forward(student_store, cfg, x0=x_student)
        x = build_student_input(sys15_store, cfg, batch,
                                inject_rows(s_states[cfg.L].data, batch), prefix)
        ref_states, _ = full_forward(sys15_store, cfg, x0=x, prefix=prefix)
    return x.data, [st.data for st in ref_states]


def stage2_loss(sys15_store, cfg: ModelConfig, x0, ref, batch: Batch, beta: float, prefix=""):
    """Stage-2 loss given a prepared bootstrap: answer NLL + beta * early-exit."""
    B = len(batch)
    us, _ = mixed_forward(sys15_store, cfg, Tensor(x0), ref, batch, prefix)
    logits = lm_head(sys15_store, cfg, us[cfg.L], prefix)
    l_lm = nm.scale(nm.nll(logits, batch.targets, batch.student_nll_mask), 1.0 / B)

    dtype = np.asarray(x0).dtype
    norm = (batch.reason_mask / np.maximum((cfg.L * batch.t_r)[:, None], 1)).astype(dtype)
    l_ee = None
    for l in range(1, cfg.L + 1):
        ratio = (l * (l + 1)) / (cfg.L * (cfg.L + 1))
        e_l = np.where(batch.crit == 1, 1.0 - ratio, ratio).astype(dtype) * norm
        term = _masked_mean_sq(us[l] - Tensor(ref[l]), e_l)
        l_ee = term if l_ee is None else l_ee + term
    l_ee = nm.scale(l_ee, 1.0 / B)

    total = l_lm + nm.scale(l_ee, beta)
    parts = {"l_lm": l_lm.item(), "l_early_exit": l_ee.item(), "total": total.item()}
    return total, parts


def stage2_step(teacher_store, student_store, sys15_store, cfg: ModelConfig,
                batch: Batch, beta: float, prefix=""):
    """Loss for one stage-2 batch: bootstrap + mixed forward.

    Only router/adapter parameters may carry gradients afterwards; the frozen
    backbone is checked by the caller."""
    x0, ref = stage2_prepare(teacher_store, student_store, sys15_store, cfg, batch, prefix)
    return stage2_loss(sys15_store, cfg, x0, ref, batch, beta, prefix)


# ---------------------------------------------------------------------------
# model construction
# ---------------------------------------------------------------------------

def init_stage1_models(cfg: ModelConfig, seed: int, dtype=np.float32):
    """Teacher and student transformers with bitwise-identical initialization."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    proto = ParamStore()
    init_transformer_params(proto, cfg, rng, dtype=dtype)
    teacher, student = ParamStore(), ParamStore()
    for name, t in proto.items():
        teacher.add(name, t.data.copy())
        student.add(name, t.data.copy())
    return (ShortcutModel(cfg, teacher, STAGE_TEACHER),
            ShortcutModel(cfg, student, STAGE_STUDENT))


def init_system15(student: ShortcutModel, seed: int, router_bias_init: float,
                  dtype=np.float32) -> ShortcutModel:
    """Inherit the student's transformer (frozen) and add fresh shortcut modules.

    Adapters start as exact identities (zero up-projection). Router biases
    start positive (mostly-shortcut): the stage-2 loss can only push
    confidences down, so exits at a mid-range threshold exist only if
    training starts above it and suppression is selective.
    """
    cfg = student.cfg
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    store = ParamStore()
    for name, t in student.params.items():
        store.add(name, t.data.astype(dtype), trainable=False)
    for l in range(1, cfg.L + 1):
        init_router_params(store, cfg, rng, l, bias_init=router_bias_init, dtype=dtype)
    for k in range(cfg.L + 1):
        init_adapter_params(store, cfg, rng, k, dtype=dtype)
    return ShortcutModel(cfg, store, STAGE_SYSTEM15)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _lr_at(step, total_steps, cfg):
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    if not cfg.cosine_decay:
        return cfg.lr
    frac = (step - cfg.warmup_steps) / max(1, total_steps - cfg.warmup_steps)
    lo = cfg.lr * cfg.final_lr_frac
    return lo + 0.5 * (cfg.lr - lo) * (1 + math.cos(math.pi * min(frac, 1.0)))


def _batches(samples, batch_size, rng):
    """Shuffled, length-bucketed batches (deterministic given rng state)."""
    order = rng.permutation(len(samples))
    block = batch_size * 16
    batches = []
    for start in range(0, len(order), block):
        chunk = sorted(order[start:start + block],
                       key=lambda i: (samples[i].t_q + samples[i].t_r + samples[i].t_a, i))
        for b in range(0, len(chunk), batch_size):
            batches.append([samples[i] for i in chunk[b:b + batch_size]])
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


class MetricsLog:
    def __init__(self, path=None):
        self.path = path
        self.rows = []
        if path:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            self._f = open(path, "w")
        else:
            self._f = None

    def write(self, row):
        self.rows.append(row)
        if self._f:
            self._f.write(json.dumps(row) + "\n")
            self._f.flush()

    def close(self):
        if self._f:
            self._f.close()


def train_stage1(samples, cfg: ModelConfig, s1: Stage1Config, log_path=None, progress=None):
    """Joint teacher+student training. Returns (teacher, student, log rows)."""
    teacher, student = init_stage1_models(cfg, s1.seed)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=s1.seed, spawn_key=(1,)))
    log = MetricsLog(log_path)
    total_steps = s1.epochs * max(1, len(samples) // s1.batch_size)
    step = 0
    for epoch in range(s1.epochs):
        for batch_samples in _batches(samples, s1.batch_size, rng):
            batch = Batch(batch_samples)
            teacher.params.zero_grads()
            student.params.zero_grads()
            loss, parts = stage1_step(teacher.params, student.params, cfg, batch, s1.alpha)
            loss.backward()
            lr = _lr_at(step, total_steps, s1)
            nm.adam_step(teacher.params, lr, clip_norm=s1.clip_norm)
            nm.adam_step(student.params, lr, clip_norm=s1.clip_norm)
            parts.update({"stage": 1, "epoch": epoch, "step": step, "lr": lr})
            log.write(parts)
            step += 1
            if progress and step % 50 == 0:
                progress(parts)
    log.close()
    return teacher, student, log.rows


def train_stage2(samples, teacher: ShortcutModel, student: ShortcutModel,
                 s2: Stage2Config, log_path=None, progress=None) -> ShortcutModel:
    """Shortcut learning on a frozen backbone. Returns the system-1.5 model."""
    cfg = student.cfg
    sys15 = init_system15(student, s2.seed, s2.router_bias_init)
    frozen_names = transformer_param_names(cfg)
    frozen_before = {n: sys15.params[n].data.copy() for n in frozen_names}
    rng = np.random.default_rng(np.random.SeedSequence(entropy=s2.seed, spawn_key=(2,)))
    log = MetricsLog(log_path)
    total_steps = s2.epochs * max(1, len(samples) // s2.batch_size)
    step = 0
    for epoch in range(s2.epochs):
        for batch_samples in _batches(samples, s2.batch_size, rng):
            batch = Batch(batch_samples)
            sys15.params.zero_grads()
            loss, parts = stage2_step(teacher.params, student.params, sys15.params,
                                      cfg, batch, s2.beta)
            loss.backward()
            for n in frozen_names:
                if sys15.params[n].grad is not None:
                    raise nm.NumericsError(f"frozen parameter '{n}' received a gradient")
            nm.adam_step(sys15.params, _lr_at(step, total_steps, s2), clip_norm=s2.clip_norm)
            parts.update({"stage": 2, "epoch": epoch, "step": step})
            log.write(parts)
            step += 1
            if progress and step % 50 == 0:
                progress(parts)
    for n in frozen_names:
        if not np.array_equal(sys15.params[n].data, frozen_before[n]):
            raise nm.NumericsError(f"frozen parameter '{n}' changed during stage 2")
    log.close()
    return sys15
