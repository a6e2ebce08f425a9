"""FLOPs accounting, evaluation metrics, and the threshold sweep.

FLOPs are counted as multiply-accumulates of the matmul-shaped work (QKV/O
projections, attention scores and mixing, FFN, routers, adapters, KV fills,
LM head). The analytic formulas below are cross-checked against the engine's
instrumented MAC counter, which tallies the actual array shapes executed.

"Per-step FLOPs" divides a run's decode-phase FLOPs by the number of
produced steps — latent steps for latent modes, generated reasoning tokens
for the CoT baseline. The FLOPs-reduction rate of a method is the CoT
baseline's per-step FLOPs over the method's.
"""

import csv
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import numerics as nm
from .inference import BudgetConfig, ReasoningTrace, cot_decode, latent_decode
from .shortcuts import ShortcutModel
from .taskgen import A_MARK_ID, EOA_ID
from .training import Batch, build_student_input, inject_rows, mixed_forward
from .transformer import ModelConfig, full_forward
from .inference import extract_answer_digits


@dataclass
class FlopsModel:
    """Analytic per-event MAC counts as functions of the model shape."""
    cfg: ModelConfig

    def f_layer(self, ctx: int) -> float:
        """One vanilla layer at one position attending over `ctx` keys."""
        d, dff = self.cfg.d, self.cfg.d_ff
        return 4 * d * d + 2 * ctx * d + 2 * d * dff

    def f_router(self) -> float:
        d, da = self.cfg.d, self.cfg.d_adapter
        return d * da + da

    def f_adapter(self) -> float:
        return 2 * self.cfg.d * self.cfg.d_adapter

    def f_kvfill(self) -> float:
        return 2 * self.cfg.d * self.cfg.d

    def f_lmhead(self) -> float:
        return self.cfg.d * self.cfg.V

    def f_prompt(self, t_q: int) -> float:
        """Parallel full-depth encode of a t_q-token question."""
        return _prompt_flops(self, t_q)

    def full_depth_step(self, ctx: int, with_routers: bool) -> float:
        """Cost of one full-depth latent step (the lam_depth=1 degenerate path)."""
        f = self.cfg.L * self.f_layer(ctx)
        if with_routers:
            f += self.cfg.L * self.f_router()
        return f


def _prompt_flops(fm: FlopsModel, t_q: int) -> float:
    """Parallel prompt encoding computes the full TxT score matrix (the causal
    mask discards the upper triangle after the fact), so attention costs
    2*T^2*d per layer rather than the incremental sum over contexts."""
    d, dff, L = fm.cfg.d, fm.cfg.d_ff, fm.cfg.L
    per_layer = t_q * (4 * d * d + 2 * d * dff) + 2 * t_q * t_q * d
    return L * per_layer


def count_flops(trace: ReasoningTrace, cfg: ModelConfig) -> dict:
    """Analytic FLOPs breakdown for one latent decode trace.

    Returns totals by phase and by component; also annotates trace.flops."""
    fm = FlopsModel(cfg)
    prompt = _prompt_flops(fm, trace.t_q)
    per_step = []
    latent = {"vanilla": 0.0, "adapter": 0.0, "router": 0.0, "kvfill": 0.0}
    for s in trace.steps:
        f = (sum(fm.f_layer(c) for c in s.vanilla_ctx)
             + s.n_adapter * fm.f_adapter()
             + s.n_router * fm.f_router()
             + s.n_kvfill * fm.f_kvfill())
        per_step.append(f)
        latent["vanilla"] += sum(fm.f_layer(c) for c in s.vanilla_ctx)
        latent["adapter"] += s.n_adapter * fm.f_adapter()
        latent["router"] += s.n_router * fm.f_router()
        latent["kvfill"] += s.n_kvfill * fm.f_kvfill()
    answer = 0.0
    for a in trace.answer_steps:
        answer += cfg.L * fm.f_layer(a.position + 1) + a.n_kvfill * fm.f_kvfill() + fm.f_lmhead()
    breakdown = {
        "prompt": prompt,
        "latent": sum(latent.values()),
        "latent_by_kind": latent,
        "answer": answer,
        "total": prompt + sum(latent.values()) + answer,
        "per_step": per_step,
    }
    trace.flops = breakdown
    return breakdown


def cot_flops(record: dict, cfg: ModelConfig) -> dict:
    """Analytic FLOPs for a CoT decode record (full depth at every token)."""
    fm = FlopsModel(cfg)
    prompt = _prompt_flops(fm, record["t_q"])
    decode = 0.0
    # token i is generated from the state at position t_q - 1 + i
    for i in range(record["n_generated"]):
        pos = record["t_q"] + i
        if i > 0:
            decode += cfg.L * fm.f_layer(pos)
    decode += record["n_lm_head"] * fm.f_lmhead()
    return {"prompt": prompt, "decode": decode, "total": prompt + decode}


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    mode: str
    accuracy: float
    n_samples: int
    mean_steps: float              # latent steps, or generated reasoning tokens for CoT
    mean_flops_per_step: float
    mean_total_flops: float
    wall_ns_total: int
    flops_reduction_vs_cot: float = None
    speedup_vs_cot: float = None
    token_reduction_vs_cot: float = None
    mean_exit_layer: float = None
    full_depth_step_flops: float = None
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        return {k: v for k, v in self.__dict__.items()}

    def save(self, path):
        tmp = path + ".tmp"
        with open(tmp, "w") as f:
            json.dump(self.to_dict(), f, indent=2, default=float)
        os.replace(tmp, path)


def token_reduction(method_steps: float, cot_reasoning_tokens: float) -> float:
    """1 - (latent steps) / (CoT reasoning tokens)."""
    return 1.0 - method_steps / cot_reasoning_tokens


def evaluate(model: ShortcutModel, samples, budget: BudgetConfig, mode: str,
             cot_baseline: MetricsReport = None, timing_subset: int = 200,
             timing_reps: int = 5, max_cot_tokens: int = 140) -> MetricsReport:
    """Run one decode mode over a dataset and aggregate metrics.

    mode: "cot" (token-space teacher), "latent_full" (full-depth latent, no
    routers), or "system15" (dynamic shortcuts). Wall-clock timing repeats a
    subset of samples after a warm-up and takes the median rep total.
    """
    cfg = model.cfg
    routers = mode == "system15"
    n_correct = 0
    steps_total = 0.0
    flops_total = 0.0
    decode_flops_total = 0.0
    exit_layers = []
    for s in samples:
        if mode == "cot":
            out, rec = cot_decode(model, s.question_tokens, max_new_tokens=max_cot_tokens)
            fl = cot_flops(rec, cfg)
            n_r = out.index(A_MARK_ID) if A_MARK_ID in out else len(out)
            steps_total += n_r
            flops_total += fl["total"]
            decode_flops_total += fl["decode"]
        else:
            out, trace = latent_decode(model, s.question_tokens, budget, routers_active=routers)
            fl = count_flops(trace, cfg)
            steps_total += len(trace.steps)
            flops_total += fl["total"]
            decode_flops_total += fl["latent"]
            exit_layers.extend(st.exit_layer for st in trace.steps)
        if extract_answer_digits(out) == s.answer_digit_tokens():
            n_correct += 1

    if timing_subset > 0 and timing_reps > 0:
        wall = _timed_wall_ns(model, samples[:timing_subset], budget, mode,
                              timing_reps, max_cot_tokens)
    else:
        wall = 0
    n = len(samples)
    mean_steps = steps_total / n
    fm = FlopsModel(cfg)
    mean_ctx = np.mean([s.t_q + budget.lam_step for s in samples])
    report = MetricsReport(
        mode=mode,
        accuracy=n_correct / n,
        n_samples=n,
        mean_steps=mean_steps,
        mean_flops_per_step=decode_flops_total / max(steps_total, 1),
        mean_total_flops=flops_total / n,
        wall_ns_total=wall,
        mean_exit_layer=float(np.mean(exit_layers)) if exit_layers else None,
        full_depth_step_flops=fm.full_depth_step(int(mean_ctx), with_routers=routers),
    )
    if cot_baseline is not None and mode != "cot":
        report.flops_reduction_vs_cot = cot_baseline.mean_flops_per_step / report.mean_flops_per_step
        report.speedup_vs_cot = cot_baseline.wall_ns_total / max(wall, 1)
        report.token_reduction_vs_cot = token_reduction(mean_steps, cot_baseline.mean_steps)
    return report


def _timed_wall_ns(model, subset, budget, mode, reps, max_cot_tokens):
    """Median total wall time over `reps` passes after one warm-up pass."""
    def one_pass():
        t0 = time.perf_counter_ns()
        for s in subset:
            if mode == "cot":
                cot_decode(model, s.question_tokens, max_new_tokens=max_cot_tokens)
            else:
                latent_decode(model, s.question_tokens, budget,
                              routers_active=(mode == "system15"))
        return time.perf_counter_ns() - t0

    one_pass()
    times = sorted(one_pass() for _ in range(reps))
    return times[len(times) // 2]


# ---------------------------------------------------------------------------
# teacher-forced exit diagnostics
# ---------------------------------------------------------------------------

def diagnostic_exit_stats(teacher: ShortcutModel, student: ShortcutModel,
                          sys15: ShortcutModel, samples, lam_depth: float,
                          batch_size: int = 64):
    """Hypothetical exit layers on teacher-forced reasoning positions.

    Replays the stage-2 forward (no gradients), takes each reasoning
    position's router confidences across layers, and defines its exit layer
    as the first layer whose confidence exceeds lam_depth (else L). Returns
    mean exit layer grouped by the position's criticality bit."""
    cfg = sys15.cfg
    by_c = {0: [], 1: []}
    for start in range(0, len(samples), batch_size):
        batch = Batch(samples[start:start + batch_size])
        with nm.no_grad():
            t_states, _ = full_forward(teacher.params, cfg, tokens=batch.tokens)
            x_student = build_student_input(student.params, cfg, batch,
                                            inject_rows(t_states[cfg.L].data, batch))
            s_states, _ = full_forward(student.params, cfg, x0=x_student)
            x = build_student_input(sys15.params, cfg, batch,
                                    inject_rows(s_states[cfg.L].data, batch))
            ref_states, _ = full_forward(sys15.params, cfg, x0=x)
            _, ws = mixed_forward(sys15.params, cfg, x, [st.data for st in ref_states], batch)
        w_stack = np.concatenate([w.data for w in ws[1:]], axis=2)  # (B, T, L)
        exceeds = w_stack > lam_depth
        exit_layer = np.where(exceeds.any(axis=2), exceeds.argmax(axis=2) + 1, cfg.L)
        for b in range(len(batch)):
            for t in range(batch.t_q[b], batch.t_q[b] + batch.t_r[b]):
                by_c[int(batch.crit[b, t])].append(int(exit_layer[b, t]))
    return {
        "mean_exit_layer_c0": float(np.mean(by_c[0])) if by_c[0] else float(cfg.L),
        "mean_exit_layer_c1": float(np.mean(by_c[1])) if by_c[1] else float(cfg.L),
        "n_c0": len(by_c[0]),
        "n_c1": len(by_c[1]),
    }


# ---------------------------------------------------------------------------
# threshold sweep
# ---------------------------------------------------------------------------

def sweep(sys15: ShortcutModel, samples, depth_grid, step_grid,
          teacher: ShortcutModel = None, student: ShortcutModel = None,
          max_answer_len: int = 6, timing_subset: int = 0):
    """Evaluate every (lam_depth, lam_step) pair. Returns a list of row dicts.

    Exit-layer-by-criticality columns come from the teacher-forced diagnostic
    pass (free-running latent steps carry no step alignment); they vary with
    lam_depth only."""
    rows = []
    diag_cache = {}
    for lam_depth in depth_grid:
        if teacher is not None and student is not None:
            diag_cache[lam_depth] = diagnostic_exit_stats(teacher, student, sys15,
                                                          samples, lam_depth)
        for lam_step in step_grid:
            budget = BudgetConfig(lam_depth=lam_depth, lam_step=int(lam_step),
                                  max_answer_len=max_answer_len)
            rep = evaluate(sys15, samples, budget, "system15", timing_subset=timing_subset,
                           timing_reps=1 if timing_subset else 0)
            row = {
                "lambda_depth": lam_depth,
                "lambda_step": int(lam_step),
                "accuracy": rep.accuracy,
                "mean_flops_per_step": rep.mean_flops_per_step,
                "mean_exit_layer_c0": diag_cache.get(lam_depth, {}).get("mean_exit_layer_c0"),
                "mean_exit_layer_c1": diag_cache.get(lam_depth, {}).get("mean_exit_layer_c1"),
            }
            rows.append(row)
    return rows


def sweep_to_csv(rows, path):
    fields = ["lambda_depth", "lambda_step", "accuracy", "mean_flops_per_step",
              "mean_exit_layer_c0", "mean_exit_layer_c1"]
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k) for k in fields})
    os.replace(tmp, path)


def spearman_by_depth(rows):
    """Spearman rho of accuracy vs lam_step at each fixed lam_depth."""
    out = {}
    depths = sorted({r["lambda_depth"] for r in rows})
    for d in depths:
        pts = sorted((r["lambda_step"], r["accuracy"]) for r in rows if r["lambda_depth"] == d)
        xs, ys = zip(*pts)
        if len(set(ys)) == 1:
            out[d] = 0.0
        else:
            out[d] = float(stats.spearmanr(xs, ys).statistic)
    return out


def pareto_frontier(rows):
    """(flops, accuracy) rows not dominated by any other row."""
    front = []
    for r in rows:
        dominated = any(o["accuracy"] >= r["accuracy"] and
                        o["mean_flops_per_step"] < r["mean_flops_per_step"] and
                        (o["accuracy"] > r["accuracy"] or
                         o["mean_flops_per_step"] < r["mean_flops_per_step"])
                        for o in rows)
        if not dominated:
            front.append(r)
    return sorted(front, key=lambda r: r["mean_flops_per_step"])
