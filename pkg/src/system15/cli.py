"""Command-line entry point.

Thread count is pinned before numpy loads (numpy reads the BLAS thread env
at import), so heavy imports happen inside the command handlers. --threads 1
is the deterministic mode used for reproducibility checks; the S15_THREADS
env var is the fallback when the flag is absent.

Exit codes: 0 ok, 1 config error, 2 checkpoint/stage mismatch, 3 numeric
failure during a run.
"""

import argparse
import json
import os
import sys


def _set_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _parse_grid(text):
    return [float(x) for x in text.split(",") if x.strip()]


def main(argv=None):
    parser = argparse.ArgumentParser(prog="system15",
                                     description="shortcut latent reasoning: data, training, eval, sweeps")
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS thread count (1 = deterministic mode); default $S15_THREADS or 1")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("generate", help="write train/eval dataset files")
    p.add_argument("--config", required=True)

    p = sub.add_parser("train-stage1", help="train CoT teacher + latent student")
    p.add_argument("--config", required=True)

    p = sub.add_parser("train-stage2", help="train routers/adapters on a frozen backbone")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True, help="stage-1 checkpoint")

    p = sub.add_parser("eval", help="evaluate a checkpoint in one decode mode")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=["cot", "latent_full", "system15"], required=True)
    p.add_argument("--out", default=None, help="metrics JSON path")

    p = sub.add_parser("sweep", help="lam_depth x lam_step grid over a stage-2 checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True, help="stage-2 checkpoint")
    p.add_argument("--stage1-ckpt", default=None, help="adds teacher-forced exit diagnostics")
    p.add_argument("--depth-grid", default="0.3,0.5,0.7,0.9,1.0")
    p.add_argument("--step-grid", default="1,2,3,4")
    p.add_argument("--out", default=None, help="CSV path")

    args = parser.parse_args(argv)
    threads = args.threads if args.threads is not None else int(os.environ.get("S15_THREADS", "1"))
    _set_threads(threads)

    try:
        return _dispatch(args)
    except _ConfigFailure as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except _CkptFailure as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return 2
    except _NumericFailure as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


class _ConfigFailure(Exception):
    pass


class _CkptFailure(Exception):
    pass


class _NumericFailure(Exception):
    pass


def _load_cfg(path):
    from .config import ConfigError, load_run_config
    try:
        return load_run_config(path)
    except ConfigError as e:
        raise _ConfigFailure(str(e)) from e


def _dispatch(args):
    from . import numerics as nm
    try:
        if args.cmd == "generate":
            return _cmd_generate(args)
        if args.cmd == "train-stage1":
            return _cmd_train_stage1(args)
        if args.cmd == "train-stage2":
            return _cmd_train_stage2(args)
        if args.cmd == "eval":
            return _cmd_eval(args)
        if args.cmd == "sweep":
            return _cmd_sweep(args)
    except nm.NumericsError as e:
        raise _NumericFailure(str(e)) from e
    raise _ConfigFailure(f"unknown command {args.cmd}")


def _data_paths(cfg):
    return (os.path.join(cfg.data_dir, "train.jsonl"),
            os.path.join(cfg.data_dir, "eval.jsonl"))


def _cmd_generate(args):
    from .config import echo_config
    from .taskgen import write_dataset
    cfg = _load_cfg(args.config)
    os.makedirs(cfg.data_dir, exist_ok=True)
    train_path, eval_path = _data_paths(cfg)
    write_dataset(train_path, cfg.task, range(cfg.n_train))
    write_dataset(eval_path, cfg.task, range(cfg.n_train, cfg.n_train + cfg.n_eval))
    echo_config(cfg, cfg.data_dir)
    print(f"wrote {cfg.n_train} train samples -> {train_path}")
    print(f"wrote {cfg.n_eval} eval samples -> {eval_path}")
    return 0


def _require_data(cfg):
    from .taskgen import read_dataset
    train_path, eval_path = _data_paths(cfg)
    if not (os.path.exists(train_path) and os.path.exists(eval_path)):
        raise _ConfigFailure(f"dataset missing under {cfg.data_dir}; run 'generate' first")
    return read_dataset(train_path), read_dataset(eval_path)


def _cmd_train_stage1(args):
    from .checkpoint import save_stage1
    from .config import echo_config
    from .training import train_stage1
    cfg = _load_cfg(args.config)
    train, _ = _require_data(cfg)
    log_path = os.path.join(cfg.out_dir, "stage1_metrics.jsonl")
    teacher, student, _ = train_stage1(train, cfg.model, cfg.stage1, log_path,
                                       progress=_print_progress)
    path = os.path.join(cfg.ckpt_dir, "stage1.ckpt")
    save_stage1(path, teacher, student, extra={"seed": cfg.seed})
    echo_config(cfg, cfg.out_dir)
    print(f"stage-1 checkpoint -> {path}")
    return 0


def _cmd_train_stage2(args):
    from .checkpoint import load_models, save_stage2
    from .config import echo_config
    from .training import train_stage2
    cfg = _load_cfg(args.config)
    train, _ = _require_data(cfg)
    stage, models, mcfg, _ = _load_ckpt(args.ckpt)
    if stage != "stage1":
        raise _CkptFailure(f"train-stage2 needs a stage-1 checkpoint, got {stage!r}")
    if mcfg.to_dict() != cfg.model.to_dict():
        raise _CkptFailure("checkpoint model config does not match the run config")
    log_path = os.path.join(cfg.out_dir, "stage2_metrics.jsonl")
    sys15 = train_stage2(train, models["teacher"], models["student"], cfg.stage2,
                         log_path, progress=_print_progress)
    path = os.path.join(cfg.ckpt_dir, "stage2.ckpt")
    save_stage2(path, sys15, extra={"seed": cfg.seed})
    echo_config(cfg, cfg.out_dir)
    print(f"stage-2 checkpoint -> {path}")
    return 0


def _load_ckpt(path):
    from .checkpoint import CheckpointError, load_models
    try:
        return load_models(path)
    except (OSError, CheckpointError) as e:
        raise _CkptFailure(str(e)) from e


def _cmd_eval(args):
    from .benchmark import evaluate
    from .config import echo_config
    cfg = _load_cfg(args.config)
    _, eval_samples = _require_data(cfg)
    stage, models, mcfg, _ = _load_ckpt(args.ckpt)
    mode = args.mode
    if mode == "cot":
        if "teacher" not in models:
            raise _CkptFailure("cot mode needs a stage-1 checkpoint (teacher)")
        model = models["teacher"]
    elif mode == "latent_full":
        model = models.get("student") or models.get("system15")
        if model is None:
            raise _CkptFailure("latent_full mode needs a student or system15 model")
    else:
        if "system15" not in models:
            raise _CkptFailure("system15 mode needs a stage-2 checkpoint")
        model = models["system15"]
    report = evaluate(model, eval_samples, cfg.budget, mode,
                      timing_subset=cfg.timing_subset)
    out = args.out or os.path.join(cfg.out_dir, f"metrics_{mode}.json")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    report.save(out)
    echo_config(cfg, cfg.out_dir)
    print(json.dumps(report.to_dict(), indent=2, default=float))
    print(f"metrics -> {out}")
    return 0


def _cmd_sweep(args):
    from .benchmark import pareto_frontier, spearman_by_depth, sweep, sweep_to_csv
    from .config import echo_config
    cfg = _load_cfg(args.config)
    _, eval_samples = _require_data(cfg)
    stage, models, mcfg, _ = _load_ckpt(args.ckpt)
    if "system15" not in models:
        raise _CkptFailure("sweep needs a stage-2 checkpoint")
    teacher = student = None
    if args.stage1_ckpt:
        _, m1, _, _ = _load_ckpt(args.stage1_ckpt)
        teacher, student = m1.get("teacher"), m1.get("student")
    subset = eval_samples[:cfg.eval_subset_sweep] if cfg.eval_subset_sweep else eval_samples
    rows = sweep(models["system15"], subset, _parse_grid(args.depth_grid),
                 [int(x) for x in _parse_grid(args.step_grid)],
                 teacher=teacher, student=student,
                 max_answer_len=cfg.budget.max_answer_len)
    out = args.out or os.path.join(cfg.out_dir, "sweep.csv")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    sweep_to_csv(rows, out)
    echo_config(cfg, cfg.out_dir)
    print(f"sweep grid ({len(rows)} rows) -> {out}")
    print("spearman(accuracy, lambda_step) by lambda_depth:",
          json.dumps(spearman_by_depth(rows)))
    print("pareto frontier (flops/step, accuracy):",
          [(round(r['mean_flops_per_step']), round(r['accuracy'], 4)) for r in pareto_frontier(rows)])
    return 0


def _print_progress(parts):
    msg = " ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                   for k, v in parts.items())
    print(msg, flush=True)


if __name__ == "__main__":
    sys.exit(main())
