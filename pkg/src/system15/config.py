"""Run configuration: one JSON document covering model, task, training,
inference budget, and paths. Any omitted field takes its default; the
effective (fully defaulted) config is echoed next to each command's outputs.
"""

import json
import os
from dataclasses import dataclass, field

from .inference import BudgetConfig
from .taskgen import TaskConfig
from .training import Stage1Config, Stage2Config
from .transformer import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    seed: int = 0
    n_train: int = 20000
    n_eval: int = 2000
    data_dir: str = "runs/data"
    ckpt_dir: str = "runs/ckpt"
    out_dir: str = "runs/out"
    eval_subset_sweep: int = 500
    timing_subset: int = 200

    def to_dict(self):
        return {
            "model": self.model.to_dict(),
            "task": self.task.to_dict(),
            "stage1": dict(self.stage1.__dict__),
            "stage2": dict(self.stage2.__dict__),
            "budget": dict(self.budget.__dict__),
            "seed": self.seed,
            "n_train": self.n_train,
            "n_eval": self.n_eval,
            "data_dir": self.data_dir,
            "ckpt_dir": self.ckpt_dir,
            "out_dir": self.out_dir,
            "eval_subset_sweep": self.eval_subset_sweep,
            "timing_subset": self.timing_subset,
        }


def _build(cls, d, name):
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad '{name}' section: {e}") from e


def load_run_config(path=None, overrides=None) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            with open(path) as f:
                raw = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    if overrides:
        raw.update({k: v for k, v in overrides.items() if v is not None})

    def section(name, cls, post=None):
        d = dict(raw.get(name, {}))
        if post:
            post(d)
        return _build(cls, d, name)

    def tupled(d):
        for k in ("n_assign", "n_combine", "ops"):
            if k in d:
                d[k] = tuple(d[k])

    cfg = RunConfig(
        model=section("model", ModelConfig),
        task=section("task", TaskConfig, tupled),
        stage1=section("stage1", Stage1Config),
        stage2=section("stage2", Stage2Config),
        budget=section("budget", BudgetConfig),
        seed=int(raw.get("seed", 0)),
        n_train=int(raw.get("n_train", 20000)),
        n_eval=int(raw.get("n_eval", 2000)),
        data_dir=raw.get("data_dir", "runs/data"),
        ckpt_dir=raw.get("ckpt_dir", "runs/ckpt"),
        out_dir=raw.get("out_dir", "runs/out"),
        eval_subset_sweep=int(raw.get("eval_subset_sweep", 500)),
        timing_subset=int(raw.get("timing_subset", 200)),
    )
    if "seed" not in raw and path is not None:
        raise ConfigError("config must set a seed explicitly")
    return cfg


def echo_config(cfg: RunConfig, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "effective_config.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(cfg.to_dict(), f, indent=2)
    os.replace(tmp, path)
    return path
