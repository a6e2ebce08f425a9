"""Parameter checkpoints.

Layout: magic bytes "S15CKPT1", a little-endian uint32 byte length, a UTF-8
JSON header (tensor names/shapes/trainable flags in payload order, model
config, stage tag, extras), then each tensor as raw little-endian IEEE-754
float32 in header order.
"""

import json
import os
import struct

import numpy as np

from .numerics import ParamStore
from .shortcuts import ShortcutModel
from .transformer import ModelConfig

MAGIC = b"S15CKPT1"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, stage: str, models: dict, cfg: ModelConfig, extra: dict = None):
    """models: {"teacher": ParamStore, ...}; tensors serialize as float32.

    Written atomically (temp file + rename)."""
    header = {"stage": stage, "model_config": cfg.to_dict(), "extra": extra or {},
              "models": {}}
    payload = []
    for mname, store in models.items():
        tensors = []
        for name in store.names():
            t = store[name]
            arr = np.ascontiguousarray(t.data.astype("<f4"))
            tensors.append({"name": name, "shape": list(arr.shape),
                            "trainable": store.is_trainable(name)})
            payload.append(arr.tobytes())
        header["models"][mname] = tensors
    blob = json.dumps(header).encode("utf-8")
    tmp = path + ".tmp"
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for chunk in payload:
            f.write(chunk)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (stage, {model_name: ParamStore}, ModelConfig, extra)."""
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: bad magic (not a checkpoint)")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        cfg = ModelConfig(**header["model_config"])
        models = {}
        for mname, tensors in header["models"].items():
            store = ParamStore()
            for rec in tensors:
                n = int(np.prod(rec["shape"])) if rec["shape"] else 1
                arr = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(rec["shape"]).copy()
                store.add(rec["name"], arr, trainable=rec["trainable"])
            models[mname] = store
    return header["stage"], models, cfg, header.get("extra", {})


def save_stage1(path, teacher: ShortcutModel, student: ShortcutModel, extra=None):
    save_checkpoint(path, "stage1", {"teacher": teacher.params, "student": student.params},
                    teacher.cfg, extra)


def save_stage2(path, sys15: ShortcutModel, extra=None):
    save_checkpoint(path, "stage2", {"system15": sys15.params}, sys15.cfg, extra)


def load_models(path):
    """Checkpoint -> {name: ShortcutModel} with stage tags applied."""
    from .shortcuts import STAGE_STUDENT, STAGE_SYSTEM15, STAGE_TEACHER
    stage, stores, cfg, extra = load_checkpoint(path)
    out = {}
    if stage == "stage1":
        out["teacher"] = ShortcutModel(cfg, stores["teacher"], STAGE_TEACHER)
        out["student"] = ShortcutModel(cfg, stores["student"], STAGE_STUDENT)
    elif stage == "stage2":
        out["system15"] = ShortcutModel(cfg, stores["system15"], STAGE_SYSTEM15)
    else:
        raise CheckpointError(f"unknown stage tag {stage!r}")
    return stage, out, cfg, extra
