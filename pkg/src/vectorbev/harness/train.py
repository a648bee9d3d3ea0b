"""Training loop: AdamW, gradient clipping, stateless batch selection,
bitwise-resumable checkpoints, and a per-step CSV log.
"""
from __future__ import annotations

import glob
import json
import os
import zipfile
from typing import Any

import numpy as np

from ..errors import ConfigError, DatasetError, NumericsError
from ..geometry import CameraRig
from ..model import FrameInputs, Model, total_loss
from ..numerics import Tensor, tensor
from ..synthdata import Sequence, boxes_in_ego, read_dataset
from .config import apply_overrides, format_config, model_config_of

__all__ = ["AdamW", "load_sequences", "scene_for_step", "lr_for_step",
           "train", "save_checkpoint", "load_checkpoint", "frames_of"]


class AdamW(object):
    """Adam with decoupled weight decay over named parameters."""

    def __init__(self, named_params: list[tuple[str, Tensor]], lr: float,
                 weight_decay: float = 0.0, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.items = list(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.items}
        self.v = {n: np.zeros_like(p.data) for n, p in self.items}

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.items:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def load_sequences(data_dir: str) -> list[Sequence]:
    paths = sorted(glob.glob(os.path.join(data_dir, "*.vbev")))
    if not paths:
        raise DatasetError(f"no .vbev files in {data_dir!r}", offset=0)
    return [read_dataset(p) for p in paths]


def frames_of(seq: Sequence) -> tuple[list[FrameInputs], CameraRig,
                                      np.ndarray, np.ndarray]:
    """Sequence -> (frame inputs, rig, final-frame ego boxes, classes)."""
    frames = [
        FrameInputs(cam_feats=[tensor(s.cam_feats[c]) for c in range(s.cam_feats.shape[0])],
                    ego=s.ego)
        for s in seq.samples
    ]
    final = seq.samples[-1]
    return frames, seq.rig, boxes_in_ego(final), final.classes


def scene_for_step(seed: int, step: int, n_scenes: int) -> int:
    """Stateless pick so resumed runs draw the same scene per step."""
    return int(np.random.default_rng([seed, 31337, step]).integers(0, n_scenes))


def lr_for_step(cfg: dict[str, Any], step: int) -> float:
    """Learning rate for a 1-based step; pure in (cfg, step) so resumed
    runs reproduce an unbroken schedule."""
    schedule = cfg["lr_schedule"]
    base = cfg["lr"]
    if schedule == "constant":
        lr = base
    elif schedule == "cosine":
        # decay to 5% of the base rate by the final step
        frac = (step - 1) / max(1, cfg["steps"] - 1)
        lr = base * (0.05 + 0.95 * 0.5 * (1.0 + np.cos(np.pi * frac)))
    else:
        raise ConfigError(f"unknown lr_schedule {schedule!r}")
    warmup = cfg.get("warmup_steps", 0)
    if warmup > 0:
        lr *= min(1.0, step / warmup)
    return lr


def save_checkpoint(path: str, model: Model, opt: AdamW,
                    cfg: dict[str, Any]) -> None:
    arrays: dict[str, np.ndarray] = {
        "opt_step": np.array(opt.step_count, dtype=np.int64),
        "config_json": np.array(json.dumps(cfg, sort_keys=True)),
    }
    for name, p in model.named_parameters():
        arrays[f"param::{name}"] = p.data
        arrays[f"m::{name}"] = opt.m[name]
        arrays[f"v::{name}"] = opt.v[name]
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        np.savez(f, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[dict[str, Any], dict[str, np.ndarray],
                                        dict[str, np.ndarray],
                                        dict[str, np.ndarray], int]:
    """Returns (config, params, m, v, opt_step)."""
    try:
        with np.load(path, allow_pickle=False) as z:
            cfg = json.loads(str(z["config_json"][()]))
            step = int(z["opt_step"][()])
            params, m, v = {}, {}, {}
            for key in z.files:
                if key.startswith("param::"):
                    params[key[len("param::"):]] = z[key]
                elif key.startswith("m::"):
                    m[key[len("m::"):]] = z[key]
                elif key.startswith("v::"):
                    v[key[len("v::"):]] = z[key]
    except (OSError, ValueError, KeyError, zipfile.BadZipFile,
            json.JSONDecodeError) as e:
        raise DatasetError(f"cannot read checkpoint {path!r}: {e}") from e
    return cfg, params, m, v, step


def restore_model(model: Model, params: dict[str, np.ndarray]) -> None:
    for name, p in model.named_parameters():
        if name not in params:
            raise DatasetError(f"checkpoint missing parameter {name!r}", offset=0)
        if params[name].shape != p.data.shape:
            raise DatasetError(f"checkpoint shape mismatch for {name!r}", offset=0)
        p.data[...] = params[name]


def _log_line(step: int, scene: int, loss: float, parts: dict[str, float],
              grad_norm: float) -> str:
    return (f"{step},{scene},{loss:.17g},{parts['cls']:.17g},"
            f"{parts['box']:.17g},{parts['heatmap']:.17g},{grad_norm:.17g}")


def train(cfg: dict[str, Any] | None, data_dir: str, out_dir: str,
          resume: str | None = None, overrides: list[str] | None = None
          ) -> dict[str, Any]:
    """Run (or resume) training; returns summary with last loss and paths.

    Resume restores parameters, optimizer moments, and the config snapshot
    from the checkpoint (plus any overrides, e.g. a larger step budget),
    then continues with the same stateless scene schedule, so a split run
    reproduces an unbroken one bitwise.
    """
    os.makedirs(out_dir, exist_ok=True)
    start_step = 0
    if resume is not None:
        cfg, params, m, v, start_step = load_checkpoint(resume)
        if overrides:
            apply_overrides(cfg, overrides)
    if cfg is None:
        raise ConfigError("train needs a config or a checkpoint to resume")
    mcfg = model_config_of(cfg)
    model = Model(mcfg)
    opt = AdamW(list(model.named_parameters()), lr=cfg["lr"],
                weight_decay=cfg["weight_decay"])
    if resume is not None:
        restore_model(model, params)
        for name in opt.m:
            opt.m[name][...] = m[name]
            opt.v[name][...] = v[name]
        opt.step_count = start_step

    with open(os.path.join(out_dir, "config_resolved.cfg"), "w",
              encoding="utf-8") as f:
        f.write(format_config(cfg))

    seqs = load_sequences(data_dir)
    prepared = [frames_of(s) for s in seqs]
    plain_params = model.parameters()

    log_path = os.path.join(out_dir, "train_log.csv")
    fresh = not os.path.exists(log_path)
    log = open(log_path, "a", encoding="utf-8")
    if fresh:
        log.write("step,scene,loss,cls,box,heatmap,grad_norm\n")

    last_ckpt = resume
    last_loss = float("nan")
    try:
        for step in range(start_step + 1, cfg["steps"] + 1):
            scene = scene_for_step(cfg["seed"], step, len(prepared))
            frames, rig, gt_boxes, gt_classes = prepared[scene]
            model.zero_grad()
            out = model.forward(frames, rig)
            loss, parts = total_loss(out, gt_boxes, gt_classes, mcfg)
            last_loss = loss.item()
            if not np.isfinite(last_loss):
                raise NumericsError(
                    f"non-finite loss {last_loss} at step {step}; "
                    f"last checkpoint: {last_ckpt}")
            loss.backward()
            grad_norm = clip_grad_norm(plain_params, cfg["clip_norm"])
            opt.lr = lr_for_step(cfg, step)
            opt.step()
            if step % cfg["log_every"] == 0:
                log.write(_log_line(step, scene, last_loss, parts, grad_norm) + "\n")
                log.flush()
            if step % cfg["checkpoint_every"] == 0 or step == cfg["steps"]:
                last_ckpt = os.path.join(out_dir, f"ckpt_step_{step:06d}.npz")
                save_checkpoint(last_ckpt, model, opt, cfg)
    finally:
        log.close()
    return {"steps": cfg["steps"], "loss": last_loss, "log": log_path,
            "checkpoint": last_ckpt}
