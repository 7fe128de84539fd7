"""Staged training loop with deterministic, resumable state.

All randomness (batch composition, t draws, noise, guidance dropout) comes
from counter-based streams keyed by (seed, purpose, global step), so a
checkpoint needs to store only the seed and the step to resume bit-exactly:
rerunning step s after a resume consumes the exact same stream values as an
uninterrupted run.

Stage 1 trains the single-reference tasks; stage 2 adds the two-reference
task. Every batch carries one task, so reference counts are uniform within
a batch and sequence layouts are shared across the whole batch.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import numerics as nx
from . import rng
from .data import Dataset, make_task, plan_batch, task_arity
from .model import ModelConfig, NULL_TOKEN, ToyDiT
from .objective import (FlowSample, LAMBDA_ALIGN, MTP_DT, MTP_K,
                        OrthogonalExtractor, draw_t, pointwise_bound_violations,
                        total_loss)
from .sampler import GUIDANCE_DEFAULT, STEPS_DEFAULT, sample
from .tensorio import read_odt, write_odt

METRICS_COLUMNS = ("step", "l_ssp_equiv", "l_mtp", "l_align", "total",
                   "grad_norm", "lr", "stage")


@dataclass
class StageConfig:
    steps: int
    tasks: tuple
    batch_size: int = 4
    lr: float = 1e-3


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    stages: tuple = (
        StageConfig(steps=400, tasks=("model_free_tryon", "tryoff")),
        StageConfig(steps=400, tasks=("model_based_tryon", "model_free_tryon", "tryoff")),
    )
    seed: int = 0
    data_seed: int = 100
    data_size: int = 512
    k_steps: int = MTP_K
    dt: float = MTP_DT
    lam: float = LAMBDA_ALIGN
    extractor: str = "orthogonal"      # "orthogonal" | "identity"
    cfg_dropout: float = 0.1
    grad_clip: float = 1.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    detach_chain: bool = False
    debug_bound_check: bool = False
    checkpoint_every: int = 0          # 0 = only at the end

    def to_json(self):
        d = asdict(self)
        d["stages"] = [asdict(s) for s in self.stages]
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["model"] = ModelConfig(**d["model"])
        d["stages"] = tuple(StageConfig(steps=s["steps"], tasks=tuple(s["tasks"]),
                                        batch_size=s["batch_size"], lr=s["lr"])
                            for s in d["stages"])
        return cls(**d)


class AdamW:
    """Decoupled weight decay Adam with bias correction."""

    def __init__(self, params: dict, lr, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.01):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = beta1, beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay:
                p.data -= (self.lr * self.weight_decay) * p.data
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self):
        out = {}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays, step_count):
        for k in self.params:
            self.m[k] = arrays[f"m.{k}"].astype(self.m[k].dtype)
            self.v[k] = arrays[f"v.{k}"].astype(self.v[k].dtype)
        self.step_count = step_count


def global_grad_norm(params: dict) -> float:
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            g = t.grad.astype(np.float64, copy=False)
            total += float((g * g).sum())
    return float(np.sqrt(total))


def clip_grad_norm(params: dict, max_norm) -> float:
    """Scale all grads so the global norm is at most max_norm; returns the
    pre-clip norm."""
    norm = global_grad_norm(params)
    if max_norm and norm > max_norm:
        factor = max_norm / norm
        for t in params.values():
            if t.grad is not None:
                t.grad *= t.grad.dtype.type(factor)
    return norm


def _stage_of(step, stages):
    lo = 0
    for i, st in enumerate(stages):
        if step < lo + st.steps:
            return i, st
        lo += st.steps
    raise IndexError(f"step {step} beyond schedule")


def _build_batch(cfg: TrainConfig, dataset: Dataset, step):
    stage_idx, stage = _stage_of(step, cfg.stages)
    task, indices = plan_batch(step, stage.tasks, stage.batch_size,
                               len(dataset), cfg.seed)
    items = [make_task(dataset[i], task) for i in indices]
    npdt = nx.DTYPES[cfg.model.dtype]

    x0 = np.stack([it.target for it in items]).astype(npdt)
    conds = [np.stack([it.conditions[j] for it in items]).astype(npdt)
             for j in range(task_arity(task))]
    ids = np.stack([it.text_ids for it in items])
    mask = None
    if items[0].mask is not None:
        mask = np.stack([it.mask for it in items])

    gen_noise = rng.stream(cfg.seed, "noise", step)
    x1 = gen_noise.standard_normal(x0.shape).astype(npdt)
    gen_t = rng.stream(cfg.seed, "t", step)
    t = draw_t(gen_t, cfg.k_steps, cfg.dt, size=len(items))

    if cfg.cfg_dropout > 0:
        gen_drop = rng.stream(cfg.seed, "drop", step)
        dropped = gen_drop.uniform(size=len(items)) < cfg.cfg_dropout
        for b in np.nonzero(dropped)[0]:
            for c in conds:
                c[b] = 0.0
            ids[b] = NULL_TOKEN

    return stage_idx, stage, task, FlowSample(x0, x1, t, conds, ids, mask)


@dataclass
class TrainResult:
    steps_done: int
    checkpoint: str
    metrics_path: str
    aborted: bool = False
    abort_step: int = -1


def save_checkpoint(dirpath, model: ToyDiT, opt: AdamW, cfg: TrainConfig, step):
    os.makedirs(dirpath, exist_ok=True)
    model.save(os.path.join(dirpath, "model"))
    opt_dir = os.path.join(dirpath, "opt")
    os.makedirs(opt_dir, exist_ok=True)
    for name, arr in opt.state_arrays().items():
        write_odt(os.path.join(opt_dir, name + ".odt"), arr)
    meta = {"step": step, "opt_step": opt.step_count,
            "rng": {"seed": cfg.seed, "step": step},
            "config": cfg.to_json()}
    with open(os.path.join(dirpath, "meta.json"), "w") as f:
        json.dump(meta, f, indent=1)


def load_checkpoint(dirpath):
    with open(os.path.join(dirpath, "meta.json")) as f:
        meta = json.load(f)
    cfg = TrainConfig.from_json(meta["config"])
    model = ToyDiT.load(os.path.join(dirpath, "model"))
    opt = AdamW(model.params, lr=cfg.stages[0].lr, beta1=cfg.beta1, beta2=cfg.beta2,
                eps=cfg.eps, weight_decay=cfg.weight_decay)
    opt_dir = os.path.join(dirpath, "opt")
    arrays = {}
    for name in opt.state_arrays():
        arrays[name] = read_odt(os.path.join(opt_dir, name + ".odt"))
    opt.load_state_arrays(arrays, meta["opt_step"])
    return model, opt, cfg, meta["step"]


def train(cfg: TrainConfig, out_dir, resume_from=None, dataset=None,
          quiet=True, on_step=None) -> TrainResult:
    os.makedirs(out_dir, exist_ok=True)
    if dataset is None:
        dataset = Dataset.generate(cfg.data_seed, cfg.data_size,
                                   cfg.model.image_size)
    if resume_from:
        model, opt, cfg_ck, start_step = load_checkpoint(resume_from)
        cfg = cfg_ck
    else:
        model = ToyDiT.init(cfg.model, seed=cfg.seed)
        opt = AdamW(model.params, lr=cfg.stages[0].lr, beta1=cfg.beta1,
                    beta2=cfg.beta2, eps=cfg.eps, weight_decay=cfg.weight_decay)
        start_step = 0

    extractor = None
    if cfg.lam != 0.0 and cfg.extractor == "orthogonal":
        flat = cfg.model.channels * cfg.model.image_size ** 2
        extractor = OrthogonalExtractor(flat, seed=cfg.seed, dtype=cfg.model.dtype)

    total_steps = sum(s.steps for s in cfg.stages)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    mode = "a" if resume_from and os.path.exists(metrics_path) else "w"
    ckpt_dir = os.path.join(out_dir, "checkpoint")

    with open(metrics_path, mode, newline="") as mf:
        writer = csv.writer(mf)
        if mode == "w":
            writer.writerow(METRICS_COLUMNS)
        for step in range(start_step, total_steps):
            stage_idx, stage, task, batch = _build_batch(cfg, dataset, step)
            opt.lr = stage.lr
            model.zero_grads()
            try:
                with nx.Graph():
                    v_fn = model.velocity_batch_fn(batch.conditions, batch.text_ids)
                    loss, breakdown, chain = total_loss(
                        v_fn, batch, cfg.k_steps, cfg.dt, cfg.lam,
                        extractor, cfg.detach_chain)
                    nx.backward(loss)
            except nx.NonFiniteError:
                save_checkpoint(ckpt_dir, model, opt, cfg, step)
                return TrainResult(step, ckpt_dir, metrics_path,
                                   aborted=True, abort_step=step)
            if cfg.debug_bound_check:
                bad = pointwise_bound_violations(chain, batch.u)
                if bad:
                    raise AssertionError(f"smoothness bound violated at step {step}: {bad}")
            norm = clip_grad_norm(model.params, cfg.grad_clip)
            opt.step()
            writer.writerow([step, f"{breakdown.l_ssp_equiv:.8e}",
                             f"{breakdown.l_mtp:.8e}", f"{breakdown.l_align:.8e}",
                             f"{breakdown.total:.8e}", f"{norm:.8e}",
                             f"{stage.lr:g}", stage_idx])
            if not quiet and step % 50 == 0:
                print(f"step {step} stage {stage_idx} task {task} "
                      f"loss {breakdown.total:.5f} grad {norm:.3f}")
            if on_step:
                on_step(step, breakdown)
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(ckpt_dir, model, opt, cfg, step + 1)

    save_checkpoint(ckpt_dir, model, opt, cfg, total_steps)
    return TrainResult(total_steps, ckpt_dir, metrics_path)


# ---------------------------------------------------------------------------
# evaluation

def _masked_mse(a, b, mask):
    m = np.broadcast_to(mask, a.shape)
    d = (a.astype(np.float64) - b.astype(np.float64))[m]
    return float((d * d).mean())


def _masked_cosine(a, b, mask):
    m = np.broadcast_to(mask, a.shape)
    va = a.astype(np.float64)[m].ravel()
    vb = b.astype(np.float64)[m].ravel()
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(va, vb) / (na * nb))


def evaluate(model: ToyDiT, eval_items, steps=STEPS_DEFAULT,
             guidance=GUIDANCE_DEFAULT, seed=0, generate_fn=None) -> dict:
    """Sample each eval item and score it against its ground truth.

    generate_fn(item, x1) -> image overrides the sampler (test hook /
    oracle injection). Returns per-task aggregates plus per-item rows.
    """
    rows = []
    for idx, item in enumerate(eval_items):
        gen = rng.stream(seed, "eval-noise", idx)
        x1 = gen.standard_normal(item.target.shape)
        if generate_fn is not None:
            img = np.asarray(generate_fn(item, x1))
        else:
            img = sample(model, item.conditions, item.text_ids, x1=x1,
                         steps=steps, guidance=guidance)
        row = {"task": item.task,
               "full_mse": _masked_mse(img, item.target, np.ones(img.shape[-2:], bool))}
        if item.mask is not None:
            row["masked_mse"] = _masked_mse(img, item.target, item.mask)
            row["masked_cosine"] = _masked_cosine(img, item.target, item.mask)
        rows.append(row)

    report = {"n": len(rows), "per_task": {}, "rows": rows}
    for task in sorted({r["task"] for r in rows}):
        sel = [r for r in rows if r["task"] == task]
        agg = {"n": len(sel), "full_mse": float(np.mean([r["full_mse"] for r in sel]))}
        if "masked_mse" in sel[0]:
            agg["masked_mse"] = float(np.mean([r["masked_mse"] for r in sel]))
            agg["masked_cosine"] = float(np.median([r["masked_cosine"] for r in sel]))
        report["per_task"][task] = agg
    return report
