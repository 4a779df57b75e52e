"""Training loop: AdamW over the toy LM with per-step retraction of a trainable memory."""
from __future__ import annotations

import json
import math
import time
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint, diagnostics
from .autodiff import Tape, ops
from .config import RunConfig
from .data import WindowSampler, load_corpus
from .errors import ConfigError, NonFiniteLoss
from .interface import init_teacher
from .model import ToyTransformer
from .optim import AdamW, cosine_lr


def build_model(cfg: RunConfig) -> ToyTransformer:
    mc = cfg.model_config()
    head = None
    if cfg.mode == "teacher":
        e0 = checkpoint.read_matrix(cfg.teacher_embedding)
        if e0.shape != (mc.vocab_size, mc.d_model):
            raise ConfigError(f"teacher embedding is {e0.shape}, model expects {(mc.vocab_size, mc.d_model)}")
        head = init_teacher(e0, trainable_z=mc.trainable_z, match_teacher_scale=cfg.match_teacher_scale,
                            dtype=mc.np_dtype)
    return ToyTransformer(mc, head=head)


def build_optimizer(model: ToyTransformer, cfg: RunConfig) -> AdamW:
    return AdamW(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
                 weight_decay=cfg.weight_decay, decay=model.decay_parameters())


def loss_and_grads(model: ToyTransformer, micro_batches) -> float:
    """Mean loss over micro-batches; gradients accumulate on the parameters."""
    total = 0.0
    n = len(micro_batches)
    for inputs, targets in micro_batches:
        with Tape():
            loss = ops.cross_entropy(model(inputs), targets)
            scaled = ops.scale(loss, 1.0 / n) if n > 1 else loss
            scaled.backward()
        total += float(loss.data) / n
    return total


def train_step(model: ToyTransformer, micro_batches, optimizer: AdamW, lr: float,
               grad_clip: float = 1.0, step: int = 0) -> dict:
    optimizer.zero_grad()
    loss = loss_and_grads(model, micro_batches)
    if not math.isfinite(loss):
        raise NonFiniteLoss(step, loss)
    norm = optimizer.clip_grad_norm(grad_clip)
    if not math.isfinite(norm):
        raise NonFiniteLoss(step, norm)
    optimizer.step(lr)
    model.head.after_step()
    return {"loss": loss, "grad_norm": norm}


def greedy_next(model: ToyTransformer, prompt) -> int:
    logits = model(np.asarray(prompt, dtype=np.int64)[None, :]).data
    return int(np.argmax(logits[0, -1]))


def eval_prompt(data: np.ndarray, context: int) -> np.ndarray:
    return np.asarray(data[: min(context, 32, len(data))], dtype=np.int64)


def run_training(cfg: RunConfig, on_step: Callable | None = None, data: np.ndarray | None = None,
                 verbose: bool = False) -> dict:
    """Run ``cfg.steps`` optimizer steps and write metrics, checkpoints and diagnostics to ``cfg.out_dir``.

    ``on_step(step, model, row)`` is called after initialization (step 0) and after every step.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if data is None:
        data = load_corpus(cfg.corpus or None)
    model = build_model(cfg)
    optimizer = build_optimizer(model, cfg)
    sampler = WindowSampler(data, cfg.context, cfg.batch_size, seed=cfg.seed)
    metrics_path = out / "metrics.jsonl"
    csv_path = out / "diagnostics.csv"
    for p in (metrics_path, csv_path):
        if p.exists():
            p.unlink()
    meta = {"run": cfg.to_dict()}
    tokens_per_step = cfg.batch_size * cfg.grad_accum * cfg.context
    start = time.perf_counter()

    def write_row(row):
        with metrics_path.open("a") as fh:
            fh.write(json.dumps(row) + "\n")

    def delta_now():
        h = model.head
        return diagnostics.delta_ti(h.materialize_embedding(), h.materialize_unembedding())

    def save(name, step):
        path = out / name
        checkpoint.save_model(path, model, meta={**meta, "step": step})
        report = diagnostics.diagnose_head(model.head, checkpoint_id=f"{name}@{step}")
        report.append_csv(csv_path)
        return report

    row = {"step": 0, "tokens_seen": 0, "loss": None, "ppl": None, "grad_norm": None,
           "delta_ti": delta_now(), "wall_ms": 0.0}
    write_row(row)
    if on_step:
        on_step(0, model, row)

    losses = []
    for step in range(1, cfg.steps + 1):
        t0 = time.perf_counter()
        batches = [sampler.next_batch() for _ in range(cfg.grad_accum)]
        lr = cosine_lr(step - 1, cfg.lr, cfg.steps, cfg.warmup_frac, cfg.min_lr_ratio)
        info = train_step(model, batches, optimizer, lr, cfg.grad_clip, step)
        losses.append(info["loss"])
        on_diag = cfg.diagnostics_interval and step % cfg.diagnostics_interval == 0
        row = {"step": step, "tokens_seen": step * tokens_per_step, "loss": info["loss"],
               "ppl": math.exp(min(info["loss"], 700.0)), "grad_norm": info["grad_norm"],
               "delta_ti": delta_now() if (on_diag or step == cfg.steps) else None,
               "wall_ms": (time.perf_counter() - t0) * 1e3}
        write_row(row)
        if on_step:
            on_step(step, model, row)
        if verbose and cfg.log_interval and step % cfg.log_interval == 0:
            print(f"step {step:6d}  loss {info['loss']:.4f}  gnorm {info['grad_norm']:.3f}  lr {lr:.2e}", flush=True)
        if cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0 and step != cfg.steps:
            save(f"ckpt_{step:06d}.pitc", step)

    report = save("final.pitc", cfg.steps)
    (out / "diagnostics.json").write_text(report.to_json() + "\n")
    prompt = eval_prompt(data, cfg.context)
    summary = {
        "steps": cfg.steps,
        "head_mode": cfg.head_mode,
        "final_loss": losses[-1] if losses else None,
        "eval_prompt": prompt.tolist(),
        "greedy_next": greedy_next(model, prompt),
        "parameters": model.num_parameters(),
        "wall_s": time.perf_counter() - start,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return {"model": model, "report": report, "summary": summary, "losses": losses}


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
