"""Train the toy victim on the synthetic corpus and quantize it."""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .bitcodec import Kind
from .corpus import Tokenizer, World, answer_ids, prompt_ids
from .evaluation import evaluate, heldin_task
from .model import ModelConfig, ToyModel, forward_logits, init_params, pad_batch

log = logging.getLogger(__name__)

ACCURACY_GATE = 0.95
QUANT_DRIFT_GATE = 0.02


class TrainingGateError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    steps: int = 2500
    batch_size: int = 64
    lr: float = 3e-3
    warmup: int = 100
    weight_decay: float = 0.01
    d_model: int = 128
    n_heads: int = 4
    n_blocks: int = 2
    d_ff: int = 512
    context_length: int = 64
    fmt: str = "bf16"


@dataclass
class TrainResult:
    model: ToyModel
    float_accuracy: float
    quant_accuracy: float
    final_loss: float


def training_sequences(world: World, tok: Tokenizer) -> list[list[int]]:
    seqs = [prompt_ids(tok, r.question) + answer_ids(tok, r.answer) for r in world.qa]
    seqs += [tok.encode(t.text, bos=True, eos=True) for t in world.text]
    return seqs


def _lr_at(step: int, cfg: TrainConfig) -> float:
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    frac = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    return cfg.lr * 0.5 * (1 + math.cos(math.pi * frac))


def train_float(world: World, tok: Tokenizer, cfg: TrainConfig):
    """FP32 master training; returns ``(model_config, params, last_loss)``."""
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    mcfg = ModelConfig(len(tok), cfg.context_length, cfg.d_model, cfg.n_heads, cfg.n_blocks, cfg.d_ff)
    params = {k: v.requires_grad_(True) for k, v in init_params(mcfg, gen).items()}
    decay = [v for k, v in params.items() if v.dim() == 2]
    no_decay = [v for k, v in params.items() if v.dim() < 2]
    opt = torch.optim.AdamW([{"params": decay, "weight_decay": cfg.weight_decay},
                             {"params": no_decay, "weight_decay": 0.0}], lr=cfg.lr, betas=(0.9, 0.98))
    seqs = training_sequences(world, tok)
    rng = random.Random(cfg.seed)
    order: list[int] = []
    loss_val = float("nan")
    for step in range(cfg.steps):
        if len(order) < cfg.batch_size:
            fresh = list(range(len(seqs)))
            rng.shuffle(fresh)
            order += fresh
        batch = [seqs[i] for i in order[: cfg.batch_size]]
        del order[: cfg.batch_size]
        tokens, lengths = pad_batch(batch, tok.pad_id)
        logits = forward_logits(params, tokens[:, :-1], mcfg)
        targets = tokens[:, 1:].clone()
        mask = torch.arange(targets.shape[1])[None, :] >= (lengths[:, None] - 1)
        targets[mask] = -100
        loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=-100)
        for g in opt.param_groups:
            g["lr"] = _lr_at(step, cfg)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(list(params.values()), 1.0)
        opt.step()
        loss_val = float(loss.detach())
        if step % 500 == 0:
            log.info("step %d loss %.4f", step, loss_val)
    return mcfg, {k: v.detach() for k, v in params.items()}, loss_val


def train_toy(world: World, tok: Tokenizer, cfg: TrainConfig = TrainConfig(), check_gate: bool = True) -> TrainResult:
    """Train, quantize per tensor, and enforce the held-in accuracy gate."""
    mcfg, params, loss = train_float(world, tok, cfg)
    kind = Kind(cfg.fmt)
    task = heldin_task(world, tok)
    float_model = ToyModel.from_float(mcfg, params, Kind.BF16, tok.eos_id, tok.pad_id)
    # the float reference decodes straight from the FP32 master weights
    for lt in float_model.layers:
        lt.values = params[lt.name].clone()
    float_acc = evaluate(float_model, task)
    model = ToyModel.from_float(mcfg, params, kind, tok.eos_id, tok.pad_id)
    quant_acc = evaluate(model, task)
    log.info("held-in exact match: fp32 %.3f, %s %.3f", float_acc, kind.value, quant_acc)
    if check_gate:
        if quant_acc < ACCURACY_GATE:
            raise TrainingGateError(
                f"held-in exact match {quant_acc:.3f} below gate {ACCURACY_GATE} (seed {cfg.seed})")
        if kind is Kind.BF16 and abs(float_acc - quant_acc) >= QUANT_DRIFT_GATE:
            raise TrainingGateError(
                f"BF16 quantization moved held-in accuracy by {abs(float_acc - quant_acc):.3f}")
    return TrainResult(model, float_acc, quant_acc, loss)
