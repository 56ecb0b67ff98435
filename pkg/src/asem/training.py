"""Initialization, AdamW steps, the early-stopping loop and ablation runs."""
from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint
from .config import DecodeConfig, ModelConfig, TrainConfig
from .corpus import (EmbeddingTable, EncodedExample, LabelSchema, MappedDialogue, Vocabulary,
                     encode_dialogue, make_batches)
from .model import ASEM, LossBundle, compute_losses

logger = logging.getLogger(__name__)

ABLATIONS = {
    "no_weighted_concat": {"use_weighted_concat": False},
    "one_enc_dec": {"single_enc_dec": True},
    "no_sentiment_loss": {"use_sentiment_loss": False},
    "no_sae": {"use_sae": False},
}


class NonFiniteError(FloatingPointError):
    pass


def xavier_bound(fan_out: int, fan_in: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def _sub_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def init_params(config: ModelConfig, seed: int, embeddings: EmbeddingTable | None = None) -> ASEM:
    """Build a model with Xavier-uniform matrices, zero biases and unit layer-norm gains.

    Every tensor draws from its own generator seeded by (seed, parameter name), so
    experts and listeners start from distinct weights and adding or removing a
    module leaves every other tensor unchanged.
    """
    model = ASEM(config)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif p.dim() == 1:
                p.fill_(1.0)
            elif name == "embedding.weight" and embeddings is not None:
                if embeddings.matrix.shape != tuple(p.shape):
                    raise ValueError(f"embedding table {embeddings.matrix.shape} does not match "
                                     f"model {tuple(p.shape)}")
                p.copy_(torch.from_numpy(embeddings.matrix))
            else:
                gen = torch.Generator().manual_seed(_sub_seed(seed, name))
                bound = xavier_bound(p.shape[0], p.shape[1])
                p.copy_(torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)
        model.embedding.weight[0].zero_()
    return model


def count_parameters(model: torch.nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=cfg.learning_rate, betas=tuple(cfg.betas), eps=cfg.eps,
                             weight_decay=cfg.weight_decay, foreach=False)


def _first_nonfinite(model: ASEM, trace, losses: LossBundle) -> Optional[str]:
    for name in ("G_h", "S_att_pos", "S_att_pooled", "expert_out", "W_att", "S_h", "E_att",
                 "listener_out", "token_logits"):
        t = getattr(trace, name)
        if t is not None and not torch.isfinite(t).all():
            return f"trace.{name}"
    for name in ("L1", "L2", "L3", "total"):
        if not torch.isfinite(getattr(losses, name)):
            return f"loss.{name}"
    return None


def train_step(model: ASEM, optimizer: torch.optim.Optimizer, batch, cfg: TrainConfig,
               terms: tuple[str, ...] = ("L1", "L2", "L3")) -> LossBundle:
    """One AdamW update on the summed loss."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    trace = model(batch)
    losses = compute_losses(trace, batch, model.config, terms)
    bad = _first_nonfinite(model, trace, losses)
    if bad:
        raise NonFiniteError(f"non-finite values in {bad}; aborting before the update")
    losses.total.backward()
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
    if cfg.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return LossBundle(*(t.detach() for t in (losses.L1, losses.L2, losses.L3, losses.total)))


@torch.no_grad()
def evaluate_loss(model: ASEM, batches) -> float:
    """Example-weighted mean of the total loss, dropout off."""
    model.eval()
    total, n = 0.0, 0
    for b in batches:
        losses = compute_losses(model(b), b, model.config)
        total += float(losses.total) * len(b)
        n += len(b)
    return total / max(n, 1)


# ------------------------------------------------------------------ checkpoints


def snapshot(model: ASEM, optimizer, train_cfg: TrainConfig, vocab: Vocabulary,
             schema: LabelSchema, step: int = 0, val_history=(), best_val=None,
             bad_evals: int = 0) -> Checkpoint:
    names = {p: n for n, p in model.named_parameters()}
    m, v, steps = {}, {}, {}
    if optimizer is not None:
        for p, state in optimizer.state.items():
            if not state:
                continue
            name = names[p]
            m[name] = state["exp_avg"].detach().clone()
            v[name] = state["exp_avg_sq"].detach().clone()
            steps[name] = float(state["step"])
    return Checkpoint(
        model_config=model.config, train_config=train_cfg, vocab=vocab, schema=schema,
        params={n: p.detach().clone() for n, p in model.named_parameters()},
        adam_m=m, adam_v=v, adam_steps=steps, step=step,
        val_history=list(val_history), best_val=best_val, bad_evals=bad_evals,
        torch_rng_state=bytes(torch.get_rng_state().numpy().tobytes()),
    )


def restore(ckpt: Checkpoint, train_cfg: TrainConfig | None = None):
    """Model and optimizer rebuilt from a checkpoint (global torch RNG untouched)."""
    with torch.random.fork_rng(devices=[]):  # module construction draws from the global RNG
        model = ASEM(ckpt.model_config)
    with torch.no_grad():
        params = dict(model.named_parameters())
        missing = set(params) - set(ckpt.params)
        if missing:
            raise ValueError(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, p in params.items():
            p.copy_(ckpt.params[name])
    optimizer = make_optimizer(model.parameters(), train_cfg or ckpt.train_config)
    for name, p in params.items():
        if name in ckpt.adam_m:
            optimizer.state[p] = {
                "step": torch.tensor(ckpt.adam_steps[name], dtype=torch.float32),
                "exp_avg": ckpt.adam_m[name].clone(),
                "exp_avg_sq": ckpt.adam_v[name].clone(),
            }
    return model, optimizer


# ------------------------------------------------------------------ training loop


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    log: list[dict] = field(default_factory=list)
    stopped_early: bool = False


def _encode_all(items, vocab, schema, max_len):
    return [d if isinstance(d, EncodedExample) else encode_dialogue(d, vocab, schema, max_len)
            for d in items]


def loss_terms(cfg: TrainConfig, step: int, batches_per_epoch: int) -> tuple[str, ...]:
    if cfg.loss_schedule == "sentiment_then_emotion" and step < cfg.sentiment_warmup_epochs * batches_per_epoch:
        return ("L1",)
    return ("L1", "L2", "L3")


def train_loop(model_cfg: ModelConfig, train_cfg: TrainConfig,
               train_set: Sequence[MappedDialogue], valid_set: Sequence[MappedDialogue],
               vocab: Vocabulary, schema: LabelSchema, *,
               embeddings: EmbeddingTable | None = None,
               resume: Checkpoint | None = None, resume_best: Checkpoint | None = None,
               on_log: Callable[[dict], None] | None = None,
               on_checkpoint: Callable[[str, Checkpoint], None] | None = None) -> TrainResult:
    """Train with per-epoch seeded shuffling and early stopping on validation total loss.

    Batch order depends only on (seed, epoch), so a run resumed from a checkpoint
    at step s sees exactly the batches the uninterrupted run would have seen.
    """
    if not train_set or not valid_set:
        raise ValueError("train and validation splits must be non-empty")
    train_enc = _encode_all(train_set, vocab, schema, model_cfg.max_len)
    valid_batches = make_batches(_encode_all(valid_set, vocab, schema, model_cfg.max_len),
                                 train_cfg.batch_size)
    n_batches = math.ceil(len(train_enc) / train_cfg.batch_size)

    if resume is not None:
        model, optimizer = restore(resume, train_cfg)
        if resume.torch_rng_state is not None:
            torch.set_rng_state(torch.frombuffer(bytearray(resume.torch_rng_state), dtype=torch.uint8))
        step, history = resume.step, list(resume.val_history)
        best_val, bad = resume.best_val, resume.bad_evals
        best = resume_best or resume
    else:
        torch.manual_seed(train_cfg.seed)
        model = init_params(model_cfg, train_cfg.seed, embeddings)
        optimizer = make_optimizer(model.parameters(), train_cfg)
        step, history, bad = 0, [], 0
        best_val = evaluate_loss(model, valid_batches)
        history.append((0, best_val))
        best = snapshot(model, optimizer, train_cfg, vocab, schema, 0, history, best_val, 0)
        if on_log:
            on_log({"step": 0, "L1": None, "L2": None, "L3": None, "total": None, "val_total": best_val})

    log: list[dict] = []
    cache: dict[int, list] = {}
    stopped = False
    while step < train_cfg.max_steps:
        epoch, cursor = divmod(step, n_batches)
        if epoch not in cache:
            cache.clear()
            perm = np.random.default_rng([train_cfg.seed, epoch]).permutation(len(train_enc))
            cache[epoch] = make_batches([train_enc[i] for i in perm], train_cfg.batch_size)
        losses = train_step(model, optimizer, cache[epoch][cursor], train_cfg,
                            loss_terms(train_cfg, step, n_batches))
        step += 1
        rec = {"step": step, **losses.as_floats(), "val_total": None}
        if step % train_cfg.eval_every == 0 or step == train_cfg.max_steps:
            val = evaluate_loss(model, valid_batches)
            history.append((step, val))
            rec["val_total"] = val
            if best_val is None or val < best_val:
                best_val, bad = val, 0
                best = snapshot(model, optimizer, train_cfg, vocab, schema, step, history, best_val, bad)
                if on_checkpoint:
                    on_checkpoint("best", best)
            else:
                bad += 1
            if bad >= train_cfg.early_stop_patience:
                stopped = True
        log.append(rec)
        if on_log:
            on_log(rec)
        if stopped:
            logger.info("early stop at step %d (best val %.4f)", step, best_val)
            break

    last = snapshot(model, optimizer, train_cfg, vocab, schema, step, history, best_val, bad)
    if on_checkpoint:
        on_checkpoint("last", last)
    best.val_history = list(history)
    return TrainResult(best, last, log, stopped)


# ------------------------------------------------------------------ ablations


@dataclass
class AblationRun:
    name: str
    model_config: ModelConfig
    result: TrainResult
    report: dict
    n_params: int
    val_total: float


def run_ablation(name: str, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 train_set, valid_set, test_set, vocab: Vocabulary, schema: LabelSchema,
                 decode_cfg: DecodeConfig | None = None,
                 embeddings: EmbeddingTable | None = None,
                 include_full: bool = True) -> dict[str, AblationRun]:
    """Train the full model and the named variant under identical seeds; evaluate both."""
    from .evaluation import evaluate_model

    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    variants = {"full": model_cfg} if include_full else {}
    variants[name] = model_cfg.model_copy(update=ABLATIONS[name])
    out = {}
    for label, cfg in variants.items():
        res = train_loop(cfg, train_cfg, train_set, valid_set, vocab, schema, embeddings=embeddings)
        model, _ = restore(res.best)
        report = evaluate_model(model, test_set, vocab, schema, decode_cfg or DecodeConfig(),
                                embeddings=embeddings)
        out[label] = AblationRun(label, cfg, res, report, count_parameters(model), res.best.best_val)
    return out
