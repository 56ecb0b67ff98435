"""Greedy and beam-search response generation."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import EOS, PAD, SOS, Batch
from .model import ASEM, ForwardTrace

BANNED = (PAD, SOS)


@dataclass
class Beam:
    tokens: list[int]          # starts with SOS
    logprob: float = 0.0
    finished: bool = False

    @property
    def length(self) -> int:
        return len(self.tokens) - 1

    def score(self, length_penalty: float) -> float:
        if self.length == 0:
            return self.logprob
        return self.logprob / (self.length ** length_penalty)

    def generated(self) -> list[int]:
        """Tokens after SOS, without the closing EOS."""
        out = self.tokens[1:]
        return out[:-1] if self.finished and out and out[-1] == EOS else out


StepFn = Callable[[list[list[int]]], np.ndarray]


def beam_search_core(step_fn: StepFn, width: int, max_new_tokens: int, length_penalty: float = 0.0,
                     sos: int = SOS, eos: Optional[int] = EOS) -> list[Beam]:
    """Beam search over an abstract next-token log-probability function.

    ``step_fn`` maps a list of prefixes to an array [n_prefixes, vocab] of
    log-probabilities; -inf entries are never expanded. Finished beams stay in
    the pool and compete on length-normalized score. Ties resolve toward earlier
    pool entries, then lower token ids.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    beams = [Beam([sos])]
    for _ in range(max_new_tokens):
        alive = [b for b in beams if not b.finished]
        if not alive:
            break
        logps = np.asarray(step_fn([b.tokens for b in alive]), dtype=np.float64)
        pool = [b for b in beams if b.finished]
        for b, row in zip(alive, logps):
            # Only a beam's top-`width` tokens can survive the global cut.
            for tok in np.argsort(-row, kind="stable")[:width]:
                lp = row[tok]
                if not np.isfinite(lp):
                    continue
                tok = int(tok)
                pool.append(Beam(b.tokens + [tok], b.logprob + float(lp), eos is not None and tok == eos))
        order = sorted(range(len(pool)), key=lambda i: (-pool[i].score(length_penalty), i))
        beams = [pool[i] for i in order[:width]]
    return sorted(beams, key=lambda b: -b.score(length_penalty))


def _expand(trace: ForwardTrace, index: int, n: int) -> ForwardTrace:
    pick = lambda t: t[index:index + 1].expand(n, *t.shape[1:])
    return replace(trace, S_h=pick(trace.S_h), context_mask=pick(trace.context_mask),
                   E_att=pick(trace.E_att))


def _next_logprobs(model: ASEM, prefixes: torch.Tensor, trace: ForwardTrace) -> torch.Tensor:
    logits, _ = model.decode(prefixes, trace)
    logp = F.log_softmax(logits[:, -1].double(), dim=-1)
    logp[:, list(BANNED)] = float("-inf")
    return logp


@torch.no_grad()
def greedy_decode(model: ASEM, batch: Batch, max_new_tokens: int = 30) -> list[list[int]]:
    """Argmax decoding (lowest token id wins ties); returns generated ids without EOS."""
    model.eval()
    trace = model.encode(batch)
    B = len(batch)
    prefix = torch.full((B, 1), SOS, dtype=torch.long)
    done = torch.zeros(B, dtype=torch.bool)
    out: list[list[int]] = [[] for _ in range(B)]
    for _ in range(max_new_tokens):
        nxt = _next_logprobs(model, prefix, trace).argmax(-1)
        for i in range(B):
            if not done[i]:
                if int(nxt[i]) == EOS:
                    done[i] = True
                else:
                    out[i].append(int(nxt[i]))
        nxt = torch.where(done & (nxt != EOS), torch.full_like(nxt, PAD), nxt)
        prefix = torch.cat([prefix, nxt.unsqueeze(1)], dim=1)
        if done.all():
            break
    return out


@torch.no_grad()
def beam_search(model: ASEM, batch: Batch, width: int = 5, max_new_tokens: int = 30,
                length_penalty: float = 0.6) -> list[list[Beam]]:
    """Ranked candidates for every example in the batch."""
    model.eval()
    trace = model.encode(batch)
    results = []
    for i in range(len(batch)):
        def step(prefixes: Sequence[list[int]]) -> np.ndarray:
            ids = torch.tensor(prefixes, dtype=torch.long)
            return _next_logprobs(model, ids, _expand(trace, i, len(prefixes))).numpy()

        results.append(beam_search_core(step, width, max_new_tokens, length_penalty))
    return results


@torch.no_grad()
def sequence_logprob(model: ASEM, batch: Batch, index: int, tokens: Sequence[int]) -> float:
    """Log-probability the model assigns to ``tokens`` (after SOS) for one example."""
    model.eval()
    trace = model.encode(batch)
    ids = torch.tensor([[SOS] + list(tokens)], dtype=torch.long)
    logits, _ = model.decode(ids[:, :-1], _expand(trace, index, 1))
    logp = F.log_softmax(logits.double(), dim=-1)[0]
    logp[:, list(BANNED)] = float("-inf")
    return float(sum(logp[t, tok] for t, tok in enumerate(tokens)))
