"""Model-level evaluation: classification, teacher-forced perplexity, generated-text metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from . import metrics
from .config import DecodeConfig
from .corpus import Batch, EmbeddingTable, LabelSchema, MappedDialogue, Vocabulary, make_batches
from .decoding import beam_search
from .model import ASEM

REPORT_KEYS = ("ppl", "bleu", "distinct_1", "distinct_2", "avg_cosine", "macro_f1", "per_class", "confusion")


@dataclass
class Prediction:
    sentiment: int
    emotion: int
    sentiment_probs: list[float]
    emotion_probs: list[float]


@torch.no_grad()
def predict(model: ASEM, batch: Batch) -> list[Prediction]:
    model.eval()
    trace = model.encode(batch)
    return [Prediction(int(s.argmax()), int(e.argmax()), s.tolist(), e.tolist())
            for s, e in zip(trace.S_att_pooled, trace.E_att)]


def _safe_distinct(cands, n):
    try:
        return metrics.distinct_n(cands, n)
    except ValueError:
        return 0.0


def evaluate_model(model: ASEM, dialogues: Sequence[MappedDialogue], vocab: Vocabulary,
                   schema: LabelSchema, decode_cfg: DecodeConfig,
                   embeddings: EmbeddingTable | None = None, batch_size: int = 16) -> dict:
    """Full report; keys are REPORT_KEYS in that order. Values are raw, not scaled by 100."""
    batches = make_batches(dialogues, batch_size, vocab, schema, model.config.max_len)
    preds, golds, cands, refs = [], [], [], []
    for b in batches:
        preds += [p.emotion for p in predict(model, b)]
        golds += b.emotion_targets.tolist()
        for beams in beam_search(model, b, decode_cfg.width, decode_cfg.max_new_tokens,
                                 decode_cfg.length_penalty):
            cands.append(vocab.decode(beams[0].generated()))
        refs += [vocab.decode(e.response) for e in b.examples]
    exclude = [schema.emotions.index("no_emotion")] if "no_emotion" in schema.emotions else []
    f1, rows, cm = metrics.macro_f1(preds, golds, len(schema.emotions), exclude=exclude)
    for row in rows:
        row["class"] = schema.emotions[row["class"]]
    if embeddings is None:
        embeddings = EmbeddingTable(model.embedding.weight.detach().double().numpy(),
                                    model.config.embed_dim)
    return {
        "ppl": metrics.perplexity(model, batches),
        "bleu": metrics.bleu(cands, refs),
        "distinct_1": _safe_distinct(cands, 1),
        "distinct_2": _safe_distinct(cands, 2),
        "avg_cosine": metrics.avg_cosine(cands, refs, embeddings, vocab),
        "macro_f1": f1,
        "per_class": rows,
        "confusion": np.asarray(cm).tolist(),
    }


def classification_accuracy(model: ASEM, dialogues, vocab, schema, batch_size: int = 16):
    """(emotion macro-F1, sentiment accuracy) over a corpus."""
    batches = make_batches(dialogues, batch_size, vocab, schema, model.config.max_len)
    e_pred, e_gold, s_hit, n = [], [], 0, 0
    for b in batches:
        ps = predict(model, b)
        e_pred += [p.emotion for p in ps]
        e_gold += b.emotion_targets.tolist()
        s_hit += sum(int(p.sentiment == t) for p, t in zip(ps, b.sentiment_targets.tolist()))
        n += len(b)
    f1, _, _ = metrics.macro_f1(e_pred, e_gold, len(schema.emotions))
    return f1, s_hit / n
