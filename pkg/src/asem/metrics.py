"""Automatic evaluation metrics and Fleiss' kappa."""
from __future__ import annotations

import math
from collections import Counter
from typing import Iterable, Sequence

import numpy as np

Tokens = Sequence[str]


def perplexity_from_nll(total_nll: float, n_tokens: int) -> float:
    if n_tokens <= 0:
        raise ValueError("perplexity of an empty evaluation set")
    return math.exp(total_nll / n_tokens)


def perplexity(model, batches) -> float:
    """exp(summed gold-token NLL / number of gold tokens) under teacher forcing."""
    import torch

    from .model import token_nll

    total, count = 0.0, 0
    model.eval()
    with torch.no_grad():
        for b in batches:
            nll, n = token_nll(model(b), b)
            total += nll
            count += n
    return perplexity_from_nll(total, count)


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Tokens], references: Sequence[Tokens], max_n: int = 4) -> float:
    """Corpus BLEU-4 with one reference per candidate.

    Clipped n-gram counts are pooled over the corpus. For n >= 2 a zero match
    count is smoothed to 1 / (total + 1).
    """
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    if not candidates:
        raise ValueError("BLEU of an empty corpus")
    matches = [0] * max_n
    totals = [0] * max_n
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            c, r = _ngrams(cand, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(k, r[g]) for g, k in c.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    if cand_len == 0 or matches[0] == 0:
        return 0.0
    log_p = 0.0
    for n in range(max_n):
        if matches[n] == 0:
            log_p += math.log(1.0 / (totals[n] + 1))
        else:
            log_p += math.log(matches[n] / totals[n])
    bp = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / cand_len)
    return bp * math.exp(log_p / max_n)


def distinct_n(candidates: Iterable[Tokens], n: int) -> float:
    """Unique n-grams over total n-grams, pooled across the corpus."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seen, total = set(), 0
    for cand in candidates:
        grams = [tuple(cand[i:i + n]) for i in range(len(cand) - n + 1)]
        seen.update(grams)
        total += len(grams)
    if total == 0:
        raise ValueError(f"corpus has no {n}-grams")
    return len(seen) / total


def _mean_vector(tokens: Tokens, lookup) -> np.ndarray | None:
    vecs = [lookup(t) for t in tokens]
    vecs = [v for v in vecs if v is not None]
    return np.mean(vecs, axis=0) if vecs else None


def cosine(a: np.ndarray | None, b: np.ndarray | None) -> float:
    if a is None or b is None:
        return 0.0
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def avg_cosine(candidates: Sequence[Tokens], references: Sequence[Tokens], embeddings, vocab=None) -> float:
    """Mean over pairs of the cosine between averaged token embeddings.

    ``embeddings`` is an EmbeddingTable (with ``vocab`` for lookup; unknown tokens
    use the UNK row, PAD is skipped) or a plain token -> vector mapping.
    """
    from .corpus import PAD, UNK

    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    if not candidates:
        return 0.0
    if isinstance(embeddings, dict):
        lookup = lambda t: embeddings.get(t)
    else:
        matrix = embeddings.matrix

        def lookup(t):
            idx = vocab.stoi.get(t, UNK)
            return None if idx == PAD else matrix[idx]

    scores = [cosine(_mean_vector(c, lookup), _mean_vector(r, lookup))
              for c, r in zip(candidates, references)]
    return float(np.mean(scores))


def confusion_matrix(predictions: Sequence[int], golds: Sequence[int], n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for p, g in zip(predictions, golds):
        cm[g, p] += 1
    return cm


def macro_f1(predictions: Sequence[int], golds: Sequence[int], n_classes: int | None = None,
             exclude: Iterable[int] = ()):
    """Macro-averaged F1 with 0/0 taken as 0.

    Returns (macro_f1, per-class rows, confusion matrix [gold, predicted]).
    Excluded classes are dropped from the average only.
    """
    if len(predictions) != len(golds):
        raise ValueError("predictions and golds differ in length")
    if not golds:
        raise ValueError("macro-F1 of empty inputs")
    if n_classes is None:
        n_classes = max(max(predictions), max(golds)) + 1
    cm = confusion_matrix(predictions, golds, n_classes)
    exclude = set(exclude)
    rows, f1s = [], []
    for c in range(n_classes):
        tp = cm[c, c]
        pred_c, gold_c = cm[:, c].sum(), cm[c, :].sum()
        prec = tp / pred_c if pred_c else 0.0
        rec = tp / gold_c if gold_c else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        rows.append({"class": c, "precision": float(prec), "recall": float(rec), "f1": float(f1),
                     "support": int(gold_c)})
        if c not in exclude:
            f1s.append(f1)
    return float(np.mean(f1s)) if f1s else 0.0, rows, cm


def fleiss_kappa(ratings) -> float:
    """Fleiss' kappa for an items x categories matrix of rater counts.

    Every item must have the same number of raters (at least 2). When chance
    agreement is already 1 (everyone picks one category throughout), agreement
    is perfect and 1.0 is returned.
    """
    r = np.asarray(ratings, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] == 0:
        raise ValueError("ratings must be a non-empty items x categories matrix")
    per_item = r.sum(axis=1)
    n = per_item[0]
    if not np.all(per_item == n):
        raise ValueError("every item must be rated by the same number of annotators")
    if n < 2:
        raise ValueError("need at least two annotators per item")
    N = r.shape[0]
    P_i = ((r * r).sum(axis=1) - n) / (n * (n - 1))
    P_bar = P_i.mean()
    p_j = r.sum(axis=0) / (N * n)
    P_e = (p_j ** 2).sum()
    if P_e == 1.0:
        return 1.0
    return float((P_bar - P_e) / (1 - P_e))
