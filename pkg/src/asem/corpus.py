"""Dialogue ingestion, Plutchik emotion mapping, vocabulary, embeddings and batching."""
from __future__ import annotations

import csv
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

logger = logging.getLogger(__name__)

PAD, UNK, SOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<sos>", "<eos>")

ED, DD = "ED", "DD"
DATASET_TAGS = (ED, DD)

ED_EMOTIONS = (
    "joy", "surprise", "anticipation", "love", "trust",
    "anger", "disgust", "fear", "sadness", "remorse",
)
DD_EMOTIONS = ("anger", "disgust", "fear", "joy", "sadness", "surprise", "no_emotion")
ALL_EMOTIONS = ED_EMOTIONS + ("no_emotion",)

ED_SENTIMENTS = ("positive", "negative")
DD_SENTIMENTS = ("positive", "negative", "neutral")

# Fine-grained Empathetic Dialogues labels onto Plutchik classes (8 basic + love, remorse).
ED_TO_PLUTCHIK = {
    "excited": "joy", "joyful": "joy", "grateful": "joy", "content": "joy", "confident": "joy",
    "surprised": "surprise", "impressed": "surprise",
    "anticipating": "anticipation", "hopeful": "anticipation", "prepared": "anticipation",
    "sentimental": "love", "caring": "love", "nostalgic": "love",
    "proud": "trust", "trusting": "trust", "faithful": "trust",
    "angry": "anger", "annoyed": "anger", "furious": "anger", "jealous": "anger",
    "disgusted": "disgust",
    "afraid": "fear", "terrified": "fear", "anxious": "fear", "apprehensive": "fear",
    "embarrassed": "fear",
    "sad": "sadness", "lonely": "sadness", "devastated": "sadness", "disappointed": "sadness",
    "guilty": "remorse", "ashamed": "remorse",
}

# DailyDialog already uses the basic classes; "happiness" is its name for joy.
DD_TO_PLUTCHIK = {
    "anger": "anger", "disgust": "disgust", "fear": "fear", "happiness": "joy",
    "joy": "joy", "sadness": "sadness", "surprise": "surprise",
    "no_emotion": "no_emotion", "no emotion": "no_emotion", "none": "no_emotion",
}

SENTIMENT_OF = {
    "joy": "positive", "surprise": "positive", "anticipation": "positive",
    "love": "positive", "trust": "positive",
    "anger": "negative", "disgust": "negative", "fear": "negative",
    "sadness": "negative", "remorse": "negative",
    "no_emotion": "neutral",
}


class UnknownEmotionError(ValueError):
    pass


@dataclass(frozen=True)
class LabelSchema:
    """Ordered emotion and sentiment class names for one dataset.

    Indices are positions in these tuples, so a schema is the bijection between
    label names and the integer targets the model is trained on.
    """

    dataset_tag: str
    emotions: tuple[str, ...]
    sentiments: tuple[str, ...]

    def __post_init__(self):
        if self.dataset_tag not in DATASET_TAGS:
            raise ValueError(f"unknown dataset tag {self.dataset_tag!r}")
        for name in self.emotions:
            if name not in ALL_EMOTIONS:
                raise UnknownEmotionError(f"unknown emotion class {name!r}")
            if name == "no_emotion" and self.dataset_tag != DD:
                raise ValueError("no_emotion is only legal for DD data")
        if "neutral" in self.sentiments and self.dataset_tag != DD:
            raise ValueError("neutral sentiment is only legal for DD data")
        if len(set(self.emotions)) != len(self.emotions) or len(self.emotions) < 2:
            raise ValueError("emotions must be at least two distinct classes")

    @classmethod
    def for_dataset(cls, dataset_tag: str, emotions: Sequence[str] | None = None) -> "LabelSchema":
        default = ED_EMOTIONS if dataset_tag == ED else DD_EMOTIONS
        emotions = tuple(emotions) if emotions else default
        needed = {SENTIMENT_OF[e] for e in emotions}
        base = ED_SENTIMENTS if dataset_tag == ED else DD_SENTIMENTS
        # Keep the canonical sentiment order, drop classes no emotion can produce.
        sentiments = tuple(s for s in base if s in needed or s != "neutral")
        return cls(dataset_tag, emotions, sentiments)

    def emotion(self, name: str) -> "EmotionLabel":
        try:
            return EmotionLabel(name, self.emotions.index(name))
        except ValueError:
            raise UnknownEmotionError(f"emotion {name!r} is not in this schema {self.emotions}") from None

    def sentiment(self, name: str) -> "SentimentLabel":
        return SentimentLabel(name, self.sentiments.index(name))

    def to_dict(self) -> dict:
        return {"dataset_tag": self.dataset_tag, "emotions": list(self.emotions),
                "sentiments": list(self.sentiments)}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSchema":
        return cls(d["dataset_tag"], tuple(d["emotions"]), tuple(d["sentiments"]))


@dataclass(frozen=True)
class EmotionLabel:
    name: str
    index: int


@dataclass(frozen=True)
class SentimentLabel:
    name: str
    index: int


@dataclass
class RawDialogue:
    conversation_id: str
    turns: list[tuple[str, str]]
    fine_emotion: str | list[str]
    dataset_tag: str

    def __post_init__(self):
        if len(self.turns) < 2:
            raise ValueError(f"dialogue {self.conversation_id} has fewer than 2 turns")
        for speaker, text in self.turns:
            if not text.strip():
                raise ValueError(f"dialogue {self.conversation_id} has an empty utterance")


@dataclass
class MappedDialogue:
    """One training example: history turns, the current user turn, the gold reply."""

    context_turns: list[list[str]]
    current_turn: list[str]
    response: list[str]
    emotion: str
    sentiment: str
    dataset_tag: str = ED
    conversation_id: str = ""
    fine_emotion: str = ""

    def to_record(self) -> dict:
        return {
            "conversation_id": self.conversation_id,
            "dataset_tag": self.dataset_tag,
            "fine_emotion": self.fine_emotion,
            "emotion": self.emotion,
            "sentiment": self.sentiment,
            "context_turns": self.context_turns,
            "current_turn": self.current_turn,
            "response": self.response,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "MappedDialogue":
        return cls(
            context_turns=[list(t) for t in rec["context_turns"]],
            current_turn=list(rec["current_turn"]),
            response=list(rec["response"]),
            emotion=rec["emotion"],
            sentiment=rec["sentiment"],
            dataset_tag=rec.get("dataset_tag", ED),
            conversation_id=rec.get("conversation_id", ""),
            fine_emotion=rec.get("fine_emotion", ""),
        )


def map_emotion(fine_label: str, dataset_tag: str) -> EmotionLabel:
    """Map a fine-grained dataset label to its coarse Plutchik class."""
    key = fine_label.strip().lower()
    if dataset_tag == ED:
        table, order = ED_TO_PLUTCHIK, ED_EMOTIONS
    elif dataset_tag == DD:
        table, order = DD_TO_PLUTCHIK, DD_EMOTIONS
    else:
        raise ValueError(f"unknown dataset tag {dataset_tag!r}")
    if key not in table:
        raise UnknownEmotionError(f"unknown {dataset_tag} emotion label {fine_label!r}")
    name = table[key]
    return EmotionLabel(name, order.index(name))


def sentiment_of(emotion: EmotionLabel | str, dataset_tag: str) -> SentimentLabel:
    name = emotion if isinstance(emotion, str) else emotion.name
    if name not in SENTIMENT_OF:
        raise UnknownEmotionError(f"unknown emotion class {name!r}")
    if name == "no_emotion" and dataset_tag != DD:
        raise ValueError("no_emotion has no sentiment outside DD data")
    sent = SENTIMENT_OF[name]
    order = ED_SENTIMENTS if dataset_tag == ED else DD_SENTIMENTS
    return SentimentLabel(sent, order.index(sent))


_PUNCT = re.compile(r"^(.*?)([.,!?;:\"')\]]+)$")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, split trailing punctuation into its own tokens."""
    out = []
    for piece in text.lower().split():
        m = _PUNCT.match(piece)
        if m and m.group(1):
            out.append(m.group(1))
            out.extend(m.group(2))
        elif m:
            out.extend(m.group(2))
        else:
            out.append(piece)
    return out


# ---------------------------------------------------------------- raw dataset io

RAW_FIELDS = ("conversation_id", "turn_index", "speaker", "text", "fine_emotion")


def read_raw_rows(path: str | Path) -> list[dict]:
    """Read turn rows from .jsonl, .csv or .tsv (columns: RAW_FIELDS)."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix in (".jsonl", ".json"):
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
    else:
        delim = "\t" if path.suffix == ".tsv" else ","
        rows = list(csv.DictReader(text.splitlines(), delimiter=delim))
    for i, row in enumerate(rows):
        missing = [f for f in RAW_FIELDS if f not in row]
        if missing:
            raise ValueError(f"{path}: row {i} is missing fields {missing}")
    return rows


def group_dialogues(rows: Iterable[dict], dataset_tag: str) -> list[RawDialogue]:
    convs: dict[str, list[dict]] = {}
    for row in rows:
        convs.setdefault(str(row["conversation_id"]), []).append(row)
    dialogues = []
    for conv_id, turns in convs.items():
        turns.sort(key=lambda r: int(r["turn_index"]))
        if dataset_tag == ED:
            fine = turns[0]["fine_emotion"]
        else:
            fine = [t["fine_emotion"] for t in turns]
        dialogues.append(RawDialogue(
            conversation_id=conv_id,
            turns=[(str(t["speaker"]), str(t["text"])) for t in turns],
            fine_emotion=fine,
            dataset_tag=dataset_tag,
        ))
    return dialogues


def map_dialogue(raw: RawDialogue) -> list[MappedDialogue]:
    """Expand a conversation into one example per reply of the opening speaker's turns."""
    user = raw.turns[0][0]
    out = []
    for i in range(len(raw.turns) - 1):
        speaker, text = raw.turns[i]
        if speaker != user:
            continue
        fine = raw.fine_emotion if isinstance(raw.fine_emotion, str) else raw.fine_emotion[i]
        emo = map_emotion(fine, raw.dataset_tag)
        out.append(MappedDialogue(
            context_turns=[tokenize(t) for _, t in raw.turns[:i]],
            current_turn=tokenize(text),
            response=tokenize(raw.turns[i + 1][1]),
            emotion=emo.name,
            sentiment=sentiment_of(emo, raw.dataset_tag).name,
            dataset_tag=raw.dataset_tag,
            conversation_id=raw.conversation_id,
            fine_emotion=fine.strip().lower(),
        ))
    return out


def prepare_corpus(path: str | Path, dataset_tag: str) -> list[MappedDialogue]:
    """Read a raw dataset file and map every example. Unknown labels are collected and raised together."""
    rows = read_raw_rows(path)
    if not rows:
        raise ValueError(f"{path}: empty dataset")
    table = ED_TO_PLUTCHIK if dataset_tag == ED else DD_TO_PLUTCHIK
    unknown = sorted({r["fine_emotion"] for r in rows if r["fine_emotion"].strip().lower() not in table})
    if unknown:
        raise UnknownEmotionError(f"unknown {dataset_tag} emotion labels: {unknown}")
    mapped = []
    for raw in group_dialogues(rows, dataset_tag):
        mapped.extend(map_dialogue(raw))
    return mapped


def write_mapped(dialogues: Iterable[MappedDialogue], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dialogues:
            fh.write(json.dumps(d.to_record(), ensure_ascii=False) + "\n")


def read_mapped(path: str | Path) -> list[MappedDialogue]:
    with open(path, encoding="utf-8") as fh:
        return [MappedDialogue.from_record(json.loads(line)) for line in fh if line.strip()]


def split_corpus(dialogues: Sequence[MappedDialogue], seed: int,
                 fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)):
    """Seeded shuffle then cut into train/valid/test."""
    order = np.random.default_rng(seed).permutation(len(dialogues))
    n_train = int(round(fractions[0] * len(dialogues)))
    n_valid = int(round(fractions[1] * len(dialogues)))
    pick = lambda idx: [dialogues[i] for i in idx]
    return (pick(order[:n_train]), pick(order[n_train:n_train + n_valid]),
            pick(order[n_train + n_valid:]))


# ---------------------------------------------------------------- vocabulary


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip_special and i in (PAD, SOS):
                continue
            if strip_special and i == EOS:
                break
            out.append(self.itos[i])
        return out


def _dialogue_tokens(d) -> Iterable[str]:
    if isinstance(d, MappedDialogue):
        for turn in d.context_turns:
            yield from turn
        yield from d.current_turn
        yield from d.response
    elif isinstance(d, str):
        yield from tokenize(d)
    else:
        yield from d


def build_vocab(corpus: Iterable, min_freq: int = 1) -> Vocabulary:
    """Vocabulary over a corpus, ordered by frequency (desc) then token.

    Items may be MappedDialogues, raw strings (tokenized here) or token lists.
    """
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts = Counter()
    n_items = 0
    for item in corpus:
        n_items += 1
        counts.update(_dialogue_tokens(item))
    if n_items == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    for tok in RESERVED:
        counts.pop(tok, None)
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + kept)


# ---------------------------------------------------------------- embeddings


@dataclass
class EmbeddingTable:
    matrix: np.ndarray
    dim: int

    def __post_init__(self):
        if self.matrix.shape[1] != self.dim:
            raise ValueError("matrix width does not match dim")


def random_embeddings(vocab: Vocabulary, dim: int, seed: int) -> EmbeddingTable:
    rng = np.random.default_rng(seed)
    m = rng.uniform(-0.1, 0.1, size=(len(vocab), dim))
    m[PAD] = 0.0
    return EmbeddingTable(m, dim)


def load_embeddings(path: str | Path, vocab: Vocabulary, dim: int, seed: int) -> EmbeddingTable:
    """GloVe-format text vectors for in-vocabulary tokens; misses get seeded uniform(-0.1, 0.1)."""
    table = random_embeddings(vocab, dim, seed)
    found = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip().split(" ")
            if len(parts) < 2:
                continue
            if len(parts) - 1 != dim:
                raise ValueError(f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
            idx = vocab.stoi.get(parts[0])
            if idx is not None:
                table.matrix[idx] = np.asarray(parts[1:], dtype=np.float64)
                found += 1
    table.matrix[PAD] = 0.0
    logger.info("embeddings: %d/%d vocabulary tokens found in %s", found, len(vocab), path)
    return table


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    """Padded tensors for a group of examples.

    ``context_ids`` holds history tokens followed by the current turn; the
    current turn occupies ``[current_start, current_end)`` of each row.
    """

    context_ids: torch.Tensor
    current_start: torch.Tensor
    current_end: torch.Tensor
    response_ids: torch.Tensor
    context_mask: torch.Tensor
    response_mask: torch.Tensor
    sentiment_targets: torch.Tensor
    emotion_targets: torch.Tensor
    examples: list = field(default_factory=list, repr=False)

    def __len__(self):
        return self.context_ids.shape[0]


@dataclass
class EncodedExample:
    context: list[int]
    current_start: int
    response: list[int]
    sentiment: int
    emotion: int


def encode_dialogue(d: MappedDialogue, vocab: Vocabulary, schema: LabelSchema,
                    max_len: int = 128) -> EncodedExample:
    history = [i for turn in d.context_turns for i in vocab.encode(turn)]
    current = vocab.encode(d.current_turn)
    if not current:
        raise ValueError("current turn is empty")
    room = max(max_len - len(current), 0)
    if len(history) > room:
        logger.warning("context of %d tokens exceeds max_len=%d; dropping %d oldest history tokens",
                       len(history) + len(current), max_len, len(history) - room)
        history = history[len(history) - room:] if room else []
    return EncodedExample(
        context=history + current,
        current_start=len(history),
        response=[SOS] + vocab.encode(d.response) + [EOS],
        sentiment=schema.sentiment(d.sentiment).index,
        emotion=schema.emotion(d.emotion).index,
    )


def collate(examples: Sequence[EncodedExample]) -> Batch:
    B = len(examples)
    Lc = max(len(e.context) for e in examples)
    Lr = max(len(e.response) for e in examples)
    ctx = torch.full((B, Lc), PAD, dtype=torch.long)
    resp = torch.full((B, Lr), PAD, dtype=torch.long)
    for i, e in enumerate(examples):
        ctx[i, :len(e.context)] = torch.tensor(e.context)
        resp[i, :len(e.response)] = torch.tensor(e.response)
    return Batch(
        context_ids=ctx,
        current_start=torch.tensor([e.current_start for e in examples]),
        current_end=torch.tensor([len(e.context) for e in examples]),
        response_ids=resp,
        context_mask=ctx != PAD,
        response_mask=resp != PAD,
        sentiment_targets=torch.tensor([e.sentiment for e in examples]),
        emotion_targets=torch.tensor([e.emotion for e in examples]),
        examples=list(examples),
    )


def make_batches(dialogues: Sequence[MappedDialogue | EncodedExample], batch_size: int,
                 vocab: Vocabulary | None = None, schema: LabelSchema | None = None,
                 max_len: int = 128) -> list[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    encoded = [d if isinstance(d, EncodedExample) else encode_dialogue(d, vocab, schema, max_len)
               for d in dialogues]
    return [collate(encoded[i:i + batch_size]) for i in range(0, len(encoded), batch_size)]


# ---------------------------------------------------------------- synthetic data

_SYN_LEXICON = {
    "joy": ["wonderful", "delighted", "thrilled", "celebrate", "happy"],
    "trust": ["reliable", "loyal", "honest", "depend", "proud"],
    "anger": ["furious", "outraged", "unfair", "yelled", "angry"],
    "sadness": ["miserable", "lonely", "crying", "lost", "sad"],
    "surprise": ["unexpected", "shocked", "suddenly", "amazed", "wow"],
    "anticipation": ["waiting", "soon", "hoping", "planning", "tomorrow"],
    "love": ["cherish", "adore", "memories", "caring", "sweet"],
    "disgust": ["gross", "revolting", "filthy", "nasty", "rotten"],
    "fear": ["scared", "terrified", "nervous", "afraid", "dark"],
    "remorse": ["sorry", "guilty", "ashamed", "regret", "mistake"],
    "no_emotion": ["okay", "fine", "usual", "normal", "regular"],
}
_SYN_REPLY = {
    "positive": ["that", "is", "great", "news", "!"],
    "negative": ["i", "am", "so", "sorry", "."],
    "neutral": ["i", "see", "."],
}


def synthetic_corpus(n: int, schema: LabelSchema, seed: int = 0, n_fillers: int = 250,
                     turn_len: tuple[int, int] = (4, 8)) -> list[MappedDialogue]:
    """Small learnable corpus: emotion cue words in the current turn, filler words elsewhere."""
    rng = np.random.default_rng(seed)
    fillers = [f"w{i:03d}" for i in range(n_fillers)]

    def words(k):
        return [fillers[j] for j in rng.integers(0, n_fillers, size=k)]

    out = []
    for i in range(n):
        emo = schema.emotions[i % len(schema.emotions)]
        sent = SENTIMENT_OF[emo]
        history = [words(int(rng.integers(*turn_len))) for _ in range(int(rng.integers(0, 3)))]
        current = words(int(rng.integers(*turn_len)))
        cue = _SYN_LEXICON[emo][int(rng.integers(0, 5))]
        current.insert(int(rng.integers(0, len(current) + 1)), cue)
        response = _SYN_REPLY[sent] + words(int(rng.integers(1, 4)))
        out.append(MappedDialogue(history, current, response, emo, sent, schema.dataset_tag,
                                  conversation_id=f"syn{i:05d}"))
    return out


def synthetic_raw_rows(n: int, seed: int = 0, dataset_tag: str = ED) -> list[dict]:
    """Raw turn rows in the dataset input format, for demos of the prep command."""
    rng = np.random.default_rng(seed)
    fine = sorted(ED_TO_PLUTCHIK) if dataset_tag == ED else ["anger", "disgust", "fear", "happiness",
                                                            "sadness", "surprise", "no_emotion"]
    rows = []
    for c in range(n):
        label = fine[int(rng.integers(0, len(fine)))]
        emo = (ED_TO_PLUTCHIK if dataset_tag == ED else DD_TO_PLUTCHIK)[label]
        cue = _SYN_LEXICON[emo]
        n_turns = int(rng.integers(2, 5))
        for t in range(n_turns):
            if t % 2 == 0:
                text = f"i feel {cue[int(rng.integers(0, 5))]} about w{int(rng.integers(0, 50)):03d} today."
            else:
                text = " ".join(_SYN_REPLY[SENTIMENT_OF[emo]])
            rows.append({"conversation_id": f"c{c:05d}", "turn_index": t,
                         "speaker": "speaker" if t % 2 == 0 else "listener",
                         "text": text, "fine_emotion": label})
    return rows
