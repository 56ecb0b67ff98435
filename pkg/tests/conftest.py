import numpy as np
import pytest
import torch

from asem.config import ModelConfig, TrainConfig
from asem.corpus import EOS, SOS, EncodedExample, LabelSchema, build_vocab, collate, synthetic_corpus
from asem.training import init_params


def tiny_config(**kw):
    base = dict(vocab_size=20, embed_dim=8, d_model=8, n_layers=1, n_heads=2, ffn_dim=16,
                n_sentiments=2, n_emotions=3, dropout=0.0, max_len=16)
    base.update(kw)
    return ModelConfig(**base)


def random_batch(cfg: ModelConfig, seed: int, B: int = 2, max_ctx: int = 4, max_resp: int = 4):
    """Random padded batch: contexts of 1..max_ctx tokens, responses SOS + 0..max_resp-2 tokens + EOS."""
    rng = np.random.default_rng(seed)
    examples = []
    for _ in range(B):
        n = int(rng.integers(1, max_ctx + 1))
        ctx = rng.integers(4, cfg.vocab_size, size=n).tolist()
        start = int(rng.integers(0, n))
        body = rng.integers(4, cfg.vocab_size, size=int(rng.integers(0, max_resp - 1))).tolist()
        examples.append(EncodedExample(ctx, start, [SOS] + body + [EOS],
                                       int(rng.integers(0, cfg.n_sentiments)),
                                       int(rng.integers(0, cfg.n_emotions))))
    return collate(examples)


def tiny_model(cfg=None, seed=0, dtype=torch.float32, **kw):
    model = init_params(cfg or tiny_config(**kw), seed)
    model = model.to(dtype)
    model.eval()
    return model


@pytest.fixture(scope="session")
def small_schema():
    return LabelSchema.for_dataset("ED", ["joy", "trust", "anger", "sadness"])


@pytest.fixture(scope="session")
def small_corpus(small_schema):
    return synthetic_corpus(24, small_schema, seed=3, n_fillers=40)


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    return build_vocab(small_corpus)


@pytest.fixture
def small_model_config(small_vocab, small_schema):
    return ModelConfig(vocab_size=len(small_vocab), embed_dim=16, d_model=16, n_layers=1, n_heads=2,
                       ffn_dim=32, n_sentiments=len(small_schema.sentiments),
                       n_emotions=len(small_schema.emotions), dropout=0.0)


@pytest.fixture
def small_train_config():
    return TrainConfig(learning_rate=1e-3, max_steps=6, batch_size=8, eval_every=3,
                       early_stop_patience=5, seed=1)


# ---------------------------------------------------------------- acceptance reporting

ACCEPTANCE_LINES: list[str] = []


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = self.detail if exc_type is None else f"{exc_type.__name__}: {exc}".splitlines()[0]
        line = f"[{status}] criterion {self.number}: {self.title}" + (f" ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
