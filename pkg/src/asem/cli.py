"""Command-line entry points: prep, synth, train, eval, ablate, generate, chat."""
from __future__ import annotations

import functools
import json
import logging
import sys
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import click
import torch
import yaml

from . import checkpoint as ckpt_io
from .config import DecodeConfig, ModelConfig, RunConfig, load_run_config
from .corpus import (DD, ED, EmbeddingTable, LabelSchema, MappedDialogue, Vocabulary, build_vocab,
                     collate, encode_dialogue, load_embeddings, make_batches, prepare_corpus,
                     read_mapped, sentiment_of, split_corpus, synthetic_raw_rows, tokenize,
                     write_mapped)
from .decoding import beam_search
from .evaluation import evaluate_model, predict
from .training import ABLATIONS, restore, run_ablation, train_loop

logger = logging.getLogger("asem")

USER_ERRORS = (ValueError, OSError, yaml.YAMLError, ckpt_io.CheckpointError, KeyError)


def _fail_cleanly(fn):
    """Turn expected operator errors into a one-line message and exit code 1."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except USER_ERRORS as e:
            raise click.ClickException(str(e)) from e
    return wrapper


@dataclass
class RunData:
    train: list[MappedDialogue]
    valid: list[MappedDialogue]
    test: list[MappedDialogue]
    vocab: Vocabulary
    schema: LabelSchema
    model_config: ModelConfig
    embeddings: EmbeddingTable | None


def load_run_data(cfg: RunConfig) -> RunData:
    """Read splits, build vocabulary and label schema, resolve the model config and embeddings."""
    p = cfg.paths
    if p.corpus is not None:
        train, valid, test = split_corpus(read_mapped(p.corpus), cfg.train.seed)
    else:
        train, valid = read_mapped(p.train), read_mapped(p.valid)
        test = read_mapped(p.test) if p.test is not None else []
    if not train or not valid:
        raise ValueError("train and validation splits must be non-empty")
    schema = LabelSchema.for_dataset(cfg.dataset_tag, cfg.emotions)
    for d in train + valid + test:
        schema.emotion(d.emotion)  # fail early on labels outside the schema
    vocab = build_vocab(train, cfg.min_freq)
    model_cfg = ModelConfig(vocab_size=len(vocab), n_sentiments=len(schema.sentiments),
                            n_emotions=len(schema.emotions), **cfg.model.model_dump())
    if p.embeddings is None:
        logger.info("no embeddings file configured; using random initialisation")
        embeddings = None
    else:
        embeddings = load_embeddings(p.embeddings, vocab, model_cfg.embed_dim, cfg.train.seed)
        logger.info("loaded %s-d embeddings from %s", model_cfg.embed_dim, p.embeddings)
    return RunData(train, valid, test, vocab, schema, model_cfg, embeddings)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _load_model(path):
    ckpt = ckpt_io.load(path)
    model, _ = restore(ckpt)
    model.eval()
    return ckpt, model


def _decode_options(fn):
    d = DecodeConfig()
    fn = click.option("--width", type=int, default=d.width, show_default=True, help="Beam width.")(fn)
    fn = click.option("--length-penalty", type=float, default=d.length_penalty, show_default=True)(fn)
    fn = click.option("--max-new-tokens", type=int, default=d.max_new_tokens, show_default=True)(fn)
    return fn


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def main(verbose):
    """ASEM: sentiment-aware mixture-of-experts empathetic dialogue model."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


@main.command()
@click.argument("raw", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("out", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--dataset", "dataset_tag", type=click.Choice([ED, DD]), default=ED, show_default=True)
@_fail_cleanly
def prep(raw, out, dataset_tag):
    """Map a raw dialogue file (.jsonl/.csv/.tsv) to coarse-labelled training records."""
    mapped = prepare_corpus(raw, dataset_tag)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_mapped(mapped, out)
    counts = Counter(d.emotion for d in mapped)
    schema = LabelSchema.for_dataset(dataset_tag)
    click.echo(f"wrote {len(mapped)} examples to {out}")
    for emotion in schema.emotions:
        click.echo(f"{emotion:<14}{sentiment_of(emotion, dataset_tag).name:<10}{counts.get(emotion, 0):>8}")


@main.command()
@click.argument("out", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--n", "n_dialogues", type=int, default=60, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--dataset", "dataset_tag", type=click.Choice([ED, DD]), default=ED, show_default=True)
def synth(out, n_dialogues, seed, dataset_tag):
    """Write a small synthetic raw dialogue file for smoke tests."""
    rows = synthetic_raw_rows(n_dialogues, seed, dataset_tag)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
    click.echo(f"wrote {len(rows)} rows to {out}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None, help="Overrides train.seed.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Output directory (default: paths.out_dir).")
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Continue from a last.ckpt.")
@_fail_cleanly
def train(config_path, seed, out_dir, resume):
    """Train a model; writes best.ckpt, last.ckpt and train_log.jsonl."""
    cfg = load_run_config(config_path, seed)
    data = load_run_data(cfg)
    resume_ckpt = resume_best = None
    if resume is not None:
        resume_ckpt = ckpt_io.load(resume)
        if resume_ckpt.vocab.itos != data.vocab.itos:
            raise ValueError("checkpoint vocabulary does not match the configured training data")
        best_path = Path(resume).with_name("best.ckpt")
        resume_best = ckpt_io.load(best_path) if best_path.exists() else None
        logger.info("resuming from %s at step %d", resume, resume_ckpt.step)

    # Everything above is validation; output files are created only from here on.
    out_dir = out_dir or cfg.paths.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cfg.model_dump_json(indent=2) + "\n")
    log_path = out_dir / "train_log.jsonl"
    with open(log_path, "a" if resume_ckpt else "w", encoding="utf-8") as log_fh:
        def on_log(rec):
            log_fh.write(json.dumps(rec) + "\n")
            log_fh.flush()
            if rec["total"] is not None and (rec["val_total"] is not None or rec["step"] % 50 == 0):
                val = f" val {rec['val_total']:.4f}" if rec["val_total"] is not None else ""
                click.echo(f"step {rec['step']:>6}  L1 {rec['L1']:.4f}  L2 {rec['L2']:.4f}  "
                           f"L3 {rec['L3']:.4f}  total {rec['total']:.4f}{val}")

        def on_checkpoint(kind, ckpt):
            ckpt_io.save(ckpt, out_dir / f"{kind}.ckpt")

        result = train_loop(data.model_config, cfg.train, data.train, data.valid, data.vocab, data.schema,
                            embeddings=data.embeddings, resume=resume_ckpt, resume_best=resume_best,
                            on_log=on_log, on_checkpoint=on_checkpoint)
    if not (out_dir / "best.ckpt").exists():
        ckpt_io.save(result.best, out_dir / "best.ckpt")
    click.echo(f"done at step {result.last.step}; best val {result.best.best_val:.4f} "
               f"(step {result.best.step}); checkpoints in {out_dir}")


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Mapped corpus (.jsonl) to evaluate on.")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Report path (default: print to stdout).")
@click.option("--embeddings", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Word vectors for the cosine metric (default: the model's own embeddings).")
@_decode_options
@_fail_cleanly
def eval_cmd(checkpoint, data_path, out, embeddings, width, length_penalty, max_new_tokens):
    """Compute the metric report for a checkpoint."""
    dec = DecodeConfig(width=width, length_penalty=length_penalty, max_new_tokens=max_new_tokens)
    ckpt, model = _load_model(checkpoint)
    dialogues = read_mapped(data_path)
    if not dialogues:
        raise ValueError(f"{data_path}: no examples")
    table = None
    if embeddings is not None:
        table = load_embeddings(embeddings, ckpt.vocab, ckpt.model_config.embed_dim, ckpt.train_config.seed)
    report = evaluate_model(model, dialogues, ckpt.vocab, ckpt.schema, dec, table)
    if out is None:
        click.echo(json.dumps(report, indent=2))
    else:
        _write_json(out, report)
        click.echo(f"ppl {report['ppl']:.3f}  bleu {report['bleu']:.4f}  d1 {report['distinct_1']:.4f}  "
                   f"d2 {report['distinct_2']:.4f}  cos {report['avg_cosine']:.4f}  "
                   f"macro-F1 {report['macro_f1']:.4f}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.argument("names", nargs=-1, type=click.Choice(sorted(ABLATIONS)))
@click.option("--seed", type=int, default=None, help="Overrides train.seed.")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="JSONL report (default: <out_dir>/ablation.jsonl).")
@_fail_cleanly
def ablate(config_path, names, seed, out):
    """Train the full model and each named ablation under the same seed; report side by side."""
    cfg = load_run_config(config_path, seed)
    data = load_run_data(cfg)
    test = data.test or data.valid
    names = list(names) or sorted(ABLATIONS)
    out = out or cfg.paths.out_dir / "ablation.jsonl"
    runs = {}
    for i, name in enumerate(names):
        runs.update(run_ablation(name, data.model_config, cfg.train, data.train, data.valid, test,
                                 data.vocab, data.schema, cfg.decoding, data.embeddings,
                                 include_full=(i == 0)))
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for label, run in runs.items():
            rec = {"variant": label, "n_params": run.n_params, "val_total": run.val_total, **run.report}
            fh.write(json.dumps(rec) + "\n")
            click.echo(f"{label:<20} params {run.n_params:>9}  val {run.val_total:.4f}  "
                       f"ppl {run.report['ppl']:.3f}  bleu {run.report['bleu']:.4f}  "
                       f"macro-F1 {run.report['macro_f1']:.4f}")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Mapped corpus; one response per example.")
@click.option("--turn", "turns", multiple=True, help="Dialogue turn, oldest first; the last is the current turn.")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="JSONL output (default: stdout).")
@click.option("--n-best", type=int, default=1, show_default=True)
@_decode_options
@_fail_cleanly
def generate(checkpoint, data_path, turns, out, n_best, width, length_penalty, max_new_tokens):
    """Beam-search responses for a corpus or for turns given on the command line."""
    if (data_path is None) == (not turns):
        raise click.UsageError("give exactly one of --data or --turn")
    ckpt, model = _load_model(checkpoint)
    if data_path is not None:
        dialogues = read_mapped(data_path)
    else:
        toks = [tokenize(t) for t in turns]
        dialogues = [_query(toks[:-1], toks[-1], ckpt.schema)]
    records = []
    for b in make_batches(dialogues, 16, ckpt.vocab, ckpt.schema, ckpt.model_config.max_len):
        preds = predict(model, b)
        for p, beams in zip(preds, beam_search(model, b, width, max_new_tokens, length_penalty)):
            d = dialogues[len(records)]
            records.append({
                "conversation_id": d.conversation_id,
                "sentiment": ckpt.schema.sentiments[p.sentiment],
                "emotion": ckpt.schema.emotions[p.emotion],
                "responses": [" ".join(ckpt.vocab.decode(c.generated())) for c in beams[:n_best]],
                "reference": " ".join(d.response) if data_path is not None else None,
            })
    lines = "".join(json.dumps(r) + "\n" for r in records)
    if out is None:
        click.echo(lines, nl=False)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(lines)


def _query(history: list[list[str]], current: list[str], schema: LabelSchema) -> MappedDialogue:
    # Labels are placeholders: only the encoder path is used for prediction.
    emotion = schema.emotions[0]
    return MappedDialogue(history, current, [], emotion, sentiment_of(emotion, schema.dataset_tag).name,
                          schema.dataset_tag)


@dataclass
class ChatSession:
    """Running multi-turn context for the interactive demo."""
    model: torch.nn.Module
    vocab: Vocabulary
    schema: LabelSchema
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    turns: list[list[str]] = field(default_factory=list)

    def reset(self) -> None:
        self.turns = []

    def batch_for(self, user_tokens: list[str]):
        query = _query(self.turns, user_tokens, self.schema)
        return collate([encode_dialogue(query, self.vocab, self.schema, self.model.config.max_len)])

    def respond(self, text: str) -> dict:
        user = tokenize(text)
        if not user:
            raise ValueError("empty input")
        batch = self.batch_for(user)
        (pred,) = predict(self.model, batch)
        (beams,) = beam_search(self.model, batch, self.decode.width, self.decode.max_new_tokens,
                               self.decode.length_penalty)
        reply = self.vocab.decode(beams[0].generated())
        self.turns += [user, reply]
        top = sorted(range(len(pred.emotion_probs)), key=lambda i: -pred.emotion_probs[i])[:3]
        return {
            "sentiment": self.schema.sentiments[pred.sentiment],
            "sentiment_prob": pred.sentiment_probs[pred.sentiment],
            "emotion": self.schema.emotions[pred.emotion],
            "top3": [(self.schema.emotions[i], pred.emotion_probs[i]) for i in top],
            "response": " ".join(reply),
        }


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@_decode_options
@_fail_cleanly
def chat(checkpoint, width, length_penalty, max_new_tokens):
    """Interactive chat. /reset clears the context, /quit exits."""
    ckpt, model = _load_model(checkpoint)
    session = ChatSession(model, ckpt.vocab, ckpt.schema,
                          DecodeConfig(width=width, length_penalty=length_penalty, max_new_tokens=max_new_tokens))
    stdin = click.get_text_stream("stdin")
    click.echo("type a message; /reset clears the conversation, /quit exits")
    while True:
        click.echo("you> ", nl=False)
        line = stdin.readline()
        if not line:
            break
        line = line.strip()
        if line == "/quit":
            break
        if line == "/reset":
            session.reset()
            click.echo("(context cleared)")
            continue
        if not line:
            continue
        try:
            out = session.respond(line)
        except Exception as e:  # keep the session alive on any decode failure
            click.echo(f"error: {e}", err=True)
            continue
        top = ", ".join(f"{name} {p:.2f}" for name, p in out["top3"])
        click.echo(f"[sentiment: {out['sentiment']} {out['sentiment_prob']:.2f}]  "
                   f"[emotion: {out['emotion']} | top-3: {top}]")
        click.echo(f"bot> {out['response']}")


if __name__ == "__main__":
    main()
