"""End-to-end steps shared by the CLI and the ablation runner."""
from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from . import config as C
from .corpus import AnnotatedSentence, build_vocab, read_corpus_file, synth_corpus
from .masking import extend_vocab_for_lmlm
from .probe import masked_tag_accuracy, probe_finetune
from .tags import TASKS, tagsets_json
from .trainer import Pretrained, TrainResult, Trainer

log = logging.getLogger(__name__)


def load_corpora(cfg: dict) -> tuple[list[AnnotatedSentence], list[AnnotatedSentence]]:
    """Training and held-out sentences: from TSV files when given, otherwise synthetic."""
    c = cfg["corpus"]
    if c["train"] is not None:
        train = read_corpus_file(c["train"])
        if c["heldout"] is not None:
            heldout = read_corpus_file(c["heldout"])
        else:
            perm = np.random.default_rng(cfg["seed"]).permutation(len(train))
            n_held = max(1, len(train) // 10)
            held_idx = set(perm[:n_held].tolist())
            heldout = [s for i, s in enumerate(train) if i in held_idx]
            train = [s for i, s in enumerate(train) if i not in held_idx]
        return train, heldout
    syn = c["synthetic"]
    grammar = C.grammar_config(cfg)
    return (synth_corpus(syn["train_seed"], syn["n_train"], grammar),
            synth_corpus(syn["heldout_seed"], syn["n_heldout"], grammar))


def build_trainer(cfg: dict, train: list[AnnotatedSentence]) -> Trainer:
    masking = C.masking_config(cfg)
    vocab = extend_vocab_for_lmlm(build_vocab(train), masking, train)
    return Trainer(train, C.model_config(cfg, len(vocab)), masking, C.schedule_config(cfg),
                   C.optimizer_config(cfg), vocab=vocab)


def pretrain(cfg: dict, resume_from: str | Path | None = None) -> TrainResult:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(C.dumps(cfg) + "\n", encoding="utf-8")
    train, _ = load_corpora(cfg)
    if resume_from is not None:
        trainer = Trainer.resume(resume_from, train)
    else:
        trainer = build_trainer(cfg, train)
        metrics = out / "metrics.jsonl"
        if metrics.exists():
            metrics.unlink()
    (out / "vocab.txt").write_text(trainer.vocab.to_text(), encoding="utf-8")
    (out / "tagsets.json").write_text(tagsets_json() + "\n", encoding="utf-8")
    records = trainer.run(out_dir=out)
    return TrainResult(trainer.params, trainer.vocab, trainer.model_cfg, records, out / "final.ckpt")


def evaluate_run(cfg: dict, model: Pretrained, result: TrainResult | None = None) -> dict:
    """Masked-position head accuracies plus linear-probe scores for one pretrained model."""
    _, heldout = load_corpora(cfg)
    masking = C.masking_config(cfg)
    p = cfg["probe"]
    row: dict = {"mlm_acc": masked_tag_accuracy(model, heldout, masking, "mlm", p["eval_seed"])}
    for task in TASKS:
        row[f"head_{task}_acc"] = (masked_tag_accuracy(model, heldout, masking, task, p["eval_seed"])
                                   if task in model.model_config.tasks else None)
    probe_corpus = heldout[: p["n_sentences"]]
    names = {"pos": "pos_acc", "ner": "ner_f", "dep": "dep_acc"}
    for task in TASKS:
        if task in p["tasks"]:
            res = probe_finetune(model, probe_corpus, task, frozen=p["frozen"], seed=p["seed"],
                                 dev_fraction=p["dev_fraction"], steps=p["steps"], lr=p["lr"])
            row[names[task]] = res.score
        else:
            row[names[task]] = None
    if result is not None and result.metrics:
        row["final_loss_mlm"] = result.metrics[-1]["loss_mlm"]
    return row


def write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
