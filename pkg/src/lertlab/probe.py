"""Evaluation and ablation harness.

Three measurements: head accuracy at masked positions, linear probes over
(optionally frozen) encoder states, and the built-in study matrices
(feature ablation, task order, linguistic masking).
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import model as M
from .corpus import AnnotatedSentence, encode_sentence
from .masking import MaskingConfig, mask_sentence, sentence_rng
from .tags import TAGSETS, TASKS, bieos_spans
from .trainer import AdamState, OptimizerConfig, Pretrained, adamw_step

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def masked_predictions(model: Pretrained, corpus: Sequence[AnnotatedSentence], masking_cfg: MaskingConfig,
                       task: str, seed: int = 0, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """(predicted ids, gold ids) over every masked position of ``corpus``."""
    cfg = model.model_config
    if task != "mlm" and task not in cfg.tasks:
        raise M.ModelConfigError(f"checkpoint has no {task} head")
    encs = [encode_sentence(s, model.vocab, cfg.max_len) for s in corpus]
    preds, gold = [], []
    for start in range(0, len(encs), batch_size):
        exs = [mask_sentence(e, sentence_rng(seed, 0, start + j), masking_cfg, model.vocab)
               for j, e in enumerate(encs[start:start + batch_size])]
        batch = M.collate(exs, model.vocab.pad_id)
        out = M.forward(model.params, batch, cfg)
        preds.append(out.probs[task].argmax(1))
        gold.append(batch.targets[task])
    return np.concatenate(preds), np.concatenate(gold)


def masked_tag_accuracy(model: Pretrained, corpus: Sequence[AnnotatedSentence], masking_cfg: MaskingConfig,
                        task: str, seed: int = 0) -> float:
    """Fraction of masked positions where the ``task`` head's argmax equals the gold label.

    ``task`` may also be ``"mlm"`` for masked-token accuracy.
    """
    pred, gold = masked_predictions(model, corpus, masking_cfg, task, seed)
    if len(gold) == 0:
        raise DataError("no masked positions in the evaluation corpus")
    return float((pred == gold).mean())


def majority_baseline(corpus: Sequence[AnnotatedSentence], task: str) -> float:
    """Accuracy of always predicting the corpus's most frequent ``task`` label (word level)."""
    labels = [getattr(w, task) for s in corpus for w in s.words]
    if not labels:
        raise DataError("empty corpus")
    return Counter(labels).most_common(1)[0][1] / len(labels)


# --- linear probes ----------------------------------------------------------

@dataclass
class ProbeResult:
    task: str
    metric: str
    score: float
    train_score: float
    frozen: bool


def split_corpus(corpus: Sequence[AnnotatedSentence], dev_fraction: float, seed: int):
    perm = np.random.default_rng(np.random.SeedSequence([seed, 0x5B11])).permutation(len(corpus))
    n_dev = int(round(len(corpus) * dev_fraction))
    dev = [corpus[i] for i in sorted(perm[:n_dev])]
    train = [corpus[i] for i in sorted(perm[n_dev:])]
    if not train or not dev:
        raise DataError(f"probe split of {len(corpus)} sentences leaves an empty train or dev part")
    return train, dev


def _probe_batch(model: Pretrained, sentences: Sequence[AnnotatedSentence], task: str):
    """Unmasked batch plus flat indices of each word's first subtoken and the word-level gold ids."""
    cfg = model.model_config
    encs = [encode_sentence(s, model.vocab, cfg.max_len) for s in sentences]
    B, T = len(encs), max(len(e) for e in encs)
    ids = np.full((B, T), model.vocab.pad_id, dtype=np.int64)
    att = np.zeros((B, T), dtype=bool)
    all_pos, all_tgt, first_pos, word_gold = [], [], [], []
    for b, e in enumerate(encs):
        ids[b, :len(e)] = e.token_ids
        att[b, :len(e)] = True
        tags = e.tag_ids(task)
        for s, t in e.word_spans:
            all_pos.extend(b * T + np.arange(s, t))
            all_tgt.extend(tags[s:t])
            first_pos.append(b * T + s)
            word_gold.append(int(tags[s]))
    batch = M.Batch(ids, np.zeros_like(ids), att, np.asarray(all_pos, dtype=np.int64),
                    {"probe": np.asarray(all_tgt, dtype=np.int64)})
    words_per_sentence = [e.n_words for e in encs]
    return batch, np.asarray(first_pos), np.asarray(word_gold), words_per_sentence


def _score(task: str, pred_words: np.ndarray, gold_words: np.ndarray, words_per_sentence) -> tuple[str, float]:
    if task != "ner":
        return "accuracy", float((pred_words == gold_words).mean())
    labels = TAGSETS["ner"].labels
    tp = n_pred = n_gold = 0
    start = 0
    for n in words_per_sentence:
        p = set(bieos_spans([labels[i] for i in pred_words[start:start + n]]))
        g = set(bieos_spans([labels[i] for i in gold_words[start:start + n]]))
        tp += len(p & g)
        n_pred += len(p)
        n_gold += len(g)
        start += n
    if n_pred == 0 and n_gold == 0:
        return "span_f1", 1.0
    prec = tp / n_pred if n_pred else 0.0
    rec = tp / n_gold if n_gold else 0.0
    return "span_f1", (2 * prec * rec / (prec + rec) if prec + rec else 0.0)


def probe_finetune(model: Pretrained, corpus: Sequence[AnnotatedSentence], task: str, frozen: bool = True,
                   seed: int = 0, dev_fraction: float = 0.25, steps: int = 300, lr: float = 0.02,
                   batch_size: int = 32) -> ProbeResult:
    """Fit a fresh linear tag classifier on encoder states and score it on a held-out split.

    Every subtoken position trains the classifier; scoring reads each word's
    first subtoken. NER is scored by BIEOS span F1, POS/DEP by accuracy. With
    ``frozen=False`` the encoder is fine-tuned along with the classifier.
    """
    if task not in TASKS:
        raise ValueError(f"unknown probe task {task!r}")
    train, dev = split_corpus(corpus, dev_fraction, seed)
    cfg = model.model_config
    n_labels = len(TAGSETS[task])
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E4D]))
    dtype = next(iter(model.params.values())).dtype
    head = {"probe.weight": (rng.standard_normal((n_labels, cfg.hidden)) * 0.02).astype(dtype),
            "probe.bias": np.zeros(n_labels, dtype=dtype)}
    enc_params = model.params if frozen else {k: v.copy() for k, v in model.params.items()}
    opt = OptimizerConfig(peak_lr=lr, weight_decay=0.0, warmup_steps=0, total_steps=steps + 1,
                          batch_size=max(1, batch_size))
    head_state = AdamState.zeros_like(head)
    enc_state = None if frozen else AdamState.zeros_like(enc_params)
    enc_opt = None if frozen else OptimizerConfig(peak_lr=lr * 0.05, weight_decay=0.0, warmup_steps=0,
                                                   total_steps=steps + 1, batch_size=max(1, batch_size))

    if frozen:
        batch, *_ = _probe_batch(model, train, task)
        H, _ = M.encoder_forward(enc_params, batch, cfg)
        feats = H.reshape(-1, cfg.hidden)[batch.masked_index]
        targets = batch.targets["probe"]
        for _ in range(steps):
            logits = feats @ head["probe.weight"].T + head["probe.bias"]
            g = M.softmax(logits)
            g[np.arange(len(targets)), targets] -= 1.0
            g /= len(targets)
            grads = {"probe.weight": g.T @ feats, "probe.bias": g.sum(0)}
            adamw_step(head, grads, head_state, opt, lr)
    else:
        order = np.arange(len(train))
        for step in range(steps):
            if step % max(1, len(train) // batch_size) == 0:
                order = rng.permutation(len(train))
            j = step % max(1, len(train) // batch_size)
            part = [train[i] for i in order[j * batch_size:(j + 1) * batch_size]] or train
            batch, *_ = _probe_batch(model, part, task)
            H, cache = M.encoder_forward(enc_params, batch, cfg)
            feats = H.reshape(-1, cfg.hidden)[batch.masked_index]
            targets = batch.targets["probe"]
            logits = feats @ head["probe.weight"].T + head["probe.bias"]
            g = M.softmax(logits)
            g[np.arange(len(targets)), targets] -= 1.0
            g /= len(targets)
            grads = {"probe.weight": g.T @ feats, "probe.bias": g.sum(0)}
            dfeat = g @ head["probe.weight"]
            B, T = batch.input_ids.shape
            dH = np.zeros((B * T, cfg.hidden), dtype=dfeat.dtype)
            dH[batch.masked_index] = dfeat
            enc_grads = {k: np.zeros_like(v) for k, v in enc_params.items()}
            M.encoder_backward(enc_params, cache, dH.reshape(B, T, -1), cfg, enc_grads)
            adamw_step(head, grads, head_state, opt, lr)
            adamw_step(enc_params, enc_grads, enc_state, enc_opt, enc_opt.peak_lr)

    def evaluate(sentences):
        scores_pred, scores_gold, wps = [], [], []
        for part in _chunks(list(sentences), 128):
            batch, first, gold, w = _probe_batch(model, part, task)
            H, _ = M.encoder_forward(enc_params, batch, cfg)
            logits = H.reshape(-1, cfg.hidden)[first] @ head["probe.weight"].T + head["probe.bias"]
            scores_pred.append(logits.argmax(1))
            scores_gold.append(gold)
            wps.extend(w)
        return _score(task, np.concatenate(scores_pred), np.concatenate(scores_gold), wps)

    metric, dev_score = evaluate(dev)
    _, train_score = evaluate(train)
    return ProbeResult(task, metric, dev_score, train_score, frozen)


# --- ablation matrices ------------------------------------------------------

@dataclass
class AblationRun:
    name: str
    overrides: dict[str, Any] = field(default_factory=dict)  # dotted path -> value


@dataclass
class AblationMatrix:
    name: str
    base: dict
    runs: list[AblationRun]

    def __post_init__(self):
        names = [r.name for r in self.runs]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate run names in matrix {self.name}")


def _tasks(*tasks):
    return {"model.tasks": list(tasks), "schedule.tasks": list(tasks)}


def feature_matrix(base: dict) -> AblationMatrix:
    """MLM baseline, each feature alone, all features with equal weights, and the full ramp schedule."""
    none = {"schedule.preset": "none"}
    return AblationMatrix("features", base, [
        AblationRun("Baseline", {**_tasks(), **none}),
        AblationRun("+POS", {**_tasks("pos"), **none}),
        AblationRun("+NER", {**_tasks("ner"), **none}),
        AblationRun("+DEP", {**_tasks("dep"), **none}),
        AblationRun("+All", {**_tasks(*TASKS), **none}),
        AblationRun("LERT", {**_tasks(*TASKS), "schedule.preset": "PND"}),
    ])


def order_matrix(base: dict) -> AblationMatrix:
    return AblationMatrix("order", base, [
        AblationRun(p if p != "none" else "no-warmup", {**_tasks(*TASKS), "schedule.preset": p})
        for p in ("PND", "PDN", "NPD", "DNP", "none")
    ])


def lmlm_matrix(base: dict) -> AblationMatrix:
    """Plain MLM against each linguistic mask-token mode, without tag heads."""
    runs = [AblationRun("MLM", {**_tasks(), "schedule.preset": "none", "masking.lmlm_mode": "off"})]
    for mode, label in (("pos", "POS"), ("ner", "NER"), ("dep", "DEP"), ("all", "All"), ("mix", "Mix")):
        runs.append(AblationRun(f"+{label}-mask", {**_tasks(), "schedule.preset": "none",
                                                   "masking.lmlm_mode": mode}))
    return AblationMatrix("lmlm", base, runs)


MATRICES = {"features": feature_matrix, "order": order_matrix, "lmlm": lmlm_matrix}


def builtin_matrix(name: str, base: dict) -> AblationMatrix:
    try:
        return MATRICES[name](base)
    except KeyError:
        raise ValueError(f"unknown matrix {name!r}; choose from {sorted(MATRICES)}") from None


REPORT_COLUMNS = ("run", "status", "steps", "preset", "lmlm_mode", "heads", "mlm_acc",
                  "head_pos_acc", "head_ner_acc", "head_dep_acc", "pos_acc", "ner_f", "dep_acc",
                  "final_loss_mlm", "config_hash", "seed", "error")


def config_hash(cfg: dict) -> str:
    blob = json.dumps({k: v for k, v in cfg.items() if k != "output_dir"}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _run_one(args) -> dict:
    from . import config as C
    from .pipeline import evaluate_run, pretrain

    name, cfg = args
    row = {"run": name, "status": "failed", "steps": cfg["optimizer"]["total_steps"],
           "preset": cfg["schedule"]["preset"], "lmlm_mode": cfg["masking"]["lmlm_mode"],
           "heads": "+".join(cfg["model"]["tasks"]) or "-", "config_hash": config_hash(cfg),
           "seed": cfg["seed"], "error": ""}
    try:
        C.validate(cfg)
        result = pretrain(cfg)
        row.update(evaluate_run(cfg, Pretrained.from_result(result), result))
        row["status"] = "ok"
    except Exception as exc:  # one bad run must not abort the matrix
        log.exception("run %s failed", name)
        row["error"] = f"{type(exc).__name__}: {exc}"
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "result.json").write_text(json.dumps(row, indent=2, sort_keys=True), encoding="utf-8")
    return row


def run_ablation(matrix: AblationMatrix, out_dir: str | Path, jobs: int = 1) -> list[dict]:
    """Pretrain and evaluate each run under ``out_dir/<run>``; one report row per run, in matrix order."""
    from . import config as C

    out_dir = Path(out_dir)
    work = []
    for run in matrix.runs:
        overrides = {**run.overrides, "output_dir": str(out_dir / _safe(run.name))}
        try:
            cfg = C.resolve(copy.deepcopy(matrix.base), overrides)
        except Exception as exc:
            cfg = copy.deepcopy(matrix.base)
            cfg.update(output_dir=str(out_dir / _safe(run.name)))
            work.append((run.name, {**cfg, "_invalid": str(exc)}))
            continue
        work.append((run.name, cfg))
    runnable = [w for w in work if "_invalid" not in w[1]]
    if jobs > 1 and len(runnable) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            done = dict(zip([w[0] for w in runnable], pool.map(_run_one, runnable)))
    else:
        done = {w[0]: _run_one(w) for w in runnable}
    rows = []
    for name, cfg in work:
        if name in done:
            rows.append(done[name])
        else:
            rows.append({"run": name, "status": "failed", "error": f"ConfigError: {cfg['_invalid']}"})
    write_report(rows, out_dir)
    return rows


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in name).strip("_") or "run"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def report_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: row.get(k, "") if row.get(k) is not None else "" for k in REPORT_COLUMNS})
    return buf.getvalue()


def report_markdown(rows: Sequence[dict]) -> str:
    lines = ["| " + " | ".join(REPORT_COLUMNS) + " |", "|" + "---|" * len(REPORT_COLUMNS)]
    for row in rows:
        lines.append("| " + " | ".join(_fmt(row.get(k)) for k in REPORT_COLUMNS) + " |")
    return "\n".join(lines) + "\n"


def write_report(rows: Sequence[dict], out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.csv").write_text(report_csv(rows), encoding="utf-8")
    (out_dir / "report.md").write_text(report_markdown(rows), encoding="utf-8")


def merge_reports(run_dirs: Sequence[str | Path]) -> list[dict]:
    """Collect ``result.json`` rows from run directories (or matrix directories holding them)."""
    rows = []
    for d in run_dirs:
        d = Path(d)
        if (d / "result.json").is_file():
            rows.append(json.loads((d / "result.json").read_text(encoding="utf-8")))
        else:
            found = sorted(d.glob("*/result.json"))
            if not found:
                raise DataError(f"{d} holds no result.json")
            rows.extend(json.loads(p.read_text(encoding="utf-8")) for p in found)
    return rows
