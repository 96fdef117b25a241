"""AdamW pre-training loop with warmup, gradient accumulation, checkpoints and JSONL metrics."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import model as M
from .checkpoint import CheckpointShapeError, load_checkpoint, save_checkpoint
from .corpus import AnnotatedSentence, EncodedSentence, Vocab, build_vocab, encode_sentence
from .masking import MaskingConfig, extend_vocab_for_lmlm, mask_sentence, sentence_rng
from .schedule import ScheduleConfig, combine_losses, state_at
from .tags import TASKS

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


class OptimizerConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    peak_lr: float = 1e-4
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    warmup_steps: int = 100
    total_steps: int = 2000
    accumulation_factor: int = 1
    batch_size: int = 32
    checkpoint_every: int = 0  # 0: only the final checkpoint
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise OptimizerConfigError("need 0 <= warmup_steps < total_steps")
        if self.accumulation_factor < 1:
            raise OptimizerConfigError("accumulation_factor must be >= 1")
        if self.batch_size < self.accumulation_factor:
            raise OptimizerConfigError("batch_size must be at least accumulation_factor")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(t: int, cfg: OptimizerConfig) -> float:
    """Linear warmup to ``peak_lr``, then linear decay to 0 at ``total_steps``."""
    if t < cfg.warmup_steps:
        return cfg.peak_lr * t / cfg.warmup_steps
    return cfg.peak_lr * max(cfg.total_steps - t, 0) / (cfg.total_steps - cfg.warmup_steps)


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: M.ParamStore) -> "AdamState":
        return cls(0, {k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(params: M.ParamStore, grads: M.ParamStore, state: AdamState, cfg: OptimizerConfig,
               lr: float | None = None) -> tuple[M.ParamStore, AdamState]:
    """One in-place AdamW update with decoupled weight decay.

    Biases and LayerNorm gains/offsets are never decayed. ``lr`` defaults to
    the schedule value at ``state.step``.
    """
    if lr is None:
        lr = lr_at(state.step, cfg)
    b1, b2 = cfg.beta1, cfg.beta2
    n = state.step + 1
    c1 = 1.0 - b1 ** n
    c2 = 1.0 - b2 ** n
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if not np.isfinite(update).all():
            raise M.NumericError(f"non-finite AdamW update for {name}")
        if cfg.weight_decay and not M.is_decay_exempt(name):
            p *= p.dtype.type(1.0 - lr * cfg.weight_decay)
        p -= p.dtype.type(lr) * update.astype(p.dtype, copy=False)
    state.step = n
    return params, state


def bucketed_epoch(n: int, batch_size: int, seed: int, epoch: int, bucket_factor: int = 8,
                   lengths: Sequence[int] | None = None) -> list[list[int]]:
    """Batches of sentence indices for one epoch; pools of ``bucket_factor`` batches are length-sorted."""
    if n <= batch_size:
        order = list(range(n))
        if lengths is not None:
            order.sort(key=lambda i: (lengths[i], i))
        return [order]
    rng = np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), 0xBA7C, epoch]))
    perm = rng.permutation(n)
    n_batches = n // batch_size
    perm = perm[: n_batches * batch_size]
    batches = []
    pool = batch_size * bucket_factor
    for start in range(0, len(perm), pool):
        chunk = [int(i) for i in perm[start:start + pool]]
        if lengths is not None:
            chunk.sort(key=lambda i: (lengths[i], i))
        batches.extend(chunk[j:j + batch_size] for j in range(0, len(chunk), batch_size))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


@dataclass
class TrainResult:
    params: M.ParamStore
    vocab: Vocab
    model_config: M.ModelConfig
    metrics: list[dict]
    checkpoint: Path | None = None


class Trainer:
    """Owns parameters and optimizer state for one pre-training run.

    Batches and masks are pure functions of ``(seed, step)``, so a run resumed
    from a checkpoint follows the uninterrupted trajectory.
    """

    def __init__(self, corpus: Sequence[AnnotatedSentence], model_cfg: M.ModelConfig,
                 masking_cfg: MaskingConfig, schedule_cfg: ScheduleConfig, opt_cfg: OptimizerConfig,
                 vocab: Vocab | None = None, dtype=np.float32, params: M.ParamStore | None = None):
        if not corpus:
            raise ValueError("empty training corpus")
        if schedule_cfg.total_steps != opt_cfg.total_steps:
            raise OptimizerConfigError(
                f"schedule total_steps={schedule_cfg.total_steps} != optimizer total_steps={opt_cfg.total_steps}")
        if vocab is None:
            vocab = extend_vocab_for_lmlm(build_vocab(corpus), masking_cfg, corpus)
        if model_cfg.vocab == 0:
            model_cfg = M.ModelConfig.from_dict({**model_cfg.to_dict(), "vocab": len(vocab)})
        if model_cfg.vocab != len(vocab):
            raise M.ModelConfigError(f"model vocab {model_cfg.vocab} != vocabulary size {len(vocab)}")
        for task in schedule_cfg.tasks:
            if task not in model_cfg.tasks:
                raise M.ModelConfigError(f"schedule trains {task} but the model has no {task} head")
        self.corpus = corpus
        self.vocab = vocab
        self.model_cfg = model_cfg
        self.masking_cfg = masking_cfg
        self.schedule_cfg = schedule_cfg
        self.opt_cfg = opt_cfg
        self.encoded: list[EncodedSentence] = [encode_sentence(s, vocab, model_cfg.max_len) for s in corpus]
        self._lengths = [len(e) for e in self.encoded]
        self.params = params if params is not None else M.init_params(model_cfg, opt_cfg.seed, dtype)
        self.adam = AdamState.zeros_like(self.params)
        self._epochs: dict[int, list[list[int]]] = {}

    @property
    def step_index(self) -> int:
        return self.adam.step

    def batch_indices(self, t: int) -> list[int]:
        n, bs = len(self.encoded), self.opt_cfg.batch_size
        per_epoch = max(1, n // bs)
        epoch, j = divmod(t, per_epoch)
        if epoch not in self._epochs:
            self._epochs = {epoch: bucketed_epoch(n, bs, self.opt_cfg.seed, epoch, lengths=self._lengths)}
        return self._epochs[epoch][j]

    def masked_batch(self, t: int, indices: Sequence[int]):
        return [mask_sentence(self.encoded[i], sentence_rng(self.opt_cfg.seed, t, i), self.masking_cfg, self.vocab)
                for i in indices]

    def step(self) -> dict:
        t = self.adam.step
        t0 = time.perf_counter()
        sched = state_at(self.schedule_cfg, t)
        indices = self.batch_indices(t)
        k = self.opt_cfg.accumulation_factor
        micro = [indices[len(indices) * i // k: len(indices) * (i + 1) // k] for i in range(k)]
        micro_examples = [self.masked_batch(t, part) for part in micro if part]
        total_masked = sum(ex.k for part in micro_examples for ex in part)
        grads = {name: np.zeros_like(p) for name, p in self.params.items()}
        sums = {key: 0.0 for key in ("mlm",) + TASKS}
        for part in micro_examples:
            out = M.forward(self.params, M.collate(part, self.vocab.pad_id), self.model_cfg)
            M.backward(self.params, out, sched.lambdas, self.model_cfg, denom=total_masked, grads=grads)
            for key, s in out.nll_sums.items():
                sums[key] += s
        lr = lr_at(t, self.opt_cfg)
        adamw_step(self.params, grads, self.adam, self.opt_cfg, lr)
        mean = {key: (s / total_masked if total_masked else 0.0) for key, s in sums.items()}
        task_losses = {task: mean[task] for task in TASKS}
        return {
            "step": t,
            "lr": lr,
            "lambda_P": sched.lambda_pos,
            "lambda_N": sched.lambda_ner,
            "lambda_D": sched.lambda_dep,
            "loss_mlm": mean["mlm"],
            "loss_pos": mean["pos"],
            "loss_ner": mean["ner"],
            "loss_dep": mean["dep"],
            "loss_total": combine_losses(mean["mlm"], task_losses, sched),
            "masked_count": total_masked,
            "wallclock_ms": (time.perf_counter() - t0) * 1000.0,
        }

    # --- persistence ---

    def checkpoint_extra(self) -> dict:
        return {
            "step": self.adam.step,
            "vocab": self.vocab.tokens,
            "vocab_extra_start": self.vocab.extra_start,
            "masking_config": self.masking_cfg.to_dict(),
            "schedule_config": {"total_steps": self.schedule_cfg.total_steps, "preset": self.schedule_cfg.preset,
                                "tasks": list(self.schedule_cfg.tasks),
                                "end_fractions": self.schedule_cfg.end_fractions},
            "optimizer_config": self.opt_cfg.to_dict(),
        }

    def save(self, path: str | Path) -> Path:
        tensors = dict(self.params)
        tensors.update({f"adam.m.{k}": v for k, v in self.adam.m.items()})
        tensors.update({f"adam.v.{k}": v for k, v in self.adam.v.items()})
        return save_checkpoint(path, self.model_cfg.to_dict(), tensors, self.checkpoint_extra())

    @classmethod
    def resume(cls, path: str | Path, corpus: Sequence[AnnotatedSentence]) -> "Trainer":
        ck = load_checkpoint(path)
        cfg = M.ModelConfig.from_dict(ck.model_config)
        shapes = M.param_shapes(cfg)
        extra = ck.extra
        vocab = Vocab.from_text("".join(t + "\n" for t in extra["vocab"]), extra["vocab_extra_start"])
        sc = extra["schedule_config"]
        tr = cls(corpus, cfg, MaskingConfig(**extra["masking_config"]),
                 ScheduleConfig(sc["total_steps"], sc["preset"], tuple(sc["tasks"]), sc.get("end_fractions")),
                 OptimizerConfig(**extra["optimizer_config"]), vocab=vocab,
                 params={name: ck.tensors[name].copy() for name in shapes})
        tr.adam = AdamState(extra["step"], {n: ck.tensors[f"adam.m.{n}"].copy() for n in shapes},
                            {n: ck.tensors[f"adam.v.{n}"].copy() for n in shapes})
        return tr

    def run(self, until: int | None = None, out_dir: str | Path | None = None,
            on_record: Callable[[dict], None] | None = None) -> list[dict]:
        """Train to step ``until`` (default total_steps), writing metrics and checkpoints under ``out_dir``."""
        until = self.opt_cfg.total_steps if until is None else until
        out = Path(out_dir) if out_dir is not None else None
        metrics_fh = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            metrics_fh = open(out / "metrics.jsonl", "a", encoding="utf-8")
        records = []
        every = self.opt_cfg.checkpoint_every
        try:
            while self.adam.step < until:
                t = self.adam.step
                try:
                    rec = self.step()
                except Exception as exc:
                    if out is not None:
                        try:
                            self.save(out / f"failed-step{t}.ckpt")
                        except Exception:
                            log.exception("could not write failure checkpoint")
                    raise TrainingError(t, f"{type(exc).__name__}: {exc}") from exc
                records.append(rec)
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(rec) + "\n")
                if on_record is not None:
                    on_record(rec)
                if out is not None and every and self.adam.step % every == 0 and self.adam.step < until:
                    self.save(out / f"step{self.adam.step}.ckpt")
            if out is not None:
                self.save(out / "final.ckpt")
        finally:
            if metrics_fh is not None:
                metrics_fh.close()
        return records


def train(corpus: Sequence[AnnotatedSentence], model_cfg: M.ModelConfig, masking_cfg: MaskingConfig,
          schedule_cfg: ScheduleConfig, opt_cfg: OptimizerConfig, out_dir: str | Path | None = None,
          vocab: Vocab | None = None, on_record: Callable[[dict], None] | None = None) -> TrainResult:
    tr = Trainer(corpus, model_cfg, masking_cfg, schedule_cfg, opt_cfg, vocab=vocab)
    records = tr.run(out_dir=out_dir, on_record=on_record)
    ckpt = Path(out_dir) / "final.ckpt" if out_dir is not None else None
    return TrainResult(tr.params, tr.vocab, tr.model_cfg, records, ckpt)


@dataclass
class Pretrained:
    """A trained encoder loaded back from a checkpoint, ready for evaluation."""

    model_config: M.ModelConfig
    params: M.ParamStore
    vocab: Vocab
    extra: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path) -> "Pretrained":
        ck = load_checkpoint(path)
        cfg = M.ModelConfig.from_dict(ck.model_config)
        shapes = M.param_shapes(cfg)
        for name, shape in shapes.items():
            if name not in ck.tensors:
                raise CheckpointShapeError(f"tensor {name} missing from checkpoint")
            if ck.tensors[name].shape != shape:
                raise CheckpointShapeError(f"tensor {name} has shape {ck.tensors[name].shape}, expected {shape}")
        vocab = Vocab.from_text("".join(t + "\n" for t in ck.extra["vocab"]), ck.extra["vocab_extra_start"])
        return cls(cfg, {n: ck.tensors[n] for n in shapes}, vocab, ck.extra)

    @classmethod
    def from_result(cls, res: TrainResult) -> "Pretrained":
        return cls(res.model_config, res.params, res.vocab)
