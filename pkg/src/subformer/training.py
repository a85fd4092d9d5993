"""Desk-scale training: toy seq2seq tasks, a byte-level LM dataset, Adam
with inverse-square-root warmup, metrics, and greedy decoding.

Special token ids for the toy tasks: PAD=0, BOS=1, EOS=2; payload ids live
in [3, vocab). Batches are padded to the batch maximum, but the training
loop feeds each sequence trimmed to its true length, which is equivalent
to the masked computation and cheaper.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DataError, DivergenceError
from . import tensor as T
from . import model as M
from .tensor import Rng, Tape, Tensor, backward, no_grad

PAD, BOS, EOS = 0, 1, 2

TASK_KINDS = ("copy", "reverse", "sort")


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyTask:
    kind: str
    vocab: int
    min_len: int = 1
    max_len: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.vocab < 4:
            raise ConfigError(f"toy tasks need vocab >= 4 for the special ids, got {self.vocab}")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len")

    def transform(self, payload):
        if self.kind == "copy":
            return list(payload)
        if self.kind == "reverse":
            return list(payload)[::-1]
        return sorted(payload)


@dataclass
class Batch:
    src: np.ndarray        # [B, n_src], PAD-padded
    tgt: np.ndarray        # [B, n_tgt], BOS ... EOS then PAD
    src_real: np.ndarray   # [B, n_src] bool
    tgt_real: np.ndarray   # [B, n_tgt] bool

    @property
    def size(self):
        return self.src.shape[0]

    def sequences(self):
        """Yield (src_ids, tgt_ids) trimmed to their true lengths."""
        for i in range(self.size):
            yield (self.src[i][self.src_real[i]], self.tgt[i][self.tgt_real[i]])


def gen_task_batch(task, rng, batch_size):
    """Deterministic batch of (source, BOS+target+EOS) pairs with pad masks."""
    lengths = rng.integers(task.min_len, task.max_len + 1, batch_size)
    n_src = int(lengths.max())
    n_tgt = n_src + 2
    src = np.zeros((batch_size, n_src), dtype=np.int64)
    tgt = np.zeros((batch_size, n_tgt), dtype=np.int64)
    src_real = np.zeros((batch_size, n_src), dtype=bool)
    tgt_real = np.zeros((batch_size, n_tgt), dtype=bool)
    for i, n in enumerate(lengths):
        n = int(n)
        payload = rng.integers(3, task.vocab, n)
        src[i, :n] = payload
        src_real[i, :n] = True
        tgt[i, 0] = BOS
        tgt[i, 1:n + 1] = task.transform(payload)
        tgt[i, n + 1] = EOS
        tgt_real[i, :n + 2] = True
    return Batch(src, tgt, src_real, tgt_real)


@dataclass
class CharLmData:
    ids: np.ndarray        # full text as token ids
    windows: np.ndarray    # [N, context_len], non-overlapping
    stoi: dict
    itos: list
    context_len: int

    @property
    def vocab(self):
        return len(self.itos)

    def encode(self, text):
        return np.array([self.stoi[b] for b in text.encode("utf-8")], dtype=np.int64)

    def decode(self, ids):
        return bytes(self.itos[i] for i in ids).decode("utf-8", errors="replace")


def char_lm_dataset(path, context_len):
    """Byte-level ids and non-overlapping windows of context_len tokens."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw:
        raise DataError(f"empty dataset file: {path}")
    if context_len < 2:
        raise ConfigError("context_len must be >= 2")
    itos = sorted(set(raw))
    stoi = {b: i for i, b in enumerate(itos)}
    ids = np.array([stoi[b] for b in raw], dtype=np.int64)
    n_win = ids.size // context_len
    windows = ids[:n_win * context_len].reshape(n_win, context_len)
    return CharLmData(ids=ids, windows=windows, stoi=stoi, itos=itos,
                      context_len=context_len)


def unigram_perplexity(ids, counts_from=None):
    """exp(mean NLL) of a frequency-count unigram model over `ids`."""
    ids = np.asarray(ids)
    source = ids if counts_from is None else np.asarray(counts_from)
    counts = np.bincount(source, minlength=int(ids.max()) + 1).astype(np.float64)
    probs = counts / counts.sum()
    if np.any(probs[ids] == 0.0):
        raise DataError("unigram model assigns zero probability to an eval token")
    return float(np.exp(-np.mean(np.log(probs[ids]))))


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

def inverse_sqrt_lr(step, warmup, base):
    """base * min(step^-0.5, step * warmup^-1.5); peaks at step == warmup."""
    if step < 1:
        raise ContractError(f"lr schedule is defined for step >= 1, got {step}")
    return base * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(registry, state, lr):
    """Bias-corrected Adam; each distinct tensor is updated exactly once."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in registry.distinct():
        if p.grad is None:
            raise ContractError(f"adam_step: no gradient for parameter {name!r}")
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p.data)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class Metrics:
    step: int
    train_loss: float
    eval_loss: float
    token_acc: float
    seq_acc: float
    ppl: float
    ms_per_step: float = 0.0

    def csv_line(self, timing=False):
        ms = self.ms_per_step if timing else 0.0
        return (f"{self.step},{self.train_loss:.10g},{self.eval_loss:.10g},"
                f"{self.token_acc:.6f},{self.seq_acc:.6f},{self.ppl:.10g},{ms:.3f}")


METRICS_HEADER = "step,train_loss,eval_loss,token_acc,seq_acc,ppl,ms_per_step"


def metrics_csv(history, timing=False):
    return "\n".join([METRICS_HEADER] + [m.csv_line(timing) for m in history]) + "\n"


# ---------------------------------------------------------------------------
# forward helpers
# ---------------------------------------------------------------------------

def _seq_pairs(model, batch):
    """(logits, targets) per sequence, teacher-forced."""
    pairs = []
    if model.config.arch == "seq2seq":
        for src, tgt in batch.sequences():
            logits = M.forward(src, tgt[:-1], model)
            pairs.append((logits, tgt[1:]))
    else:
        for row in batch:
            logits = M.lm_forward(row[:-1], model)
            pairs.append((logits, row[1:]))
    return pairs


def _batch_loss(model, batch, label_smoothing, dropout=None):
    logit_parts, target_parts = [], []
    if model.config.arch == "seq2seq":
        for src, tgt in batch.sequences():
            logit_parts.append(M.forward(src, tgt[:-1], model, dropout=dropout))
            target_parts.append(tgt[1:])
    else:
        for row in batch:
            logit_parts.append(M.lm_forward(row[:-1], model, dropout=dropout))
            target_parts.append(row[1:])
    logits = logit_parts[0] if len(logit_parts) == 1 else T.concat_rows(logit_parts)
    targets = np.concatenate(target_parts)
    return T.cross_entropy(logits, targets, label_smoothing=label_smoothing)


def evaluate(model, eval_data):
    """Teacher-forced metrics over held-out batches (no label smoothing)."""
    total_nll = 0.0
    n_tok = n_correct = n_seq = n_seq_correct = 0
    with no_grad():
        for batch in eval_data:
            for logits, targets in _seq_pairs(model, batch):
                pred = logits.data.argmax(axis=1)
                hits = pred == targets
                n_correct += int(hits.sum())
                n_tok += targets.size
                n_seq += 1
                n_seq_correct += int(hits.all())
                nll = T.cross_entropy(logits, targets, label_smoothing=0.0)
                total_nll += float(nll.data) * targets.size
    eval_loss = total_nll / n_tok
    return Metrics(step=0, train_loss=eval_loss, eval_loss=eval_loss,
                   token_acc=n_correct / n_tok, seq_acc=n_seq_correct / n_seq,
                   ppl=math.exp(eval_loss))


def greedy_decode(model, src, max_len):
    """Argmax decoding; stops at EOS. Returns payload ids without BOS/EOS."""
    with no_grad():
        if model.config.arch == "seq2seq":
            memory = M.encoder_forward(src, model)
            out = [BOS]
            for _ in range(max_len):
                h = M.decoder_forward(np.array(out), memory, model)
                logits = M.output_logits(h, model)
                nxt = int(logits.data[-1].argmax())
                if nxt == EOS:
                    break
                out.append(nxt)
            return out[1:]
        # decoder-only: continue the prefix (an empty prefix starts at id 0)
        prefix = list(np.asarray(src).tolist()) or [0]
        start = len(prefix)
        for _ in range(max_len):
            logits = M.lm_forward(np.array(prefix), model)
            prefix.append(int(logits.data[-1].argmax()))
        return prefix[start:start + max_len]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 16
    base_lr: float = 0.05
    warmup: int = 100
    label_smoothing: float = 0.1
    seed: int = 0
    eval_interval: int = 50
    eval_batches: int = 4
    target_acc: float | None = None   # stop early once eval token_acc reaches this
    timing: bool = False

    def validate(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.warmup < 1:
            raise ConfigError("warmup must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must be in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        return self


@dataclass
class TrainResult:
    history: list
    steps_to: dict          # accuracy threshold -> first step reaching it
    final: Metrics
    stopped_at: int

    def csv(self, timing=False):
        return metrics_csv(self.history, timing)


_EVAL_STREAM = 10 ** 9     # keeps eval batches off the training data stream
_ACC_THRESHOLDS = (0.5, 0.9, 0.99)


def _make_eval_data(data, cfg):
    if isinstance(data, ToyTask):
        return [gen_task_batch(data, Rng.for_stream(cfg.seed, _EVAL_STREAM, i),
                               cfg.batch_size)
                for i in range(cfg.eval_batches)]
    # byte LM: hold out the last tenth of the windows
    n_eval = max(1, data.windows.shape[0] // 10)
    return [data.windows[-n_eval:]]


def _train_batch(data, cfg, step):
    if isinstance(data, ToyTask):
        return gen_task_batch(data, Rng.for_stream(cfg.seed, step), cfg.batch_size)
    n_train = data.windows.shape[0] - max(1, data.windows.shape[0] // 10)
    rng = Rng.for_stream(cfg.seed, step)
    idx = rng.integers(0, n_train, cfg.batch_size)
    return data.windows[np.asarray(idx)]


def train_loop(model, data, cfg):
    """Deterministic training run; evaluates every eval_interval steps.

    Raises DivergenceError on a non-finite loss. Returns the metric history
    plus steps-to-threshold bookkeeping for convergence reporting.
    """
    cfg.validate()
    from .nn import make_dropout

    registry = model.registry
    state = AdamState()
    drop_rng = Rng.for_stream(cfg.seed, 2 ** 62)
    p_drop = model.config.dropout

    history = []
    steps_to = {}
    eval_data = _make_eval_data(data, cfg)
    first = evaluate(model, eval_data)
    first.step = 0
    history.append(first)
    _note_thresholds(steps_to, first)

    last_gnorm = 0.0
    ms_acc, ms_n = 0.0, 0
    stopped_at = 0
    for step in range(1, cfg.steps + 1):
        t0 = time.perf_counter()
        batch = _train_batch(data, cfg, step)
        dropout = make_dropout(p_drop, drop_rng) if p_drop > 0 else None
        with Tape():
            loss = _batch_loss(model, batch, cfg.label_smoothing, dropout)
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                raise DivergenceError(step, inverse_sqrt_lr(step, cfg.warmup, cfg.base_lr),
                                      last_gnorm)
            registry.zero_grads()
            backward(loss)
        last_gnorm = math.sqrt(sum(float((t.grad ** 2).sum())
                                   for _, t in registry.distinct() if t.grad is not None))
        lr = inverse_sqrt_lr(step, cfg.warmup, cfg.base_lr)
        adam_step(registry, state, lr)
        ms_acc += (time.perf_counter() - t0) * 1e3
        ms_n += 1
        stopped_at = step

        if step % cfg.eval_interval == 0 or step == cfg.steps:
            m = evaluate(model, eval_data)
            m.step = step
            m.train_loss = loss_val
            m.ms_per_step = ms_acc / ms_n
            ms_acc, ms_n = 0.0, 0
            history.append(m)
            _note_thresholds(steps_to, m)
            if cfg.target_acc is not None and m.token_acc >= cfg.target_acc:
                break

    return TrainResult(history=history, steps_to=steps_to,
                       final=history[-1], stopped_at=stopped_at)


def _note_thresholds(steps_to, m):
    for thr in _ACC_THRESHOLDS:
        if m.token_acc >= thr and thr not in steps_to:
            steps_to[thr] = m.step
