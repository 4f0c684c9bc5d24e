"""Adam, metrics, the epoch loop with early stopping, and cross-validation."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .data import DatasetSplit, StudentSequence, Vocab
from .model import KTModel, ModelConfig, bce_loss, make_batch, save_checkpoint
from .relevance import RouteIndex, RouteTable, build_relevance_matrix
from .tensor import Tensor

log = logging.getLogger(__name__)


class UndefinedMetric(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    dim: int = 64
    heads: int = 4
    blocks: int = 2
    seed: int = 0
    use_mask: bool = True
    threads: int = 1
    max_len: int = 200
    min_interactions: int = 3
    bucket_by_length: bool = True

    def validate(self) -> None:
        for name in ("lr", "batch_size", "max_epochs", "dim", "heads", "blocks", "threads",
                     "max_len", "min_interactions"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.patience < 0 or self.patience >= self.max_epochs:
            raise ValueError(f"patience must lie in [0, max_epochs), got {self.patience}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")


# ---------------------------------------------------------------- optimiser


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        """Apply one bias-corrected update from each parameter's ``.grad``."""
        for k, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingDiverged(f"non-finite gradient in {k}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t}

    def moments(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {k: (self.m[k], self.v[k]) for k in self.params}


# ---------------------------------------------------------------- metrics


def compute_auc(scores, labels) -> float:
    """P(random positive outranks random negative), ties counting one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC needs both positive and negative labels")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.size == 0:
        raise UndefinedMetric("accuracy of an empty set")
    return float(np.mean((s >= threshold) == y))


@dataclass
class MetricReport:
    auc: float | None
    accuracy: float
    count: int
    folds: list[dict] = field(default_factory=list)
    auc_mean: float | None = None
    auc_std: float | None = None
    accuracy_mean: float | None = None
    accuracy_std: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def relevance_for(sequences: Sequence[StudentSequence], route_table: RouteTable | RouteIndex) -> list[np.ndarray]:
    """Per-sequence relevance blocks over the real prefix; depends only on data."""
    index = route_table if isinstance(route_table, RouteIndex) else RouteIndex(route_table)
    out = []
    for s in sequences:
        n = int(s.valid_mask.sum())
        out.append(build_relevance_matrix(s.questions[:n], index).entries)
    return out


def predict_all(model: KTModel, sequences: Sequence[StudentSequence], relevance: Sequence[np.ndarray],
                batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Concatenated (probabilities, labels) over every valid position, in input order."""
    probs, labels = [], []
    for start in range(0, len(sequences), batch_size):
        seqs = sequences[start:start + batch_size]
        batch = make_batch(seqs, relevance[start:start + batch_size])
        p = model.predict(batch)
        probs.append(p[batch.valid])
        labels.append(batch.responses[batch.valid])
    if not probs:
        return np.zeros(0), np.zeros(0, dtype=int)
    return np.concatenate(probs), np.concatenate(labels)


def evaluate(model: KTModel, sequences: Sequence[StudentSequence], relevance: Sequence[np.ndarray] | None = None,
             route_table: RouteTable | None = None, batch_size: int = 64) -> MetricReport:
    if not sequences:
        raise ValueError("cannot evaluate an empty sequence set")
    if relevance is None:
        if route_table is None:
            raise ValueError("evaluate needs relevance matrices or a route table")
        relevance = relevance_for(sequences, route_table)
    p, y = predict_all(model, sequences, relevance, batch_size)
    if p.size == 0:
        raise ValueError("evaluation set has no valid positions")
    try:
        auc = compute_auc(p, y)
    except UndefinedMetric:
        log.warning("AUC undefined: evaluation labels contain a single class")
        auc = None
    return MetricReport(auc, accuracy(p, y), int(p.size))


# ---------------------------------------------------------------- training


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_auc: float | None
    val_accuracy: float
    improved: bool
    seconds: float


@dataclass
class FoldResult:
    model: KTModel
    best_epoch: int
    best_val_auc: float | None
    history: list[EpochLog]
    test: MetricReport | None
    diverged: bool = False


def _batches(idx: Sequence[int], lengths: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> list[list[int]]:
    order = [idx[i] for i in rng.permutation(len(idx))]
    if cfg.bucket_by_length:
        # Similar lengths share a batch, which cuts padding; batch order stays random.
        order = sorted(order, key=lambda i: lengths[i])
        chunks = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
        return [chunks[i] for i in rng.permutation(len(chunks))]
    return [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]


def build_model(cfg: TrainConfig, vocab: Vocab) -> KTModel:
    mc = ModelConfig(vocab.num_questions, vocab.num_concepts, cfg.dim, cfg.heads, cfg.blocks, cfg.use_mask)
    model = KTModel(mc, seed=cfg.seed)
    log.info("model parameters: %d", model.params.count())
    return model


def train_fold(cfg: TrainConfig, sequences: Sequence[StudentSequence], relevance: Sequence[np.ndarray],
               train_idx: Sequence[int], val_idx: Sequence[int], vocab: Vocab,
               test_idx: Sequence[int] | None = None, run_dir: str | Path | None = None,
               on_epoch: Callable[[EpochLog], None] | None = None) -> FoldResult:
    cfg.validate()
    model = build_model(cfg, vocab)
    params = model.named_parameters()
    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 7919)
    lengths = np.array([int(s.valid_mask.sum()) for s in sequences])
    val_seqs = [sequences[i] for i in val_idx]
    val_rel = [relevance[i] for i in val_idx]
    run_dir = Path(run_dir) if run_dir is not None else None
    metrics_fh = open(run_dir / "metrics.jsonl", "w") if run_dir is not None else None

    best = {k: p.data.copy() for k, p in params.items()}
    best_auc: float | None = None
    best_epoch = 0
    wait = 0
    history: list[EpochLog] = []
    diverged = False
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            total, count = 0.0, 0
            try:
                for chunk in _batches(list(train_idx), lengths, cfg, rng):
                    batch = make_batch([sequences[i] for i in chunk], [relevance[i] for i in chunk])
                    model.zero_grad()
                    loss = bce_loss(model.forward(batch), batch.responses)
                    if not math.isfinite(loss.item()):
                        raise TrainingDiverged(f"epoch {epoch}: loss is {loss.item()}")
                    loss.backward()
                    opt.step()
                    n = int(batch.valid.sum())
                    total += loss.item() * n
                    count += n
            except TrainingDiverged as exc:
                log.error("%s; keeping the last good checkpoint", exc)
                diverged = True
                break
            rep = evaluate(model, val_seqs, val_rel, batch_size=cfg.batch_size)
            improved = rep.auc is not None and (best_auc is None or rep.auc > best_auc)
            if improved:
                best_auc, best_epoch, wait = rep.auc, epoch, 0
                best = {k: p.data.copy() for k, p in params.items()}
                if run_dir is not None:
                    save_checkpoint(run_dir / "best.npz", model, optimizer=opt,
                                    extra={"epoch": epoch, "val_auc": rep.auc, "train_config": asdict(cfg)})
            else:
                wait += 1
            entry = EpochLog(epoch, total / max(count, 1), rep.auc, rep.accuracy, improved,
                             time.perf_counter() - t0)
            history.append(entry)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(asdict(entry)) + "\n")
                metrics_fh.flush()
            if on_epoch is not None:
                on_epoch(entry)
            log.info("epoch %d loss %.5f val_auc %s", epoch, entry.train_loss,
                     "n/a" if rep.auc is None else f"{rep.auc:.4f}")
            if not improved and wait >= cfg.patience:
                break
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    for k, p in params.items():
        p.data = best[k]
    test = None
    if test_idx:
        test = evaluate(model, [sequences[i] for i in test_idx], [relevance[i] for i in test_idx],
                        batch_size=cfg.batch_size)
    if run_dir is not None:
        curve = "epoch,train_loss,val_auc\n" + "".join(
            f"{e.epoch},{e.train_loss!r},{'' if e.val_auc is None else repr(e.val_auc)}\n" for e in history)
        (run_dir / "auc_curve.csv").write_text(curve)
    return FoldResult(model, best_epoch, best_auc, history, test, diverged)


def _mean_std(values: list[float]) -> tuple[float | None, float | None]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


def cross_validate(cfg: TrainConfig, sequences: Sequence[StudentSequence], route_table: RouteTable,
                   split: DatasetSplit, folds: Sequence[int] | None = None,
                   run_dir: str | Path | None = None) -> tuple[MetricReport, list[FoldResult]]:
    """Train one model per fold (that fold validates, the rest train) and test each on the held-out set."""
    vocab = Vocab.from_data(sequences, route_table)
    relevance = relevance_for(sequences, route_table)
    folds = list(range(len(split.folds))) if folds is None else list(folds)
    results, per_fold = [], []
    for k in folds:
        train_idx, val_idx = split.train_val(k)
        fold_dir = None
        if run_dir is not None:
            fold_dir = Path(run_dir) / f"fold{k}"
            fold_dir.mkdir(parents=True, exist_ok=True)
        res = train_fold(cfg, sequences, relevance, train_idx, val_idx, vocab, split.test, fold_dir)
        results.append(res)
        per_fold.append({"fold": k, "best_epoch": res.best_epoch, "val_auc": res.best_val_auc,
                         "test_auc": res.test.auc if res.test else None,
                         "test_accuracy": res.test.accuracy if res.test else None})
    auc_m, auc_s = _mean_std([f["test_auc"] for f in per_fold])
    acc_m, acc_s = _mean_std([f["test_accuracy"] for f in per_fold])
    count = results[0].test.count if results and results[0].test else 0
    report = MetricReport(auc_m, acc_m if acc_m is not None else float("nan"), count, per_fold,
                          auc_m, auc_s, acc_m, acc_s)
    return report, results
