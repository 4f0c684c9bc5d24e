"""Knowledge-tracing model: question encoder, knowledge encoder, knowledge
retriever and response head, all built on relevance-masked monotonic attention.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionContext, AttentionParams, multi_head_route_attention
from .rasch import RaschParams, pair_embedding, question_embedding
from .tensor import MaskCounter, Tensor

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PROB_CLAMP = 1e-7


@dataclass
class ModelConfig:
    num_questions: int
    num_concepts: int
    dim: int = 64
    heads: int = 4
    blocks: int = 2
    use_mask: bool = True
    ff_mult: int = 4

    def __post_init__(self) -> None:
        for name in ("num_questions", "num_concepts", "dim", "heads", "blocks", "ff_mult"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")


def _ln(dim: int) -> tuple[Tensor, Tensor]:
    return Tensor(np.ones(dim), requires_grad=True), Tensor(np.zeros(dim), requires_grad=True)


def _linear(rng: np.random.Generator, n_in: int, n_out: int) -> tuple[Tensor, Tensor]:
    bound = np.sqrt(6.0 / (n_in + n_out))
    return (Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)), requires_grad=True),
            Tensor(np.zeros(n_out), requires_grad=True))


@dataclass
class BlockParams:
    """Pre-norm attention block with a position-wise feed-forward layer.

    ``cross`` blocks read values from a second stream and normalise it with
    their own layer norm.
    """
    attn: AttentionParams
    ln_q: tuple[Tensor, Tensor]
    ln_ff: tuple[Tensor, Tensor]
    ff1: tuple[Tensor, Tensor]
    ff2: tuple[Tensor, Tensor]
    ln_v: tuple[Tensor, Tensor] | None = None

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator, cross: bool) -> "BlockParams":
        width = cfg.ff_mult * cfg.dim
        return cls(
            attn=AttentionParams.init(cfg.dim, cfg.heads, rng),
            ln_q=_ln(cfg.dim),
            ln_ff=_ln(cfg.dim),
            ff1=_linear(rng, cfg.dim, width),
            ff2=_linear(rng, width, cfg.dim),
            ln_v=_ln(cfg.dim) if cross else None,
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = self.attn.named(f"{prefix}.attn")
        out[f"{prefix}.ln_q.gain"], out[f"{prefix}.ln_q.bias"] = self.ln_q
        out[f"{prefix}.ln_ff.gain"], out[f"{prefix}.ln_ff.bias"] = self.ln_ff
        out[f"{prefix}.ff1.w"], out[f"{prefix}.ff1.b"] = self.ff1
        out[f"{prefix}.ff2.w"], out[f"{prefix}.ff2.b"] = self.ff2
        if self.ln_v is not None:
            out[f"{prefix}.ln_v.gain"], out[f"{prefix}.ln_v.bias"] = self.ln_v
        return out

    def __call__(self, x: Tensor, ctx: AttentionContext, values: Tensor | None = None) -> tuple[Tensor, Tensor]:
        nq = T.layer_norm(x, *self.ln_q)
        nv = None if values is None else T.layer_norm(values, *self.ln_v)
        att = multi_head_route_attention(nq, self.attn, ctx, keys=nq, values=nv)
        x = x + att.out
        hidden = T.relu(T.matmul(T.layer_norm(x, *self.ln_ff), self.ff1[0]) + self.ff1[1])
        x = x + (T.matmul(hidden, self.ff2[0]) + self.ff2[1])
        return x, att.weights


@dataclass
class ModelParams:
    rasch: RaschParams
    question_encoder: list[BlockParams]
    knowledge_encoder: list[BlockParams]
    retriever: list[BlockParams]
    head_hidden: tuple[Tensor, Tensor]
    head_out: tuple[Tensor, Tensor]

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int) -> "ModelParams":
        rng = np.random.default_rng(seed)
        rasch = RaschParams.init(cfg.num_questions, cfg.num_concepts, cfg.dim, rng)
        enc1 = [BlockParams.init(cfg, rng, cross=False) for _ in range(cfg.blocks)]
        enc2 = [BlockParams.init(cfg, rng, cross=False) for _ in range(cfg.blocks)]
        retr = [BlockParams.init(cfg, rng, cross=True) for _ in range(cfg.blocks)]
        return cls(rasch, enc1, enc2, retr, _linear(rng, 2 * cfg.dim, cfg.dim), _linear(rng, cfg.dim, 1))

    def named(self) -> dict[str, Tensor]:
        out = dict(self.rasch.named())
        for stack, blocks in (("enc_q", self.question_encoder), ("enc_k", self.knowledge_encoder),
                              ("retriever", self.retriever)):
            for i, blk in enumerate(blocks):
                out.update(blk.named(f"{stack}.{i}"))
        out["head.hidden.w"], out["head.hidden.b"] = self.head_hidden
        out["head.out.w"], out["head.out.b"] = self.head_out
        return out

    def count(self) -> int:
        return sum(t.size for t in self.named().values())


@dataclass
class Batch:
    """Padded, aligned model inputs. Pad positions carry id -1 and valid=False."""
    questions: np.ndarray   # (B, T) int
    concepts: np.ndarray    # (B, T) int
    responses: np.ndarray   # (B, T) int
    valid: np.ndarray       # (B, T) bool
    relevance: np.ndarray   # (B, T, T) int8

    def __post_init__(self) -> None:
        b, t = self.questions.shape
        for name in ("concepts", "responses", "valid"):
            if getattr(self, name).shape != (b, t):
                raise ValueError(f"batch field {name} has shape {getattr(self, name).shape}, expected {(b, t)}")
        if self.relevance.shape != (b, t, t):
            raise ValueError(f"relevance shape {self.relevance.shape} does not match sequence length {t}")

    @property
    def length(self) -> int:
        return self.questions.shape[1]


def make_batch(sequences: Sequence, relevance: Sequence[np.ndarray], trim: bool = True) -> Batch:
    """Stack StudentSequence-like objects with their (n_valid, n_valid) relevance blocks.

    With ``trim`` the time axis is cut to the longest real prefix in the batch.
    """
    if len(sequences) != len(relevance):
        raise ValueError("one relevance matrix is needed per sequence")
    lengths = [int(np.sum(s.valid_mask)) for s in sequences]
    for s, F, n in zip(sequences, relevance, lengths):
        if np.shape(F) != (n, n):
            raise ValueError(f"relevance matrix shape {np.shape(F)} does not match {n} real interactions")
    t = max(lengths, default=0) if trim else len(sequences[0].questions)
    b = len(sequences)
    rel = np.zeros((b, t, t), dtype=np.int8)
    for i, (F, n) in enumerate(zip(relevance, lengths)):
        rel[i, :n, :n] = F
    return Batch(
        questions=np.stack([np.asarray(s.questions[:t]) for s in sequences]).reshape(b, t),
        concepts=np.stack([np.asarray(s.concepts[:t]) for s in sequences]).reshape(b, t),
        responses=np.stack([np.asarray(s.responses[:t]) for s in sequences]).reshape(b, t),
        valid=np.stack([np.asarray(s.valid_mask[:t], dtype=bool) for s in sequences]).reshape(b, t),
        relevance=rel,
    )


@dataclass
class ForwardTrace:
    probs: Tensor                 # (B, T), meaningful where valid
    valid: np.ndarray
    knowledge: Tensor | None      # h_t, (B, T, D)
    masked_rows: dict[str, int] = field(default_factory=dict)
    row_entropy: dict[str, float] = field(default_factory=dict)

    def predictions(self) -> np.ndarray:
        return self.probs.data[self.valid]


def _mean_entropy(weights: np.ndarray, valid: np.ndarray) -> float:
    """Mean entropy of non-empty attention rows at valid query positions."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.sum(np.where(weights > 0, weights * np.log(weights), 0.0), axis=-1)
    rows = (weights.sum(axis=-1) > 0) & valid[:, None, :]
    return float(ent[rows].mean()) if rows.any() else 0.0


class KTModel:
    def __init__(self, config: ModelConfig, seed: int = 0, params: ModelParams | None = None):
        self.config = config
        self.seed = seed
        self.params = params if params is not None else ModelParams.init(config, seed)

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params.named()

    def parameters(self) -> list[Tensor]:
        return list(self.params.named().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def forward(self, batch: Batch, diagnostics: bool = False) -> ForwardTrace:
        b, t = batch.questions.shape
        if t == 0:
            return ForwardTrace(Tensor(np.zeros((b, 0))), batch.valid, None)
        valid = batch.valid
        q = np.where(valid, batch.questions, 0)
        c = np.where(valid, batch.concepts, 0)
        r = np.where(valid, batch.responses, 0)
        if self.config.use_mask:
            rel = batch.relevance
        else:
            # Ablation: every real interaction is related to every other.
            rel = (valid[:, :, None] & valid[:, None, :]).astype(np.int8)

        p = self.params
        x = question_embedding(p.rasch, q, c)
        y = pair_embedding(p.rasch, q, c, r)

        counters = {name: MaskCounter() for name in ("enc_q", "enc_k", "retriever")}
        weights: dict[str, np.ndarray] = {}

        xh = x
        ctx = AttentionContext(rel, strict=False, counter=counters["enc_q"], valid=valid)
        for blk in p.question_encoder:
            xh, w = blk(xh, ctx)
        weights["enc_q"] = w.data

        yh = y
        ctx = AttentionContext(rel, strict=False, counter=counters["enc_k"], valid=valid)
        for blk in p.knowledge_encoder:
            yh, w = blk(yh, ctx)
        weights["enc_k"] = w.data

        h = xh
        ctx = AttentionContext(rel, strict=True, counter=counters["retriever"], valid=valid)
        for blk in p.retriever:
            h, w = blk(h, ctx, values=yh)
        weights["retriever"] = w.data

        feats = T.concat([h, x], axis=-1)
        hidden = T.relu(T.matmul(feats, p.head_hidden[0]) + p.head_hidden[1])
        logits = T.matmul(hidden, p.head_out[0]) + p.head_out[1]
        probs = T.sigmoid(T.reshape(logits, (b, t)))

        trace = ForwardTrace(probs, valid, h, {k: v.fully_masked_rows for k, v in counters.items()})
        if diagnostics:
            trace.row_entropy = {k: _mean_entropy(w, valid) for k, w in weights.items()}
        return trace

    def predict(self, batch: Batch) -> np.ndarray:
        """Probabilities (B, T) without building gradients."""
        saved = [(pt, pt.requires_grad) for pt in self.parameters()]
        for pt, _ in saved:
            pt.requires_grad = False
        try:
            return self.forward(batch).probs.data
        finally:
            for pt, flag in saved:
                pt.requires_grad = flag


def bce_loss(trace: ForwardTrace, responses: np.ndarray, valid: np.ndarray | None = None) -> Tensor:
    """Mean binary cross-entropy over valid positions; probabilities clamped to [1e-7, 1 - 1e-7]."""
    p = trace.probs
    valid = trace.valid if valid is None else np.asarray(valid, dtype=bool)
    r = np.asarray(responses, dtype=np.float64)
    if r.shape != p.shape or valid.shape != p.shape:
        raise ValueError(f"loss inputs disagree: probs {p.shape}, responses {r.shape}, valid {valid.shape}")
    n = int(valid.sum())
    if n == 0:
        raise ValueError("loss needs at least one valid position")
    clamped = np.count_nonzero(valid & ((p.data < PROB_CLAMP) | (p.data > 1 - PROB_CLAMP)))
    if clamped:
        log.debug("clamped %d probabilities in the loss", clamped)
    pc = T.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
    r = np.where(valid, r, 0.0)
    w = valid.astype(np.float64)
    ll = T.log(pc) * (r * w) + T.log(1.0 - pc) * ((1.0 - r) * w)
    return T.scale(T.sum_(ll), -1.0 / n)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, model: KTModel, *, optimizer=None, extra: dict | None = None) -> None:
    arrays = {f"param/{k}": v.data for k, v in model.named_parameters().items()}
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(model.config), "seed": model.seed,
            "extra": extra or {}}
    if optimizer is not None:
        meta["optimizer"] = optimizer.hyper()
        for k, (m, v) in optimizer.moments().items():
            arrays[f"adam_m/{k}"] = m
            arrays[f"adam_v/{k}"] = v
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[KTModel, dict, dict[str, tuple[np.ndarray, np.ndarray]]]:
    """Returns (model, meta, optimizer moments keyed by parameter name)."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        model = KTModel(ModelConfig(**meta["config"]), seed=meta["seed"])
        for name, t in model.named_parameters().items():
            key = f"param/{name}"
            if key not in z:
                raise KeyError(f"checkpoint lacks parameter {name}")
            arr = z[key]
            if arr.shape != t.shape:
                raise ValueError(f"parameter {name}: checkpoint shape {arr.shape} vs model {t.shape}")
            t.data = arr.copy()
        moments = {}
        for name in model.named_parameters():
            if f"adam_m/{name}" in z:
                moments[name] = (z[f"adam_m/{name}"].copy(), z[f"adam_v/{name}"].copy())
    return model, meta, moments
