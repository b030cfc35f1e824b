"""Pairwise training loop, negative sampling, evaluation metrics, ablations."""

from __future__ import annotations

import random
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .autodiff import Tensor
from .candidates import CandidateAnswer, CandidateSet, generate_candidates
from .kb import KnowledgeBase
from .model import ASPECTS, ModelParams, QuestionEncoding
from .templates import QAInstance


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 10
    batch_size: int = 32
    gamma: float = 0.2
    seed: int = 0
    active_aspects: tuple[str, ...] = ASPECTS
    normalize_weights: bool = False
    embed_dim: int = 300

    def __post_init__(self):
        self.active_aspects = tuple(self.active_aspects)
        unknown = set(self.active_aspects) - set(ASPECTS)
        if not self.active_aspects or unknown:
            raise ValueError(
                f"active_aspects must be a non-empty subset of {ASPECTS}, "
                f"got {self.active_aspects}"
            )
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")

    def to_json(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "gamma": self.gamma,
            "seed": self.seed,
            "active_aspects": list(self.active_aspects),
            "normalize_weights": self.normalize_weights,
            "embed_dim": self.embed_dim,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        kwargs = dict(obj)
        if "active_aspects" in kwargs:
            kwargs["active_aspects"] = tuple(kwargs["active_aspects"])
        return cls(**kwargs)


@dataclass
class Metrics:
    num_predicted: int
    precision: float
    recall: float
    accuracy: float
    micro_f1: float
    macro_f1: float

    def to_json(self) -> dict:
        return {
            "num_predicted": self.num_predicted,
            "precision": self.precision,
            "recall": self.recall,
            "accuracy": self.accuracy,
            "micro_f1": self.micro_f1,
            "macro_f1": self.macro_f1,
        }


@dataclass
class TrainingPair:
    question: QAInstance
    positive: CandidateAnswer
    negative: CandidateAnswer


class Adam:
    """Adaptive-moment optimizer with a constant learning rate."""

    def __init__(self, params: ModelParams, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, tensor in self.params.tensors.items():
            if tensor.grad is None:
                continue
            g = tensor.grad
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / b1c
            v_hat = self.v[name] / b2c
            tensor.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        self.params.zero_grads()


def sample_pairs(
    q: QAInstance, cands: CandidateSet, seed: int | str = 0
) -> list[TrainingPair]:
    """One uniformly sampled non-gold entry per gold entity in the candidates.

    Returns [] when the question has no gold candidate or no negative to
    sample (such questions are skipped by the trainer).
    """
    rng = random.Random(seed)
    by_entity: dict[int, list[int]] = {}
    for i, c in enumerate(cands.candidates):
        by_entity.setdefault(c.entity, []).append(i)
    gold_entities = sorted(e for e in by_entity if e in q.gold_answers)
    negatives = [
        i for i, c in enumerate(cands.candidates) if c.entity not in q.gold_answers
    ]
    if not gold_entities or not negatives:
        return []
    pairs = []
    for entity in gold_entities:
        pos = cands.candidates[rng.choice(by_entity[entity])]
        neg = cands.candidates[rng.choice(negatives)]
        pairs.append(TrainingPair(q, pos, neg))
    return pairs


def build_candidate_cache(
    kb: KnowledgeBase, questions: Iterable[QAInstance]
) -> dict[str, CandidateSet]:
    return {q.qid: generate_candidates(kb, q) for q in questions}


@dataclass
class TrainResult:
    params: ModelParams
    history: list[tuple[int, float, float]]  # (epoch, train loss, dev micro-F1)
    best_epoch: int
    best_dev_f1: float
    skipped_questions: int


def _batch_loss(losses: list[Tensor]) -> Tensor:
    return ad.mean(ad.stack(losses)) if len(losses) > 1 else losses[0]


def _pair_loss(
    enc: QuestionEncoding,
    pair: TrainingPair,
    params: ModelParams,
    config: TrainConfig,
    projected: dict,
) -> Tensor:
    s_pos = mdl.score_candidate(
        enc, pair.positive, params, config.active_aspects,
        config.normalize_weights, projected,
    ).score
    s_neg = mdl.score_candidate(
        enc, pair.negative, params, config.active_aspects,
        config.normalize_weights, projected,
    ).score
    return mdl.hinge_loss(s_pos, s_neg, config.gamma)


def train(
    dataset: list[QAInstance],
    kb: KnowledgeBase,
    config: TrainConfig,
    candidate_cache: dict[str, CandidateSet] | None = None,
) -> TrainResult:
    """Minimize the mean pairwise hinge loss; keep the best-dev checkpoint.

    Questions whose candidate sets lack a gold or a negative entry are
    skipped and counted. Raises :class:`DivergenceError` when a batch loss
    goes non-finite.
    """
    train_qs = [q for q in dataset if q.split == "train"]
    dev_qs = [q for q in dataset if q.split == "dev"]
    if not train_qs:
        raise ValueError("dataset has no train split")
    cache = candidate_cache or build_candidate_cache(kb, train_qs + dev_qs)

    vocabs = mdl.build_vocabs(kb, train_qs, [cache[q.qid] for q in train_qs])
    params = ModelParams(vocabs, embed_dim=config.embed_dim, seed=config.seed)
    optimizer = Adam(params, lr=config.learning_rate)
    shuffler = random.Random(config.seed)

    history: list[tuple[int, float, float]] = []
    best = (-1.0, 0, params.copy_data())  # (dev f1, epoch, snapshot)
    skipped: set[str] = set()

    for epoch in range(1, config.epochs + 1):
        order = list(range(len(train_qs)))
        shuffler.shuffle(order)
        batch: list[Tensor] = []
        loss_sum, loss_count = 0.0, 0

        def flush(batch: list[Tensor]) -> None:
            nonlocal loss_sum, loss_count
            loss = _batch_loss(batch)
            if not np.isfinite(loss.data):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} after {loss_count} pairs"
                )
            loss_sum += float(loss.data) * len(batch)
            loss_count += len(batch)
            loss.backward()
            optimizer.step()

        for qi in order:
            q = train_qs[qi]
            cands = cache[q.qid]
            pairs = sample_pairs(q, cands, seed=f"{config.seed}:{epoch}:{q.qid}")
            if not pairs:
                skipped.add(q.qid)
                continue
            enc = mdl.encode_question(q.question_tokens, params)
            projected = {
                a: mdl.project_hidden(enc, params, a) for a in config.active_aspects
            }
            for pair in pairs:
                batch.append(_pair_loss(enc, pair, params, config, projected))
                if len(batch) == config.batch_size:
                    flush(batch)
                    batch = []
        if batch:
            flush(batch)

        train_loss = loss_sum / max(loss_count, 1)
        dev_f1 = 0.0
        if dev_qs:
            dev_f1 = evaluate(
                params, dev_qs, kb, gamma=config.gamma,
                aspects=config.active_aspects,
                normalize_weights=config.normalize_weights,
                candidate_cache=cache,
            ).micro_f1
        history.append((epoch, train_loss, dev_f1))
        if not dev_qs or dev_f1 > best[0]:
            best = (dev_f1, epoch, params.copy_data())

    params.load_data(best[2])
    return TrainResult(
        params=params,
        history=history,
        best_epoch=best[1],
        best_dev_f1=max(best[0], 0.0),
        skipped_questions=len(skipped),
    )


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def evaluate(
    params: ModelParams,
    questions: list[QAInstance],
    kb: KnowledgeBase,
    gamma: float = 0.2,
    aspects: tuple[str, ...] = ASPECTS,
    normalize_weights: bool = False,
    candidate_cache: dict[str, CandidateSet] | None = None,
    split: str | None = None,
) -> Metrics:
    """Micro precision/recall/F1 over pooled answer sets, hits@1 accuracy,
    and macro-F1 as the mean per-question F1."""
    if split is not None:
        questions = [q for q in questions if q.split == split]
    if not questions:
        raise ValueError("no questions to evaluate")
    n_inter = n_pred = n_gold = hits = 0
    f1_sum = 0.0
    with mdl.frozen(params):
        for q in questions:
            cands = (
                candidate_cache[q.qid]
                if candidate_cache is not None
                else generate_candidates(kb, q)
            )
            if cands.candidates:
                pred = mdl.predict(
                    q, cands, params, gamma=gamma, aspects=aspects,
                    normalize_weights=normalize_weights,
                )
                predicted, best = pred.entities, pred.best_entity
            else:
                predicted, best = set(), None
            inter = len(predicted & q.gold_answers)
            n_inter += inter
            n_pred += len(predicted)
            n_gold += len(q.gold_answers)
            hits += int(best is not None and best in q.gold_answers)
            p = inter / len(predicted) if predicted else 0.0
            r = inter / len(q.gold_answers) if q.gold_answers else 0.0
            f1_sum += _f1(p, r)
    precision = n_inter / n_pred if n_pred else 0.0
    recall = n_inter / n_gold if n_gold else 0.0
    return Metrics(
        num_predicted=n_pred,
        precision=precision,
        recall=recall,
        accuracy=hits / len(questions),
        micro_f1=_f1(precision, recall),
        macro_f1=f1_sum / len(questions),
    )


def ablate(
    dataset: list[QAInstance],
    kb: KnowledgeBase,
    config: TrainConfig,
    subsets: list[tuple[str, ...]],
    eval_split: str = "test",
    candidate_cache: dict[str, CandidateSet] | None = None,
) -> list[tuple[tuple[str, ...], Metrics]]:
    """Train and evaluate one model per aspect subset with identical seeds."""
    for subset in subsets:
        if not subset:
            raise ValueError("aspect subsets must be non-empty")
    eval_qs = [q for q in dataset if q.split == eval_split]
    cache = candidate_cache or build_candidate_cache(
        kb, [q for q in dataset if q.split in ("train", "dev")] + eval_qs
    )
    rows = []
    for subset in subsets:
        sub_config = replace(config, active_aspects=tuple(subset))
        result = train(dataset, kb, sub_config, candidate_cache=cache)
        metrics = evaluate(
            result.params, eval_qs, kb, gamma=config.gamma,
            aspects=tuple(subset), normalize_weights=config.normalize_weights,
            candidate_cache=cache,
        )
        rows.append((tuple(subset), metrics))
    return rows


METRIC_COLUMNS = ("# Ans", "Precision", "Recall", "Accuracy", "Micro-F1", "Macro-F1")


def format_metrics_table(rows: list[tuple[str, Metrics]]) -> str:
    """Aligned text table with one row per model/subset."""
    header = ("Model",) + METRIC_COLUMNS
    body = []
    for label, m in rows:
        body.append(
            (
                label,
                str(m.num_predicted),
                f"{m.precision:.4f}",
                f"{m.recall:.4f}",
                f"{m.accuracy:.4f}",
                f"{m.micro_f1:.4f}",
                f"{m.macro_f1:.4f}",
            )
        )
    widths = [
        max(len(header[i]), *(len(r[i]) for r in body)) if body else len(header[i])
        for i in range(len(header))
    ]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(header))]
    for r in body:
        lines.append("  ".join(v.ljust(widths[i]) for i, v in enumerate(r)))
    return "\n".join(lines)
