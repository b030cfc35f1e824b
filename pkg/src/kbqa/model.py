"""Aspect-attention answer ranker.

A question is encoded by a word-embedding layer and a single-layer
bidirectional LSTM into per-token hidden states H = (h_1 .. h_n). Each
candidate answer contributes four aspect vectors: its entity embedding, its
type embedding, the embedding of its relation path from the root, and the
mean embedding of its neighbor entities (context). For each aspect vector
h_x, attention over the question

    u_i = h_x . tanh(W_x h_i + b_x)      alpha = softmax(u)      r = sum_i alpha_i h_i

yields an aspect-conditioned question representation r. The candidate's score
is S = sum_x w_x * s_x with similarity s_x = h_x . r and aspect weight
w_x = mean(H) . r. Training uses a pairwise hinge loss; inference predicts
every entity whose score comes within gamma of the best candidate.
"""

from __future__ import annotations

import csv
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .candidates import CandidateAnswer, CandidateSet, parse_path_key
from .kb import KnowledgeBase
from .templates import QAInstance

ASPECTS = ("entity", "type", "path", "context")

PAD, UNK = "<pad>", "<unk>"

_STEP_MARK = {"out": "->", "in": "<-"}


@dataclass
class Vocabs:
    """Closed vocabularies mapping symbols to embedding rows."""

    words: dict[str, int]
    types: dict[str, int]
    paths: dict[str, int]
    steps: dict[str, int]
    n_entities: int

    def to_json(self) -> dict:
        return {
            "words": self.words,
            "types": self.types,
            "paths": self.paths,
            "steps": self.steps,
            "n_entities": self.n_entities,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabs":
        return cls(
            words=dict(obj["words"]),
            types=dict(obj["types"]),
            paths=dict(obj["paths"]),
            steps=dict(obj["steps"]),
            n_entities=int(obj["n_entities"]),
        )


def build_vocabs(
    kb: KnowledgeBase,
    questions: list[QAInstance],
    candidate_sets: list[CandidateSet],
) -> Vocabs:
    """Vocabularies from the KB plus the training questions/candidates.

    Words get reserved PAD and UNK entries; path keys come from the training
    candidates only, unseen keys fall back to step embeddings at score time.
    """
    words = {PAD: 0, UNK: 1}
    for tok in sorted({t for q in questions for t in q.question_tokens}):
        words.setdefault(tok, len(words))
    types = {t: i for i, t in enumerate(sorted({e.etype for e in kb.entities}))}
    keys = sorted({c.path.key for cs in candidate_sets for c in cs.candidates})
    paths = {k: i for i, k in enumerate(keys)}
    step_tokens = sorted(
        {mark + t.predicate for t in kb.triples for mark in ("->", "<-")}
    )
    steps = {s: i for i, s in enumerate(step_tokens)}
    return Vocabs(words, types, paths, steps, len(kb))


class ModelParams:
    """All learnable tensors: embedding tables, encoder weights, projections."""

    GATES = ("i", "f", "o", "g")

    def __init__(
        self,
        vocabs: Vocabs,
        embed_dim: int = 300,
        seed: int = 0,
        init_scale: float = 0.08,
    ):
        if embed_dim % 2:
            raise ValueError(f"embed_dim must be even, got {embed_dim}")
        self.vocabs = vocabs
        self.embed_dim = embed_dim
        self.hidden_dim = embed_dim // 2
        rng = np.random.default_rng(seed)

        def init(*shape):
            return Tensor(
                rng.uniform(-init_scale, init_scale, shape), requires_grad=True
            )

        d, h = embed_dim, self.hidden_dim
        self.tensors: dict[str, Tensor] = {
            "word_emb": init(len(vocabs.words), d),
            "entity_emb": init(vocabs.n_entities, d),
            "type_emb": init(len(vocabs.types), d),
            "path_emb": init(max(len(vocabs.paths), 1), d),
            "step_emb": init(max(len(vocabs.steps), 1), d),
        }
        for direction in ("fw", "bw"):
            for gate in self.GATES:
                self.tensors[f"enc_{direction}_W{gate}"] = init(h, d)
                self.tensors[f"enc_{direction}_U{gate}"] = init(h, h)
                self.tensors[f"enc_{direction}_b{gate}"] = init(h)
        for aspect in ASPECTS:
            self.tensors[f"proj_{aspect}_W"] = init(d, d)
            self.tensors[f"proj_{aspect}_b"] = init(d)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def copy_data(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def load_data(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, arr in snapshot.items():
            self.tensors[name].data = arr.copy()


@contextmanager
def frozen(params: ModelParams):
    """Temporarily drop gradient tracking; speeds up inference-only passes."""
    flags = {name: t.requires_grad for name, t in params.tensors.items()}
    for t in params.tensors.values():
        t.requires_grad = False
    try:
        yield params
    finally:
        for name, t in params.tensors.items():
            t.requires_grad = flags[name]


@dataclass
class QuestionEncoding:
    """Per-token hidden states plus their mean pooling."""

    tokens: list[str]
    hidden: list[Tensor]
    matrix: Tensor  # stacked hidden states, shape (n_tokens, embed_dim)
    pooled: Tensor  # mean over tokens, shape (embed_dim,)


def _lstm_pass(xs: list[Tensor], params: ModelParams, direction: str) -> list[Tensor]:
    h = Tensor(np.zeros(params.hidden_dim))
    c = Tensor(np.zeros(params.hidden_dim))
    W = {g: params[f"enc_{direction}_W{g}"] for g in ModelParams.GATES}
    U = {g: params[f"enc_{direction}_U{g}"] for g in ModelParams.GATES}
    b = {g: params[f"enc_{direction}_b{g}"] for g in ModelParams.GATES}
    out = []
    for x in xs:
        gates = {
            g: ad.add(ad.add(ad.matmul(W[g], x), ad.matmul(U[g], h)), b[g])
            for g in ModelParams.GATES
        }
        i = ad.sigmoid(gates["i"])
        f = ad.sigmoid(gates["f"])
        o = ad.sigmoid(gates["o"])
        g = ad.tanh(gates["g"])
        c = ad.add(ad.mul(f, c), ad.mul(i, g))
        h = ad.mul(o, ad.tanh(c))
        out.append(h)
    return out


def encode_question(tokens: list[str], params: ModelParams) -> QuestionEncoding:
    """Bidirectional LSTM over word embeddings; unknown words map to UNK."""
    if not tokens:
        raise ValueError("cannot encode an empty question")
    unk = params.vocabs.words[UNK]
    ids = [params.vocabs.words.get(t, unk) for t in tokens]
    xs = [ad.row(params["word_emb"], i) for i in ids]
    forward = _lstm_pass(xs, params, "fw")
    backward = _lstm_pass(list(reversed(xs)), params, "bw")[::-1]
    hidden = [ad.concat([f, b]) for f, b in zip(forward, backward)]
    matrix = ad.stack(hidden)
    pooled = ad.mean(matrix, axis=0)
    return QuestionEncoding(list(tokens), hidden, matrix, pooled)


def project_hidden(
    enc: QuestionEncoding, params: ModelParams, aspect: str
) -> list[Tensor]:
    """tanh(W_x h_i + b_x) for every position; shared by all candidates."""
    W, b = params[f"proj_{aspect}_W"], params[f"proj_{aspect}_b"]
    return [ad.tanh(ad.add(ad.matmul(W, h), b)) for h in enc.hidden]


def aspect_attention(
    enc: QuestionEncoding,
    aspect_vec: Tensor,
    params: ModelParams,
    aspect: str,
    projected: list[Tensor] | None = None,
) -> tuple[Tensor, Tensor]:
    """Attention weights over question positions and the attended summary."""
    if projected is None:
        projected = project_hidden(enc, params, aspect)
    scores = ad.stack([ad.dot(aspect_vec, p) for p in projected])
    alpha = ad.softmax(scores)
    attended = ad.matmul(alpha, enc.matrix)
    return alpha, attended


def path_vector(params: ModelParams, cand: CandidateAnswer) -> Tensor:
    """Path embedding row, or the mean of step embeddings for unseen keys."""
    key = cand.path.key
    idx = params.vocabs.paths.get(key)
    if idx is not None:
        return ad.row(params["path_emb"], idx)
    step_ids = [
        params.vocabs.steps[_STEP_MARK[direction] + pred]
        for pred, direction in parse_path_key(key)
    ]
    return ad.mean(ad.rows(params["step_emb"], step_ids), axis=0)


def aspect_vector(params: ModelParams, cand: CandidateAnswer, aspect: str) -> Tensor | None:
    """The candidate-side vector for one aspect; None for empty context."""
    if aspect == "entity":
        return ad.row(params["entity_emb"], cand.entity)
    if aspect == "type":
        return ad.row(params["type_emb"], params.vocabs.types[cand.etype])
    if aspect == "path":
        return path_vector(params, cand)
    if aspect == "context":
        if not cand.context:
            return None
        return ad.mean(ad.rows(params["entity_emb"], list(cand.context)), axis=0)
    raise ValueError(f"unknown aspect {aspect!r}")


@dataclass
class ScoreBreakdown:
    """Per-aspect attention, similarities and weights behind one score."""

    score: Tensor
    similarities: dict[str, float] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)
    alphas: dict[str, np.ndarray] = field(default_factory=dict)
    attended: dict[str, np.ndarray] = field(default_factory=dict)

    def value(self) -> float:
        return self.score.item()


def score_candidate(
    enc: QuestionEncoding,
    cand: CandidateAnswer,
    params: ModelParams,
    aspects: tuple[str, ...] = ASPECTS,
    normalize_weights: bool = False,
    projected: dict[str, list[Tensor]] | None = None,
) -> ScoreBreakdown:
    """Score one candidate; inactive aspects and empty context contribute 0.

    ``projected`` may carry precomputed per-aspect projections of the question
    (see :func:`project_hidden`) to share work across candidates.
    """
    unknown = set(aspects) - set(ASPECTS)
    if unknown:
        raise ValueError(f"unknown aspects {sorted(unknown)}")
    breakdown = ScoreBreakdown(score=Tensor(0.0))
    sims: list[Tensor] = []
    weights: list[Tensor] = []
    for aspect in ASPECTS:
        if aspect not in aspects:
            breakdown.similarities[aspect] = 0.0
            breakdown.weights[aspect] = 0.0
            continue
        vec = aspect_vector(params, cand, aspect)
        if vec is None:
            breakdown.similarities[aspect] = 0.0
            breakdown.weights[aspect] = 0.0
            continue
        proj = projected.get(aspect) if projected else None
        alpha, attended = aspect_attention(enc, vec, params, aspect, proj)
        s = ad.dot(vec, attended)
        w = ad.dot(enc.pooled, attended)
        sims.append(s)
        weights.append(w)
        breakdown.similarities[aspect] = s.item()
        breakdown.weights[aspect] = w.item()
        breakdown.alphas[aspect] = alpha.data.copy()
        breakdown.attended[aspect] = attended.data.copy()
    if not sims:
        return breakdown
    if normalize_weights:
        normed = ad.softmax(ad.stack(weights))
        total = ad.dot(normed, ad.stack(sims))
        for i, aspect in enumerate(a for a in ASPECTS if a in breakdown.alphas):
            breakdown.weights[aspect] = float(normed.data[i])
    else:
        total = ad.dot(ad.stack(weights), ad.stack(sims))
    breakdown.score = total
    return breakdown


def hinge_loss(s_pos: Tensor, s_neg: Tensor, gamma: float) -> Tensor:
    """max(0, gamma - S_pos + S_neg): zero once the gold candidate wins by gamma."""
    if not 0 < gamma < 1:
        raise ValueError(f"gamma must be in (0, 1), got {gamma}")
    return ad.relu(ad.add(ad.sub(Tensor(gamma), s_pos), s_neg))


@dataclass
class Prediction:
    """Entities within gamma of the best score, plus the best entity itself."""

    entities: set[int]
    best_entity: int | None
    best_score: float
    no_candidates: bool = False
    entry_scores: list[float] = field(default_factory=list)


def predict(
    q: QAInstance,
    cands: CandidateSet,
    params: ModelParams,
    gamma: float = 0.2,
    aspects: tuple[str, ...] = ASPECTS,
    normalize_weights: bool = False,
) -> Prediction:
    """Score every candidate entry and keep entities scoring above
    best - gamma (strict); an entity qualifies through any of its entries."""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if not cands.candidates:
        return Prediction(set(), None, float("nan"), no_candidates=True)
    enc = encode_question(q.question_tokens, params)
    projected = {a: project_hidden(enc, params, a) for a in ASPECTS if a in aspects}
    scores = [
        score_candidate(enc, c, params, aspects, normalize_weights, projected).value()
        for c in cands.candidates
    ]
    best_score = max(scores)
    best_entity = min(
        c.entity
        for c, s in zip(cands.candidates, scores)
        if s == best_score
    )
    kept = {
        c.entity
        for c, s in zip(cands.candidates, scores)
        if s > best_score - gamma
    }
    kept.add(best_entity)
    return Prediction(kept, best_entity, best_score, entry_scores=scores)


def sgemb_score(
    q: QAInstance, cand: CandidateAnswer, params: ModelParams
) -> Tensor:
    """Subgraph-embedding baseline: average word embedding dotted with the
    sum of entity, path, and mean neighbor-entity embeddings."""
    if not q.question_tokens:
        raise ValueError("cannot score an empty question")
    unk = params.vocabs.words[UNK]
    ids = [params.vocabs.words.get(t, unk) for t in q.question_tokens]
    q_vec = ad.mean(ad.rows(params["word_emb"], ids), axis=0)
    rep = ad.add(ad.row(params["entity_emb"], cand.entity), path_vector(params, cand))
    if cand.context:
        rep = ad.add(
            rep, ad.mean(ad.rows(params["entity_emb"], list(cand.context)), axis=0)
        )
    return ad.dot(q_vec, rep)


# --- checkpoint and attention export ----------------------------------------


def save_model(params: ModelParams, path: str | Path) -> None:
    extra = {
        "vocabs": params.vocabs.to_json(),
        "embed_dim": params.embed_dim,
    }
    ad.save_checkpoint(params.tensors, path, extra=extra)


def load_model(path: str | Path) -> ModelParams:
    tensors, extra = ad.load_checkpoint(path)
    vocabs = Vocabs.from_json(extra["vocabs"])
    params = ModelParams(vocabs, embed_dim=int(extra["embed_dim"]))
    for name, t in tensors.items():
        if name not in params.tensors:
            raise ValueError(f"checkpoint has unexpected tensor {name!r}")
        if t.data.shape != params.tensors[name].data.shape:
            raise ValueError(
                f"checkpoint tensor {name!r} has shape {t.data.shape}, "
                f"expected {params.tensors[name].data.shape}"
            )
        params.tensors[name] = t
    return params


def export_attention(
    out_path: str | Path,
    kb: KnowledgeBase,
    questions: list[QAInstance],
    candidate_sets: dict[str, CandidateSet],
    params: ModelParams,
    gamma: float = 0.2,
    aspects: tuple[str, ...] = ASPECTS,
) -> int:
    """Write attention weights for each question's best candidate as CSV.

    One row per (aspect, token) with the attention value, plus one row per
    aspect carrying its weight w (token columns empty). Returns the number of
    questions exported.
    """
    exported = 0
    with frozen(params), open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["question_id", "aspect", "token_index", "token", "value"])
        for q in questions:
            cands = candidate_sets[q.qid]
            pred = predict(q, cands, params, gamma=gamma, aspects=aspects)
            if pred.best_entity is None:
                continue
            best_idx = max(
                range(len(cands.candidates)),
                key=lambda i: (
                    pred.entry_scores[i],
                    -cands.candidates[i].entity,
                ),
            )
            enc = encode_question(q.question_tokens, params)
            breakdown = score_candidate(
                enc, cands.candidates[best_idx], params, aspects
            )
            for aspect in ASPECTS:
                if aspect not in breakdown.alphas:
                    continue
                for i, (tok, a) in enumerate(
                    zip(q.question_tokens, breakdown.alphas[aspect])
                ):
                    writer.writerow([q.qid, aspect, i, tok, repr(float(a))])
            for aspect in ASPECTS:
                if aspect in breakdown.alphas:
                    writer.writerow(
                        [q.qid, aspect, "", "", repr(breakdown.weights[aspect])]
                    )
            exported += 1
    return exported
