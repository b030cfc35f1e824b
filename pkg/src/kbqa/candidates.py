"""Candidate-answer generation: 3-hop subgraph extraction and constraint pruning.

For a question rooted at a topic entity, every other entity reachable within
``max_hops`` undirected steps is a candidate answer. Candidates are keyed by
(entity, relation path): an entity reachable over several relation sequences
yields one entry per distinct sequence. Edge direction is ignored for
reachability but recorded in the path, so inverse traversals keep their own
labels. Paths are simple (no repeated entity).

Pruning keeps a candidate when its type equals the expected answer type and at
least one of its concrete paths passes through every constraint entity (the
root trivially lies on every path).
"""

from __future__ import annotations

from dataclasses import dataclass

from .kb import KBError, KnowledgeBase

OUT = "out"
IN = "in"

_STEP_MARK = {OUT: "->", IN: "<-"}
_MARK_STEP = {"->": OUT, "<-": IN}

Step = tuple[str, str]  # (predicate, direction)


def path_key(steps: tuple[Step, ...]) -> str:
    """Canonical string form of a relation path, e.g. ``->prescribed_with|->has_reason``."""
    return "|".join(_STEP_MARK[direction] + pred for pred, direction in steps)


def parse_path_key(key: str) -> tuple[Step, ...]:
    """Inverse of :func:`path_key`; raises ValueError on malformed keys."""
    steps = []
    for token in key.split("|"):
        mark, pred = token[:2], token[2:]
        if mark not in _MARK_STEP or not pred:
            raise ValueError(f"malformed path step {token!r} in key {key!r}")
        steps.append((pred, _MARK_STEP[mark]))
    if not steps:
        raise ValueError("empty path key")
    return tuple(steps)


@dataclass(frozen=True)
class RelationPath:
    """Ordered (predicate, direction) steps from the root to a candidate."""

    steps: tuple[Step, ...]

    @property
    def key(self) -> str:
        return path_key(self.steps)

    def __len__(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class CandidateAnswer:
    """One candidate: the entity plus its four scoring aspects.

    ``witnesses`` holds every entity sequence (root first, candidate last)
    that realizes ``path``; pruning tests constraints against them.
    ``context`` is the candidate's neighbor ids as returned by the KB index.
    """

    entity: int
    etype: str
    path: RelationPath
    context: tuple[int, ...]
    witnesses: tuple[tuple[int, ...], ...]


@dataclass
class CandidateSet:
    root: int
    candidates: list[CandidateAnswer]

    def __len__(self) -> int:
        return len(self.candidates)

    def entities(self) -> set[int]:
        return {c.entity for c in self.candidates}


def _context_of(kb: KnowledgeBase, entity_id: int) -> tuple[int, ...]:
    return tuple(nid for _, nid, _ in kb.neighbors(entity_id))


def extract_subgraph(
    kb: KnowledgeBase, root: int, max_hops: int = 3
) -> CandidateSet:
    """All simple paths of 1..max_hops steps from the root, grouped by
    (entity, relation-path) and sorted by (entity id, path key)."""
    kb.entity(root)
    if max_hops < 1:
        raise ValueError(f"max_hops must be >= 1, got {max_hops}")

    found: dict[tuple[int, tuple[Step, ...]], set[tuple[int, ...]]] = {}
    stack: list[tuple[int, tuple[Step, ...], tuple[int, ...]]] = [(root, (), (root,))]
    while stack:
        current, steps, seq = stack.pop()
        if len(steps) == max_hops:
            continue
        for pred, nid, direction in kb.neighbors(current):
            if nid in seq:
                continue
            nsteps = steps + ((pred, direction),)
            nseq = seq + (nid,)
            found.setdefault((nid, nsteps), set()).add(nseq)
            stack.append((nid, nsteps, nseq))

    candidates = []
    for (entity, steps), seqs in sorted(
        found.items(), key=lambda item: (item[0][0], path_key(item[0][1]))
    ):
        candidates.append(
            CandidateAnswer(
                entity=entity,
                etype=kb.entity(entity).etype,
                path=RelationPath(steps),
                context=_context_of(kb, entity),
                witnesses=tuple(sorted(seqs)),
            )
        )
    return CandidateSet(root=root, candidates=candidates)


def _passes(cand: CandidateAnswer, constraints: list[int], answer_type: str) -> bool:
    if cand.etype != answer_type:
        return False
    if not constraints:
        return True
    # One concrete path must contain every constraint; witnesses start at the
    # root, so a constraint equal to the root always passes.
    return any(
        all(c in witness for c in constraints) for witness in cand.witnesses
    )


def prune(
    cands: CandidateSet, constraints: list[int], answer_type: str
) -> CandidateSet:
    """Filter candidates by answer type and path-constraint containment."""
    kept = [c for c in cands.candidates if _passes(c, constraints, answer_type)]
    return CandidateSet(root=cands.root, candidates=kept)


def generate_candidates(kb: KnowledgeBase, q) -> CandidateSet:
    """Extract the subgraph at the question root, then prune with the
    remaining topic entities as constraints and the expected answer type."""
    if not q.topic_entities:
        raise KBError("question has no topic entities")
    for tid in q.topic_entities:
        kb.entity(tid)
    constraints = [t for t in q.topic_entities if t != q.root_entity]
    subgraph = extract_subgraph(kb, q.root_entity, max_hops=3)
    return prune(subgraph, constraints, q.answer_type)
