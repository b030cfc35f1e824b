"""Question templates: parsing, KB-driven population, and QA dataset files.

A template is question text with typed placeholders delimited by ``|``, e.g.
``what does patient |patient| take |medication| for ?``. One placeholder is
the root (default: the first); the rest become path constraints. Gold answers
for a populated question are defined by the template's answer-path patterns:
an entity is gold when some simple path from the root matches one of the
patterns, passes through every constraint entity, and ends at the expected
answer type. Population never emits a question without answers.
"""

from __future__ import annotations

import itertools
import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path

from .candidates import IN, OUT, Step, parse_path_key
from .kb import KBError, KnowledgeBase

SPLITS = ("train", "dev", "test")
# train/dev/test proportions, kept as the source counts they generalize
SPLIT_WEIGHTS = (5952, 1000, 2000)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class TemplateError(ValueError):
    """Malformed template text or template file entry."""


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens with punctuation split off as separate tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Template:
    """A parsed question template.

    ``tokens`` holds the question words with one ``None`` slot per
    placeholder; ``placeholders`` lists the placeholder type names in text
    order and ``slots`` their positions inside ``tokens``.
    """

    text: str
    tokens: list[str | None]
    placeholders: list[str]
    slots: list[int]
    root_index: int
    answer_type: str
    answer_paths: list[str]
    cap: int = 30

    @property
    def root_placeholder(self) -> str:
        return self.placeholders[self.root_index]


@dataclass
class QAInstance:
    """One populated question with its resolved entities and gold answers."""

    question_tokens: list[str]
    topic_entities: list[int]
    root_entity: int
    constraints: list[int]
    answer_type: str
    gold_answers: set[int]
    split: str = ""
    qid: str = ""
    template_text: str = ""


def parse_template(
    src: str,
    root: str | None = None,
    answer_type: str = "",
    answer_paths: list[str] | None = None,
    cap: int = 30,
) -> Template:
    """Extract placeholders and tokens from template text.

    The root defaults to the first placeholder; passing ``root`` selects the
    first placeholder with that type name instead. Raises
    :class:`TemplateError` with the 1-based column for unbalanced ``|``
    delimiters and for templates without placeholders.
    """
    tokens: list[str | None] = []
    placeholders: list[str] = []
    slots: list[int] = []
    pos = 0
    while True:
        start = src.find("|", pos)
        if start == -1:
            tokens.extend(tokenize(src[pos:]))
            break
        end = src.find("|", start + 1)
        if end == -1:
            raise TemplateError(
                f"unbalanced '|' delimiter at column {start + 1} in {src!r}"
            )
        name = src[start + 1 : end].strip()
        if not name:
            raise TemplateError(f"empty placeholder at column {start + 1} in {src!r}")
        tokens.extend(tokenize(src[pos:start]))
        slots.append(len(tokens))
        tokens.append(None)
        placeholders.append(name)
        pos = end + 1

    if not placeholders:
        raise TemplateError(f"template has no placeholders: {src!r}")

    if root is None:
        root_index = 0
    else:
        if root not in placeholders:
            raise TemplateError(f"root placeholder {root!r} not in template {src!r}")
        root_index = placeholders.index(root)

    paths = list(answer_paths or [])
    for key in paths:
        steps = parse_path_key(key)
        if not 1 <= len(steps) <= 3:
            raise TemplateError(f"answer path {key!r} must have 1..3 steps")
    if cap < 1:
        raise TemplateError(f"cap must be >= 1, got {cap}")

    return Template(
        text=src,
        tokens=tokens,
        placeholders=placeholders,
        slots=slots,
        root_index=root_index,
        answer_type=answer_type,
        answer_paths=paths,
        cap=cap,
    )


def pattern_paths(
    kb: KnowledgeBase, root: int, steps: tuple[Step, ...]
) -> list[tuple[int, ...]]:
    """All simple entity sequences from ``root`` that follow ``steps`` exactly."""
    seqs: list[tuple[int, ...]] = [(root,)]
    for pred, direction in steps:
        grown: list[tuple[int, ...]] = []
        for seq in seqs:
            adjacency = (
                kb.out_index[seq[-1]] if direction == OUT else kb.in_index[seq[-1]]
            )
            for p, nid in adjacency:
                if p == pred and nid not in seq:
                    grown.append(seq + (nid,))
        seqs = grown
        if not seqs:
            break
    return seqs


def match_answer_paths(
    kb: KnowledgeBase,
    root: int,
    patterns: list[str],
    constraints: list[int],
    answer_type: str,
) -> set[int]:
    """Entities reached from the root by any answer-path pattern whose
    concrete path contains every constraint, filtered to the answer type."""
    gold: set[int] = set()
    for key in patterns:
        for seq in pattern_paths(kb, root, parse_path_key(key)):
            end = seq[-1]
            if kb.entity(end).etype != answer_type:
                continue
            if all(c in seq for c in constraints):
                gold.add(end)
    return gold


def _binding_assignments(
    seq: tuple[int, ...], types: list[str], kb: KnowledgeBase
) -> list[tuple[int, ...]]:
    """Injective assignments of constraint placeholders to path entities."""
    pools = [
        [e for e in seq[1:] if kb.entity(e).etype == t] for t in types
    ]
    assignments = []
    for combo in itertools.product(*pools):
        if len(set(combo)) == len(combo):
            assignments.append(combo)
    return assignments


def populate(
    t: Template, kb: KnowledgeBase, cap: int | None = None, seed: int = 0
) -> list[QAInstance]:
    """Instantiate a template against a KB, at most ``cap`` questions.

    Placeholder combinations are discovered from concrete answer-path walks,
    so every returned instance has non-empty gold answers. Selection among
    valid combinations is a seeded shuffle; output is deterministic in
    (template, kb, cap, seed).
    """
    cap = t.cap if cap is None else cap
    if cap < 1:
        raise ValueError(f"cap must be >= 1, got {cap}")
    if not t.answer_paths:
        return []

    rng = random.Random(seed)
    root_type = t.root_placeholder
    constraint_types = [
        p for i, p in enumerate(t.placeholders) if i != t.root_index
    ]

    roots = [e.id for e in kb.entities if e.etype == root_type]
    rng.shuffle(roots)

    combos: list[tuple[int, tuple[int, ...]]] = []
    seen: set[tuple[int, tuple[int, ...]]] = set()
    for root in roots:
        for key in t.answer_paths:
            for seq in pattern_paths(kb, root, parse_path_key(key)):
                if kb.entity(seq[-1]).etype != t.answer_type:
                    continue
                for bound in _binding_assignments(seq, constraint_types, kb):
                    combo = (root, bound)
                    if combo not in seen:
                        seen.add(combo)
                        combos.append(combo)
    rng.shuffle(combos)

    instances: list[QAInstance] = []
    for root, bound in combos[:cap]:
        topic: list[int] = []
        bound_iter = iter(bound)
        for i in range(len(t.placeholders)):
            topic.append(root if i == t.root_index else next(bound_iter))
        gold = match_answer_paths(
            kb, root, t.answer_paths, list(bound), t.answer_type
        )
        tokens: list[str] = []
        slot_to_entity = dict(zip(t.slots, topic))
        for pos, tok in enumerate(t.tokens):
            if tok is None:
                tokens.extend(tokenize(kb.entity(slot_to_entity[pos]).name))
            else:
                tokens.append(tok)
        instances.append(
            QAInstance(
                question_tokens=tokens,
                topic_entities=topic,
                root_entity=root,
                constraints=list(bound),
                answer_type=t.answer_type,
                gold_answers=gold,
                template_text=t.text,
            )
        )
    return instances


# --- template and dataset files -------------------------------------------


def load_templates(path: str | Path) -> list[Template]:
    """Read a JSON array of {text, root, answer_type, answer_paths, cap}."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, list):
        raise TemplateError(f"{path}: template file must be a JSON array")
    templates = []
    for i, obj in enumerate(raw):
        try:
            templates.append(
                parse_template(
                    obj["text"],
                    root=obj.get("root"),
                    answer_type=obj["answer_type"],
                    answer_paths=list(obj["answer_paths"]),
                    cap=int(obj.get("cap", 30)),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise TemplateError(f"{path}: template {i}: {exc}") from exc
    return templates


def save_templates(templates: list[Template], path: str | Path) -> None:
    objs = [
        {
            "text": t.text,
            "root": t.root_placeholder,
            "answer_type": t.answer_type,
            "answer_paths": t.answer_paths,
            "cap": t.cap,
        }
        for t in templates
    ]
    Path(path).write_text(
        json.dumps(objs, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _entity_ref(kb: KnowledgeBase, entity_id: int) -> list[str]:
    e = kb.entity(entity_id)
    return [e.name, e.etype]


def save_dataset(
    instances: list[QAInstance], kb: KnowledgeBase, path: str | Path
) -> None:
    """Write one JSON object per line; entities stored as (name, etype) refs."""
    lines = []
    for q in instances:
        obj = {
            "qid": q.qid,
            "question": q.question_tokens,
            "topic": [_entity_ref(kb, t) for t in q.topic_entities],
            "root": _entity_ref(kb, q.root_entity),
            "constraints": [_entity_ref(kb, c) for c in q.constraints],
            "answer_type": q.answer_type,
            "gold": sorted(_entity_ref(kb, g) for g in q.gold_answers),
            "split": q.split,
            "template": q.template_text,
        }
        lines.append(json.dumps(obj, sort_keys=True))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), "utf-8")


def _resolve(kb: KnowledgeBase, ref: list[str], what: str, line_no: int) -> int:
    name, etype = ref
    if not kb.has_entity(name, etype):
        raise KBError(
            f"line {line_no}: unresolvable {what} ({name!r}, {etype!r})"
        )
    return kb.entity_id(name, etype)


def load_dataset(path: str | Path, kb: KnowledgeBase) -> list[QAInstance]:
    """Read a QA dataset file, resolving entity references against the KB."""
    instances = []
    for line_no, line in enumerate(
        Path(path).read_text(encoding="utf-8").splitlines(), 1
    ):
        if not line.strip():
            continue
        obj = json.loads(line)
        instances.append(
            QAInstance(
                question_tokens=list(obj["question"]),
                topic_entities=[
                    _resolve(kb, ref, "topic entity", line_no)
                    for ref in obj["topic"]
                ],
                root_entity=_resolve(kb, obj["root"], "root entity", line_no),
                constraints=[
                    _resolve(kb, ref, "constraint entity", line_no)
                    for ref in obj["constraints"]
                ],
                answer_type=obj["answer_type"],
                gold_answers={
                    _resolve(kb, ref, "gold answer", line_no) for ref in obj["gold"]
                },
                split=obj.get("split", ""),
                qid=obj.get("qid", ""),
                template_text=obj.get("template", ""),
            )
        )
    return instances


def split_sizes(n: int, weights: tuple[int, int, int] = SPLIT_WEIGHTS) -> tuple[int, int, int]:
    """Partition n into train/dev/test counts proportional to the weights."""
    total = sum(weights)
    n_train = round(n * weights[0] / total)
    n_dev = round(n * weights[1] / total)
    n_dev = min(n_dev, n - n_train)
    return n_train, n_dev, n - n_train - n_dev
