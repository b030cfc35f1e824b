"""Typed-entity triple store with adjacency indexes and tab-separated file I/O.

A knowledge base is a set of typed entities plus directed, labeled triples
between them. Entities are identified by the (name, type) pair; the same name
may appear under several types and stays a distinct node for each. After
construction the store is immutable: both adjacency indexes are built once and
all queries are read-only.

File format (UTF-8, one record per line, fields separated by single tabs):

    # comment lines start with '#'
    name<TAB>type                                              entity record
    subj_name<TAB>subj_type<TAB>predicate<TAB>obj_name<TAB>obj_type   triple record

Triple records must reference declared entities. Tabs are forbidden inside
fields and there is no escaping. The canonical serialization orders entity
records by (name, type) and triple records by (subject, predicate, object),
which makes load -> save -> load a byte-stable round trip.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable


class KBError(ValueError):
    """Invalid knowledge-base content (bad reference, duplicate, self-loop)."""


class KBParseError(KBError):
    """Malformed triple-file line; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class Entity:
    """One node: dense integer id plus the identifying (name, etype) pair."""

    id: int
    name: str
    etype: str


@dataclass(frozen=True)
class Triple:
    """Directed labeled edge between two entity ids."""

    subject: int
    predicate: str
    object: int


@dataclass(frozen=True)
class KBStats:
    entities: int
    entity_types: int
    triples: int
    relations: int


class KnowledgeBase:
    """Immutable entity/triple store with out- and in-adjacency indexes.

    Build once via :meth:`from_records` or :func:`load_kb`; afterwards the
    store is safe to read from any number of threads.
    """

    def __init__(self, entities: list[Entity], triples: list[Triple]):
        self.entities = entities
        self.triples = triples
        self._id_by_key = {(e.name, e.etype): e.id for e in entities}
        n = len(entities)
        out_index: list[list[tuple[str, int]]] = [[] for _ in range(n)]
        in_index: list[list[tuple[str, int]]] = [[] for _ in range(n)]
        for t in triples:
            out_index[t.subject].append((t.predicate, t.object))
            in_index[t.object].append((t.predicate, t.subject))
        for adj in (out_index, in_index):
            for lst in adj:
                lst.sort()
        self.out_index = out_index
        self.in_index = in_index

    @classmethod
    def from_records(
        cls,
        entity_records: Iterable[tuple[str, str]],
        triple_records: Iterable[tuple[tuple[str, str], str, tuple[str, str]]],
    ) -> "KnowledgeBase":
        """Build a KB from (name, etype) pairs and name-keyed triples.

        Entity ids are assigned densely in sorted (name, etype) order, so the
        record order never affects the resulting store.
        """
        recs = list(entity_records)
        seen: set[tuple[str, str]] = set()
        for rec in recs:
            if rec in seen:
                raise KBError(f"duplicate entity declaration {rec!r}")
            seen.add(rec)
        entities = [
            Entity(i, name, etype) for i, (name, etype) in enumerate(sorted(recs))
        ]
        id_by_key = {(e.name, e.etype): e.id for e in entities}

        triples: list[Triple] = []
        seen_triples: set[tuple[int, str, int]] = set()
        for subj, pred, obj in triple_records:
            for key in (subj, obj):
                if key not in id_by_key:
                    raise KBError(f"triple references undeclared entity {key!r}")
            s, o = id_by_key[subj], id_by_key[obj]
            if s == o:
                raise KBError(f"self-loop triple on entity {subj!r}")
            if (s, pred, o) in seen_triples:
                raise KBError(f"duplicate triple ({subj!r}, {pred!r}, {obj!r})")
            seen_triples.add((s, pred, o))
            triples.append(Triple(s, pred, o))
        triples.sort(key=lambda t: (t.subject, t.predicate, t.object))
        return cls(entities, triples)

    def __len__(self) -> int:
        return len(self.entities)

    def entity(self, entity_id: int) -> Entity:
        if not 0 <= entity_id < len(self.entities):
            raise KBError(f"unknown entity id {entity_id}")
        return self.entities[entity_id]

    def entity_id(self, name: str, etype: str) -> int:
        try:
            return self._id_by_key[(name, etype)]
        except KeyError:
            raise KBError(f"unknown entity ({name!r}, {etype!r})") from None

    def has_entity(self, name: str, etype: str) -> bool:
        return (name, etype) in self._id_by_key

    def neighbors(self, entity_id: int) -> list[tuple[str, int, str]]:
        """Every triple incident to the entity, once each.

        Returns (predicate, neighbor id, direction) tuples where direction is
        "out" for stored direction and "in" against it, ordered by predicate,
        then neighbor id, then direction.
        """
        self.entity(entity_id)
        items = [(p, n, "out") for p, n in self.out_index[entity_id]]
        items += [(p, n, "in") for p, n in self.in_index[entity_id]]
        items.sort()
        return items

    def stats(self) -> KBStats:
        return KBStats(
            entities=len(self.entities),
            entity_types=len({e.etype for e in self.entities}),
            triples=len(self.triples),
            relations=len({t.predicate for t in self.triples}),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(serialize_kb(self), encoding="utf-8")


def _split_fields(line: str, line_no: int) -> list[str]:
    fields = line.split("\t")
    for i, field in enumerate(fields):
        if not field:
            raise KBParseError(line_no, f"empty field {i + 1} in {line!r}")
    return fields


def load_kb(path: str | Path) -> KnowledgeBase:
    """Parse a triple file into a validated, indexed KnowledgeBase.

    Rejects malformed lines (with line number), triples that reference
    undeclared entities, duplicate declarations, duplicate triples, and
    self-loops.
    """
    path = Path(path)
    entity_records: list[tuple[str, str]] = []
    entity_seen: set[tuple[str, str]] = set()
    triple_records: list[tuple[tuple[str, str], str, tuple[str, str]]] = []
    triple_lines: dict[tuple, int] = {}

    for line_no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = _split_fields(line, line_no)
        if len(fields) == 2:
            rec = (fields[0], fields[1])
            if rec in entity_seen:
                raise KBParseError(line_no, f"duplicate entity declaration {rec!r}")
            entity_seen.add(rec)
            entity_records.append(rec)
        elif len(fields) == 5:
            sname, stype, pred, oname, otype = fields
            rec = ((sname, stype), pred, (oname, otype))
            if rec in triple_lines:
                raise KBParseError(
                    line_no,
                    f"duplicate triple {line!r} (first seen on line {triple_lines[rec]})",
                )
            triple_lines[rec] = line_no
            triple_records.append(rec)
        else:
            raise KBParseError(
                line_no,
                f"expected 2 fields (entity) or 5 fields (triple), got {len(fields)}",
            )

    for rec, line_no in triple_lines.items():
        (s_key, _, o_key) = rec
        for key in (s_key, o_key):
            if key not in entity_seen:
                raise KBParseError(
                    line_no, f"triple references undeclared entity {key!r}"
                )

    try:
        return KnowledgeBase.from_records(entity_records, triple_records)
    except KBError as exc:  # self-loops surface here with file context
        raise KBError(f"{path}: {exc}") from exc


def serialize_kb(kb: KnowledgeBase) -> str:
    """Canonical text form: sorted entity records, then sorted triple records."""
    lines = [f"{e.name}\t{e.etype}" for e in kb.entities]
    for t in kb.triples:
        s, o = kb.entities[t.subject], kb.entities[t.object]
        lines.append(f"{s.name}\t{s.etype}\t{t.predicate}\t{o.name}\t{o.etype}")
    return "\n".join(lines) + ("\n" if lines else "")


def neighbors(kb: KnowledgeBase, entity_id: int) -> list[tuple[str, int, str]]:
    return kb.neighbors(entity_id)


def stats(kb: KnowledgeBase) -> KBStats:
    return kb.stats()


def save_kb(kb: KnowledgeBase, path: str | Path) -> None:
    kb.save(path)
