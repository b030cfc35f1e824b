"""Seeded synthetic knowledge bases and QA datasets.

Profiles pin the target shape of a generated KB: entity/type/triple/relation
counts, the patient population, and per-relation type signatures saying which
entity types each relation may connect. Generation is exact on all four
counts: every type receives at least one entity, every relation at least one
triple, and patient-rooted relations get heavy-tailed subject degrees so
patient neighborhoods look like star-shaped hubs.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kb import KnowledgeBase
from .templates import (
    SPLIT_WEIGHTS,
    QAInstance,
    Template,
    parse_template,
    populate,
    split_sizes,
)


class ProfileError(ValueError):
    """Inconsistent or infeasible KB profile."""


@dataclass
class RelationSignature:
    """One relation plus the (subject type, object type) pairs it may connect."""

    relation: str
    pairs: list[tuple[str, str]]
    weight: float = 1.0


@dataclass
class KBProfile:
    name: str
    entities: int
    types: int
    triples: int
    relations: int
    patients: int
    signatures: list[RelationSignature]
    patient_type: str = "patient"
    degree_exponent: float = 0.8
    type_skew: float = 0.8

    def __post_init__(self):
        if min(self.entities, self.types, self.triples, self.relations) < 1:
            raise ProfileError("all profile counts must be positive")
        if self.patients < 1:
            raise ProfileError("profile needs at least one patient")
        if len(self.signatures) != self.relations:
            raise ProfileError(
                f"{self.relations} relations declared but "
                f"{len(self.signatures)} signatures given"
            )
        names = [s.relation for s in self.signatures]
        if len(set(names)) != len(names):
            raise ProfileError("duplicate relation names in signatures")
        covered = {t for s in self.signatures for pair in s.pairs for t in pair}
        if self.patient_type not in covered:
            raise ProfileError(f"patient type {self.patient_type!r} not in signatures")
        if len(covered) != self.types:
            raise ProfileError(
                f"signatures cover {len(covered)} types, profile declares {self.types}"
            )
        if self.entities < self.types:
            raise ProfileError("fewer entities than types")
        if self.triples < self.relations:
            raise ProfileError("fewer triples than relations")

    def type_names(self) -> list[str]:
        return sorted({t for s in self.signatures for pair in s.pairs for t in pair})

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "entities": self.entities,
            "types": self.types,
            "triples": self.triples,
            "relations": self.relations,
            "patients": self.patients,
            "patient_type": self.patient_type,
            "degree_exponent": self.degree_exponent,
            "type_skew": self.type_skew,
            "signatures": [
                {"relation": s.relation, "pairs": [list(p) for p in s.pairs],
                 "weight": s.weight}
                for s in self.signatures
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "KBProfile":
        return cls(
            name=obj["name"],
            entities=int(obj["entities"]),
            types=int(obj["types"]),
            triples=int(obj["triples"]),
            relations=int(obj["relations"]),
            patients=int(obj["patients"]),
            patient_type=obj.get("patient_type", "patient"),
            degree_exponent=float(obj.get("degree_exponent", 0.8)),
            type_skew=float(obj.get("type_skew", 0.8)),
            signatures=[
                RelationSignature(
                    relation=s["relation"],
                    pairs=[tuple(p) for p in s["pairs"]],
                    weight=float(s.get("weight", 1.0)),
                )
                for s in obj["signatures"]
            ],
        )


def load_profile(path: str | Path) -> KBProfile:
    return KBProfile.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def save_profile(profile: KBProfile, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(profile.to_json(), indent=2, sort_keys=True) + "\n", "utf-8"
    )


def _apportion(total: int, caps: list[int], weights: list[float]) -> list[int]:
    """Split ``total`` into per-slot counts: at least 1 each, at most the cap,
    otherwise proportional to the weights. Deterministic."""
    n = len(caps)
    if total < n:
        raise ProfileError(f"cannot give {n} slots at least 1 from {total}")
    if sum(caps) < total:
        raise ProfileError(f"total {total} exceeds capacity {sum(caps)}")
    counts = [1] * n
    wsum = sum(weights)
    ideal = [1 + (total - n) * w / wsum for w in weights]
    # integer part first, then leftovers by largest fractional remainder
    for i in range(n):
        counts[i] = min(int(ideal[i]), caps[i])
    leftover = total - sum(counts)
    order = sorted(range(n), key=lambda i: (-(ideal[i] - counts[i]), i))
    while leftover > 0:
        progressed = False
        for i in order:
            if leftover == 0:
                break
            if counts[i] < caps[i]:
                counts[i] += 1
                leftover -= 1
                progressed = True
        if not progressed:
            raise ProfileError("apportioning stalled; capacity exhausted")
    return counts


def _sample_edges(
    rng: np.random.Generator,
    n_subjects: int,
    n_objects: int,
    count: int,
    same_type: bool,
    exponent: float,
) -> list[tuple[int, int]]:
    """``count`` distinct (subject, object) index pairs with heavy-tailed
    subject degrees; falls back to exhaustive sampling near saturation."""
    capacity = n_subjects * (n_objects - 1) if same_type else n_subjects * n_objects
    if count > capacity:
        raise ProfileError(f"requested {count} edges but only {capacity} possible")
    ranks = rng.permutation(n_subjects)
    weights = (ranks + 1.0) ** (-exponent)
    weights /= weights.sum()
    edges: set[tuple[int, int]] = set()
    budget = 30 * count + 200
    spent = 0
    while len(edges) < count and spent < budget:
        k = max(count - len(edges), 16)
        subjects = rng.choice(n_subjects, size=k, p=weights)
        objects = rng.integers(0, n_objects, size=k)
        spent += k
        for s, o in zip(subjects, objects):
            if same_type and s == o:
                continue
            edges.add((int(s), int(o)))
            if len(edges) == count:
                break
    if len(edges) < count:
        remaining = [
            (i, j)
            for i in range(n_subjects)
            for j in range(n_objects)
            if (not same_type or i != j) and (i, j) not in edges
        ]
        picked = rng.choice(len(remaining), size=count - len(edges), replace=False)
        edges.update(remaining[int(i)] for i in picked)
    return sorted(edges)


def generate_kb(profile: KBProfile, seed: int = 0) -> KnowledgeBase:
    """Generate a KB matching the profile counts exactly.

    Same (profile, seed) reproduces the same KB byte for byte.
    """
    rng = np.random.default_rng(seed)
    type_names = profile.type_names()
    others = [t for t in type_names if t != profile.patient_type]

    remaining = profile.entities - profile.patients
    if remaining < len(others):
        raise ProfileError("not enough entities to cover every non-patient type")
    if others:
        ranks = rng.permutation(len(others))
        weights = [(r + 1.0) ** (-profile.type_skew) for r in ranks]
        caps = [remaining] * len(others)
        counts = _apportion(remaining, caps, weights)
    else:
        counts = []

    per_type = {profile.patient_type: profile.patients}
    per_type.update(dict(zip(others, counts)))
    width = len(str(profile.entities))
    names = {
        t: [f"{t}_{i:0{width}d}" for i in range(per_type[t])] for t in type_names
    }
    entity_records = [(name, t) for t in type_names for name in names[t]]

    pair_slots = []  # (relation, subj type, obj type, capacity share weight)
    rel_caps = []
    rel_weights = []
    for sig in profile.signatures:
        cap = 0
        for a, b in sig.pairs:
            if a not in per_type or b not in per_type:
                raise ProfileError(f"signature type missing: {a!r} or {b!r}")
            cap += (
                per_type[a] * (per_type[b] - 1)
                if a == b
                else per_type[a] * per_type[b]
            )
        rel_caps.append(cap)
        rel_weights.append(sig.weight)
    rel_counts = _apportion(profile.triples, rel_caps, rel_weights)

    triple_records = []
    for sig, rel_total in zip(profile.signatures, rel_counts):
        pair_caps = [
            per_type[a] * (per_type[b] - 1) if a == b else per_type[a] * per_type[b]
            for a, b in sig.pairs
        ]
        if len(sig.pairs) == 1:
            pair_counts = [rel_total]
        else:
            pair_counts = _apportion(rel_total, pair_caps, [float(c) for c in pair_caps])
        for (a, b), n_edges in zip(sig.pairs, pair_counts):
            exponent = profile.degree_exponent if a == profile.patient_type else 0.3
            for i, j in _sample_edges(
                rng, per_type[a], per_type[b], n_edges, a == b, exponent
            ):
                triple_records.append(
                    ((names[a][i], a), sig.relation, (names[b][j], b))
                )
    return KnowledgeBase.from_records(entity_records, triple_records)


def generate_dataset(
    kb: KnowledgeBase,
    templates: list[Template],
    seed: int = 0,
    split_weights: tuple[int, int, int] = SPLIT_WEIGHTS,
) -> list[QAInstance]:
    """Populate every template, shuffle, and assign train/dev/test splits."""
    instances: list[QAInstance] = []
    for i, t in enumerate(templates):
        instances.extend(populate(t, kb, cap=t.cap, seed=f"{seed}:{i}"))
    if not instances:
        raise ValueError("no answerable instances could be generated")
    rng = random.Random(f"{seed}:splits")
    rng.shuffle(instances)
    n_train, n_dev, _ = split_sizes(len(instances), split_weights)
    for idx, q in enumerate(instances):
        q.qid = f"q{idx:06d}"
        if idx < n_train:
            q.split = "train"
        elif idx < n_train + n_dev:
            q.split = "dev"
        else:
            q.split = "test"
    return instances


# --- built-in profiles and templates ----------------------------------------


def desk_profile() -> KBProfile:
    """Small benchmark profile: 1,000 entities / 10 types / 3,000 triples / 8 relations."""
    sig = [
        RelationSignature("prescribed_with", [("patient", "medication")], weight=3.0),
        RelationSignature("has_reason", [("medication", "reason")], weight=1.5),
        RelationSignature("has_dosage", [("medication", "dosage")], weight=1.5),
        RelationSignature(
            "administered_as",
            [("medication", "frequency"), ("medication", "mode")],
            weight=1.5,
        ),
        RelationSignature("diagnosed_with", [("patient", "disease")], weight=2.5),
        RelationSignature("underwent_test", [("patient", "test")], weight=2.0),
        RelationSignature(
            "reveals", [("test", "disease"), ("test", "symptom")], weight=1.5
        ),
        RelationSignature("has_status", [("patient", "status")], weight=1.0),
    ]
    return KBProfile(
        name="desk",
        entities=1000,
        types=10,
        triples=3000,
        relations=8,
        patients=80,
        signatures=sig,
    )


def medications_profile(scale: float = 1.0) -> KBProfile:
    """Profile shaped like a medication-annotation KB: 46 types, 14 relations,
    28,821 entities and 53,519 triples at scale 1.0."""
    findings = [f"finding_{i:02d}" for i in range(39)]
    sig = [
        RelationSignature("prescribed_with", [("patient", "medication")], weight=5.0),
        RelationSignature("has_dosage", [("medication", "dosage")], weight=2.0),
        RelationSignature("has_frequency", [("medication", "frequency")], weight=2.0),
        RelationSignature("has_duration", [("medication", "duration")], weight=1.0),
        RelationSignature("has_mode", [("medication", "mode")], weight=1.5),
        RelationSignature("has_reason", [("medication", "reason")], weight=2.5),
    ]
    chunks = [findings[i::8] for i in range(8)]
    for k, chunk in enumerate(chunks):
        sig.append(
            RelationSignature(
                f"mentions_{k}",
                [("patient", f) for f in sorted(chunk)],
                weight=1.0,
            )
        )
    return KBProfile(
        name="medications",
        entities=max(round(28821 * scale), 50),
        types=46,
        triples=max(round(53519 * scale), 100),
        relations=14,
        patients=max(round(261 * scale), 2),
        signatures=sig,
    )


def desk_templates() -> list[Template]:
    """Question templates matching the desk profile's schema."""
    spec = [
        ("what medications has patient |patient| been prescribed ?",
         "patient", "medication", ["->prescribed_with"], 40),
        ("what does patient |patient| take |medication| for ?",
         "patient", "reason", ["->prescribed_with|->has_reason"], 40),
        ("why is patient |patient| prescribed |medication| ?",
         "patient", "reason", ["->prescribed_with|->has_reason"], 30),
        ("give me all patients who have been prescribed with |medication| .",
         "medication", "patient", ["<-prescribed_with"], 40),
        ("what is the dosage of |medication| for patient |patient| ?",
         "patient", "dosage", ["->prescribed_with|->has_dosage"], 40),
        ("how often does patient |patient| take |medication| ?",
         "patient", "frequency", ["->prescribed_with|->administered_as"], 30),
        ("how is |medication| administered to patient |patient| ?",
         "patient", "mode", ["->prescribed_with|->administered_as"], 30),
        ("which diseases has patient |patient| been diagnosed with ?",
         "patient", "disease", ["->diagnosed_with"], 40),
        ("which patients have been diagnosed with |disease| ?",
         "disease", "patient", ["<-diagnosed_with"], 40),
        ("which tests were conducted on patient |patient| ?",
         "patient", "test", ["->underwent_test"], 40),
        ("what conditions are revealed by |test| on patient |patient| ?",
         "patient", "disease", ["->underwent_test|->reveals"], 30),
        ("what is the smoking status of patient |patient| ?",
         "patient", "status", ["->has_status"], 30),
        ("give me all patients whose smoking status is |status| .",
         "status", "patient", ["<-has_status"], 30),
    ]
    return [
        parse_template(text, root=root, answer_type=ans, answer_paths=paths, cap=cap)
        for text, root, ans, paths, cap in spec
    ]


def save_templates_json(templates: list[Template], path: str | Path) -> None:
    from .templates import save_templates

    save_templates(templates, path)
