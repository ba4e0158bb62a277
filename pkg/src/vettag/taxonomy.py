"""The label universe: top-level disease codes plus the SPURIOUS sentinel,
the meta-category grouping used by the hierarchical losses, and the
child->parent ontology that rolls raw annotations up to top-level labels.

File formats (all UTF-8 TSV, `#` lines are comments):
  labels:   code TAB name           (order defines ids; SPURIOUS line required)
  grouping: cluster_index TAB code  (optional `# name <idx> <text>` comments)
  ontology: first line `ROOT TAB <code>`, then child_code TAB parent_code
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable

import numpy as np

SPURIOUS_CODE = "SPURIOUS"


class TaxonomyError(ValueError):
    """Base class for taxonomy loading/validation failures."""


class PartitionError(TaxonomyError):
    """A label is in zero or more than one meta-cluster."""


class UnknownCodeError(TaxonomyError):
    """Grouping references a code absent from the label set."""


class CycleError(TaxonomyError):
    """Ontology edge map contains a cycle."""


@dataclass(frozen=True)
class LabelRecord:
    id: int
    code: str
    name: str


@dataclass
class LabelSet:
    records: list[LabelRecord]
    code_to_id: dict[str, int] = field(init=False)
    spurious_id: int = field(init=False)

    def __post_init__(self):
        self.code_to_id = {}
        spurious = []
        for i, rec in enumerate(self.records):
            if rec.id != i:
                raise TaxonomyError(f"label ids must be dense, got {rec.id} at position {i}")
            if rec.code in self.code_to_id:
                raise TaxonomyError(f"duplicate label code {rec.code!r}")
            self.code_to_id[rec.code] = rec.id
            if rec.code == SPURIOUS_CODE:
                spurious.append(rec.id)
        if len(spurious) != 1:
            raise TaxonomyError(f"expected exactly one {SPURIOUS_CODE} label, found {len(spurious)}")
        self.spurious_id = spurious[0]

    @property
    def m(self) -> int:
        return len(self.records)

    @property
    def codes(self) -> list[str]:
        return [r.code for r in self.records]

    def disease_ids(self) -> list[int]:
        return [r.id for r in self.records if r.id != self.spurious_id]


@dataclass
class MetaGrouping:
    """Partition of the non-spurious labels into K named clusters."""

    names: list[str]
    members: list[list[int]]
    label_to_cluster: dict[int, int] = field(init=False)

    def __post_init__(self):
        if len(self.names) != len(self.members):
            raise TaxonomyError("cluster names and member sets differ in length")
        self.label_to_cluster = {}
        for k, ids in enumerate(self.members):
            for i in ids:
                if i in self.label_to_cluster:
                    raise PartitionError(f"label id {i} appears in clusters {self.label_to_cluster[i]} and {k}")
                self.label_to_cluster[i] = k

    @property
    def k(self) -> int:
        return len(self.members)

    def validate_partition(self, labels: LabelSet) -> None:
        expected = set(labels.disease_ids())
        got = set(self.label_to_cluster)
        missing = expected - got
        extra = got - expected
        if missing:
            raise PartitionError(f"labels missing from the meta grouping: {sorted(missing)}")
        if extra:
            raise PartitionError(f"meta grouping covers non-disease or unknown ids: {sorted(extra)}")


@dataclass
class Ontology:
    parent: dict[str, str]
    root: str

    def __post_init__(self):
        for code in self.parent:
            seen = {code}
            cur = code
            while cur in self.parent:
                cur = self.parent[cur]
                if cur in seen:
                    raise CycleError(f"ontology cycle through {code!r}")
                seen.add(cur)


def roll_up(code: str, onto: Ontology, labels: LabelSet) -> int:
    """Map a raw code to the top-level label id it belongs under.

    A code that is itself a label is its own answer. Otherwise walk parents
    until the root; the last code before the root must be a label. Unknown
    and non-disease codes land on SPURIOUS. Total by construction.
    """
    if code in labels.code_to_id:
        return labels.code_to_id[code]
    cur = code
    seen = {cur}
    while cur in onto.parent:
        parent = onto.parent[cur]
        if parent == onto.root:
            return labels.code_to_id.get(cur, labels.spurious_id)
        if parent in seen:
            return labels.spurious_id
        seen.add(parent)
        cur = parent
    return labels.spurious_id


def count_subtypes(code_sets: Iterable[Iterable[str]], onto: Ontology, labels: LabelSet) -> np.ndarray:
    """Distinct raw codes in a corpus rolling up to each label (fixed points count)."""
    distinct: list[set[str]] = [set() for _ in range(labels.m)]
    for codes in code_sets:
        for code in codes:
            distinct[roll_up(code, onto, labels)].add(code)
    return np.array([len(s) for s in distinct], dtype=np.int64)


def _read_tsv(path, n_fields: int, what: str):
    rows = []
    comments = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                comments.append(line)
                continue
            parts = line.split("\t")
            if len(parts) != n_fields:
                raise TaxonomyError(f"{path}:{lineno}: {what} rows need {n_fields} tab-separated fields")
            rows.append((lineno, parts))
    return rows, comments


def load_labels(path) -> LabelSet:
    rows, _ = _read_tsv(path, 2, "label")
    records = [LabelRecord(i, code, name) for i, (_, (code, name)) in enumerate(rows)]
    return LabelSet(records)


def load_grouping(path, labels: LabelSet) -> MetaGrouping:
    rows, comments = _read_tsv(path, 2, "grouping")
    by_cluster: dict[int, list[int]] = {}
    for lineno, (idx_s, code) in rows:
        try:
            idx = int(idx_s)
        except ValueError as exc:
            raise TaxonomyError(f"{path}:{lineno}: cluster index {idx_s!r} is not an integer") from exc
        if code not in labels.code_to_id:
            raise UnknownCodeError(f"{path}:{lineno}: unknown code {code!r} in grouping")
        by_cluster.setdefault(idx, []).append(labels.code_to_id[code])
    indices = sorted(by_cluster)
    if indices != list(range(len(indices))):
        raise TaxonomyError(f"{path}: cluster indices must be dense from 0, got {indices}")
    name_map: dict[int, str] = {}
    for c in comments:
        parts = c[1:].strip().split(maxsplit=2)
        if len(parts) == 3 and parts[0] == "name":
            try:
                name_map[int(parts[1])] = parts[2]
            except ValueError:
                pass
    grouping = MetaGrouping(
        names=[name_map.get(k, f"meta-{k:02d}") for k in indices],
        members=[by_cluster[k] for k in indices],
    )
    grouping.validate_partition(labels)
    return grouping


def load_ontology(path) -> Ontology:
    rows, _ = _read_tsv(path, 2, "ontology")
    if not rows or rows[0][1][0] != "ROOT":
        raise TaxonomyError(f"{path}: first data line must declare `ROOT\\t<code>`")
    root = rows[0][1][1]
    parent: dict[str, str] = {}
    for lineno, (child, par) in rows[1:]:
        if child in parent:
            raise TaxonomyError(f"{path}:{lineno}: duplicate child {child!r}")
        parent[child] = par
    return Ontology(parent=parent, root=root)


def load_taxonomy(labels_path, grouping_path, ontology_path) -> tuple[LabelSet, MetaGrouping, Ontology]:
    labels = load_labels(labels_path)
    grouping = load_grouping(grouping_path, labels)
    onto = load_ontology(ontology_path)
    return labels, grouping, onto


def default_taxonomy() -> tuple[LabelSet, MetaGrouping, Ontology]:
    """The shipped 42-label / 19-cluster asset."""
    base = resources.files("vettag").joinpath("assets")
    return load_taxonomy(
        base.joinpath("labels.tsv"),
        base.joinpath("meta_groups.tsv"),
        base.joinpath("ontology.tsv"),
    )
