"""Dataset I/O, deterministic splits, and the synthetic corpus generator.

The generator stands in for the private hospital datasets: documents are
background words plus label keywords, label frequencies follow a power law,
same-cluster labels co-occur with a configurable boost, and the companion
"shifted" corpus swaps tokens for shift-only synonyms at a configurable rate
(the out-of-vocabulary knob) while drawing shorter lengths.
"""

from __future__ import annotations

import dataclasses
import json
import os
import string
import tempfile
from dataclasses import dataclass, replace

import numpy as np

from .taxonomy import LabelSet, MetaGrouping, Ontology, SPURIOUS_CODE, load_grouping, load_labels, load_ontology, roll_up
from .text import AbbreviationTable, Vocabulary, tokenize

DEFAULT_RATIOS = (0.9, 0.05, 0.05)
DEFAULT_MAX_TOKENS = 1000


class CorpusFormatError(ValueError):
    """Malformed corpus line; message carries the line number."""


class CorpusSchemaError(ValueError):
    """A corpus line is valid JSON but misses a required field."""


class SplitError(ValueError):
    pass


class SyntheticSpecError(ValueError):
    pass


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    codes: tuple[str, ...]
    label_ids: frozenset[int]
    tokens: tuple[str, ...]
    token_ids: np.ndarray | None = None


def read_corpus(
    path,
    labels: LabelSet,
    onto: Ontology,
    abbrev: AbbreviationTable | None = None,
    max_tokens: int = DEFAULT_MAX_TOKENS,
) -> list[Document]:
    """Parse a JSONL corpus; every line becomes a Document with rolled-up labels.

    Lines whose codes roll up to nothing are labeled {SPURIOUS} so the reader
    stays total.
    """
    docs: list[Document] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            for key in ("id", "text", "codes"):
                if key not in obj:
                    raise CorpusSchemaError(f"{path}:{lineno}: missing field {key!r}")
            if not isinstance(obj["codes"], list):
                raise CorpusSchemaError(f"{path}:{lineno}: 'codes' must be a list")
            tokens = tuple(tokenize(obj["text"], abbrev)[:max_tokens])
            label_ids = {roll_up(str(c), onto, labels) for c in obj["codes"]}
            if not label_ids:
                label_ids = {labels.spurious_id}
            docs.append(
                Document(
                    id=str(obj["id"]),
                    text=obj["text"],
                    codes=tuple(dict.fromkeys(str(c) for c in obj["codes"])),
                    label_ids=frozenset(label_ids),
                    tokens=tokens,
                )
            )
    return docs


def write_corpus(docs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(json.dumps({"id": d.id, "text": d.text, "codes": list(d.codes)}) + "\n")


def encode_documents(docs, vocab: Vocabulary) -> list[Document]:
    return [replace(d, token_ids=vocab.encode(d.tokens)) for d in docs]


def label_matrix(docs, num_labels: int) -> np.ndarray:
    """Dense 0/1 gold matrix, one row per document."""
    y = np.zeros((len(docs), num_labels), dtype=np.float64)
    for r, d in enumerate(docs):
        y[r, sorted(d.label_ids)] = 1.0
    return y


def split(docs, ratios: tuple[float, float, float] = DEFAULT_RATIOS, seed: int = 0):
    """Deterministic shuffled (train, val, test) partition.

    Validation/test sizes are floors of their ratios; the remainder goes to
    the training split.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios {ratios} do not sum to 1")
    n = len(docs)
    if n < 3:
        raise SplitError(f"need at least 3 documents to split, got {n}")
    n_val = int(np.floor(ratios[1] * n))
    n_test = int(np.floor(ratios[2] * n))
    order = np.random.default_rng(seed).permutation(n)
    val_idx = order[:n_val]
    test_idx = order[n_val : n_val + n_test]
    train_idx = order[n_val + n_test :]
    return (
        [docs[i] for i in train_idx],
        [docs[i] for i in val_idx],
        [docs[i] for i in test_idx],
    )


# ---------------------------------------------------------------------------
# Synthetic corpus generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    label_count: int = 12
    cluster_count: int = 4
    documents: int = 5000
    keywords_per_label: int = 6
    background_vocab: int = 80
    mean_length_in_domain: int = 64
    mean_length_shifted: int = 38
    cooccurrence_boost: float = 0.6
    shift_oov_fraction: float = 0.154
    skew: float = 0.4
    mean_labels_per_doc: float = 2.0
    keyword_share: float = 0.6
    max_subtypes: int = 3
    seed: int = 0

    def __post_init__(self):
        if not (self.label_count >= self.cluster_count >= 1):
            raise SyntheticSpecError("need label_count >= cluster_count >= 1")
        if not (0.0 <= self.shift_oov_fraction <= 1.0):
            raise SyntheticSpecError("shift_oov_fraction must lie in [0, 1]")
        if self.documents < 3 or self.keywords_per_label < 1 or self.background_vocab < 1:
            raise SyntheticSpecError("documents, keyword and background vocab sizes must be positive")
        if self.cooccurrence_boost < 0 or self.mean_labels_per_doc <= 0:
            raise SyntheticSpecError("cooccurrence_boost must be >= 0 and mean_labels_per_doc > 0")
        if not (0.0 < self.keyword_share < 1.0):
            raise SyntheticSpecError("keyword_share must lie in (0, 1)")
        if self.max_subtypes < 1:
            raise SyntheticSpecError("max_subtypes must be >= 1")
        if self.keywords_per_label < self.max_subtypes:
            raise SyntheticSpecError("each subtype needs at least one keyword")
        if self.cooccurrence_boost > 1.0:
            raise SyntheticSpecError("cooccurrence_boost is a mixing weight in [0, 1]")

    @classmethod
    def from_json(cls, path) -> "SyntheticSpec":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise SyntheticSpecError(f"unknown synthetic spec fields: {sorted(unknown)}")
        return cls(**data)

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass
class SyntheticTaxonomy:
    labels: LabelSet
    grouping: MetaGrouping
    ontology: Ontology
    labels_tsv: str
    grouping_tsv: str
    ontology_tsv: str

    def write(self, directory) -> None:
        for name, content in (
            ("labels.tsv", self.labels_tsv),
            ("meta_groups.tsv", self.grouping_tsv),
            ("ontology.tsv", self.ontology_tsv),
        ):
            with open(os.path.join(directory, name), "w", encoding="utf-8") as fh:
                fh.write(content)


def _letters(idx: int, width: int = 3) -> str:
    out = []
    for _ in range(width):
        out.append(string.ascii_lowercase[idx % 26])
        idx //= 26
    return "".join(reversed(out))


def _build_taxonomy(spec: SyntheticSpec, subtype_counts: list[int]) -> SyntheticTaxonomy:
    m = spec.label_count
    label_lines = ["# synthetic label set"]
    onto_lines = ["ROOT\tDISEASE"]
    group_lines = ["# synthetic meta grouping"]
    codes = [f"SYN{_letters(i, 2).upper()}" for i in range(m)]
    for i, code in enumerate(codes):
        label_lines.append(f"{code}\tsynthetic disease {_letters(i, 2)}")
        onto_lines.append(f"{code}\tDISEASE")
        for s in range(subtype_counts[i]):
            onto_lines.append(f"{code}.S{s:02d}\t{code}")
    label_lines.append(f"{SPURIOUS_CODE}\tspurious")
    # contiguous cluster blocks
    bounds = np.linspace(0, m, spec.cluster_count + 1).round().astype(int)
    for k in range(spec.cluster_count):
        group_lines.append(f"# name {k} synthetic cluster {k}")
        for i in range(bounds[k], bounds[k + 1]):
            group_lines.append(f"{k}\t{codes[i]}")
    labels_tsv = "\n".join(label_lines) + "\n"
    grouping_tsv = "\n".join(group_lines) + "\n"
    ontology_tsv = "\n".join(onto_lines) + "\n"

    with tempfile.TemporaryDirectory() as tmp:
        lp, gp, op = (os.path.join(tmp, n) for n in ("l.tsv", "g.tsv", "o.tsv"))
        for p, c in ((lp, labels_tsv), (gp, grouping_tsv), (op, ontology_tsv)):
            with open(p, "w", encoding="utf-8") as fh:
                fh.write(c)
        labels = load_labels(lp)
        grouping = load_grouping(gp, labels)
        onto = load_ontology(op)
    return SyntheticTaxonomy(labels, grouping, onto, labels_tsv, grouping_tsv, ontology_tsv)


def generate_synthetic(spec: SyntheticSpec) -> tuple[list[Document], list[Document], SyntheticTaxonomy]:
    """Generate (in-domain documents, shifted documents, taxonomy asset).

    Pure function of the spec: equal specs produce byte-identical corpora.
    """
    rng = np.random.default_rng(spec.seed)
    m = spec.label_count

    # Each label owns a keyword pool; pools are partitioned across its
    # subtypes, so labels with many subtypes show fewer, more varied keywords
    # per document (the diversity knob behind the subtype regression). The
    # counts are deterministically shuffled so subtype diversity is not
    # collinear with label frequency.
    ramp = np.array([1 + (i * (spec.max_subtypes - 1)) // max(m - 1, 1) for i in range(m)])
    subtype_counts = [int(c) for c in rng.permutation(ramp)]
    keywords = [
        [f"kw{_letters(i, 2)}{_letters(j, 2)}" for j in range(spec.keywords_per_label)]
        for i in range(m)
    ]
    subtype_keywords = [
        [keywords[i][s :: subtype_counts[i]] for s in range(subtype_counts[i])] for i in range(m)
    ]
    background = [f"bg{_letters(j, 3)}" for j in range(spec.background_vocab)]

    taxo = _build_taxonomy(spec, subtype_counts)
    label_ids = [taxo.labels.code_to_id[f"SYN{_letters(i, 2).upper()}"] for i in range(m)]
    cluster_of = np.array([taxo.grouping.label_to_cluster[label_ids[i]] for i in range(m)])

    q = (1.0 + np.arange(m)) ** (-spec.skew)
    q *= spec.mean_labels_per_doc / q.sum()
    q = np.minimum(q, 0.9)

    # Same-cluster co-occurrence comes from a shared per-cluster factor mixed
    # into independent draws. Solving the lift so marginals stay at q keeps
    # the configured mean labels/doc for every boost value; boost 0 is
    # exactly independent sampling.
    b = spec.cooccurrence_boost
    base_p = q * (1.0 - b)
    lift = np.clip(2.0 * (1.0 - (1.0 - q) / (1.0 - base_p)), 0.0, 1.0)

    def sample_doc(idx: int, prefix: str, mean_length: int, oov: float) -> Document:
        z = rng.random(spec.cluster_count) < 0.5
        y = rng.random(m) < base_p
        y |= z[cluster_of] & (rng.random(m) < lift)
        if not y.any():
            y[rng.choice(m, p=q / q.sum())] = True
        present = np.flatnonzero(y)
        chosen_subtype = {int(i): int(rng.integers(subtype_counts[i])) for i in present}
        codes = tuple(f"SYN{_letters(int(i), 2).upper()}.S{chosen_subtype[int(i)]:02d}" for i in present)

        length = max(5, int(rng.poisson(mean_length)))
        kw_mask = rng.random(length) < spec.keyword_share
        toks = []
        for pos in range(length):
            if kw_mask[pos]:
                lab = int(present[rng.integers(present.size)])
                pool = subtype_keywords[lab][chosen_subtype[lab]]
                toks.append(pool[rng.integers(len(pool))])
            else:
                toks.append(background[rng.integers(spec.background_vocab)])
        if oov > 0:
            swap = rng.random(length) < oov
            toks = [f"pp{t}" if s else t for t, s in zip(toks, swap)]
        return Document(
            id=f"{prefix}-{idx:05d}",
            text=" ".join(toks),
            codes=codes,
            label_ids=frozenset(int(label_ids[i]) for i in present),
            tokens=tuple(toks),
        )

    docs_in = [sample_doc(i, "syn", spec.mean_length_in_domain, 0.0) for i in range(spec.documents)]
    docs_shift = [
        sample_doc(i, "pps", spec.mean_length_shifted, spec.shift_oov_fraction)
        for i in range(spec.documents)
    ]
    return docs_in, docs_shift, taxo
