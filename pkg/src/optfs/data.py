"""Dataset ingestion: schema, vocabulary, encoding, splits, synthetic data.

Raw data is header-less TSV with the 0/1 label in column 0 followed by one
token per field in schema order.  Numeric fields are bucketed with
:func:`discretize_numeric` before counting; empty cells become ``<MISSING>``.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError, HashMismatchError

MISSING = "<MISSING>"
OOV = "<OOV>"
DEFAULT_MIN_COUNT = 10

ENCODED_MAGIC = b"OPTFSENC"
ENCODED_VERSION = 1


# --------------------------------------------------------------------------
# schema and numeric bucketing
# --------------------------------------------------------------------------

@dataclass
class DatasetSchema:
    fields: list[str]
    types: list[str]
    min_count: int = DEFAULT_MIN_COUNT
    squared_log: bool = True

    def __post_init__(self):
        if len(self.fields) != len(self.types):
            raise ConfigError("schema: fields and types differ in length")
        if not self.fields:
            raise ConfigError("schema: at least one field required")
        bad = [t for t in self.types if t not in ("categorical", "numeric")]
        if bad:
            raise ConfigError(f"schema: unknown field types {bad}")
        if self.min_count < 1:
            raise ConfigError("schema: min_count must be >= 1")

    @property
    def n(self) -> int:
        return len(self.fields)

    @classmethod
    def load(cls, path) -> "DatasetSchema":
        obj = json.loads(Path(path).read_text())
        fields = obj["fields"]
        if fields and isinstance(fields[0], dict):
            names = [f["name"] for f in fields]
            types = [f.get("type", "categorical") for f in fields]
        else:
            names = list(fields)
            types = list(obj.get("types", ["categorical"] * len(names)))
        return cls(names, types, int(obj.get("min_count", DEFAULT_MIN_COUNT)),
                   bool(obj.get("squared_log", True)))

    def save(self, path) -> None:
        obj = {
            "fields": [{"name": n, "type": t} for n, t in zip(self.fields, self.types)],
            "min_count": self.min_count,
            "squared_log": self.squared_log,
        }
        Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def discretize_numeric(x: float, squared: bool = True) -> str:
    """Bucket a numeric value: ``floor(log2(x) ** 2)`` for x > 2, else ``"1"``.

    With ``squared=False`` the bucket is ``floor(log2(x))``.
    """
    if not math.isfinite(x):
        raise DataError(f"non-finite numeric value {x!r}")
    if x <= 2:
        return "1"
    lg = math.log2(x)
    return str(math.floor(lg * lg if squared else lg))


def parse_rows(lines: Iterable[str], schema: DatasetSchema,
               start_row: int = 0) -> Iterator[tuple[int, list[str]]]:
    """Yield ``(label, tokens)`` from raw TSV lines, applying the schema."""
    n = schema.n
    for row, line in enumerate(lines, start=start_row):
        line = line.rstrip("\n").rstrip("\r")
        if not line:
            continue
        cols = line.split("\t")
        if len(cols) != n + 1:
            raise DataError(f"row {row}: expected {n + 1} columns, got {len(cols)}")
        label = _parse_label(cols[0], row)
        tokens = []
        for col, (raw, kind) in enumerate(zip(cols[1:], schema.types), start=1):
            if raw == "":
                tokens.append(MISSING)
            elif kind == "numeric":
                try:
                    value = float(raw)
                except ValueError:
                    raise DataError(f"row {row}, column {col}: not a number: {raw!r}") from None
                if not math.isfinite(value):
                    raise DataError(f"row {row}, column {col}: non-finite value {raw!r}")
                tokens.append(discretize_numeric(value, schema.squared_log))
            else:
                tokens.append(raw)
        yield label, tokens


def _parse_label(raw, row: int | None = None) -> int:
    try:
        value = float(raw)
    except (TypeError, ValueError):
        value = None
    if value not in (0.0, 1.0):
        where = f"row {row}: " if row is not None else ""
        raise DataError(f"{where}label must be 0 or 1, got {raw!r}")
    return int(value)


def read_tsv(path, schema: DatasetSchema) -> list[tuple[int, list[str]]]:
    with open(path) as fh:
        return list(parse_rows(fh, schema))


# --------------------------------------------------------------------------
# vocabulary
# --------------------------------------------------------------------------

@dataclass
class FeatureVocabulary:
    """Dense mapping (field, token) -> feature index in ``[0, m)``.

    Each field's indices form one contiguous block that starts with the
    field's OOV slot, followed by its frequent tokens in sorted order.
    """

    field_names: list[str]
    tokens: list[list[str]]
    counts: list[list[int]]
    min_count: int
    value_to_index: dict[tuple[int, str], int] = field(init=False, repr=False)
    field_of: np.ndarray = field(init=False, repr=False)
    oov_index: np.ndarray = field(init=False, repr=False)
    offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.tokens) != len(self.field_names) or len(self.counts) != len(self.tokens):
            raise DataError("vocabulary: per-field lists must match field count")
        self.value_to_index = {}
        field_of, oov, offsets = [], [], []
        idx = 0
        for i, toks in enumerate(self.tokens):
            if not toks or toks[0] != OOV:
                raise DataError(f"vocabulary: field {i} must start with its OOV slot")
            offsets.append(idx)
            oov.append(idx)
            for tok in toks:
                if (i, tok) in self.value_to_index:
                    raise DataError(f"vocabulary: duplicate token {tok!r} in field {i}")
                self.value_to_index[(i, tok)] = idx
                field_of.append(i)
                idx += 1
        self.field_of = np.asarray(field_of, dtype=np.int64)
        self.oov_index = np.asarray(oov, dtype=np.int64)
        self.offsets = np.asarray(offsets + [idx], dtype=np.int64)

    @property
    def n(self) -> int:
        return len(self.field_names)

    @property
    def m(self) -> int:
        return len(self.field_of)

    def cardinalities(self) -> list[int]:
        return [len(t) for t in self.tokens]

    def index(self, field_id: int, token: str) -> int:
        return self.value_to_index.get((field_id, token), int(self.oov_index[field_id]))

    def token_of(self, index: int) -> tuple[int, str]:
        f = int(self.field_of[index])
        return f, self.tokens[f][index - int(self.offsets[f])]

    def frequencies(self) -> dict[tuple[int, str], int]:
        return {(i, t): c for i, (toks, cnts) in enumerate(zip(self.tokens, self.counts))
                for t, c in zip(toks, cnts)}

    def to_tsv(self) -> str:
        lines = []
        for i, (toks, cnts) in enumerate(zip(self.tokens, self.counts)):
            base = int(self.offsets[i])
            for j, (tok, cnt) in enumerate(zip(toks, cnts)):
                lines.append(f"{i}\t{tok}\t{base + j}\t{cnt}")
        return "\n".join(lines) + "\n"

    @property
    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.field_names).encode())
        h.update(self.to_tsv().encode())
        return h.hexdigest()

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "vocab.tsv").write_text(self.to_tsv())
        header = {"m": self.m, "n": self.n, "hash": self.hash,
                  "field_names": self.field_names, "min_count": self.min_count}
        (directory / "vocab.json").write_text(json.dumps(header, indent=2) + "\n")

    @classmethod
    def load(cls, directory) -> "FeatureVocabulary":
        directory = Path(directory)
        header = json.loads((directory / "vocab.json").read_text())
        n = header["n"]
        tokens: list[list[str]] = [[] for _ in range(n)]
        counts: list[list[int]] = [[] for _ in range(n)]
        expected = 0
        for line in (directory / "vocab.tsv").read_text().splitlines():
            f, tok, idx, cnt = line.split("\t")
            if int(idx) != expected:
                raise DataError(f"vocab.tsv: index {idx} out of order (expected {expected})")
            expected += 1
            tokens[int(f)].append(tok)
            counts[int(f)].append(int(cnt))
        vocab = cls(header["field_names"], tokens, counts, header["min_count"])
        if vocab.hash != header["hash"] or vocab.m != header["m"]:
            raise HashMismatchError("vocab.tsv does not match the hash in vocab.json")
        return vocab


def build_vocabulary(rows: Iterable[tuple[int, Sequence[str]]], min_count: int,
                     field_names: Sequence[str] | None = None) -> FeatureVocabulary:
    """Count tokens per field and keep those seen at least ``min_count`` times.

    Everything rarer shares the field's OOV slot, whose stored count is the
    total count of the tokens it absorbed.
    """
    if min_count < 1:
        raise ConfigError("min_count must be >= 1")
    counters: list[Counter] | None = None
    n_rows = 0
    for row, (_, tokens) in enumerate(rows):
        if counters is None:
            counters = [Counter() for _ in tokens]
        elif len(tokens) != len(counters):
            raise DataError(f"row {row}: expected {len(counters)} fields, got {len(tokens)}")
        for c, tok in zip(counters, tokens):
            c[tok] += 1
        n_rows += 1
    if counters is None:
        raise DataError("cannot build a vocabulary from an empty stream")
    names = list(field_names) if field_names is not None else [f"f{i}" for i in range(len(counters))]
    if len(names) != len(counters):
        raise DataError("field_names does not match the row width")

    tokens, counts = [], []
    for c in counters:
        kept = sorted(t for t, k in c.items() if k >= min_count and t != OOV)
        absorbed = sum(k for t, k in c.items() if k < min_count or t == OOV)
        tokens.append([OOV] + kept)
        counts.append([absorbed] + [c[t] for t in kept])
    return FeatureVocabulary(names, tokens, counts, min_count)


# --------------------------------------------------------------------------
# encoding
# --------------------------------------------------------------------------

@dataclass
class Sample:
    label: int
    feature_indices: list[int]


def encode(row: tuple, vocab: FeatureVocabulary) -> Sample:
    label, tokens = row
    if len(tokens) != vocab.n:
        raise DataError(f"expected {vocab.n} tokens, got {len(tokens)}")
    label = _parse_label(label)
    return Sample(label, [vocab.index(i, tok) for i, tok in enumerate(tokens)])


def decode(sample: Sample, vocab: FeatureVocabulary) -> tuple[int, list[str]]:
    return sample.label, [vocab.token_of(k)[1] for k in sample.feature_indices]


@dataclass
class EncodedDataset:
    """Column-oriented encoded rows: ``labels`` (N,) and ``indices`` (N, n)."""

    labels: np.ndarray
    indices: np.ndarray
    vocab_hash: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 2 or self.indices.shape[0] != self.labels.shape[0]:
            raise DataError(f"encoded dataset: labels {self.labels.shape} vs indices {self.indices.shape}")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n(self) -> int:
        return int(self.indices.shape[1])

    def subset(self, rows) -> "EncodedDataset":
        return EncodedDataset(self.labels[rows], self.indices[rows], self.vocab_hash)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator["Batch"]:
        """Mini-batches in order (or shuffled by ``rng``); the last may be short."""
        if batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            rows = order[start:start + batch_size]
            yield Batch(self.labels[rows], self.indices[rows])

    def save(self, path) -> None:
        n = self.n
        rec = np.empty(len(self), dtype=np.dtype([("label", "<u1"), ("idx", "<u4", (n,))]))
        rec["label"] = self.labels
        rec["idx"] = self.indices
        hash_bytes = bytes.fromhex(self.vocab_hash) if self.vocab_hash else bytes(32)
        with open(path, "wb") as fh:
            fh.write(ENCODED_MAGIC)
            fh.write(struct.pack("<IIQ", ENCODED_VERSION, n, len(self)))
            fh.write(hash_bytes)
            fh.write(rec.tobytes())

    @classmethod
    def load(cls, path, expected_hash: str | None = None) -> "EncodedDataset":
        raw = Path(path).read_bytes()
        if raw[:8] != ENCODED_MAGIC:
            raise DataError(f"{path}: not an encoded dataset (bad magic)")
        version, n, count = struct.unpack_from("<IIQ", raw, 8)
        if version != ENCODED_VERSION:
            raise DataError(f"{path}: unsupported version {version}")
        vocab_hash = raw[24:56].hex()
        if expected_hash is not None and vocab_hash != expected_hash:
            raise HashMismatchError(f"{path}: encoded with a different vocabulary")
        dt = np.dtype([("label", "<u1"), ("idx", "<u4", (n,))])
        body = raw[56:]
        if len(body) != count * dt.itemsize:
            raise DataError(f"{path}: truncated record stream")
        rec = np.frombuffer(body, dtype=dt)
        return cls(rec["label"].copy(), rec["idx"].astype(np.int64), vocab_hash)


@dataclass
class Batch:
    labels: np.ndarray
    indices: np.ndarray

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])


def encode_rows(rows: Iterable[tuple[int, Sequence[str]]], vocab: FeatureVocabulary) -> EncodedDataset:
    labels, idx = [], []
    for label, tokens in rows:
        s = encode((label, tokens), vocab)
        labels.append(s.label)
        idx.append(s.feature_indices)
    idx_arr = np.asarray(idx, dtype=np.int64).reshape(len(labels), vocab.n)
    return EncodedDataset(np.asarray(labels, dtype=np.uint8), idx_arr, vocab.hash)


def split_assignments(num_rows: int, seed: int) -> np.ndarray:
    """0/1/2 (train/valid/test) per row, 8:1:1 by a seeded hash of the row number."""
    out = np.empty(num_rows, dtype=np.int8)
    prefix = f"{seed}:".encode()
    for i in range(num_rows):
        h = hashlib.blake2b(prefix + str(i).encode(), digest_size=8).digest()
        bucket = int.from_bytes(h, "little") % 10
        out[i] = 0 if bucket < 8 else (1 if bucket == 8 else 2)
    return out


# --------------------------------------------------------------------------
# synthetic data with a planted informative set
# --------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    n_fields: int = 4
    features_per_field: int = 50
    informative_per_field: int = 5
    main_effect: tuple[float, float] = (1.0, 2.0)
    pair_effect: float = 1.0
    bias: float = -0.5
    n_train: int = 50_000
    n_valid: int = 10_000
    n_test: int = 10_000
    zipf_exponent: float = 0.0

    def __post_init__(self):
        if self.zipf_exponent < 0:
            raise ConfigError("synthetic spec: zipf_exponent must be >= 0")
        self.main_effect = tuple(self.main_effect)
        if self.n_fields < 1 or self.features_per_field < 1:
            raise ConfigError("synthetic spec: need at least one field and one feature per field")
        if not 0 <= self.informative_per_field <= self.features_per_field:
            raise ConfigError(
                f"synthetic spec: informative_per_field={self.informative_per_field} "
                f"exceeds features_per_field={self.features_per_field}"
            )

    @classmethod
    def from_json(cls, obj: dict) -> "SyntheticSpec":
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(f"synthetic spec: {exc}") from None

    def to_json(self) -> dict:
        d = asdict(self)
        d["main_effect"] = list(self.main_effect)
        return d


@dataclass
class SyntheticData:
    train: list[tuple[int, list[str]]]
    valid: list[tuple[int, list[str]]]
    test: list[tuple[int, list[str]]]
    informative: list[tuple[int, str]]
    main_effects: dict[tuple[int, str], float]
    pair_effects: dict[tuple[tuple[int, str], tuple[int, str]], float]

    def field_names(self) -> list[str]:
        n = len(self.train[0][1]) if self.train else 0
        return [f"field{i}" for i in range(n)]


def synthetic_token(field_id: int, value: int) -> str:
    return f"f{field_id}_v{value:03d}"


def generate_synthetic(spec: SyntheticSpec, seed: int) -> SyntheticData:
    """Rows with independently drawn feature values and a logistic label model.

    Only the planted informative features carry main effects and pairwise
    (cross-field) effects; all other feature values have zero effect.
    """
    rng = np.random.default_rng(seed)
    nf, fpf, k = spec.n_fields, spec.features_per_field, spec.informative_per_field
    informative_values = [np.sort(rng.choice(fpf, size=k, replace=False)) for _ in range(nf)]

    main = np.zeros((nf, fpf))
    lo, hi = spec.main_effect
    for f in range(nf):
        for v in informative_values[f]:
            main[f, v] = rng.choice([-1.0, 1.0]) * rng.uniform(lo, hi)

    pair = {}
    for f1 in range(nf):
        for f2 in range(f1 + 1, nf):
            mat = np.zeros((fpf, fpf))
            block = rng.normal(0.0, spec.pair_effect, size=(k, k)) if spec.pair_effect else np.zeros((k, k))
            mat[np.ix_(informative_values[f1], informative_values[f2])] = block
            pair[(f1, f2)] = mat

    total = spec.n_train + spec.n_valid + spec.n_test
    # value v of every field is drawn with probability proportional to (v + 1) ** -zipf_exponent
    weights = np.arange(1, fpf + 1, dtype=np.float64) ** -spec.zipf_exponent
    values = rng.choice(fpf, size=(total, nf), p=weights / weights.sum())
    logit = np.full(total, spec.bias)
    for f in range(nf):
        logit += main[f, values[:, f]]
    for (f1, f2), mat in pair.items():
        logit += mat[values[:, f1], values[:, f2]]
    prob = 1.0 / (1.0 + np.exp(-logit))
    labels = (rng.random(total) < prob).astype(int)

    rows = [(int(labels[r]), [synthetic_token(f, int(values[r, f])) for f in range(nf)])
            for r in range(total)]
    a, b = spec.n_train, spec.n_train + spec.n_valid

    informative = [(f, synthetic_token(f, int(v))) for f in range(nf) for v in informative_values[f]]
    main_effects = {(f, synthetic_token(f, int(v))): float(main[f, v])
                    for f in range(nf) for v in informative_values[f]}
    pair_effects = {}
    for (f1, f2), mat in pair.items():
        for v1 in informative_values[f1]:
            for v2 in informative_values[f2]:
                if mat[v1, v2]:
                    pair_effects[((f1, synthetic_token(f1, int(v1))),
                                  (f2, synthetic_token(f2, int(v2))))] = float(mat[v1, v2])
    return SyntheticData(rows[:a], rows[a:b], rows[b:], informative, main_effects, pair_effects)


def write_tsv(path, rows: Iterable[tuple[int, Sequence[str]]]) -> None:
    with open(path, "w") as fh:
        for label, tokens in rows:
            fh.write(f"{label}\t" + "\t".join(tokens) + "\n")


@dataclass
class PreparedData:
    vocab: FeatureVocabulary
    train: EncodedDataset
    valid: EncodedDataset
    test: EncodedDataset


def prepare_synthetic(data: SyntheticData, min_count: int = 1) -> PreparedData:
    """Vocabulary from the training rows, then encode all three splits."""
    vocab = build_vocabulary(data.train, min_count, data.field_names())
    return PreparedData(vocab, encode_rows(data.train, vocab),
                        encode_rows(data.valid, vocab), encode_rows(data.test, vocab))


def informative_indices(data: SyntheticData, vocab: FeatureVocabulary) -> np.ndarray:
    return np.asarray(sorted(vocab.value_to_index[key] for key in data.informative
                             if key in vocab.value_to_index), dtype=np.int64)
