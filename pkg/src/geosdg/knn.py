"""Exact k-nearest-neighbour classification over frozen embeddings."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DegenerateIndex, FormatError, InvalidValue, ShapeError

PAPER_KS = (5, 10, 50, 100, 200)
EMBEDDING_PREFIX = ["row_id", "task", "label", "dim"]
SWEEP_HEADER = ["k", "accuracy", "precision", "recall", "f1"]


@dataclass(frozen=True)
class KnnIndex:
    embeddings: np.ndarray          # (n, dim) float32
    labels: np.ndarray              # (n,) int 0/1
    row_ids: tuple
    task: str = ""
    degenerate: bool = False
    _rank: np.ndarray = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def build_index(embeddings, labels, task: str = "", row_ids: Sequence | None = None,
                normalize: bool = False) -> KnnIndex:
    """Freeze embeddings and binary labels into a queryable index.

    ``row_ids`` default to insertion positions; they must be unique and
    mutually comparable since ties resolve to the smallest id.
    """
    emb = np.asarray(embeddings, dtype=np.float32)
    lab = np.asarray(labels).astype(np.int64)
    if emb.ndim != 2 or emb.shape[0] == 0:
        raise ShapeError(f"embeddings must be a non-empty 2-D array, got {emb.shape}")
    if lab.shape != (emb.shape[0],):
        raise ShapeError(f"{lab.shape[0] if lab.ndim else 0} labels for {emb.shape[0]} rows")
    if not np.isin(lab, (0, 1)).all():
        raise InvalidValue("labels must be binary")
    if normalize:
        norms = np.linalg.norm(emb.astype(np.float64), axis=1, keepdims=True)
        emb = (emb / np.maximum(norms, 1e-12)).astype(np.float32)
    ids = tuple(range(len(lab))) if row_ids is None else tuple(row_ids)
    if len(ids) != len(lab) or len(set(ids)) != len(ids):
        raise ShapeError("row_ids must be unique, one per row")
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    rank = np.empty(len(ids), dtype=np.int64)
    rank[order] = np.arange(len(ids))
    degenerate = len(np.unique(lab)) < 2
    if degenerate:
        warnings.warn(f"index for task {task!r} holds a single class", DegenerateIndex, stacklevel=2)
    emb.setflags(write=False)
    lab.setflags(write=False)
    return KnnIndex(emb, lab, ids, task, degenerate, rank)


def squared_distances(index: KnnIndex, query) -> np.ndarray:
    """Squared Euclidean distances from float32 inputs, accumulated in float64."""
    q = np.asarray(query, dtype=np.float32)
    if q.shape[-1] != index.dim:
        raise ShapeError(f"query dim {q.shape[-1]} != index dim {index.dim}")
    diff = index.embeddings.astype(np.float64) - q.astype(np.float64)
    return np.einsum("ij,ij->i", diff, diff)


@dataclass(frozen=True)
class Neighbors:
    label: int
    votes: dict[int, int]
    ids: tuple
    distances: np.ndarray


def classify(index: KnnIndex, query, k: int) -> Neighbors:
    """Majority vote among the ``k`` nearest rows.

    Distance ties at the k boundary admit the smaller row id. Vote ties go to
    the class of the nearest neighbour (smallest row id among equidistant
    nearest rows).
    """
    if not 1 <= k <= len(index):
        raise ConfigError(f"k={k} outside [1, {len(index)}]")
    d2 = squared_distances(index, query)
    order = np.lexsort((index._rank, d2))[:k]
    lab = index.labels[order]
    ones = int(lab.sum())
    votes = {0: k - ones, 1: ones}
    if votes[1] != votes[0]:
        label = int(votes[1] > votes[0])
    else:
        label = int(lab[0])
    return Neighbors(label, votes, tuple(index.row_ids[i] for i in order), np.sqrt(d2[order]))


def predict(index: KnnIndex, queries, k: int) -> np.ndarray:
    """Vectorised :func:`classify` labels for a query matrix."""
    q = np.asarray(queries, dtype=np.float32)
    if q.ndim != 2:
        raise ShapeError("queries must be 2-D")
    if not 1 <= k <= len(index):
        raise ConfigError(f"k={k} outside [1, {len(index)}]")
    if q.shape[1] != index.dim:
        raise ShapeError(f"query dim {q.shape[1]} != index dim {index.dim}")
    x = index.embeddings.astype(np.float64)
    out = np.empty(len(q), dtype=np.int64)
    for start in range(0, len(q), 256):
        block = q[start:start + 256].astype(np.float64)
        diff = block[:, None, :] - x[None, :, :]
        d2 = np.einsum("qij,qij->qi", diff, diff)
        for r in range(len(block)):
            order = np.lexsort((index._rank, d2[r]))[:k]
            lab = index.labels[order]
            ones = int(lab.sum())
            out[start + r] = int(lab[0]) if 2 * ones == k else int(2 * ones > k)
    return out


# --- metrics -----------------------------------------------------------------

@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    k: int | None = None
    task: str = ""
    flags: tuple[str, ...] = ()


def evaluate(predictions, truth, k: int | None = None, task: str = "") -> MetricsReport:
    """Binary metrics with "has access" (1) as the positive class.

    Zero denominators report 0 and add a ``zero_denominator:<metric>`` flag.
    """
    p = np.asarray(predictions).astype(np.int64)
    t = np.asarray(truth).astype(np.int64)
    if p.shape != t.shape:
        raise ShapeError(f"{p.shape} predictions vs {t.shape} labels")
    if not (np.isin(p, (0, 1)).all() and np.isin(t, (0, 1)).all()):
        raise InvalidValue("predictions and labels must be binary")
    tp = int(((p == 1) & (t == 1)).sum())
    fp = int(((p == 1) & (t == 0)).sum())
    tn = int(((p == 0) & (t == 0)).sum())
    fn = int(((p == 0) & (t == 1)).sum())
    flags = []

    def ratio(num, den, name):
        if den == 0:
            flags.append(f"zero_denominator:{name}")
            return 0.0
        return num / den

    total = tp + fp + tn + fn
    acc = ratio(tp + tn, total, "accuracy")
    prec = ratio(tp, tp + fp, "precision")
    rec = ratio(tp, tp + fn, "recall")
    f1 = ratio(2 * prec * rec, prec + rec, "f1")
    return MetricsReport(acc, prec, rec, f1, tp, fp, tn, fn, k, task, tuple(flags))


@dataclass(frozen=True)
class SweepResult:
    reports: list[MetricsReport]
    best_k: int

    def table(self) -> list[tuple[int, float, float]]:
        return [(r.k, r.accuracy, r.f1) for r in self.reports]


def sweep_k(index: KnnIndex, queries, truth, ks: Sequence[int] = PAPER_KS) -> SweepResult:
    """Evaluate each k; best k maximises accuracy, then f1, then prefers smaller k."""
    q = np.asarray(queries)
    if len(q) == 0:
        raise InvalidValue("validation set is empty")
    reports = [evaluate(predict(index, q, k), truth, k=k, task=index.task) for k in ks]
    best = min(reports, key=lambda r: (-r.accuracy, -r.f1, r.k))
    return SweepResult(reports, best.k)


def sweep_csv(result: SweepResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in result.reports:
        w.writerow([r.k, f"{r.accuracy:.6f}", f"{r.precision:.6f}", f"{r.recall:.6f}", f"{r.f1:.6f}"])
    return buf.getvalue()


# --- embedding store ---------------------------------------------------------

@dataclass
class EmbeddingTable:
    row_ids: list[str]
    tasks: list[str]
    labels: list[int | None]
    embeddings: np.ndarray

    def __len__(self):
        return len(self.row_ids)

    def select(self, task: str) -> "EmbeddingTable":
        keep = [i for i, t in enumerate(self.tasks) if t == task]
        return EmbeddingTable([self.row_ids[i] for i in keep], [self.tasks[i] for i in keep],
                              [self.labels[i] for i in keep], self.embeddings[keep])

    def labeled(self) -> "EmbeddingTable":
        keep = [i for i, lab in enumerate(self.labels) if lab is not None]
        return EmbeddingTable([self.row_ids[i] for i in keep], [self.tasks[i] for i in keep],
                              [self.labels[i] for i in keep], self.embeddings[keep])

    def index(self, task: str | None = None, normalize: bool = False) -> KnnIndex:
        t = self.labeled()
        return build_index(t.embeddings, t.labels, task or (t.tasks[0] if t.tasks else ""),
                           row_ids=t.row_ids, normalize=normalize)


def embeddings_csv(table: EmbeddingTable) -> str:
    dim = table.embeddings.shape[1] if table.embeddings.ndim == 2 else 0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EMBEDDING_PREFIX + [f"e_{i}" for i in range(dim)])
    for rid, task, lab, e in zip(table.row_ids, table.tasks, table.labels, table.embeddings):
        w.writerow([rid, task, "" if lab is None else lab, dim] + [repr(float(v)) for v in e])
    return buf.getvalue()


def parse_embeddings(text: str, source: str = "embeddings", dim: int | None = None) -> EmbeddingTable:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or header[:4] != EMBEDDING_PREFIX:
        raise FormatError(f"{source}: header must start with {','.join(EMBEDDING_PREFIX)}", row=1)
    hdim = len(header) - 4
    if header[4:] != [f"e_{i}" for i in range(hdim)]:
        raise FormatError(f"{source}: embedding columns must be e_0..e_{{dim-1}}", row=1)
    ids, tasks, labels, rows = [], [], [], []
    for i, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            if len(row) != len(header) or int(row[3]) != hdim:
                raise ValueError("dim column disagrees with the row width")
            lab = None if row[2] == "" else int(row[2])
            if lab not in (None, 0, 1):
                raise ValueError("label must be 0, 1 or blank")
            vec = [float(v) for v in row[4:]]
        except ValueError as e:
            raise FormatError(f"{source}: malformed row {i}: {e}", row=i) from None
        ids.append(row[0])
        tasks.append(row[1])
        labels.append(lab)
        rows.append(vec)
    emb = np.array(rows, dtype=np.float32).reshape(len(rows), hdim)
    return EmbeddingTable(ids, tasks, labels, emb)


def read_embeddings(path) -> EmbeddingTable:
    return parse_embeddings(Path(path).read_text(), str(path))
