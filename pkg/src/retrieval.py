"""All-vs-all cosine retrieval of volumes by subtype."""

import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from src.utils.constants import EMBEDDING_FORMAT_VERSION, GALLERY_MODES, RETRIEVAL_KS
from src.utils.errors import RetrievalError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)


@dataclass
class EmbeddingRecord:
    """One volume's embedding and multi-hot subtype labels."""

    volume_id: str
    embedding: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.embedding.ndim != 1 or not np.isfinite(self.embedding).all():
            raise RetrievalError(f"Embedding of '{self.volume_id}' must be a finite vector")


@dataclass
class EmbeddingSet:
    """Embedding records sharing one dimension and one subtype list."""

    subtypes: List[str]
    records: List[EmbeddingRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        dims = {r.embedding.shape[0] for r in self.records}
        if len(dims) > 1:
            raise RetrievalError(f"Embedding lengths differ across the set: {sorted(dims)}")
        for r in self.records:
            if r.labels.shape != (len(self.subtypes),):
                raise RetrievalError(
                    f"'{r.volume_id}' has {r.labels.shape[0]} labels for {len(self.subtypes)} subtypes"
                )

    @property
    def dim(self) -> int:
        return int(self.records[0].embedding.shape[0]) if self.records else 0

    def label_matrix(self) -> np.ndarray:
        return np.stack([r.labels for r in self.records]) if self.records else np.zeros((0, len(self.subtypes)))

    def to_frame(self, wide: bool = False) -> pd.DataFrame:
        """Table view; ``wide`` expands embeddings and labels into scalar columns."""
        if not wide:
            return pd.DataFrame(
                {
                    "volume_id": [r.volume_id for r in self.records],
                    "embedding": [r.embedding.tolist() for r in self.records],
                    "labels": [r.labels.tolist() for r in self.records],
                }
            )
        frame = pd.DataFrame(
            np.stack([r.embedding for r in self.records]), columns=[f"e{i}" for i in range(self.dim)]
        )
        for j, subtype in enumerate(self.subtypes):
            frame[subtype] = [int(r.labels[j]) for r in self.records]
        frame.insert(0, "volume_id", [r.volume_id for r in self.records])
        return frame


def save_embedding_set(es: EmbeddingSet, path: Union[str, Path]) -> Path:
    """Header line {format_version, dim, count, subtypes} then one JSON record per line."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": EMBEDDING_FORMAT_VERSION,
        "dim": es.dim,
        "count": len(es.records),
        "subtypes": es.subtypes,
    }
    body = es.to_frame().to_json(orient="records", lines=True) if es.records else ""
    with open(out, "w") as f:
        f.write(json.dumps(header) + "\n")
        f.write(body if body.endswith("\n") or not body else body + "\n")
    return out


def export_embedding_parquet(es: EmbeddingSet, path: Union[str, Path]) -> Path:
    """Wide table (one column per dimension and per subtype) for external projection tools."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    es.to_frame(wide=True).to_parquet(out, engine="pyarrow", index=False)
    return out


def load_embedding_set(path: Union[str, Path]) -> EmbeddingSet:
    """
    Read an embedding set file.

    Raises:
        RetrievalError: On malformed header, count or dimension mismatch
    """
    src = Path(path)
    try:
        text = src.read_text()
    except OSError as e:
        raise RetrievalError(f"Cannot read embedding set {src}: {e}")
    header_line, _, body = text.partition("\n")
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as e:
        raise RetrievalError(f"Malformed embedding set header in {src}: {e}")
    if header.get("format_version") != EMBEDDING_FORMAT_VERSION:
        raise RetrievalError(f"Unsupported embedding format_version {header.get('format_version')!r}")

    records = []
    if body.strip():
        try:
            frame = pd.read_json(io.StringIO(body), lines=True, dtype={"volume_id": str})
        except ValueError as e:
            raise RetrievalError(f"Malformed embedding records in {src}: {e}")
        records = [
            EmbeddingRecord(str(row.volume_id), np.asarray(row.embedding), np.asarray(row.labels))
            for row in frame.itertuples(index=False)
        ]
    es = EmbeddingSet(subtypes=list(header["subtypes"]), records=records)
    if len(records) != header.get("count") or (records and es.dim != header.get("dim")):
        raise RetrievalError(
            f"{src}: header declares {header.get('count')} x {header.get('dim')}, found {len(records)} x {es.dim}"
        )
    return es


class RetrievalIndex:
    """Row-normalized embedding matrix; inner products are cosine similarities."""

    def __init__(self, ids: Sequence[str], matrix: np.ndarray):
        self.ids = [str(i) for i in ids]
        self.matrix = matrix
        self._ids_array = np.array(self.ids)
        self._row = {volume_id: i for i, volume_id in enumerate(self.ids)}
        if len(self._row) != len(self.ids):
            raise RetrievalError("Duplicate volume_id in retrieval index")

    def __len__(self) -> int:
        return len(self.ids)

    def row_of(self, volume_id: str) -> int:
        try:
            return self._row[volume_id]
        except KeyError:
            raise RetrievalError(f"Unknown query id '{volume_id}'")

    def ranking(self, row: int, gallery: Optional[np.ndarray] = None) -> np.ndarray:
        """
        Rows ranked by descending similarity to ``row``, itself excluded.

        Ties are broken by ascending volume_id. ``gallery`` optionally
        restricts the candidate rows with a boolean mask.
        """
        sims = self.matrix @ self.matrix[row]
        candidates = np.ones(len(self), dtype=bool) if gallery is None else gallery.copy()
        candidates[row] = False
        rows = np.flatnonzero(candidates)
        order = np.lexsort((self._ids_array[rows], -sims[rows]))
        return rows[order]


def build_index(records: Sequence[EmbeddingRecord]) -> RetrievalIndex:
    """
    L2-normalize every embedding.

    Raises:
        RetrievalError: With fewer than two records or a zero-norm embedding
    """
    if len(records) < 2:
        raise RetrievalError(f"Retrieval index needs at least 2 records, got {len(records)}")
    matrix = np.stack([r.embedding for r in records]).astype(np.float64)
    norms = np.linalg.norm(matrix, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise RetrievalError(f"Zero-norm embedding for '{records[int(zero[0])].volume_id}'")
    return RetrievalIndex([r.volume_id for r in records], matrix / norms[:, None])


def query(index: RetrievalIndex, query_id: str, k: int) -> List[str]:
    """Top-k most similar ids, the query excluded."""
    if not 1 <= k <= len(index) - 1:
        raise RetrievalError(f"k must lie in [1, {len(index) - 1}], got {k}")
    return [index.ids[i] for i in index.ranking(index.row_of(query_id))[:k]]


def query_ap(relevance: Sequence[bool], n_relevant: Optional[int] = None) -> Optional[float]:
    """
    Mean precision at the ranks of relevant hits; None when nothing is relevant.

    Args:
        relevance: Ranked relevance flags over the whole gallery
        n_relevant: Total relevant items R (defaults to the hits in ``relevance``)
    """
    rel = np.asarray(relevance, dtype=bool)
    total = int(rel.sum()) if n_relevant is None else int(n_relevant)
    if total == 0:
        return None
    hit_ranks = np.flatnonzero(rel) + 1
    precision_at_hits = np.arange(1, hit_ranks.size + 1) / hit_ranks
    return float(precision_at_hits.sum() / total)


@dataclass
class SubtypeResult:
    """Retrieval metrics for one subtype."""

    subtype: str
    mean_ap: Optional[float]
    precision: Dict[int, float] = field(default_factory=dict)
    query_aps: Dict[str, float] = field(default_factory=dict)
    n_queries: int = 0
    n_skipped: int = 0

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"mAP": self.mean_ap}
        out.update({f"P@{k}": v for k, v in sorted(self.precision.items())})
        out["n_queries"] = self.n_queries
        out["n_skipped"] = self.n_skipped
        return out


def _gallery_mask(es: EmbeddingSet, gallery: str) -> np.ndarray:
    if gallery not in GALLERY_MODES:
        raise RetrievalError(f"Unknown gallery mode '{gallery}'. Must be one of {sorted(GALLERY_MODES)}")
    labels = es.label_matrix()
    if gallery == "positives":
        return labels.sum(axis=1) > 0
    return np.ones(len(es.records), dtype=bool)


def _subtype_column(es: EmbeddingSet, subtype: str) -> np.ndarray:
    if subtype not in es.subtypes:
        raise RetrievalError(f"Unknown subtype '{subtype}'. Known: {es.subtypes}")
    return es.label_matrix()[:, es.subtypes.index(subtype)].astype(bool)


def evaluate_subtype(
    es: EmbeddingSet,
    subtype: str,
    ks: Sequence[int] = RETRIEVAL_KS,
    gallery: str = "all",
    index: Optional[RetrievalIndex] = None,
) -> SubtypeResult:
    """
    mAP and mean Precision@K where every positive queries the gallery minus itself.

    Raises:
        RetrievalError: With fewer than two positives or a gallery no larger than K
    """
    positive = _subtype_column(es, subtype)
    if positive.sum() < 2:
        raise RetrievalError(f"Subtype '{subtype}' needs at least 2 positives, has {int(positive.sum())}")
    index = index or build_index(es.records)
    mask = _gallery_mask(es, gallery)

    result = SubtypeResult(subtype=subtype, mean_ap=None)
    hits_at_k: Dict[int, List[float]] = {k: [] for k in ks}
    for row in np.flatnonzero(positive):
        ranked = index.ranking(int(row), mask)
        too_small = [k for k in ks if k > len(ranked)]
        if too_small:
            raise RetrievalError(f"Gallery of {len(ranked)} is too small for K={too_small[0]}")
        relevance = positive[ranked]
        ap = query_ap(relevance)
        if ap is None:
            result.n_skipped += 1
            continue
        result.query_aps[index.ids[row]] = ap
        for k in ks:
            hits_at_k[k].append(float(relevance[:k].sum()) / k)

    result.n_queries = len(result.query_aps)
    if result.n_skipped:
        logger.warning(f"Subtype '{subtype}': skipped {result.n_skipped} quer(ies) with no relevant gallery item")
    if result.query_aps:
        result.mean_ap = float(np.mean(list(result.query_aps.values())))
        result.precision = {k: float(np.mean(v)) for k, v in hits_at_k.items()}
    return result


def retrieval_map(es: EmbeddingSet, subtype: str, gallery: str = "all") -> SubtypeResult:
    return evaluate_subtype(es, subtype, ks=(), gallery=gallery)


def precision_at_k(
    es: EmbeddingSet, subtype: str, ks: Sequence[int] = RETRIEVAL_KS, gallery: str = "all"
) -> Dict[int, float]:
    return evaluate_subtype(es, subtype, ks=ks, gallery=gallery).precision


def evaluate_retrieval(
    es: EmbeddingSet,
    subtypes: Optional[Sequence[str]] = None,
    ks: Sequence[int] = RETRIEVAL_KS,
    gallery: str = "all",
) -> Dict[str, Dict[str, Any]]:
    """Report {subtype: {mAP, P@K..., n_queries, n_skipped}} over the requested subtypes."""
    requested = list(subtypes or es.subtypes)
    unknown = [s for s in requested if s not in es.subtypes]
    if unknown:
        raise RetrievalError(f"Unknown subtype(s) {unknown}. Known: {es.subtypes}")
    index = build_index(es.records)
    report: Dict[str, Dict[str, Any]] = {}
    for subtype in requested:
        try:
            report[subtype] = evaluate_subtype(es, subtype, ks, gallery, index).to_dict()
        except RetrievalError as e:
            logger.warning(f"Skipping subtype '{subtype}': {e}")
            report[subtype] = {"mAP": None, **{f"P@{k}": None for k in ks}, "n_queries": 0,
                               "n_skipped": int(_subtype_column(es, subtype).sum()), "error": str(e)}
    return report
