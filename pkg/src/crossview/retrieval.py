"""Descriptor index, cosine ranking, and retrieval metrics.

Descriptors are unit vectors, so cosine similarity is a plain dot product.
The index is immutable after construction; ranking sorts by descending
similarity with ties broken by ascending instance id so results are
reproducible across runs and platforms.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VIEW_DRONE = 0
VIEW_SATELLITE = 1

DESCRIPTOR_MAGIC = b"JRNG"
DESCRIPTOR_VERSION = 1

_NORM_WARN_TOLERANCE = 1e-3


@dataclass
class DescriptorIndex:
    ids: np.ndarray  # [N] int64
    views: np.ndarray  # [N] uint8
    vectors: np.ndarray  # [N, dim] float64, rows unit norm
    dim: int
    warnings: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.ids.shape[0])


def build_index(descriptors) -> DescriptorIndex:
    """Index a sequence of (id, view, vector) triples.

    Vectors are re-normalized on ingest; a norm further than 1e-3 from 1 is
    recorded as a warning on the index, and a zero vector is an error.
    """
    ids: list[int] = []
    views: list[int] = []
    rows: list[np.ndarray] = []
    warnings: list[str] = []
    dim = None
    for position, (ident, view, vector) in enumerate(descriptors):
        vec = np.asarray(vector, dtype=np.float64)
        if vec.ndim != 1:
            raise ValueError(f"descriptor {position} (id {ident}): expected a 1-D vector, got shape {vec.shape}")
        if dim is None:
            dim = vec.shape[0]
        elif vec.shape[0] != dim:
            raise ValueError(
                f"descriptor {position} (id {ident}): length {vec.shape[0]} does not match index dim {dim}"
            )
        norm = float(np.linalg.norm(vec))
        if norm < 1e-12:
            raise ValueError(f"descriptor {position} (id {ident}): zero vector cannot be normalized")
        if abs(norm - 1.0) > _NORM_WARN_TOLERANCE:
            warnings.append(f"descriptor {position} (id {ident}): norm {norm:.6g} re-normalized")
        ids.append(int(ident))
        views.append(int(view))
        rows.append(vec / norm)
    if dim is None:
        dim = 0
    return DescriptorIndex(
        ids=np.array(ids, dtype=np.int64),
        views=np.array(views, dtype=np.uint8),
        vectors=np.array(rows, dtype=np.float64).reshape(len(rows), dim),
        dim=dim,
        warnings=warnings,
    )


def _ordering(index: DescriptorIndex, query) -> tuple[np.ndarray, np.ndarray]:
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (index.dim,):
        raise ValueError(f"query shape {q.shape} does not match index dim {index.dim}")
    sims = index.vectors @ q
    return np.lexsort((index.ids, -sims)), sims


def rank(index: DescriptorIndex, query, k: int) -> list[tuple[int, float]]:
    """Top-k gallery entries for one query, as (id, similarity) pairs."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(index) == 0:
        return []
    order, sims = _ordering(index, query)
    return [(int(index.ids[i]), float(sims[i])) for i in order[: min(k, len(index))]]


def recall_at_k(rankings, relevant_sets, k: int) -> float:
    """Fraction of queries with at least one relevant id in the top k."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(rankings) != len(relevant_sets):
        raise ValueError(f"{len(rankings)} rankings but {len(relevant_sets)} relevant sets")
    if not rankings:
        raise ValueError("recall needs at least one query")
    hits = 0
    for i, (ranking, relevant) in enumerate(zip(rankings, relevant_sets)):
        if not relevant:
            raise ValueError(f"query {i} has an empty relevant set")
        if any(ident in relevant for ident in ranking[:k]):
            hits += 1
    return hits / len(rankings)


def average_precision(ranking, relevant_set) -> float:
    """Mean of precision@r over the ranks r where a relevant id appears."""
    if not relevant_set:
        raise ValueError("average precision needs a non-empty relevant set")
    relevant = set(relevant_set)
    found = 0
    total = 0.0
    for position, ident in enumerate(ranking, start=1):
        if ident in relevant:
            found += 1
            total += found / position
    return total / len(relevant)


def mean_ap(rankings, relevant_sets) -> float:
    if len(rankings) != len(relevant_sets):
        raise ValueError(f"{len(rankings)} rankings but {len(relevant_sets)} relevant sets")
    if not rankings:
        raise ValueError("mean AP needs at least one query")
    return float(
        np.mean([average_precision(r, s) for r, s in zip(rankings, relevant_sets)])
    )


def evaluate_retrieval(queries: DescriptorIndex, gallery: DescriptorIndex, ks=(1, 5, 10)) -> dict[str, float]:
    """R@K for each K plus mean AP, matching query ids against gallery ids.

    Items are keyed by gallery position, so several gallery entries sharing
    one instance id count as separate relevant items (the satellite-to-drone
    direction, where each instance has many drone views).
    """
    if queries.dim != gallery.dim:
        raise ValueError(f"query dim {queries.dim} does not match gallery dim {gallery.dim}")
    if len(queries) == 0:
        raise ValueError("evaluation needs at least one query")
    rankings = []
    relevant_sets = []
    for i in range(len(queries)):
        ident = int(queries.ids[i])
        relevant = {int(p) for p in np.flatnonzero(gallery.ids == ident)}
        if not relevant:
            raise ValueError(f"query id {ident} has no match in the gallery")
        order, _ = _ordering(gallery, queries.vectors[i])
        rankings.append(order.tolist())
        relevant_sets.append(relevant)
    out = {f"R@{k}": recall_at_k(rankings, relevant_sets, k) for k in ks}
    out["AP"] = mean_ap(rankings, relevant_sets)
    return out


# ---------------------------------------------------------------------------
# descriptor files


def save_descriptors(path, descriptors) -> None:
    """Write (id, view, vector) triples to a little-endian binary file."""
    path = Path(path)
    entries = []
    dim = None
    for ident, view, vector in descriptors:
        vec = np.asarray(vector, dtype=np.float64)
        if dim is None:
            dim = vec.shape[0]
        elif vec.shape != (dim,):
            raise ValueError(f"descriptor id {ident}: shape {vec.shape} does not match dim {dim}")
        if not 0 <= int(ident) < 2**32:
            raise ValueError(f"descriptor id {ident} does not fit in u32")
        if not 0 <= int(view) < 2**8:
            raise ValueError(f"view code {view} does not fit in u8")
        entries.append((int(ident), int(view), vec))
    if dim is None:
        dim = 0
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(DESCRIPTOR_MAGIC)
        fh.write(struct.pack("<III", DESCRIPTOR_VERSION, len(entries), dim))
        for ident, view, vec in entries:
            fh.write(struct.pack("<IB", ident, view))
            fh.write(vec.astype("<f4").tobytes())


def load_descriptors(path) -> list[tuple[int, int, np.ndarray]]:
    """Read a descriptor file back as (id, view, vector) triples."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != DESCRIPTOR_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 16:
        raise ValueError(f"{path}: truncated header")
    version, count, dim = struct.unpack_from("<III", blob, 4)
    if version != DESCRIPTOR_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    entry_size = 5 + 4 * dim
    expected = 16 + count * entry_size
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {count} entries, got {len(blob)}")
    out = []
    offset = 16
    for _ in range(count):
        ident, view = struct.unpack_from("<IB", blob, offset)
        vec = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset + 5).astype(np.float64)
        out.append((ident, view, vec))
        offset += entry_size
    return out


# ---------------------------------------------------------------------------
# reports


def format_report(rows) -> str:
    """Fixed-width text table for (task, metric, value) rows."""
    widths = [max(len("task"), *(len(r[0]) for r in rows)) if rows else len("task"),
              max(len("metric"), *(len(r[1]) for r in rows)) if rows else len("metric")]
    lines = [f"{'task':<{widths[0]}}  {'metric':<{widths[1]}}  value"]
    for task, metric, value in rows:
        lines.append(f"{task:<{widths[0]}}  {metric:<{widths[1]}}  {value:.4f}")
    return "\n".join(lines) + "\n"


def write_report(rows, out_dir) -> tuple[Path, Path]:
    """Write metrics.txt and metrics.csv under out_dir; returns both paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    txt_path = out_dir / "metrics.txt"
    csv_path = out_dir / "metrics.csv"
    txt_path.write_text(format_report(rows))
    csv_lines = ["task,metric,value"]
    for task, metric, value in rows:
        csv_lines.append(f"{task},{metric},{value:.4f}")
    csv_path.write_text("\n".join(csv_lines) + "\n")
    return txt_path, csv_path
