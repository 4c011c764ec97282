"""Distance computation and cross-camera CMC/mAP retrieval evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)


class EmptyGallery(ValueError):
    """Gallery is empty, or no query has any valid match."""


class UnknownQuery(KeyError):
    """Requested query id is not part of the query split."""


@dataclass
class RetrievalResult:
    mAP: float
    cmc: np.ndarray  # full curve; cmc[r-1] = fraction with a hit in top r
    ranks: tuple
    per_query_ap: np.ndarray
    num_valid_queries: int
    skipped_queries: list

    def cmc_at(self, rank: int) -> float:
        idx = min(rank, len(self.cmc)) - 1
        return float(self.cmc[idx])

    def to_dict(self) -> dict:
        return {
            "mAP": float(self.mAP),
            "cmc": {str(r): self.cmc_at(r) for r in self.ranks},
            "num_valid_queries": int(self.num_valid_queries),
        }


def distance_matrix(q: np.ndarray, g: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """Pairwise query/gallery distances.

    cosine: 1 - dot product of L2-normalized rows; zero vectors cannot be
    normalized and get distance 1 to everything (logged). euclidean: plain
    distances on the unnormalized features.
    """
    q = np.asarray(q, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"feature dims disagree: {q.shape} vs {g.shape}")
    if metric == "cosine":
        qn = np.linalg.norm(q, axis=1, keepdims=True)
        gn = np.linalg.norm(g, axis=1, keepdims=True)
        zeros = int((qn == 0).sum() + (gn == 0).sum())
        if zeros:
            logger.warning("%d zero vectors under cosine metric; distance set to 1", zeros)
        qh = np.divide(q, qn, out=np.zeros_like(q), where=qn > 0)
        gh = np.divide(g, gn, out=np.zeros_like(g), where=gn > 0)
        return 1.0 - qh @ gh.T
    if metric == "euclidean":
        d2 = (q * q).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2.0 * q @ g.T
        return np.sqrt(np.clip(d2, 0.0, None))
    raise ValueError(f"unknown metric {metric!r}")


def _canonical_order(dist_row: np.ndarray, g_ids: np.ndarray, g_cams: np.ndarray) -> np.ndarray:
    """Ascending distance; ties broken by (identity, camera, index).

    Breaking ties on intrinsic keys first makes the metrics invariant to
    gallery permutations; the index is only a final stable disambiguator
    between relevance-identical entries.
    """
    idx = np.arange(len(dist_row))
    return np.lexsort((idx, g_cams, g_ids, dist_row))


def cmc_map(
    dist: np.ndarray,
    q_ids: np.ndarray,
    g_ids: np.ndarray,
    q_cams: np.ndarray,
    g_cams: np.ndarray,
    ranks: tuple = (1, 5, 10),
) -> RetrievalResult:
    """Cross-camera retrieval metrics.

    For each query, gallery entries with the same identity AND the same
    camera are excluded; queries left without any valid match are skipped
    and reported in skipped_queries.
    """
    dist = np.asarray(dist, dtype=np.float64)
    n_q, n_g = dist.shape
    if n_g == 0:
        raise EmptyGallery("gallery is empty")
    g_ids = np.asarray(g_ids)
    g_cams = np.asarray(g_cams)

    max_rank = n_g
    all_cmc = []
    all_ap = []
    skipped = []
    for qi in range(n_q):
        order = _canonical_order(dist[qi], g_ids, g_cams)
        same_id = g_ids[order] == q_ids[qi]
        removed = same_id & (g_cams[order] == q_cams[qi])
        keep = ~removed
        matches = same_id[keep]
        if not matches.any():
            skipped.append(qi)
            continue
        cum = matches.cumsum()
        hits = (cum >= 1).astype(np.float64)
        if len(hits) < max_rank:
            hits = np.concatenate([hits, np.ones(max_rank - len(hits))])
        all_cmc.append(hits[:max_rank])
        precision_at_hit = cum[matches] / (np.flatnonzero(matches) + 1)
        all_ap.append(precision_at_hit.mean())

    if not all_ap:
        raise EmptyGallery("no query has a valid cross-camera match")
    cmc = np.stack(all_cmc).mean(axis=0)
    per_query_ap = np.array(all_ap)
    return RetrievalResult(
        mAP=float(per_query_ap.mean()),
        cmc=cmc,
        ranks=tuple(ranks),
        per_query_ap=per_query_ap,
        num_valid_queries=len(all_ap),
        skipped_queries=skipped,
    )


def rank_list(dist: np.ndarray, manifest, query_id: str, top_n: int) -> list:
    """Top-n gallery records for one query, for external visualization.

    `dist` must be the matrix produced by the evaluation driver: rows follow
    sorted query sample ids, columns sorted gallery sample ids. The same
    same-identity-same-camera exclusion and tie-break as cmc_map apply, so
    the exported match flags line up with the metric computation.
    """
    query_ids = sorted(manifest.sample_ids("query"))
    gallery_ids = sorted(manifest.sample_ids("gallery"))
    if query_id not in query_ids:
        raise UnknownQuery(query_id)
    qi = query_ids.index(query_id)
    q_entry = manifest.by_id[query_id]
    g_ids = np.array([manifest.by_id[s].identity for s in gallery_ids])
    g_cams = np.array([manifest.by_id[s].camera for s in gallery_ids])

    order = _canonical_order(dist[qi], g_ids, g_cams)
    keep = ~((g_ids[order] == q_entry.identity) & (g_cams[order] == q_entry.camera))
    kept = order[keep]
    records = []
    for gi in kept[: max(0, top_n)]:
        records.append(
            {
                "sample_id": gallery_ids[gi],
                "identity": int(g_ids[gi]),
                "camera": int(g_cams[gi]),
                "distance": float(dist[qi, gi]),
                "match": bool(g_ids[gi] == q_entry.identity),
            }
        )
    return records
