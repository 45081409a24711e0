"""Cross-modality retrieval evaluation: Euclidean ranking, CMC, mAP, the
single-shot all-search and RegDB-style protocols, distance histograms."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .types import INFRARED, VISIBLE


class EvaluationError(ValueError):
    pass


@dataclass
class RetrievalResult:
    ranking: np.ndarray  # (n_query, n_gallery) gallery indices, best first
    cmc: np.ndarray  # (max_rank,)
    ap: np.ndarray  # (n_query,)
    mAP: float
    trial: int = 0
    trials: list["RetrievalResult"] = field(default_factory=list)

    def rank(self, k: int) -> float:
        return float(self.cmc[k - 1])


@dataclass
class DistanceHistogram:
    edges: np.ndarray
    intra: np.ndarray
    inter: np.ndarray
    intra_mean: float
    inter_mean: float


def pairwise_distances(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise EvaluationError(f"feature length mismatch: {q.shape} vs {g.shape}")
    return np.sqrt(((q[:, None, :] - g[None, :, :]) ** 2).sum(-1))


def cmc_map(distances: np.ndarray, query_labels, gallery_labels, max_rank: int = 20
            ) -> RetrievalResult:
    """Rank the gallery by ascending distance (ties by gallery index)."""
    distances = np.asarray(distances)
    q = np.asarray(query_labels)
    g = np.asarray(gallery_labels)
    missing = set(q.tolist()) - set(g.tolist())
    if missing:
        raise EvaluationError(f"query identities absent from gallery: {sorted(missing)[:5]}")
    ranking = np.argsort(distances, axis=1, kind="stable")
    matches = g[ranking] == q[:, None]
    hits = np.cumsum(matches, axis=1)
    # AP: precision at every relevant position, averaged over relevant items
    precision = hits / np.arange(1, matches.shape[1] + 1)
    ap = (precision * matches).sum(1) / matches.sum(1)
    first = matches.argmax(1)
    cmc = np.array([(first < k).mean() for k in range(1, max_rank + 1)])
    return RetrievalResult(ranking, cmc, ap, float(ap.mean()))


def _mean_result(results: list[RetrievalResult]) -> RetrievalResult:
    first = results[0]
    cmc = np.mean([r.cmc for r in results], axis=0)
    return RetrievalResult(first.ranking, cmc, np.concatenate([r.ap for r in results]),
                           float(np.mean([r.mAP for r in results])), trial=-1,
                           trials=results)


def single_shot_all_search(features, identities, modalities, trials: int = 10,
                           rng: np.random.Generator | None = None, max_rank: int = 20,
                           query_modality: int = INFRARED) -> RetrievalResult:
    """Infrared queries against a visible gallery holding one random image
    per identity, averaged over ``trials`` random gallery draws."""
    rng = rng if rng is not None else np.random.default_rng(0)
    feats = np.asarray(features)
    ids = np.asarray(identities)
    mods = np.asarray(modalities)
    gallery_mod = VISIBLE if query_modality == INFRARED else INFRARED
    q_pos = np.flatnonzero(mods == query_modality)
    g_pos = np.flatnonzero(mods == gallery_mod)
    per_id = {y: g_pos[ids[g_pos] == y] for y in np.unique(ids[q_pos])}
    empty = [int(y) for y, p in per_id.items() if len(p) == 0]
    if empty:
        raise EvaluationError(f"identities with zero gallery images: {empty[:5]}")
    all_ids = np.unique(ids[g_pos])
    results = []
    for t in range(trials):
        chosen = np.array([rng.choice(g_pos[ids[g_pos] == y]) for y in all_ids])
        d = pairwise_distances(feats[q_pos], feats[chosen])
        r = cmc_map(d, ids[q_pos], ids[chosen], max_rank)
        r.trial = t
        results.append(r)
    return _mean_result(results)


def regdb_protocol(features, identities, modalities, trials: int = 10,
                   rng: np.random.Generator | None = None, max_rank: int = 20,
                   fraction: float = 0.5) -> RetrievalResult:
    """All visible images query all infrared images, over random halves of the
    identity set."""
    rng = rng if rng is not None else np.random.default_rng(0)
    feats = np.asarray(features)
    ids = np.asarray(identities)
    mods = np.asarray(modalities)
    uniq = np.unique(ids)
    k = max(1, int(round(len(uniq) * fraction)))
    results = []
    for t in range(trials):
        keep = np.isin(ids, rng.choice(uniq, size=k, replace=False))
        q = np.flatnonzero(keep & (mods == VISIBLE))
        g = np.flatnonzero(keep & (mods == INFRARED))
        r = cmc_map(pairwise_distances(feats[q], feats[g]), ids[q], ids[g], max_rank)
        r.trial = t
        results.append(r)
    return _mean_result(results)


def distance_histogram(features, identities, modalities, bins=30) -> DistanceHistogram:
    """Histogram of visible-infrared distances, split into same-identity and
    different-identity pairs."""
    feats = np.asarray(features)
    ids = np.asarray(identities)
    mods = np.asarray(modalities)
    v = np.flatnonzero(mods == VISIBLE)
    r = np.flatnonzero(mods == INFRARED)
    if len(v) == 0 or len(r) == 0:
        raise EvaluationError("no cross-modality pairs")
    d = pairwise_distances(feats[v], feats[r])
    same = ids[v][:, None] == ids[r][None, :]
    intra, inter = d[same], d[~same]
    if np.isscalar(bins) or np.ndim(bins) == 0:
        hi = float(d.max()) if d.size and d.max() > 0 else 1.0
        edges = np.linspace(0.0, hi * (1 + 1e-9), int(bins) + 1)
    else:
        edges = np.asarray(bins, dtype=float)
    return DistanceHistogram(
        edges,
        np.histogram(intra, edges)[0],
        np.histogram(inter, edges)[0],
        float(intra.mean()) if intra.size else float("nan"),
        float(inter.mean()) if inter.size else float("nan"),
    )


def write_cmc_csv(result: RetrievalResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "cmc"])
        for k, v in enumerate(result.cmc, 1):
            w.writerow([k, repr(float(v))])
        w.writerow(["mAP", repr(float(result.mAP))])


def write_histogram_csv(hist: DistanceHistogram, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "intra", "inter"])
        for lo, hi, a, b in zip(hist.edges[:-1], hist.edges[1:], hist.intra, hist.inter):
            w.writerow([repr(float(lo)), repr(float(hi)), int(a), int(b)])


def save_features(path: str | Path, features, identities, modalities) -> None:
    """Binary dump of (identity, modality, f) triples."""
    np.savez(path, features=np.asarray(features), identities=np.asarray(identities),
             modalities=np.asarray(modalities))


def load_features(path: str | Path):
    with np.load(path) as z:
        return z["features"], z["identities"], z["modalities"]
