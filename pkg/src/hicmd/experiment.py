"""Glue for end-to-end runs: evaluate a trained state on query/gallery splits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DatasetIndex, load_images
from .hfl import extract_features
from .retrieval import (DistanceHistogram, RetrievalResult, distance_histogram, regdb_protocol,
                        single_shot_all_search)
from .training import TrainState


@dataclass
class Evaluation:
    result: RetrievalResult
    histogram: DistanceHistogram
    features: np.ndarray
    identities: np.ndarray
    modalities: np.ndarray

    def summary(self) -> dict[str, float]:
        return {"rank1": self.result.rank(1), "rank10": self.result.rank(10),
                "mAP": self.result.mAP, "intra_mean": self.histogram.intra_mean,
                "inter_mean": self.histogram.inter_mean}


def eval_split(index: DatasetIndex) -> DatasetIndex:
    """Query + gallery records when present, otherwise everything."""
    recs = tuple(r for r in index.records if r.split in ("query", "gallery"))
    if not recs:
        return index
    return DatasetIndex(recs, index.num_identities, ("query", "gallery"))


def evaluate(state: TrainState, index: DatasetIndex, protocol: str = "allsearch",
             trials: int = 10, seed: int = 0, max_rank: int = 20, bins: int = 30) -> Evaluation:
    cfg = state.cfg
    split = eval_split(index)
    images = load_images(split, cfg.height, cfg.width)
    feats = extract_features(state.gen, state.hfl, images).double().numpy()
    ids = np.array([im.identity for im in images])
    mods = np.array([im.modality for im in images])
    rng = np.random.default_rng(seed)
    if protocol == "allsearch":
        result = single_shot_all_search(feats, ids, mods, trials, rng, max_rank)
    elif protocol == "regdb":
        result = regdb_protocol(feats, ids, mods, trials, rng, max_rank)
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    return Evaluation(result, distance_histogram(feats, ids, mods, bins), feats, ids, mods)
