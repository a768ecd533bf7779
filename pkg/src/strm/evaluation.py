"""Retrieval evaluation: cosine ranking, CMC and mAP."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

if TYPE_CHECKING:
    from .model import VideoReidModel


@dataclass
class EvalSet:
    probe: np.ndarray  # [P, d]
    probe_ids: np.ndarray
    gallery: np.ndarray  # [G, d]
    gallery_ids: np.ndarray
    probe_cams: np.ndarray | None = None
    gallery_cams: np.ndarray | None = None
    strict: bool = True

    def __post_init__(self):
        self.probe = np.atleast_2d(np.asarray(self.probe, dtype=np.float64))
        self.gallery = np.atleast_2d(np.asarray(self.gallery, dtype=np.float64))
        self.probe_ids = np.asarray(self.probe_ids)
        self.gallery_ids = np.asarray(self.gallery_ids)
        if self.probe.shape[1] != self.gallery.shape[1]:
            raise ValueError(f"descriptor dims differ: {self.probe.shape[1]} vs {self.gallery.shape[1]}")
        if len(self.probe_ids) != len(self.probe) or len(self.gallery_ids) != len(self.gallery):
            raise ValueError("one identity label per descriptor required")


@dataclass
class CmcResult:
    cmc: np.ndarray  # match rate at ranks 1..R
    map: float

    @property
    def rank1(self) -> float:
        return float(self.cmc[0])


def extract_descriptor(frames: np.ndarray, model: "VideoReidModel") -> np.ndarray:
    """Eval-mode descriptor of one [T, 3, h, w] sequence, using every frame.

    BN uses running statistics and dropout is off, so the result does not
    depend on any rng.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4:
        raise ValueError(f"expected frames [T, 3, h, w], got shape {frames.shape}")
    return model.describe(frames)


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine distance undefined for a zero vector")
    return float(1.0 - (a @ b) / (na * nb))


def cosine_distance_matrix(probe: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    pn = np.linalg.norm(probe, axis=1, keepdims=True)
    gn = np.linalg.norm(gallery, axis=1, keepdims=True)
    if (pn == 0).any() or (gn == 0).any():
        raise ValueError("cosine distance undefined for a zero descriptor")
    return 1.0 - (probe / pn) @ (gallery / gn).T


def rank_and_score(
    dist: np.ndarray,
    probe_ids: np.ndarray,
    gallery_ids: np.ndarray,
    max_rank: int | None = None,
    strict: bool = True,
) -> CmcResult:
    """CMC and mAP from a [P, G] distance matrix.

    Each gallery row is sorted ascending with ties broken by gallery index.
    Probes without any correct gallery entry raise under ``strict``; otherwise
    they are skipped.
    """
    dist = np.asarray(dist, dtype=np.float64)
    probe_ids = np.asarray(probe_ids)
    gallery_ids = np.asarray(gallery_ids)
    n_probe, n_gal = dist.shape
    max_rank = n_gal if max_rank is None else min(max_rank, n_gal)
    hits = np.zeros(max_rank)
    aps = []
    for p in range(n_probe):
        order = np.argsort(dist[p], kind="stable")
        match = gallery_ids[order] == probe_ids[p]
        if not match.any():
            if strict:
                raise ValueError(f"probe {p} (identity {probe_ids[p]}) has no match in the gallery")
            continue
        ranks = np.flatnonzero(match) + 1  # 1-based
        if ranks[0] <= max_rank:
            hits[ranks[0] - 1:] += 1
        precisions = [(i + 1) / r for i, r in enumerate(ranks)]
        aps.append(math.fsum(precisions) / len(precisions))
    n_valid = len(aps)
    if n_valid == 0:
        raise ValueError("no probe has a correct gallery match")
    return CmcResult(hits / n_valid, math.fsum(aps) / n_valid)


def evaluate(evalset: EvalSet, max_rank: int | None = None,
             distance: Callable[[np.ndarray, np.ndarray], np.ndarray] = cosine_distance_matrix) -> tuple[CmcResult, np.ndarray]:
    dist = distance(evalset.probe, evalset.gallery)
    return rank_and_score(dist, evalset.probe_ids, evalset.gallery_ids, max_rank, evalset.strict), dist


@dataclass
class MultiTrialResult:
    cmc_mean: np.ndarray
    cmc_std: np.ndarray
    map_mean: float
    map_std: float
    trials: list[CmcResult]


def multi_trial(results: Sequence[CmcResult]) -> MultiTrialResult:
    """Mean and sample standard deviation per rank across trials."""
    if not results:
        raise ValueError("need at least one trial")
    width = min(len(r.cmc) for r in results)
    cmc = np.stack([r.cmc[:width] for r in results])
    maps = np.array([r.map for r in results])
    ddof = 1 if len(results) > 1 else 0
    return MultiTrialResult(cmc.mean(axis=0), cmc.std(axis=0, ddof=ddof), float(maps.mean()),
                            float(maps.std(ddof=ddof)), list(results))


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_cmc(path: str | Path, result: CmcResult | MultiTrialResult) -> None:
    """``rank<TAB>cmc`` lines followed by ``mAP<TAB>value``."""
    if isinstance(result, MultiTrialResult):
        cmc, m = result.cmc_mean, result.map_mean
    else:
        cmc, m = result.cmc, result.map
    lines = [f"{r}\t{_fmt(v)}" for r, v in enumerate(cmc, 1)]
    lines.append(f"mAP\t{_fmt(m)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_cmc(path: str | Path) -> CmcResult:
    cmc, m = [], None
    for line in Path(path).read_text().splitlines():
        key, val = line.split("\t")
        if key == "mAP":
            m = float(val)
        else:
            cmc.append(float(val))
    if m is None:
        raise ValueError(f"{path}: missing mAP row")
    return CmcResult(np.array(cmc), m)


def write_distance_csv(path: str | Path, dist: np.ndarray) -> None:
    with open(path, "w") as fh:
        for row in dist:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
