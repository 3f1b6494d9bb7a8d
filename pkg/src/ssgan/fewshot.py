"""Episodic N-way K-shot evaluation with mean prototypes and cosine distance."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

MIN_NORM = 1e-12


@dataclass
class LabeledSplit:
    """Images (n, C, H, W) with integer class ids (n,)."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)


@dataclass
class Episode:
    """Indices into a split; labels are episode-local, 1..N."""

    way: int
    shot: int
    query: int
    classes: np.ndarray
    support_idx: np.ndarray
    support_labels: np.ndarray
    query_idx: np.ndarray
    query_labels: np.ndarray


def sample_episode(labels: np.ndarray, way: int, shot: int, query: int,
                   rng: np.random.Generator) -> Episode:
    """Draw ``way`` classes, then ``shot + query`` distinct images per class."""
    if way < 1 or shot < 1 or query < 1:
        raise ValueError("way, shot and query must all be >= 1")
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < way:
        raise ValueError(f"insufficient classes: {way}-way needs {way}, split has {len(classes)}")
    short = classes[counts < shot + query]
    if len(short):
        raise ValueError(f"classes {short.tolist()} have fewer than {shot + query} images")
    chosen = rng.choice(classes, way, replace=False)
    s_idx, s_lab, q_idx, q_lab = [], [], [], []
    for n, cls in enumerate(chosen, start=1):
        members = rng.permutation(np.flatnonzero(labels == cls))[:shot + query]
        s_idx.append(members[:shot])
        q_idx.append(members[shot:])
        s_lab.append(np.full(shot, n))
        q_lab.append(np.full(query, n))
    return Episode(way, shot, query, chosen, np.concatenate(s_idx), np.concatenate(s_lab),
                   np.concatenate(q_idx), np.concatenate(q_lab))


def compute_prototypes(encodings: np.ndarray, labels: np.ndarray, way: int) -> np.ndarray:
    """Row n-1 is the mean encoding of class n."""
    encodings = np.asarray(encodings, dtype=np.float64)
    labels = np.asarray(labels)
    protos = np.empty((way, encodings.shape[1]))
    for n in range(1, way + 1):
        members = encodings[labels == n]
        if len(members) == 0:
            raise ValueError(f"class {n} has no support encodings")
        protos[n - 1] = members.mean(axis=0)
    return protos


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms <= MIN_NORM):
        raise ValueError(f"degenerate {what}: norm <= {MIN_NORM}")
    return x / norms


def cosine_distances(queries: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """(Q, N) matrix of ``1 - cos`` between query rows and prototype rows."""
    q = _unit_rows(np.atleast_2d(np.asarray(queries, dtype=np.float64)), "query")
    p = _unit_rows(np.asarray(prototypes, dtype=np.float64), "prototype")
    return 1.0 - q @ p.T


def classify_queries(queries: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    # argmin returns the first minimum, so ties go to the lowest class index
    return np.argmin(cosine_distances(queries, prototypes), axis=1) + 1


def classify_query(z_q: np.ndarray, prototypes: np.ndarray) -> int:
    """Label (1..N) of the prototype closest to ``z_q`` in cosine distance."""
    return int(classify_queries(np.asarray(z_q)[None], prototypes)[0])


@dataclass
class EvalReport:
    accuracies: np.ndarray
    n_way: int
    k_shot: int
    query: int
    mean: float = field(init=False)
    ci95: float = field(init=False)

    def __post_init__(self):
        self.accuracies = np.asarray(self.accuracies, dtype=np.float64)
        if self.accuracies.size == 0:
            raise ValueError("report needs at least one episode")
        self.mean = float(np.mean(self.accuracies))
        self.ci95 = confidence_halfwidth(self.accuracies)

    @property
    def episodes(self) -> int:
        return int(self.accuracies.size)

    def summary(self) -> dict:
        return {"mean": self.mean, "ci95": self.ci95, "n_way": self.n_way,
                "k_shot": self.k_shot, "episodes": self.episodes}

    def write(self, out_dir: str | Path, stem: str = "eval") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
        with csv_path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "accuracy"])
            for i, a in enumerate(self.accuracies):
                w.writerow([i, repr(float(a))])
        json_path.write_text(json.dumps(self.summary(), indent=2) + "\n")
        return csv_path, json_path


def confidence_halfwidth(accuracies: np.ndarray) -> float:
    """``1.96 * std / sqrt(n)`` with the population standard deviation."""
    acc = np.asarray(accuracies, dtype=np.float64)
    return float(1.96 * acc.std() / np.sqrt(acc.size))


def evaluate(encode: Callable[[np.ndarray], np.ndarray], split: LabeledSplit, way: int,
             shot: int, query: int = 15, episodes: int = 1000,
             rng: np.random.Generator | None = None, batch: int = 256) -> EvalReport:
    """Mean accuracy over random episodes.

    Every image in the split is encoded once up front; episodes then index
    into the cached encodings, so results do not depend on episode batching.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    # validate the episode shape before paying for the encodings
    sample_episode(split.labels, way, shot, query, np.random.default_rng(0))
    codes = np.concatenate([np.asarray(encode(split.images[i:i + batch]), dtype=np.float64)
                            for i in range(0, len(split.images), batch)])
    accs = np.empty(episodes)
    for e in range(episodes):
        ep = sample_episode(split.labels, way, shot, query, rng)
        protos = compute_prototypes(codes[ep.support_idx], ep.support_labels, way)
        pred = classify_queries(codes[ep.query_idx], protos)
        accs[e] = np.mean(pred == ep.query_labels)
    return EvalReport(accs, way, shot, query)
