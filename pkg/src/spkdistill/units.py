"""K-means codebook over feature frames, quantisation and run deduplication."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InsufficientData, ShapeError

CODEBOOK_MAGIC = b"SPKDCODE"
CODEBOOK_VERSION = 1
_HEADER = struct.Struct("<8sIII")


@dataclass
class Codebook:
    centroids: np.ndarray  # (K, B)
    inertia_history: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def n_bands(self) -> int:
        return self.centroids.shape[1]


@dataclass(frozen=True)
class UnitSequence:
    units: tuple
    source_id: str = ""

    def __len__(self) -> int:
        return len(self.units)


def squared_distances(x: np.ndarray, centroids: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Exact ``|x_i - c_k|^2`` without the expanded-norm shortcut (keeps ties exact)."""
    out = np.empty((x.shape[0], centroids.shape[0]))
    for s in range(0, x.shape[0], chunk):
        d = x[s : s + chunk, None, :] - centroids[None, :, :]
        out[s : s + chunk] = np.einsum("nkb,nkb->nk", d, d)
    return out


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[int(rng.integers(len(x)))]]
    closest = squared_distances(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        # chosen points have zero mass, so with >= k distinct frames no centre repeats
        idx = int(rng.choice(len(x), p=closest / closest.sum()))
        centers.append(x[idx])
        closest = np.minimum(closest, squared_distances(x, x[idx][None])[:, 0])
    return np.array(centers)


def kmeans_fit(frames, K: int, max_iters: int = 50, seed: int = 0) -> Codebook:
    """Lloyd's algorithm with k-means++ seeding.

    Stops after ``max_iters`` assignment passes or once the assignment is
    unchanged. ``inertia_history[i]`` is the inertia of pass i; an empty
    cluster keeps its previous centroid so the history never increases.
    """
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("frames must be an (N, B) array")
    if K < 1:
        raise ValueError("K must be >= 1")
    if len(np.unique(x, axis=0)) < K:
        raise InsufficientData(f"need at least {K} distinct frames")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, K, rng)
    history: list[float] = []
    labels = None
    for _ in range(max_iters):
        d = squared_distances(x, centroids)
        new_labels = d.argmin(axis=1)
        history.append(float(d[np.arange(len(x)), new_labels].sum()))
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=K)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        filled = counts > 0
        centroids = centroids.copy()
        centroids[filled] = sums[filled] / counts[filled, None]
    return Codebook(centroids, history)


def quantize(frames, cb: Codebook) -> np.ndarray:
    """Nearest-centroid index per frame; ties go to the lowest index."""
    x = np.asarray(getattr(frames, "frames", frames), dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cb.n_bands:
        raise ShapeError(f"frames of width {x.shape[-1]} do not match codebook width {cb.n_bands}")
    return squared_distances(x, cb.centroids).argmin(axis=1)


def dedup_runs(raw, source_id: str = "") -> UnitSequence:
    raw = [int(u) for u in raw]
    out = [u for i, u in enumerate(raw) if i == 0 or u != raw[i - 1]]
    return UnitSequence(tuple(out), source_id)


def as_float32_grid(cb: Codebook) -> Codebook:
    """Round centroids to float32 so the codebook survives a file round trip unchanged."""
    return Codebook(cb.centroids.astype("<f4").astype(np.float64), list(cb.inertia_history))


def codebook_bytes(cb: Codebook) -> bytes:
    return _HEADER.pack(CODEBOOK_MAGIC, CODEBOOK_VERSION, cb.K, cb.n_bands) + cb.centroids.astype("<f4").tobytes()


def codebook_from_bytes(blob: bytes) -> Codebook:
    if len(blob) < _HEADER.size:
        raise FormatError("codebook file is truncated")
    magic, version, k, b = _HEADER.unpack_from(blob)
    if magic != CODEBOOK_MAGIC:
        raise FormatError("not a codebook file")
    if version != CODEBOOK_VERSION:
        raise FormatError(f"unsupported codebook version {version}")
    body = blob[_HEADER.size :]
    if len(body) != 4 * k * b:
        raise FormatError("codebook payload has the wrong size")
    return Codebook(np.frombuffer(body, dtype="<f4").reshape(k, b).astype(np.float64))


def save_codebook(cb: Codebook, path) -> None:
    Path(path).write_bytes(codebook_bytes(cb))


def load_codebook(path) -> Codebook:
    return codebook_from_bytes(Path(path).read_bytes())
