"""Residual vector quantizer used as the speech codec.

Frames are quantized layer by layer: each layer picks the centroid nearest to
what the previous layers left unexplained.  Codebooks are fit greedily with
k-means on the successive residuals.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .checkpoint import load_tensors, save_tensors

_CHUNK = 4096


@dataclass(frozen=True)
class CodecConfig:
    num_layers: int = 4
    codebook_size: int = 128
    frame_dim: int = 16
    frames_per_second: int = 4

    def __post_init__(self):
        if self.num_layers < 1 or self.codebook_size < 2 or self.frame_dim < 1:
            raise ValueError(f"invalid codec config {self}")

    @property
    def bitrate(self) -> float:
        """Bits per second carried by the code grid (informative only)."""
        return self.frames_per_second * self.num_layers * math.log2(self.codebook_size)

    def to_dict(self) -> dict:
        return asdict(self)


def _sqdist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # explicit differences rather than the expanded form: exact ties must stay ties
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)


def _sqdist_fast(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return np.maximum((x * x).sum(1)[:, None] - 2.0 * (x @ c.T) + (c * c).sum(1)[None, :], 0.0)


def nearest(x: np.ndarray, centroids: np.ndarray, exact: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Index of (and squared distance to) the nearest centroid, lowest index on ties.

    ``exact=False`` uses the expanded-norm form, which is much faster but may
    resolve near-ties differently; it is only used inside k-means.
    """
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    dfn = _sqdist if exact else _sqdist_fast
    idx = np.empty(len(x), dtype=np.int64)
    dist = np.empty(len(x))
    for s in range(0, len(x), _CHUNK):
        d = dfn(x[s : s + _CHUNK], c)
        idx[s : s + _CHUNK] = d.argmin(1)
        dist[s : s + _CHUNK] = d[np.arange(len(d)), idx[s : s + _CHUNK]]
    return idx, dist


def _check_books(books: list[np.ndarray]) -> None:
    if not books:
        raise ValueError("codebooks must have at least one layer")
    K, D = books[0].shape
    for i, b in enumerate(books):
        if b.shape != (K, D):
            raise ValueError(f"layer {i + 1} has shape {b.shape}, expected {(K, D)}")


def rvq_encode(frames: np.ndarray, books: list[np.ndarray]) -> np.ndarray:
    """Quantize ``frames`` (T x D) to a T x L integer code grid."""
    _check_books(books)
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != books[0].shape[1]:
        raise ValueError(f"frames of shape {x.shape} do not match codebook dim {books[0].shape[1]}")
    codes = np.empty((len(x), len(books)), dtype=np.int64)
    resid = x.copy()
    for layer, book in enumerate(books):
        idx, _ = nearest(resid, book)
        codes[:, layer] = idx
        resid -= np.asarray(book, dtype=np.float64)[idx]
    return codes


def rvq_decode(grid: np.ndarray, books: list[np.ndarray], n_layers: int | None = None) -> np.ndarray:
    """Sum of selected centroids; only the first ``n_layers`` layers when given."""
    _check_books(books)
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ValueError("code grid must be T x L")
    L = grid.shape[1] if n_layers is None else n_layers
    if L > grid.shape[1] or L > len(books) or L < 1:
        raise ValueError(f"cannot decode {L} layers from a grid with {grid.shape[1]} columns")
    K = books[0].shape[0]
    if grid.size and (grid.min() < 0 or grid.max() >= K):
        raise ValueError(f"code out of range [0, {K})")
    out = np.zeros((grid.shape[0], books[0].shape[1]), dtype=np.float64)
    for layer in range(L):
        out += np.asarray(books[layer], dtype=np.float64)[grid[:, layer]]
    return out.astype(np.float32)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            # fewer distinct points than clusters
            i = int(rng.integers(n))
        else:
            i = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            i = min(i, n - 1)
        centers[j] = x[i]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(1))
    return centers


def kmeans(x: np.ndarray, k: int, iters: int, rng: np.random.Generator) -> np.ndarray:
    """Lloyd iterations from k-means++ seeds; empty clusters take the farthest point."""
    centers = _kmeans_pp(x, k, rng)
    for _ in range(iters):
        idx, dist = nearest(x, centers, exact=False)
        counts = np.bincount(idx, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, idx, x)
        new = centers.copy()
        nz = counts > 0
        new[nz] = sums[nz] / counts[nz, None]
        dist = dist.copy()
        for j in np.flatnonzero(~nz):
            far = int(dist.argmax())
            new[j] = x[far]
            dist[far] = 0.0
        if np.array_equal(new, centers):
            break
        centers = new
    return centers


def train_codebooks(frames: np.ndarray, cfg: CodecConfig, iters: int = 25, seed: int = 0) -> list[np.ndarray]:
    """Greedy layer-wise k-means on successive residuals; every layer holds one zero centroid."""
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.frame_dim:
        raise ValueError(f"frames of shape {x.shape} do not match frame_dim {cfg.frame_dim}")
    if len(x) < cfg.codebook_size:
        raise ValueError(f"need at least {cfg.codebook_size} frames to train codebooks, got {len(x)}")
    rng = np.random.default_rng(seed)
    books = []
    resid = x.copy()
    for _ in range(cfg.num_layers):
        book = kmeans(resid, cfg.codebook_size, iters, rng).astype(np.float32)
        # the least-used centroid becomes the zero vector, so no frame's residual can grow
        idx, _ = nearest(resid, book, exact=False)
        if not (book == 0).all(1).any():
            book[int(np.bincount(idx, minlength=cfg.codebook_size).argmin())] = 0.0
        idx, _ = nearest(resid, book, exact=False)
        resid -= book.astype(np.float64)[idx]
        books.append(book)
    return books


def distortion(frames: np.ndarray, books: list[np.ndarray], n_layers: int | None = None) -> float:
    """Mean squared error per frame of the round trip through the codec."""
    rec = rvq_decode(rvq_encode(frames, books), books, n_layers)
    return float(((np.asarray(frames, dtype=np.float64) - rec) ** 2).sum(1).mean())


def save_codebooks(path, books: list[np.ndarray]) -> None:
    save_tensors(path, {f"rvq.layer{i + 1}.centroids": b for i, b in enumerate(books)})


def load_codebooks(path) -> list[np.ndarray]:
    t = load_tensors(path)
    books = []
    while f"rvq.layer{len(books) + 1}.centroids" in t:
        books.append(t[f"rvq.layer{len(books) + 1}.centroids"])
    _check_books(books)
    return books


class ResidualVQ(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` trains codebooks, ``transform`` encodes,
    ``inverse_transform`` decodes."""

    def __init__(self, n_layers=4, codebook_size=128, n_iter=25, frames_per_second=4, random_state=0):
        self.n_layers = n_layers
        self.codebook_size = codebook_size
        self.n_iter = n_iter
        self.frames_per_second = frames_per_second
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float32)
        cfg = CodecConfig(self.n_layers, self.codebook_size, X.shape[1], self.frames_per_second)
        self.codebooks_ = train_codebooks(X, cfg, self.n_iter, self.random_state)
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_codebooks(cls, books: list[np.ndarray], frames_per_second: int = 4) -> "ResidualVQ":
        _check_books(books)
        est = cls(n_layers=len(books), codebook_size=books[0].shape[0], frames_per_second=frames_per_second)
        est.codebooks_ = [np.asarray(b, dtype=np.float32) for b in books]
        est.n_features_in_ = books[0].shape[1]
        return est

    @property
    def config(self) -> CodecConfig:
        check_is_fitted(self, "codebooks_")
        return CodecConfig(len(self.codebooks_), self.codebooks_[0].shape[0], self.n_features_in_, self.frames_per_second)

    def transform(self, X):
        check_is_fitted(self, "codebooks_")
        X = check_array(X, dtype=np.float32, ensure_min_samples=0)
        return rvq_encode(X, self.codebooks_)

    def inverse_transform(self, codes, n_layers=None):
        check_is_fitted(self, "codebooks_")
        codes = check_array(codes, dtype=np.int64, ensure_min_samples=0)
        return rvq_decode(codes, self.codebooks_, n_layers)

    def score(self, X, y=None):
        """Negative mean round-trip distortion."""
        check_is_fitted(self, "codebooks_")
        return -distortion(check_array(X, dtype=np.float32), self.codebooks_)
