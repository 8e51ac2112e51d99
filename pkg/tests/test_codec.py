import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from codeclm.codec import (
    CodecConfig,
    ResidualVQ,
    distortion,
    load_codebooks,
    nearest,
    rvq_decode,
    rvq_encode,
    save_codebooks,
    train_codebooks,
)


def brute_force_encode(frames, books):
    """Per frame, per layer: scan every centroid, keep the first strict minimum."""
    codes = np.zeros((len(frames), len(books)), dtype=np.int64)
    for t, f in enumerate(np.asarray(frames, dtype=np.float64)):
        r = f.copy()
        for layer, book in enumerate(books):
            best, best_d = 0, None
            for j, c in enumerate(np.asarray(book, dtype=np.float64)):
                d = float(((r - c) ** 2).sum())
                if best_d is None or d < best_d:
                    best, best_d = j, d
            codes[t, layer] = best
            r = r - np.asarray(book, dtype=np.float64)[best]
    return codes


def test_config_validation():
    with pytest.raises(ValueError):
        CodecConfig(num_layers=0)
    with pytest.raises(ValueError):
        CodecConfig(codebook_size=1)
    assert CodecConfig(num_layers=8, codebook_size=1024, frames_per_second=75).bitrate == pytest.approx(8 * 10 * 75)


def test_zero_residual_construction(rng):
    books = [rng.standard_normal((6, 4)).astype(np.float32) for _ in range(3)]
    for b in books[1:]:
        b[2] = 0.0
    frame = books[0][4][None, :]
    grid = rvq_encode(frame, books)
    assert grid.tolist() == [[4, 2, 2]]
    assert np.array_equal(rvq_decode(grid, books), frame)


def test_encode_matches_brute_force(rng):
    books = [rng.standard_normal((9, 5)).astype(np.float32) * s for s in (2.0, 0.7, 0.2)]
    frames = rng.standard_normal((60, 5)).astype(np.float32) * 2
    assert np.array_equal(rvq_encode(frames, books), brute_force_encode(frames, books))


def test_ties_break_to_lowest_index():
    books = [np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]], dtype=np.float32)]
    assert rvq_encode(np.zeros((1, 2), dtype=np.float32), books)[0, 0] == 0
    idx, _ = nearest(np.array([[1.0, 0.0]]), books[0])
    assert idx[0] == 0


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, (5, 3), elements=st.floats(-3, 3, width=32)), st.integers(0, 2**31 - 1))
def test_encode_property_matches_oracle(frames, seed):
    g = np.random.default_rng(seed)
    books = [g.standard_normal((4, 3)).astype(np.float32) for _ in range(2)]
    assert np.array_equal(rvq_encode(frames, books), brute_force_encode(frames, books))


def test_decode_errors(rng):
    books = [rng.standard_normal((4, 2)).astype(np.float32) for _ in range(2)]
    with pytest.raises(ValueError, match="range"):
        rvq_decode(np.array([[4, 0]]), books)
    with pytest.raises(ValueError):
        rvq_decode(np.array([[0, 0]]), books, n_layers=3)
    with pytest.raises(ValueError):
        rvq_encode(np.zeros((2, 3)), books)
    with pytest.raises(ValueError):
        rvq_encode(np.zeros((2, 2)), [books[0], np.zeros((5, 2))])


def test_trained_books_residuals_never_grow(micro_data):
    books = micro_data.books
    frames = micro_data.eval.all_frames().astype(np.float64)
    grid = rvq_encode(frames, books)
    prev = np.linalg.norm(frames, axis=1)
    recon = np.zeros_like(frames)
    for layer in range(len(books)):
        recon += np.asarray(books[layer], dtype=np.float64)[grid[:, layer]]
        cur = np.linalg.norm(frames - recon, axis=1)
        assert (cur <= prev + 1e-9).all()
        prev = cur
    assert all((b == 0).all(1).any() for b in books)


def test_distortion_decreases_with_layers(micro_data):
    d = [distortion(micro_data.eval.all_frames(), micro_data.books, n) for n in range(1, 5)]
    assert all(a > b for a, b in zip(d, d[1:]))


def test_training_deterministic_and_shapes(micro_data):
    cfg = micro_data.codec
    frames = micro_data.train.all_frames()[:400]
    a = train_codebooks(frames, cfg, iters=3, seed=5)
    b = train_codebooks(frames, cfg, iters=3, seed=5)
    assert len(a) == cfg.num_layers
    assert all(x.shape == (cfg.codebook_size, cfg.frame_dim) and x.dtype == np.float32 for x in a)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    with pytest.raises(ValueError):
        train_codebooks(frames[:3], cfg)


def test_codebook_checkpoint_round_trip(tmp_path, micro_data):
    save_codebooks(tmp_path / "c.ckpt", micro_data.books)
    back = load_codebooks(tmp_path / "c.ckpt")
    assert all(np.array_equal(x, y) for x, y in zip(back, micro_data.books))


def test_estimator_api(micro_data):
    frames = micro_data.train.all_frames()[:300]
    est = ResidualVQ(n_layers=2, codebook_size=8, n_iter=3)
    assert est.get_params()["codebook_size"] == 8
    codes = est.fit(frames).transform(frames)
    assert codes.shape == (300, 2) and codes.max() < 8
    rec = est.inverse_transform(codes)
    assert rec.shape == frames.shape
    assert est.score(frames) == pytest.approx(-distortion(frames, est.codebooks_))
    clone = ResidualVQ.from_codebooks(est.codebooks_)
    assert np.array_equal(clone.transform(frames), codes)
    with pytest.raises(Exception):
        ResidualVQ().transform(frames)
