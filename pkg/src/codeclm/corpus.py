"""Synthetic speech-like corpus with oracle recognizer and speaker embedding.

Each phoneme owns a fixed template vector; a speaker is an affine map
(per-dimension scale and bias) applied to templates.  Because the speaker
model is affine, the recognizer can undo it with a closed-form least-squares
fit, so recognition of clean frames is exact rather than learned.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CorpusConfig:
    phoneme_count: int = 32
    speakers: int = 4
    frames_per_phoneme: tuple[int, int] = (2, 6)
    text_length: tuple[int, int] = (4, 16)
    duration_frames: tuple[int, int] = (20, 80)
    frame_dim: int = 16
    noise_std: float = 0.05
    bias_std: float = 6.0
    scale_spread: float = 0.2
    transition_concentration: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.phoneme_count < 2:
            raise ValueError("phoneme_count must be >= 2")
        if self.speakers < 1:
            raise ValueError("speakers must be >= 1")
        lo, hi = self.frames_per_phoneme
        if lo < 1 or hi < lo:
            raise ValueError(f"bad frames_per_phoneme range {self.frames_per_phoneme}")
        lo, hi = self.text_length
        if lo < 1 or hi < lo:
            raise ValueError(f"bad text_length range {self.text_length}")
        if self.noise_std < 0 or self.bias_std < 0 or self.scale_spread < 0:
            raise ValueError("noise_std, bias_std and scale_spread must be >= 0")
        if self.frame_dim < 1:
            raise ValueError("frame_dim must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("frames_per_phoneme", "text_length", "duration_frames"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        for k in ("frames_per_phoneme", "text_length", "duration_frames"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: int
    bias_vector: np.ndarray
    scale_vector: np.ndarray

    def __post_init__(self):
        if np.any(self.scale_vector <= 0):
            raise ValueError("speaker scale components must be positive")

    def apply(self, templates: np.ndarray) -> np.ndarray:
        return templates * self.scale_vector + self.bias_vector


@dataclass
class Utterance:
    id: str
    text: tuple[int, ...]
    speaker_id: int
    frames: np.ndarray
    durations: tuple[int, ...] = ()

    @property
    def duration_frames(self) -> int:
        return int(self.frames.shape[0])

    def prefix(self, max_frames: int) -> tuple[tuple[int, ...], int]:
        """Longest phoneme-aligned prefix of at most ``max_frames`` frames.

        Returns ``(prefix_text, prefix_frame_count)``; at least one phoneme is
        always included.
        """
        n_frames = 0
        n_ph = 0
        for d in self.durations:
            if n_ph > 0 and n_frames + d > max_frames:
                break
            n_frames += d
            n_ph += 1
        return self.text[:n_ph], n_frames


@dataclass
class Corpus:
    config: CorpusConfig
    templates: np.ndarray
    speakers: list[SpeakerProfile]
    transitions: np.ndarray
    utterances: list[Utterance] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def all_frames(self) -> np.ndarray:
        if not self.utterances:
            return np.zeros((0, self.config.frame_dim), dtype=np.float32)
        return np.concatenate([u.frames for u in self.utterances], axis=0)

    def subset(self, utterances: Iterable[Utterance]) -> "Corpus":
        return Corpus(self.config, self.templates, self.speakers, self.transitions, list(utterances))


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    world, data = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(world), np.random.default_rng(data)


def make_world(cfg: CorpusConfig) -> tuple[np.ndarray, list[SpeakerProfile], np.ndarray]:
    """Draw phoneme templates, speaker profiles and the phoneme transition matrix."""
    rng, _ = _streams(cfg.seed)
    P, D = cfg.phoneme_count, cfg.frame_dim
    templates = rng.standard_normal((P, D))
    speakers = []
    for s in range(cfg.speakers):
        bias = rng.standard_normal(D) * cfg.bias_std
        scale = np.exp(rng.uniform(-cfg.scale_spread, cfg.scale_spread, D))
        speakers.append(SpeakerProfile(s, bias, scale))
    # no self-transitions: repeated phonemes would be indistinguishable after duplicate collapse
    trans = rng.dirichlet(np.full(P - 1, cfg.transition_concentration), size=P)
    transitions = np.zeros((P, P))
    for p in range(P):
        transitions[p, np.arange(P) != p] = trans[p]
    return templates, speakers, transitions


def sample_text(rng: np.random.Generator, transitions: np.ndarray, length: int) -> tuple[int, ...]:
    P = transitions.shape[0]
    cur = int(rng.integers(P))
    out = [cur]
    for _ in range(length - 1):
        cur = int(rng.choice(P, p=transitions[cur]))
        out.append(cur)
    return tuple(out)


def render(
    text: Sequence[int],
    durations: Sequence[int],
    templates: np.ndarray,
    speaker: SpeakerProfile,
    noise_std: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Frames for ``text`` spoken by ``speaker`` with the given per-phoneme durations."""
    idx = np.repeat(np.asarray(text, dtype=np.int64), np.asarray(durations, dtype=np.int64))
    frames = speaker.apply(templates[idx])
    if noise_std > 0:
        frames = frames + rng.standard_normal(frames.shape) * noise_std
    return frames.astype(np.float32)


def _utterance_stream(cfg: CorpusConfig, templates, speakers, transitions, id_prefix: str = "utt", stream: int = 0):
    if stream == 0:
        _, rng = _streams(cfg.seed)
    else:
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1, stream)))
    lo_t, hi_t = cfg.duration_frames
    i = 0
    while True:
        n = int(rng.integers(cfg.text_length[0], cfg.text_length[1] + 1))
        text = sample_text(rng, transitions, n)
        durs = tuple(int(d) for d in rng.integers(cfg.frames_per_phoneme[0], cfg.frames_per_phoneme[1] + 1, n))
        spk = int(rng.integers(cfg.speakers))
        frames = render(text, durs, templates, speakers[spk], cfg.noise_std, rng)
        i += 1
        # duration filter, the analogue of keeping only 4-20 s recordings
        if lo_t <= len(frames) <= hi_t:
            yield Utterance(f"{id_prefix}{i:06d}", text, spk, frames, durs)


def gen_corpus(cfg: CorpusConfig, utterance_count: int, id_prefix: str = "utt", stream: int = 0) -> Corpus:
    """``utterance_count`` utterances; distinct ``stream`` values give independent data from the same world."""
    if utterance_count < 1:
        raise ValueError("utterance_count must be >= 1")
    world = make_world(cfg)
    corpus = Corpus(cfg, *world)
    for utt in _utterance_stream(cfg, *world, id_prefix=id_prefix, stream=stream):
        corpus.utterances.append(utt)
        if len(corpus) == utterance_count:
            break
    return corpus


def gen_unlabeled(cfg: CorpusConfig, utterance_count: int) -> Corpus:
    """Speech-only pool for continual pre-training, drawn independently of the labeled splits."""
    return gen_corpus(cfg, utterance_count, id_prefix="unl", stream=1)


def split_by_hash(utt_id: str, eval_mod: int = 11) -> str:
    h = int.from_bytes(hashlib.sha256(utt_id.encode()).digest()[:8], "little")
    return "eval" if h % eval_mod == 0 else "train"


def gen_splits(cfg: CorpusConfig, train_count: int, eval_count: int) -> tuple[Corpus, Corpus]:
    """Generate utterances until both hash-assigned splits are full."""
    world = make_world(cfg)
    train, ev = Corpus(cfg, *world), Corpus(cfg, *world)
    limits = {"train": train_count, "eval": eval_count}
    for utt in _utterance_stream(cfg, *world):
        name = split_by_hash(utt.id)
        target = ev if name == "eval" else train
        if len(target) < limits[name]:
            target.utterances.append(utt)
        if len(train) >= train_count and len(ev) >= eval_count:
            break
    return train, ev


# ---------------------------------------------------------------------------
# oracle recognizer


def _fit_affine(X: np.ndarray, T: np.ndarray, ridge: float) -> tuple[np.ndarray, np.ndarray]:
    # per-dimension least squares X[:, d] ~ s_d * T[:, d] + b_d, slope shrunk towards 1
    n = X.shape[0]
    mt, mx = T.mean(0), X.mean(0)
    Tc, Xc = T - mt, X - mx
    stt = (Tc * Tc).sum(0)
    stx = (Tc * Xc).sum(0)
    s = (stx + ridge * n) / (stt + ridge * n)
    s = np.maximum(s, 1e-3)
    return s, mx - s * mt


def _assign(X: np.ndarray, templates: np.ndarray, s: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, float]:
    Y = (X - b) / s
    d2 = ((Y[:, None, :] - templates[None, :, :]) ** 2).sum(-1)
    a = d2.argmin(1)
    resid = float((((templates[a] * s + b) - X) ** 2).sum())
    return a, resid


def recognize_with_fit(
    frames: np.ndarray, templates: np.ndarray, n_iter: int = 20, ridge: float = 1e-3, context: np.ndarray | None = None
) -> tuple[list[int], np.ndarray]:
    """Phoneme sequence plus the per-frame squared residual of the fitted speech model.

    Speaker scale/bias are estimated per utterance by alternating nearest
    template assignment with a per-dimension least-squares affine fit; several
    starting points are tried and the lowest-residual fit wins.  Consecutive
    duplicates are collapsed.

    ``context`` frames (enrollment speech of the same speaker) take part in the
    fit but not in the returned hypothesis or residuals.  A single phoneme is
    otherwise indistinguishable from any other under a free affine map.
    """
    X = np.asarray(frames, dtype=np.float64)
    if X.size == 0:
        return [], np.zeros(0)
    if X.ndim != 2:
        raise ValueError("frames must be a T x D matrix")
    n_ctx = 0
    if context is not None and len(context):
        C = np.asarray(context, dtype=np.float64)
        if C.ndim != 2 or C.shape[1] != X.shape[1]:
            raise ValueError("context must be a T x D matrix with the frames' dimension")
        n_ctx = len(C)
        X = np.concatenate([C, X])
    templates = np.asarray(templates, dtype=np.float64)
    if X.shape[1] != templates.shape[1]:
        raise ValueError(f"frame dim {X.shape[1]} != template dim {templates.shape[1]}")

    tmean, tstd = templates.mean(0), templates.std(0)
    inits = [
        (np.ones(X.shape[1]), X.mean(0) - tmean),
        (np.maximum(X.std(0), 1e-6) / tstd, X.mean(0) - X.std(0) / tstd * tmean),
    ]
    best = None
    for s, b in inits:
        a, r = _assign(X, templates, s, b)
        for _ in range(n_iter):
            s, b = _fit_affine(X, templates[a], ridge)
            a_new, r = _assign(X, templates, s, b)
            if np.array_equal(a_new, a):
                break
            a = a_new
        if best is None or r < best[1]:
            best = (a, r, s, b)
    a, _, s, b = best
    resid = (((templates[a] * s + b) - X) ** 2).sum(1)[n_ctx:]
    a = a[n_ctx:]
    out: list[int] = []
    for p in a.tolist():
        if not out or out[-1] != p:
            out.append(p)
    return out, resid


def oracle_recognize(frames: np.ndarray, templates: np.ndarray, context: np.ndarray | None = None) -> list[int]:
    """Recognize the phoneme sequence of ``frames`` (see :func:`recognize_with_fit`)."""
    return recognize_with_fit(frames, templates, context=context)[0]


# ---------------------------------------------------------------------------
# speaker embedding


@lru_cache(maxsize=8)
def _projection(dim: int) -> np.ndarray:
    # fixed across corpora so embeddings are comparable between runs
    g = np.random.default_rng(20240101).standard_normal((2 * dim, 2 * dim))
    q, _ = np.linalg.qr(g)
    return q[:dim]


def speaker_embed(frames: np.ndarray) -> np.ndarray:
    """Unit-norm speaker vector from per-dimension frame mean and log-std."""
    X = np.asarray(frames, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("speaker_embed needs at least one frame")
    feats = np.concatenate([X.mean(0), np.log(X.std(0) + 1e-3)])
    v = _projection(X.shape[1]) @ feats
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.clip(np.dot(a, b), -1.0, 1.0))


# ---------------------------------------------------------------------------
# on-disk format


def save_corpus(corpus: Corpus, directory: str | Path, name: str) -> None:
    """Write ``{name}.jsonl`` records plus a ``{name}.f32`` little-endian frame blob."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = f"{name}.f32"
    offset = 0
    with open(directory / f"{name}.jsonl", "w") as fh, open(directory / blob, "wb") as fb:
        for u in corpus.utterances:
            fb.write(np.ascontiguousarray(u.frames, dtype="<f4").tobytes())
            rec = {
                "id": u.id,
                "text": list(u.text),
                "speaker": u.speaker_id,
                "frames_file": blob,
                "frame_offset": offset,
                "frame_count": u.duration_frames,
                "durations": list(u.durations),
            }
            fh.write(json.dumps(rec) + "\n")
            offset += u.duration_frames


def load_corpus(directory: str | Path, name: str, cfg: CorpusConfig) -> Corpus:
    directory = Path(directory)
    templates, speakers, transitions = make_world(cfg)
    corpus = Corpus(cfg, templates, speakers, transitions)
    blobs: dict[str, np.ndarray] = {}
    with open(directory / f"{name}.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            fname = rec["frames_file"]
            if fname not in blobs:
                blobs[fname] = np.fromfile(directory / fname, dtype="<f4").reshape(-1, cfg.frame_dim)
            o, c = rec["frame_offset"], rec["frame_count"]
            frames = blobs[fname][o : o + c].astype(np.float32)
            corpus.utterances.append(
                Utterance(rec["id"], tuple(rec["text"]), rec["speaker"], frames, tuple(rec.get("durations", ())))
            )
    return corpus
