"""Sampling-based synthesis, candidate selection and benchmark tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .codec import rvq_decode, rvq_encode
from .corpus import Corpus, Utterance, cosine, recognize_with_fit, speaker_embed
from .integration import ComposedModel
from .valle import ValleNAR, generate_rest_layers_batch

STRATEGIES = ("I", "II", "III")


@dataclass(frozen=True)
class SamplingConfig:
    top_p: float = 1.0
    temperature: float = 1.0
    seed: int = 0
    candidates_per_text: int = 5

    def __post_init__(self):
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.candidates_per_text < 1:
            raise ValueError("candidates_per_text must be >= 1")


@dataclass
class Candidate:
    grid: np.ndarray
    frames: np.ndarray
    wer: float
    ss: float
    distortion: float
    truncated: bool = False
    hypothesis: list[int] = field(default_factory=list)


def top_p_sample(logits, cfg: SamplingConfig, rng: np.random.Generator) -> int:
    """Nucleus sampling: keep the most probable tokens until their mass reaches ``top_p``."""
    z = np.asarray(logits, dtype=np.float64) / cfg.temperature
    if np.isnan(z).any() or (z == np.inf).any() or np.all(z == -np.inf):
        raise ValueError("logits must be finite or -inf, with at least one finite value")
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    order = np.lexsort((np.arange(len(p)), -p))  # descending probability, ties by id
    sp = p[order]
    if cfg.top_p < 1.0:
        k = int(np.searchsorted(np.cumsum(sp), cfg.top_p)) + 1
        order, sp = order[:k], sp[:k]
    cdf = np.cumsum(sp)
    i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return int(order[min(i, len(order) - 1)])


def wer(hyp: Sequence, ref: Sequence) -> float:
    """100 x Levenshtein(hyp, ref) / len(ref) with unit costs."""
    if len(ref) == 0:
        raise ValueError("reference must be nonempty")
    hyp, ref = list(hyp), list(ref)
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, 1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return 100.0 * prev[-1] / len(ref)


def strategy_select(candidates: Sequence[Candidate], strategy: str) -> Candidate:
    """I: first candidate; II: highest SS; III: lowest WER, then highest SS.  Ties go to the lowest index."""
    if not candidates:
        raise ValueError("empty candidate pool")
    if strategy == "I":
        return candidates[0]
    if strategy == "II":
        return max(enumerate(candidates), key=lambda ic: (ic[1].ss, -ic[0]))[1]
    if strategy == "III":
        return min(enumerate(candidates), key=lambda ic: (ic[1].wer, -ic[1].ss, ic[0]))[1]
    raise ValueError(f"unknown strategy {strategy!r}")


def length_cap(text_len: int, max_frames_per_phoneme: int) -> int:
    return 4 * text_len * max_frames_per_phoneme


@torch.no_grad()
def sample_first_layer(
    model: ComposedModel,
    text: Sequence[int],
    prompt_codes: Sequence[int],
    rngs: list[np.random.Generator],
    cfg: SamplingConfig,
    cap: int,
) -> tuple[list[list[int]], list[bool]]:
    """Sample one first-layer continuation per generator; returns (codes, truncated flags)."""
    K = model.codebook_size
    room = model.max_positions - model.context_length(text) - len(prompt_codes)
    cap = max(1, min(cap, room))
    n = len(rngs)
    out: list[list[int]] = [[] for _ in range(n)]
    done = [False] * n
    prompt = [int(c) for c in prompt_codes]
    for _ in range(cap):
        live = [b for b in range(n) if not done[b]]
        if not live:
            break
        prefixes = [prompt + out[b] for b in live]
        logits = model.ar_logits([list(text)] * len(live), prefixes)
        for row, b in enumerate(live):
            step_logits = logits[row, len(prefixes[row])].double().numpy().copy()
            if not out[b]:
                step_logits[K] = -np.inf  # at least one frame
            tok = top_p_sample(step_logits, cfg, rngs[b])
            if tok == K:
                done[b] = True
            else:
                out[b].append(tok)
    return out, [not d for d in done]


@dataclass
class SynthesisContext:
    """Everything besides the first-layer model that synthesis needs."""

    nar: ValleNAR | None
    books: list[np.ndarray]
    templates: np.ndarray
    prompt_frames: int
    max_frames_per_phoneme: int


def synthesize_pool(
    model: ComposedModel,
    ctx: SynthesisContext,
    utt: Utterance,
    cfg: SamplingConfig,
    text_index: int = 0,
    grid: np.ndarray | None = None,
) -> list[Candidate]:
    """``cfg.candidates_per_text`` candidates continuing the utterance's own prompt prefix."""
    if grid is None:
        grid = rvq_encode(utt.frames, ctx.books)
    prompt_text, n = utt.prefix(ctx.prompt_frames)
    target = list(utt.text[len(prompt_text) :])
    if not target:
        raise ValueError(f"utterance {utt.id} has no text beyond its prompt")
    rngs = [np.random.default_rng([cfg.seed, text_index, c]) for c in range(cfg.candidates_per_text)]
    firsts, truncated = sample_first_layer(
        model, utt.text, grid[:n, 0], rngs, cfg, length_cap(len(target), ctx.max_frames_per_phoneme)
    )
    L = len(ctx.books)
    if L > 1:
        grids = generate_rest_layers_batch(ctx.nar, [list(utt.text)] * len(firsts), firsts, [grid[:n]] * len(firsts))
    else:
        grids = [np.asarray(f, dtype=np.int64).reshape(-1, 1) for f in firsts]
    ref_emb = speaker_embed(utt.frames)
    prompt_frames = rvq_decode(grid[:n], ctx.books)
    out = []
    for g, tr in zip(grids, truncated):
        frames = rvq_decode(g, ctx.books)
        hyp, resid = recognize_with_fit(frames, ctx.templates, context=prompt_frames)
        out.append(
            Candidate(
                grid=g,
                frames=frames,
                wer=wer(hyp, target),
                ss=cosine(speaker_embed(frames), ref_emb),
                distortion=float(resid.mean()),
                truncated=tr,
                hypothesis=hyp,
            )
        )
    return out


def synthesize(model, ctx: SynthesisContext, utt: Utterance, cfg: SamplingConfig, text_index: int = 0) -> Candidate:
    """Single candidate (the first of the pool's RNG streams)."""
    one = SamplingConfig(cfg.top_p, cfg.temperature, cfg.seed, 1)
    return synthesize_pool(model, ctx, utt, one, text_index)[0]


# ---------------------------------------------------------------------------
# benchmark


@dataclass
class ModelEntry:
    name: str
    model: ComposedModel
    meta: dict = field(default_factory=dict)


REPORT_COLUMNS = [
    "model", "method", "lm_preset", "init", "adapter", "strategy",
    "wer_mean", "ss_mean", "dist_mean", "truncation_rate", "seed_count",
]


@dataclass
class BenchmarkResult:
    rows: list[dict]
    per_text: list[dict]
    violations: list[dict]

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in REPORT_COLUMNS})
        return buf.getvalue()

    def table(self) -> str:
        return format_table(self.rows)


def format_table(rows: list[dict], label_cols=("model",)) -> str:
    """Models as rows; strategies I/II/III each with WER, SS and distortion columns."""
    strategies = [s for s in STRATEGIES if any(r["strategy"] == s for r in rows)]
    names: list[tuple] = []
    for r in rows:
        key = tuple(r[c] for c in label_cols)
        if key not in names:
            names.append(key)
    cells = {(tuple(r[c] for c in label_cols), r["strategy"]): r for r in rows}
    head1 = [""] * len(label_cols) + [g for s in strategies for g in (f"Strategy {s}", "", "")]
    head2 = list(label_cols) + [m for _ in strategies for m in ("WER", "SS", "dist")]
    body = []
    for key in names:
        line = list(key)
        for s in strategies:
            r = cells.get((key, s))
            line += ["-"] * 3 if r is None else [f"{r['wer_mean']:.2f}", f"{r['ss_mean']:.3f}", f"{r['dist_mean']:.3f}"]
        body.append(line)
    grid = [head1, head2] + body
    widths = [max(len(str(row[i])) for row in grid) for i in range(len(head2))]
    lines = ["  ".join(str(c).rjust(w) for c, w in zip(row, widths)) for row in grid[1:]]
    top = "  ".join(str(c).ljust(w) for c, w in zip(head1, widths))
    return "\n".join([top.rstrip()] + lines) + "\n"


def run_benchmark(
    models: Sequence[ModelEntry],
    ctx: SynthesisContext,
    eval_corpus: Corpus,
    train_ids: set[str] | None = None,
    strategies: Sequence[str] = STRATEGIES,
    pool: int = 5,
    seeds: Sequence[int] = (0, 1, 2),
    max_texts: int | None = None,
    sampling: SamplingConfig | None = None,
) -> BenchmarkResult:
    """Mean WER/SS/distortion per model and strategy over ``seeds``; one shared pool per (text, seed)."""
    if train_ids is not None:
        overlap = train_ids & {u.id for u in eval_corpus.utterances}
        if overlap:
            raise ValueError(f"evaluation split overlaps training split ({len(overlap)} utterances)")
    for s in strategies:
        if s not in STRATEGIES:
            raise ValueError(f"unknown strategy {s!r}")
    base = sampling or SamplingConfig()
    utts = [u for u in eval_corpus.utterances if len(u.text) > len(u.prefix(ctx.prompt_frames)[0])]
    if max_texts is not None:
        utts = utts[:max_texts]
    grids = {u.id: rvq_encode(u.frames, ctx.books) for u in utts}
    rows, per_text, violations = [], [], []
    for entry in models:
        entry.model.eval()
        if entry.model.method.value == "c":
            entry.model.text_cache = {}
        acc = {s: {"wer": [], "ss": [], "dist": [], "trunc": []} for s in strategies}
        for seed in seeds:
            cfg = SamplingConfig(base.top_p, base.temperature, seed, pool)
            for ti, u in enumerate(utts):
                cands = synthesize_pool(entry.model, ctx, u, cfg, ti, grids[u.id])
                chosen = {s: strategy_select(cands, s) for s in STRATEGIES}
                rec = {"model": entry.name, "seed": seed, "utterance": u.id}
                for s in STRATEGIES:
                    rec[f"wer_{s}"] = chosen[s].wer
                    rec[f"ss_{s}"] = chosen[s].ss
                per_text.append(rec)
                if chosen["II"].ss < chosen["I"].ss or chosen["III"].wer > chosen["I"].wer:
                    violations.append(rec)
                for s in strategies:
                    c = chosen[s]
                    acc[s]["wer"].append(c.wer)
                    acc[s]["ss"].append(c.ss)
                    acc[s]["dist"].append(c.distortion)
                    acc[s]["trunc"].append(float(c.truncated))
        entry.model.text_cache = None
        for s in strategies:
            rows.append(
                {
                    "model": entry.name,
                    "method": entry.model.method.value,
                    "lm_preset": entry.meta.get("lm_preset", "-"),
                    "init": entry.meta.get("init", "-"),
                    "adapter": entry.meta.get("adapter", "-"),
                    "strategy": s,
                    "wer_mean": float(np.mean(acc[s]["wer"])),
                    "ss_mean": float(np.mean(acc[s]["ss"])),
                    "dist_mean": float(np.mean(acc[s]["dist"])),
                    "truncation_rate": float(np.mean(acc[s]["trunc"])),
                    "seed_count": len(seeds),
                }
            )
    return BenchmarkResult(rows, per_text, violations)
