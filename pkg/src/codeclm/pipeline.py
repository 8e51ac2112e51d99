"""Training stages, experiment recipes and ablation grids."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .codec import CodecConfig, rvq_encode
from .corpus import Corpus, CorpusConfig, Utterance, sample_text
from .evaluation import REPORT_COLUMNS, ModelEntry, SynthesisContext, format_table, run_benchmark
from .integration import (
    AdapterMode,
    ComposedModel,
    Method,
    ProjectionBridge,
    TokenMap,
    build_method_a,
    build_method_b,
    build_method_c,
    build_valle,
    save_composed,
    save_lm,
    save_valle_ar,
)
from .lm import LM_PRESETS, LoraConfig, Segment, TokenSequence, TransformerLM, pad_ids, preset
from .numeric import Adam, NumericError, OptimConfig, backward, cross_entropy
from .valle import StackDims, ValleAR, ValleConfig, ValleNAR

logger = logging.getLogger(__name__)


@dataclass
class TrainingExample:
    input: TokenSequence
    loss_mask: list[bool]
    speaker_id: int
    utterance_id: str
    text: tuple[int, ...] = ()
    codes: tuple[int, ...] = ()

    def __post_init__(self):
        if len(self.loss_mask) != len(self.input):
            raise ValueError("loss_mask must parallel the input sequence")


def make_tts_example(utt: Utterance, books, tokens: TokenMap, max_positions: int | None = None, grid=None) -> TrainingExample | None:
    """``[BOS] text [SEP] first-layer codes [EOS]`` with loss on the codes and EOS."""
    if grid is None:
        grid = rvq_encode(utt.frames, books)
    codes = tuple(int(c) for c in grid[:, 0])
    seq = tokens.tts_sequence(utt.text, codes)
    if max_positions is not None and len(seq) > max_positions:
        logger.warning("skipping %s: %d tokens exceed max_positions %d", utt.id, len(seq), max_positions)
        return None
    mask = [s is Segment.ACOUSTIC for s in seq.segments]
    mask[-1] = True  # EOS
    return TrainingExample(seq, mask, utt.speaker_id, utt.id, tuple(utt.text), codes)


def make_code_example(codes: Sequence[int], tokens: TokenMap, uid: str = "", speaker: int = -1) -> TrainingExample:
    """Unlabeled-speech example: the TTS layout with empty text."""
    seq = tokens.tts_sequence((), codes)
    mask = [s is Segment.ACOUSTIC for s in seq.segments]
    mask[-1] = True
    return TrainingExample(seq, mask, speaker, uid, (), tuple(int(c) for c in codes))


# ---------------------------------------------------------------------------
# stage configuration


def desk_optim(steps: int, max_lr: float = 2e-3, warmup: int | None = None) -> OptimConfig:
    warm = min(steps, max(1, steps // 10)) if warmup is None else warmup
    return OptimConfig(max_lr=max_lr, warmup_steps=warm, total_steps=max(steps, 1))


@dataclass
class StageConfig:
    steps: int = 1000
    batch_frames: int = 600
    max_lr: float = 2e-3
    warmup_steps: int | None = None
    seed: int = 0

    @property
    def optim(self) -> OptimConfig:
        return desk_optim(self.steps, self.max_lr, self.warmup_steps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optim"] = self.optim.to_dict()
        return d


@dataclass
class ExperimentConfig:
    """Everything needed to train one first-layer predictor."""

    method: str = "c"
    lm_preset: str = "tiny"
    valle_preset: str = "tiny"
    init: str = "pretrained"  # LM init: scratch | pretrained | continual
    adapter: str = "lora"  # LM adaptation: lora | full
    valle_init: str = "pretrained"  # pretrained | scratch
    valle_adapter: str = "lora"
    lora_rank: int = 8
    train: StageConfig = field(default_factory=lambda: StageConfig(steps=3000))
    seed: int = 0
    text_loss: bool = False  # also train on text positions (Method A)

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = StageConfig(**{k: v for k, v in self.train.items() if k != "optim"})
        Method(self.method)
        AdapterMode(self.adapter)
        AdapterMode(self.valle_adapter)
        if self.init not in ("scratch", "pretrained", "continual"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.valle_init not in ("scratch", "pretrained"):
            raise ValueError(f"unknown valle_init {self.valle_init!r}")
        if self.train.batch_frames <= 0:
            raise ValueError("batch_frames must be positive")

    @property
    def label(self) -> str:
        m = Method(self.method)
        if m is Method.VALLE:
            return "valle"
        parts = [m.value, self.lm_preset, self.init, self.adapter]
        if m in (Method.B_SUPERPOSED, Method.C_COUPLED):
            parts += [f"valle-{self.valle_init}-{self.valle_adapter}"]
        return "_".join(parts)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**d)


def valle_config(corpus_cfg: CorpusConfig, codec_cfg: CodecConfig, name: str = "tiny", max_positions: int = 192) -> ValleConfig:
    dims = StackDims.preset(name)
    return ValleConfig(corpus_cfg.phoneme_count, codec_cfg.num_layers, codec_cfg.codebook_size, dims, dims, max_positions)


# ---------------------------------------------------------------------------
# generic loop


def pack_batches(sizes: Sequence[int], batch_frames: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffle, then greedily group items whose sizes sum to at most ``batch_frames``.

    The trailing partial batch is dropped unless it is the only one.
    """
    order = rng.permutation(len(sizes))
    batches, cur, total = [], [], 0
    for i in order.tolist():
        if cur and total + sizes[i] > batch_frames:
            batches.append(cur)
            cur, total = [], 0
        cur.append(i)
        total += sizes[i]
    if cur and not batches:
        batches.append(cur)
    return batches


class TrainingLog:
    def __init__(self, path: str | Path | None = None):
        self.rows: list[dict] = []
        self.path = Path(path) if path else None

    def append(self, step: int, loss: float, lr: float, grad_norm: float) -> None:
        self.rows.append({"step": step, "loss": loss, "lr": lr, "grad_norm": grad_norm})

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.rows]

    def write(self, path: str | Path | None = None) -> None:
        path = Path(path) if path else self.path
        if path is None:
            return
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", "lr", "grad_norm"])
            for r in self.rows:
                w.writerow([r["step"], repr(r["loss"]), repr(r["lr"]), repr(r["grad_norm"])])


def checkpoint_interval(steps: int) -> int:
    return max(steps // 10, 100)


def train_loop(
    loss_fn: Callable[[list[int]], torch.Tensor],
    params,
    sizes: Sequence[int],
    stage: StageConfig,
    log: TrainingLog | None = None,
    on_checkpoint: Callable[[int], None] | None = None,
    dump_dir: str | Path | None = None,
) -> TrainingLog:
    """Run ``stage.steps`` Adam updates over seed-ordered packed batches of item indices."""
    log = log or TrainingLog()
    params = [p for p in params if p.requires_grad]
    if not params:
        raise ValueError("nothing to train: no parameter requires grad")
    opt = Adam(params, stage.optim)
    rng = np.random.default_rng(stage.seed)
    batches: list[list[int]] = []
    every = checkpoint_interval(stage.steps)
    torch.manual_seed(stage.seed)
    for step in range(1, stage.steps + 1):
        if not batches:
            batches = pack_batches(sizes, stage.batch_frames, rng)[::-1]
            if not batches:
                raise ValueError("no training items")
        idx = batches.pop()
        opt.zero_grad()
        loss = loss_fn(idx)
        if not torch.isfinite(loss):
            _dump(dump_dir, step, idx, params, loss.item())
            raise NumericError(f"non-finite loss at step {step} (batch {idx[:8]}...)")
        backward(loss)
        gn = opt.grad_norm()
        lr = opt.step()
        log.append(step, loss.item(), lr, gn)
        if on_checkpoint is not None and step % every == 0:
            on_checkpoint(step)
    return log


def _dump(dump_dir, step, idx, params, loss) -> None:
    if dump_dir is None:
        return
    info = {
        "step": step,
        "loss": str(loss),
        "batch": list(map(int, idx)),
        "param_norms": [float(p.detach().double().norm()) for p in params],
        "nonfinite_params": [i for i, p in enumerate(params) if not torch.isfinite(p).all()],
    }
    Path(dump_dir).mkdir(parents=True, exist_ok=True)
    (Path(dump_dir) / "nan_dump.json").write_text(json.dumps(info, indent=2))


# ---------------------------------------------------------------------------
# stages


def encode_corpus(corpus: Corpus, books) -> dict[str, np.ndarray]:
    frames = corpus.all_frames()
    grid = rvq_encode(frames, books)
    out, o = {}, 0
    for u in corpus.utterances:
        out[u.id] = grid[o : o + u.duration_frames]
        o += u.duration_frames
    return out


def tts_items(corpus: Corpus, grids: dict[str, np.ndarray], tokens: TokenMap, max_positions: int) -> list[TrainingExample]:
    items = []
    for u in corpus.utterances:
        ex = make_tts_example(u, None, tokens, max_positions, grid=grids[u.id])
        if ex is not None:
            items.append(ex)
    return items


def train_tts(model: ComposedModel, examples: Sequence[TrainingExample], stage: StageConfig, text_loss: bool = False, **kw) -> TrainingLog:
    """Masked next-code cross-entropy on (text, first-layer codes) pairs.

    ``text_loss`` (Method A only) also scores the text tokens, so the LM keeps
    its language-modeling objective on the conditioning text.
    """
    texts = [ex.text for ex in examples]
    codes = [ex.codes for ex in examples]
    model.train()

    if text_loss:
        if model.method is not Method.A_DIRECT:
            raise ValueError("text_loss applies to Method A only: other heads predict acoustic codes")
        seqs = [ex.input.ids for ex in examples]
        masks = [[m or s is Segment.TEXT for m, s in zip(ex.loss_mask, ex.input.segments)] for ex in examples]

        def loss_fn(idx):
            return lm_sequence_loss(model.lm, [seqs[i] for i in idx], [masks[i] for i in idx], model.tokens.pad)
    else:

        def loss_fn(idx):
            return model.loss([texts[i] for i in idx], [codes[i] for i in idx])

    log = train_loop(loss_fn, model.parameters(), [len(c) + len(t) for c, t in zip(codes, texts)], stage, **kw)
    model.eval()
    return log


def lm_sequence_loss(lm: TransformerLM, seqs: list[list[int]], masks: list[list[bool]], pad: int) -> torch.Tensor:
    """Next-token cross-entropy; ``masks[b][i]`` marks token ``i`` as a prediction target."""
    ids, lengths = pad_ids(seqs, pad)
    logits = lm(ids[:, :-1], [n - 1 for n in lengths])
    tgt = ids[:, 1:]
    m = torch.zeros_like(tgt, dtype=torch.bool)
    for b, mk in enumerate(masks):
        m[b, : len(mk) - 1] = torch.as_tensor(mk[1:], dtype=torch.bool)
    return cross_entropy(logits, tgt, m)


def pretrain_lm(lm: TransformerLM, texts: Sequence[Sequence[int]], tokens: TokenMap, stage: StageConfig, **kw) -> TrainingLog:
    """Next-phoneme pre-training on text-only sequences ``[BOS] text``."""
    seqs = [tokens.text_ids(t) for t in texts]
    masks = [[False] + [True] * (len(s) - 1) for s in seqs]
    lm.train()
    log = train_loop(
        lambda idx: lm_sequence_loss(lm, [seqs[i] for i in idx], [masks[i] for i in idx], tokens.pad),
        lm.parameters(), [len(s) for s in seqs], stage, **kw,
    )
    lm.eval()
    return log


def continual_pretrain(lm: TransformerLM, code_seqs: Sequence[Sequence[int]], tokens: TokenMap, stage: StageConfig, freeze_text: bool = False, **kw) -> TrainingLog:
    """Next-token training on acoustic-only sequences (unlabeled speech)."""
    if not lm.expanded:
        raise ValueError("continual pre-training needs an LM with acoustic tokens")
    exs = [make_code_example(c, tokens) for c in code_seqs]
    seqs = [e.input.ids for e in exs]
    masks = [e.loss_mask for e in exs]
    lm.tok.requires_grad_(not freeze_text)
    lm.train()
    log = train_loop(
        lambda idx: lm_sequence_loss(lm, [seqs[i] for i in idx], [masks[i] for i in idx], tokens.pad),
        lm.parameters(), [len(s) for s in seqs], stage, **kw,
    )
    lm.tok.requires_grad_(True)
    lm.eval()
    return log


def nar_batch(utts: Sequence[Utterance], grids: dict[str, np.ndarray], prompt_frames: int, rng: np.random.Generator, L: int):
    texts, prompts, targets, layers, truth = [], [], [], [], []
    for u in utts:
        g = grids[u.id]
        _, n = u.prefix(prompt_frames)
        if n >= len(g):
            n = 0
        tl = int(rng.integers(2, L + 1))
        texts.append(list(u.text))
        prompts.append(g[:n])
        targets.append(g[n:, : tl - 1])
        layers.append(tl)
        truth.append(g[n:, tl - 1])
    return texts, prompts, targets, layers, truth


def train_nar(nar: ValleNAR, corpus: Corpus, grids: dict[str, np.ndarray], stage: StageConfig, prompt_frames: int, **kw) -> TrainingLog:
    """Uniformly sampled target layer per example; prompt is the utterance's own phoneme-aligned prefix."""
    if nar.cfg.num_layers < 2:
        raise ValueError("NAR training needs at least two codec layers")
    utts = corpus.utterances
    rng = np.random.default_rng(stage.seed + 7919)
    nar.train()

    def loss_fn(idx):
        texts, prompts, targets, layers, truth = nar_batch([utts[i] for i in idx], grids, prompt_frames, rng, nar.cfg.num_layers)
        logits = nar.logits_batch(texts, prompts, targets, layers)
        tgt, lengths = pad_ids([t.tolist() for t in truth], 0)
        mask = torch.arange(tgt.shape[1]).unsqueeze(0) < torch.as_tensor(lengths).unsqueeze(1)
        return cross_entropy(logits, tgt, mask)

    log = train_loop(loss_fn, nar.parameters(), [u.duration_frames + len(u.text) for u in utts], stage, **kw)
    nar.eval()
    return log


def pretraining_texts(corpus: Corpus, count: int, seed: int) -> list[tuple[int, ...]]:
    """Phoneme strings from the corpus' text model, independent of the speech data."""
    rng = np.random.default_rng([seed, 104729])
    lo, hi = corpus.config.text_length
    return [sample_text(rng, corpus.transitions, int(rng.integers(lo, hi + 1))) for _ in range(count)]


# ---------------------------------------------------------------------------
# experiments


@dataclass
class DataBundle:
    """Corpus splits and the codec they are tokenized with."""

    train: Corpus
    eval: Corpus
    books: list[np.ndarray]
    codec: CodecConfig
    unlabeled: Corpus | None = None
    _grids: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        overlap = {u.id for u in self.train.utterances} & {u.id for u in self.eval.utterances}
        if overlap:
            raise ValueError(f"train and eval splits share {len(overlap)} utterances")

    @property
    def corpus_config(self) -> CorpusConfig:
        return self.train.config

    @property
    def tokens(self) -> TokenMap:
        return TokenMap(self.corpus_config.phoneme_count, self.codec.codebook_size)

    @property
    def prompt_frames(self) -> int:
        return 3 * self.codec.frames_per_second

    def grids(self, corpus: Corpus) -> dict[str, np.ndarray]:
        key = id(corpus)
        if key not in self._grids:
            self._grids[key] = encode_corpus(corpus, self.books)
        return self._grids[key]

    def subset_train(self, fraction: float) -> "DataBundle":
        n = max(1, int(round(len(self.train) * fraction)))
        return DataBundle(self.train.subset(self.train.utterances[:n]), self.eval, self.books, self.codec, self.unlabeled)


class MissingArtifact(FileNotFoundError):
    """A prerequisite model or dataset is absent."""


@dataclass
class Prerequisites:
    """Pre-trained initializations an experiment may draw on; keys are LM preset names."""

    lm: dict[str, TransformerLM] = field(default_factory=dict)
    continual: dict[str, TransformerLM] = field(default_factory=dict)
    valle_ar: ValleAR | None = None
    nar: ValleNAR | None = None

    def need_lm(self, name: str) -> TransformerLM:
        if name not in self.lm:
            raise MissingArtifact(f"missing prerequisite: text-pretrained LM for preset {name!r} (run `train --stage lm-pretrain`)")
        return self.lm[name]

    def need_continual(self, name: str) -> TransformerLM:
        if name not in self.continual:
            raise MissingArtifact(f"missing prerequisite: continually pre-trained LM for preset {name!r} (run `train --stage continual`)")
        return self.continual[name]

    def need_valle(self) -> ValleAR:
        if self.valle_ar is None:
            raise MissingArtifact("missing prerequisite: pre-trained codec LM (run `train --stage valle`)")
        return self.valle_ar

    def need_nar(self) -> ValleNAR:
        if self.nar is None:
            raise MissingArtifact("missing prerequisite: non-autoregressive codec LM (run `train --stage valle`)")
        return self.nar


def validate_experiment(exp: ExperimentConfig) -> list[str]:
    """Conflicts between the method and its init/adapter settings."""
    m = Method(exp.method)
    problems = []
    if m is Method.C_COUPLED and exp.init == "continual":
        problems.append("method c encodes text only; a continually pre-trained (acoustic-vocabulary) LM does not apply")
    if m is Method.VALLE and (exp.init != "pretrained" or exp.adapter != "lora"):
        problems.append("method valle has no LM; leave init/adapter at their defaults and use valle_init/valle_adapter")
    if m is Method.A_DIRECT and (exp.valle_init != "pretrained" or exp.valle_adapter != "lora"):
        problems.append("method a has no codec LM or bridge; valle_init/valle_adapter do not apply")
    if exp.text_loss and m is not Method.A_DIRECT:
        problems.append("text_loss applies to method a only")
    if exp.lm_preset not in LM_PRESETS or exp.valle_preset not in LM_PRESETS:
        problems.append(f"unknown preset; choose from {sorted(LM_PRESETS)}")
    return problems


def _lm_init(exp: ExperimentConfig, data: DataBundle, pre: Prerequisites) -> TransformerLM:
    if exp.init == "scratch":
        return TransformerLM(preset(exp.lm_preset, data.tokens.base_vocab), seed=exp.seed)
    src = pre.need_continual(exp.lm_preset) if exp.init == "continual" else pre.need_lm(exp.lm_preset)
    return copy.deepcopy(src)


def _valle_init(exp: ExperimentConfig, data: DataBundle, pre: Prerequisites) -> ValleAR:
    if exp.valle_init == "scratch":
        return ValleAR(valle_config(data.corpus_config, data.codec, exp.valle_preset), seed=exp.seed + 1)
    v = copy.deepcopy(pre.need_valle())
    if v.cfg.ar != StackDims.preset(exp.valle_preset):
        raise ValueError(f"pre-trained codec LM dims {v.cfg.ar} do not match preset {exp.valle_preset!r}")
    return v


def report_meta(exp: ExperimentConfig) -> dict:
    """Label columns of a benchmark row; the codec LM stands in for the LM when there is none."""
    if Method(exp.method) is Method.VALLE:
        return {"lm_preset": "-", "init": exp.valle_init, "adapter": exp.valle_adapter}
    return {"lm_preset": exp.lm_preset, "init": exp.init, "adapter": exp.adapter}


def build_experiment(exp: ExperimentConfig, data: DataBundle, pre: Prerequisites) -> ComposedModel:
    problems = validate_experiment(exp)
    if problems:
        raise ValueError("invalid experiment: " + "; ".join(problems))
    m = Method(exp.method)
    tokens = data.tokens
    lora = LoraConfig(rank=exp.lora_rank)
    if m is Method.VALLE:
        return build_valle(_valle_init(exp, data, pre), tokens, exp.valle_adapter, lora, seed=exp.seed)
    lm = _lm_init(exp, data, pre)
    if m in (Method.A_DIRECT, Method.B_SUPERPOSED) and not lm.expanded:
        lm.expand_vocab(tokens.extra, seed=exp.seed)
    if m is Method.A_DIRECT:
        return build_method_a(lm, tokens, exp.adapter, lora, seed=exp.seed)
    valle = _valle_init(exp, data, pre)
    bridge = ProjectionBridge(lm.cfg.model_dim, valle.dim)
    build = build_method_b if m is Method.B_SUPERPOSED else build_method_c
    return build(lm, valle, bridge, tokens, exp.adapter, exp.valle_adapter, lora, seed=exp.seed)


def checkpointer(directory: str | Path | None, save: Callable[[Path], None]) -> Callable[[int], None] | None:
    """Periodic-checkpoint callback that overwrites ``directory`` with the latest state."""
    if directory is None:
        return None
    directory = Path(directory)

    def on_checkpoint(step: int) -> None:
        save(directory)
        (directory / "step.json").write_text(json.dumps({"step": step}) + "\n")

    return on_checkpoint


def run_experiment(exp: ExperimentConfig, data: DataBundle, pre: Prerequisites, checkpoint_dir=None, **kw) -> tuple[ComposedModel, TrainingLog]:
    model = build_experiment(exp, data, pre)
    items = tts_items(data.train, data.grids(data.train), data.tokens, model.max_positions)
    stage = replace(exp.train, seed=exp.seed)
    kw["on_checkpoint"] = checkpointer(checkpoint_dir, lambda d: save_composed(model, d))
    return model, train_tts(model, items, stage, text_loss=exp.text_loss, **kw)


def pretrain_text_lm(name: str, data: DataBundle, stage: StageConfig, text_count: int = 4000, checkpoint_dir=None, **kw) -> tuple[TransformerLM, TrainingLog]:
    """The desk analogue of a pre-trained LLM: next-phoneme training on text drawn from the corpus' text model."""
    lm = TransformerLM(preset(name, data.tokens.base_vocab), seed=stage.seed)
    texts = pretraining_texts(data.train, text_count, stage.seed)
    kw["on_checkpoint"] = checkpointer(checkpoint_dir, lambda d: save_lm(lm, d))
    return lm, pretrain_lm(lm, texts, data.tokens, stage, **kw)


def continual_from(
    lm: TransformerLM, data: DataBundle, stage: StageConfig, freeze_text: bool = False, checkpoint_dir=None, **kw
) -> tuple[TransformerLM, TrainingLog]:
    if data.unlabeled is None:
        raise MissingArtifact("missing prerequisite: unlabeled speech corpus (gen-corpus writes unlabeled.jsonl)")
    lm = copy.deepcopy(lm)
    if not lm.expanded:
        lm.expand_vocab(data.tokens.extra, seed=stage.seed)
    grids = data.grids(data.unlabeled)
    codes = [grids[u.id][:, 0].tolist() for u in data.unlabeled.utterances]
    kw["on_checkpoint"] = checkpointer(checkpoint_dir, lambda d: save_lm(lm, d))
    return lm, continual_pretrain(lm, codes, data.tokens, stage, freeze_text=freeze_text, **kw)


def pretrain_valle(data: DataBundle, name: str, stage: StageConfig, checkpoint_dir=None, **kw) -> tuple[ValleAR, TrainingLog]:
    """Codec LM trained natively on the labeled corpus (its own text embeddings)."""
    ar = ValleAR(valle_config(data.corpus_config, data.codec, name), seed=stage.seed)
    model = build_valle(ar, data.tokens, AdapterMode.FULL)
    items = tts_items(data.train, data.grids(data.train), data.tokens, model.max_positions)
    kw["on_checkpoint"] = checkpointer(checkpoint_dir, lambda d: save_valle_ar(ar, d))
    return ar, train_tts(model, items, stage, **kw)


def pretrain_nar(data: DataBundle, name: str, stage: StageConfig, **kw) -> tuple[ValleNAR, TrainingLog]:
    nar = ValleNAR(valle_config(data.corpus_config, data.codec, name), seed=stage.seed + 2)
    return nar, train_nar(nar, data.train, data.grids(data.train), stage, data.prompt_frames, **kw)


# ---------------------------------------------------------------------------
# ablations


@dataclass(frozen=True)
class AblationBudget:
    """Step counts and evaluation size for one ablation run."""

    lm_pretrain_steps: int = 2000
    continual_steps: int = 2000
    valle_steps: int = 3000
    tts_steps: int = 3000
    batch_frames: int = 600
    max_lr: float = 2e-3
    eval_texts: int | None = 100
    seeds: tuple[int, ...] = (0, 1, 2)
    pool: int = 5
    small_fraction: float = 0.25

    def stage(self, steps: int, seed: int = 0) -> StageConfig:
        return StageConfig(steps=steps, batch_frames=self.batch_frames, max_lr=self.max_lr, seed=seed)


MICRO_BUDGET = AblationBudget(
    lm_pretrain_steps=4, continual_steps=4, valle_steps=4, tts_steps=4, batch_frames=200,
    eval_texts=2, seeds=(0,), pool=2,
)

# the two LMs compared in the composed-method ablations
ABLATION_LMS = ("small", "base")


@dataclass(frozen=True)
class AblationCell:
    labels: dict
    experiment: ExperimentConfig
    corpus: str = "large"


def _cells(name: str, budget: AblationBudget) -> tuple[tuple[str, ...], list[AblationCell]]:
    st = StageConfig(steps=budget.tts_steps, batch_frames=budget.batch_frames, max_lr=budget.max_lr)

    def exp(**kw):
        return ExperimentConfig(train=st, **kw)

    if name == "model_size":
        cells = [
            AblationCell({"init": label, "lm_preset": size}, exp(method="a", lm_preset=size, init=init, adapter="full"))
            for init, label in (("scratch", "scratch"), ("pretrained", "fine-tune"))
            for size in ("tiny", "small", "base")
        ]
        return ("init", "lm_preset"), cells
    if name == "continual":
        cells = [
            AblationCell({"corpus": corpus, "init": label}, exp(method="a", lm_preset="small", init=init, adapter="full"), corpus)
            for corpus in ("large", "small")
            for init, label in (("scratch", "scratch"), ("pretrained", "fine-tune"), ("continual", "pretrain+fine-tune"))
        ]
        return ("corpus", "init"), cells
    if name == "pretrained_valle":
        cells = [
            AblationCell({"lm_preset": lm, "valle": label}, exp(method="b", lm_preset=lm, valle_init=vi, valle_adapter=va))
            for lm in ABLATION_LMS
            for vi, va, label in (("scratch", "full", "random (full)"), ("pretrained", "lora", "pretrained (lora)"))
        ]
        return ("lm_preset", "valle"), cells
    if name == "lora_vs_full":
        cells = [
            AblationCell({"lm_preset": lm, "valle": va}, exp(method="c", lm_preset=lm, valle_adapter=va))
            for lm in ABLATION_LMS
            for va in ("lora", "full")
        ]
        return ("lm_preset", "valle"), cells
    raise KeyError(name)


ABLATION_PRESETS = ("model_size", "continual", "pretrained_valle", "lora_vs_full")


@dataclass
class AblationReport:
    preset: str
    label_cols: tuple[str, ...]
    rows: list[dict]
    violations: list[dict]
    logs: dict[str, TrainingLog]

    def table(self) -> str:
        return format_table(self.rows, self.label_cols)

    def csv(self) -> str:
        buf = io.StringIO()
        cols = list(self.label_cols) + [c for c in REPORT_COLUMNS if c not in self.label_cols]
        w = csv.DictWriter(buf, cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in cols})
        return buf.getvalue()


def run_ablation(
    name: str,
    data: DataBundle,
    pre: Prerequisites | None = None,
    budget: AblationBudget = AblationBudget(),
    progress: Callable[[str], None] | None = None,
) -> AblationReport:
    """Train every cell of the named grid and benchmark it under strategies I/II/III."""
    if name not in ABLATION_PRESETS:
        raise KeyError(f"unknown ablation preset {name!r}; valid presets: {', '.join(ABLATION_PRESETS)}")
    pre = pre if pre is not None else Prerequisites()
    nar = pre.need_nar()
    say = progress or (lambda msg: logger.info(msg))
    label_cols, cells = _cells(name, budget)
    datasets = {"large": data}
    if any(c.corpus == "small" for c in cells):
        datasets["small"] = data.subset_train(budget.small_fraction)

    # prerequisites the grid needs but the caller did not supply
    for cell in cells:
        e = cell.experiment
        if e.init in ("pretrained", "continual") and Method(e.method) is not Method.VALLE and e.lm_preset not in pre.lm:
            say(f"pre-training LM {e.lm_preset}")
            pre.lm[e.lm_preset], _ = pretrain_text_lm(e.lm_preset, data, budget.stage(budget.lm_pretrain_steps))
        if e.init == "continual" and e.lm_preset not in pre.continual:
            say(f"continual pre-training LM {e.lm_preset}")
            pre.continual[e.lm_preset], _ = continual_from(pre.lm[e.lm_preset], data, budget.stage(budget.continual_steps))
        if Method(e.method) in (Method.B_SUPERPOSED, Method.C_COUPLED, Method.VALLE) and e.valle_init == "pretrained" and pre.valle_ar is None:
            say("pre-training codec LM")
            pre.valle_ar, _ = pretrain_valle(data, e.valle_preset, budget.stage(budget.valle_steps))

    ctx = SynthesisContext(nar, data.books, data.train.templates, data.prompt_frames, data.corpus_config.frames_per_phoneme[1])
    rows, violations, logs = [], [], {}
    for cell in cells:
        tag = "/".join(str(v) for v in cell.labels.values())
        say(f"training {tag}")
        model, log = run_experiment(cell.experiment, datasets[cell.corpus], pre)
        logs[tag] = log
        entry = ModelEntry(tag, model, report_meta(cell.experiment))
        res = run_benchmark(
            [entry], ctx, data.eval, {u.id for u in datasets[cell.corpus].train.utterances},
            pool=budget.pool, seeds=budget.seeds, max_texts=budget.eval_texts,
        )
        for r in res.rows:
            rows.append({**cell.labels, **r})
        violations += res.violations
    return AblationReport(name, label_cols, rows, violations, logs)
