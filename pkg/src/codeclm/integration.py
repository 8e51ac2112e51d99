"""Composition of the language model with the codec LM.

Four first-layer predictors share one interface (:meth:`ComposedModel.ar_logits`
and :meth:`ComposedModel.loss`):

* ``A``  the LM alone, vocabulary extended with acoustic tokens;
* ``B``  the LM encodes text and acoustic tokens, a linear bridge feeds its
  hidden states to the codec-LM stack in place of that stack's embeddings;
* ``C``  the LM encodes text only, the bridged states become the codec LM's
  text representation;
* ``VALLE``  the codec LM on its own (baseline).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import load_tensors, save_tensors
from .lm import LmConfig, LoraConfig, Segment, TokenSequence, TransformerLM, lora_census, pad_ids
from .numeric import DTYPE, cross_entropy, matmul
from .valle import StackDims, ValleAR, ValleConfig, ValleNAR, gather_rows, pack


class Method(str, Enum):
    A_DIRECT = "a"
    B_SUPERPOSED = "b"
    C_COUPLED = "c"
    VALLE = "valle"


class AdapterMode(str, Enum):
    LORA = "lora"
    FULL = "full"
    FROZEN = "frozen"


@dataclass(frozen=True)
class TokenMap:
    """Id layout of the LM vocabulary.

    ``[0, P)`` phonemes, ``P`` BOS, ``P+1`` PAD form the base vocabulary; an
    expansion appends ``K`` acoustic codes, end-of-speech and the speech
    separator.
    """

    phonemes: int
    codebook_size: int

    reserved = 2

    @property
    def bos(self) -> int:
        return self.phonemes

    @property
    def pad(self) -> int:
        return self.phonemes + 1

    @property
    def base_vocab(self) -> int:
        return self.phonemes + 2

    @property
    def extra(self) -> int:
        return self.codebook_size + self.reserved

    @property
    def eos(self) -> int:
        return self.base_vocab + self.codebook_size

    @property
    def sep(self) -> int:
        return self.base_vocab + self.codebook_size + 1

    def acoustic(self, code: int) -> int:
        if not 0 <= code < self.codebook_size:
            raise ValueError(f"code {code} out of range")
        return self.base_vocab + code

    def text_ids(self, text) -> list[int]:
        text = [int(p) for p in text]
        if any(not 0 <= p < self.phonemes for p in text):
            raise ValueError("phoneme id out of range")
        return [self.bos] + text

    def tts_sequence(self, text, codes, eos: bool = True) -> TokenSequence:
        """``[BOS] text [SEP] codes [EOS]`` with segment tags."""
        t = self.text_ids(text)
        a = [self.acoustic(int(c)) for c in codes]
        ids = t + [self.sep] + a + ([self.eos] if eos else [])
        segs = [Segment.SPECIAL] + [Segment.TEXT] * (len(t) - 1) + [Segment.SPECIAL] + [Segment.ACOUSTIC] * len(a)
        if eos:
            segs.append(Segment.SPECIAL)
        return TokenSequence(ids, segs)


class ProjectionBridge(nn.Module):
    """Linear map from LM width to codec-LM width, initialised as a truncated identity."""

    def __init__(self, dim_in: int, dim_out: int):
        super().__init__()
        self.weight = nn.Parameter(torch.eye(dim_out, dim_in, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(dim_out, dtype=DTYPE))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return matmul(h, self.weight.t()) + self.bias


def _set_mode(module: nn.Module, mode: AdapterMode, lora: LoraConfig | None, seed: int, **kw) -> None:
    if mode is AdapterMode.LORA:
        if lora is None:
            raise ValueError("LoRA mode needs a LoraConfig")
        module.attach_lora(lora, seed=seed, **kw)
    else:
        for p in module.parameters():
            p.requires_grad_(mode is AdapterMode.FULL)


class ComposedModel(nn.Module):
    def __init__(self, method: Method, tokens: TokenMap, lm=None, bridge=None, valle=None, modes=None, lora=None):
        super().__init__()
        self.method = Method(method)
        self.tokens = tokens
        self.lm = lm
        self.bridge = bridge
        self.valle = valle
        self.modes = {k: AdapterMode(v) for k, v in (modes or {}).items()}
        self.lora = lora
        self.text_cache: dict | None = None

    @property
    def codebook_size(self) -> int:
        return self.tokens.codebook_size

    @property
    def max_positions(self) -> int:
        if self.method is Method.A_DIRECT:
            return self.lm.cfg.max_positions
        if self.method is Method.B_SUPERPOSED:
            return min(self.lm.cfg.max_positions, self.valle.cfg.max_positions)
        return self.valle.cfg.max_positions

    def context_length(self, text) -> int:
        """Positions consumed before the first acoustic prediction."""
        # [BOS] text [SEP], or [BOS] text + begin-of-speech for Method C
        return len(text) + (1 if self.method is Method.VALLE else 2)

    # text encoders --------------------------------------------------------

    def encode_text(self, text) -> torch.Tensor:
        """Method C text representation: LM states of ``[BOS] text`` through the bridge."""
        ids = self.tokens.text_ids(text)
        if max(ids) >= self.lm.cfg.base_vocab:
            raise ValueError("acoustic ids must not be passed to the text encoder")
        key = tuple(ids)
        if self.text_cache is not None and key in self.text_cache:
            return self.text_cache[key]
        rep = self.bridge(self.lm.hidden(torch.as_tensor(ids).unsqueeze(0))[0])
        if self.text_cache is not None:
            self.text_cache[key] = rep
        return rep

    def _lm_batch(self, texts, prefixes):
        seqs = [self.tokens.tts_sequence(t, p, eos=False).ids for t, p in zip(texts, prefixes)]
        ids, lengths = pad_ids(seqs, self.tokens.pad)
        starts = [len(t) + 1 for t in texts]  # index of SEP
        return ids, lengths, starts

    def full_logits(self, texts, prefixes) -> tuple[torch.Tensor, list[int]]:
        """Method A: full-vocabulary logits at SEP and acoustic positions."""
        ids, lengths, starts = self._lm_batch(texts, prefixes)
        logits = self.lm(ids, lengths)
        return gather_rows(logits, starts, [len(p) + 1 for p in prefixes]), starts

    def ar_logits(self, texts, prefixes) -> torch.Tensor:
        """(B, max_prefix+1, K+1) next-code logits (last column is end-of-speech)."""
        K = self.codebook_size
        counts = [len(p) + 1 for p in prefixes]
        if self.method is Method.A_DIRECT:
            full, _ = self.full_logits(texts, prefixes)
            base = self.tokens.base_vocab
            return full[..., base : base + K + 1]
        if self.method is Method.B_SUPERPOSED:
            ids, lengths, starts = self._lm_batch(texts, prefixes)
            x = self.bridge(self.lm.hidden(ids, lengths))
            logits = self.valle.run(x, starts, lengths)
            return gather_rows(logits, starts, counts)
        if self.method is Method.C_COUPLED:
            reps = [self.encode_text(t) for t in texts]
        else:
            reps = [self.valle.embed_text(list(t)) for t in texts]
        return self.valle.logits_batch(reps, [list(p) for p in prefixes])

    def loss(self, texts, codes) -> torch.Tensor:
        """Cross-entropy of every code and the final end-of-speech given the text."""
        K = self.codebook_size
        targets = [list(c) + [K] for c in codes]
        tgt, lengths = pad_ids(targets, 0)
        mask = torch.arange(tgt.shape[1]).unsqueeze(0) < torch.as_tensor(lengths).unsqueeze(1)
        if self.method is Method.A_DIRECT:
            logits, _ = self.full_logits(texts, codes)
            return cross_entropy(logits, tgt + self.tokens.base_vocab, mask)
        return cross_entropy(self.ar_logits(texts, codes), tgt, mask)

    def trainable_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    def descriptor(self) -> dict:
        return {
            "method": self.method.value,
            "adapter_mode": {k: v.value for k, v in self.modes.items()},
            "tokens": {"phonemes": self.tokens.phonemes, "codebook_size": self.tokens.codebook_size},
            "lora": None if self.lora is None else {"rank": self.lora.rank, "alpha": self.lora.alpha, "targets": list(self.lora.targets)},
            "lm_config": None if self.lm is None else self.lm.cfg.to_dict(),
            "lm_expanded": bool(self.lm is not None and self.lm.expanded),
            "valle_config": None if self.valle is None else self.valle.cfg.to_dict(),
            "bridge": None if self.bridge is None else list(self.bridge.weight.shape),
        }


def build_method_a(lm: TransformerLM, tokens: TokenMap, mode=AdapterMode.LORA, lora: LoraConfig | None = None, seed: int = 0):
    if not lm.expanded:
        raise ValueError("Method A needs an LM whose vocabulary includes acoustic tokens")
    mode = AdapterMode(mode)
    _set_mode(lm, mode, lora, seed)
    return ComposedModel(Method.A_DIRECT, tokens, lm=lm, modes={"lm": mode}, lora=lora if mode is AdapterMode.LORA else None)


def _check_bridge(lm, bridge, valle):
    if bridge.weight.shape != (valle.dim, lm.cfg.model_dim):
        raise ValueError(f"bridge {tuple(bridge.weight.shape)} does not map {lm.cfg.model_dim} -> {valle.dim}")


def build_method_b(lm, valle: ValleAR, bridge, tokens: TokenMap, lm_mode=AdapterMode.LORA, valle_mode=AdapterMode.LORA, lora=None, seed=0):
    if not lm.expanded:
        raise ValueError("Method B needs an LM whose vocabulary includes acoustic tokens")
    _check_bridge(lm, bridge, valle)
    lm_mode, valle_mode = AdapterMode(lm_mode), AdapterMode(valle_mode)
    _set_mode(lm, lm_mode, lora, seed)
    _set_mode(valle, valle_mode, lora, seed + 1)
    # the LM supplies every input representation: both codec-LM embedding tables are bypassed
    valle.text_embed.requires_grad_(False)
    valle.acoustic_embed.requires_grad_(False)
    return ComposedModel(Method.B_SUPERPOSED, tokens, lm, bridge, valle, {"lm": lm_mode, "valle": valle_mode}, lora)


def build_method_c(lm, valle: ValleAR, bridge, tokens: TokenMap, lm_mode=AdapterMode.LORA, valle_mode=AdapterMode.LORA, lora=None, seed=0):
    if lm.expanded:
        raise ValueError("Method C uses a text-only LM; do not expand its vocabulary")
    _check_bridge(lm, bridge, valle)
    lm_mode, valle_mode = AdapterMode(lm_mode), AdapterMode(valle_mode)
    _set_mode(lm, lm_mode, lora, seed)
    _set_mode(valle, valle_mode, lora, seed + 1)
    valle.text_embed.requires_grad_(False)
    return ComposedModel(Method.C_COUPLED, tokens, lm, bridge, valle, {"lm": lm_mode, "valle": valle_mode}, lora)


def build_valle(valle: ValleAR, tokens: TokenMap, mode=AdapterMode.FULL, lora=None, seed=0):
    mode = AdapterMode(mode)
    _set_mode(valle, mode, lora, seed)
    return ComposedModel(Method.VALLE, tokens, valle=valle, modes={"valle": mode}, lora=lora if mode is AdapterMode.LORA else None)


# ---------------------------------------------------------------------------
# closed-form parameter census


def lm_parameter_count(cfg: LmConfig, extra: int = 0) -> int:
    d, f = cfg.model_dim, cfg.ffn_dim
    block = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d
    return (cfg.base_vocab + extra) * d + cfg.max_positions * d + cfg.layers * block + 2 * d


def valle_ar_parameter_count(cfg: ValleConfig, with_text: bool = True, with_acoustic: bool = True) -> int:
    d, f, K = cfg.ar.model_dim, cfg.ar.ffn_dim, cfg.codebook_size
    block = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d
    n = cfg.max_positions * d + cfg.ar.layers * block + 2 * d + (d * (K + 1) + K + 1)
    if with_text:
        n += cfg.text_vocab * d
    if with_acoustic:
        n += (K + 1) * d
    return n


def census(method: Method, lm_layers: int, lm_dim: int, valle_layers: int, valle_dim: int, rank: int, extra: int, n_targets: int = 4) -> int:
    """Trainable parameters when both sub-models carry LoRA adapters on ``n_targets`` projections.

    A: LM adapters + new vocabulary rows.  B: A + bridge + codec-LM adapters.
    C: B without the new vocabulary rows.
    """
    lm = lora_census(lm_layers, lm_dim, lm_dim, rank, n_targets)
    rows = extra * lm_dim
    bridge = lm_dim * valle_dim + valle_dim
    valle = lora_census(valle_layers, valle_dim, valle_dim, rank, n_targets)
    method = Method(method)
    if method is Method.A_DIRECT:
        return lm + rows
    if method is Method.B_SUPERPOSED:
        return lm + rows + bridge + valle
    if method is Method.C_COUPLED:
        return lm + bridge + valle
    raise ValueError(f"no adapter census for {method}")


# published model shapes: (layers, width)
REFERENCE_LLMS = {"OPT-350M": (24, 1024), "LLaMA-7B": (32, 4096)}
REFERENCE_VALLE = (12, 1024)
REFERENCE_RANK = 64
REFERENCE_CODEBOOK = 1024


def reference_census() -> dict[tuple[str, str], int]:
    extra = REFERENCE_CODEBOOK + TokenMap.reserved
    out = {}
    for name, (layers, dim) in REFERENCE_LLMS.items():
        for m in (Method.A_DIRECT, Method.B_SUPERPOSED, Method.C_COUPLED):
            out[(m.value, name)] = census(m, layers, dim, *REFERENCE_VALLE, REFERENCE_RANK, extra)
    return out


# ---------------------------------------------------------------------------
# persistence

_RULES = [
    (re.compile(r"^stack\.layers\.(\d+)\.(attn\.)?(\w+)\.lora_([AB])$"), r"lora.layer\1.\3.\4"),
    (re.compile(r"^stack\.layers\.(\d+)\.attn\.(\w+)\.weight$"), r"layer\1.attn.\2"),
    (re.compile(r"^stack\.layers\.(\d+)\.(.+)$"), r"layer\1.\2"),
    (re.compile(r"^stack\.pos$"), "embed.pos"),
    (re.compile(r"^stack\.(.+)$"), r"\1"),
    (re.compile(r"^tok$"), "embed.tok"),
    (re.compile(r"^acoustic$"), "embed.acoustic"),
]


def tensor_name(prefix: str, param_name: str) -> str:
    for pat, repl in _RULES:
        if pat.match(param_name):
            return f"{prefix}.{pat.sub(repl, param_name)}"
    return f"{prefix}.{param_name}"


def module_tensors(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {tensor_name(prefix, n): p.detach().numpy() for n, p in module.named_parameters()}


def load_module_tensors(module: nn.Module, prefix: str, tensors: dict[str, np.ndarray]) -> None:
    with torch.no_grad():
        for n, p in module.named_parameters():
            key = tensor_name(prefix, n)
            if key not in tensors:
                raise KeyError(f"checkpoint lacks tensor {key!r}")
            if tuple(tensors[key].shape) != tuple(p.shape):
                raise ValueError(f"{key}: checkpoint shape {tensors[key].shape} != model shape {tuple(p.shape)}")
            p.copy_(torch.from_numpy(tensors[key]))


def save_composed(model: ComposedModel, directory: str | Path) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    desc = model.descriptor()
    for part, prefix, fname in (("lm", "lm", "lm.ckpt"), ("valle", "valle.ar", "valle_ar.ckpt"), ("bridge", "bridge", "bridge.ckpt")):
        mod = getattr(model, part)
        key = f"{part}_ckpt"
        if mod is None:
            desc[key] = None
            continue
        save_tensors(directory / fname, module_tensors(mod, prefix))
        desc[key] = fname
    (directory / "composition.json").write_text(json.dumps(desc, indent=2, sort_keys=True))
    return desc


def load_composed(directory: str | Path) -> ComposedModel:
    directory = Path(directory)
    desc = json.loads((directory / "composition.json").read_text())
    tokens = TokenMap(**desc["tokens"])
    lora = None if desc["lora"] is None else LoraConfig(desc["lora"]["rank"], desc["lora"]["alpha"], tuple(desc["lora"]["targets"]))
    modes = desc["adapter_mode"]
    lm = valle = bridge = None
    if desc["lm_config"] is not None:
        lm = TransformerLM(LmConfig(**desc["lm_config"]))
        if desc["lm_expanded"]:
            lm.expand_vocab(tokens.extra)
    if desc["valle_config"] is not None:
        valle = ValleAR(ValleConfig.from_dict(desc["valle_config"]))
    if desc["bridge"] is not None:
        bridge = ProjectionBridge(desc["bridge"][1], desc["bridge"][0])
    method = Method(desc["method"])
    if method is Method.A_DIRECT:
        model = build_method_a(lm, tokens, modes["lm"], lora)
    elif method is Method.B_SUPERPOSED:
        model = build_method_b(lm, valle, bridge, tokens, modes["lm"], modes["valle"], lora)
    elif method is Method.C_COUPLED:
        model = build_method_c(lm, valle, bridge, tokens, modes["lm"], modes["valle"], lora)
    else:
        model = build_valle(valle, tokens, modes["valle"], lora)
    for part, prefix in (("lm", "lm"), ("valle", "valle.ar"), ("bridge", "bridge")):
        mod = getattr(model, part)
        if mod is not None:
            load_module_tensors(mod, prefix, load_tensors(directory / desc[f"{part}_ckpt"]))
    return model


def save_nar(nar: ValleNAR, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_tensors(directory / "valle_nar.ckpt", module_tensors(nar, "valle.nar"))
    (directory / "valle_nar.json").write_text(json.dumps(nar.cfg.to_dict(), indent=2, sort_keys=True))


def load_nar(directory: str | Path) -> ValleNAR:
    directory = Path(directory)
    nar = ValleNAR(ValleConfig.from_dict(json.loads((directory / "valle_nar.json").read_text())))
    load_module_tensors(nar, "valle.nar", load_tensors(directory / "valle_nar.ckpt"))
    return nar


def save_lm(lm: TransformerLM, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if lm.stack.has_lora:
        raise ValueError("merge LoRA adapters before saving a standalone LM")
    save_tensors(directory / "lm.ckpt", module_tensors(lm, "lm"))
    meta = {"lm_config": lm.cfg.to_dict(), "extra": lm.acoustic.shape[0] if lm.expanded else 0}
    (directory / "lm.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_lm(directory: str | Path) -> TransformerLM:
    directory = Path(directory)
    meta = json.loads((directory / "lm.json").read_text())
    lm = TransformerLM(LmConfig(**meta["lm_config"]))
    if meta["extra"]:
        lm.expand_vocab(meta["extra"])
    load_module_tensors(lm, "lm", load_tensors(directory / "lm.ckpt"))
    return lm


def save_valle_ar(ar: ValleAR, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if ar.stack.has_lora:
        raise ValueError("merge LoRA adapters before saving a standalone codec LM")
    save_tensors(directory / "valle_ar.ckpt", module_tensors(ar, "valle.ar"))
    (directory / "valle_ar.json").write_text(json.dumps(ar.cfg.to_dict(), indent=2, sort_keys=True))


def load_valle_ar(directory: str | Path) -> ValleAR:
    directory = Path(directory)
    ar = ValleAR(ValleConfig.from_dict(json.loads((directory / "valle_ar.json").read_text())))
    load_module_tensors(ar, "valle.ar", load_tensors(directory / "valle_ar.ckpt"))
    return ar
