"""Two-stage codec language model.

The autoregressive half predicts first-layer codes one frame at a time from a
text representation (attended bidirectionally) and the causal code prefix.
The non-autoregressive half fills layers 2..L, one whole layer per pass,
from the text, an acoustic prompt and the layers decoded so far.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .lm import LM_PRESETS, AdaptedLinear, LoraConfig, Stack, full_mask, prefix_mask
from .numeric import DTYPE


@dataclass(frozen=True)
class StackDims:
    layers: int = 2
    model_dim: int = 64
    heads: int = 4
    ffn_dim: int = 256

    @classmethod
    def preset(cls, name: str) -> "StackDims":
        return cls(**LM_PRESETS[name])


@dataclass(frozen=True)
class ValleConfig:
    text_vocab: int = 32
    num_layers: int = 4
    codebook_size: int = 128
    ar: StackDims = field(default_factory=StackDims)
    nar: StackDims = field(default_factory=StackDims)
    max_positions: int = 192

    def __post_init__(self):
        if self.num_layers < 1 or self.codebook_size < 2 or self.text_vocab < 1:
            raise ValueError(f"invalid VALL-E config {self}")

    @property
    def eos(self) -> int:
        return self.codebook_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ValleConfig":
        d = dict(d)
        d["ar"] = StackDims(**d["ar"])
        d["nar"] = StackDims(**d["nar"])
        return cls(**d)


def pack(parts: list[torch.Tensor]) -> tuple[torch.Tensor, list[int]]:
    """Right-pad a list of (n_i, dim) tensors into (B, T, dim)."""
    lengths = [p.shape[0] for p in parts]
    T = max(lengths)
    out = parts[0].new_zeros(len(parts), T, parts[0].shape[1])
    for b, p in enumerate(parts):
        out[b, : p.shape[0]] = p
    return out, lengths


def gather_rows(x: torch.Tensor, starts: list[int], counts: list[int]) -> torch.Tensor:
    """(B, max(counts), V) slices ``x[b, start:start+count]``, zero padded."""
    n = max(counts)
    out = x.new_zeros(x.shape[0], n, x.shape[2])
    for b, (s, c) in enumerate(zip(starts, counts)):
        out[b, :c] = x[b, s : s + c]
    return out


class ValleAR(nn.Module):
    def __init__(self, cfg: ValleConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        d = cfg.ar
        state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.text_embed = nn.Parameter(torch.randn(cfg.text_vocab, d.model_dim, dtype=DTYPE) * 0.02)
        # row K is the begin-of-speech input token; output K is end-of-speech
        self.acoustic_embed = nn.Parameter(torch.randn(cfg.codebook_size + 1, d.model_dim, dtype=DTYPE) * 0.02)
        self.stack = Stack(d.layers, d.model_dim, d.heads, d.ffn_dim, cfg.max_positions)
        self.head = AdaptedLinear(d.model_dim, cfg.codebook_size + 1)
        torch.random.set_rng_state(state)

    @property
    def dim(self) -> int:
        return self.cfg.ar.model_dim

    def embed_text(self, text: list[int] | torch.Tensor) -> torch.Tensor:
        ids = torch.as_tensor(text, dtype=torch.long)
        if ids.numel() and (int(ids.max()) >= self.cfg.text_vocab or int(ids.min()) < 0):
            raise ValueError("text id out of range")
        return self.text_embed[ids]

    def embed_acoustic(self, prefix: list[int] | torch.Tensor) -> torch.Tensor:
        """Embeddings of ``[BOS] + prefix``."""
        ids = torch.as_tensor(list(prefix), dtype=torch.long)
        if ids.numel() and (int(ids.max()) >= self.cfg.codebook_size or int(ids.min()) < 0):
            raise ValueError(f"acoustic code out of range [0, {self.cfg.codebook_size})")
        ids = torch.cat([torch.tensor([self.cfg.codebook_size]), ids])
        return self.acoustic_embed[ids]

    def run(self, x: torch.Tensor, text_lens: list[int], lengths: list[int]) -> torch.Tensor:
        """Logits for every position of pre-embedded inputs under the prefix mask."""
        allowed = prefix_mask(text_lens, lengths, x.shape[1])
        return self.head(self.stack(x, allowed))

    def logits_batch(self, text_reps: list[torch.Tensor], prefixes: list) -> torch.Tensor:
        """(B, max_prefix+1, K+1): row j predicts code j of each prefix (row len(prefix) predicts the next one)."""
        parts = []
        for rep, pre in zip(text_reps, prefixes):
            if rep.shape[-1] != self.dim:
                raise ValueError(f"text representation dim {rep.shape[-1]} != model dim {self.dim}")
            parts.append(torch.cat([rep, self.embed_acoustic(pre)], 0))
        x, lengths = pack(parts)
        text_lens = [r.shape[0] for r in text_reps]
        logits = self.run(x, text_lens, lengths)
        return gather_rows(logits, text_lens, [len(p) + 1 for p in prefixes])

    def attach_lora(self, cfg: LoraConfig, seed: int = 0) -> None:
        if self.stack.has_lora:
            raise RuntimeError("LoRA adapter already attached")
        self.stack.attach_lora(cfg, torch.Generator().manual_seed(seed))
        lora = {id(p) for p in self.stack.lora_parameters()}
        for p in self.parameters():
            p.requires_grad_(id(p) in lora)


def ar_forward(model: ValleAR, text_rep: torch.Tensor, acoustic_prefix) -> torch.Tensor:
    """(len(prefix)+1) x (K+1) logits; text fully visible, acoustic prefix causal."""
    return model.logits_batch([text_rep], [list(acoustic_prefix)])[0]


class ValleNAR(nn.Module):
    def __init__(self, cfg: ValleConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        d = cfg.nar
        L, K = cfg.num_layers, cfg.codebook_size
        state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.text_embed = nn.Parameter(torch.randn(cfg.text_vocab, d.model_dim, dtype=DTYPE) * 0.02)
        self.code_embed = nn.Parameter(torch.randn(L, K, d.model_dim, dtype=DTYPE) * 0.02)
        self.layer_embed = nn.Parameter(torch.randn(L, d.model_dim, dtype=DTYPE) * 0.02)
        self.stack = Stack(d.layers, d.model_dim, d.heads, d.ffn_dim, cfg.max_positions)
        self.heads = nn.ModuleList([AdaptedLinear(d.model_dim, K) for _ in range(max(L - 1, 0))])
        torch.random.set_rng_state(state)

    def _frames(self, grid: torch.Tensor, n_layers: int) -> torch.Tensor:
        out = self.code_embed.new_zeros(grid.shape[0], self.code_embed.shape[-1])
        for j in range(n_layers):
            out = out + self.code_embed[j][grid[:, j]]
        return out

    def logits_batch(self, texts: list, prompts: list, grids: list, target_layers: list[int]) -> torch.Tensor:
        """(B, max_T, K) logits for each example's target frames.

        ``grids[b]`` holds the target frames' codes for layers ``1..target_layers[b]-1``;
        prompt frames always contribute all of their layers.
        """
        L, K = self.cfg.num_layers, self.cfg.codebook_size
        parts, starts, counts = [], [], []
        for text, prompt, grid, tl in zip(texts, prompts, grids, target_layers):
            if not 2 <= tl <= L:
                raise ValueError(f"target layer {tl} outside [2, {L}]")
            grid = torch.as_tensor(np.asarray(grid), dtype=torch.long)
            if grid.ndim != 2 or grid.shape[1] < tl - 1:
                raise ValueError(f"grid must be (T, >={tl - 1}), got {tuple(grid.shape)}")
            grid = grid[:, : tl - 1]
            prompt = torch.as_tensor(np.asarray(prompt), dtype=torch.long).reshape(-1, L)
            if (grid.numel() and int(grid.max()) >= K) or (prompt.numel() and int(prompt.max()) >= K):
                raise ValueError(f"code out of range [0, {K})")
            t = self.text_embed[torch.as_tensor(text, dtype=torch.long)]
            x = torch.cat([t, self._frames(prompt, L), self._frames(grid, tl - 1)], 0)
            parts.append(x + self.layer_embed[tl - 1])
            starts.append(t.shape[0] + prompt.shape[0])
            counts.append(grid.shape[0])
        x, lengths = pack(parts)
        h = self.stack(x, full_mask(lengths, x.shape[1]))
        h = gather_rows(h, starts, counts)
        all_heads = torch.stack([head(h) for head in self.heads], 1)  # (B, L-1, T, K)
        idx = torch.as_tensor([tl - 2 for tl in target_layers])
        return all_heads[torch.arange(len(idx)), idx]


def nar_forward(model: ValleNAR, text, grid_prefix, target_layer: int, prompt_grid=None) -> torch.Tensor:
    """T x K logits for ``target_layer`` given layers ``1..target_layer-1`` of every frame."""
    L = model.cfg.num_layers
    if not 2 <= target_layer <= L:
        raise ValueError(f"target layer {target_layer} outside [2, {L}]")
    if prompt_grid is None:
        prompt_grid = np.zeros((0, L), dtype=np.int64)
    grid = np.asarray(grid_prefix, dtype=np.int64).reshape(-1, target_layer - 1)
    return model.logits_batch([list(text)], [prompt_grid], [grid], [target_layer])[0]


@torch.no_grad()
def generate_rest_layers_batch(model: ValleNAR, texts: list, first_layers: list, prompts: list) -> list[np.ndarray]:
    """Greedy layer-by-layer completion of several first-layer code sequences."""
    L = model.cfg.num_layers
    grids = [np.zeros((len(f), L), dtype=np.int64) for f in first_layers]
    for g, f in zip(grids, first_layers):
        g[:, 0] = np.asarray(f, dtype=np.int64)
    live = [b for b, f in enumerate(first_layers) if len(f) > 0]
    for layer in range(1, L):
        if not live:
            break
        logits = model.logits_batch(
            [texts[b] for b in live], [prompts[b] for b in live], [grids[b][:, :layer] for b in live], [layer + 1] * len(live)
        )
        best = logits.argmax(-1).numpy()
        for row, b in enumerate(live):
            grids[b][:, layer] = best[row, : len(first_layers[b])]
    return grids


def generate_rest_layers(model: ValleNAR, text, first_layer, prompt_grid) -> np.ndarray:
    if len(first_layer) == 0:
        raise ValueError("first_layer must be nonempty")
    return generate_rest_layers_batch(model, [list(text)], [list(first_layer)], [prompt_grid])[0]
