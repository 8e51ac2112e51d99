"""scikit-learn style wrapper around one complete text-to-speech recipe."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .codec import CodecConfig, train_codebooks
from .corpus import Corpus, Utterance
from .evaluation import SamplingConfig, SynthesisContext, synthesize_pool
from .pipeline import DataBundle, ExperimentConfig, Prerequisites, StageConfig, pretrain_nar, pretrain_text_lm, pretrain_valle, run_experiment


class CodecTTS(BaseEstimator):
    """Fit on a labeled :class:`Corpus`; predict continues each utterance's prompt with its remaining text.

    ``fit`` trains (in order) the codec, whatever pre-trained initializations
    the method needs, the non-autoregressive model and the first-layer model.
    """

    def __init__(
        self,
        method="a",
        lm_preset="tiny",
        valle_preset="tiny",
        init="scratch",
        adapter="full",
        lora_rank=8,
        steps=3000,
        pretrain_steps=2000,
        nar_steps=2000,
        batch_frames=600,
        max_lr=2e-3,
        num_layers=4,
        codebook_size=128,
        frames_per_second=4,
        top_p=1.0,
        temperature=1.0,
        random_state=0,
    ):
        self.method = method
        self.lm_preset = lm_preset
        self.valle_preset = valle_preset
        self.init = init
        self.adapter = adapter
        self.lora_rank = lora_rank
        self.steps = steps
        self.pretrain_steps = pretrain_steps
        self.nar_steps = nar_steps
        self.batch_frames = batch_frames
        self.max_lr = max_lr
        self.num_layers = num_layers
        self.codebook_size = codebook_size
        self.frames_per_second = frames_per_second
        self.top_p = top_p
        self.temperature = temperature
        self.random_state = random_state

    def _stage(self, steps: int) -> StageConfig:
        return StageConfig(steps=steps, batch_frames=self.batch_frames, max_lr=self.max_lr, seed=self.random_state)

    def fit(self, X: Corpus, y=None, codebooks=None):
        if not isinstance(X, Corpus) or len(X) == 0:
            raise TypeError("X must be a nonempty Corpus")
        codec = CodecConfig(self.num_layers, self.codebook_size, X.config.frame_dim, self.frames_per_second)
        books = codebooks if codebooks is not None else train_codebooks(X.all_frames(), codec, seed=self.random_state)
        data = DataBundle(X, X.subset([]), books, codec)
        exp = ExperimentConfig(
            method=self.method, lm_preset=self.lm_preset, valle_preset=self.valle_preset, init=self.init,
            adapter=self.adapter, lora_rank=self.lora_rank, train=self._stage(self.steps), seed=self.random_state,
        )
        pre = Prerequisites()
        if self.method != "valle" and self.init == "pretrained":
            pre.lm[self.lm_preset], _ = pretrain_text_lm(self.lm_preset, data, self._stage(self.pretrain_steps))
        if self.method in ("b", "c", "valle"):
            pre.valle_ar, _ = pretrain_valle(data, self.valle_preset, self._stage(self.pretrain_steps))
        self.nar_ = None
        if self.num_layers > 1:
            self.nar_, _ = pretrain_nar(data, self.valle_preset, self._stage(self.nar_steps))
        self.model_, self.log_ = run_experiment(exp, data, pre)
        self.codebooks_ = books
        self.context_ = SynthesisContext(self.nar_, books, X.templates, data.prompt_frames, X.config.frames_per_phoneme[1])
        return self

    def _utterances(self, X) -> list[Utterance]:
        utts = X.utterances if isinstance(X, Corpus) else list(X)
        if not all(isinstance(u, Utterance) for u in utts):
            raise TypeError("X must be a Corpus or a sequence of Utterance")
        return utts

    def sample(self, X, candidates: int = 1, seed: int = 0):
        """Candidate pools (lists of :class:`Candidate`) per utterance."""
        check_is_fitted(self, "model_")
        cfg = SamplingConfig(self.top_p, self.temperature, seed, candidates)
        return [synthesize_pool(self.model_, self.context_, u, cfg, i) for i, u in enumerate(self._utterances(X))]

    def predict(self, X) -> list[np.ndarray]:
        """Generated frames (continuation after the prompt) for each utterance."""
        return [pool[0].frames for pool in self.sample(X)]

    def score(self, X, y=None) -> float:
        """Negative mean WER of single-candidate synthesis (higher is better)."""
        return -float(np.mean([pool[0].wer for pool in self.sample(X)]))
