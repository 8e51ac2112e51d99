import numpy as np
import pytest
import torch

from codeclm.codec import CodecConfig, train_codebooks
from codeclm.corpus import CorpusConfig, gen_splits, gen_unlabeled
from codeclm.numeric import configure_threads
from codeclm.pipeline import DataBundle

configure_threads()


@pytest.fixture(scope="session")
def micro_data() -> DataBundle:
    """Small corpus with a 16-entry codec: enough for every code path, fast to train on."""
    cfg = CorpusConfig()
    train, ev = gen_splits(cfg, 60, 8)
    codec = CodecConfig(num_layers=4, codebook_size=16, frame_dim=cfg.frame_dim)
    books = train_codebooks(train.all_frames(), codec, iters=5, seed=0)
    return DataBundle(train, ev, books, codec, gen_unlabeled(cfg, 20))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
