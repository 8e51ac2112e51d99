import numpy as np
import pytest
import torch

from codeclm.lm import LoraConfig
from codeclm.valle import StackDims, ValleAR, ValleConfig, ValleNAR, ar_forward, generate_rest_layers, nar_forward

CFG = ValleConfig(text_vocab=10, num_layers=3, codebook_size=12, ar=StackDims(2, 32, 4, 64), nar=StackDims(2, 32, 4, 64), max_positions=64)


@pytest.fixture
def ar():
    return ValleAR(CFG, seed=1)


@pytest.fixture
def nar():
    return ValleNAR(CFG, seed=2)


def test_config_round_trip_and_validation():
    assert ValleConfig.from_dict(CFG.to_dict()) == CFG
    assert CFG.eos == 12
    with pytest.raises(ValueError):
        ValleConfig(codebook_size=1)


def test_ar_shapes_and_range(ar):
    out = ar_forward(ar, ar.embed_text([1, 2, 3]), [4, 5])
    assert out.shape == (3, 13)
    with pytest.raises(ValueError):
        ar.embed_acoustic([12])
    with pytest.raises(ValueError):
        ar.embed_text([10])
    with pytest.raises(ValueError):
        ar.logits_batch([torch.zeros(2, 16)], [[1]])


def test_ar_causal_in_codes_and_bidirectional_in_text(ar):
    text = [1, 4, 2, 7]
    prefix = [3, 9, 0, 5, 6]
    base = ar_forward(ar, ar.embed_text(text), prefix)
    for j in range(len(prefix)):
        alt = list(prefix)
        alt[j] = (alt[j] + 1) % 12
        out = ar_forward(ar, ar.embed_text(text), alt)
        # row j predicts code j from codes < j
        assert torch.equal(out[: j + 1], base[: j + 1])
        assert not torch.equal(out[j + 1 :], base[j + 1 :])
    alt_text = [1, 4, 2, 8]
    assert not torch.equal(ar_forward(ar, ar.embed_text(alt_text), prefix)[0], base[0])


def test_ar_batch_matches_single(ar):
    texts = [[1, 2], [3, 4, 5, 6]]
    prefixes = [[1, 2, 3, 4], [7]]
    batch = ar.logits_batch([ar.embed_text(t) for t in texts], prefixes)
    for b in range(2):
        single = ar_forward(ar, ar.embed_text(texts[b]), prefixes[b])
        torch.testing.assert_close(batch[b, : len(prefixes[b]) + 1], single, rtol=1e-5, atol=1e-5)


def test_nar_shapes_and_layer_checks(nar, rng):
    grid = rng.integers(0, 12, (6, 3))
    out = nar_forward(nar, [1, 2], grid[:, :1], 2, prompt_grid=grid[:2])
    assert out.shape == (6, 12)
    with pytest.raises(ValueError):
        nar_forward(nar, [1], grid[:, :1], 1)
    with pytest.raises(ValueError):
        nar_forward(nar, [1], grid[:, :1], 4)
    with pytest.raises(ValueError):
        nar.logits_batch([[1]], [grid[:1]], [grid[:, :1]], [3])


def test_nar_sees_every_frame(nar, rng):
    grid = rng.integers(0, 12, (5, 2))
    base = nar_forward(nar, [1, 2], grid[:, :1], 2)
    alt = grid.copy()
    alt[4, 0] = (alt[4, 0] + 1) % 12
    out = nar_forward(nar, [1, 2], alt[:, :1], 2)
    assert not torch.equal(out[0], base[0])  # bidirectional


def test_generate_rest_layers(nar, rng):
    first = rng.integers(0, 12, 7).tolist()
    prompt = rng.integers(0, 12, (3, 3))
    g = generate_rest_layers(nar, [1, 2, 3], first, prompt)
    assert g.shape == (7, 3)
    assert g[:, 0].tolist() == first
    assert g.min() >= 0 and g.max() < 12
    again = generate_rest_layers(nar, [1, 2, 3], first, prompt)
    assert np.array_equal(g, again)
    with pytest.raises(ValueError):
        generate_rest_layers(nar, [1], [], prompt)


def test_ar_lora_freezes_base(ar):
    ar.attach_lora(LoraConfig(rank=2))
    trainable = [n for n, p in ar.named_parameters() if p.requires_grad]
    assert trainable and all("lora" in n for n in trainable)
