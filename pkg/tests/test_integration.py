import pytest
import torch

from codeclm.lm import LM_PRESETS, LoraConfig, TransformerLM, preset
from codeclm.integration import (
    AdapterMode,
    Method,
    ProjectionBridge,
    TokenMap,
    build_method_a,
    build_method_b,
    build_method_c,
    build_valle,
    census,
    load_composed,
    load_lm,
    load_nar,
    load_valle_ar,
    lm_parameter_count,
    reference_census,
    save_composed,
    save_lm,
    save_nar,
    save_valle_ar,
    valle_ar_parameter_count,
)
from codeclm.valle import StackDims, ValleAR, ValleConfig, ValleNAR

P, K = 12, 16
TOKENS = TokenMap(P, K)


def make(method, lm_name="tiny", valle_name="tiny", lm_mode="lora", valle_mode="lora", rank=4, seed=0):
    lora = LoraConfig(rank=rank)
    vcfg = ValleConfig(text_vocab=P, num_layers=2, codebook_size=K, ar=StackDims.preset(valle_name), nar=StackDims.preset("tiny"))
    if method == "valle":
        return build_valle(ValleAR(vcfg, seed=seed), TOKENS, valle_mode, lora)
    lm = TransformerLM(preset(lm_name, TOKENS.base_vocab), seed=seed)
    if method in ("a", "b"):
        lm.expand_vocab(TOKENS.extra, seed=seed)
    if method == "a":
        return build_method_a(lm, TOKENS, lm_mode, lora)
    valle = ValleAR(vcfg, seed=seed + 1)
    bridge = ProjectionBridge(lm.cfg.model_dim, valle.dim)
    build = build_method_b if method == "b" else build_method_c
    return build(lm, valle, bridge, TOKENS, lm_mode, valle_mode, lora)


def randomize_adapters(model):
    g = torch.Generator().manual_seed(7)
    with torch.no_grad():
        for n, p in model.named_parameters():
            if "lora" in n:
                p.copy_(torch.randn(p.shape, generator=g) * 0.05)


def test_token_map_layout():
    assert (TOKENS.bos, TOKENS.pad, TOKENS.base_vocab) == (12, 13, 14)
    assert TOKENS.acoustic(0) == 14 and TOKENS.acoustic(15) == 29
    assert (TOKENS.eos, TOKENS.sep, TOKENS.extra) == (30, 31, 18)
    seq = TOKENS.tts_sequence([3, 4], [0, 5])
    assert seq.ids == [12, 3, 4, 31, 14, 19, 30]
    assert len(seq.segments) == len(seq.ids)
    with pytest.raises(ValueError):
        TOKENS.acoustic(K)
    with pytest.raises(ValueError):
        TOKENS.text_ids([P])


@pytest.mark.parametrize("method", ["a", "b", "c", "valle"])
def test_composed_causality(method, rng):
    model = make(method)
    randomize_adapters(model)
    text = rng.integers(0, P, 5).tolist()
    prefix = rng.integers(0, K, 8).tolist()
    with torch.no_grad():
        base = model.ar_logits([text], [prefix])[0]
        assert base.shape == (9, K + 1)
        for j in range(len(prefix)):
            alt = list(prefix)
            alt[j] = (alt[j] + 1) % K
            out = model.ar_logits([text], [alt])[0]
            assert torch.equal(out[: j + 1], base[: j + 1]), (method, j)
            assert not torch.equal(out[j + 1 :], base[j + 1 :]), (method, j)
        # every prediction depends on the full text
        alt_text = list(text)
        alt_text[-1] = (alt_text[-1] + 1) % P
        out = model.ar_logits([alt_text], [prefix])[0]
        assert not torch.equal(out[0], base[0])


@pytest.mark.parametrize("method", ["a", "b", "c", "valle"])
def test_batched_loss_matches_single(method, rng):
    model = make(method)
    texts = [rng.integers(0, P, n).tolist() for n in (3, 6)]
    codes = [rng.integers(0, K, n).tolist() for n in (7, 2)]
    with torch.no_grad():
        logits = model.ar_logits(texts, codes)
        for b in range(2):
            single = model.ar_logits([texts[b]], [codes[b]])[0]
            torch.testing.assert_close(logits[b, : len(codes[b]) + 1], single, rtol=1e-5, atol=1e-5)
        loss = model.loss(texts, codes)
    assert torch.isfinite(loss) and loss > 0


def test_context_length():
    t = [1, 2, 3]
    assert make("a").context_length(t) == 5
    assert make("c").context_length(t) == 5
    assert make("valle").context_length(t) == 4  # text + begin-of-speech


def test_builder_checks():
    lm = TransformerLM(preset("tiny", TOKENS.base_vocab))
    with pytest.raises(ValueError):
        build_method_a(lm, TOKENS, "full")
    vcfg = ValleConfig(text_vocab=P, num_layers=2, codebook_size=K)
    with pytest.raises(ValueError):
        build_method_c(lm, ValleAR(vcfg), ProjectionBridge(32, 32), TOKENS)
    lm.expand_vocab(TOKENS.extra)
    with pytest.raises(ValueError):
        build_method_c(lm, ValleAR(vcfg), ProjectionBridge(lm.cfg.model_dim, 64), TOKENS)
    with pytest.raises(ValueError):
        build_method_a(lm, TOKENS, "lora", None)


def test_method_c_encoder_sees_text_only():
    model = make("c")
    with pytest.raises(ValueError):
        model.lm(torch.tensor([[TOKENS.base_vocab]]))


@pytest.mark.parametrize("lm_name", sorted(LM_PRESETS))
@pytest.mark.parametrize("valle_name", ["tiny", "small"])
@pytest.mark.parametrize("method", ["a", "b", "c"])
def test_trainable_parameters_match_census(lm_name, valle_name, method):
    model = make(method, lm_name, valle_name, rank=8)
    lm = model.lm.cfg
    v = StackDims.preset(valle_name)
    expected = census(Method(method), lm.layers, lm.model_dim, v.layers, v.model_dim, 8, TOKENS.extra)
    assert model.trainable_parameters() == expected


def test_full_parameter_counts():
    lm = TransformerLM(preset("small", TOKENS.base_vocab))
    assert sum(p.numel() for p in lm.parameters()) == lm_parameter_count(lm.cfg)
    lm.expand_vocab(TOKENS.extra)
    assert sum(p.numel() for p in lm.parameters()) == lm_parameter_count(lm.cfg, TOKENS.extra)
    vcfg = ValleConfig(text_vocab=P, num_layers=2, codebook_size=K, ar=StackDims.preset("small"))
    assert sum(p.numel() for p in ValleAR(vcfg).parameters()) == valle_ar_parameter_count(vcfg)


def test_census_no_method_for_baseline():
    with pytest.raises(ValueError):
        census(Method.VALLE, 2, 8, 2, 8, 1, 0)


# published trainable-parameter figures, in millions, at the reference model shapes
PUBLISHED = {
    ("a", "OPT-350M"): 14, ("a", "LLaMA-7B"): 71,
    ("b", "OPT-350M"): 21, ("b", "LLaMA-7B"): 82,
    ("c", "OPT-350M"): 20, ("c", "LLaMA-7B"): 78,
}


@pytest.mark.parametrize("key", sorted(PUBLISHED))
def test_reference_census_within_ten_percent(key):
    got = reference_census()[key]
    want = PUBLISHED[key] * 1e6
    assert abs(got - want) / want < 0.10, (key, got)


def test_reference_census_hand_value():
    # A at 24 x 1024, rank 64, 4 projections: 24*4*64*2048 adapter weights + 1026 new rows
    assert reference_census()[("a", "OPT-350M")] == 24 * 4 * 64 * 2048 + 1026 * 1024


@pytest.mark.parametrize("method", ["a", "b", "c", "valle"])
@pytest.mark.parametrize("mode", ["lora", "full"])
def test_composed_checkpoint_round_trip(method, mode, tmp_path, rng):
    model = make(method, lm_mode=mode, valle_mode=mode)
    randomize_adapters(model)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.01)
    save_composed(model, tmp_path / "m")
    again = load_composed(tmp_path / "m")
    assert again.descriptor() == model.descriptor()
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), again.named_parameters()):
        assert n1 == n2 and torch.equal(p1, p2) and p1.requires_grad == p2.requires_grad
    text, prefix = rng.integers(0, P, 4).tolist(), rng.integers(0, K, 5).tolist()
    with torch.no_grad():
        assert torch.equal(model.ar_logits([text], [prefix]), again.ar_logits([text], [prefix]))
    save_composed(again, tmp_path / "m2")
    for f in ("lm.ckpt", "valle_ar.ckpt", "bridge.ckpt", "composition.json"):
        a, b = tmp_path / "m" / f, tmp_path / "m2" / f
        assert a.exists() == b.exists()
        if a.exists():
            assert a.read_bytes() == b.read_bytes()


def test_standalone_round_trips(tmp_path):
    lm = TransformerLM(preset("tiny", TOKENS.base_vocab), seed=5)
    lm.expand_vocab(TOKENS.extra, seed=5)
    save_lm(lm, tmp_path / "lm")
    lm2 = load_lm(tmp_path / "lm")
    ids = torch.tensor([[1, 2, TOKENS.sep, TOKENS.acoustic(3)]])
    assert torch.equal(lm(ids), lm2(ids))
    lm.attach_lora(LoraConfig(rank=2))
    with pytest.raises(ValueError):
        save_lm(lm, tmp_path / "lm_lora")

    vcfg = ValleConfig(text_vocab=P, num_layers=3, codebook_size=K)
    ar = ValleAR(vcfg, seed=2)
    save_valle_ar(ar, tmp_path / "ar")
    ar2 = load_valle_ar(tmp_path / "ar")
    assert all(torch.equal(a, b) for a, b in zip(ar.parameters(), ar2.parameters()))
    nar = ValleNAR(vcfg, seed=3)
    save_nar(nar, tmp_path / "nar")
    nar2 = load_nar(tmp_path / "nar")
    assert all(torch.equal(a, b) for a, b in zip(nar.parameters(), nar2.parameters()))


def test_load_rejects_shape_mismatch(tmp_path):
    model = make("a")
    save_composed(model, tmp_path / "m")
    import json

    desc = json.loads((tmp_path / "m" / "composition.json").read_text())
    desc["lm_config"]["model_dim"] = 96
    desc["lm_config"]["ffn_dim"] = 384
    (tmp_path / "m" / "composition.json").write_text(json.dumps(desc))
    with pytest.raises(ValueError):
        load_composed(tmp_path / "m")
