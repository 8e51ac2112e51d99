import json

import numpy as np
import pytest
import torch

from codeclm.corpus import Utterance
from codeclm.integration import TokenMap, build_method_a
from codeclm.lm import TransformerLM, preset
from codeclm.numeric import NumericError
from codeclm.pipeline import (
    ABLATION_PRESETS,
    MICRO_BUDGET,
    DataBundle,
    ExperimentConfig,
    MissingArtifact,
    Prerequisites,
    StageConfig,
    checkpoint_interval,
    continual_from,
    lm_sequence_loss,
    make_code_example,
    make_tts_example,
    pack_batches,
    pretrain_nar,
    pretrain_text_lm,
    run_ablation,
    run_experiment,
    train_loop,
    train_tts,
    validate_experiment,
)

TOKENS = TokenMap(32, 16)  # base vocab 34, acoustic 34..49, EOS 50, SEP 51


def one_phoneme_utt():
    return Utterance("golden", (5,), 2, np.zeros((3, 16), np.float32), (3,))


def test_golden_one_phoneme_example():
    ex = make_tts_example(one_phoneme_utt(), None, TOKENS, grid=np.array([[3, 1], [0, 0], [7, 2]]))
    assert ex.input.ids == [32, 5, 51, 37, 34, 41, 50]
    assert ex.loss_mask == [False, False, False, True, True, True, True]
    assert ex.codes == (3, 0, 7) and ex.text == (5,)
    assert ex.speaker_id == 2 and ex.utterance_id == "golden"


def test_example_skipped_when_too_long():
    grid = np.zeros((10, 2), dtype=np.int64)
    assert make_tts_example(one_phoneme_utt(), None, TOKENS, max_positions=8, grid=grid) is None


def test_loss_mask_counts_codes_plus_eos(micro_data):
    grids = micro_data.grids(micro_data.train)
    for u in micro_data.train.utterances[:20]:
        ex = make_tts_example(u, None, micro_data.tokens, grid=grids[u.id])
        assert sum(ex.loss_mask) == u.duration_frames + 1


def test_pack_batches_properties(rng):
    sizes = rng.integers(5, 30, 50).tolist()
    batches = pack_batches(sizes, 100, np.random.default_rng(0))
    flat = [i for b in batches for i in b]
    assert len(flat) == len(set(flat))
    for b in batches:
        assert len(b) == 1 or sum(sizes[i] for i in b) <= 100
    assert pack_batches([7], 3, np.random.default_rng(0)) == [[0]]
    assert pack_batches(sizes, 100, np.random.default_rng(4)) == pack_batches(sizes, 100, np.random.default_rng(4))


def test_checkpoint_interval_and_callback():
    assert checkpoint_interval(50) == 100
    assert checkpoint_interval(5000) == 500
    w = torch.nn.Parameter(torch.ones(3))
    seen = []
    train_loop(lambda idx: (w**2).sum(), [w], [1, 1], StageConfig(steps=250, batch_frames=2), on_checkpoint=seen.append)
    assert seen == [100, 200]


def test_nan_loss_dumps_and_raises(tmp_path):
    w = torch.nn.Parameter(torch.ones(2))
    with pytest.raises(NumericError):
        train_loop(lambda idx: w.sum() * float("nan"), [w], [1], StageConfig(steps=3), dump_dir=tmp_path)
    info = json.loads((tmp_path / "nan_dump.json").read_text())
    assert info["step"] == 1 and info["batch"] == [0]


def test_train_loop_rejects_frozen_params():
    w = torch.nn.Parameter(torch.ones(2), requires_grad=False)
    with pytest.raises(ValueError):
        train_loop(lambda idx: w.sum(), [w], [1], StageConfig(steps=1))


def a_full(data, steps=40, seed=0, lr=2e-3):
    return ExperimentConfig(method="a", init="scratch", adapter="full", train=StageConfig(steps=steps, batch_frames=300, max_lr=lr), seed=seed)


def test_tts_loss_decreases_and_is_deterministic(micro_data):
    _, log1 = run_experiment(a_full(micro_data, 60), micro_data, Prerequisites())
    _, log2 = run_experiment(a_full(micro_data, 60), micro_data, Prerequisites())
    assert log1.losses == log2.losses
    assert np.mean(log1.losses[-10:]) < np.mean(log1.losses[:10]) - 0.5
    _, log3 = run_experiment(a_full(micro_data, 60, seed=1), micro_data, Prerequisites())
    assert log3.losses != log1.losses


def test_single_utterance_overfit(micro_data):
    one = DataBundle(micro_data.train.subset(micro_data.train.utterances[:1]), micro_data.eval, micro_data.books, micro_data.codec)
    _, log = run_experiment(a_full(one, 300, lr=3e-3), one, Prerequisites())
    assert log.losses[-1] < 0.05


def test_continual_objective_is_tts_with_empty_text(rng):
    lm = TransformerLM(preset("tiny", TOKENS.base_vocab), seed=1)
    lm.expand_vocab(TOKENS.extra)
    model = build_method_a(lm, TOKENS, "full")
    codes = [rng.integers(0, 16, 9).tolist(), rng.integers(0, 16, 4).tolist()]
    exs = [make_code_example(c, TOKENS) for c in codes]
    with torch.no_grad():
        cont = lm_sequence_loss(lm, [e.input.ids for e in exs], [e.loss_mask for e in exs], TOKENS.pad)
        tts = model.loss([(), ()], codes)
    torch.testing.assert_close(cont, tts, rtol=1e-5, atol=1e-6)


def test_continual_freeze_text(micro_data):
    lm, _ = pretrain_text_lm("tiny", micro_data, StageConfig(steps=3, batch_frames=100), text_count=50)
    before = lm.tok.detach().clone()
    frozen, _ = continual_from(lm, micro_data, StageConfig(steps=5, batch_frames=200), freeze_text=True)
    assert torch.equal(frozen.tok, before)
    assert frozen.tok.requires_grad
    assert not lm.expanded  # the source LM is untouched
    free, _ = continual_from(lm, micro_data, StageConfig(steps=5, batch_frames=200))
    assert not torch.equal(free.tok, before)


def test_missing_prerequisites(micro_data):
    pre = Prerequisites()
    with pytest.raises(MissingArtifact, match="lm-pretrain"):
        run_experiment(ExperimentConfig(method="a", init="pretrained", adapter="full"), micro_data, pre)
    with pytest.raises(MissingArtifact, match="continual"):
        run_experiment(ExperimentConfig(method="a", init="continual", adapter="full"), micro_data, pre)
    with pytest.raises(MissingArtifact, match="stage valle"):
        run_experiment(ExperimentConfig(method="c", init="scratch"), micro_data, pre)
    with pytest.raises(MissingArtifact):
        pre.need_nar()
    no_unlabeled = DataBundle(micro_data.train, micro_data.eval, micro_data.books, micro_data.codec)
    lm = TransformerLM(preset("tiny", micro_data.tokens.base_vocab))
    with pytest.raises(MissingArtifact, match="unlabeled"):
        continual_from(lm, no_unlabeled, StageConfig(steps=1))


def test_validate_experiment():
    assert validate_experiment(ExperimentConfig()) == []
    assert validate_experiment(ExperimentConfig(method="c", init="continual"))
    assert validate_experiment(ExperimentConfig(method="valle", init="scratch"))
    assert validate_experiment(ExperimentConfig(method="a", valle_adapter="full"))
    assert validate_experiment(ExperimentConfig(lm_preset="giant"))
    with pytest.raises(ValueError):
        ExperimentConfig(init="bogus")
    with pytest.raises(ValueError):
        ExperimentConfig(method="d")


def test_overlapping_splits_rejected(micro_data):
    with pytest.raises(ValueError):
        DataBundle(micro_data.train, micro_data.train, micro_data.books, micro_data.codec)


def test_experiment_config_round_trip():
    e = ExperimentConfig(method="b", lm_preset="small", seed=3)
    assert ExperimentConfig.from_dict(json.loads(json.dumps(e.to_dict()))) == e


EXPECTED_CELLS = {"model_size": 6, "continual": 6, "pretrained_valle": 4, "lora_vs_full": 4}


@pytest.fixture(scope="module")
def micro_nar(micro_data):
    return pretrain_nar(micro_data, "tiny", StageConfig(steps=4, batch_frames=200))[0]


def test_unknown_ablation_preset(micro_data):
    with pytest.raises(KeyError, match="model_size"):
        run_ablation("bogus", micro_data, Prerequisites())


@pytest.mark.parametrize("name", ABLATION_PRESETS)
def test_micro_ablation_structure(name, micro_data, micro_nar):
    rep = run_ablation(name, micro_data, Prerequisites(nar=micro_nar), MICRO_BUDGET)
    assert len(rep.rows) == EXPECTED_CELLS[name] * 3
    assert len({tuple(r[c] for c in rep.label_cols) for r in rep.rows}) == EXPECTED_CELLS[name]
    assert {r["strategy"] for r in rep.rows} == {"I", "II", "III"}
    assert rep.violations == []
    table = rep.table()
    for s in ("Strategy I", "Strategy II", "Strategy III"):
        assert s in table
    lines = rep.csv().strip().splitlines()
    assert lines[0].split(",")[: len(rep.label_cols)] == list(rep.label_cols)
    assert len(lines) == 1 + len(rep.rows)


def test_text_loss_switch(micro_data):
    from codeclm.numeric import log_softmax

    tokens = micro_data.tokens
    lm = TransformerLM(preset("tiny", tokens.base_vocab), seed=2)
    lm.expand_vocab(tokens.extra)
    model = build_method_a(lm, tokens, "full")
    ex = make_tts_example(micro_data.train.utterances[0], micro_data.books, tokens)
    # oracle: mean next-token NLL over text, code and EOS positions
    ids = torch.tensor([ex.input.ids])
    with torch.no_grad():
        logp = log_softmax(lm(ids[:, :-1]))[0]
    nll = [-float(logp[i - 1, ids[0, i]]) for i in range(1, ids.shape[1]) if i <= len(ex.text) or ex.loss_mask[i]]
    assert len(nll) == len(ex.text) + len(ex.codes) + 1
    from codeclm.pipeline import train_tts

    log = train_tts(model, [ex], StageConfig(steps=1, batch_frames=500), text_loss=True)
    assert log.losses[0] == pytest.approx(float(np.mean(nll)), rel=1e-5)
    assert validate_experiment(ExperimentConfig(method="c", text_loss=True))
    assert validate_experiment(ExperimentConfig(method="a", init="scratch", adapter="full", text_loss=True)) == []
