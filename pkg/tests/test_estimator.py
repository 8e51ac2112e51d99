import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from codeclm.estimator import CodecTTS


def small(**kw):
    args = dict(steps=3, pretrain_steps=3, nar_steps=3, batch_frames=200, codebook_size=16)
    args.update(kw)
    return CodecTTS(**args)


def test_params_round_trip():
    est = small(method="c", lora_rank=4)
    assert clone(est).get_params() == est.get_params()
    assert est.set_params(top_p=0.9).top_p == 0.9


def test_unfitted_and_bad_input(micro_data):
    with pytest.raises(NotFittedError):
        small().predict(micro_data.eval)
    with pytest.raises(TypeError):
        small().fit([1, 2, 3])


@pytest.mark.parametrize("method,init,adapter", [("a", "scratch", "full"), ("c", "pretrained", "lora")])
def test_fit_predict_score(micro_data, method, init, adapter):
    est = small(method=method, init=init, adapter=adapter).fit(micro_data.train, codebooks=micro_data.books)
    utts = [u for u in micro_data.eval.utterances if len(u.text) > len(u.prefix(est.context_.prompt_frames)[0])][:2]
    frames = est.predict(utts)
    assert len(frames) == 2 and all(f.shape[1] == micro_data.corpus_config.frame_dim for f in frames)
    again = est.predict(utts)
    assert all(np.array_equal(a, b) for a, b in zip(frames, again))
    s = est.score(utts)
    assert np.isfinite(s) and s <= 0
    pools = est.sample(utts, candidates=3)
    assert [len(p) for p in pools] == [3, 3]
