import io
import json

import numpy as np

from refpop.agents import ListenerArch, SpeakerArch, init_listener, init_speaker
from refpop.game import REWARD_CORRECT, REWARD_WRONG, play, play_batch, run_episodes
from refpop.world import WorldSpec, enumerate_universe

SPEC = WorldSpec(n_attrs=3, n_values=4)
POOL = enumerate_universe(SPEC)


def pair(seed=0):
    s_arch = SpeakerArch(n_attrs=3, n_values=4, vocab_size=SPEC.vocab_size,
                         emb_size=8, hidden_size=12, max_len=4)
    l_arch = ListenerArch(n_attrs=3, n_values=4, vocab_size=SPEC.vocab_size,
                          emb_size=8, hidden_size=12)
    rng = np.random.default_rng(seed)
    return (s_arch, init_speaker(s_arch, rng)), (l_arch, init_listener(l_arch, rng))


def test_reward_rule():
    (sa, ss), (la, ls) = pair()
    batch = play_batch(SPEC, (sa, ss.tensors()), (la, ls.tensors()), POOL,
                       batch_size=64, k=3, rng=np.random.default_rng(0))
    for ep in batch.episodes():
        expected = REWARD_CORRECT if ep.prediction == ep.target_index else REWARD_WRONG
        assert ep.reward == expected
    assert set(np.unique(batch.rewards)) <= {REWARD_CORRECT, REWARD_WRONG}


def test_k0_is_always_correct():
    (sa, ss), (la, ls) = pair(1)
    batch = play_batch(SPEC, (sa, ss.tensors()), (la, ls.tensors()), POOL,
                       batch_size=16, k=0, rng=np.random.default_rng(0))
    assert np.all(batch.rewards == REWARD_CORRECT)
    assert batch.accuracy() == 1.0


def test_batch_of_one_equals_single_play():
    (sa, ss), (la, ls) = pair(2)
    target = POOL[10]
    distractors = POOL[[3, 17, 40]]
    b = run_episodes(SPEC, (sa, ss.tensors()), (la, ls.tensors()),
                     target[None, :], distractors[None, :, :],
                     np.random.default_rng(77))
    single = play(SPEC, (sa, ss.tensors()), (la, ls.tensors()), target,
                  distractors, np.random.default_rng(77))
    ep = b.episodes()[0]
    assert ep.tokens == single.tokens
    assert ep.prediction == single.prediction
    assert ep.reward == single.reward


def test_untrained_accuracy_near_chance():
    (sa, ss), (la, ls) = pair(3)
    k = 3
    batch = play_batch(SPEC, (sa, ss.tensors()), (la, ls.tensors()), POOL,
                       batch_size=4000, k=k, rng=np.random.default_rng(5),
                       speaker_mode="greedy", listener_mode="argmax")
    acc = batch.accuracy()
    assert abs(acc - 1.0 / (k + 1)) < 0.03


def test_target_slot_is_uniform():
    (sa, ss), (la, ls) = pair(4)
    batch = play_batch(SPEC, (sa, ss.tensors()), (la, ls.tensors()), POOL,
                       batch_size=6000, k=4, rng=np.random.default_rng(6))
    counts = np.bincount(batch.target_indices, minlength=5) / len(batch)
    assert np.all(np.abs(counts - 0.2) < 0.02)


def test_distractors_never_contain_target():
    (sa, ss), (la, ls) = pair(5)
    batch = play_batch(SPEC, (sa, ss.tensors()), (la, ls.tensors()), POOL,
                       batch_size=128, k=4, rng=np.random.default_rng(7))
    for ep in batch.episodes():
        assert not any(np.array_equal(d, ep.target) for d in ep.distractors)
        assert np.array_equal(ep.candidates[ep.target_index], ep.target)


def test_trace_log_is_valid_jsonl():
    (sa, ss), (la, ls) = pair(6)
    batch = play_batch(SPEC, (sa, ss.tensors()), (la, ls.tensors()), POOL,
                       batch_size=5, k=2, rng=np.random.default_rng(8))
    buf = io.StringIO()
    batch.write_trace(buf)
    lines = buf.getvalue().strip().split("\n")
    assert len(lines) == 5
    rec = json.loads(lines[0])
    assert set(rec) == {"target", "distractors", "tokens", "prediction", "reward"}
