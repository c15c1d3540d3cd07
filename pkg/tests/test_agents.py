import numpy as np
import pytest

from refpop.agents import (
    ListenerArch, SpeakerArch, decode_beam, decode_topk, init_listener,
    init_speaker, listen, speak, strip_special,
)
from refpop.autodiff import Tape, reduce_sum
from refpop.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from helpers import finite_diff, max_rel_err

ARCH = SpeakerArch(n_attrs=3, n_values=4, vocab_size=14, emb_size=8,
                   hidden_size=10, max_len=5)
LARCH = ListenerArch(n_attrs=3, n_values=4, vocab_size=14, emb_size=8, hidden_size=10)


def models(seed=0):
    rng = np.random.default_rng(seed)
    return init_speaker(ARCH, rng), init_listener(LARCH, rng)


def random_objects(rng, n):
    return rng.integers(0, ARCH.n_values, size=(n, ARCH.n_attrs))


def test_greedy_is_deterministic_and_never_emits_pad():
    store, _ = models()
    objs = random_objects(np.random.default_rng(1), 6)
    r1 = speak(ARCH, store.tensors(), objs, mode="greedy")
    r2 = speak(ARCH, store.tensors(), objs, mode="greedy")
    assert np.array_equal(r1.tokens, r2.tokens)
    for row, n in zip(r1.tokens, r1.lengths):
        assert ARCH.pad_id not in row[:n]
        assert n <= ARCH.max_len


def test_step_distributions_are_normalized():
    store, _ = models(2)
    objs = random_objects(np.random.default_rng(2), 4)
    res = speak(ARCH, store.tensors(), objs, mode="sample",
                rng=np.random.default_rng(0), keep_step_dists=True)
    for logp in res.step_logps:
        sums = np.exp(logp.data).sum(axis=1)
        assert np.all(np.abs(sums - 1.0) < 1e-9)


def test_sample_frequencies_match_step_distribution():
    # Monte-Carlo: first-step token frequencies over 1e5 draws within 3 sigma
    store, _ = models(3)
    n = 100_000
    objs = np.tile([[1, 2, 3]], (n, 1))
    res = speak(ARCH, store.tensors(), objs, mode="sample",
                rng=np.random.default_rng(7), keep_step_dists=True)
    probs = np.exp(res.step_logps[0].data[0])
    first = res.tokens[:, 0]
    for tok in range(ARCH.vocab_size):
        freq = (first == tok).mean()
        sigma = np.sqrt(probs[tok] * (1 - probs[tok]) / n)
        assert abs(freq - probs[tok]) <= 3 * sigma + 1e-9


def test_teacher_forced_uniform_model_loglik():
    store, _ = models(4)
    store["out_w"].data[:] = 0.0
    store["out_b"].data[:] = 0.0
    forced = np.array([[2, 3, 1], [4, 1, 0]])  # second ends early, then PAD
    res = speak(ARCH, store.tensors(), np.zeros((2, 3), dtype=int),
                mode="teacher", forced=forced)
    assert np.allclose(res.logprob_sum.data,
                       [3 * np.log(1 / 14), 2 * np.log(1 / 14)])
    assert list(res.lengths) == [3, 2]


def test_entropy_values_and_bounds():
    # uniform over V=100 -> ln 100 per step; deterministic -> 0
    arch = SpeakerArch(n_attrs=1, n_values=2, vocab_size=100, emb_size=4,
                       hidden_size=4, max_len=1, pad_id=None, eos_id=None)
    store = init_speaker(arch, np.random.default_rng(0))
    store["out_w"].data[:] = 0.0
    store["out_b"].data[:] = 0.0
    res = speak(arch, store.tensors(), np.array([[0]]), mode="greedy")
    assert np.isclose(res.entropy_mean.data[0], np.log(100), atol=1e-12)
    store["out_b"].data[0] = 1e4  # spike one token -> near-deterministic
    res = speak(arch, store.tensors(), np.array([[0]]), mode="greedy")
    assert res.entropy_mean.data[0] < 1e-6

    sstore, lstore = models(5)
    objs = random_objects(np.random.default_rng(3), 8)
    sres = speak(ARCH, sstore.tensors(), objs, mode="sample",
                 rng=np.random.default_rng(1))
    assert np.all(sres.entropy_mean.data >= 0.0)
    assert np.all(sres.entropy_mean.data <= np.log(ARCH.vocab_size) + 1e-12)
    cands = random_objects(np.random.default_rng(4), 8 * 5).reshape(8, 5, 3)
    lres = listen(LARCH, lstore.tensors(), sres.tokens, cands)
    assert np.all(lres.entropy.data >= -1e-12)
    assert np.all(lres.entropy.data <= np.log(5) + 1e-12)


def test_listener_uniform_over_identical_candidates():
    _, store = models(6)
    cands = np.tile([[1, 2, 3]], (2, 6, 1))
    res = listen(LARCH, store.tensors(), np.array([[5, 1], [7, 1]]), cands)
    assert np.allclose(res.dist, 1 / 6, atol=1e-12)
    # uniform over K+1 = 10 candidates has entropy ln 10
    cands10 = np.tile([[1, 2, 3]], (1, 10, 1))
    res10 = listen(LARCH, store.tensors(), np.array([[5, 1]]), cands10)
    assert np.isclose(res10.entropy.data[0], np.log(10), atol=1e-12)


def test_listener_k0_distribution_is_one():
    _, store = models(7)
    res = listen(LARCH, store.tensors(), np.array([[5, 1]]),
                 np.array([[[1, 2, 3]]]))
    assert np.allclose(res.dist, [[1.0]])


def test_listener_permutation_equivariance():
    _, store = models(8)
    rng = np.random.default_rng(9)
    cands = random_objects(rng, 5)[None, :, :]
    msg = np.array([[3, 9, 1]])
    base = listen(LARCH, store.tensors(), msg, cands).dist[0]
    perm = rng.permutation(5)
    permuted = listen(LARCH, store.tensors(), msg, cands[:, perm]).dist[0]
    assert np.allclose(permuted, base[perm], atol=1e-12)


def test_clone_produces_identical_outputs_until_trained_apart():
    store, _ = models(10)
    dup = store.clone()
    objs = random_objects(np.random.default_rng(5), 4)
    a = speak(ARCH, store.tensors(), objs, mode="greedy")
    b = speak(ARCH, dup.tensors(), objs, mode="greedy")
    assert np.array_equal(a.tokens, b.tokens)
    dup["out_b"].data[2] += 5.0
    c = speak(ARCH, dup.tensors(), objs, mode="greedy")
    assert not np.array_equal(a.tokens, c.tokens)


def test_teacher_forced_gradient_matches_finite_differences():
    store, _ = models(11)
    objs = random_objects(np.random.default_rng(6), 3)
    forced = np.array([[2, 5, 1], [3, 1, 0], [13, 12, 1]])
    names = store.names()
    leaves = [store[n] for n in names]

    def loss_tensor():
        res = speak(ARCH, store.tensors(), objs, mode="teacher", forced=forced)
        return reduce_sum(res.logprob_mean)

    with Tape() as tape:
        grads = tape.grad(loss_tensor(), leaves)
    fd = finite_diff(lambda: float(loss_tensor().data), [t.data for t in leaves])
    for g, ref in zip(grads, fd):
        assert max_rel_err(g.data, ref) < 1e-4


def test_listener_gradient_matches_finite_differences():
    _, store = models(12)
    rng = np.random.default_rng(8)
    cands = random_objects(rng, 8).reshape(2, 4, 3)
    msg = np.array([[4, 9, 1], [6, 1, 0]])
    targets = np.array([2, 0])
    names = store.names()
    leaves = [store[n] for n in names]

    def loss_tensor():
        res = listen(LARCH, store.tensors(), msg, cands)
        from refpop.autodiff import take_rows
        return reduce_sum(take_rows(res.log_dist, targets))

    with Tape() as tape:
        grads = tape.grad(loss_tensor(), leaves)
    fd = finite_diff(lambda: float(loss_tensor().data), [t.data for t in leaves])
    for g, ref in zip(grads, fd):
        assert max_rel_err(g.data, ref) < 1e-4


def test_checkpoint_round_trip(tmp_path):
    store, _ = models(13)
    path = tmp_path / "speaker.ckpt"
    save_checkpoint(path, "speaker", ARCH, store, world_hash="abc123",
                    meta={"iteration": 7})
    kind, arch, loaded, header = load_checkpoint(path)
    assert kind == "speaker"
    assert arch == ARCH
    assert header["meta"]["iteration"] == 7
    assert header["world_hash"] == "abc123"
    assert store.value_equal(loaded)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_beam_and_topk_decode():
    store, _ = models(14)
    obj = np.array([1, 2, 3])
    greedy = speak(ARCH, store.tensors(), obj[None, :], mode="greedy")
    beam1 = decode_beam(ARCH, store.tensors(), obj, n_beams=1)
    assert beam1 == [int(t) for t in greedy.tokens[0, :greedy.lengths[0]]]
    beam4 = decode_beam(ARCH, store.tensors(), obj, n_beams=4)
    assert 0 < len(beam4) <= ARCH.max_len and ARCH.pad_id not in beam4
    toks = decode_topk(ARCH, store.tensors(), obj[None, :], k=3,
                       rng=np.random.default_rng(0))
    assert toks.shape[1] <= ARCH.max_len
    assert ARCH.pad_id not in toks[0, :max(1, (toks[0] != 0).sum())]


def test_strip_special():
    assert strip_special([3, 4, 1, 0, 0]) == [3, 4]
    assert strip_special([1, 0]) == []
    assert strip_special([2, 5], pad_id=None, eos_id=None) == [2, 5]
