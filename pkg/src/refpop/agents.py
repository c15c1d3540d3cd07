"""Speaker and listener networks: GRU message generation and candidate scoring.

Forward passes are functional: they take any name->Tensor mapping, so the
same code serves normal training (the store's own leaves) and meta-adaptation
(tensors produced by an inner update). Sampling draws stay outside the graph;
log-probabilities and entropies of the sampled steps stay inside it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor, embedding, log_softmax, matmul, reduce_sum, reshape, scale, tanh,
    sigmoid, take_rows, exp, mul, add,
)
from .params import ParameterStore

NEG_INF = -1e9


@dataclass(frozen=True)
class SpeakerArch:
    n_attrs: int
    n_values: int
    vocab_size: int
    emb_size: int = 32
    hidden_size: int = 64
    max_len: int = 6
    pad_id: int | None = 0
    eos_id: int | None = 1

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "n_attrs", "n_values", "vocab_size", "emb_size", "hidden_size",
            "max_len", "pad_id", "eos_id")}


@dataclass(frozen=True)
class ListenerArch:
    n_attrs: int
    n_values: int
    vocab_size: int
    emb_size: int = 32
    hidden_size: int = 64
    pad_id: int | None = 0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "n_attrs", "n_values", "vocab_size", "emb_size", "hidden_size", "pad_id")}


@dataclass
class Message:
    """One emitted message with its sampling statistics."""

    tokens: list[int]
    logprob: float | None = None
    entropy: float | None = None


def one_hot_objects(n_attrs: int, n_values: int, objects: np.ndarray) -> np.ndarray:
    objects = np.asarray(objects, dtype=np.int64)
    flat = np.zeros((objects.shape[0], n_attrs * n_values))
    cols = np.arange(n_attrs)[None, :] * n_values + objects
    flat[np.arange(objects.shape[0])[:, None], cols] = 1.0
    return flat


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    b = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-b, b, size=shape)


def _add_gru(store: ParameterStore, rng: np.random.Generator, emb: int, hidden: int) -> None:
    for gate in ("r", "z", "n"):
        store.add(f"gru_i{gate}_w", _uniform(rng, (emb, hidden), emb))
        store.add(f"gru_h{gate}_w", _orthogonal(rng, hidden))
        store.add(f"gru_{gate}_b", np.zeros(hidden))


def init_speaker(arch: SpeakerArch, rng: np.random.Generator) -> ParameterStore:
    store = ParameterStore()
    obj_dim = arch.n_attrs * arch.n_values
    store.add("enc_w", _uniform(rng, (obj_dim, arch.hidden_size), obj_dim))
    store.add("enc_b", np.zeros(arch.hidden_size))
    store.add("embed", _uniform(rng, (arch.vocab_size, arch.emb_size), arch.emb_size))
    store.add("start", _uniform(rng, (arch.emb_size,), arch.emb_size))
    _add_gru(store, rng, arch.emb_size, arch.hidden_size)
    store.add("out_w", _uniform(rng, (arch.hidden_size, arch.vocab_size), arch.hidden_size))
    store.add("out_b", np.zeros(arch.vocab_size))
    return store


def init_listener(arch: ListenerArch, rng: np.random.Generator) -> ParameterStore:
    store = ParameterStore()
    obj_dim = arch.n_attrs * arch.n_values
    store.add("embed", _uniform(rng, (arch.vocab_size, arch.emb_size), arch.emb_size))
    _add_gru(store, rng, arch.emb_size, arch.hidden_size)
    store.add("obj_w", _uniform(rng, (obj_dim, arch.hidden_size), obj_dim))
    store.add("obj_b", np.zeros(arch.hidden_size))
    return store


def gru_step(p: dict, x: Tensor, h: Tensor) -> Tensor:
    r = sigmoid(add(add(matmul(x, p["gru_ir_w"]), matmul(h, p["gru_hr_w"])), p["gru_r_b"]))
    z = sigmoid(add(add(matmul(x, p["gru_iz_w"]), matmul(h, p["gru_hz_w"])), p["gru_z_b"]))
    n = tanh(add(add(matmul(x, p["gru_in_w"]), mul(r, matmul(h, p["gru_hn_w"]))), p["gru_n_b"]))
    return add(mul(sub_one(z), n), mul(z, h))


def sub_one(z: Tensor) -> Tensor:
    return add(scale(z, -1.0), 1.0)


@dataclass
class SpeakResult:
    """Batched rollout: token arrays plus graph-connected statistics."""

    tokens: np.ndarray            # (B, T) with PAD after EOS
    lengths: np.ndarray           # emitted tokens incl. EOS
    logprob_sum: Tensor           # (B,)
    logprob_mean: Tensor          # (B,), the 1/l-weighted log-likelihood
    entropy_mean: Tensor          # (B,), mean per-step policy entropy
    step_logps: list[Tensor] | None = None
    step_masks: list[np.ndarray] | None = None

    def messages(self) -> list[Message]:
        out = []
        for row, n, lp, ent in zip(self.tokens, self.lengths,
                                   self.logprob_sum.data, self.entropy_mean.data):
            out.append(Message(tokens=[int(t) for t in row[:n]],
                               logprob=float(lp), entropy=float(ent)))
        return out


def speak(arch: SpeakerArch, p: dict, objects: np.ndarray, mode: str = "sample",
          rng: np.random.Generator | None = None, forced: np.ndarray | None = None,
          keep_step_dists: bool = False) -> SpeakResult:
    """Generate (or score) one message per object.

    Modes: ``sample`` draws from the step distribution, ``greedy`` takes the
    argmax (ties -> lowest token id), ``teacher`` conditions on ``forced`` and
    returns its log-likelihood. Generation never emits PAD and stops at EOS or
    max_len; positions after EOS are masked out of every statistic.
    """
    objects = np.asarray(objects, dtype=np.int64)
    bsz = objects.shape[0]
    if mode == "sample" and rng is None:
        raise ValueError("sample mode needs an rng")
    if mode == "teacher":
        if forced is None:
            raise ValueError("teacher mode needs forced tokens")
        forced = np.asarray(forced, dtype=np.int64)
        n_steps = forced.shape[1]
    else:
        n_steps = arch.max_len

    onehot = Tensor(one_hot_objects(arch.n_attrs, arch.n_values, objects))
    h = tanh(add(matmul(onehot, p["enc_w"]), p["enc_b"]))
    x = matmul(Tensor(np.ones((bsz, 1))), reshape(p["start"], (1, arch.emb_size)))

    ban_pad = arch.pad_id is not None and mode != "teacher"
    if ban_pad:
        pad_mask = np.zeros(arch.vocab_size)
        pad_mask[arch.pad_id] = NEG_INF

    tokens = np.full((bsz, n_steps), arch.pad_id if arch.pad_id is not None else 0,
                     dtype=np.int64)
    alive = np.ones(bsz, dtype=bool)
    if mode == "teacher" and arch.pad_id is not None:
        alive = forced[:, 0] != arch.pad_id

    lp_sum = Tensor(np.zeros(bsz))
    ent_sum = Tensor(np.zeros(bsz))
    counts = np.zeros(bsz)
    step_logps = [] if keep_step_dists else None
    step_masks = [] if keep_step_dists else None
    used_steps = 0

    for t in range(n_steps):
        logits = add(matmul(h, p["out_w"]), p["out_b"])
        if ban_pad:
            logits = add(logits, Tensor(pad_mask))
        logp = log_softmax(logits, axis=1)

        if mode == "sample":
            probs = np.exp(logp.data)
            u = rng.random(bsz)
            ids = np.minimum((u[:, None] >= probs.cumsum(axis=1)).sum(axis=1),
                             arch.vocab_size - 1)
        elif mode == "greedy":
            ids = logp.data.argmax(axis=1)
        elif mode == "teacher":
            ids = forced[:, t].copy()
        else:
            raise ValueError(f"unknown speak mode '{mode}'")

        mask = alive.astype(np.float64)
        mask_t = Tensor(mask)
        lp_sum = add(lp_sum, mul(take_rows(logp, ids), mask_t))
        probs_t = exp(logp)
        ent = scale(reduce_sum(mul(probs_t, logp), axis=1), -1.0)
        ent_sum = add(ent_sum, mul(ent, mask_t))
        counts += mask
        if keep_step_dists:
            step_logps.append(logp)
            step_masks.append(mask)

        tokens[:, t] = np.where(alive, ids,
                                arch.pad_id if arch.pad_id is not None else 0)
        used_steps = t + 1

        if mode == "teacher":
            if t + 1 < n_steps and arch.pad_id is not None:
                alive = forced[:, t + 1] != arch.pad_id
            elif t + 1 >= n_steps:
                alive = np.zeros(bsz, dtype=bool)
        elif arch.eos_id is not None:
            alive = alive & (ids != arch.eos_id)

        if not alive.any():
            break
        x = embedding(p["embed"], tokens[:, t])
        h = gru_step(p, x, h)

    lengths = np.maximum(counts, 1.0)
    inv_len = Tensor(1.0 / lengths)
    return SpeakResult(
        tokens=tokens[:, :used_steps],
        lengths=counts.astype(np.int64),
        logprob_sum=lp_sum,
        logprob_mean=mul(lp_sum, inv_len),
        entropy_mean=mul(ent_sum, inv_len),
        step_logps=step_logps,
        step_masks=step_masks,
    )


@dataclass
class ListenResult:
    log_dist: Tensor              # (B, C) log-probabilities over candidates
    entropy: Tensor               # (B,)

    @property
    def dist(self) -> np.ndarray:
        return np.exp(self.log_dist.data)

    def predictions(self) -> np.ndarray:
        return self.log_dist.data.argmax(axis=1)


def encode_message(arch: ListenerArch, p: dict, tokens: np.ndarray) -> Tensor:
    """GRU encoding of token rows; PAD positions leave the state unchanged."""
    tokens = np.asarray(tokens, dtype=np.int64)
    bsz, n_steps = tokens.shape
    h = Tensor(np.zeros((bsz, arch.hidden_size)))
    for t in range(n_steps):
        ids = tokens[:, t]
        if arch.pad_id is not None:
            mask = (ids != arch.pad_id).astype(np.float64)
            if not mask.any():
                break
        else:
            mask = np.ones(bsz)
        x = embedding(p["embed"], ids)
        hn = gru_step(p, x, h)
        m = Tensor(mask[:, None])
        h = add(h, mul(m, add(hn, scale(h, -1.0))))
    return h


def listen(arch: ListenerArch, p: dict, tokens: np.ndarray,
           candidates: np.ndarray) -> ListenResult:
    """Score candidates against a message: dot products in a shared space."""
    candidates = np.asarray(candidates, dtype=np.int64)
    bsz, n_cand, _ = candidates.shape
    msg = encode_message(arch, p, tokens)

    flat = one_hot_objects(arch.n_attrs, arch.n_values,
                           candidates.reshape(bsz * n_cand, arch.n_attrs))
    enc = tanh(add(matmul(Tensor(flat), p["obj_w"]), p["obj_b"]))
    cand = reshape(enc, (bsz, n_cand, arch.hidden_size))

    scores = reduce_sum(mul(reshape(msg, (bsz, 1, arch.hidden_size)), cand), axis=2)
    log_dist = log_softmax(scores, axis=1)
    ent = scale(reduce_sum(mul(exp(log_dist), log_dist), axis=1), -1.0)
    return ListenResult(log_dist=log_dist, entropy=ent)


# ---------------------------------------------------------------------------
# extra decoding strategies (evaluation only, no graph needed)
# ---------------------------------------------------------------------------

def decode_beam(arch: SpeakerArch, p: dict, obj: np.ndarray, n_beams: int = 2) -> list[int]:
    """Plain beam search over one object; returns the best token sequence."""
    from .autodiff import no_grad

    with no_grad():
        onehot = Tensor(one_hot_objects(arch.n_attrs, arch.n_values,
                                        np.asarray(obj, dtype=np.int64)[None, :]))
        h0 = tanh(add(matmul(onehot, p["enc_w"]), p["enc_b"])).data[0]
        x0 = p["start"].data.copy()
        beams = [([], 0.0, h0, x0, True)]
        for _ in range(arch.max_len):
            grown = []
            for toks, lp, h, x, alive in beams:
                if not alive:
                    grown.append((toks, lp, h, x, alive))
                    continue
                logits = add(matmul(Tensor(h[None, :]), p["out_w"]), p["out_b"])
                if arch.pad_id is not None:
                    mask = np.zeros(arch.vocab_size)
                    mask[arch.pad_id] = NEG_INF
                    logits = add(logits, Tensor(mask))
                logp = log_softmax(logits, axis=1).data[0]
                top = np.argsort(-logp)[:n_beams]
                for tok in top:
                    tok = int(tok)
                    seq = toks + [tok]
                    done = arch.eos_id is not None and tok == arch.eos_id
                    if done:
                        grown.append((seq, lp + logp[tok], h, x, False))
                    else:
                        xe = p["embed"].data[tok]
                        hn = gru_step(p, Tensor(xe[None, :]), Tensor(h[None, :])).data[0]
                        grown.append((seq, lp + logp[tok], hn, xe, True))
            grown.sort(key=lambda b: -b[1])
            beams = grown[:n_beams]
            if all(not b[4] for b in beams):
                break
        return beams[0][0]


def decode_topk(arch: SpeakerArch, p: dict, objects: np.ndarray, k: int,
                rng: np.random.Generator) -> np.ndarray:
    """Top-k sampling: renormalize over the k most likely tokens per step."""
    from .autodiff import no_grad

    objects = np.asarray(objects, dtype=np.int64)
    bsz = objects.shape[0]
    with no_grad():
        onehot = Tensor(one_hot_objects(arch.n_attrs, arch.n_values, objects))
        h = tanh(add(matmul(onehot, p["enc_w"]), p["enc_b"]))
        x = matmul(Tensor(np.ones((bsz, 1))), reshape(p["start"], (1, arch.emb_size)))
        pad = arch.pad_id if arch.pad_id is not None else 0
        tokens = np.full((bsz, arch.max_len), pad, dtype=np.int64)
        alive = np.ones(bsz, dtype=bool)
        for t in range(arch.max_len):
            logits = add(matmul(h, p["out_w"]), p["out_b"]).data.copy()
            if arch.pad_id is not None:
                logits[:, arch.pad_id] = NEG_INF
            kth = np.partition(logits, -k, axis=1)[:, -k][:, None]
            logits[logits < kth] = NEG_INF
            shifted = logits - logits.max(axis=1, keepdims=True)
            probs = np.exp(shifted)
            probs /= probs.sum(axis=1, keepdims=True)
            u = rng.random(bsz)
            ids = np.minimum((u[:, None] >= probs.cumsum(axis=1)).sum(axis=1),
                             arch.vocab_size - 1)
            tokens[:, t] = np.where(alive, ids, pad)
            if arch.eos_id is not None:
                alive = alive & (ids != arch.eos_id)
            if not alive.any():
                break
            h = gru_step(p, embedding(p["embed"], tokens[:, t]), h)
        return tokens


def strip_special(tokens, pad_id: int | None = 0, eos_id: int | None = 1) -> list[int]:
    """Content tokens of a message: everything before EOS, PAD removed."""
    out = []
    for t in tokens:
        t = int(t)
        if eos_id is not None and t == eos_id:
            break
        if pad_id is not None and t == pad_id:
            continue
        out.append(t)
    return out
