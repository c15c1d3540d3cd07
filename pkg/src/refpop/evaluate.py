"""Every measurement the lab reports: accuracy, BLEU, cross-play, diversity,
oracle evaluation, corpus statistics, robustness across worlds."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from .agents import strip_special
from .autodiff import no_grad
from .game import play_batch
from .rng import make_rng
from .world import (
    EOS, PAD, WorldSpec, canonical_batch, draw_objects, oracle_listener,
    sample_distractors,
)

_CHUNK = 512


def referential_accuracy(spec: WorldSpec, speaker, listener, pool: np.ndarray,
                         k: int, episodes: int, rng: np.random.Generator,
                         distractor_mode: str = "uniform",
                         hard_threshold: float = 0.75) -> float:
    """Fraction of correct episodes under greedy decoding + argmax prediction."""
    correct = 0
    done = 0
    with no_grad():
        while done < episodes:
            n = min(_CHUNK, episodes - done)
            batch = play_batch(spec, speaker, listener, pool, n, k, rng,
                               distractor_mode=distractor_mode,
                               hard_threshold=hard_threshold,
                               speaker_mode="greedy", listener_mode="argmax")
            correct += int((batch.predictions == batch.target_indices).sum())
            done += n
    return correct / episodes


def greedy_messages(spec: WorldSpec, speaker, objects: np.ndarray) -> list[list[int]]:
    """Greedy utterances for a set of objects, special tokens stripped."""
    from .agents import speak

    arch, params = speaker
    out = []
    with no_grad():
        for start in range(0, objects.shape[0], _CHUNK):
            chunk = objects[start:start + _CHUNK]
            res = speak(arch, params, chunk, mode="greedy")
            for row, n in zip(res.tokens, res.lengths):
                out.append(strip_special(row[:n], arch.pad_id, arch.eos_id))
    return out


# ---------------------------------------------------------------------------
# BLEU and corpus statistics
# ---------------------------------------------------------------------------

def _ngrams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def bleu(hypotheses, references, max_n: int = 4, eps: float = 1e-9) -> float:
    """Corpus BLEU in [0, 1]: clipped n-gram precisions (add-eps smoothed),
    geometric mean, times the brevity penalty."""
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references must be aligned")
    if not hypotheses:
        raise ValueError("empty corpus")
    hyp_len = 0
    ref_len = 0
    clipped = np.zeros(max_n)
    total = np.zeros(max_n)
    for hyp, ref in zip(hypotheses, references):
        hyp = [int(t) for t in hyp]
        ref = [int(t) for t in ref]
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            counts = Counter(_ngrams(hyp, n))
            ref_counts = Counter(_ngrams(ref, n))
            total[n - 1] += sum(counts.values())
            clipped[n - 1] += sum(min(c, ref_counts[g]) for g, c in counts.items())
    precisions = (clipped + eps) / (total + eps)
    if hyp_len == 0:
        return 0.0
    bp = 1.0 if hyp_len > ref_len else float(np.exp(1.0 - ref_len / hyp_len))
    return float(bp * np.exp(np.mean(np.log(precisions))))


def corpus_stats(hypotheses, references) -> tuple[float, float]:
    """Mean length ratio and mean unique-token-count ratio, hyp over ref."""
    if len(hypotheses) != len(references) or not hypotheses:
        raise ValueError("need aligned, non-empty corpora")
    length_ratios = []
    unique_ratios = []
    for hyp, ref in zip(hypotheses, references):
        if len(ref) == 0:
            continue
        length_ratios.append(len(hyp) / len(ref))
        unique_ratios.append(len(set(hyp)) / len(set(ref)))
    return float(np.mean(length_ratios)), float(np.mean(unique_ratios))


def speaker_bleu(spec: WorldSpec, speaker, objects: np.ndarray) -> float:
    """BLEU of greedy utterances against the canonical descriptions."""
    hyps = greedy_messages(spec, speaker, objects)
    refs = [strip_special(row, PAD, EOS) for row in canonical_batch(spec, objects)]
    return bleu(hyps, refs)


# ---------------------------------------------------------------------------
# cross-play and diversity
# ---------------------------------------------------------------------------

@dataclass
class CrossPlayMatrix:
    accuracies: np.ndarray       # (S, S): speaker i with listener j
    episodes_per_cell: int

    @property
    def diag_mean(self) -> float:
        return float(np.mean(np.diag(self.accuracies)))

    @property
    def offdiag_values(self) -> np.ndarray:
        s = self.accuracies.shape[0]
        mask = ~np.eye(s, dtype=bool)
        return self.accuracies[mask]

    def summary(self) -> dict:
        out = {
            "n": int(self.accuracies.shape[0]),
            "episodes_per_cell": self.episodes_per_cell,
            "diag_mean": self.diag_mean,
        }
        off = self.offdiag_values
        if off.size:
            out["offdiag_mean"] = float(off.mean())
            out["offdiag_std"] = float(off.std(ddof=0))
            out["gap"] = out["diag_mean"] - out["offdiag_mean"]
        else:
            out["offdiag_mean"] = None
            out["offdiag_std"] = None
            out["gap"] = None
        return out


def crossplay(spec: WorldSpec, speakers, listeners, pool: np.ndarray, k: int,
              episodes_per_cell: int, base_seed: int = 0,
              distractor_mode: str = "uniform",
              hard_threshold: float = 0.75) -> CrossPlayMatrix:
    """Accuracy grid over all speaker x listener pairings.

    Each cell uses its own seed derived from its coordinates, so the grid is
    independent of evaluation order.
    """
    if len(speakers) != len(listeners):
        raise ValueError("need equally many speakers and listeners")
    s = len(speakers)
    acc = np.zeros((s, s))
    for i in range(s):
        for j in range(s):
            rng = make_rng(base_seed, "crossplay", i, j)
            acc[i, j] = referential_accuracy(spec, speakers[i], listeners[j],
                                             pool, k, episodes_per_cell, rng,
                                             distractor_mode=distractor_mode,
                                             hard_threshold=hard_threshold)
    return CrossPlayMatrix(accuracies=acc, episodes_per_cell=episodes_per_cell)


@dataclass
class DiversityCurve:
    iterations: list[int]
    mean: list[float]
    std: list[float]
    low: list[float]
    high: list[float]

    def rows(self) -> list[dict]:
        return [
            {"iteration": i, "mean": m, "std": s, "min": lo, "max": hi}
            for i, m, s, lo, hi in zip(self.iterations, self.mean, self.std,
                                       self.low, self.high)
        ]


def _params_fingerprint(params: dict) -> str:
    import hashlib

    h = hashlib.sha1()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data, dtype="<f8").tobytes())
    return h.hexdigest()


def diversity_curve(spec: WorldSpec, listener, members_by_iteration, pool: np.ndarray,
                    k: int, episodes: int, base_seed: int = 0) -> DiversityCurve:
    """Accuracy of one listener against every buffered speaker, per snapshot.

    Per-member episode draws are keyed by parameter fingerprint, so duplicate
    members score identically.
    """
    curve = DiversityCurve([], [], [], [], [])
    for iteration, members in members_by_iteration:
        accs = []
        for speaker in members:
            rng = make_rng(base_seed, "diversity", iteration,
                           _params_fingerprint(speaker[1]))
            accs.append(referential_accuracy(spec, speaker, listener, pool, k,
                                             episodes, rng))
        accs = np.asarray(accs)
        curve.iterations.append(int(iteration))
        curve.mean.append(float(accs.mean()))
        curve.std.append(float(accs.std(ddof=0)))
        curve.low.append(float(accs.min()))
        curve.high.append(float(accs.max()))
    return curve


def speaker_bleu_curve(spec: WorldSpec, speaker, listener_members_by_iteration,
                       pool: np.ndarray, k: int, inner_lr: float,
                       batch_size: int = 64, base_seed: int = 0,
                       bleu_objects: int = 100) -> DiversityCurve:
    """BLEU spread of a meta-speaker after one-step adaptation to each
    buffered listener (the speaker-side analogue of the diversity curve)."""
    from .agents import strip_special
    from .autodiff import Tape
    from .losses import speaker_interactive_loss
    from .params import ParameterStore

    arch, params = speaker
    base = ParameterStore()
    for name, t in params.items():
        base.add(name, t.data)
    objs = pool[:bleu_objects]
    refs = [strip_special(r, PAD, EOS) for r in canonical_batch(spec, objs)]
    curve = DiversityCurve([], [], [], [], [])
    for iteration, members in listener_members_by_iteration:
        scores = []
        for listener in members:
            rng = make_rng(base_seed, "bleu_curve", iteration,
                           _params_fingerprint(listener[1]))
            work = base.clone()
            names = work.names()
            with Tape() as tape:
                batch = play_batch(spec, (arch, work.tensors()), listener, pool,
                                   batch_size, k, rng)
                loss = speaker_interactive_loss(batch, 0.0)
                grads = tape.grad(loss, [work[n] for n in names])
            work.set_flat(work.flat() - inner_lr * work.flatten_grads(
                dict(zip(names, grads))))
            hyps = greedy_messages(spec, (arch, work.frozen()), objs)
            scores.append(bleu(hyps, refs))
        scores = np.asarray(scores)
        curve.iterations.append(int(iteration))
        curve.mean.append(float(scores.mean()))
        curve.std.append(float(scores.std(ddof=0)))
        curve.low.append(float(scores.min()))
        curve.high.append(float(scores.max()))
    return curve


# ---------------------------------------------------------------------------
# oracle (human stand-in) evaluation
# ---------------------------------------------------------------------------

def oracle_eval(spec: WorldSpec, speaker, listener, pool: np.ndarray, k: int,
                episodes: int, rng: np.random.Generator) -> dict:
    """Accuracies: agent speaker vs oracle listener, oracle speaker vs agent
    listener, and oracle vs oracle."""
    from .agents import listen, speak

    s_arch, s_params = speaker
    l_arch, l_params = listener
    agent_speaker_correct = 0
    agent_listener_correct = 0
    oracle_oracle_correct = 0
    done = 0
    with no_grad():
        while done < episodes:
            n = min(_CHUNK, episodes - done)
            targets = draw_objects(spec, pool, n, rng)
            distractors = np.stack([
                sample_distractors(spec, pool, t, k, rng) for t in targets
            ]) if k > 0 else np.zeros((n, 0, spec.n_attrs), dtype=np.int64)
            stacked = np.concatenate([targets[:, None, :], distractors], axis=1)
            perm = np.argsort(rng.random((n, k + 1)), axis=1)
            cands = np.take_along_axis(stacked, perm[:, :, None], axis=1)
            tidx = np.argmin(perm, axis=1)

            sres = speak(s_arch, s_params, targets, mode="greedy")
            canon = canonical_batch(spec, targets)
            lres = listen(l_arch, l_params, canon, cands)
            agent_pred = lres.predictions()
            for i in range(n):
                msg = sres.tokens[i, :sres.lengths[i]]
                if oracle_listener(spec, msg, cands[i]) == tidx[i]:
                    agent_speaker_correct += 1
                if agent_pred[i] == tidx[i]:
                    agent_listener_correct += 1
                if oracle_listener(spec, canon[i], cands[i]) == tidx[i]:
                    oracle_oracle_correct += 1
            done += n
    return {
        "agent_speaker_vs_oracle_listener": agent_speaker_correct / episodes,
        "oracle_speaker_vs_agent_listener": agent_listener_correct / episodes,
        "oracle_vs_oracle": oracle_oracle_correct / episodes,
        "episodes": episodes,
    }


# ---------------------------------------------------------------------------
# statistics helpers
# ---------------------------------------------------------------------------

def ttest_ind(xs, ys) -> tuple[float, float]:
    """Welch two-sample t-test: (statistic, two-sided p-value)."""
    res = sps.ttest_ind(np.asarray(xs, dtype=float), np.asarray(ys, dtype=float),
                        equal_var=False)
    return float(res.statistic), float(res.pvalue)


def chi_square_uniform(counts) -> tuple[float, float]:
    """Chi-square test of uniformity over categories: (statistic, p-value)."""
    counts = np.asarray(counts, dtype=float)
    expected = counts.sum() / counts.size
    stat = float(((counts - expected) ** 2 / expected).sum())
    p = float(sps.chi2.sf(stat, df=counts.size - 1))
    return stat, p


def mean_std(values) -> dict:
    values = np.asarray(values, dtype=float)
    return {
        "mean": float(values.mean()),
        "std": float(values.std(ddof=1)) if values.size > 1 else 0.0,
        "n": int(values.size),
    }


# ---------------------------------------------------------------------------
# robustness across worlds (trains what it needs; see training.run_baseline)
# ---------------------------------------------------------------------------

def robustness_eval(cfg, seeds, episodes: int | None = None,
                    zipf_exponent: float = 1.0) -> dict:
    """Cross-task vs within-task accuracies for ours and the pretrained
    baseline, on a uniform world A and a value-skewed world B sharing the
    token map. Returns the four-cell table plus per-seed values."""
    from . import training
    from .world import enumerate_universe

    episodes = episodes or cfg.eval_episodes
    cfg_a = cfg.replace(bias_zipf=0.0)
    cfg_b = cfg.replace(bias_zipf=zipf_exponent)
    world_b = training.build_world(cfg_b)
    cells = {"ours_cross": [], "ours_within": [],
             "pretrained_cross": [], "pretrained_within": []}
    for seed in seeds:
        runs = {
            ("ours", "a"): training.run_algorithm1(cfg_a.replace(seed=seed)),
            ("ours", "b"): training.run_algorithm1(cfg_b.replace(seed=seed)),
            ("pretrained", "a"): training.run_baseline("pretrained", cfg_a.replace(seed=seed)),
            ("pretrained", "b"): training.run_baseline("pretrained", cfg_b.replace(seed=seed)),
        }
        for method in ("ours", "pretrained"):
            for world_tag, cell in (("a", "cross"), ("b", "within")):
                run = runs[(method, world_tag)]
                rng = make_rng(seed, "robustness", method, world_tag)
                acc = referential_accuracy(
                    world_b.spec, run.speaker_eval(), run.listener_eval(),
                    world_b.split.test, cfg.n_distractors, episodes, rng)
                cells[f"{method}_{cell}"].append(acc)
    return {name: mean_std(vals) | {"values": vals} for name, vals in cells.items()}
