"""Referential game episodes: speak, shuffle candidates, listen, reward."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .agents import ListenerArch, ListenResult, SpeakerArch, SpeakResult, listen, speak
from .world import WorldSpec, check_objects, draw_objects, sample_distractors

REWARD_CORRECT = 1.0
REWARD_WRONG = -0.1


@dataclass
class Episode:
    target: np.ndarray
    distractors: np.ndarray
    candidates: np.ndarray      # shuffled, includes the target
    target_index: int
    tokens: list[int]
    prediction: int
    reward: float


@dataclass
class EpisodeBatch:
    """A batch of episodes with everything the interactive losses need."""

    targets: np.ndarray          # (B, A)
    candidates: np.ndarray       # (B, K+1, A) shuffled
    target_indices: np.ndarray   # (B,)
    speak_result: SpeakResult
    listen_result: ListenResult
    predictions: np.ndarray      # (B,)
    rewards: np.ndarray          # (B,)

    def __len__(self) -> int:
        return self.targets.shape[0]

    @property
    def n_candidates(self) -> int:
        return self.candidates.shape[1]

    def accuracy(self) -> float:
        return float((self.predictions == self.target_indices).mean())

    def episodes(self) -> list[Episode]:
        out = []
        toks = self.speak_result.tokens
        lens = self.speak_result.lengths
        for i in range(len(self)):
            cands = self.candidates[i]
            ti = int(self.target_indices[i])
            out.append(Episode(
                target=self.targets[i],
                distractors=np.delete(cands, ti, axis=0),
                candidates=cands,
                target_index=ti,
                tokens=[int(t) for t in toks[i, :lens[i]]],
                prediction=int(self.predictions[i]),
                reward=float(self.rewards[i]),
            ))
        return out

    def write_trace(self, fh) -> None:
        """Append one JSON line per episode to an open text handle."""
        for ep in self.episodes():
            fh.write(json.dumps({
                "target": [int(v) for v in ep.target],
                "distractors": [[int(v) for v in d] for d in ep.distractors],
                "tokens": ep.tokens,
                "prediction": ep.prediction,
                "reward": ep.reward,
            }) + "\n")


def run_episodes(spec: WorldSpec,
                 speaker: tuple[SpeakerArch, dict],
                 listener: tuple[ListenerArch, dict],
                 targets: np.ndarray,
                 distractors: np.ndarray,
                 rng: np.random.Generator,
                 speaker_mode: str = "sample",
                 listener_mode: str = "sample") -> EpisodeBatch:
    """Play given (target, distractor-set) pairs through both agents.

    Candidates are presented in a random permutation so position never leaks
    the target. Training mode samples the message and the prediction;
    evaluation uses greedy decoding and the argmax prediction.
    """
    s_arch, s_params = speaker
    l_arch, l_params = listener
    targets = check_objects(spec, targets)
    bsz = targets.shape[0]
    k = distractors.shape[1]

    stacked = np.concatenate([targets[:, None, :], distractors], axis=1)
    perm = np.argsort(rng.random((bsz, k + 1)), axis=1)
    candidates = np.take_along_axis(stacked, perm[:, :, None], axis=1)
    target_indices = np.argmin(perm, axis=1)  # where slot 0 (the target) landed

    sres = speak(s_arch, s_params, targets, mode=speaker_mode, rng=rng)
    lres = listen(l_arch, l_params, sres.tokens, candidates)

    if listener_mode == "sample":
        dist = lres.dist
        u = rng.random(bsz)
        predictions = np.minimum((u[:, None] >= dist.cumsum(axis=1)).sum(axis=1), k)
    elif listener_mode == "argmax":
        predictions = lres.predictions()
    else:
        raise ValueError(f"unknown listener mode '{listener_mode}'")

    rewards = np.where(predictions == target_indices, REWARD_CORRECT, REWARD_WRONG)
    return EpisodeBatch(
        targets=targets,
        candidates=candidates,
        target_indices=target_indices,
        speak_result=sres,
        listen_result=lres,
        predictions=predictions,
        rewards=rewards,
    )


def play_batch(spec: WorldSpec, speaker, listener, pool: np.ndarray, batch_size: int,
               k: int, rng: np.random.Generator, distractor_mode: str = "uniform",
               hard_threshold: float = 0.75, speaker_mode: str = "sample",
               listener_mode: str = "sample",
               targets: np.ndarray | None = None) -> EpisodeBatch:
    """Draw targets and fresh distractors from a pool, then play."""
    pool = check_objects(spec, pool)
    if targets is None:
        if batch_size < 1:
            raise ValueError("batch size must be >= 1")
        targets = draw_objects(spec, pool, batch_size, rng)
    else:
        targets = check_objects(spec, targets)
    distractors = np.stack([
        sample_distractors(spec, pool, t, k, rng, mode=distractor_mode,
                           threshold=hard_threshold)
        for t in targets
    ]) if k > 0 else np.zeros((targets.shape[0], 0, spec.n_attrs), dtype=np.int64)
    return run_episodes(spec, speaker, listener, targets, distractors, rng,
                        speaker_mode=speaker_mode, listener_mode=listener_mode)


def play(spec: WorldSpec, speaker, listener, target, distractors,
         rng: np.random.Generator, speaker_mode: str = "sample",
         listener_mode: str = "sample") -> Episode:
    """Single episode against explicit distractors."""
    target = check_objects(spec, target)
    distractors = check_objects(spec, distractors) if len(distractors) else \
        np.zeros((0, spec.n_attrs), dtype=np.int64)
    batch = run_episodes(spec, speaker, listener, target, distractors[None, :, :],
                         rng, speaker_mode=speaker_mode, listener_mode=listener_mode)
    return batch.episodes()[0]
