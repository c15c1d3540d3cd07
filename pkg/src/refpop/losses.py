"""The four training losses plus the KL-grounding variant.

Interactive losses treat the reward as a constant (REINFORCE); the per-token
log-likelihood carries the gradient. Sign conventions follow the standard
exploration-bonus form (entropy subtracted from the loss, cross-entropy on
the known target); the as-typeset variants are available behind the
``literal_*`` switches in the config.
"""

from __future__ import annotations

import numpy as np

from .agents import ListenerArch, SpeakerArch, listen, speak
from .autodiff import Tensor, exp, mul, reduce_mean, reduce_sum, scale, sub, take_rows
from .game import EpisodeBatch


def speaker_interactive_loss(batch: EpisodeBatch, entropy_coef: float,
                             literal_entropy_sign: bool = False,
                             subtract_mean_reward: bool = False) -> Tensor:
    """-(r/l) * sum_j log p(m_j | m_<j, t) plus the entropy term, batch mean."""
    r = batch.rewards.astype(np.float64)
    if subtract_mean_reward:
        r = r - r.mean()
    pg = reduce_mean(mul(Tensor(-r), batch.speak_result.logprob_mean))
    ent = reduce_mean(batch.speak_result.entropy_mean)
    sign = 1.0 if literal_entropy_sign else -1.0
    return pg + scale(ent, sign * entropy_coef)


def listener_interactive_loss(batch: EpisodeBatch, entropy_coef: float,
                              target_coef: float,
                              literal_entropy_sign: bool = False,
                              literal_target_sign: bool = False) -> Tensor:
    """-r log p(prediction) + supervised term on the known target + entropy term."""
    r = batch.rewards.astype(np.float64)
    lp_pred = take_rows(batch.listen_result.log_dist, batch.predictions)
    pg = reduce_mean(mul(Tensor(-r), lp_pred))
    lp_target = reduce_mean(take_rows(batch.listen_result.log_dist, batch.target_indices))
    t_sign = 1.0 if literal_target_sign else -1.0
    ent = reduce_mean(batch.listen_result.entropy)
    e_sign = 1.0 if literal_entropy_sign else -1.0
    return pg + scale(lp_target, t_sign * target_coef) + scale(ent, e_sign * entropy_coef)


def speaker_supervised_loss(arch: SpeakerArch, params: dict, objects: np.ndarray,
                            messages: np.ndarray):
    """Teacher-forced cross-entropy of the canonical description, 1/l-averaged."""
    if objects.shape[0] == 0:
        raise ValueError("empty supervised batch")
    res = speak(arch, params, objects, mode="teacher", forced=messages)
    return scale(reduce_mean(res.logprob_mean), -1.0), res


def listener_supervised_loss(arch: ListenerArch, params: dict, messages: np.ndarray,
                             candidates: np.ndarray, target_indices: np.ndarray,
                             literal: bool = True):
    """As typeset the loss is -p(target); ``literal=False`` gives -log p(target)."""
    if messages.shape[0] == 0:
        raise ValueError("empty supervised batch")
    res = listen(arch, params, messages, candidates)
    if literal:
        loss = scale(reduce_mean(take_rows(exp(res.log_dist), target_indices)), -1.0)
    else:
        loss = scale(reduce_mean(take_rows(res.log_dist, target_indices)), -1.0)
    return loss, res


def speaker_reference_logps(arch: SpeakerArch, params: dict, objects: np.ndarray,
                            messages: np.ndarray) -> list[np.ndarray]:
    """Frozen per-step log-distributions of a reference speaker (for KL)."""
    from .autodiff import no_grad

    with no_grad():
        res = speak(arch, params, objects, mode="teacher", forced=messages,
                    keep_step_dists=True)
    return [lp.data for lp in res.step_logps], res.step_masks


def speaker_kl_loss(arch: SpeakerArch, params: dict, objects: np.ndarray,
                    messages: np.ndarray, ref_logps: list[np.ndarray],
                    ref_masks: list[np.ndarray]) -> Tensor:
    """Per-token KL(reference || current) on teacher-forced dataset sequences."""
    res = speak(arch, params, objects, mode="teacher", forced=messages,
                keep_step_dists=True)
    total = Tensor(np.zeros(()))
    count = 0.0
    for cur, ref, mask in zip(res.step_logps, ref_logps, ref_masks):
        ref_t = Tensor(ref)
        kl = reduce_sum(mul(Tensor(np.exp(ref)), sub(ref_t, cur)), axis=1)
        total = total + reduce_sum(mul(kl, Tensor(mask)))
        count += float(mask.sum())
    return scale(total, 1.0 / max(count, 1.0))


def listener_kl_loss(arch: ListenerArch, params: dict, messages: np.ndarray,
                     candidates: np.ndarray, ref_log_dist: np.ndarray) -> Tensor:
    """KL(reference || current) between candidate distributions."""
    res = listen(arch, params, messages, candidates)
    kl = reduce_sum(mul(Tensor(np.exp(ref_log_dist)),
                        sub(Tensor(ref_log_dist), res.log_dist)), axis=1)
    return reduce_mean(kl)
