"""Training phases, the dynamic-population loop, baselines, and ablations.

The main loop alternates, per outer iteration: insert the current pair into
the population buffers, meta-train both meta-agents against the buffers,
train a fresh pair interactively against the frozen meta-partners, then
ground the fresh pair on the dataset. It stops when validation accuracy of
the meta pair plateaus, then fine-tunes the meta pair on the dataset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluate
from .agents import ListenerArch, SpeakerArch, init_listener, init_speaker
from .autodiff import NumericalError, Tape, grad_through_update, scale, set_debug_checks
from .buffer import PopulationBuffer, reservoir_insert
from .checkpoint import save_checkpoint
from .config import ConfigError, TrainConfig, config_hash
from .game import play_batch
from .losses import (
    listener_interactive_loss, listener_kl_loss, listener_supervised_loss,
    speaker_interactive_loss, speaker_kl_loss, speaker_reference_logps,
    speaker_supervised_loss,
)
from .params import AdamState, ParameterStore, adam_step
from .rng import make_rng
from .runio import MetricsWriter
from .world import (
    WorldSpec, WorldSplit, build_dataset, make_splits, sample_distractors,
    world_hash, zipf_bias,
)

BASELINE_KINDS = ("pretrained", "emecom", "s2p", "l2c", "gentrans")
ABLATION_KINDS = ("no_meta_agents", "no_adaptive_meta_i", "no_adaptive_meta_ii",
                  "kl_grounding")


@dataclass
class WorldBundle:
    spec: WorldSpec
    split: WorldSplit
    dataset: object
    hash: str


def build_world(cfg: TrainConfig) -> WorldBundle:
    spec = WorldSpec(cfg.n_attrs, cfg.n_values, seed=cfg.world_seed,
                     synonyms=cfg.synonyms)
    if cfg.bias_zipf > 0:
        spec = zipf_bias(spec, cfg.bias_zipf)
    split = make_splits(spec, cfg.val_size, cfg.test_size,
                        make_rng(cfg.world_seed, "split"))
    dataset = build_dataset(spec, split.train, cfg.dataset_size,
                            make_rng(cfg.world_seed, "dataset"))
    return WorldBundle(spec=spec, split=split, dataset=dataset,
                       hash=world_hash(spec))


@dataclass
class Agent:
    kind: str
    arch: object
    store: ParameterStore
    adam: AdamState

    def model(self):
        """(arch, trainable tensors) for forward passes that will be updated."""
        return self.arch, self.store.tensors()

    def frozen(self):
        """(arch, constant tensors): partner view, records no graph."""
        return self.arch, self.store.frozen()

    def snapshot(self):
        return self.arch, self.store.clone()


def speaker_arch(cfg: TrainConfig) -> SpeakerArch:
    vocab = 2 + cfg.n_attrs * cfg.n_values * cfg.synonyms
    return SpeakerArch(n_attrs=cfg.n_attrs, n_values=cfg.n_values, vocab_size=vocab,
                       emb_size=cfg.emb_size, hidden_size=cfg.hidden_size,
                       max_len=cfg.max_len)


def listener_arch(cfg: TrainConfig) -> ListenerArch:
    vocab = 2 + cfg.n_attrs * cfg.n_values * cfg.synonyms
    return ListenerArch(n_attrs=cfg.n_attrs, n_values=cfg.n_values, vocab_size=vocab,
                        emb_size=cfg.emb_size, hidden_size=cfg.hidden_size)


def new_speaker(cfg: TrainConfig, rng: np.random.Generator) -> Agent:
    arch = speaker_arch(cfg)
    store = init_speaker(arch, rng)
    return Agent("speaker", arch, store, AdamState(size=store.total_size, lr=cfg.outer_lr))


def new_listener(cfg: TrainConfig, rng: np.random.Generator) -> Agent:
    arch = listener_arch(cfg)
    store = init_listener(arch, rng)
    return Agent("listener", arch, store, AdamState(size=store.total_size, lr=cfg.outer_lr))


def _guard(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise NumericalError(f"{what} diverged: loss = {value}")
    return value


def _grads(tape: Tape, loss, store: ParameterStore, create_graph=False) -> dict:
    names = store.names()
    gs = tape.grad(loss, [store[n] for n in names], create_graph=create_graph)
    return dict(zip(names, gs))


# ---------------------------------------------------------------------------
# supervised phase (behavior grounding)
# ---------------------------------------------------------------------------

def supervised_speaker_step(agent: Agent, dataset, batch_size: int,
                            rng: np.random.Generator) -> float:
    objs, msgs = dataset.batch(batch_size, rng)
    with Tape() as tape:
        loss, _ = speaker_supervised_loss(agent.arch, agent.store.tensors(), objs, msgs)
        grads = _grads(tape, loss, agent.store)
    adam_step(agent.store, grads, agent.adam)
    return _guard(float(loss.data), "supervised speaker step")


def _supervised_listener_batch(spec, dataset, pool, cfg, rng):
    # the supervised phase sees only captioned data: targets and distractors
    # both come from the grounding dataset's objects
    objs, msgs = dataset.batch(cfg.batch_size, rng)
    del pool
    pool = dataset.objects
    k = cfg.n_distractors
    if k > 0:
        distractors = np.stack([
            sample_distractors(spec, pool, t, k, rng, mode=cfg.distractor_mode,
                               threshold=cfg.hard_threshold) for t in objs])
    else:
        distractors = np.zeros((objs.shape[0], 0, spec.n_attrs), dtype=np.int64)
    stacked = np.concatenate([objs[:, None, :], distractors], axis=1)
    perm = np.argsort(rng.random((objs.shape[0], k + 1)), axis=1)
    candidates = np.take_along_axis(stacked, perm[:, :, None], axis=1)
    target_idx = np.argmin(perm, axis=1)
    return msgs, candidates, target_idx


def supervised_listener_step(agent: Agent, spec, dataset, pool, cfg: TrainConfig,
                             rng: np.random.Generator) -> float:
    msgs, candidates, target_idx = _supervised_listener_batch(spec, dataset, pool, cfg, rng)
    with Tape() as tape:
        loss, _ = listener_supervised_loss(agent.arch, agent.store.tensors(), msgs,
                                           candidates, target_idx,
                                           literal=cfg.listener_supervised_literal)
        grads = _grads(tape, loss, agent.store)
    adam_step(agent.store, grads, agent.adam)
    return _guard(float(loss.data), "supervised listener step")


# ---------------------------------------------------------------------------
# interactive phase (REINFORCE self-play)
# ---------------------------------------------------------------------------

def interactive_step(spec, pool, speaker: Agent, listener: Agent, cfg: TrainConfig,
                     rng: np.random.Generator, update_speaker: bool = True,
                     update_listener: bool = True, kl_refs=None, dataset=None,
                     trace_fh=None) -> dict:
    """One REINFORCE step: play a batch, then separate Adam updates.

    A side that is not updated participates through a frozen (constant)
    parameter view, so no graph is recorded for it. With ``kl_refs`` the
    losses become interactive_weight * J_int + KL(pretrained || current) on a
    dataset batch (the no-separate-grounding ablation).
    """
    s_params = speaker.store.tensors() if update_speaker else speaker.store.frozen()
    l_params = listener.store.tensors() if update_listener else listener.store.frozen()
    with Tape() as tape:
        batch = play_batch(spec, (speaker.arch, s_params), (listener.arch, l_params),
                           pool, cfg.batch_size, cfg.n_distractors, rng,
                           distractor_mode=cfg.distractor_mode,
                           hard_threshold=cfg.hard_threshold)
        out = {"accuracy": batch.accuracy()}
        s_grads = l_grads = None
        if update_speaker:
            s_loss = speaker_interactive_loss(
                batch, cfg.speaker_entropy_coef,
                literal_entropy_sign=cfg.literal_entropy_sign,
                subtract_mean_reward=cfg.reinforce_baseline)
            if kl_refs is not None:
                ref_speaker, _ = kl_refs
                objs, msgs = dataset.batch(cfg.batch_size, rng)
                ref_logps, ref_masks = speaker_reference_logps(
                    ref_speaker[0], ref_speaker[1], objs, msgs)
                s_loss = scale(s_loss, cfg.interactive_weight) + speaker_kl_loss(
                    speaker.arch, s_params, objs, msgs, ref_logps, ref_masks)
            s_grads = _grads(tape, s_loss, speaker.store)
            out["speaker_loss"] = _guard(float(s_loss.data), "interactive speaker step")
        if update_listener:
            l_loss = listener_interactive_loss(
                batch, cfg.listener_entropy_coef, cfg.listener_target_coef,
                literal_entropy_sign=cfg.literal_entropy_sign,
                literal_target_sign=cfg.literal_target_sign)
            if kl_refs is not None:
                _, ref_listener = kl_refs
                msgs, candidates, target_idx = _supervised_listener_batch(
                    spec, dataset, pool, cfg, rng)
                from .agents import listen
                from .autodiff import no_grad
                with no_grad():
                    ref_dist = listen(ref_listener[0], ref_listener[1], msgs,
                                      candidates).log_dist.data
                l_loss = scale(l_loss, cfg.interactive_weight) + listener_kl_loss(
                    listener.arch, l_params, msgs, candidates, ref_dist)
            l_grads = _grads(tape, l_loss, listener.store)
            out["listener_loss"] = _guard(float(l_loss.data), "interactive listener step")
    if s_grads is not None:
        adam_step(speaker.store, s_grads, speaker.adam)
    if l_grads is not None:
        adam_step(listener.store, l_grads, listener.adam)
    if trace_fh is not None:
        batch.write_trace(trace_fh)
    return out


# ---------------------------------------------------------------------------
# meta phase
# ---------------------------------------------------------------------------

def _meta_gradient(meta: Agent, buffer: PopulationBuffer, inner_pool, outer_pool,
                   spec, cfg: TrainConfig, step_key: int,
                   meta_is_speaker: bool) -> tuple[dict, float]:
    """Meta-gradient summed over every buffer member, plus the mean loss.

    Per member: adapt the meta-agent by one inner REINFORCE step on episodes
    from the inner pool, evaluate the interactive loss on the outer pool at
    the adapted parameters, and backpropagate per the configured variant
    (second-order for maml, detached inner gradient for fomaml). The reptile
    variant instead runs plain SGD steps per member and returns the negated
    mean displacement toward the adapted parameters.

    Per-member episode draws are keyed by (step_key, member fingerprint), so
    the summation order is fixed and identical members contribute identical
    terms.
    """
    if len(buffer) == 0:
        raise ValueError("meta step requires a non-empty population buffer")
    k = cfg.n_distractors

    def play(params, entry, pool, member_rng):
        if meta_is_speaker:
            speaker = (meta.arch, params)
            listener = (entry.arch, entry.frozen_tensors())
        else:
            speaker = (entry.arch, entry.frozen_tensors())
            listener = (meta.arch, params)
        return play_batch(spec, speaker, listener, pool, cfg.meta_batch_size, k,
                          member_rng, distractor_mode=cfg.distractor_mode,
                          hard_threshold=cfg.hard_threshold)

    def loss_of(batch):
        if meta_is_speaker:
            return speaker_interactive_loss(
                batch, cfg.speaker_entropy_coef,
                literal_entropy_sign=cfg.literal_entropy_sign,
                subtract_mean_reward=cfg.reinforce_baseline)
        return listener_interactive_loss(
            batch, cfg.listener_entropy_coef, cfg.listener_target_coef,
            literal_entropy_sign=cfg.literal_entropy_sign,
            literal_target_sign=cfg.literal_target_sign)

    if cfg.meta_variant in ("maml", "fomaml"):
        total = {n: np.zeros_like(meta.store[n].data) for n in meta.store.names()}
        outer_losses = []
        for entry in buffer.items:
            rng_in = make_rng(step_key, "inner", entry.fingerprint)
            rng_out = make_rng(step_key, "outer", entry.fingerprint)
            inner_fn = lambda params: loss_of(play(params, entry, inner_pool, rng_in))
            outer_fn = lambda params: loss_of(play(params, entry, outer_pool, rng_out))
            grads, _, outer_val = grad_through_update(
                meta.store.tensors(), inner_fn, outer_fn, cfg.inner_lr,
                first_order=(cfg.meta_variant == "fomaml"))
            for n, g in grads.items():
                total[n] += g.data
            outer_losses.append(_guard(outer_val, "meta step"))
        return total, float(np.mean(outer_losses))

    # reptile: a few plain SGD steps per member, move toward the mean adapted point
    base = meta.store.flat()
    direction = np.zeros_like(base)
    inner_losses = []
    for entry in buffer.items:
        rng_in = make_rng(step_key, "inner", entry.fingerprint)
        work = meta.store.clone()
        for _ in range(cfg.reptile_inner_steps):
            with Tape() as tape:
                loss = loss_of(play(work.tensors(), entry, inner_pool, rng_in))
                grads = _grads(tape, loss, work)
            work.set_flat(work.flat() - cfg.inner_lr * work.flatten_grads(grads))
            inner_losses.append(_guard(float(loss.data), "meta step"))
        direction += work.flat() - base
    pseudo_grad = meta.store.unflatten(-direction / len(buffer))
    return pseudo_grad, float(np.mean(inner_losses))


def _meta_step(meta: Agent, buffer: PopulationBuffer, inner_pool, outer_pool,
               spec, cfg: TrainConfig, rng: np.random.Generator,
               meta_is_speaker: bool) -> float:
    """One meta update against the whole buffer; Adam applied once."""
    step_key = int(rng.integers(2 ** 31))
    grads, mean_loss = _meta_gradient(meta, buffer, inner_pool, outer_pool, spec,
                                      cfg, step_key, meta_is_speaker)
    adam_step(meta.store, grads, meta.adam)
    return mean_loss


def meta_speaker_step(meta: Agent, listener_buffer: PopulationBuffer, inner_pool,
                      outer_pool, spec, cfg, rng) -> float:
    return _meta_step(meta, listener_buffer, inner_pool, outer_pool, spec, cfg,
                      rng, meta_is_speaker=True)


def meta_listener_step(meta: Agent, speaker_buffer: PopulationBuffer, inner_pool,
                       outer_pool, spec, cfg, rng) -> float:
    return _meta_step(meta, speaker_buffer, inner_pool, outer_pool, spec, cfg,
                      rng, meta_is_speaker=False)


# ---------------------------------------------------------------------------
# run bookkeeping
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    cfg: TrainConfig
    method: str
    world: WorldBundle
    speaker: tuple          # (arch, ParameterStore) of the evaluable speaker
    listener: tuple
    metrics: list[dict]
    pretrained: tuple | None = None    # ((s_arch, store), (l_arch, store))
    speaker_snapshots: list = field(default_factory=list)  # [(iteration, (arch, store))]
    listener_snapshots: list = field(default_factory=list)
    buffer_history: list = field(default_factory=list)
    final_val_acc: float | None = None
    final_test_acc: float | None = None
    run_dir: str | None = None

    def speaker_eval(self):
        return self.speaker[0], self.speaker[1].frozen()

    def listener_eval(self):
        return self.listener[0], self.listener[1].frozen()

    def members_by_iteration(self, kind: str = "speaker"):
        """Buffer membership per iteration, as evaluable (arch, params) pairs."""
        snaps = dict()
        source = self.speaker_snapshots if kind == "speaker" else self.listener_snapshots
        for it, (arch, store) in source:
            snaps[store.fingerprint()] = (arch, store.frozen())
        out = []
        key = "speakers" if kind == "speaker" else "listeners"
        for rec in self.buffer_history:
            members = [snaps[f] for f in rec[key] if f in snaps]
            out.append((rec["iteration"], members))
        return out


class _Convergence:
    """Validation-accuracy patience with a minimum improvement delta."""

    def __init__(self, patience: int, min_delta: float):
        self.patience = patience
        self.min_delta = min_delta
        self.best = -np.inf
        self.stale = 0

    def update(self, value: float) -> bool:
        """Record a new value; True when training should stop."""
        if value > self.best + self.min_delta:
            self.best = value
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


class _RunWriter:
    """Optional on-disk artifacts for a run directory."""

    def __init__(self, run_dir, cfg):
        self.dir = Path(run_dir) if run_dir else None
        self.hash = config_hash(cfg)
        self.metrics = None
        if self.dir:
            self.dir.mkdir(parents=True, exist_ok=True)
            (self.dir / "checkpoints").mkdir(exist_ok=True)
            self.metrics = MetricsWriter(self.dir / "metrics.csv", self.hash)

    def row(self, row: dict) -> None:
        if self.metrics:
            self.metrics.write(row)

    def checkpoint(self, name: str, kind: str, arch, store, whash, meta) -> None:
        if self.dir:
            save_checkpoint(self.dir / "checkpoints" / f"{name}.ckpt", kind, arch,
                            store, world_hash=whash, meta=meta)

    def close(self) -> None:
        if self.metrics:
            self.metrics.close()


def _validation_accuracy(spec, split, speaker: Agent, listener: Agent,
                         cfg: TrainConfig, tag) -> float:
    rng = make_rng(cfg.seed, "val", tag)
    return evaluate.referential_accuracy(
        spec, speaker.frozen(), listener.frozen(), split.val,
        cfg.n_distractors, cfg.val_episodes, rng,
        distractor_mode=cfg.distractor_mode, hard_threshold=cfg.hard_threshold)


def _test_accuracy(spec, split, speaker: Agent, listener: Agent, cfg) -> float:
    rng = make_rng(cfg.seed, "test")
    return evaluate.referential_accuracy(
        spec, speaker.frozen(), listener.frozen(), split.test,
        cfg.n_distractors, cfg.eval_episodes, rng,
        distractor_mode=cfg.distractor_mode, hard_threshold=cfg.hard_threshold)


# ---------------------------------------------------------------------------
# Algorithm 1 (with ablation hooks)
# ---------------------------------------------------------------------------

def run_algorithm1(cfg: TrainConfig, run_dir=None, interactive_partner: str = "meta",
                   reset_meta: bool = False, kl_grounding: bool = False,
                   method_name: str = "ours") -> RunResult:
    """Full dynamic-population training loop.

    ``interactive_partner``: "meta" trains the fresh pair against the frozen
    meta-partners; "buffer" against a random buffered partner (ablation).
    ``reset_meta`` reinitializes the meta-agents before every meta phase
    (from the same initialization each time, for comparability).
    ``kl_grounding`` replaces the separate supervised phase with
    KL-regularized interactive updates against the pretrained policies.
    """
    if kl_grounding and cfg.pretrain_steps < 1:
        raise ConfigError("kl_grounding needs a pretrained checkpoint "
                          "(pretrain_steps >= 1)")
    set_debug_checks(cfg.debug_checks)
    world = build_world(cfg)
    spec, split, dataset = world.spec, world.split, world.dataset
    writer = _RunWriter(run_dir, cfg)

    speaker = new_speaker(cfg, make_rng(cfg.seed, "init", "speaker"))
    listener = new_listener(cfg, make_rng(cfg.seed, "init", "listener"))
    meta_speaker = new_speaker(cfg, make_rng(cfg.seed, "init", "meta_speaker"))
    meta_listener = new_listener(cfg, make_rng(cfg.seed, "init", "meta_listener"))

    # supervised pretraining of the first population pair
    rng_pre = make_rng(cfg.seed, "pretrain")
    for _ in range(cfg.pretrain_steps):
        supervised_speaker_step(speaker, dataset, cfg.batch_size, rng_pre)
        supervised_listener_step(listener, spec, dataset, split.train, cfg, rng_pre)
    pretrained = (speaker.snapshot(), listener.snapshot())
    writer.checkpoint("pretrained_speaker", "speaker", *pretrained[0], world.hash,
                      {"phase": "pretrained"})
    writer.checkpoint("pretrained_listener", "listener", *pretrained[1], world.hash,
                      {"phase": "pretrained"})
    kl_refs = None
    if kl_grounding:
        kl_refs = ((pretrained[0][0], pretrained[0][1].frozen()),
                   (pretrained[1][0], pretrained[1][1].frozen()))

    speaker_buffer = PopulationBuffer(cfg.buffer_capacity)
    listener_buffer = PopulationBuffer(cfg.buffer_capacity)
    result = RunResult(cfg=cfg, method=method_name, world=world,
                       speaker=(meta_speaker.arch, meta_speaker.store),
                       listener=(meta_listener.arch, meta_listener.store),
                       metrics=[], pretrained=pretrained,
                       run_dir=str(run_dir) if run_dir else None)
    convergence = _Convergence(cfg.patience, cfg.min_delta)

    trace_fh = None
    if cfg.trace and run_dir:
        trace_fh = open(Path(run_dir) / "episodes.jsonl", "w")

    try:
        for iteration in range(1, cfg.max_outer_iters + 1):
            rng_res = make_rng(cfg.seed, "reservoir", iteration)
            reservoir_insert(speaker_buffer, speaker.arch, speaker.store,
                             iteration, rng_res)
            reservoir_insert(listener_buffer, listener.arch, listener.store,
                             iteration, rng_res)
            result.speaker_snapshots.append((iteration, speaker.snapshot()))
            result.listener_snapshots.append((iteration, listener.snapshot()))
            result.buffer_history.append({
                "iteration": iteration,
                "speakers": speaker_buffer.fingerprints(),
                "listeners": listener_buffer.fingerprints(),
            })
            writer.checkpoint(f"speaker_iter_{iteration:03d}", "speaker",
                              speaker.arch, speaker.store, world.hash,
                              {"iteration": iteration})
            writer.checkpoint(f"listener_iter_{iteration:03d}", "listener",
                              listener.arch, listener.store, world.hash,
                              {"iteration": iteration})

            if reset_meta:
                meta_speaker = new_speaker(cfg, make_rng(cfg.seed, "init", "meta_speaker"))
                meta_listener = new_listener(cfg, make_rng(cfg.seed, "init", "meta_listener"))

            inner_pool, outer_pool = split.split_train(
                make_rng(cfg.seed, "resplit", iteration))

            rng_meta = make_rng(cfg.seed, "meta", iteration)
            ms_losses, ml_losses = [], []
            for _ in range(cfg.meta_steps):
                ms_losses.append(meta_speaker_step(
                    meta_speaker, listener_buffer, inner_pool, outer_pool,
                    spec, cfg, rng_meta))
                ml_losses.append(meta_listener_step(
                    meta_listener, speaker_buffer, inner_pool, outer_pool,
                    spec, cfg, rng_meta))

            rng_int = make_rng(cfg.seed, "interactive", iteration)
            is_losses, il_losses = [], []
            for _ in range(cfg.interactive_steps):
                if interactive_partner == "buffer":
                    l_entry = listener_buffer.items[int(rng_int.integers(len(listener_buffer)))]
                    partner_listener = Agent("listener", l_entry.arch, l_entry.store,
                                             AdamState(size=1))
                    s_entry = speaker_buffer.items[int(rng_int.integers(len(speaker_buffer)))]
                    partner_speaker = Agent("speaker", s_entry.arch, s_entry.store,
                                            AdamState(size=1))
                else:
                    partner_listener = meta_listener
                    partner_speaker = meta_speaker
                out_s = interactive_step(spec, split.train, speaker, partner_listener,
                                         cfg, rng_int, update_speaker=True,
                                         update_listener=False, kl_refs=kl_refs,
                                         dataset=dataset, trace_fh=trace_fh)
                out_l = interactive_step(spec, split.train, partner_speaker, listener,
                                         cfg, rng_int, update_speaker=False,
                                         update_listener=True, kl_refs=kl_refs,
                                         dataset=dataset)
                is_losses.append(out_s["speaker_loss"])
                il_losses.append(out_l["listener_loss"])

            ss_losses, sl_losses = [], []
            if not kl_grounding:
                rng_sup = make_rng(cfg.seed, "supervised", iteration)
                for _ in range(cfg.supervised_steps):
                    ss_losses.append(supervised_speaker_step(
                        speaker, dataset, cfg.batch_size, rng_sup))
                    sl_losses.append(supervised_listener_step(
                        listener, spec, dataset, split.train, cfg, rng_sup))

            val_acc = _validation_accuracy(spec, split, meta_speaker, meta_listener,
                                           cfg, iteration)
            row = {
                "iteration": iteration,
                "meta_speaker_loss": float(np.mean(ms_losses)) if ms_losses else None,
                "meta_listener_loss": float(np.mean(ml_losses)) if ml_losses else None,
                "interactive_speaker_loss": float(np.mean(is_losses)) if is_losses else None,
                "interactive_listener_loss": float(np.mean(il_losses)) if il_losses else None,
                "supervised_speaker_loss": float(np.mean(ss_losses)) if ss_losses else None,
                "supervised_listener_loss": float(np.mean(sl_losses)) if sl_losses else None,
                "val_accuracy": val_acc,
                "buffer_speakers": len(speaker_buffer),
                "buffer_listeners": len(listener_buffer),
            }
            result.metrics.append(row)
            writer.row(row)
            if convergence.update(val_acc):
                break
    finally:
        if trace_fh is not None:
            trace_fh.close()

    # final fine-tune of the meta pair on the dataset
    rng_ft = make_rng(cfg.seed, "finetune")
    for _ in range(cfg.finetune_steps):
        supervised_speaker_step(meta_speaker, dataset, cfg.batch_size, rng_ft)
        supervised_listener_step(meta_listener, spec, dataset, split.train, cfg, rng_ft)

    result.speaker = (meta_speaker.arch, meta_speaker.store)
    result.listener = (meta_listener.arch, meta_listener.store)
    result.final_val_acc = _validation_accuracy(spec, split, meta_speaker,
                                                meta_listener, cfg, "final")
    result.final_test_acc = _test_accuracy(spec, split, meta_speaker, meta_listener, cfg)
    writer.checkpoint("meta_speaker_final", "speaker", meta_speaker.arch,
                      meta_speaker.store, world.hash, {"phase": "final"})
    writer.checkpoint("meta_listener_final", "listener", meta_listener.arch,
                      meta_listener.store, world.hash, {"phase": "final"})
    writer.close()
    return result


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

def _baseline_loop(cfg, world, speaker, listener, writer, result,
                   interactive_per_iter: int, supervised_per_iter: int,
                   self_play: bool = True):
    """Shared patience-gated loop for the single-pair baselines."""
    spec, split, dataset = world.spec, world.split, world.dataset
    convergence = _Convergence(cfg.patience, cfg.min_delta)
    for iteration in range(1, cfg.max_outer_iters + 1):
        rng_int = make_rng(cfg.seed, "interactive", iteration)
        is_losses, il_losses = [], []
        for _ in range(interactive_per_iter):
            out = interactive_step(spec, split.train, speaker, listener, cfg, rng_int)
            is_losses.append(out["speaker_loss"])
            il_losses.append(out["listener_loss"])
        ss_losses, sl_losses = [], []
        rng_sup = make_rng(cfg.seed, "supervised", iteration)
        for _ in range(supervised_per_iter):
            ss_losses.append(supervised_speaker_step(speaker, dataset,
                                                     cfg.batch_size, rng_sup))
            sl_losses.append(supervised_listener_step(listener, spec, dataset,
                                                      split.train, cfg, rng_sup))
        val_acc = _validation_accuracy(spec, split, speaker, listener, cfg, iteration)
        row = {
            "iteration": iteration,
            "interactive_speaker_loss": float(np.mean(is_losses)) if is_losses else None,
            "interactive_listener_loss": float(np.mean(il_losses)) if il_losses else None,
            "supervised_speaker_loss": float(np.mean(ss_losses)) if ss_losses else None,
            "supervised_listener_loss": float(np.mean(sl_losses)) if sl_losses else None,
            "val_accuracy": val_acc,
        }
        result.metrics.append(row)
        writer.row(row)
        if convergence.update(val_acc):
            break


def run_baseline(kind: str, cfg: TrainConfig, run_dir=None) -> RunResult:
    """Train one of the comparison methods; see BASELINE_KINDS."""
    if kind not in BASELINE_KINDS:
        raise ConfigError(f"unknown baseline '{kind}' (valid: {', '.join(BASELINE_KINDS)})")
    set_debug_checks(cfg.debug_checks)
    world = build_world(cfg)
    spec, split, dataset = world.spec, world.split, world.dataset
    writer = _RunWriter(run_dir, cfg)
    block = cfg.interactive_steps + cfg.supervised_steps

    speaker = new_speaker(cfg, make_rng(cfg.seed, "init", "speaker"))
    listener = new_listener(cfg, make_rng(cfg.seed, "init", "listener"))
    result = RunResult(cfg=cfg, method=kind, world=world,
                       speaker=(speaker.arch, speaker.store),
                       listener=(listener.arch, listener.store), metrics=[],
                       run_dir=str(run_dir) if run_dir else None)

    def pretrain(spk, lst):
        rng_pre = make_rng(cfg.seed, "pretrain", spk.store.fingerprint()[:8])
        for _ in range(cfg.pretrain_steps):
            supervised_speaker_step(spk, dataset, cfg.batch_size, rng_pre)
            supervised_listener_step(lst, spec, dataset, split.train, cfg, rng_pre)

    if kind == "pretrained":
        pretrain(speaker, listener)
        result.pretrained = (speaker.snapshot(), listener.snapshot())
        _baseline_loop(cfg, world, speaker, listener, writer, result,
                       interactive_per_iter=0, supervised_per_iter=block)

    elif kind == "emecom":
        _baseline_loop(cfg, world, speaker, listener, writer, result,
                       interactive_per_iter=block, supervised_per_iter=0)

    elif kind == "s2p":
        pretrain(speaker, listener)
        result.pretrained = (speaker.snapshot(), listener.snapshot())
        _baseline_loop(cfg, world, speaker, listener, writer, result,
                       interactive_per_iter=cfg.interactive_steps,
                       supervised_per_iter=cfg.supervised_steps)

    elif kind == "gentrans":
        pretrain(speaker, listener)
        result.pretrained = (speaker.snapshot(), listener.snapshot())
        pairs = []
        for p in range(cfg.population_size):
            s = new_speaker(cfg, make_rng(cfg.seed, "pop", p, "s"))
            l = new_listener(cfg, make_rng(cfg.seed, "pop", p, "l"))
            s.store.copy_from(speaker.store)
            l.store.copy_from(listener.store)
            pairs.append((s, l))
        convergence = _Convergence(cfg.patience, cfg.min_delta)
        reinit_next = 0
        for iteration in range(1, cfg.max_outer_iters + 1):
            rng_it = make_rng(cfg.seed, "gentrans", iteration)
            s_idx = int(rng_it.integers(cfg.population_size))
            l_idx = int(rng_it.integers(cfg.population_size))
            spk, lst = pairs[s_idx][0], pairs[l_idx][1]
            is_losses = []
            for _ in range(cfg.interactive_steps):
                out = interactive_step(spec, split.train, spk, lst, cfg, rng_it)
                is_losses.append(out["speaker_loss"])
            rng_sup = make_rng(cfg.seed, "supervised", iteration)
            for _ in range(cfg.supervised_steps):
                supervised_speaker_step(spk, dataset, cfg.batch_size, rng_sup)
                supervised_listener_step(lst, spec, dataset, split.train, cfg, rng_sup)
            if iteration % cfg.gentrans_period == 0:
                s, l = pairs[reinit_next]
                s.store.copy_from(result.pretrained[0][1])
                l.store.copy_from(result.pretrained[1][1])
                s.adam = AdamState(size=s.store.total_size, lr=cfg.outer_lr)
                l.adam = AdamState(size=l.store.total_size, lr=cfg.outer_lr)
                reinit_next = (reinit_next + 1) % cfg.population_size
            accs = [_validation_accuracy(spec, split, s, l, cfg, (iteration, i))
                    for i, (s, l) in enumerate(pairs)]
            best = int(np.argmax(accs))
            row = {"iteration": iteration,
                   "interactive_speaker_loss": float(np.mean(is_losses)),
                   "val_accuracy": float(accs[best])}
            result.metrics.append(row)
            writer.row(row)
            speaker, listener = pairs[best]
            if convergence.update(accs[best]):
                break
        result.speaker = (speaker.arch, speaker.store)
        result.listener = (listener.arch, listener.store)

    elif kind == "l2c":
        speaker_buffer = PopulationBuffer(max(cfg.buffer_capacity, cfg.population_size))
        listener_buffer = PopulationBuffer(max(cfg.buffer_capacity, cfg.population_size))
        first_pair = None
        for p in range(cfg.population_size):
            s = new_speaker(cfg, make_rng(cfg.seed, "pop", p, "s"))
            l = new_listener(cfg, make_rng(cfg.seed, "pop", p, "l"))
            rng_pre = make_rng(cfg.seed, "pop_pretrain", p)
            for _ in range(cfg.pretrain_steps):
                supervised_speaker_step(s, dataset, cfg.batch_size, rng_pre)
                supervised_listener_step(l, spec, dataset, split.train, cfg, rng_pre)
            if first_pair is None:
                first_pair = (s.snapshot(), l.snapshot())
            # population pairs co-adapt through pure self-play after their
            # shared grounding, so each seed's population drifts its own way
            for it in range(1, cfg.static_pair_iters + 1):
                rng_it = make_rng(cfg.seed, "pop_selfplay", p, it)
                for _ in range(cfg.interactive_steps + cfg.supervised_steps):
                    interactive_step(spec, split.train, s, l, cfg, rng_it)
            rng_res = make_rng(cfg.seed, "pop_insert", p)
            reservoir_insert(speaker_buffer, s.arch, s.store, p, rng_res)
            reservoir_insert(listener_buffer, l.arch, l.store, p, rng_res)
        result.pretrained = first_pair
        meta_speaker = new_speaker(cfg, make_rng(cfg.seed, "init", "meta_speaker"))
        meta_listener = new_listener(cfg, make_rng(cfg.seed, "init", "meta_listener"))
        convergence = _Convergence(cfg.patience, cfg.min_delta)
        for iteration in range(1, cfg.max_outer_iters + 1):
            inner_pool, outer_pool = split.split_train(
                make_rng(cfg.seed, "resplit", iteration))
            rng_meta = make_rng(cfg.seed, "meta", iteration)
            ms, ml = [], []
            for _ in range(cfg.meta_steps):
                ms.append(meta_speaker_step(meta_speaker, listener_buffer,
                                            inner_pool, outer_pool, spec, cfg, rng_meta))
                ml.append(meta_listener_step(meta_listener, speaker_buffer,
                                             inner_pool, outer_pool, spec, cfg, rng_meta))
            val_acc = _validation_accuracy(spec, split, meta_speaker, meta_listener,
                                           cfg, iteration)
            row = {"iteration": iteration, "meta_speaker_loss": float(np.mean(ms)),
                   "meta_listener_loss": float(np.mean(ml)), "val_accuracy": val_acc,
                   "buffer_speakers": len(speaker_buffer),
                   "buffer_listeners": len(listener_buffer)}
            result.metrics.append(row)
            writer.row(row)
            if convergence.update(val_acc):
                break
        rng_ft = make_rng(cfg.seed, "finetune")
        for _ in range(cfg.finetune_steps):
            supervised_speaker_step(meta_speaker, dataset, cfg.batch_size, rng_ft)
            supervised_listener_step(meta_listener, spec, dataset, split.train,
                                     cfg, rng_ft)
        result.speaker = (meta_speaker.arch, meta_speaker.store)
        result.listener = (meta_listener.arch, meta_listener.store)
        speaker, listener = meta_speaker, meta_listener

    if kind in ("pretrained", "emecom", "s2p"):
        result.speaker = (speaker.arch, speaker.store)
        result.listener = (listener.arch, listener.store)
        final_s, final_l = speaker, listener
    elif kind == "gentrans":
        final_s, final_l = speaker, listener
    else:
        final_s, final_l = speaker, listener

    result.final_val_acc = _validation_accuracy(spec, split, final_s, final_l,
                                                cfg, "final")
    result.final_test_acc = _test_accuracy(spec, split, final_s, final_l, cfg)
    writer.checkpoint("speaker_final", "speaker", result.speaker[0],
                      result.speaker[1], world.hash, {"phase": "final"})
    writer.checkpoint("listener_final", "listener", result.listener[0],
                      result.listener[1], world.hash, {"phase": "final"})
    writer.close()
    return result


def run_ablation(kind: str, cfg: TrainConfig, run_dir=None) -> RunResult:
    """Ablations of the main loop; see ABLATION_KINDS."""
    if kind == "no_meta_agents":
        return run_algorithm1(cfg, run_dir, interactive_partner="buffer",
                              method_name=kind)
    if kind == "no_adaptive_meta_i":
        return run_algorithm1(cfg, run_dir, reset_meta=True, method_name=kind)
    if kind == "no_adaptive_meta_ii":
        return run_algorithm1(cfg, run_dir, interactive_partner="buffer",
                              reset_meta=True, method_name=kind)
    if kind == "kl_grounding":
        return run_algorithm1(cfg, run_dir, kl_grounding=True, method_name=kind)
    raise ConfigError(f"unknown ablation '{kind}' (valid: {', '.join(ABLATION_KINDS)})")


def run_method(method: str, cfg: TrainConfig, run_dir=None) -> RunResult:
    """Dispatch: 'ours', a baseline kind, or an ablation kind."""
    if method == "ours":
        return run_algorithm1(cfg, run_dir)
    if method in BASELINE_KINDS:
        return run_baseline(method, cfg, run_dir)
    if method in ABLATION_KINDS:
        return run_ablation(method, cfg, run_dir)
    raise ConfigError(f"unknown method '{method}'")
