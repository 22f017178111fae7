"""Alternating two-level training: a general model learned across scenes
initializes a scene model adapted from a handful of samples, and the
post-adaptation test loss drives the general model's update.

Meta modes: FIRST_ORDER evaluates episode-test gradients at the adapted
parameters and applies them to the general parameters (Adam inner loop);
FULL_UNROLLED records the inner SGD steps on a differentiable tape and
backpropagates the episode-test loss through the whole adaptation.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .losses import FeatureExtractor, LossWeights, l1_loss, perceptual_loss
from .nets import ParameterSet, discriminator_forward, generator_forward
from .optim import AdamState, adam_step, sgd_step_differentiable
from .rng import stream, substream_seed
from .tasks import SegMap, TaskEpisode, augment, render, retrieve_topk, sample_episode
from .tensor import Tape, TensorError, backward


class MetaMode:
    FIRST_ORDER = "first-order"
    FULL_UNROLLED = "full-unrolled"
    ALL = (FIRST_ORDER, FULL_UNROLLED)


@dataclass(frozen=True)
class EpisodeConfig:
    n_shot: int = 5
    inner_iters: int = 20  # test-time adaptation steps per new scene
    train_inner_iters: int = 2  # adaptation steps inside meta-training
    inner_batch: int = 5
    meta_batch: int = 5
    n_test: int = 5
    pretrain_iters: int = 2000  # reference recipe: 50k
    metatrain_iters: int = 1000  # reference recipe: 20k
    alpha: float = 1e-4  # scene-model step size
    beta: float = 1e-4  # general-model step size
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    k_aux: int = 5
    gp_finetune_iters: int = 50

    def __post_init__(self):
        if self.n_shot not in (1, 5):
            raise TensorError("EpisodeConfig: n_shot must be 1 or 5")
        for name in ("inner_batch", "meta_batch", "n_test", "k_aux"):
            if getattr(self, name) < 1:
                raise TensorError(f"EpisodeConfig: {name} must be positive")
        for name in ("inner_iters", "train_inner_iters", "pretrain_iters",
                     "metatrain_iters", "gp_finetune_iters"):
            if getattr(self, name) < 0:
                raise TensorError(f"EpisodeConfig: {name} must be >= 0")
        if self.alpha <= 0 or self.beta <= 0:
            raise TensorError("EpisodeConfig: step sizes must be positive")


@dataclass
class Objective:
    """Training losses for a (generator, discriminator) pair over a batch.

    Forward functions are injectable so gradient oracles can run on tiny
    hand-built networks.
    """

    phi: FeatureExtractor
    weights: LossWeights = field(default_factory=LossWeights)
    g_forward: callable = None
    d_forward: callable = None

    def __post_init__(self):
        self.g_forward = self.g_forward or generator_forward
        self.d_forward = self.d_forward or discriminator_forward

    def _triple(self, sample):
        if isinstance(sample, tuple):
            return sample
        return sample.tensors()

    def pair_losses(self, g, d, samples, want_d=True):
        """(mean generator total loss, mean discriminator loss or None)."""
        n = len(samples)
        total_g, total_d = None, None
        for sample in samples:
            xs, xr, y = self._triple(sample)
            fake = self.g_forward(g, xs, xr)
            lg_parts = l1_loss(fake, y)
            if want_d or self.weights.adversarial != 0.0:
                p_fake = self._prob(d, xs, fake)
                one = T.constant(np.ones(p_fake.shape))
                log_one_minus_fake = T.reduce_mean(T.log(T.sub(one, p_fake)))
                if self.weights.adversarial != 0.0:
                    adv_g = (
                        T.scalar_mul(T.reduce_mean(T.log(p_fake)), -1.0)
                        if self.weights.nonsaturating
                        else log_one_minus_fake
                    )
                    lg_parts = T.add(lg_parts, T.scalar_mul(adv_g, self.weights.adversarial))
            if self.weights.perceptual != 0.0:
                lg_parts = T.add(
                    lg_parts,
                    T.scalar_mul(perceptual_loss(self.phi, fake, y), self.weights.perceptual),
                )
            total_g = lg_parts if total_g is None else T.add(total_g, lg_parts)
            if want_d:
                p_real = self._prob(d, xs, y)
                ld = T.scalar_mul(
                    T.add(T.reduce_mean(T.log(p_real)), log_one_minus_fake), -1.0
                )
                total_d = ld if total_d is None else T.add(total_d, ld)
        mean_g = T.scalar_mul(total_g, 1.0 / n)
        mean_d = T.scalar_mul(total_d, 1.0 / n) if want_d else None
        return mean_g, mean_d

    def _prob(self, d, xs, img):
        from .losses import PROB_CLAMP

        logits = self.d_forward(d, xs, img)
        return T.clamp(T.sigmoid(logits), PROB_CLAMP, 1.0 - PROB_CLAMP)

    def disc_loss_detached(self, g, d, samples):
        """Discriminator loss with generated images treated as constants."""
        fakes = []
        with T.no_tape():
            for sample in samples:
                xs, xr, _ = self._triple(sample)
                fakes.append(T.constant(self.g_forward(g, xs, xr).data))
        total = None
        for sample, fake in zip(samples, fakes):
            xs, _, y = self._triple(sample)
            p_real = self._prob(d, xs, y)
            p_fake = self._prob(d, xs, fake)
            one = T.constant(np.ones(p_fake.shape))
            ld = T.scalar_mul(
                T.add(T.reduce_mean(T.log(p_real)), T.reduce_mean(T.log(T.sub(one, p_fake)))),
                -1.0,
            )
            total = ld if total is None else T.add(total, ld)
        return T.scalar_mul(total, 1.0 / len(samples))

    def generate(self, g, sample) -> np.ndarray:
        xs, xr, _ = self._triple(sample)
        return self.g_forward(g, xs, xr).data


@dataclass
class BiLevelState:
    """General-model parameters, their optimizer states, and counters."""

    config: EpisodeConfig
    objective: Objective
    g_gp: ParameterSet
    d_gp: ParameterSet
    seed: int
    adam_g: AdamState = None
    adam_d: AdamState = None
    adam_g_pre: AdamState = None
    adam_d_pre: AdamState = None
    pretrain_iteration: int = 0
    meta_iteration: int = 0
    log_fn: callable = None

    def __post_init__(self):
        c = self.config
        if self.adam_g is None:
            self.adam_g = AdamState.for_params(self.g_gp, c.beta, c.beta1, c.beta2, c.eps)
        if self.adam_d is None:
            self.adam_d = AdamState.for_params(self.d_gp, c.beta, c.beta1, c.beta2, c.eps)
        if self.adam_g_pre is None:
            self.adam_g_pre = AdamState.for_params(self.g_gp, c.alpha, c.beta1, c.beta2, c.eps)
        if self.adam_d_pre is None:
            self.adam_d_pre = AdamState.for_params(self.d_gp, c.alpha, c.beta1, c.beta2, c.eps)

    def emit(self, record: dict):
        if self.log_fn is not None:
            self.log_fn(record)

    def clone_params_and_optim(self) -> "BiLevelState":
        """Deep copy of parameters and optimizer moments; counters reset."""

        def copy_adam(a):
            out = AdamState(rate=a.rate, beta1=a.beta1, beta2=a.beta2, eps=a.eps, t=a.t)
            out.m = {k: v.copy() for k, v in a.m.items()}
            out.v = {k: v.copy() for k, v in a.v.items()}
            return out

        return BiLevelState(
            config=self.config,
            objective=self.objective,
            g_gp=self.g_gp.copy(),
            d_gp=self.d_gp.copy(),
            seed=self.seed,
            adam_g=copy_adam(self.adam_g),
            adam_d=copy_adam(self.adam_d),
            adam_g_pre=copy_adam(self.adam_g_pre),
            adam_d_pre=copy_adam(self.adam_d_pre),
        )


# ---------------------------------------------------------------------------
# batches


def _one_hot_tensor(labels, classes):
    return T.constant(SegMap(labels, classes).one_hot())


def _batch_for_iteration(samples, inner_batch, rng):
    """A training batch of tensor triples; short sample sets are padded
    with freshly augmented copies so the batch size stays constant."""
    triples = [s.tensors() for s in samples]
    if len(triples) >= inner_batch:
        if len(triples) == inner_batch:
            return triples
        idx = rng.choice(len(triples), size=inner_batch, replace=False)
        return [triples[i] for i in sorted(idx)]
    classes = samples[0].x_struct.classes
    out = list(triples)
    while len(out) < inner_batch:
        base = samples[int(rng.integers(0, len(samples)))]
        img2, lab2 = augment(base.y, base.x_struct.labels, int(rng.integers(0, 2**62)))
        ref = None if base.x_ref is None else T.constant(base.x_ref)
        out.append((_one_hot_tensor(lab2, classes), ref, T.constant(img2)))
    return out


# ---------------------------------------------------------------------------
# inner adaptation


def inner_adapt(gp_pair, train_samples, config: EpisodeConfig, mode: str,
                objective: Objective, seed: int, n_iters: int | None = None):
    """Adapt a copy of the general pair to one scene's training split.

    Returns (g_is, d_is, tape). The general parameters are never touched.
    FIRST_ORDER runs Adam steps eagerly and returns tape=None;
    FULL_UNROLLED runs SGD steps on a differentiable tape and returns it,
    with g_is/d_is holding tape-connected tensors.
    """
    if not train_samples:
        raise TensorError("inner_adapt: empty training split")
    if mode not in MetaMode.ALL:
        raise TensorError(f"inner_adapt: unknown mode {mode!r}")
    g_gp, d_gp = gp_pair
    steps = config.inner_iters if n_iters is None else n_iters

    if mode == MetaMode.FIRST_ORDER:
        g_is, d_is = g_gp.copy(), d_gp.copy()
        adam_g = AdamState.for_params(g_is, config.alpha, config.beta1, config.beta2, config.eps)
        adam_d = AdamState.for_params(d_is, config.alpha, config.beta1, config.beta2, config.eps)
        for it in range(steps):
            rng = stream(seed, "inner-batch", it)
            batch = _batch_for_iteration(train_samples, config.inner_batch, rng)
            with Tape():
                loss_d = objective.disc_loss_detached(g_is, d_is, batch)
                gd = backward(loss_d, d_is.tensors())
            adam_step(adam_d, d_is, d_is.grads_by_name(gd))
            with Tape():
                loss_g, _ = objective.pair_losses(g_is, d_is, batch, want_d=False)
                gg = backward(loss_g, g_is.tensors())
            adam_step(adam_g, g_is, g_is.grads_by_name(gg))
        return g_is, d_is, None

    tape = Tape(Tape.DIFFERENTIABLE)
    g_cur = dict(g_gp.items())
    d_cur = dict(d_gp.items())
    with tape:
        for it in range(steps):
            rng = stream(seed, "inner-batch", it)
            batch = _batch_for_iteration(train_samples, config.inner_batch, rng)
            # discriminator step first, computed against the current generator
            _, loss_d = objective.pair_losses(
                g_gp.with_tensors(g_cur), d_gp.with_tensors(d_cur), batch
            )
            gd = backward(loss_d, list(d_cur.values()))
            d_cur = sgd_step_differentiable(d_cur, {n: gd[p] for n, p in d_cur.items()}, config.alpha)
            # generator step against the updated discriminator
            loss_g, _ = objective.pair_losses(
                g_gp.with_tensors(g_cur), d_gp.with_tensors(d_cur), batch, want_d=False
            )
            gg = backward(loss_g, list(g_cur.values()))
            g_cur = sgd_step_differentiable(g_cur, {n: gg[p] for n, p in g_cur.items()}, config.alpha)
    return g_gp.with_tensors(g_cur), d_gp.with_tensors(d_cur), tape


# ---------------------------------------------------------------------------
# training phases


def pretrain(state: BiLevelState, scenes: list, iters: int | None = None) -> BiLevelState:
    """Conventional alternating GAN training on samples pooled across scenes."""
    if not scenes:
        raise TensorError("pretrain: empty scene pool")
    total = state.config.pretrain_iters if iters is None else iters
    cfg = state.config
    while state.pretrain_iteration < total:
        it = state.pretrain_iteration
        rng = stream(state.seed, "pretrain", it)
        samples = []
        for _ in range(cfg.inner_batch):
            scene = scenes[int(rng.integers(0, len(scenes)))]
            samples.append(render(scene, int(rng.integers(0, 2**62))))
        t0 = time.perf_counter()
        with Tape():
            loss_d = state.objective.disc_loss_detached(state.g_gp, state.d_gp, samples)
            gd = backward(loss_d, state.d_gp.tensors())
        # discriminator first, then the generator against the updated critic
        adam_step(state.adam_d_pre, state.d_gp, state.d_gp.grads_by_name(gd))
        with Tape():
            loss_g, _ = state.objective.pair_losses(state.g_gp, state.d_gp, samples, want_d=False)
            gg = backward(loss_g, state.g_gp.tensors())
        adam_step(state.adam_g_pre, state.g_gp, state.g_gp.grads_by_name(gg))
        state.pretrain_iteration += 1
        state.emit(
            {
                "phase": "pretrain",
                "iteration": state.pretrain_iteration,
                "loss_g_total": loss_g.item(),
                "loss_d": loss_d.item(),
                "wall": time.perf_counter() - t0,
            }
        )
    return state


def meta_gradients(state: BiLevelState, episodes: list, mode: str):
    """Episode-averaged general-model gradients after per-episode adaptation.

    FIRST_ORDER takes the test-loss gradients at the adapted parameters;
    FULL_UNROLLED backpropagates them through the recorded inner steps.
    Returns (g grads, d grads, mean generator loss, mean discriminator loss).
    """
    cfg = state.config
    for ep in episodes:
        if not ep.train or not ep.test:
            raise TensorError("meta_gradients: episode is missing a split")

    sum_g = {n: np.zeros_like(p.data) for n, p in state.g_gp.items()}
    sum_d = {n: np.zeros_like(p.data) for n, p in state.d_gp.items()}
    mean_lg = mean_ld = 0.0

    for ep in episodes:
        ep_seed = substream_seed(state.seed, "meta-inner", state.meta_iteration, ep.scene_id)
        g_is, d_is, tape = inner_adapt(
            (state.g_gp, state.d_gp), ep.train, cfg, mode, state.objective,
            ep_seed, n_iters=cfg.train_inner_iters,
        )
        if mode == MetaMode.FIRST_ORDER:
            with Tape():
                loss_g, loss_d = state.objective.pair_losses(g_is, d_is, ep.test)
                gg = backward(loss_g, g_is.tensors())
                gd = backward(loss_d, d_is.tensors())
            g_by_name = g_is.grads_by_name(gg)
            d_by_name = d_is.grads_by_name(gd)
        else:
            with tape:
                loss_g, loss_d = state.objective.pair_losses(g_is, d_is, ep.test)
                gg = backward(loss_g, state.g_gp.tensors())
                gd = backward(loss_d, state.d_gp.tensors())
            g_by_name = state.g_gp.grads_by_name(gg)
            d_by_name = state.d_gp.grads_by_name(gd)
        for n in sum_g:
            sum_g[n] += g_by_name[n]
        for n in sum_d:
            sum_d[n] += d_by_name[n]
        mean_lg += loss_g.item() / len(episodes)
        mean_ld += loss_d.item() / len(episodes)

    k = float(len(episodes))
    return (
        {n: v / k for n, v in sum_g.items()},
        {n: v / k for n, v in sum_d.items()},
        mean_lg,
        mean_ld,
    )


def meta_update(state: BiLevelState, episodes: list, mode: str) -> BiLevelState:
    """One general-model update from a batch of episodes.

    Each episode is adapted on its training split; the post-adaptation
    losses on the full test split are averaged across the batch and one
    Adam step (rate beta) is applied to each general network.
    """
    if len(episodes) != state.config.meta_batch:
        raise TensorError(
            f"meta_update: expected {state.config.meta_batch} episodes, got {len(episodes)}"
        )
    avg_g, avg_d, mean_lg, mean_ld = meta_gradients(state, episodes, mode)
    adam_step(state.adam_g, state.g_gp, avg_g)
    adam_step(state.adam_d, state.d_gp, avg_d)
    state.meta_iteration += 1
    state.emit(
        {
            "phase": "meta",
            "iteration": state.meta_iteration,
            "loss_g_total": mean_lg,
            "loss_d": mean_ld,
        }
    )
    return state


def metatrain(state: BiLevelState, scenes: list, mode: str = MetaMode.FIRST_ORDER,
              iters: int | None = None, with_reference: bool = True,
              allow_flip: bool = True) -> BiLevelState:
    """Alternating learning over episodes sampled from the training scenes."""
    if not scenes:
        raise TensorError("metatrain: empty scene pool")
    total = state.config.metatrain_iters if iters is None else iters
    cfg = state.config
    while state.meta_iteration < total:
        it = state.meta_iteration
        rng = stream(state.seed, "metatrain-episodes", it)
        picks = rng.choice(len(scenes), size=min(cfg.meta_batch, len(scenes)), replace=False)
        episodes = []
        for idx in sorted(int(i) for i in picks):
            scene = scenes[idx]
            ep_seed = substream_seed(state.seed, "metatrain-episode", it, scene.scene_id)
            episodes.append(
                sample_episode(scene, cfg.n_shot, cfg.n_test, ep_seed, with_reference, allow_flip)
            )
        t0 = time.perf_counter()
        meta_update(state, episodes, mode)
        state.emit({"phase": "meta-wall", "iteration": state.meta_iteration,
                    "wall": time.perf_counter() - t0})
    return state


def gp_finetune_on_aux(state: BiLevelState, aux_tasks: list, mode: str,
                       seed: int) -> BiLevelState:
    """Continue the alternating loop on retrieved auxiliary tasks; acts on a
    copy, the caller's state is untouched."""
    tuned = state.clone_params_and_optim()
    tuned.seed = seed
    k = len(aux_tasks)
    batch = min(state.config.meta_batch, k)
    tuned.config = replace(tuned.config, meta_batch=batch)
    for it in range(state.config.gp_finetune_iters):
        rng = stream(seed, "gp-finetune", it)
        picks = rng.choice(k, size=batch, replace=False)
        episodes = [aux_tasks[int(i)] for i in sorted(picks)]
        meta_update(tuned, episodes, mode)
    return tuned


def test_adapt(state: BiLevelState, episode: TaskEpisode, train_tasks: list,
               k: int, use_aux: bool, seed: int = 0,
               finetune_mode: str = MetaMode.FIRST_ORDER):
    """Adapt to an unseen scene and generate its test images.

    With use_aux, the top-K most similar training tasks first fine-tune a
    copy of the general pair; the caller's state is bitwise unchanged
    either way. Returns (g_is, d_is, images).
    """
    if not episode.train:
        raise TensorError("test_adapt: unseen episode has no training split")
    if use_aux:
        if k > len(train_tasks):
            raise TensorError(f"test_adapt: k={k} exceeds {len(train_tasks)} train tasks")
        aux = retrieve_topk(episode.train[0].x_struct, train_tasks, k)
        tuned = gp_finetune_on_aux(state, aux, finetune_mode,
                                   substream_seed(seed, "aux", episode.scene_id))
        gp_pair = (tuned.g_gp, tuned.d_gp)
    else:
        gp_pair = (state.g_gp, state.d_gp)
    g_is, d_is, _ = inner_adapt(
        gp_pair, episode.train, state.config, MetaMode.FIRST_ORDER,
        state.objective, substream_seed(seed, "test-adapt", episode.scene_id),
        n_iters=state.config.inner_iters,
    )
    images = [state.objective.generate(g_is, s) for s in episode.test]
    return g_is, d_is, images


test_adapt.__test__ = False  # not a pytest case despite the spec-mandated name
