"""Learning-to-self-train: inner self-training loop and outer meta-updates.

One episode runs as:

1. fit the classifier on the support set (the pseudo-labeler),
2. pseudo-label an unlabeled subset and keep the top-Z per predicted class,
3. weight each kept sample's logits with the SWN's per-class weights,
4. re-train for ``m`` steps on support + pseudo-labeled data, then fine-tune
   on the support set alone for the remaining ``T - m`` steps,
5. optionally repeat 2-4 on fresh subsets with the latest classifier.

The meta-step updates the SWN from the query loss at the re-trained classifier
and the scale-shift + classifier initialisation from the query loss at the
final one.

Gradient modes for the inner loop:

``eval``
    plain numbers, nothing differentiable leaves the loop.
``first-order``
    every inner gradient is taken at a detached copy of the classifier, so the
    classifier-to-classifier Jacobian is the identity, while the dependence of
    each step's gradient on features and SWN weights stays on the tape.
``exact``
    full unrolled differentiation (second order through every step).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NumericDomainError, Tape, Var
from .episodes import Episode, draw_unlabeled_subset, mixing_pool, sample_episode
from .model import (
    Backbone,
    classify,
    compute_prototypes,
    extract_features,
    identity_scale_shift,
    init_swn,
    leaves,
    lift,
    swn_weights,
    zero_classifier,
)

log = logging.getLogger(__name__)


@dataclass
class MetaState:
    scale_shift: dict[str, np.ndarray]
    theta_prime: dict[str, np.ndarray]
    swn: dict[str, np.ndarray]
    iteration: int = 0
    beta1: float = 0.001
    beta2: float = 0.001

    @classmethod
    def initial(cls, backbone: Backbone, config, seed: int = 0) -> "MetaState":
        rng = np.random.default_rng([seed, 21])
        return cls(
            identity_scale_shift(backbone),
            zero_classifier(backbone.embed_dim, config.way),
            init_swn(backbone.embed_dim, rng, config.swn_hidden),
            0,
            config.beta1,
            config.beta2,
        )

    def copy(self) -> "MetaState":
        cp = lambda d: {k: v.copy() for k, v in d.items()}
        return MetaState(cp(self.scale_shift), cp(self.theta_prime), cp(self.swn), self.iteration, self.beta1, self.beta2)

    def named(self) -> dict[str, np.ndarray]:
        out = {f"ss.{k}": v for k, v in self.scale_shift.items()}
        out.update({f"theta.{k}": v for k, v in self.theta_prime.items()})
        out.update({f"swn.{k}": v for k, v in self.swn.items()})
        return out

    @classmethod
    def from_named(cls, arrays: dict[str, np.ndarray], iteration: int = 0, beta1: float = 0.001, beta2: float = 0.001) -> "MetaState":
        group = lambda p: {k[len(p):]: np.array(v) for k, v in arrays.items() if k.startswith(p)}
        return cls(group("ss."), group("theta."), group("swn."), iteration, beta1, beta2)


@dataclass
class PseudoLabeledSet:
    indices: np.ndarray  # rows of the unlabeled subset that were kept
    labels: np.ndarray
    confidences: np.ndarray
    weights: object = None  # (n, N) Var or array, None for unweighted
    shortfall: dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class InnerLoopResult:
    theta_m: dict
    theta_T: dict
    losses: list[float]
    pseudo_accuracy: float = float("nan")
    selected_accuracy: float = float("nan")
    n_selected: int = 0


# ---------------------------------------------------------------------------
# inner loop


def _values(theta) -> dict[str, np.ndarray]:
    return {k: ad._val(v) for k, v in theta.items()}


def support_loss(support_features, support_y, theta) -> Var:
    return ad.cross_entropy(classify(support_features, theta), support_y)


def mixed_loss(support_features, support_y, theta, pseudo_features, pseudo_labels, weights) -> Var:
    """Mean cross-entropy over S and R^p; only pseudo-labeled logits are weighted."""
    if pseudo_features is None or len(pseudo_labels) == 0:
        return support_loss(support_features, support_y, theta)
    logits_s = classify(support_features, theta)
    logits_r = classify(pseudo_features, theta)
    if weights is not None:
        logits_r = ad.multiply(logits_r, weights)
    labels = np.concatenate([np.asarray(support_y), np.asarray(pseudo_labels)])
    return ad.cross_entropy(ad.concat_rows(logits_s, logits_r), labels)


def _gd_step(theta, alpha: float, loss_fn, mode: str):
    """One gradient step on the classifier; returns (new theta, loss value)."""
    if mode == "eval":
        tape = Tape()
        th = {k: tape.leaf(v, name=k) for k, v in theta.items()}
        loss = loss_fn(th)
        g = ad.backward(tape, loss)
        return {k: theta[k] - alpha * g[k] for k in theta}, float(loss.value)
    if mode == "first-order":
        th = {k: ad.detach(v) for k, v in theta.items()}
    elif mode == "exact":
        th = theta
    else:
        raise ValueError(f"unknown gradient mode {mode!r}")
    loss = loss_fn(th)
    tape = loss.tape
    g = ad.backward(tape, loss, wrt=list(th.values()), create_graph=True)
    return {k: ad.sub(theta[k], ad.multiply(g[th[k].id], alpha)) for k in theta}, float(loss.value)


def _graph_ready(theta, tape: Tape | None):
    """Make sure every classifier entry is a Var on ``tape`` (graph modes)."""
    return {k: v if isinstance(v, Var) else tape.leaf(v) for k, v in theta.items()}


def inner_self_train(
    support_features,
    support_y,
    theta0,
    pseudo_features=None,
    pseudo_labels=(),
    weights=None,
    steps: int = 40,
    retrain_steps: int = 10,
    alpha: float = 0.01,
    mode: str = "eval",
) -> InnerLoopResult:
    """``retrain_steps`` steps on S + R^p, then ``steps - retrain_steps`` on S only."""
    if not 0 <= retrain_steps <= steps:
        raise ValueError(f"need 0 <= retrain_steps <= steps, got {retrain_steps}, {steps}")
    theta = dict(theta0)
    losses: list[float] = []
    theta_m = theta
    for t in range(1, steps + 1):
        if t <= retrain_steps:
            fn = lambda th: mixed_loss(support_features, support_y, th, pseudo_features, pseudo_labels, weights)
        else:
            fn = lambda th: support_loss(support_features, support_y, th)
        theta, loss = _gd_step(theta, alpha, fn, mode)
        if not math.isfinite(loss):
            raise NumericDomainError(f"inner loop loss is not finite at step {t}")
        losses.append(loss)
        if t == retrain_steps:
            theta_m = theta
    return InnerLoopResult(theta_m=theta_m, theta_T=theta, losses=losses)


def fit_on_support(support_features, support_y, theta0, steps: int, alpha: float, mode: str = "eval") -> dict:
    """Plain gradient descent on the support cross-entropy (the base learner)."""
    return inner_self_train(support_features, support_y, theta0, steps=steps, retrain_steps=0, alpha=alpha, mode=mode).theta_T


def pseudo_label(features, theta) -> tuple[np.ndarray, np.ndarray]:
    """Argmax class (ties -> lowest index) and max softmax probability per row."""
    th = _values(theta)
    logits = ad._val(features) @ th["W"] + th["b"]
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    labels = np.argmax(p, axis=1)
    return labels, p[np.arange(len(p)), labels]


def hard_select(labels, confidences, z: int, way: int) -> PseudoLabeledSet:
    """Keep the ``z`` most confident samples of each predicted class.

    Ties go to the lower sample index; short classes keep everything they have.
    """
    labels = np.asarray(labels)
    confidences = np.asarray(confidences)
    keep, shortfall = [], {}
    for c in range(way):
        members = np.flatnonzero(labels == c)
        order = np.lexsort((members, -confidences[members]))
        keep.append(members[order[:z]])
        if len(members) < z:
            shortfall[c] = z - len(members)
    if shortfall:
        log.debug("hard_select shortfall (class: missing) %s", shortfall)
    idx = np.concatenate(keep) if keep else np.zeros(0, np.int64)
    return PseudoLabeledSet(idx, labels[idx], confidences[idx], None, shortfall)


def select_all(labels, confidences) -> PseudoLabeledSet:
    idx = np.arange(len(labels))
    return PseudoLabeledSet(idx, np.asarray(labels), np.asarray(confidences))


def attach_weights(pseudo: PseudoLabeledSet, pseudo_features, prototypes, swn) -> PseudoLabeledSet:
    """Attach SWN weights computed against the current prototypes."""
    if len(pseudo) == 0:
        pseudo.weights = None
        return pseudo
    pseudo.weights = swn_weights(pseudo_features, prototypes, swn)
    return pseudo


# ---------------------------------------------------------------------------
# episode-level self-training


@dataclass(frozen=True)
class Setting:
    """One ablation variant of the self-training procedure."""

    tag: str
    use_unlabeled: bool = True
    hard: bool = True
    soft: bool = True
    recursive: bool = False
    mixing: bool = False
    oracle: bool = False


SETTINGS = {
    s.tag: s
    for s in (
        Setting("supervised-only", use_unlabeled=False, hard=False, soft=False),
        Setting("no-selection", hard=False, soft=False),
        Setting("hard", soft=False),
        Setting("soft", hard=False),
        Setting("hard+soft"),
        Setting("recursive-hard", soft=False, recursive=True),
        Setting("recursive-hard-soft", recursive=True),
        Setting("mixing-hard-soft", mixing=True),
        Setting("fully-supervised", hard=False, soft=False, recursive=True, oracle=True),
    )
}
ABLATION_GRID = (
    "no-selection", "hard", "soft", "hard+soft", "recursive-hard-soft",
    "mixing-hard-soft", "fully-supervised", "supervised-only",
)


@dataclass
class EpisodeFeatures:
    support: object
    query: object
    pool: object


@dataclass
class EpisodeRun:
    stages: list[InnerLoopResult]
    theta_final: dict
    query_accuracy: float = float("nan")


def episode_features(episode: Episode, backbone: Backbone, scale_shift) -> EpisodeFeatures:
    return EpisodeFeatures(
        extract_features(episode.support_x, backbone, scale_shift),
        extract_features(episode.query_x, backbone, scale_shift),
        extract_features(episode.pool_x, backbone, scale_shift),
    )


def _stage_subsets(episode: Episode, config, setting: Setting, stages: int, seed: int):
    if setting.mixing:
        return [mixing_pool(episode, stages, config.draw, seed)]
    n = stages if setting.recursive else 1
    return [draw_unlabeled_subset(episode, s, config.draw, seed) for s in range(1, n + 1)]


def self_train_episode(
    episode: Episode,
    feats: EpisodeFeatures,
    theta_prime,
    swn,
    config,
    setting: Setting,
    mode: str = "eval",
    stages: int | None = None,
    retrain_steps: int | None = None,
    subset_seed: int = 0,
) -> EpisodeRun:
    """Run one episode's (recursive) self-training under ``setting``."""
    stages = config.stages if stages is None else stages
    m = config.retrain_steps if retrain_steps is None else retrain_steps
    T, alpha = config.inner_steps, config.alpha
    graph = mode != "eval"
    tape = next((v.tape for v in (*theta_prime.values(), *swn.values()) if isinstance(v, Var)), None)

    support_vals = ad._val(feats.support)
    # the pseudo-labeler never carries gradient
    labeler = fit_on_support(support_vals, episode.support_y, _values(theta_prime), T, alpha, "eval")

    theta = _graph_ready(theta_prime, tape) if graph else _values(theta_prime)
    support = feats.support if graph else support_vals
    if not setting.use_unlabeled:
        res = inner_self_train(support, episode.support_y, theta, steps=T, retrain_steps=0, alpha=alpha, mode=mode)
        return EpisodeRun([res], res.theta_T)

    if not graph:
        etape = Tape()
        etape.recording = False
        swn = {k: lift(etape, ad._val(v)) for k, v in swn.items()}
    prototypes = None
    if setting.soft:
        sup = feats.support if graph else lift(etape, support_vals)
        prototypes = compute_prototypes(sup, episode.support_y, episode.way)

    results = []
    for subset in _stage_subsets(episode, config, setting, stages, subset_seed):
        rows = subset.indices
        pool_vals = ad._val(feats.pool)[rows]
        labels, conf = pseudo_label(pool_vals, labeler)
        hidden = episode.hidden_labels[rows]
        known = hidden >= 0
        pl_acc = float(np.mean(labels[known] == hidden[known])) if known.any() else float("nan")

        if setting.oracle:
            picked = PseudoLabeledSet(np.flatnonzero(known), hidden[known], np.ones(int(known.sum())))
        elif setting.hard:
            z = config.select_z
            if setting.mixing:
                z = int(math.ceil(config.select_z * len(rows) / (config.draw * episode.owner_count)))
            picked = hard_select(labels, conf, z, episode.way)
        else:
            picked = select_all(labels, conf)

        chosen = rows[picked.indices]
        if graph:
            pf = ad.gather_rows(feats.pool, chosen) if len(chosen) else None
        else:
            pf = lift(etape, pool_vals[picked.indices]) if len(chosen) else None
        if setting.soft and pf is not None:
            attach_weights(picked, pf, prototypes, swn)
            if not graph:
                picked.weights = picked.weights.value
        weights = picked.weights
        if not graph and pf is not None:
            pf = pf.value

        res = inner_self_train(
            support, episode.support_y, theta, pf, picked.labels, weights,
            steps=T, retrain_steps=m, alpha=alpha, mode=mode,
        )
        res.pseudo_accuracy = pl_acc
        hid = episode.hidden_labels[chosen]
        res.selected_accuracy = float(np.mean(picked.labels == hid)) if len(chosen) else float("nan")
        res.n_selected = len(chosen)
        results.append(res)
        theta = res.theta_T
        labeler = _values(res.theta_T)
    return EpisodeRun(results, theta)


def recursive_self_train(episode, backbone, state: MetaState, config, setting: str | Setting = "recursive-hard-soft", **kw) -> list[InnerLoopResult]:
    setting = SETTINGS[setting] if isinstance(setting, str) else setting
    feats = episode_features(episode, backbone, state.scale_shift)
    return self_train_episode(episode, feats, state.theta_prime, state.swn, config, setting, **kw).stages


def evaluate_episode(episode, backbone, state: MetaState, config, setting: str | Setting, **kw) -> EpisodeRun:
    """Self-train on one episode (no gradients) and score the query set."""
    setting = SETTINGS[setting] if isinstance(setting, str) else setting
    feats = episode_features(episode, backbone, state.scale_shift)
    run = self_train_episode(episode, feats, state.theta_prime, state.swn, config, setting, **kw)
    th = run.theta_final
    logits = feats.query.value @ th["W"] + th["b"]
    run.query_accuracy = float(np.mean(np.argmax(logits, axis=1) == episode.query_y))
    return run


# ---------------------------------------------------------------------------
# outer loop


META_SETTING = SETTINGS["hard+soft"]


@dataclass
class MetaStepInfo:
    loss_m: float
    loss_T: float
    grads: dict[str, np.ndarray]


def meta_gradients(episode: Episode, backbone: Backbone, state: MetaState, config, mask=frozenset()) -> MetaStepInfo:
    """Per-episode meta-gradients.

    The SWN gradient comes only from the query loss at theta_m; scale-shift
    and theta' gradients only from the query loss at theta_T. ``mask`` may
    contain ``"theta_m"`` and/or ``"theta_T"`` to zero that loss's gradient.
    """
    tape = Tape()
    ss = leaves(tape, state.scale_shift, "ss")
    th = leaves(tape, state.theta_prime, "theta")
    swn = leaves(tape, state.swn, "swn")
    feats = episode_features(episode, backbone, ss)
    run = self_train_episode(
        episode, feats, th, swn, config, META_SETTING,
        mode=config.meta_grad_mode, stages=config.meta_train_stages,
    )
    last = run.stages[-1]
    loss_m = ad.cross_entropy(classify(feats.query, last.theta_m), episode.query_y)
    loss_T = ad.cross_entropy(classify(feats.query, last.theta_T), episode.query_y)

    # a masked loss keeps its value but sends a zero cotangent backwards
    named = {f"ss.{k}": v for k, v in ss.items()} | {f"theta.{k}": v for k, v in th.items()}
    named |= {f"swn.{k}": v for k, v in swn.items()}
    wrt = list(named.values())
    g_m = ad.backward(tape, ad.multiply(loss_m, 0.0 if "theta_m" in mask else 1.0), wrt=wrt)
    g_T = ad.backward(tape, ad.multiply(loss_T, 0.0 if "theta_T" in mask else 1.0), wrt=wrt)
    grads = {k: (g_m if k.startswith("swn.") else g_T)[v.id] for k, v in named.items()}
    return MetaStepInfo(float(loss_m.value), float(loss_T.value), grads)


def meta_step(episodes, backbone: Backbone, state: MetaState, config, mask=frozenset()) -> tuple[MetaState, dict]:
    """Average meta-gradients over the batch and take one update."""
    infos = [meta_gradients(ep, backbone, state, config, mask) for ep in episodes]
    avg = {k: sum(i.grads[k] for i in infos) / len(infos) for k in infos[0].grads}
    for group in ("swn", "ss", "theta"):
        if not all(np.all(np.isfinite(v)) for k, v in avg.items() if k.startswith(group + ".")):
            raise NumericDomainError(f"non-finite meta-gradient for parameter group {group!r}")

    new = state.copy()
    for k in new.swn:
        new.swn[k] = state.swn[k] - state.beta1 * avg[f"swn.{k}"]
    for k in new.scale_shift:
        new.scale_shift[k] = state.scale_shift[k] - state.beta2 * avg[f"ss.{k}"]
    for k in new.theta_prime:
        new.theta_prime[k] = state.theta_prime[k] - state.beta2 * avg[f"theta.{k}"]
    new.iteration = state.iteration + 1
    new.beta1 = config.beta_at(new.iteration, config.beta1)
    new.beta2 = config.beta_at(new.iteration, config.beta2)
    stats = {
        "loss_m": float(np.mean([i.loss_m for i in infos])),
        "loss_T": float(np.mean([i.loss_T for i in infos])),
        "grads": avg,
    }
    return new, stats


@dataclass
class TrainLogRow:
    iteration: int
    val_accuracy: float
    train_pseudo_accuracy: float
    train_refined_pseudo_accuracy: float
    loss_m: float
    loss_T: float
    seconds: float


def pseudo_label_accuracy(episodes, backbone, state, config, setting=META_SETTING, stages: int = 1) -> tuple[float, float]:
    """Mean stage-1 pseudo-label accuracy, and accuracy of the self-trained classifier's labels on the same subset."""
    first, refined = [], []
    for ep in episodes:
        feats = episode_features(ep, backbone, state.scale_shift)
        run = self_train_episode(ep, feats, state.theta_prime, state.swn, config, setting, stages=stages)
        first.append(run.stages[0].pseudo_accuracy)
        rows = draw_unlabeled_subset(ep, 1, config.draw).indices
        labels, _ = pseudo_label(feats.pool.value[rows], run.theta_final)
        hid = ep.hidden_labels[rows]
        known = hid >= 0
        refined.append(float(np.mean(labels[known] == hid[known])))
    return float(np.mean(first)), float(np.mean(refined))


def meta_train(dataset, backbone: Backbone, config, state: MetaState | None = None, callback=None):
    """Meta-train from ``state`` (default: identity scale-shift, zero theta').

    Returns ``(final_state, best_state, log_rows)``; the best state is the one
    with the highest meta-validation query accuracy among evaluations.
    """
    state = MetaState.initial(backbone, config, config.seed) if state is None else state
    val_eps = [sample_episode(dataset, "val", config, 10_000 + i) for i in range(config.val_episodes)]
    pl_eps = [sample_episode(dataset, "train", config, 20_000 + i) for i in range(config.val_episodes)]
    rows: list[TrainLogRow] = []
    best, best_acc = state.copy(), -1.0
    t0 = time.perf_counter()
    last = {"loss_m": float("nan"), "loss_T": float("nan")}

    def evaluate():
        nonlocal best, best_acc
        accs = [evaluate_episode(ep, backbone, state, config, META_SETTING).query_accuracy for ep in val_eps]
        va = float(np.mean(accs))
        pl, refined = pseudo_label_accuracy(pl_eps, backbone, state, config)
        row = TrainLogRow(state.iteration, va, pl, refined, last["loss_m"], last["loss_T"], time.perf_counter() - t0)
        rows.append(row)
        log.info("meta-iter %d: val acc %.4f, train PL acc %.4f / %.4f", row.iteration, va, pl, refined)
        if va > best_acc:
            best, best_acc = state.copy(), va
        if callback is not None:
            callback(row, state)

    evaluate()
    for it in range(config.meta_iterations):
        batch = [
            sample_episode(dataset, "train", config, config.seed * 1_000_003 + it * config.meta_batch + b)
            for b in range(config.meta_batch)
        ]
        state, last = meta_step(batch, backbone, state, config)
        if state.iteration % config.eval_interval == 0 or it == config.meta_iterations - 1:
            evaluate()
    return state, best, rows


# ---------------------------------------------------------------------------
# meta-test


def meta_test(
    dataset,
    backbone: Backbone,
    state: MetaState,
    config,
    episode_count: int | None = None,
    settings=None,
    split: str = "test",
    distractors: int | None = None,
    retrain_steps: int | None = None,
    sweep: dict | None = None,
):
    """Evaluate one or more settings on the same ``episode_count`` episodes.

    Episode ``i`` uses seed ``i`` (together with the dataset seed), so
    records from different calls over the same split pair up. Returns one
    ``MetricsRecord`` per setting, in the order given (default: the
    configured ablation tag alone).
    """
    from .metrics import MetricsRecord

    n = config.test_episodes if episode_count is None else episode_count
    if n < 1:
        raise ValueError("episode_count must be >= 1")
    tags = [config.ablation_tag] if settings is None else [settings] if isinstance(settings, str) else list(settings)
    unknown = [t for t in tags if t not in SETTINGS]
    if unknown:
        raise KeyError(f"unknown setting(s) {unknown}; known: {sorted(SETTINGS)}")
    accs = {t: [] for t in tags}
    stage_pl = {t: [] for t in tags}
    spent = {t: 0.0 for t in tags}
    seeds = list(range(n))
    for s in seeds:
        ep = sample_episode(dataset, split, config, s, distractors=distractors)
        feats = episode_features(ep, backbone, state.scale_shift)
        for t in tags:
            t0 = time.perf_counter()
            run = self_train_episode(ep, feats, state.theta_prime, state.swn, config, SETTINGS[t], retrain_steps=retrain_steps)
            th = run.theta_final
            logits = feats.query.value @ th["W"] + th["b"]
            accs[t].append(float(np.mean(np.argmax(logits, axis=1) == ep.query_y)))
            stage_pl[t].append([r.pseudo_accuracy for r in run.stages] if SETTINGS[t].use_unlabeled else [])
            spent[t] += time.perf_counter() - t0
    out = []
    for t in tags:
        tracks = stage_pl[t]
        stages = np.nanmean(np.array(tracks, dtype=float), axis=0) if tracks and tracks[0] else ()
        out.append(MetricsRecord.from_episodes(
            t, seeds, accs[t], stages, config.config_hash(), config.seed, spent[t], **(sweep or {}),
        ))
    return out
