"""Round orchestration for DP-FedAvg and DP-FedEmb.

Per round: sample users, group them into virtual clients (VCs), run local
momentum SGD on every VC, clip each VC's model delta, add noise to the sum,
and apply the noised mean with a momentum server optimizer.

In ``fedavg`` mode the privatized vector is the backbone concatenated with a
global head over every class. In ``fedemb`` mode each VC trains a freshly
initialized head over the classes it holds, only the backbone delta leaves the
VC, and the head is dropped when the client update returns.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Callable, NamedTuple, Sequence

import numpy as np

from . import kernels
from .accounting import (RdpAccountant, compose, rdp_subsampled_gaussian_step, rdp_to_dp,
                         zcdp_to_dp, zcdp_tree_single_participation)
from .config import ExperimentConfig
from .data import (UserDataset, VirtualClient, build_round, dense_label_map,
                   generate_synthetic_identities, load_dataset_csv, relabel)
from .evaluation import (EmbeddingSet, UnresolvableFARError, minibatch_scores, pairwise_scores,
                         recall_from_scores)
from .mechanisms import (AdaptiveClipState, NoiseConfig, TreeState, adaptive_clip_step,
                         gaussian_aggregate, sum_updates, tree_server_delta)
from .model import (ACTIVATIONS, Checkpoint, MlpConfig, ModelSplit, build_model, embed, init_head,
                    load_checkpoint, save_checkpoint)
from .params import (PURPOSE_BATCH, PURPOSE_DATA, PURPOSE_EVAL, PURPOSE_HEAD, PURPOSE_INIT,
                     PURPOSE_NOISE, PURPOSE_SAMPLE, PURPOSE_TREE, RngStream, TrainableMask,
                     apply_mask, clip_to_norm, l2_norm)

log = logging.getLogger(__name__)

MODES = ("fedavg", "fedemb")


@dataclass
class ClientOptConfig:
    mode: str
    local_steps: int
    batch_size: int
    lr_backbone: float
    lr_head: float
    momentum: float = 0.9
    mask: TrainableMask | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.local_steps < 1 or self.batch_size < 1:
            raise ValueError("local_steps and batch_size must be >= 1")
        if self.lr_backbone < 0 or self.lr_head < 0:
            raise ValueError("learning rates must be >= 0")

    @property
    def head_lr(self) -> float:
        # FedAvg trains backbone and head as one model with a single rate.
        return self.lr_backbone if self.mode == "fedavg" else self.lr_head


@dataclass
class ServerOptState:
    lr: float
    momentum: float
    velocity: np.ndarray


def server_step(state: ServerOptState, theta: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """``v <- mu v + delta``; ``theta <- theta + lr v``.

    ``delta`` is new-minus-old (an ascent direction), so the server adds it.
    Updates ``state.velocity`` in place and returns the new parameters.
    """
    if theta.shape != delta.shape or state.velocity.shape != theta.shape:
        raise ValueError(f"length mismatch: theta {theta.shape}, delta {delta.shape}, "
                         f"velocity {state.velocity.shape}")
    state.velocity = state.momentum * state.velocity + delta
    return theta + state.lr * state.velocity


@dataclass
class RoundLog:
    round: int
    loss: float | None
    clip_fraction: float | None
    sigma: float
    gamma: float
    recall_at_far: float | None = None
    eps_add_remove: float | None = None
    rho: float | None = None
    num_clients: int = 0
    wall_ms: float = 0.0


LOG_COLUMNS = ("round", "loss", "clip_fraction", "sigma", "gamma", "recall_at_far", "eps_add_remove", "rho")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def write_round_logs(logs: Sequence[RoundLog], fh: IO[str], header: bool = True) -> None:
    w = csv.writer(fh, lineterminator="\n")
    if header:
        w.writerow(LOG_COLUMNS)
    for r in logs:
        w.writerow([_fmt(getattr(r, c)) for c in LOG_COLUMNS])


# ---------------------------------------------------------------------------
# Client side
# ---------------------------------------------------------------------------

def minibatch_schedule(n: int, batch_size: int, steps: int, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Example indices for ``steps`` minibatches drawn epoch by epoch.

    Each epoch is a fresh permutation of ``0..n-1`` cut into batches of
    ``batch_size``; the last batch of an epoch may be smaller. A batch size
    above ``n`` means full-batch steps.
    """
    gen = rng.generator()
    b = min(batch_size, n)
    chunks, offsets = [], [0]
    perm = None
    pos = n
    for _ in range(steps):
        if pos >= n:
            perm = gen.permutation(n)
            pos = 0
        idx = perm[pos:pos + b]
        pos += b
        chunks.append(idx)
        offsets.append(offsets[-1] + idx.shape[0])
    return np.concatenate(chunks).astype(np.int64), np.asarray(offsets, dtype=np.int64)


def local_train(theta: np.ndarray, omega: np.ndarray, x: np.ndarray, y: np.ndarray,
                schedule: tuple[np.ndarray, np.ndarray], model_cfg: MlpConfig,
                opt: ClientOptConfig) -> tuple[np.ndarray, np.ndarray, float]:
    """K momentum-SGD steps on a (backbone, head) pair; returns final values
    and the mean minibatch loss. Velocity starts at zero."""
    weights = (opt.mask.trainable_weights() if opt.mask is not None
               else np.ones(theta.shape[0]))
    index, offsets = schedule
    th, om, loss = kernels.local_sgd(
        np.ascontiguousarray(theta, dtype=np.float64), np.ascontiguousarray(omega, dtype=np.float64),
        np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(y, dtype=np.int64),
        index, offsets, model_cfg.dims, model_cfg.has_bias, ACTIVATIONS[model_cfg.activation],
        model_cfg.l2_normalize_embedding, opt.lr_backbone, opt.head_lr, opt.momentum, weights,
    )
    return th, om, float(loss)


class ClientUpdate(NamedTuple):
    delta: np.ndarray
    norm: float
    loss: float


def client_update(theta: np.ndarray, omega: np.ndarray | None, vc: VirtualClient, model_cfg: MlpConfig,
                  opt: ClientOptConfig, clip: float, rng: RngStream) -> ClientUpdate:
    """Train one virtual client and return its clipped delta.

    fedemb: ``omega`` is ignored; a head for the VC's own classes is drawn
    from ``rng`` and discarded afterwards; the delta covers the backbone only.
    fedavg: ``omega`` is the global head and the delta covers both.
    """
    if len(vc) == 0:
        raise ValueError("virtual client has no examples")
    schedule = minibatch_schedule(len(vc), opt.batch_size, opt.local_steps, rng.child(PURPOSE_BATCH))
    if opt.mode == "fedemb":
        classes, local_y = np.unique(vc.labels, return_inverse=True)
        head = init_head(classes.shape[0], model_cfg.embed_dim, rng.child(PURPOSE_HEAD))
        th, _, loss = local_train(theta, head, vc.inputs, local_y, schedule, model_cfg, opt)
        delta = th - theta
    else:
        if omega is None:
            raise ValueError("fedavg mode needs the global head")
        th, om, loss = local_train(theta, omega, vc.inputs, vc.labels, schedule, model_cfg, opt)
        delta = np.concatenate([th - theta, om - omega])
    if opt.mask is not None:
        backbone = apply_mask(delta[:theta.shape[0]], opt.mask)
        delta = np.concatenate([backbone, delta[theta.shape[0]:]])
    norm = l2_norm(delta)
    return ClientUpdate(clip_to_norm(delta, clip), norm, loss)


# ---------------------------------------------------------------------------
# Server side
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    """Everything that evolves across rounds; enough to resume exactly."""

    round: int
    params: np.ndarray
    server: ServerOptState
    clip: AdaptiveClipState | None
    clip_norm: float
    released_steps: int = 0


@dataclass
class TrainResult:
    theta: np.ndarray
    omega: np.ndarray | None
    logs: list[RoundLog]
    privacy: dict
    state: TrainState


def load_users(cfg: ExperimentConfig) -> tuple[list[UserDataset], list[UserDataset]]:
    """Training users and held-out evaluation users described by ``cfg.data``.

    Synthetic evaluation identities get labels after the training ones, so
    the two sets never share a class.
    """
    d = cfg.data
    if d.source == "csv":
        train = load_dataset_csv(d.path)
        evals = load_dataset_csv(d.eval_path) if d.eval_path else []
        return train, evals
    root = RngStream(cfg.seed, (PURPOSE_DATA,))
    kwargs = dict(signal_dim=d.signal_dim, nuisance_std=d.nuisance_std, basis_seed=d.basis_seed)
    train = generate_synthetic_identities(d.num_users, d.classes_per_user, d.examples_per_class,
                                          d.input_dim, d.noise_std, root.child(0), **kwargs)
    evals = []
    if d.eval_users > 0:
        evals = generate_synthetic_identities(
            d.eval_users, d.classes_per_user, d.eval_examples_per_class, d.input_dim, d.noise_std,
            root.child(1), first_label=d.num_users * d.classes_per_user, **kwargs)
    return train, evals


def privacy_report(q: float, sigma: float, rounds: int, delta: float, mechanism: str) -> dict:
    """epsilon under both neighboring relations, plus tree zCDP when used."""
    out = {"q": q, "sigma": sigma, "rounds": rounds, "delta": delta, "mechanism": mechanism}
    for rel in ("add_remove_poisson", "substitute_conservative"):
        acc = RdpAccountant(neighboring=rel)
        step = rdp_subsampled_gaussian_step(q, sigma / acc.sensitivity_factor, acc.orders)
        out[f"epsilon_{rel}"] = rdp_to_dp(compose(acc, step, rounds), delta).epsilon
    if mechanism == "tree":
        rho = zcdp_tree_single_participation(rounds, sigma).rho if rounds > 0 else 0.0
        out["rho"] = rho
        out["epsilon_zcdp"] = zcdp_to_dp(rho, delta).epsilon
    return out


class FederatedTrainer:
    """Holds the immutable context of a run and advances a :class:`TrainState`."""

    def __init__(self, cfg: ExperimentConfig, users: Sequence[UserDataset] | None = None,
                 eval_users: Sequence[UserDataset] | None = None, threads: int | None = None):
        self.cfg = cfg
        if users is None:
            users, eval_users = load_users(cfg)
        if not users:
            raise ValueError("training dataset is empty")
        self.label_map = dense_label_map(users)
        self.users = relabel(users, self.label_map)
        self.eval_users = list(eval_users or [])
        input_dim = self.users[0].inputs.shape[1]
        self.model_cfg = MlpConfig(input_dim, tuple(cfg.model.hidden_dims), cfg.model.embed_dim,
                                   cfg.model.activation, cfg.model.l2_normalize_embedding)
        self.num_classes = len(self.label_map)
        self.split = ModelSplit(self.model_cfg.backbone_len, self.num_classes, self.model_cfg.embed_dim)
        self.users_per_round = cfg.users_per_round
        if self.users_per_round > len(self.users):
            raise ValueError(f"users_per_round {self.users_per_round} exceeds {len(self.users)} users")
        c = cfg.client
        mask = None
        if c.freeze_ranges:
            mask = TrainableMask.from_ranges(self.split.backbone_len, [tuple(r) for r in c.freeze_ranges])
        self.client_opt = ClientOptConfig(cfg.mode, c.local_steps, c.batch_size, c.lr,
                                          c.lr * c.head_lr_scale, c.momentum, mask)
        self.sigma = cfg.dp.noise_multiplier
        self.adaptive = cfg.dp.adaptive_clip and self.sigma == 0
        self.rng = RngStream(cfg.seed)
        self.tree = None
        if cfg.dp.mechanism == "tree" and cfg.federated.rounds > 0:
            self.tree = TreeState(cfg.federated.rounds, self.privatized_len, self.rng.child(PURPOSE_TREE))
        self.threads = threads or cfg.run.threads
        self._q = self.users_per_round / len(self.users)
        self._step_rdp = rdp_subsampled_gaussian_step(self._q, self.sigma) if self.sigma > 0 else None
        self._eval_set = None
        self.round_hook: Callable[[int, list[VirtualClient], list[ClientUpdate]], None] | None = None

    @property
    def privatized_len(self) -> int:
        if self.cfg.mode == "fedavg":
            return self.split.total_len
        return self.split.backbone_len

    def init_state(self, warm_start: np.ndarray | None = None) -> TrainState:
        theta, _ = build_model(self.model_cfg, self.num_classes, self.rng.child(PURPOSE_INIT, 0))
        if warm_start is not None:
            if warm_start.shape != theta.shape:
                raise ValueError(f"warm start has {warm_start.shape[0]} backbone entries, "
                                 f"model needs {theta.shape[0]}")
            theta = warm_start.copy()
        params = theta
        if self.cfg.mode == "fedavg":
            head = init_head(self.num_classes, self.model_cfg.embed_dim, self.rng.child(PURPOSE_INIT, 1))
            params = np.concatenate([theta, head])
        server = ServerOptState(self.cfg.server.lr, self.cfg.server.momentum, np.zeros_like(params))
        clip = None
        if self.adaptive:
            clip = AdaptiveClipState(self.cfg.dp.clip_norm, self.cfg.dp.target_quantile, self.cfg.dp.clip_lr)
        return TrainState(0, params, server, clip, self.cfg.dp.clip_norm)

    def split_params(self, params: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        b = self.split.backbone_len
        if self.cfg.mode == "fedavg":
            return params[:b], params[b:]
        return params, None

    def plan_round(self, t: int):
        f = self.cfg.federated
        return build_round(self.users, t, self.users_per_round, f.users_per_vc, f.examples_cap,
                           self.rng.child(PURPOSE_SAMPLE))

    def _client(self, args) -> ClientUpdate:
        theta, omega, vc, clip, rng = args
        return client_update(theta, omega, vc, self.model_cfg, self.client_opt, clip, rng)

    def run_round(self, state: TrainState, executor: ThreadPoolExecutor | None = None) -> tuple[TrainState, RoundLog]:
        t = state.round
        start = time.perf_counter()
        sample = self.plan_round(t)
        vcs = sample.virtual_clients
        clip = state.clip.clip_norm if state.clip is not None else state.clip_norm
        theta, omega = self.split_params(state.params)
        jobs = [(theta, omega, vc, clip, self.rng.child(PURPOSE_BATCH, t, i))
                for i, vc in enumerate(vcs)]
        if executor is not None and len(jobs) > 1:
            updates = list(executor.map(self._client, jobs))
        else:
            updates = [self._client(j) for j in jobs]
        if self.round_hook is not None:
            self.round_hook(t, vcs, updates)

        params = state.params
        loss = frac = None
        clip_state = state.clip
        released = state.released_steps
        if updates:
            noise_cfg = NoiseConfig(self.sigma, clip, self.cfg.dp.mechanism)
            deltas = [u.delta for u in updates]
            if self.tree is not None:
                released += 1
                delta = tree_server_delta(sum_updates(deltas), len(deltas), self.tree, released, noise_cfg)
            else:
                delta = gaussian_aggregate(deltas, noise_cfg, self.rng.child(PURPOSE_NOISE, t))
            params = server_step(state.server, state.params, delta)
            loss = float(np.mean([u.loss for u in updates]))
            frac = float(np.mean([u.norm <= clip for u in updates]))
            if clip_state is not None:
                clip_state = adaptive_clip_step(clip_state, frac)

        new_state = TrainState(t + 1, params, state.server, clip_state, state.clip_norm, released)
        entry = RoundLog(t, loss, frac, self.sigma, clip, num_clients=len(vcs))
        if self._step_rdp is not None:
            acc = compose(RdpAccountant(), self._step_rdp, t + 1)
            entry.eps_add_remove = rdp_to_dp(acc, self.cfg.dp.delta).epsilon
        else:
            entry.eps_add_remove = math.inf if self._q > 0 else 0.0
        if self.tree is not None:
            entry.rho = zcdp_tree_single_participation(t + 1, self.sigma).rho
        every = self.cfg.eval.every
        if self.eval_users and every > 0 and (t + 1) % every == 0:
            entry.recall_at_far = self.evaluate(new_state.params, t)
        entry.wall_ms = (time.perf_counter() - start) * 1e3
        return new_state, entry

    # -- evaluation -------------------------------------------------------

    def eval_embeddings(self, params: np.ndarray) -> EmbeddingSet:
        theta, _ = self.split_params(params)
        x = np.concatenate([u.inputs for u in self.eval_users])
        y = np.concatenate([u.labels for u in self.eval_users])
        return EmbeddingSet(embed(theta, self.model_cfg, x), y)

    def evaluate(self, params: np.ndarray, t: int = 0, far: float | None = None) -> float | None:
        e = self.cfg.eval
        es = self.eval_embeddings(params)
        if e.minibatch:
            pos, neg = minibatch_scores(es, e.minibatch, self.rng.child(PURPOSE_EVAL, t), e.metric)
        else:
            pos, neg = pairwise_scores(es, e.metric)
        try:
            return recall_from_scores(pos, neg, e.far if far is None else far)[0]
        except UnresolvableFARError:
            log.warning("round %d: FAR %g not resolvable on the evaluation set", t, e.far)
            return None

    # -- checkpoints ------------------------------------------------------

    def checkpoint(self, state: TrainState) -> Checkpoint:
        head_len = self.split.head_len if self.cfg.mode == "fedavg" else 0
        clip = state.clip.clip_norm if state.clip is not None else None
        return Checkpoint(state.params.copy(), self.split.backbone_len, head_len, state.round,
                          self.model_cfg.digest(), state.server.velocity.copy(), clip)

    def state_from_checkpoint(self, ckpt: Checkpoint) -> TrainState:
        if ckpt.cfg_digest != self.model_cfg.digest():
            raise ValueError("checkpoint was written for a different model config")
        if ckpt.params.shape[0] != self.privatized_len or ckpt.velocity is None:
            raise ValueError("checkpoint does not hold resumable state for this mode")
        state = self.init_state()
        state.round = ckpt.round
        state.params = ckpt.params.copy()
        state.server.velocity = ckpt.velocity.copy()
        if state.clip is not None and ckpt.clip_norm is not None:
            state.clip = AdaptiveClipState(ckpt.clip_norm, state.clip.target_quantile, state.clip.learning_rate)
        state.released_steps = ckpt.round if self.users_per_round > 0 else 0
        if self.tree is not None:
            self.tree.last_step = state.released_steps
        return state

    def final_privacy(self, rounds: int) -> dict:
        return privacy_report(self._q, self.sigma, rounds, self.cfg.dp.delta, self.cfg.dp.mechanism)


def run_training(cfg: ExperimentConfig, *, threads: int | None = None, resume: str | Path | None = None,
                 checkpoint_dir: str | Path | None = None,
                 on_round: Callable[[RoundLog], None] | None = None,
                 trainer: FederatedTrainer | None = None) -> TrainResult:
    """Run ``cfg.federated.rounds`` rounds (continuing from ``resume`` if given).

    Checkpoints go to ``checkpoint_dir`` every ``run.checkpoint_every`` rounds
    and after the final round.
    """
    trainer = trainer or FederatedTrainer(cfg, threads=threads)
    if resume is not None:
        state = trainer.state_from_checkpoint(load_checkpoint(resume))
    else:
        warm = None
        if cfg.model.warm_start:
            ckpt = load_checkpoint(cfg.model.warm_start)
            warm = ckpt.backbone.copy()
        state = trainer.init_state(warm)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    every = cfg.run.checkpoint_every
    logs = []
    n_threads = trainer.threads
    executor = ThreadPoolExecutor(max_workers=n_threads) if n_threads > 1 else None
    try:
        while state.round < cfg.federated.rounds:
            state, entry = trainer.run_round(state, executor)
            logs.append(entry)
            if on_round is not None:
                on_round(entry)
            if ckpt_dir is not None and every and state.round % every == 0:
                save_checkpoint(ckpt_dir / f"round_{state.round:06d}.ckpt", trainer.checkpoint(state))
    finally:
        if executor is not None:
            executor.shutdown()
    if ckpt_dir is not None:
        save_checkpoint(ckpt_dir / "final.ckpt", trainer.checkpoint(state))
    theta, omega = trainer.split_params(state.params)
    privacy = trainer.final_privacy(state.round)
    return TrainResult(theta.copy(), None if omega is None else omega.copy(), logs, privacy, state)
