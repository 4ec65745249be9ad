"""User-partitioned datasets, user sampling and virtual clients."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .params import RngStream


class DatasetParseError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


@dataclass(eq=False)
class UserDataset:
    """All examples held by one user."""

    user_id: str
    inputs: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(f"user {self.user_id}: inputs {self.inputs.shape} vs labels {self.labels.shape}")
        if self.labels.shape[0] == 0:
            raise ValueError(f"user {self.user_id} has no examples")

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass(eq=False)
class VirtualClient:
    """Round-scoped group of users; ``inputs``/``labels`` are their merged,
    shuffled (and possibly capped) examples."""

    members: tuple[int, ...]
    inputs: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass(eq=False)
class RoundSample:
    round_index: int
    sampled_users: tuple[int, ...]
    virtual_clients: list[VirtualClient]


def sample_round_users(num_users: int, users_per_round: int, rng: RngStream) -> tuple[int, ...]:
    """Uniformly sample ``users_per_round`` distinct user indices."""
    if users_per_round < 0 or users_per_round > num_users:
        raise ValueError(f"cannot sample {users_per_round} of {num_users} users")
    if users_per_round == 0:
        return ()
    picked = rng.generator().choice(num_users, size=users_per_round, replace=False)
    return tuple(int(u) for u in picked)


def form_virtual_clients(sampled: Sequence[int], users_per_vc: int, rng: RngStream) -> list[tuple[int, ...]]:
    """Randomly partition ``sampled`` into groups of ``users_per_vc``.

    Leftover users form one final, smaller group.
    """
    if users_per_vc < 1:
        raise ValueError("users_per_vc must be >= 1")
    if len(sampled) == 0:
        return []
    order = rng.generator().permutation(len(sampled))
    shuffled = [int(sampled[i]) for i in order]
    return [tuple(shuffled[i:i + users_per_vc]) for i in range(0, len(shuffled), users_per_vc)]


def merge_users(users: Sequence[UserDataset], members: Sequence[int], rng: RngStream) -> VirtualClient:
    x = np.concatenate([users[m].inputs for m in members])
    y = np.concatenate([users[m].labels for m in members])
    perm = rng.generator().permutation(y.shape[0])
    return VirtualClient(tuple(members), x[perm], y[perm])


def cap_examples(vc: VirtualClient, cap: int, rng: RngStream) -> VirtualClient:
    """Keep a uniform subsample of at most ``cap`` examples (order shuffled)."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    if len(vc) <= cap:
        return vc
    keep = rng.generator().choice(len(vc), size=cap, replace=False)
    return VirtualClient(vc.members, vc.inputs[keep], vc.labels[keep])


def build_round(
    users: Sequence[UserDataset],
    round_index: int,
    users_per_round: int,
    users_per_vc: int,
    examples_cap: int,
    rng: RngStream,
) -> RoundSample:
    """Sample users, group them into virtual clients and cap each client."""
    r = rng.child(round_index)
    sampled = sample_round_users(len(users), users_per_round, r.child(0))
    groups = form_virtual_clients(sampled, users_per_vc, r.child(1))
    vcs = []
    for i, members in enumerate(groups):
        vc = merge_users(users, members, r.child(2, i))
        vcs.append(cap_examples(vc, examples_cap, r.child(3, i)))
    return RoundSample(round_index, sampled, vcs)


# ---------------------------------------------------------------------------
# Synthetic identities
# ---------------------------------------------------------------------------

def _signal_basis(input_dim: int, signal_dim: int, basis_seed: int) -> np.ndarray:
    gen = RngStream(basis_seed, (0xBA515,)).generator()
    q, _ = np.linalg.qr(gen.standard_normal((input_dim, input_dim)))
    return q[:, :signal_dim], q[:, signal_dim:]


def generate_synthetic_identities(
    num_users: int,
    classes_per_user: int,
    examples_per_class: int,
    input_dim: int,
    noise_std: float,
    rng: RngStream,
    *,
    signal_dim: int | None = None,
    nuisance_std: float = 0.0,
    basis_seed: int = 0,
    first_label: int = 0,
) -> list[UserDataset]:
    """Users that each own ``classes_per_user`` private identities.

    Every class has a random unit-norm prototype; an example is the prototype
    plus isotropic Gaussian noise of std ``noise_std``. With ``signal_dim`` set,
    prototypes live in a fixed random ``signal_dim``-dimensional subspace
    (shared by all datasets with the same ``basis_seed``) and the orthogonal
    complement carries nuisance noise of std ``nuisance_std``. This gives data
    whose identity structure a learned projection can recover but raw
    geometry hides.
    """
    for name, v in (("num_users", num_users), ("classes_per_user", classes_per_user),
                    ("examples_per_class", examples_per_class), ("input_dim", input_dim)):
        if v < 1:
            raise ValueError(f"{name} must be >= 1")
    if noise_std < 0 or nuisance_std < 0:
        raise ValueError("noise levels must be non-negative")
    sdim = input_dim if signal_dim is None else int(signal_dim)
    if not 1 <= sdim <= input_dim:
        raise ValueError(f"signal_dim must be in [1, {input_dim}]")
    basis, complement = _signal_basis(input_dim, sdim, basis_seed)
    gen = rng.generator()
    users = []
    for u in range(num_users):
        xs, ys = [], []
        for c in range(classes_per_user):
            proto = gen.standard_normal(sdim)
            proto /= np.linalg.norm(proto)
            proto = basis @ proto
            x = proto + noise_std * gen.standard_normal((examples_per_class, input_dim))
            if complement.shape[1] and nuisance_std > 0:
                x += nuisance_std * gen.standard_normal((examples_per_class, complement.shape[1])) @ complement.T
            xs.append(x)
            ys.append(np.full(examples_per_class, first_label + u * classes_per_user + c))
        users.append(UserDataset(f"u{u:06d}", np.concatenate(xs), np.concatenate(ys)))
    return users


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def write_dataset_csv(path: str | Path, users: Sequence[UserDataset]) -> None:
    """Header ``user_id,label,x0..x{d-1}``; one row per example."""
    dim = users[0].inputs.shape[1] if users else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "label", *[f"x{i}" for i in range(dim)]])
        for u in users:
            for x, y in zip(u.inputs, u.labels):
                w.writerow([u.user_id, int(y), *[repr(float(v)) for v in x]])


def load_dataset_csv(path: str | Path) -> list[UserDataset]:
    rows: dict[str, tuple[list, list]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if len(header) < 3 or header[0] != "user_id" or header[1] != "label":
            raise DatasetParseError(path, 1, "header must start with user_id,label and have input columns")
        dim = len(header) - 2
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 2:
                raise DatasetParseError(path, line, f"expected {dim + 2} fields, found {len(row)}")
            try:
                label = int(row[1])
                x = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise DatasetParseError(path, line, str(exc)) from None
            if label < 0:
                raise DatasetParseError(path, line, f"negative label {label}")
            if not all(math.isfinite(v) for v in x):
                raise DatasetParseError(path, line, "non-finite input value")
            xs, ys = rows.setdefault(row[0], ([], []))
            xs.append(x)
            ys.append(label)
    return [UserDataset(uid, np.array(xs, dtype=np.float64), np.array(ys, dtype=np.int64))
            for uid, (xs, ys) in rows.items()]


def dense_label_map(users: Sequence[UserDataset]) -> dict[int, int]:
    """Map the distinct labels in ``users`` to ``0..C-1`` in sorted order."""
    labels = np.unique(np.concatenate([u.labels for u in users])) if users else np.array([], dtype=np.int64)
    return {int(l): i for i, l in enumerate(labels)}


def relabel(users: Sequence[UserDataset], mapping: dict[int, int]) -> list[UserDataset]:
    out = []
    for u in users:
        y = np.array([mapping[int(l)] for l in u.labels], dtype=np.int64)
        out.append(UserDataset(u.user_id, u.inputs, y))
    return out
