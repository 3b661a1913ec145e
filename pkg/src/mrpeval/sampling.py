"""Seeded trajectory simulation, datasets, pooled views and empirical counts.

Randomness layout
-----------------
Every trajectory draws its uniforms from its own slice of a counter-based
(Philox) stream: trajectory ``i`` of a dataset owns the counter block
``[i * BLOCK_COLS, (i + 1) * BLOCK_COLS)`` of the stream keyed by the master
seed, plus a dedicated overflow stream ``Philox(key=(seed', i))`` for the
rare trajectories that outlive their block. Each trajectory is therefore a
deterministic function of ``(mrp, seed, i)`` alone, so datasets are
reproducible, order-independent and parallelizable.

Within a block the consumption order is: one uniform for the initial state,
then per step one uniform for the reward and one for the next state.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

from .errors import MaxLenExceeded
from .mrp_core import TERMINAL, LazyMrp, Mrp

#: Uniforms reserved per trajectory in the primary block (covers 31 steps).
BLOCK_COLS = 64
_OVERFLOW_TAG = 0x9E3779B97F4A7C15
#: Dense count matrices up to this index size; sparse beyond.
_DENSE_COUNT_LIMIT = 2048


def _master_stream(seed: int) -> np.random.Generator:
    key = np.array([int(seed) % 2 ** 64, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def overflow_stream(seed: int, index: int) -> np.random.Generator:
    """Per-trajectory stream used past the primary counter block."""
    key = np.array([(int(seed) ^ _OVERFLOW_TAG) % 2 ** 64, int(index) % 2 ** 64],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------------------
# Trajectory / Dataset
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """One episode: visited non-terminal states and their rewards.

    The terminal state is implicit after the last entry; lengths match and
    are at least one (the initial law has no terminal mass).
    """

    states: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=float)
        if self.states.shape != self.rewards.shape or self.states.ndim != 1:
            raise ValueError("states/rewards must be matching 1-d sequences")
        if len(self.states) == 0:
            raise ValueError("a trajectory visits at least one state")

    def __len__(self) -> int:
        return len(self.states)

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())


class Dataset:
    """A batch of trajectories stored as flat arrays with offsets.

    ``offsets`` has length ``n + 1``; trajectory ``i`` is
    ``states[offsets[i]:offsets[i+1]]``. Auxiliary/quarter splits are
    zero-copy views that remember their index range in the root dataset.
    """

    def __init__(self, offsets, states, rewards, seed: Optional[int] = None,
                 fingerprint: str = "", index_range: Optional[tuple] = None):
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.states = np.asarray(states, dtype=np.int64)
        self.rewards = np.asarray(rewards, dtype=float)
        self.seed = seed
        self.fingerprint = fingerprint
        self.index_range = index_range if index_range is not None else (0, len(self.offsets) - 1)
        self._derived_cache: Optional[dict] = None

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory], seed=None,
                          fingerprint: str = "") -> "Dataset":
        lengths = np.array([len(t) for t in trajectories], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
        if len(trajectories):
            states = np.concatenate([t.states for t in trajectories])
            rewards = np.concatenate([t.rewards for t in trajectories])
        else:
            states = np.empty(0, dtype=np.int64)
            rewards = np.empty(0)
        return cls(offsets, states, rewards, seed=seed, fingerprint=fingerprint)

    @property
    def n(self) -> int:
        return len(self.offsets) - 1

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> Trajectory:
        a, b = self.offsets[i], self.offsets[i + 1]
        return Trajectory(self.states[a:b], self.rewards[a:b])

    def __iter__(self) -> Iterator[Trajectory]:
        for i in range(self.n):
            yield self[i]

    def slice(self, start: int, stop: int) -> "Dataset":
        """Zero-copy sub-dataset over trajectories ``[start, stop)``."""
        if not (0 <= start <= stop <= self.n):
            raise IndexError("slice out of range")
        a, b = self.offsets[start], self.offsets[stop]
        base = self.index_range[0]
        return Dataset(self.offsets[start:stop + 1] - a, self.states[a:b],
                       self.rewards[a:b], seed=self.seed, fingerprint=self.fingerprint,
                       index_range=(base + start, base + stop))

    def derived(self) -> dict:
        """Flat per-visit arrays shared by the estimators (cached).

        Keys: ``traj_id``, ``t`` (offset within trajectory), ``next_state``
        (:data:`TERMINAL` at episode ends), ``suffix_incl`` / ``suffix_excl``
        (reward sums from the visit, inclusive/exclusive of it).
        """
        if self._derived_cache is None:
            m = len(self.states)
            traj_id = np.repeat(np.arange(self.n, dtype=np.int64),
                                np.diff(self.offsets))
            t = np.arange(m, dtype=np.int64) - self.offsets[traj_id]
            next_state = np.full(m, TERMINAL, dtype=np.int64)
            if m:
                next_state[:-1] = self.states[1:]
                next_state[self.offsets[1:] - 1] = TERMINAL
            csum = np.cumsum(self.rewards)
            if m:
                ends = csum[self.offsets[1:] - 1]
                starts = np.where(self.offsets[:-1] > 0,
                                  csum[np.maximum(self.offsets[:-1] - 1, 0)], 0.0)
                totals = ends - starts
                before = (csum - self.rewards) - starts[traj_id]
                suffix_incl = totals[traj_id] - before
            else:
                totals = np.zeros(self.n)
                suffix_incl = np.empty(0)
            suffix_excl = suffix_incl - self.rewards
            self._derived_cache = {
                "traj_id": traj_id,
                "t": t,
                "next_state": next_state,
                "suffix_incl": suffix_incl,
                "suffix_excl": suffix_excl,
                "totals": totals,
            }
        return self._derived_cache

    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_trajectory(mrp, rng: np.random.Generator, max_len: int = 10 ** 6) -> Trajectory:
    """Sample one episode; deterministic given the generator state.

    Raises :class:`MaxLenExceeded` if the terminal state is not reached
    within ``max_len`` steps (non-absorbing model, or the cap is too low).
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    sampler = _MaterializedSampler(mrp) if isinstance(mrp, Mrp) else mrp
    states, rewards = [], []
    s = sampler.sample_initial(rng.random())
    for _ in range(max_len):
        states.append(s)
        rewards.append(sampler.sample_reward(s, rng.random()))
        s = sampler.sample_next(s, rng.random())
        if s == TERMINAL:
            return Trajectory(np.array(states), np.array(rewards))
    raise MaxLenExceeded(f"no termination within max_len={max_len}")


class _MaterializedSampler:
    """Uniform-driven sampling adapter for a materialized MRP."""

    def __init__(self, mrp: Mrp):
        self.mrp = mrp
        self.n_states = mrp.n_states
        self._cum = np.cumsum(mrp.transition, axis=1)
        self._cum_mu = np.cumsum(mrp.initial)

    def sample_initial(self, u: float) -> int:
        return min(int(np.searchsorted(self._cum_mu, u, side="right")), self.n_states - 1)

    def sample_next(self, state: int, u: float) -> int:
        row = self._cum[state]
        if u >= row[-1]:
            return TERMINAL
        return int(np.searchsorted(row, u, side="right"))

    def sample_reward(self, state: int, u: float) -> float:
        return float(self.mrp.rewards[state].from_uniform(u))

    def fingerprint(self) -> str:
        return self.mrp.fingerprint()


def sample_dataset(mrp, n: int, seed: int, max_len: int = 10 ** 6) -> Dataset:
    """Sample ``n`` independent trajectories, reproducibly from ``seed``."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    if isinstance(mrp, Mrp):
        offsets, states, rewards = _sample_block_materialized(mrp, n, seed, max_len)
        return Dataset(offsets, states, rewards, seed=seed, fingerprint=mrp.fingerprint())
    return _sample_lazy(mrp, n, seed, max_len)


def _sample_block_materialized(mrp: Mrp, n: int, seed: int, max_len: int):
    """Vectorized time-slice stepper over the per-trajectory counter blocks."""
    if n == 0:
        return np.zeros(1, dtype=np.int64), np.empty(0, dtype=np.int64), np.empty(0)
    gen = _master_stream(seed)
    U = gen.random((n, BLOCK_COLS))
    cum = np.cumsum(mrp.transition, axis=1)
    cum_mu = np.cumsum(mrp.initial)
    n_states = mrp.n_states

    cur = np.minimum(np.searchsorted(cum_mu, U[:, 0], side="right"),
                     n_states - 1).astype(np.int64)

    alive = np.arange(n, dtype=np.int64)
    state_slabs, reward_slabs, id_slabs = [], [], []
    lengths = np.zeros(n, dtype=np.int64)
    overflow: dict[int, np.random.Generator] = {}

    t = 0
    while alive.size:
        if t >= max_len:
            raise MaxLenExceeded(f"no termination within max_len={max_len}")
        col = 1 + 2 * t
        if col + 1 < BLOCK_COLS:
            u_r = U[alive, col]
            u_n = U[alive, col + 1]
        else:
            u_r = np.empty(alive.size)
            u_n = np.empty(alive.size)
            for j, i in enumerate(alive):
                g = overflow.get(int(i))
                if g is None:
                    g = overflow_stream(seed, int(i))
                    overflow[int(i)] = g
                u_r[j] = g.random()
                u_n[j] = g.random()

        rewards_t = np.empty(alive.size)
        for s in np.unique(cur):
            mask = cur == s
            rewards_t[mask] = mrp.rewards[s].from_uniform(u_r[mask])

        nxt = (u_n[:, None] >= cum[cur]).sum(axis=1).astype(np.int64)

        state_slabs.append(cur)
        reward_slabs.append(rewards_t)
        id_slabs.append(alive)
        lengths[alive] += 1

        cont = nxt < n_states
        alive = alive[cont]
        cur = nxt[cont]
        t += 1

    total = int(lengths.sum())
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    states = np.empty(total, dtype=np.int64)
    rewards = np.empty(total)
    pos = offsets[:-1].copy()
    for ids, ss, rr in zip(id_slabs, state_slabs, reward_slabs):
        states[pos[ids]] = ss
        rewards[pos[ids]] = rr
        pos[ids] += 1
    return offsets, states, rewards


def _sample_lazy(mrp: LazyMrp, n: int, seed: int, max_len: int) -> Dataset:
    gen = _master_stream(seed)
    U = gen.random((n, BLOCK_COLS)) if n else np.empty((0, BLOCK_COLS))
    traj_states, traj_rewards = [], []
    for i in range(n):
        row = U[i]
        pos = 0
        over: Optional[np.random.Generator] = None

        def draw():
            nonlocal pos, over
            if pos < BLOCK_COLS:
                u = row[pos]
                pos += 1
                return u
            if over is None:
                over = overflow_stream(seed, i)
            return over.random()

        states, rewards = [], []
        s = mrp.sample_initial(draw())
        for _ in range(max_len):
            states.append(s)
            rewards.append(mrp.sample_reward(s, draw()))
            s = mrp.sample_next(s, draw())
            if s == TERMINAL:
                break
        else:
            raise MaxLenExceeded(f"no termination within max_len={max_len}")
        traj_states.append(np.array(states, dtype=np.int64))
        traj_rewards.append(np.array(rewards))
    lengths = np.array([len(s) for s in traj_states], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    states = np.concatenate(traj_states) if n else np.empty(0, dtype=np.int64)
    rewards = np.concatenate(traj_rewards) if n else np.empty(0)
    return Dataset(offsets, states, rewards, seed=seed, fingerprint=mrp.fingerprint())


# ---------------------------------------------------------------------------
# Pooled view and empirical counts
# ---------------------------------------------------------------------------


class SubTrajectory(NamedTuple):
    traj_index: int
    offset: int
    states: np.ndarray
    rewards: np.ndarray


def pooled_view(dataset: Dataset) -> Iterator[SubTrajectory]:
    """Iterate the pooled dataset: every suffix of every trajectory.

    Yields one entry per (trajectory ``i``, offset ``t``); the total count
    equals the summed trajectory lengths.
    """
    for i in range(dataset.n):
        a, b = dataset.offsets[i], dataset.offsets[i + 1]
        for t in range(b - a):
            yield SubTrajectory(i, t, dataset.states[a + t:b], dataset.rewards[a + t:b])


def in_set_run_lengths(dataset: Dataset, member_mask: np.ndarray) -> np.ndarray:
    """Per visit: length of the consecutive in-set stretch starting there.

    ``member_mask`` flags, per visit, whether the visited state belongs to
    the subset. Runs never cross trajectory boundaries; visits outside the
    subset get run length 0.
    """
    m = len(member_mask)
    run = np.zeros(m, dtype=np.int64)
    if m == 0:
        return run
    is_last = np.zeros(m, dtype=bool)
    is_last[dataset.offsets[1:] - 1] = True
    # a valid position is a segment end if it is a trajectory's last visit
    # or the following visit leaves the subset
    next_invalid = np.ones(m, dtype=bool)
    next_invalid[:-1] = ~member_mask[1:]
    seg_end = member_mask & (is_last | next_invalid)
    ends = np.flatnonzero(seg_end)
    valid = np.flatnonzero(member_mask)
    if len(valid):
        idx = np.searchsorted(ends, valid, side="left")
        run[valid] = ends[idx] - valid + 1
    return run


@dataclass
class EmpiricalCounts:
    """Visit/transition counts over the pooled dataset.

    ``index`` lists the states the rows/columns refer to; ``powers[l-1]``
    counts l-step paths that stay inside the subset (``powers[0]`` is the
    one-step count matrix ``M_n``). Matrices are dense for small indices
    and ``scipy.sparse.csr_matrix`` beyond ``_DENSE_COUNT_LIMIT`` states.
    """

    index: np.ndarray
    N: np.ndarray
    powers: list
    n: int

    @property
    def M(self):
        return self.powers[0]

    def power(self, ell: int):
        """l-step path counts; ``ell == 0`` is the diagonal visit count."""
        if ell == 0:
            return np.diag(self.N)
        return self.powers[ell - 1]

    @property
    def nu_hat(self) -> np.ndarray:
        return self.N / max(self.n, 1)

    def position(self, state: int) -> int:
        pos = int(np.searchsorted(self.index, state))
        if pos >= len(self.index) or self.index[pos] != state:
            raise KeyError(f"state {state} not in count index")
        return pos


def _pair_count_matrix(k: int, rows: np.ndarray, cols: np.ndarray):
    if k <= _DENSE_COUNT_LIMIT:
        M = np.zeros((k, k), dtype=np.int64)
        if len(rows):
            np.add.at(M, (rows, cols), 1)
        return M
    from scipy import sparse

    data = np.ones(len(rows), dtype=np.int64)
    return sparse.coo_matrix((data, (rows, cols)), shape=(k, k)).tocsr()


def empirical_counts(dataset: Dataset, subset=None, n_powers: int = 1) -> EmpiricalCounts:
    """Count visits and within-subset transition paths.

    With ``subset=None`` the index is every visited state and ``powers``
    holds the plain one-step transition counts. With a subset, ``N`` counts
    visits to subset members and ``powers[l-1][a, b]`` counts pooled visits
    at ``a`` whose next ``l`` states stay inside the subset and end at ``b``.
    """
    if n_powers < 1:
        raise ValueError("n_powers must be >= 1")
    d = dataset.derived()
    sf, ns = dataset.states, d["next_state"]

    if subset is None:
        index = np.unique(sf) if len(sf) else np.empty(0, dtype=np.int64)
        k = len(index)
        pos = np.searchsorted(index, sf) if k else np.empty(0, dtype=np.int64)
        N = np.bincount(pos, minlength=k).astype(np.int64)
        has_next = ns != TERMINAL
        rows = pos[has_next]
        cols = np.searchsorted(index, ns[has_next]) if has_next.any() else np.empty(0, dtype=np.int64)
        return EmpiricalCounts(index=index, N=N, powers=[_pair_count_matrix(k, rows, cols)],
                               n=dataset.n)

    index = np.array(sorted(set(int(s) for s in subset)), dtype=np.int64)
    k = len(index)
    in_set = np.isin(sf, index)
    pos_all = np.full(len(sf), -1, dtype=np.int64)
    if in_set.any():
        pos_all[in_set] = np.searchsorted(index, sf[in_set])
    N = np.bincount(pos_all[in_set], minlength=k).astype(np.int64) if in_set.any() \
        else np.zeros(k, dtype=np.int64)

    run = in_set_run_lengths(dataset, in_set)
    powers = []
    for ell in range(1, n_powers + 1):
        src = np.flatnonzero(in_set & (run >= ell + 1))
        powers.append(_pair_count_matrix(k, pos_all[src], pos_all[src + ell]))
        if not len(src):
            # longer in-set paths all have shorter in-set prefixes: done
            powers.extend(_pair_count_matrix(k, np.empty(0, dtype=np.int64),
                                             np.empty(0, dtype=np.int64))
                          for _ in range(n_powers - ell))
            break
    return EmpiricalCounts(index=index, N=N, powers=powers, n=dataset.n)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_dataset(dataset: Dataset, csv_path, header_path=None) -> None:
    """Write ``i, t, state, reward`` records plus a JSON header."""
    header = {"seed": dataset.seed, "fingerprint": dataset.fingerprint, "n": dataset.n}
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "t", "state", "reward"])
        d = dataset.derived()
        for i, t, s, r in zip(d["traj_id"], d["t"], dataset.states, dataset.rewards):
            writer.writerow([int(i), int(t), int(s), repr(float(r))])
    if header_path is not None:
        with open(header_path, "w") as fh:
            json.dump(header, fh, indent=2)


def load_dataset(csv_path, header_path=None) -> Dataset:
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)  # header row
        rows = [(int(i), int(t), int(s), float(r)) for i, t, s, r in reader]
    seed, fingerprint = None, ""
    if header_path is not None:
        with open(header_path) as fh:
            header = json.load(fh)
        seed, fingerprint = header.get("seed"), header.get("fingerprint", "")
    rows.sort(key=lambda r: (r[0], r[1]))
    trajectories = []
    current_i, states, rewards = None, [], []
    for i, t, s, r in rows:
        if i != current_i and current_i is not None:
            trajectories.append(Trajectory(np.array(states), np.array(rewards)))
            states, rewards = [], []
        current_i = i
        states.append(s)
        rewards.append(r)
    if current_i is not None:
        trajectories.append(Trajectory(np.array(states), np.array(rewards)))
    return Dataset.from_trajectories(trajectories, seed=seed, fingerprint=fingerprint)
