"""Continuous-time Markov numerics for the six-state pattern process.

A verb's stem-alternation pattern lives in one of five "living" states
(AAA, AAB, ABA, ABB, ABC) or the absorbing DEAD state.  Generators are
dense 6x6 matrices: the living block holds the 20 inter-pattern rates,
every living row has the shared death rate in the DEAD column, and the
DEAD row is zero.

Stationary distributions are computed on the living 5x5 block with the
death column removed.  Because the death rate is state independent, the
full chain conditioned on survival evolves exactly by that block, so
this is the quasi-stationary distribution of the absorbing chain; it is
what all long-run preference summaries in this package refer to.
"""

from __future__ import annotations

from enum import IntEnum

import numpy as np


class PatternState(IntEnum):
    """Stem-alternation pattern of a verb's three principal parts."""

    AAA = 0
    AAB = 1
    ABA = 2
    ABB = 3
    ABC = 4
    DEAD = 5


N_STATES = 6
N_LIVING = 5
DEAD = int(PatternState.DEAD)

LIVING_STATES = tuple(PatternState(i) for i in range(N_LIVING))
STATE_NAMES = tuple(s.name for s in PatternState)

#: Canonical order of the 20 living-state transitions (row-major, i != j).
TRANSITIONS = tuple(
    (i, j) for i in range(N_LIVING) for j in range(N_LIVING) if i != j
)
N_TRANSITIONS = len(TRANSITIONS)

_TRANS_I = np.array([i for i, _ in TRANSITIONS])
_TRANS_J = np.array([j for _, j in TRANSITIONS])

#: Rates below this are treated as absent for irreducibility checks.
RATE_FLOOR = 1e-12


class ReducibleChainError(ValueError):
    """Living block is not irreducible; no unique stationary distribution."""


def state_from_name(name):
    try:
        return PatternState[name]
    except KeyError:
        raise ValueError(f"unknown pattern state {name!r}") from None


def build_rate_matrix(living_rates, death):
    """Assemble 6x6 generator(s) from 20 living rates and a death rate.

    Parameters
    ----------
    living_rates : array-like, shape (..., 20)
        Nonnegative rates in ``TRANSITIONS`` order.
    death : scalar or array broadcastable to the leading shape
        Nonnegative state-independent rate into DEAD.

    Returns
    -------
    ndarray, shape (..., 6, 6), rows summing to zero, DEAD row zero.
    """
    rates = np.asarray(living_rates, dtype=float)
    if rates.shape[-1] != N_TRANSITIONS:
        raise ValueError(f"expected {N_TRANSITIONS} living rates, got {rates.shape[-1]}")
    death = np.asarray(death, dtype=float)
    if not np.all(np.isfinite(rates)) or np.any(rates < 0):
        raise ValueError("living rates must be finite and >= 0")
    if not np.all(np.isfinite(death)) or np.any(death < 0):
        raise ValueError("death rate must be finite and >= 0")

    lead = np.broadcast_shapes(rates.shape[:-1], death.shape)
    q = np.zeros(lead + (N_STATES, N_STATES))
    q[..., _TRANS_I, _TRANS_J] = rates
    q[..., :N_LIVING, DEAD] = death[..., None] if death.ndim else death
    q[..., np.arange(N_STATES), np.arange(N_STATES)] = -q.sum(axis=-1)
    return q


def validate_rate_matrix(q, tol=1e-12):
    """Raise if q is not a valid generator with an absorbing DEAD row."""
    q = np.asarray(q)
    if q.shape[-2:] != (N_STATES, N_STATES):
        raise ValueError(f"rate matrix must be {N_STATES}x{N_STATES}")
    offdiag = q.copy()
    offdiag[..., np.arange(N_STATES), np.arange(N_STATES)] = 0.0
    if np.any(offdiag < -tol):
        raise ValueError("off-diagonal rates must be >= 0")
    if np.max(np.abs(q.sum(axis=-1))) > tol:
        raise ValueError("rows must sum to zero")
    if np.max(np.abs(q[..., DEAD, :])) > tol:
        raise ValueError("DEAD row must be zero (absorbing)")


def living_rates_of(q):
    """Extract the 20 living rates of a generator in TRANSITIONS order."""
    return np.asarray(q)[..., _TRANS_I, _TRANS_J]


def death_rate_of(q):
    return np.asarray(q)[..., 0, DEAD]


# ---------------------------------------------------------------------------
# Matrix exponential
# ---------------------------------------------------------------------------

# Pade-13 coefficients (Higham 2005), used with scaling and squaring.
_PADE13 = (
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
    1187353796428800.0, 129060195264000.0, 10559470521600.0,
    670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
    960960.0, 16380.0, 182.0, 1.0,
)
_THETA13 = 5.371920351148152


def expm(a):
    """Matrix exponential of a stack of small dense matrices.

    Scaling-and-squaring with the order-13 Pade approximant.  The
    squaring count is shared across the stack (the maximum needed), which
    costs a few extra matmuls but keeps everything vectorized; accuracy
    on 6x6 generators is ~1e-13 relative.
    """
    a = np.asarray(a, dtype=float)
    if a.shape[-1] != a.shape[-2]:
        raise ValueError("expm expects square matrices")
    norm = np.max(np.abs(a).sum(axis=-1), initial=0.0)
    if not np.isfinite(norm):
        raise FloatingPointError("non-finite entries in expm input")
    n_squarings = max(0, int(np.ceil(np.log2(norm / _THETA13)))) if norm > _THETA13 else 0
    a = a / (2.0 ** n_squarings)

    b = _PADE13
    ident = np.broadcast_to(np.eye(a.shape[-1]), a.shape).copy()
    a2 = a @ a
    a4 = a2 @ a2
    a6 = a2 @ a4
    u = a @ (a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2)
             + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * ident)
    v = (a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2)
         + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * ident)
    p = np.linalg.solve(v - u, v + u)
    for _ in range(n_squarings):
        p = p @ p
    return p


def transition_probabilities(q, t):
    """P(t) = exp(Q t) with stochasticity checks, entries clamped to [0, 1].

    Accepts stacked generators and/or an array of times (broadcast on the
    leading axes).
    """
    q = np.asarray(q, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("elapsed time must be >= 0")
    p = expm(q * t[..., None, None] if t.ndim else q * t)
    rowsum = p.sum(axis=-1)
    if np.max(np.abs(rowsum - 1.0)) > 1e-10:
        raise FloatingPointError("transition matrix rows do not sum to 1")
    if p.min() < -1e-12 or p.max() > 1 + 1e-12:
        raise FloatingPointError("transition probabilities outside [0, 1]")
    return np.clip(p, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Stationary structure of the living block
# ---------------------------------------------------------------------------

def living_generator(q):
    """5x5 generator over living states with the death flow removed.

    The diagonal is rebuilt from the living off-diagonal rates only, so
    rows sum to zero; this is the generator of the survival-conditioned
    process.
    """
    q = np.asarray(q, dtype=float)
    living = q[..., :N_LIVING, :N_LIVING].copy()
    idx = np.arange(N_LIVING)
    living[..., idx, idx] = 0.0
    living[..., idx, idx] = -living.sum(axis=-1)
    return living


def _is_irreducible(living):
    """Strong connectivity of the rate graph (rates above RATE_FLOOR)."""
    adj = living > RATE_FLOOR
    np.fill_diagonal(adj, True)
    reach = adj.copy()
    for _ in range(N_LIVING - 1):
        reach = reach | (reach @ adj)
    return bool(reach.all())


def stationary_distribution(q):
    """Quasi-stationary distribution over the five living states.

    Solves pi @ L = 0 with sum(pi) = 1 on the living generator L (left
    null vector).  Raises ReducibleChainError when the living rate graph
    is not strongly connected or the solution is degenerate.
    """
    living = living_generator(q)
    if not _is_irreducible(living):
        raise ReducibleChainError("living block is reducible")
    a = living.T.copy()
    a[-1, :] = 1.0
    b = np.zeros(N_LIVING)
    b[-1] = 1.0
    pi = np.linalg.solve(a, b)
    if pi.min() < -1e-9 or np.max(np.abs(pi @ living)) > 1e-9:
        raise ReducibleChainError("degenerate stationary solve")
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def stationary_many(qs):
    """Batched stationary distributions with per-matrix validity flags.

    Returns (pi, ok) where pi has shape (..., 5) and ok marks draws whose
    living block was irreducible and solved cleanly.  Invalid entries are
    NaN; callers are expected to report the excluded count.
    """
    qs = np.asarray(qs, dtype=float)
    living = living_generator(qs)
    flat = living.reshape(-1, N_LIVING, N_LIVING)
    a = np.transpose(flat, (0, 2, 1)).copy()
    a[:, -1, :] = 1.0
    b = np.zeros((flat.shape[0], N_LIVING))
    b[:, -1] = 1.0
    pi = np.full((flat.shape[0], N_LIVING), np.nan)
    ok = np.zeros(flat.shape[0], dtype=bool)
    for k in range(flat.shape[0]):
        if not _is_irreducible(flat[k]):
            continue
        try:
            sol = np.linalg.solve(a[k], b[k])
        except np.linalg.LinAlgError:
            continue
        if sol.min() < -1e-9 or np.max(np.abs(sol @ flat[k])) > 1e-9:
            continue
        sol = np.clip(sol, 0.0, None)
        pi[k] = sol / sol.sum()
        ok[k] = True
    lead = qs.shape[:-2]
    return pi.reshape(lead + (N_LIVING,)), ok.reshape(lead)


def exit_rate(q, state):
    """Total rate of leaving a living state for other living states."""
    state = int(state)
    if state == DEAD:
        raise ValueError("exit rate is undefined for DEAD")
    q = np.asarray(q, dtype=float)
    return -q[..., state, state] - q[..., state, DEAD]


def entry_rate(q, state, pi):
    """Stationary-weighted arrival rate into a living state.

    entry(i) = sum_{j != i} pi_j R(j -> i) / sum_{j != i} pi_j.
    ``pi`` must be the stationary distribution of q's living block.
    """
    state = int(state)
    if state == DEAD:
        raise ValueError("entry rate is undefined for DEAD")
    pi = np.asarray(pi, dtype=float)
    q = np.asarray(q, dtype=float)
    others = [j for j in range(N_LIVING) if j != state]
    denom = pi[..., others].sum(axis=-1)
    if np.any(denom <= 0):
        raise ValueError("stationary mass outside the state is zero")
    num = np.einsum("...j,...j->...", pi[..., others], q[..., others, state])
    return num / denom


def exit_rates_all(q):
    """Exit rates for the five living states, batched."""
    q = np.asarray(q, dtype=float)
    idx = np.arange(N_LIVING)
    return -q[..., idx, idx] - q[..., idx, DEAD]


def entry_rates_all(q, pi):
    """Entry rates for the five living states, batched."""
    q = np.asarray(q, dtype=float)
    pi = np.asarray(pi, dtype=float)
    living = q[..., :N_LIVING, :N_LIVING]
    num = np.einsum("...j,...ji->...i", pi, living)
    idx = np.arange(N_LIVING)
    num = num - pi * living[..., idx, idx]
    denom = 1.0 - pi
    return num / denom


# ---------------------------------------------------------------------------
# Path simulation
# ---------------------------------------------------------------------------

def simulate_path(q, start, duration, rng):
    """Gillespie simulation of one trajectory.

    Returns a list of (state, dwell_time) segments whose dwell times sum
    to ``duration``.  DEAD (or any state with zero total rate) is held to
    the end.
    """
    if duration < 0:
        raise ValueError("duration must be >= 0")
    q = np.asarray(q, dtype=float)
    validate_rate_matrix(q)
    state = int(start)
    path = []
    remaining = float(duration)
    while remaining > 0:
        total = -q[state, state]
        if total <= 0:
            path.append((state, remaining))
            return path
        wait = rng.exponential(1.0 / total)
        if wait >= remaining:
            path.append((state, remaining))
            return path
        path.append((state, wait))
        remaining -= wait
        probs = q[state].copy()
        probs[state] = 0.0
        state = int(rng.choice(N_STATES, p=probs / total))
    if not path:
        path.append((state, 0.0))
    return path
