"""Tabular distributional Q-learning over binary link-quality states.

The return of each (state, action) pair is modeled by Q support points at
fixed cumulative probabilities q/Q.  Updates map the next entry's supports
through the discounted Bellman backup and refit the supports by minimizing a
weighted squared quantile-regression loss, whose per-coordinate minimizer is
an asymmetrically weighted mean (an expectile) of the target samples.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

FORMAT_VERSION = 1


@dataclass(frozen=True)
class StateCode:
    """Binary communication state: bit k set when user k's received power clears the threshold."""

    bits: tuple[bool, ...]

    def __post_init__(self):
        if len(self.bits) < 1:
            raise ValueError("state needs at least one bit")

    @property
    def bitstring(self) -> str:
        return "".join("1" if b else "0" for b in self.bits)

    @classmethod
    def from_bitstring(cls, s: str) -> "StateCode":
        if not s or any(ch not in "01" for ch in s):
            raise ValueError(f"malformed state bitstring: {s!r}")
        return cls(tuple(ch == "1" for ch in s))

    @classmethod
    def zero(cls, k: int) -> "StateCode":
        return cls((False,) * k)


@dataclass(frozen=True)
class Action:
    """Discrete repositioning action, identified by ordinal.

    Ordinal 0 ascends one meter, 1 descends one meter, and 2 + k moves one
    meter horizontally toward user k.
    """

    ordinal: int

    def __post_init__(self):
        if self.ordinal < 0:
            raise ValueError("action ordinal must be nonnegative")

    @property
    def is_ascend(self) -> bool:
        return self.ordinal == 0

    @property
    def is_descend(self) -> bool:
        return self.ordinal == 1

    @property
    def target_ue(self) -> int | None:
        return self.ordinal - 2 if self.ordinal >= 2 else None

    def describe(self) -> str:
        if self.is_ascend:
            return "ascend-1m"
        if self.is_descend:
            return "descend-1m"
        return f"toward-ue-{self.target_ue}"


def action_space(ue_count: int) -> list[Action]:
    return [Action(o) for o in range(ue_count + 2)]


@dataclass(frozen=True)
class TransitionSample:
    """One learning transition; reward is the received data volume in bits."""

    state: StateCode
    action: Action
    reward: float
    next_state: StateCode
    next_action: Action

    def __post_init__(self):
        if self.reward < 0:
            raise ValueError("reward is a data volume and cannot be negative")


class QuantileTable:
    """Map (state, action) -> sorted support points of the return distribution.

    Entries are created lazily at zero.  ``discount`` is the per-slot return
    discount; ``quantile_midpoints`` are (2q - 1) / (2Q).
    """

    def __init__(self, ue_count: int, q_count: int = 40, discount: float = 0.9):
        if ue_count < 1:
            raise ValueError("ue_count must be at least 1")
        if q_count < 1:
            raise ValueError("q_count must be at least 1")
        if not 0.0 < discount < 1.0:
            raise ValueError("discount must lie in (0, 1)")
        self.ue_count = ue_count
        self.q_count = q_count
        self.discount = discount
        self.z: dict[tuple[str, int], np.ndarray] = {}

    @property
    def quantile_midpoints(self) -> np.ndarray:
        q = np.arange(1, self.q_count + 1)
        return (2 * q - 1) / (2 * self.q_count)

    def key(self, state: StateCode, action: Action) -> tuple[str, int]:
        if len(state.bits) != self.ue_count:
            raise ValueError("state width does not match ue_count")
        return (state.bitstring, action.ordinal)

    def supports(self, state: StateCode, action: Action) -> np.ndarray:
        k = self.key(state, action)
        entry = self.z.get(k)
        if entry is None:
            entry = np.zeros(self.q_count)
            self.z[k] = entry
        return entry

    def visited(self, state: StateCode, action: Action) -> bool:
        return self.key(state, action) in self.z

    def actions(self) -> list[Action]:
        return action_space(self.ue_count)


def encode_state(received_powers, tau: float) -> StateCode:
    """Threshold the per-user received powers into the binary state code."""
    powers = np.asarray(received_powers, dtype=float)
    if powers.ndim != 1 or powers.size < 1:
        raise ValueError("received_powers must be a nonempty vector")
    return StateCode(tuple(bool(p >= tau) for p in powers))


def expected_return(table: QuantileTable, state: StateCode, action: Action) -> float:
    """Mean of the stored supports (uniform weights across quantiles)."""
    return float(table.supports(state, action).mean())


def greedy_action(table: QuantileTable, state: StateCode) -> Action:
    """Argmax of expected return; ties break toward the lowest ordinal."""
    best, best_val = None, -np.inf
    for action in table.actions():
        val = expected_return(table, state, action)
        if val > best_val:
            best, best_val = action, val
    return best


def select_action(table: QuantileTable, state: StateCode, exploration: float,
                  rng: np.random.Generator | None = None) -> Action:
    """Epsilon-greedy action choice; deterministic greedy at exploration 0."""
    if not 0.0 <= exploration <= 1.0:
        raise ValueError("exploration must lie in [0, 1]")
    if exploration > 0.0:
        if rng is None:
            raise ValueError("exploration > 0 needs a random generator")
        if rng.uniform() < exploration:
            return Action(int(rng.integers(0, table.ue_count + 2)))
    return greedy_action(table, state)


def bellman_target(sample: TransitionSample, table: QuantileTable) -> np.ndarray:
    """Discounted backup of the next entry's supports: r + gamma * z_i(next)."""
    nxt = table.supports(sample.next_state, sample.next_action)
    return sample.reward + table.discount * nxt


def qr_loss(model_supports, target_samples, quantile_midpoints=None) -> float:
    """Weighted squared quantile-regression loss against an empirical sample set.

    For each support z_q the weight of sample z is |w_q - 1{z < z_q}| and the
    expectation is the uniform average over the samples.
    """
    z = np.asarray(model_supports, dtype=float)
    samples = np.asarray(target_samples, dtype=float)
    if samples.size == 0:
        raise ValueError("target sample set is empty")
    if quantile_midpoints is None:
        q = np.arange(1, z.size + 1)
        quantile_midpoints = (2 * q - 1) / (2 * z.size)
    om = np.asarray(quantile_midpoints, dtype=float)
    total = 0.0
    for q in range(z.size):
        w = np.abs(om[q] - (samples < z[q]).astype(float))
        total += float((w * (samples - z[q]) ** 2).mean())
    return total


def fit_quantiles(target_samples, q_count: int, previous_supports=None) -> np.ndarray:
    """Exact minimizer of the quantile-regression loss over the supports.

    The loss is separable across supports and piecewise quadratic with a
    continuous increasing derivative in each, so each coordinate's minimizer
    is the asymmetrically weighted sample mean whose below/above weights are
    (1 - w_q) and w_q; it is found by scanning the sorted-sample intervals.
    The minimizers are nondecreasing in q, and sorting is enforced anyway.
    """
    samples = np.sort(np.asarray(target_samples, dtype=float))
    n = samples.size
    if n == 0:
        raise ValueError("target sample set is empty")
    prefix = np.concatenate([[0.0], np.cumsum(samples)])
    total = prefix[-1]
    q = np.arange(1, q_count + 1)
    om = (2 * q - 1) / (2 * q_count)
    out = np.empty(q_count)
    for qi in range(q_count):
        w = om[qi]
        w_below = 1.0 - w
        counts = np.arange(n + 1)
        num = w_below * prefix + w * (total - prefix)
        den = w_below * counts + w * (n - counts)
        cand = num / den
        lo = np.concatenate([[-np.inf], samples])
        hi = np.concatenate([samples, [np.inf]])
        valid = (cand >= lo) & (cand <= hi)
        out[qi] = cand[np.argmax(valid)]
    out.sort()
    if previous_supports is not None:
        prev = np.asarray(previous_supports, dtype=float)
        if prev.size != q_count:
            raise ValueError("previous_supports length does not match q_count")
    return out


def update(table: QuantileTable, sample: TransitionSample) -> QuantileTable:
    """Replace the sampled entry with the refit of its Bellman target; others untouched."""
    target = bellman_target(sample, table)
    old = table.supports(sample.state, sample.action)
    table.z[table.key(sample.state, sample.action)] = fit_quantiles(
        target, table.q_count, old)
    return table


def save_table(table: QuantileTable, path) -> None:
    """Serialize to JSON: header fields plus entries keyed 'e:<bits>|a:<ordinal>'."""
    entries = {
        f"e:{bits}|a:{ordinal}": [float(x) for x in supports]
        for (bits, ordinal), supports in sorted(table.z.items())
    }
    doc = {
        "format_version": FORMAT_VERSION,
        "q_count": table.q_count,
        "discount": table.discount,
        "ue_count": table.ue_count,
        "entries": entries,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_table(path, expected_ue_count: int | None = None,
               expected_q_count: int | None = None) -> QuantileTable:
    """Load a serialized table, validating the header and every entry."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported format_version: {version!r}")
    q_count = int(doc["q_count"])
    ue_count = int(doc["ue_count"])
    discount = float(doc["discount"])
    if expected_ue_count is not None and ue_count != expected_ue_count:
        raise ValueError(f"ue_count mismatch: file has {ue_count}, expected {expected_ue_count}")
    if expected_q_count is not None and q_count != expected_q_count:
        raise ValueError(f"q_count mismatch: file has {q_count}, expected {expected_q_count}")
    table = QuantileTable(ue_count=ue_count, q_count=q_count, discount=discount)
    for key, values in doc["entries"].items():
        try:
            state_part, action_part = key.split("|")
            bits = state_part.removeprefix("e:")
            ordinal = int(action_part.removeprefix("a:"))
        except Exception as exc:
            raise ValueError(f"malformed entry key: {key!r}") from exc
        state = StateCode.from_bitstring(bits)
        if len(state.bits) != ue_count:
            raise ValueError(f"entry key {key!r} does not match ue_count {ue_count}")
        if ordinal >= ue_count + 2:
            raise ValueError(f"entry key {key!r} has an out-of-range action ordinal")
        arr = np.asarray(values, dtype=float)
        if arr.shape != (q_count,):
            raise ValueError(f"entry {key!r} holds {arr.size} supports, expected q_count={q_count}")
        if np.any(np.diff(arr) < 0):
            raise ValueError(f"entry {key!r} supports are not sorted")
        table.z[(bits, ordinal)] = arr
    return table
