"""Conditional-oracle abstractions and the exact tabular model families.

Every diagnostic in this package consumes the same query surface: a family
of normalized local conditionals ``log q(x_i = a | visible assignment)`` in
nats, exposed by :class:`ConditionalOracle`.  A :class:`TabularJointModel`
answers those queries by exact marginalization over its mass table, so it
doubles as the exact ("Bayes") oracle for its own distribution.
:class:`PerturbedConditionalModel` and :class:`LogitTableOracle` layer
controlled incompatibility on top of the same surface.

All probability arithmetic is done in the log domain and combined with
logsumexp; products over a block of positions would underflow otherwise.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.special import logsumexp

from .errors import ContractViolationError, DimensionError, SizeCapError

# Desk-scale caps: every brute-force enumeration stays comfortably under a
# second at these sizes (max 8**6 = 262144 joint states).
MAX_POSITIONS = 6
MAX_VOCAB = 8
LOG_MASS_FLOOR = -50.0


def log_normalize(values) -> np.ndarray:
    """Shift log weights so they form a normalized log distribution."""
    arr = np.asarray(values, dtype=np.float64)
    return arr - logsumexp(arr)


def _seed_key(*parts: int) -> list[int]:
    """Flatten non-negative integers into the 32-bit words SeedSequence takes."""
    key: list[int] = []
    for part in parts:
        value = int(part)
        if value < 0:
            raise ContractViolationError(f"seed components must be non-negative, got {part}")
        while True:
            key.append(value & 0xFFFFFFFF)
            value >>= 32
            if value == 0:
                break
    return key


def derived_seed(*parts: int) -> int:
    """Deterministically derive a 64-bit sub-seed from integer components."""
    return int(np.random.SeedSequence(_seed_key(*parts)).generate_state(1, np.uint64)[0])


def stable_uniform(*parts: int) -> float:
    """Deterministic uniform draw in [0, 1) keyed by integer components.

    Stable across runs and across query order: the draw is a pure function
    of the key, not of any generator state.
    """
    state = np.random.SeedSequence(_seed_key(*parts)).generate_state(1, np.uint64)[0]
    return float(state >> np.uint64(11)) * 2.0**-53


def seeded_rng(*parts: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(_seed_key(*parts)))


def worker_count() -> int:
    """Worker cap from CURLGAUGE_THREADS (default 1, sequential)."""
    raw = os.environ.get("CURLGAUGE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass(frozen=True)
class Vocabulary:
    """Dense zero-based token alphabet."""

    size: int

    def __post_init__(self):
        if not isinstance(self.size, int) or isinstance(self.size, bool) or self.size < 2:
            raise ContractViolationError(f"vocabulary size must be an integer >= 2, got {self.size!r}")

    def tokens(self) -> range:
        return range(self.size)


@dataclass(frozen=True)
class PartialContext:
    """Observed position->token assignment plus the ordered unresolved block.

    ``time`` is an opaque non-negative label carried through for provenance;
    the tabular oracles here are time-homogeneous and ignore it.
    """

    observed: Mapping[int, int]
    block: tuple[int, ...]
    time: float = 0.0

    def __post_init__(self):
        observed = {int(p): int(t) for p, t in dict(self.observed).items()}
        block = tuple(int(p) for p in self.block)
        if any(p < 0 or t < 0 for p, t in observed.items()):
            raise ContractViolationError("observed positions and tokens must be non-negative")
        if any(p < 0 for p in block):
            raise ContractViolationError("block positions must be non-negative")
        if len(set(block)) != len(block):
            raise ContractViolationError(f"block has repeated positions: {block}")
        overlap = set(observed) & set(block)
        if overlap:
            raise ContractViolationError(f"positions {sorted(overlap)} are both observed and in the block")
        if not (self.time >= 0):
            raise ContractViolationError(f"time label must be non-negative, got {self.time}")
        object.__setattr__(self, "observed", observed)
        object.__setattr__(self, "block", block)
        object.__setattr__(self, "time", float(self.time))

    def assign(self, position: int, token: int) -> "PartialContext":
        """Move one block position into the observed set with the given value."""
        if position not in self.block:
            raise ContractViolationError(f"position {position} is not in the unresolved block")
        observed = dict(self.observed)
        observed[int(position)] = int(token)
        block = tuple(p for p in self.block if p != position)
        return PartialContext(observed=observed, block=block, time=self.time)

    def assigned_key(self) -> tuple[tuple[int, int], ...]:
        return tuple(sorted(self.observed.items()))

    def to_dict(self) -> dict:
        return {
            "observed": {str(p): t for p, t in sorted(self.observed.items())},
            "block": list(self.block),
            "time": self.time,
        }

    @staticmethod
    def from_dict(data: Mapping) -> "PartialContext":
        return PartialContext(
            observed={int(p): int(t) for p, t in dict(data.get("observed", {})).items()},
            block=tuple(data.get("block", ())),
            time=float(data.get("time", 0.0)),
        )


def context_class_index(position: int, assigned: Mapping[int, int], positions: int, vocab_size: int) -> int:
    """Mixed-radix index of a visible context as seen from one position.

    Every other position contributes a digit in base ``vocab_size + 1``:
    0 when unassigned, ``token + 1`` otherwise.  This is the row index used
    by logit tables and perturbation tables.
    """
    index = 0
    for j in range(positions):
        if j == position:
            continue
        tok = assigned.get(j)
        index = index * (vocab_size + 1) + (0 if tok is None else int(tok) + 1)
    return index


def context_class_count(positions: int, vocab_size: int) -> int:
    return (vocab_size + 1) ** (positions - 1)


class ConditionalOracle:
    """Abstract query surface: one normalized log conditional per (position, context).

    Implementations are immutable after construction; results are cached per
    (position, assigned set), so concurrent read-only queries are safe.
    """

    vocab: Vocabulary
    positions: int

    def __init__(self):
        self._dist_cache: dict = {}

    def _dist_uncached(self, position: int, assigned: dict[int, int]) -> np.ndarray:
        raise NotImplementedError

    def log_dist(self, position: int, assigned: Mapping[int, int]) -> np.ndarray:
        """Log conditional over all tokens given an assigned position set.

        Hot path used by the enumeration loops; validation is minimal.
        The returned array is cached and read-only.
        """
        key = (position, tuple(sorted(assigned.items())))
        cached = self._dist_cache.get(key)
        if cached is None:
            if position in assigned:
                raise ContractViolationError(f"position {position} is already observed")
            cached = np.asarray(self._dist_uncached(position, dict(assigned)), dtype=np.float64)
            cached.flags.writeable = False
            self._dist_cache[key] = cached
        return cached

    def _validate_query(self, position: int, context: PartialContext) -> None:
        if not (0 <= position < self.positions):
            raise DimensionError(f"position {position} outside model with {self.positions} positions")
        for p, t in context.observed.items():
            if not (0 <= p < self.positions):
                raise DimensionError(f"observed position {p} outside model with {self.positions} positions")
            if not (0 <= t < self.vocab.size):
                raise DimensionError(f"token {t} outside vocabulary of size {self.vocab.size}")
        for p in context.block:
            if not (0 <= p < self.positions):
                raise DimensionError(f"block position {p} outside model with {self.positions} positions")
        if position in context.observed:
            raise ContractViolationError(f"position {position} is already observed in the context")

    def log_conditional_dist(self, position: int, context: PartialContext) -> np.ndarray:
        """Validated log conditional vector over the vocabulary."""
        self._validate_query(position, context)
        return self.log_dist(position, context.observed)

    def log_conditional(self, position: int, token: int, context: PartialContext) -> float:
        """log q(x_position = token | context's observed assignment), in nats."""
        dist = self.log_conditional_dist(position, context)
        if not (0 <= token < self.vocab.size):
            raise DimensionError(f"token {token} outside vocabulary of size {self.vocab.size}")
        return float(dist[token])

    @property
    def model_id(self) -> str:
        cached = getattr(self, "_model_id", None)
        if cached is None:
            payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
            cached = hashlib.sha256(payload.encode()).hexdigest()[:12]
            self._model_id = cached
        return cached

    def to_dict(self) -> dict:
        raise NotImplementedError


class TabularJointModel(ConditionalOracle):
    """Exact joint over ``vocab_size ** positions`` states.

    The log-mass table is normalized, floored at :data:`LOG_MASS_FLOOR` per
    state, and renormalized, so every state keeps strictly positive mass.
    Conditionals are computed by exact marginalization, which makes the model
    its own exact oracle (``q = p``) and the brute-force reference for every
    other oracle.
    """

    def __init__(self, vocab_size: int, positions: int, log_mass):
        super().__init__()
        if not (1 <= positions <= MAX_POSITIONS):
            raise SizeCapError(f"positions must be in 1..{MAX_POSITIONS}, got {positions}")
        if not (2 <= vocab_size <= MAX_VOCAB):
            raise SizeCapError(f"vocab size must be in 2..{MAX_VOCAB}, got {vocab_size}")
        self.vocab = Vocabulary(int(vocab_size))
        self.positions = int(positions)
        arr = np.array(log_mass, dtype=np.float64).reshape(-1)
        if arr.size != vocab_size**positions:
            raise DimensionError(
                f"log mass has {arr.size} entries, expected {vocab_size}**{positions} = {vocab_size**positions}"
            )
        if np.any(np.isnan(arr)) or np.any(arr == np.inf):
            raise ContractViolationError("log mass entries must be finite or -inf")
        arr = arr - logsumexp(arr)
        arr = np.maximum(arr, LOG_MASS_FLOOR)
        arr = arr - logsumexp(arr)
        arr.flags.writeable = False
        self._log_mass = arr
        self._nd = arr.reshape((self.vocab.size,) * self.positions)

    @classmethod
    def from_probabilities(cls, table) -> "TabularJointModel":
        arr = np.asarray(table, dtype=np.float64)
        if arr.ndim < 1 or any(d != arr.shape[0] for d in arr.shape):
            raise DimensionError(f"probability table must be a (V,)*m hypercube, got shape {arr.shape}")
        with np.errstate(divide="ignore"):
            return cls(arr.shape[0], arr.ndim, np.log(arr))

    @classmethod
    def uniform(cls, vocab_size: int, positions: int) -> "TabularJointModel":
        return cls(vocab_size, positions, np.zeros(vocab_size**positions))

    @property
    def log_mass(self) -> np.ndarray:
        """Flat normalized log-mass table, row-major (last position fastest)."""
        return self._log_mass

    @property
    def log_mass_nd(self) -> np.ndarray:
        return self._nd

    def log_joint(self, assignment: Mapping[int, int]) -> float:
        if sorted(assignment) != list(range(self.positions)):
            raise ContractViolationError("full-joint lookup needs a value for every position")
        return float(self._nd[tuple(assignment[p] for p in range(self.positions))])

    def _dist_uncached(self, position: int, assigned: dict[int, int]) -> np.ndarray:
        idx: list = [slice(None)] * self.positions
        for p, v in assigned.items():
            idx[p] = int(v)
        sub = self._nd[tuple(idx)]
        free = sorted(p for p in range(self.positions) if p not in assigned)
        axis = free.index(position)
        others = tuple(k for k in range(sub.ndim) if k != axis)
        vec = logsumexp(sub, axis=others) if others else sub
        return vec - logsumexp(vec)

    def log_block_conditional(self, context: PartialContext) -> np.ndarray:
        """Exact log p(x_block | observed) as an array with one axis per block position.

        Positions that are neither observed nor in the block are marginalized
        out.  Axes follow the block tuple's own order.
        """
        if not context.block:
            raise ContractViolationError("block must be non-empty")
        self._validate_query(context.block[0], context)
        idx: list = [slice(None)] * self.positions
        for p, v in context.observed.items():
            idx[p] = v
        sub = self._nd[tuple(idx)]
        free = sorted(p for p in range(self.positions) if p not in context.observed)
        block_set = set(context.block)
        drop = tuple(k for k, p in enumerate(free) if p not in block_set)
        if drop:
            sub = logsumexp(sub, axis=drop)
        kept = [p for p in free if p in block_set]
        sub = np.transpose(sub, [kept.index(p) for p in context.block])
        return sub - logsumexp(sub)

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab.size,
            "positions": self.positions,
            "log_mass": [float(v) for v in self._log_mass],
        }


def bayes_conditional(joint: TabularJointModel, position: int, token: int, context: PartialContext) -> float:
    """Exact conditional of the joint: log of a ratio of summed state masses."""
    return joint.log_conditional(position, token, context)


class PerturbedConditionalModel(ConditionalOracle):
    """Exact conditionals with seeded per-context logit noise of magnitude delta.

    One Gaussian offset vector is drawn per (position, visible-context class)
    at construction, so identical (seed, delta) give bit-identical conditionals
    regardless of query order.  ``delta = 0`` reproduces the base conditionals
    exactly (after renormalization).
    """

    def __init__(self, base: TabularJointModel, delta: float, perturbation_seed: int):
        super().__init__()
        if not (math.isfinite(delta) and delta >= 0):
            raise ContractViolationError(f"delta must be finite and >= 0, got {delta}")
        self.base = base
        self.delta = float(delta)
        self.perturbation_seed = int(perturbation_seed)
        self.vocab = base.vocab
        self.positions = base.positions
        shape = (self.positions, context_class_count(self.positions, self.vocab.size), self.vocab.size)
        offsets = seeded_rng(self.perturbation_seed).standard_normal(shape)
        offsets.flags.writeable = False
        self._offsets = offsets

    def _dist_uncached(self, position: int, assigned: dict[int, int]) -> np.ndarray:
        base_vec = self.base.log_dist(position, assigned)
        cls = context_class_index(position, assigned, self.positions, self.vocab.size)
        return log_normalize(base_vec + self.delta * self._offsets[position, cls])

    def to_dict(self) -> dict:
        out = self.base.to_dict()
        out["perturbation"] = {"delta": self.delta, "seed": self.perturbation_seed}
        return out


def perturbed_conditional(
    model: PerturbedConditionalModel, position: int, token: int, context: PartialContext
) -> float:
    return model.log_conditional(position, token, context)


@dataclass(frozen=True)
class LogitTable:
    """Raw pre-softmax logits, one vector per (position, visible-context class).

    The induced conditional at a cell is the softmax of its vector, so adding
    a scalar to a whole vector leaves the conditional unchanged; only those
    shift-invariant objects are identifiable.
    """

    vocab: Vocabulary
    positions: int
    logits: np.ndarray

    def __post_init__(self):
        if not (1 <= self.positions <= MAX_POSITIONS):
            raise SizeCapError(f"positions must be in 1..{MAX_POSITIONS}, got {self.positions}")
        if self.vocab.size > MAX_VOCAB:
            raise SizeCapError(f"vocab size must be <= {MAX_VOCAB}, got {self.vocab.size}")
        expected = (self.positions, context_class_count(self.positions, self.vocab.size), self.vocab.size)
        arr = np.array(self.logits, dtype=np.float64)
        if arr.shape != expected:
            raise DimensionError(f"logit table must have shape {expected}, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ContractViolationError("logit table entries must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "logits", arr)

    @property
    def n_classes(self) -> int:
        return context_class_count(self.positions, self.vocab.size)

    @classmethod
    def zeros(cls, vocab_size: int, positions: int) -> "LogitTable":
        shape = (positions, context_class_count(positions, vocab_size), vocab_size)
        return cls(Vocabulary(vocab_size), positions, np.zeros(shape))

    @classmethod
    def random(cls, vocab_size: int, positions: int, seed: int, scale: float = 1.0) -> "LogitTable":
        shape = (positions, context_class_count(positions, vocab_size), vocab_size)
        return cls(Vocabulary(vocab_size), positions, scale * seeded_rng(seed).standard_normal(shape))


def apply_logit_shift(table: LogitTable, shifts) -> LogitTable:
    """Add one scalar per (position, context class) to every logit in that cell."""
    arr = np.broadcast_to(np.asarray(shifts, dtype=np.float64), (table.positions, table.n_classes))
    if not np.all(np.isfinite(arr)):
        raise ContractViolationError("logit shifts must be finite")
    return LogitTable(table.vocab, table.positions, table.logits + arr[:, :, None])


class LogitTableOracle(ConditionalOracle):
    """Oracle whose conditionals are softmaxes of a logit table's cells."""

    def __init__(self, table: LogitTable):
        super().__init__()
        self.table = table
        self.vocab = table.vocab
        self.positions = table.positions

    def _dist_uncached(self, position: int, assigned: dict[int, int]) -> np.ndarray:
        cls = context_class_index(position, assigned, self.positions, self.vocab.size)
        return log_normalize(self.table.logits[position, cls])

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab.size,
            "positions": self.positions,
            "logit_table": {"values": [float(v) for v in self.table.logits.reshape(-1)]},
        }


@dataclass(frozen=True)
class ModelBundle:
    """A loaded model file: the oracle to diagnose plus, when available, the
    exact reference joint supplying p."""

    oracle: ConditionalOracle
    joint: TabularJointModel | None
    model_id: str


def model_from_dict(data: Mapping) -> ModelBundle:
    """Build oracle + reference joint from the model JSON schema.

    Schema: ``{vocab_size, positions, log_mass?: flat row-major array,
    perturbation?: {delta, seed}, logit_table?: {values}, train_config?}``.
    Row-major means the last position varies fastest.
    """
    known = {"vocab_size", "positions", "log_mass", "perturbation", "logit_table", "train_config"}
    unknown = set(data) - known
    if unknown:
        raise DimensionError(f"unknown model fields: {sorted(unknown)}")
    vocab_size = int(data["vocab_size"])
    positions = int(data["positions"])
    joint = None
    if "log_mass" in data:
        joint = TabularJointModel(vocab_size, positions, data["log_mass"])
    if "logit_table" in data:
        values = np.asarray(data["logit_table"]["values"], dtype=np.float64)
        shape = (positions, context_class_count(positions, vocab_size), vocab_size)
        table = LogitTable(Vocabulary(vocab_size), positions, values.reshape(shape))
        oracle: ConditionalOracle = LogitTableOracle(table)
    elif "perturbation" in data:
        if joint is None:
            raise DimensionError("perturbed model files need a log_mass table")
        pert = data["perturbation"]
        oracle = PerturbedConditionalModel(joint, float(pert["delta"]), int(pert["seed"]))
    else:
        if joint is None:
            raise DimensionError("model file needs log_mass and/or logit_table")
        oracle = joint
    payload = json.dumps(_plain(data), sort_keys=True, separators=(",", ":"))
    model_id = hashlib.sha256(payload.encode()).hexdigest()[:12]
    return ModelBundle(oracle=oracle, joint=joint, model_id=model_id)


def _plain(obj):
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def load_model(path) -> ModelBundle:
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))


def save_model(model: ConditionalOracle, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_dict(), fh, indent=1)
        fh.write("\n")
