"""Controlled model zoo and the tabular logit trainer.

Joint families with separately tunable dependence structure:

* ``chain`` — first-order neighbor couplings of strength beta (beta=0 is an
  independent product);
* ``exchangeable`` — a mixture of i.i.d. components, exactly invariant under
  position permutations;
* ``tc-ladder`` — a deterministic interpolation from uniform toward the
  all-positions-equal diagonal whose total correlation grows with the level;
* ``custom-table`` — an explicit log-mass table.

The trainer fits a logit table by full-batch gradient descent on the covered
visible contexts' cross-entropy toward the reference conditionals, optionally
plus a squared-normalized-circulation penalty estimated on sampled squares.
Restricting the covered mask patterns is the mechanism for inducing learned
incompatibility; the penalty is the mechanism for suppressing it.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .core import (
    LogitTable,
    LogitTableOracle,
    PartialContext,
    TabularJointModel,
    Vocabulary,
    ConditionalOracle,
    context_class_index,
    seeded_rng,
)
from .errors import ContractViolationError, TrainingFailureError
from .pseudojoint import (
    DEFAULT_NORMALIZER_EPSILON,
    ExhaustivePlan,
    MonteCarloPlan,
    Estimate,
    curl_local,
)

CHAIN = "chain"
EXCHANGEABLE = "exchangeable"
TC_LADDER = "tc-ladder"
CUSTOM = "custom-table"

EXCHANGEABLE_COMPONENTS = 3


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Recipe for one joint; identical specs generate identical joints."""

    family: str
    positions: int
    vocab_size: int
    seed: int = 0
    beta: float = 1.0
    level: int = 1
    levels_total: int = 3
    table: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.family not in (CHAIN, EXCHANGEABLE, TC_LADDER, CUSTOM):
            raise ContractViolationError(f"unknown synthetic family {self.family!r}")
        if self.family == CHAIN and not math.isfinite(self.beta):
            raise ContractViolationError(f"chain coupling strength must be finite, got {self.beta}")
        if self.family == TC_LADDER and not (1 <= self.level <= self.levels_total):
            raise ContractViolationError(f"ladder level must be in 1..{self.levels_total}, got {self.level}")
        if self.family == CUSTOM and self.table is None:
            raise ContractViolationError("custom-table family needs an explicit log-mass table")

    def to_dict(self) -> dict:
        out = {
            "family": self.family,
            "positions": self.positions,
            "vocab_size": self.vocab_size,
            "seed": self.seed,
        }
        if self.family == CHAIN:
            out["beta"] = self.beta
        if self.family == TC_LADDER:
            out["level"] = self.level
            out["levels_total"] = self.levels_total
        if self.family == CUSTOM:
            out["table"] = list(self.table)
        return out


def generate_joint(spec: SyntheticTaskSpec) -> TabularJointModel:
    m, vocab = spec.positions, spec.vocab_size
    if spec.family == CUSTOM:
        return TabularJointModel(vocab, m, np.asarray(spec.table))

    if spec.family == CHAIN:
        rng = seeded_rng(spec.seed, 1)
        log_table = np.zeros((vocab,) * m)
        for k in range(m):
            marg = rng.standard_normal(vocab)
            shape = [1] * m
            shape[k] = vocab
            log_table = log_table + marg.reshape(shape)
        for k in range(m - 1):
            coupling = rng.standard_normal((vocab, vocab))
            shape = [1] * m
            shape[k] = vocab
            shape[k + 1] = vocab
            log_table = log_table + spec.beta * coupling.reshape(shape)
        return TabularJointModel(vocab, m, log_table)

    if spec.family == EXCHANGEABLE:
        rng = seeded_rng(spec.seed, 2)
        weights = np.exp(rng.standard_normal(EXCHANGEABLE_COMPONENTS))
        weights /= weights.sum()
        # each entry depends only on its token counts, so the table is
        # permutation-invariant down to the last bit
        counts = np.stack([(np.indices((vocab,) * m) == v).sum(axis=0) for v in range(vocab)])
        table = np.zeros((vocab,) * m)
        for c in range(EXCHANGEABLE_COMPONENTS):
            comp = np.exp(rng.standard_normal(vocab))
            comp /= comp.sum()
            prod = np.ones((vocab,) * m)
            for v in range(vocab):
                prod = prod * np.power(comp[v], counts[v])
            table = table + weights[c] * prod
        with np.errstate(divide="ignore"):
            return TabularJointModel(vocab, m, np.log(table))

    # tc-ladder: deterministic; the seed has no effect for this family
    lam = spec.level / (spec.levels_total + 1)
    table = np.full((vocab,) * m, (1.0 - lam) / vocab**m)
    for v in range(vocab):
        table[(v,) * m] += lam / vocab
    with np.errstate(divide="ignore"):
        return TabularJointModel(vocab, m, np.log(table))


def tc_ladder(positions: int, vocab_size: int, levels_total: int = 3) -> list[TabularJointModel]:
    """All rungs of the ladder, lowest dependence first."""
    return [
        generate_joint(
            SyntheticTaskSpec(
                family=TC_LADDER,
                positions=positions,
                vocab_size=vocab_size,
                level=level,
                levels_total=levels_total,
            )
        )
        for level in range(1, levels_total + 1)
    ]


# ---------------------------------------------------------------------------
# circulation-square sampling shared by the penalty estimator and the trainer


def _square_patterns(positions: int) -> list[tuple[int, ...]]:
    """Visible subsets leaving at least two positions unresolved."""
    out = []
    for size in range(0, positions - 1):
        out.extend(itertools.combinations(range(positions), size))
    return out


def _iter_exhaustive_squares(positions: int, vocab: int):
    for pattern in _square_patterns(positions):
        rest = [p for p in range(positions) if p not in pattern]
        for values in itertools.product(range(vocab), repeat=len(pattern)):
            assigned = dict(zip(pattern, values))
            for i, j in itertools.combinations(rest, 2):
                for a in range(vocab):
                    for b in range(vocab):
                        yield assigned, i, j, a, b


def _sample_square(rng: np.random.Generator, patterns: list, positions: int, vocab: int):
    pattern = patterns[rng.integers(len(patterns))]
    assigned = {p: int(rng.integers(vocab)) for p in pattern}
    rest = [p for p in range(positions) if p not in assigned]
    pick = rng.choice(len(rest), size=2, replace=False)
    i, j = sorted(rest[k] for k in pick)
    return assigned, i, j, int(rng.integers(vocab)), int(rng.integers(vocab))


def penalty_batch(logits: np.ndarray, squares: Sequence, positions: int, vocab: int) -> tuple[float, np.ndarray]:
    """Mean squared normalized circulation over the given squares, with its
    analytic gradient through the four participating softmax cells.

    Each square is (assigned dict, i, j, a, b); the four cells are the logit
    rows queried by the circulation's four log-conditional terms.
    """
    n = len(squares)
    pos_idx = np.empty((n, 4), dtype=np.intp)
    cls_idx = np.empty((n, 4), dtype=np.intp)
    tok_idx = np.empty((n, 4), dtype=np.intp)
    for s, (assigned, i, j, a, b) in enumerate(squares):
        pos_idx[s] = (i, j, j, i)
        tok_idx[s] = (a, b, b, a)
        cls_idx[s] = (
            context_class_index(i, assigned, positions, vocab),
            context_class_index(j, {**assigned, i: a}, positions, vocab),
            context_class_index(j, assigned, positions, vocab),
            context_class_index(i, {**assigned, j: b}, positions, vocab),
        )
    rows = logits[pos_idx, cls_idx]
    rows = rows - logsumexp(rows, axis=-1, keepdims=True)  # (n, 4, V) log conditionals
    lq = np.take_along_axis(rows, tok_idx[:, :, None], axis=2)[:, :, 0]
    signs = np.array([1.0, 1.0, -1.0, -1.0])
    circ = lq @ signs
    denom = np.abs(lq).sum(axis=1) + DEFAULT_NORMALIZER_EPSILON
    value = float(((circ / denom) ** 2).mean())
    # d(circ^2 / denom^2)/dlq_r; log conditionals are <= 0 so d|lq|/dlq = -1
    dlq = (
        2.0 * circ[:, None] * signs[None, :] / denom[:, None] ** 2
        + 2.0 * circ[:, None] ** 2 * np.where(lq < 0, 1.0, 0.0) / denom[:, None] ** 3
    )
    residual = -np.exp(rows)  # becomes one_hot - probs on the selected tokens
    sel = tok_idx[:, :, None]
    np.put_along_axis(residual, sel, np.take_along_axis(residual, sel, axis=2) + 1.0, axis=2)
    grad = np.zeros_like(logits)
    np.add.at(grad, (pos_idx, cls_idx), dlq[:, :, None] / n * residual)
    return value, grad


def ecirc_penalty(
    oracle: ConditionalOracle,
    plan=ExhaustivePlan(),
    epsilon: float = DEFAULT_NORMALIZER_EPSILON,
) -> Estimate:
    """Mean squared normalized circulation over visible-context squares.

    Exhaustive mode enumerates every (visible subset, values, pair, tokens)
    square; the Monte Carlo mode samples them uniformly.
    """
    positions, vocab = oracle.positions, oracle.vocab.size

    def value(assigned, i, j, a, b) -> float:
        context = PartialContext(
            observed=assigned, block=tuple(p for p in range(positions) if p not in assigned)
        )
        return curl_local(oracle, context, i, j, a, b, epsilon).normalized_value ** 2

    if isinstance(plan, ExhaustivePlan):
        values = np.array([value(*square) for square in _iter_exhaustive_squares(positions, vocab)])
        return Estimate(value=float(values.mean()), n=len(values), mode="exact")
    if isinstance(plan, MonteCarloPlan):
        rng = seeded_rng(plan.seed)
        patterns = _square_patterns(positions)
        values = np.array([value(*_sample_square(rng, patterns, positions, vocab)) for _ in range(plan.n)])
        stderr = float(values.std(ddof=1) / math.sqrt(plan.n)) if plan.n > 1 else 0.0
        return Estimate(value=float(values.mean()), stderr=stderr, n=plan.n, mode="monte-carlo")
    raise ContractViolationError(f"unknown sampling plan {plan!r}")


# ---------------------------------------------------------------------------
# trainer

PREFIX_ONLY = "prefix-only"
ALL_MASKS = "all-masks"


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one deterministic training run.

    coverage picks which visible contexts receive cross-entropy supervision:
    prefix-only trains position i only on the context {0..i-1}; all-masks on
    every subset of the other positions; a fraction in (0, 1) on a seeded
    sample of those subsets.  ecirc_weight adds the squared-normalized-
    circulation penalty, estimated on ecirc_samples seeded squares per step.
    """

    coverage: str = ALL_MASKS
    coverage_fraction: float | None = None
    steps: int = 2000
    learning_rate: float = 1.0
    ecirc_weight: float = 0.0
    ecirc_samples: int = 32
    seed: int = 0
    init_scale: float = 1.0
    grad_tol: float = 1e-8

    def __post_init__(self):
        if self.coverage not in (PREFIX_ONLY, ALL_MASKS, "fraction"):
            raise ContractViolationError(f"coverage must be prefix-only, all-masks, or fraction, got {self.coverage!r}")
        if self.coverage == "fraction":
            if self.coverage_fraction is None or not (0 < self.coverage_fraction <= 1):
                raise ContractViolationError("fraction coverage needs coverage_fraction in (0, 1]")
        if self.steps < 1:
            raise ContractViolationError("steps must be >= 1")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ContractViolationError(f"learning rate must be positive and finite, got {self.learning_rate}")
        if self.ecirc_weight < 0:
            raise ContractViolationError("ecirc weight must be >= 0")
        if self.ecirc_weight > 0 and self.ecirc_samples < 1:
            raise ContractViolationError("ecirc penalty needs at least one sample per step")
        if not (self.init_scale >= 0 and math.isfinite(self.init_scale)):
            raise ContractViolationError(f"init scale must be finite and >= 0, got {self.init_scale}")

    def to_dict(self) -> dict:
        return {
            "coverage": self.coverage,
            "coverage_fraction": self.coverage_fraction,
            "steps": self.steps,
            "learning_rate": self.learning_rate,
            "ecirc_weight": self.ecirc_weight,
            "ecirc_samples": self.ecirc_samples,
            "seed": self.seed,
            "init_scale": self.init_scale,
            "grad_tol": self.grad_tol,
        }


def _covered_patterns(config: TrainConfig, position: int, positions: int) -> list[tuple[int, ...]]:
    others = [p for p in range(positions) if p != position]
    if config.coverage == PREFIX_ONLY:
        return [tuple(p for p in range(position))]
    all_patterns = [
        pattern for size in range(len(others) + 1) for pattern in itertools.combinations(others, size)
    ]
    if config.coverage == ALL_MASKS:
        return all_patterns
    rng = seeded_rng(config.seed, 5, position)
    count = max(1, round(config.coverage_fraction * len(all_patterns)))
    picked = rng.choice(len(all_patterns), size=count, replace=False)
    return [all_patterns[k] for k in sorted(picked)]


class TrainedTabularOracle(LogitTableOracle):
    """Logit-table oracle plus its training provenance and history."""

    def __init__(self, table: LogitTable, config: TrainConfig, source_joint: TabularJointModel, history: dict):
        super().__init__(table)
        self.config = config
        self.source_joint = source_joint
        self.history = history

    def to_dict(self) -> dict:
        out = super().to_dict()
        out["log_mass"] = [float(v) for v in self.source_joint.log_mass]
        out["train_config"] = self.config.to_dict()
        return out


def train_tabular(joint: TabularJointModel, config: TrainConfig) -> TrainedTabularOracle:
    """Fit a logit table to the joint's conditionals on the covered contexts.

    Full-batch gradient descent with a fixed learning rate; the per-context
    cross-entropy gradient is the analytic softmax residual, and the penalty
    gradient is the analytic derivative of the squared normalized circulation
    through the four participating softmax cells.  Covered contexts are
    weighted uniformly, which leaves each context's optimum (the reference
    conditional) unchanged while equalizing convergence rates.  Deterministic
    per (config, joint).  Raises TrainingFailureError with the history
    attached if the loss stops being finite.
    """
    positions, vocab = joint.positions, joint.vocab.size
    rng = seeded_rng(config.seed, 7)
    logits = config.init_scale * rng.standard_normal(
        (positions, (vocab + 1) ** (positions - 1), vocab)
    )

    cell_pos: list[int] = []
    cell_cls: list[int] = []
    targets: list[np.ndarray] = []
    for i in range(positions):
        for pattern in _covered_patterns(config, i, positions):
            for values in itertools.product(range(vocab), repeat=len(pattern)):
                assigned = dict(zip(pattern, values))
                cell_pos.append(i)
                cell_cls.append(context_class_index(i, assigned, positions, vocab))
                targets.append(np.exp(joint.log_dist(i, assigned)))
    cell_pos_arr = np.array(cell_pos)
    cell_cls_arr = np.array(cell_cls)
    target_arr = np.stack(targets)

    patterns = _square_patterns(positions)
    penalty_rng = seeded_rng(config.seed, 9)
    history: dict = {"loss": [], "penalty": [], "grad_norm": []}

    def log_softmax(rows: np.ndarray) -> np.ndarray:
        return rows - logsumexp(rows, axis=-1, keepdims=True)

    for _ in range(config.steps):
        with np.errstate(over="ignore", invalid="ignore"):
            cell_rows = log_softmax(logits[cell_pos_arr, cell_cls_arr])
            loss = float(-(target_arr * cell_rows).sum(axis=1).mean())
        ce_grad = np.exp(cell_rows) - target_arr

        penalty_value = 0.0
        penalty_grad = np.zeros_like(logits)
        if config.ecirc_weight > 0:
            squares = [
                _sample_square(penalty_rng, patterns, positions, vocab)
                for _ in range(config.ecirc_samples)
            ]
            penalty_value, penalty_grad = penalty_batch(logits, squares, positions, vocab)

        if not (math.isfinite(loss) and math.isfinite(penalty_value)):
            raise TrainingFailureError(
                f"training loss became non-finite at step {len(history['loss'])}", history=history
            )

        update = np.zeros_like(logits)
        np.add.at(update, (cell_pos_arr, cell_cls_arr), ce_grad)
        update += config.ecirc_weight * penalty_grad
        grad_norm = float(np.abs(update).max())
        logits -= config.learning_rate * update

        history["loss"].append(loss)
        history["penalty"].append(penalty_value)
        history["grad_norm"].append(grad_norm)
        if not np.all(np.isfinite(logits)):
            raise TrainingFailureError(
                f"logits became non-finite at step {len(history['loss'])}", history=history
            )
        if grad_norm < config.grad_tol:
            break

    table = LogitTable(Vocabulary(vocab), positions, logits)
    return TrainedTabularOracle(table=table, config=config, source_joint=joint, history=history)
