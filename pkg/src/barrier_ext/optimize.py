"""First-order optimizers and the constrained training loops.

Four ways to train against inequality constraints: plain penalties
(quadratic, t-parameterized ReLU), the annealed log-barrier extension,
the standard log-barrier with a phase-I feasibility stage, and the
explicit Lagrangian-dual baseline with projected gradient ascent.

A training problem is anything with an ``n_items`` count and a
``build(tape, param_vars, item)`` method returning the scalar data term and
the list of scalar constraint values f_i for one batch item.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from barrier_ext.autodiff import Tape, Var
from barrier_ext.barriers import BarrierSchedule, ConstraintHandlerKind, schedule_step


class TrainingAbort(RuntimeError):
    """NaN/Inf appeared in the loss or gradients; aborting beats clamping."""


class InfeasibleError(RuntimeError):
    """Standard log-barrier evaluated at a point violating some constraint."""


class InfeasibleStartError(RuntimeError):
    """Phase-I budget exhausted without reaching strict feasibility."""


class Problem(Protocol):
    n_items: int

    def build(self, tape: Tape, params: dict[str, Var], item: int) -> tuple[Var, list[Var]]:
        """Data term and scalar constraint values for one item."""
        ...


@dataclass
class OptimizerConfig:
    method: str = "adam"  # "sgd" or "adam"
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 1
    batch_size: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.method not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer method {self.method!r}")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


@dataclass
class LossReport:
    data_term: float
    constraint_term: float
    constraint_values: np.ndarray
    violation_count: int


class Sgd:
    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            p -= self.learning_rate * grads[name]


class Adam:
    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        b1c = 1.0 - self.beta1**self.step_count
        b2c = 1.0 - self.beta2**self.step_count
        for name, p in params.items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.learning_rate * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def make_optimizer(config: OptimizerConfig) -> Sgd | Adam:
    if config.method == "sgd":
        return Sgd(config.learning_rate)
    return Adam(config.learning_rate, config.beta1, config.beta2, config.eps)


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    optimizer: Sgd | Adam
    schedule: BarrierSchedule
    rng: np.random.Generator
    epoch: int = 0
    lam: np.ndarray | None = None  # (n_items, N) multipliers, dual loop only
    history: list = field(default_factory=list)


def init_state(
    params: dict[str, np.ndarray],
    config: OptimizerConfig,
    t0: float = 5.0,
    mu: float = 1.1,
) -> TrainState:
    return TrainState(
        params={k: np.array(v, dtype=np.float64) for k, v in params.items()},
        optimizer=make_optimizer(config),
        schedule=BarrierSchedule.start(t0, mu),
        rng=np.random.default_rng(config.seed),
    )


def epoch_order(rng: np.random.Generator, n_items: int) -> np.ndarray:
    """The shuffle every loop uses; exposed so oracles can replay batches."""
    return rng.permutation(n_items)


def handler_term(f: Var, kind: ConstraintHandlerKind, t: float, index: int = 0) -> Var:
    """Tape expression of one scalar constraint under the chosen handler.

    The piecewise handlers branch on the eagerly known forward value of f;
    both branches agree in value and slope at the junction, so the recorded
    branch differentiates correctly.
    """
    if kind is ConstraintHandlerKind.QUADRATIC_PENALTY:
        r = f.relu()
        return r * r
    if kind is ConstraintHandlerKind.RELU_PENALTY:
        return (f * t).relu()
    fval = float(f.value)
    if kind is ConstraintHandlerKind.STANDARD_LOG_BARRIER:
        if fval >= 0.0:
            raise InfeasibleError(
                f"constraint {index} has value {fval:.6g} >= 0; standard barrier undefined"
            )
        return (-f).log() * (-1.0 / t)
    if kind is ConstraintHandlerKind.LOG_BARRIER_EXTENSION:
        if fval <= -1.0 / (t * t):
            return (-f).log() * (-1.0 / t)
        shift = -(1.0 / t) * math.log(1.0 / (t * t)) + 1.0 / t
        return f * t + shift
    raise ValueError(f"handler {kind} does not define a per-constraint loss term")


def total_loss(
    data_term: Var,
    constraint_terms: list[Var],
    handler: ConstraintHandlerKind,
    t: float,
    constraint_weight: float = 1.0,
) -> tuple[Var, LossReport]:
    """Data term plus the weighted handler sum over scalar constraints."""
    f_values = np.array([float(f.value) for f in constraint_terms], dtype=np.float64)
    loss = data_term
    constraint_total = 0.0
    if constraint_terms:
        acc = handler_term(constraint_terms[0], handler, t, 0)
        for i, f in enumerate(constraint_terms[1:], start=1):
            acc = acc + handler_term(f, handler, t, i)
        if constraint_weight != 1.0:
            acc = acc * constraint_weight
        constraint_total = float(acc.value)
        loss = loss + acc
    report = LossReport(
        data_term=float(data_term.value),
        constraint_term=constraint_total,
        constraint_values=f_values,
        violation_count=int(np.sum(f_values > 0.0)),
    )
    return loss, report


def _check_finite(name: str, value: float, epoch: int) -> None:
    if not math.isfinite(value):
        raise TrainingAbort(f"{name} is {value} at epoch {epoch}")


def _grads_finite(grads: dict[str, np.ndarray], epoch: int) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingAbort(f"gradient of {name!r} is not finite at epoch {epoch}")


def _batched(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


@dataclass
class _EpochStats:
    data_sum: float = 0.0
    constraint_sum: float = 0.0
    n_items: int = 0
    violation_sum: float = 0.0
    violation_max: float = 0.0
    n_constraints: int = 0

    def add(self, report: LossReport) -> None:
        self.data_sum += report.data_term
        self.constraint_sum += report.constraint_term
        self.n_items += 1
        if report.constraint_values.size:
            viol = np.maximum(report.constraint_values, 0.0)
            self.violation_sum += float(viol.sum())
            self.violation_max = max(self.violation_max, float(viol.max()))
            self.n_constraints += report.constraint_values.size

    def row(self) -> dict:
        items = max(self.n_items, 1)
        return {
            "data_loss": self.data_sum / items,
            "constraint_loss": self.constraint_sum / items,
            "mean_violation": self.violation_sum / max(self.n_constraints, 1),
            "max_violation": self.violation_max,
        }


def _run_epochs(
    state: TrainState,
    problem: Problem,
    config: OptimizerConfig,
    per_item_loss: Callable[[Tape, Var, list[Var], int], tuple[Var, LossReport]],
    after_epoch: Callable[[TrainState, list[list[np.ndarray]]], None] | None = None,
    epoch_callback: Callable[[TrainState], dict] | None = None,
    plateau_patience: int | None = None,
    checked: bool = False,
) -> tuple[TrainState, list[dict]]:
    """Shared epoch/batch skeleton for every loop; handlers differ only in
    the per-item loss expression and an optional end-of-epoch hook."""
    rows: list[dict] = []
    best_val = -math.inf
    epochs_since_best = 0
    for _ in range(config.epochs):
        order = epoch_order(state.rng, problem.n_items)
        stats = _EpochStats()
        last_f: list[np.ndarray | None] = [None] * problem.n_items
        with np.errstate(all="ignore"):  # NaN guards below report, not warn
            for batch in _batched(order, config.batch_size):
                grads: dict[str, np.ndarray] | None = None
                scale = 1.0 / len(batch)
                for item in batch:
                    item = int(item)
                    tape = Tape(checked=checked)
                    param_vars = {k: tape.leaf(v) for k, v in state.params.items()}
                    data_term, constraints = problem.build(tape, param_vars, item)
                    loss, report = per_item_loss(tape, data_term, constraints, item)
                    _check_finite("data term", report.data_term, state.epoch)
                    _check_finite("constraint term", report.constraint_term, state.epoch)
                    _check_finite("loss", float(loss.value), state.epoch)
                    stats.add(report)
                    last_f[item] = report.constraint_values
                    item_grads = tape.backward(loss)
                    named = {k: item_grads[v] * scale for k, v in param_vars.items()}
                    if grads is None:
                        grads = named
                    else:
                        for k in grads:
                            grads[k] += named[k]
                assert grads is not None
                _grads_finite(grads, state.epoch)
                state.optimizer.step(state.params, grads)
        if after_epoch is not None:
            after_epoch(state, last_f)  # type: ignore[arg-type]
        row = {"epoch": state.epoch, "t": state.schedule.t}
        row.update(stats.row())
        if epoch_callback is not None:
            row.update(epoch_callback(state))
        rows.append(row)
        state.history.append(row)
        if plateau_patience is not None:
            # halve-on-plateau: track validation score when available, else
            # fall back to the (negated) epoch training loss
            score = row.get("val_dice")
            if score is None:
                score = -(row["data_loss"] + row["constraint_loss"])
            if score > best_val:
                best_val = score
                epochs_since_best = 0
            else:
                epochs_since_best += 1
                if epochs_since_best >= plateau_patience:
                    state.optimizer.learning_rate *= 0.5
                    epochs_since_best = 0
        state.schedule = schedule_step(state.schedule)
        state.epoch += 1
    return state, rows


def train_algorithm1(
    state: TrainState,
    problem: Problem,
    config: OptimizerConfig,
    constraint_weight: float = 1.0,
    epoch_callback: Callable[[TrainState], dict] | None = None,
    plateau_patience: int | None = None,
) -> tuple[TrainState, list[dict]]:
    """Annealed log-barrier-extension training: minimize the extension loss
    for one epoch at the current t, then multiply t by mu, starting from any
    (not necessarily feasible) parameters."""
    return _train_with_handler(
        state,
        problem,
        config,
        ConstraintHandlerKind.LOG_BARRIER_EXTENSION,
        constraint_weight,
        epoch_callback,
        plateau_patience,
    )


def train_penalty(
    state: TrainState,
    problem: Problem,
    config: OptimizerConfig,
    kind: ConstraintHandlerKind,
    constraint_weight: float = 1.0,
    epoch_callback: Callable[[TrainState], dict] | None = None,
    plateau_patience: int | None = None,
) -> tuple[TrainState, list[dict]]:
    """Penalty training; the ReLU penalty follows the same t-schedule as the
    extension, the quadratic penalty ignores t entirely."""
    if kind not in (
        ConstraintHandlerKind.QUADRATIC_PENALTY,
        ConstraintHandlerKind.RELU_PENALTY,
    ):
        raise ValueError(f"train_penalty expects a penalty handler, got {kind}")
    return _train_with_handler(
        state, problem, config, kind, constraint_weight, epoch_callback, plateau_patience
    )


def train_standard_barrier(
    state: TrainState,
    problem: Problem,
    config: OptimizerConfig,
    constraint_weight: float = 1.0,
    epoch_callback: Callable[[TrainState], dict] | None = None,
    plateau_patience: int | None = None,
    phase1_delta: float = 1e-3,
    phase1_max_steps: int = 500,
) -> tuple[TrainState, list[dict]]:
    """Classic interior-point training: phase-I feasibility search first,
    then the annealed standard barrier (which hard-fails if any iterate
    leaves the feasible region)."""
    state.params = phase1_feasible(
        state.params,
        problem,
        config,
        delta=phase1_delta,
        max_steps=phase1_max_steps,
    )
    return _train_with_handler(
        state,
        problem,
        config,
        ConstraintHandlerKind.STANDARD_LOG_BARRIER,
        constraint_weight,
        epoch_callback,
        plateau_patience,
    )


def _train_with_handler(
    state: TrainState,
    problem: Problem,
    config: OptimizerConfig,
    handler: ConstraintHandlerKind,
    constraint_weight: float,
    epoch_callback: Callable[[TrainState], dict] | None,
    plateau_patience: int | None,
) -> tuple[TrainState, list[dict]]:
    def per_item(tape: Tape, data_term: Var, constraints: list[Var], item: int):
        return total_loss(data_term, constraints, handler, state.schedule.t, constraint_weight)

    return _run_epochs(
        state,
        problem,
        config,
        per_item,
        epoch_callback=epoch_callback,
        plateau_patience=plateau_patience,
    )


def train_lagrangian_dual(
    state: TrainState,
    problem: Problem,
    config: OptimizerConfig,
    dual_lr: float = 1e-3,
    epoch_callback: Callable[[TrainState], dict] | None = None,
    plateau_patience: int | None = None,
) -> tuple[TrainState, list[dict]]:
    """Explicit-dual baseline: primal steps on the Lagrangian at fixed
    multipliers, then one projected dual ascent step per epoch per item."""
    if dual_lr <= 0.0:
        raise ValueError("dual_lr must be positive")

    def per_item(tape: Tape, data_term: Var, constraints: list[Var], item: int):
        if state.lam is None:
            state.lam = np.zeros((problem.n_items, len(constraints)))
        if state.lam.shape[1] != len(constraints):
            raise ValueError(
                f"item {item} has {len(constraints)} scalar constraints, "
                f"expected {state.lam.shape[1]}"
            )
        f_values = np.array([float(f.value) for f in constraints], dtype=np.float64)
        loss = data_term
        lagrange_total = 0.0
        if constraints:
            acc = constraints[0] * float(state.lam[item, 0])
            for i, f in enumerate(constraints[1:], start=1):
                acc = acc + f * float(state.lam[item, i])
            lagrange_total = float(acc.value)
            loss = loss + acc
        report = LossReport(
            data_term=float(data_term.value),
            constraint_term=lagrange_total,
            constraint_values=f_values,
            violation_count=int(np.sum(f_values > 0.0)),
        )
        return loss, report

    def dual_ascent(st: TrainState, last_f) -> None:
        if st.lam is None:
            return
        for item, f_values in enumerate(last_f):
            if f_values is None:
                continue
            st.lam[item] = np.maximum(0.0, st.lam[item] + dual_lr * f_values)

    return _run_epochs(
        state,
        problem,
        config,
        per_item,
        after_epoch=dual_ascent,
        epoch_callback=epoch_callback,
        plateau_patience=plateau_patience,
    )


def partial_cross_entropy(s: Var, labels: np.ndarray, labeled_rows: np.ndarray) -> Var:
    """Cross-entropy summed over the labeled pixel set only.

    ``labels`` is one-hot (n, K); ``labeled_rows`` indexes the labeled subset
    and may be empty, in which case the term is an exact constant zero (the
    fully-unsupervised setting).
    """
    from barrier_ext.autodiff import index_select

    tape = s.tape
    labeled_rows = np.asarray(labeled_rows, dtype=np.intp)
    if labeled_rows.size == 0:
        return tape.scalar(0.0)
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != s.shape:
        raise ValueError(f"labels shape {labels.shape} does not match softmax {s.shape}")
    y = labels[labeled_rows]
    if y.max(axis=1).min() <= 0.0:
        raise ValueError("every labeled row needs a positive one-hot entry")
    picked = index_select(s, axis=0, indices=labeled_rows)
    # y is one-hot: y*s + (1-y) is the target probability at target entries
    # and exactly 1 elsewhere, so the log never sees an irrelevant zero.
    inner = picked * tape.constant(y) + tape.constant(1.0 - y)
    return -(inner.log().sum())


def smooth_max(values: list[Var], sharpness: float) -> Var:
    """Log-sum-exp upper smooth max used by the phase-I feasibility search."""
    acc = (values[0] * sharpness).exp()
    for v in values[1:]:
        acc = acc + (v * sharpness).exp()
    return acc.log() * (1.0 / sharpness)


def phase1_feasible(
    params: dict[str, np.ndarray],
    problem: Problem,
    config: OptimizerConfig,
    delta: float = 1e-3,
    sharpness: float = 50.0,
    max_steps: int = 500,
) -> dict[str, np.ndarray]:
    """Find strictly feasible parameters (max_i f_i < -delta) or fail.

    Runs full-batch descent on the log-sum-exp smooth max of every scalar
    constraint across all items. Returns the input unchanged when it is
    already strictly feasible (trivially so with zero constraints).
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    optimizer = make_optimizer(config)
    with np.errstate(all="ignore"):
        for _ in range(max_steps + 1):
            tape = Tape(checked=False)
            param_vars = {k: tape.leaf(v) for k, v in params.items()}
            all_constraints: list[Var] = []
            for item in range(problem.n_items):
                _, constraints = problem.build(tape, param_vars, item)
                all_constraints.extend(constraints)
            if not all_constraints:
                return params
            worst = max(float(f.value) for f in all_constraints)
            if worst < -delta:
                return params
            objective = smooth_max(all_constraints, sharpness)
            _check_finite("phase-I objective", float(objective.value), epoch=-1)
            grads = tape.backward(objective)
            named = {k: grads[v] for k, v in param_vars.items()}
            _grads_finite(named, epoch=-1)
            optimizer.step(params, named)
    raise InfeasibleStartError(
        f"phase-I budget of {max_steps} steps exhausted with max constraint {worst:.6g} >= -{delta}"
    )
