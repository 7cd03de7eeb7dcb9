"""Sequential training with information-gain guided bit freezing.

Per task: train with every SGD step clipped into the frozen region, estimate
diagonal Fisher information on the task's training inputs, turn the Fisher
increase into an information gain (bits) per parameter, freeze that many
more leading bits, and re-anchor.

The frozen region kept per parameter is the intersection, over all past
tasks, of the cell in which ``quantize(theta, S_t)`` equals the anchor
``c_t`` recorded after task t. That makes frozen codes exact invariants,
which a symmetric interval of radius ``2**-S`` around ``c_t`` would not.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from blip.config import RunConfig
from blip.fisher import FisherVector, estimate_fisher, fisher_recursion
from blip.metrics import AccuracyMatrix, RunReport, frozen_bit_histogram
from blip.nn import (
    QUANTIZED,
    RAW,
    Batch,
    Network,
    NetworkSpec,
    ScheduleState,
    backward,
    bounded_sgd_step,
    loss_and_accuracy,
    lr_schedule,
)
from blip.quant import preserving_bounds, quantize_array
from blip.tasks import TaskData, TaskStream

log = logging.getLogger("blip")

DENOMINATOR_FLOOR = 1e-30
EQ8 = "eq8"
APPENDIX14 = "appendix14"


class RunFailed(RuntimeError):
    """A task failed; ``report`` holds everything completed before it."""

    def __init__(self, message: str, report: RunReport):
        super().__init__(message)
        self.report = report


@dataclass
class BlipState:
    frozen_bits: np.ndarray
    fisher: FisherVector
    anchors: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    total_bits: int
    f0: float
    task_index: int = 0
    theta_star: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def fresh(cls, net: Network, f0: float = 5e-16, total_bits: int = 20) -> "BlipState":
        scales = net.scale_vector()
        n = net.num_params
        return cls(
            frozen_bits=np.zeros(n, dtype=np.int8),
            fisher=FisherVector(np.full(n, f0)),
            anchors=np.zeros(n),
            lo=-scales,
            hi=scales.copy(),
            total_bits=total_bits,
            f0=f0,
        )


def info_gain(f_prev: FisherVector, f_t: FisherVector, t: int, formula: str = APPENDIX14) -> np.ndarray:
    """Information gain in bits from the Fisher increase of task ``t``.

    ``eq8``: ``0.5*log2((t*F_prev + F_t) / (t*F_prev))``, never negative.
    ``appendix14`` divides by ``(t+1)*F_prev`` instead and can go negative.
    Numerator and denominator are floored at 1e-30.
    """
    if t < 1:
        raise ValueError("t must be at least 1")
    prev = t * f_prev.values
    post = np.maximum(prev + f_t.values, DENOMINATOR_FLOOR)
    if formula == EQ8:
        denom = prev
    elif formula == APPENDIX14:
        denom = (t + 1) * f_prev.values
    else:
        raise ValueError(f"unknown formula {formula!r}")
    return 0.5 * np.log2(post / np.maximum(denom, DENOMINATOR_FLOOR))


def freeze_bits(ig: np.ndarray, frozen: np.ndarray, total_bits: int) -> np.ndarray:
    """Extra bits to freeze: ``ceil(ig)`` clamped to ``[0, N - S]``."""
    room = total_bits - np.asarray(frozen, dtype=np.int64)
    return np.clip(np.ceil(ig), 0, room).astype(np.int8)


def update_anchor(state: BlipState, net: Network, n_t: np.ndarray) -> BlipState:
    """Add ``n_t`` frozen bits, re-anchor at ``quantize(theta, S_new)`` and
    tighten the frozen region."""
    s_new = state.frozen_bits.astype(np.int64) + n_t
    if (s_new > state.total_bits).any():
        raise ValueError(f"frozen bits would exceed {state.total_bits}")
    s_new = s_new.astype(np.int8)
    theta = net.params
    for layer in net.layers:
        span = layer.span
        quantize_array(theta[span], s_new[span], layer.scale, out=state.anchors[span])
        lo, hi = preserving_bounds(state.anchors[span], s_new[span], layer.scale, state.total_bits)
        np.maximum(state.lo[span], lo, out=state.lo[span])
        np.minimum(state.hi[span], hi, out=state.hi[span])
    if (state.lo > state.hi).any():
        raise RuntimeError("frozen region became empty")
    # theta may sit within 2**-(N+2) of a cell edge; pull it inside
    np.clip(theta, state.lo, state.hi, out=theta)
    state.frozen_bits = s_new
    state.task_index += 1
    state.theta_star.append(theta.copy())
    return state


def freeze_backbone(state: BlipState, net: Network) -> None:
    """Pin every backbone parameter at its current value."""
    span = slice(0, net.backbone_size)
    state.lo[span] = net.params[span]
    state.hi[span] = net.params[span]


def active_mask(net: Network, task_id: int) -> np.ndarray:
    mask = np.zeros(net.num_params, dtype=bool)
    for span in net.active_slices(task_id):
        mask[span] = True
    return mask


def train_task(state: BlipState, net: Network, data: TaskData, config: RunConfig,
               rng: np.random.Generator) -> dict:
    """Minibatch SGD on one task until the plateau schedule stops.

    Every step is followed by clipping into the frozen region, so parameters
    with frozen bits never leave it.
    """
    if data.task_id != state.task_index + 1:
        raise ValueError(f"expected task {state.task_index + 1}, got {data.task_id}")
    opt = config.optim
    mode = QUANTIZED if config.quant.ste else RAW
    sched = ScheduleState(lr=opt.lr0, decay=opt.decay, patience=opt.patience,
                          lr_min=opt.lr_min, max_epochs=opt.max_epochs)
    spans = net.active_slices(data.task_id)
    grads = np.zeros_like(net.params)
    val_x, val_y = data.val.inputs(), data.val.labels
    start_loss, _ = loss_and_accuracy(net, val_x, val_y, data.task_id)
    n = len(data.train)
    stop = False
    while not stop:
        lr = sched.lr
        order = rng.permutation(n)
        running = 0.0
        for start in range(0, n, opt.batch):
            rows = order[start:start + opt.batch]
            batch = Batch(data.train.inputs(rows), data.train.labels[rows], data.task_id)
            loss, grads = backward(net, batch, mode, out=grads)
            if not np.isfinite(loss):
                raise FloatingPointError(f"diverged on task {data.task_id}: loss is {loss}")
            try:
                bounded_sgd_step(net, grads, lr, state.lo, state.hi, spans)
            except FloatingPointError as exc:
                raise FloatingPointError(f"{exc} on task {data.task_id}") from None
            running += loss * len(rows)
        val_loss, val_acc = loss_and_accuracy(net, val_x, val_y, data.task_id)
        _, stop = lr_schedule(sched, val_loss)
        log.info("task %d epoch %d lr %.3g train_loss %.5f val_loss %.5f val_acc %.4f",
                 data.task_id, sched.epoch, lr, running / n, val_loss, val_acc)
    return {"epochs": sched.epoch, "final_lr": sched.lr, "val_loss_start": start_loss,
            "val_loss_end": val_loss}


def _summary(ig: np.ndarray, n_t: np.ndarray, mask: np.ndarray, formula: str, total_bits: int) -> dict:
    active = ig[mask]
    return {
        "formula": formula,
        "active_params": int(mask.sum()),
        "ig_mean": float(active.mean()),
        "ig_min": float(active.min()),
        "ig_max": float(active.max()),
        "new_bits_histogram": np.bincount(n_t.astype(np.int64), minlength=total_bits + 1).tolist(),
    }


def learn_task(state: BlipState, net: Network, data: TaskData, config: RunConfig,
               rngs: dict[str, np.random.Generator]) -> dict:
    """Train on one task and apply the strategy's post-task update."""
    record = train_task(state, net, data, config, rngs["shuffle"])
    t = data.task_id
    n_t = np.zeros(net.num_params, dtype=np.int8)
    if config.strategy == "blip":
        mask = active_mask(net, t)
        f_t = estimate_fisher(net, data.train.inputs(), t, rngs["fisher"], config.blip.max_fisher_samples)
        ig = np.where(mask, info_gain(state.fisher, f_t, t, config.blip.formula), 0.0)
        n_t = freeze_bits(ig, state.frozen_bits, state.total_bits)
        n_t[~mask] = 0
        state.fisher = fisher_recursion(state.fisher, f_t, t, mask)
        record["ig"] = _summary(ig, n_t, mask, config.blip.formula, state.total_bits)
        update_anchor(state, net, n_t)
    else:
        if config.strategy == "ft_fix" and t == 1:
            freeze_backbone(state, net)
        state.task_index += 1
        state.theta_star.append(net.params.copy())
    return record


def evaluate(net: Network, stream: TaskStream, upto: int) -> list[float]:
    accs = []
    for task in stream.tasks[:upto]:
        _, acc = loss_and_accuracy(net, task.test.inputs(), task.test.labels, task.task_id)
        accs.append(acc)
    return accs


def make_rngs(seed: int) -> dict[str, np.random.Generator]:
    init, shuffle, fisher = np.random.SeedSequence(seed).spawn(3)
    return {"init": np.random.default_rng(init), "shuffle": np.random.default_rng(shuffle),
            "fisher": np.random.default_rng(fisher)}


def build_network(stream: TaskStream, config: RunConfig, rng: np.random.Generator) -> Network:
    spec = NetworkSpec(stream.tasks[0].input_dim, tuple(config.model.hidden_dims),
                       tuple(stream.head_specs), config.model.activation)
    return Network.build(spec, config.quant.range_c, config.quant.bits, rng)


def run_continual(stream: TaskStream, config: RunConfig, seed: int, observer=None) -> RunReport:
    """Learn every task of ``stream`` in order and fill the accuracy matrix.

    ``observer(task_id, net, state)`` is called after each task (for checks
    that need live state). On failure a :class:`RunFailed` carries the
    partial report.
    """
    if len(stream) == 0:
        raise ValueError("empty task stream")
    rngs = make_rngs(seed)
    net = build_network(stream, config, rngs["init"])
    state = BlipState.fresh(net, config.blip.f0, config.quant.bits)
    echo = config.to_dict()
    echo["seeds"] = [seed]
    report = RunReport(config=echo, seed=seed, layers=list(net.layers), total_bits=config.quant.bits,
                       matrix=AccuracyMatrix(len(stream)))
    for task in stream.tasks:
        began = time.perf_counter()
        s_before = state.frozen_bits.copy()
        try:
            record = learn_task(state, net, task, config, rngs)
        except (FloatingPointError, ValueError, RuntimeError) as exc:
            report.status = "failed"
            report.error = f"task {task.task_id}: {exc}"
            raise RunFailed(report.error, report) from exc
        row = evaluate(net, stream, task.task_id)
        report.matrix.add_row(row)
        record.update(
            task_id=task.task_id,
            description=task.description,
            accuracies=row,
            frozen_histogram=frozen_bit_histogram(s_before, state.frozen_bits, net.layers, state.total_bits),
            total_frozen_bits=int(state.frozen_bits.sum(dtype=np.int64)),
        )
        report.tasks.append(record)
        report.frozen_bits.append(state.frozen_bits.copy())
        report.wall_clock.append(time.perf_counter() - began)
        log.info("task %d done: accuracies %s, frozen bits %d", task.task_id,
                 " ".join(f"{a:.4f}" for a in row), record["total_frozen_bits"])
        if observer is not None:
            observer(task.task_id, net, state)
    return report
