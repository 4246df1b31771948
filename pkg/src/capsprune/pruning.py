"""Primary-capsule saliency, ranking, survivor selection and the prune/fine-tune loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .capsnet import CapsNetModel, accuracy, forward
from .errors import ArgumentError, DimensionError, InvariantError
from .flops import flops_pc_transform, flops_routing
from .training import Adam, batches, loss_and_grads, train

log = logging.getLogger(__name__)

CRITERIA = ("taylor", "min_weight", "activation")


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, T.Tensor) else x, dtype=np.float64)


# ---------------------------------------------------------------- saliency


TAYLOR_ABS = ("batch", "sample")


def taylor_score_batch(pc_activations, pc_grads, abs_mode: str = "batch") -> np.ndarray:
    """First-order saliency of each primary capsule.

    ``abs_mode="batch"`` gives ``|sum_{samples,dims} a * dL/da| / N``, the
    first-order estimate of the change in batch loss when the capsule is
    removed.  ``abs_mode="sample"`` takes the absolute value per sample before
    averaging.  ``pc_grads`` are per-sample loss gradients (i.e. of the
    batch-summed loss).
    """
    if abs_mode not in TAYLOR_ABS:
        raise ArgumentError(f"abs_mode must be one of {TAYLOR_ABS}, got {abs_mode!r}")
    a, g = _arr(pc_activations), _arr(pc_grads)
    if a.shape != g.shape or a.ndim != 3:
        raise DimensionError(f"activations {a.shape} and gradients {g.shape} must both be [N, n, d]")
    per_sample = (a * g).sum(axis=2)
    if abs_mode == "sample":
        return np.abs(per_sample).mean(axis=0)
    return np.abs(per_sample.sum(axis=0)) / a.shape[0]


def min_weight_score(transform_bank, pc_index: int) -> float:
    """L2 norm of one capsule's transform matrices across all classes."""
    w = _arr(transform_bank)
    if not 0 <= pc_index < w.shape[0]:
        raise ArgumentError(f"capsule row {pc_index} out of range [0, {w.shape[0]})")
    return float(np.sqrt((w[pc_index] ** 2).sum()))


def min_weight_scores(transform_bank) -> np.ndarray:
    w = _arr(transform_bank)
    return np.sqrt((w ** 2).reshape(w.shape[0], -1).sum(axis=1))


def activation_score_batch(pc_activations) -> np.ndarray:
    """Mean absolute activation per capsule over samples and dimensions."""
    a = _arr(pc_activations)
    return np.abs(a).mean(axis=(0, 2))


# ---------------------------------------------------------------- ranking


@dataclass(frozen=True)
class PruneRanking:
    indices: np.ndarray   # original capsule indices, survivor order
    scores: np.ndarray    # accumulated non-negative saliency
    batches_seen: int = 0

    @classmethod
    def empty(cls, indices) -> "PruneRanking":
        idx = np.asarray(indices, dtype=np.int64)
        return cls(idx, np.zeros(len(idx)), 0)

    @property
    def n_remaining(self) -> int:
        return len(self.indices)

    def as_dict(self) -> dict:
        return {int(i): float(s) for i, s in zip(self.indices, self.scores)}


def accumulate(ranking: PruneRanking, batch_scores: Union[Mapping[int, float], Sequence[float], np.ndarray]) -> PruneRanking:
    if isinstance(batch_scores, Mapping):
        if set(batch_scores) != set(int(i) for i in ranking.indices):
            raise InvariantError("batch scores are keyed differently from the ranking")
        s = np.array([batch_scores[int(i)] for i in ranking.indices], dtype=np.float64)
    else:
        s = np.asarray(batch_scores, dtype=np.float64)
        if s.shape != ranking.scores.shape:
            raise InvariantError(f"{s.shape[0] if s.ndim else 0} scores for {ranking.n_remaining} capsules")
    if np.any(s < 0):
        raise InvariantError("saliency scores must be non-negative")
    return PruneRanking(ranking.indices, ranking.scores + s, ranking.batches_seen + 1)


def normalize(ranking: PruneRanking) -> dict:
    """Accumulated scores divided by ``n_remaining * batches_seen``."""
    if ranking.batches_seen < 1:
        raise InvariantError("cannot normalize a ranking that has seen no batches")
    denom = ranking.n_remaining * ranking.batches_seen
    return {int(i): float(s) / denom for i, s in zip(ranking.indices, ranking.scores)}


def select_prune_targets(values: Union[Mapping[int, float], PruneRanking], k: int) -> list:
    """The ``k`` lowest-valued capsules; ties go to the smaller original index."""
    if isinstance(values, PruneRanking):
        values = values.as_dict()
    n = len(values)
    if k < 0:
        raise ArgumentError("k must be >= 0")
    if k >= n:
        raise ArgumentError(f"cannot remove {k} of {n} capsules; at least one must survive")
    idx = np.fromiter(values.keys(), dtype=np.int64, count=n)
    val = np.fromiter(values.values(), dtype=np.float64, count=n)
    order = np.lexsort((idx, val))
    return sorted(int(i) for i in idx[order[:k]])


def apply_prune(model: CapsNetModel, targets) -> CapsNetModel:
    """Drop ``targets`` (original indices) from the survivors and the transform bank."""
    targets = np.asarray(sorted(set(int(t) for t in targets)), dtype=np.int64)
    if len(targets) == 0:
        return model.copy()
    keep = ~np.isin(model.survivors, targets)
    missing = np.setdiff1d(targets, model.survivors)
    if len(missing):
        raise ArgumentError(f"capsules {missing.tolist()} are not surviving")
    if not keep.any():
        raise ArgumentError("pruning would remove every capsule")
    params = dict(model.params)
    params["transform"] = T.Tensor._wrap(
        np.ascontiguousarray(model.params["transform"].data[keep]), requires_grad=True
    )
    return CapsNetModel(model.config, params, model.survivors[keep])


# ---------------------------------------------------------------- schedule


@dataclass(frozen=True)
class PruneSchedule:
    phases: tuple            # ((step, floor), ...)
    finetune_epochs: int = 50
    warmup_epochs: int = 1

    def __post_init__(self):
        phases = tuple((int(s), int(f)) for s, f in self.phases)
        object.__setattr__(self, "phases", phases)
        if not phases:
            raise ArgumentError("schedule needs at least one phase")
        if any(s <= 0 for s, _ in phases):
            raise ArgumentError("phase step sizes must be positive")
        floors = [f for _, f in phases]
        if floors[-1] < 1 or any(b >= a for a, b in zip(floors, floors[1:])):
            raise ArgumentError("phase floors must be strictly decreasing and >= 1")
        if self.warmup_epochs < 1:
            raise ArgumentError("warmup_epochs must be >= 1")
        if self.finetune_epochs < 0:
            raise ArgumentError("finetune_epochs must be >= 0")

    def events(self, n_start: int) -> list:
        """Number of capsules removed at each prune event, starting from ``n_start``."""
        out, rem = [], n_start
        for step, floor in self.phases:
            if floor >= rem:
                raise ArgumentError(f"phase floor {floor} is not below the {rem} remaining capsules")
            if step >= rem:
                raise ArgumentError(f"phase step {step} is not smaller than the {rem} remaining capsules")
            while rem > floor:
                k = min(step, rem - floor)
                out.append(k)
                rem -= k
        return out

    def to_string(self) -> str:
        return ",".join(f"{s}:{f}" for s, f in self.phases)


def parse_schedule(text: str, finetune_epochs: int = 50, warmup_epochs: int = 1) -> PruneSchedule:
    """Parse ``"step:floor,step:floor"``, e.g. ``"100:52,10:2"``."""
    try:
        phases = [tuple(int(v) for v in part.split(":")) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ArgumentError(f"bad schedule {text!r}; expected step:floor[,step:floor...]") from None
    if any(len(p) != 2 for p in phases):
        raise ArgumentError(f"bad schedule {text!r}; expected step:floor[,step:floor...]")
    return PruneSchedule(tuple(phases), finetune_epochs, warmup_epochs)


def default_schedule(n_pcs: int, finetune_epochs: int = 50) -> PruneSchedule:
    """Remove 100 per event while whole hundreds remain, then 10 at a time."""
    phases, rem = [], n_pcs
    for step in (100, 10):
        floor = rem % step or step
        if floor < rem:
            phases.append((step, floor))
            rem = floor
    if not phases:
        phases.append((1, max(1, n_pcs // 2)))
    return PruneSchedule(tuple(phases), finetune_epochs)


# ---------------------------------------------------------------- loop


def score_epoch(
    model: CapsNetModel,
    data,
    criterion: str,
    *,
    batch_size: int = 64,
    ranking: Optional[PruneRanking] = None,
    update_weights: bool = False,
    opt: Optional[Adam] = None,
    seed: int = 0,
    abs_mode: str = "batch",
) -> PruneRanking:
    """One pass over ``data`` accumulating a saliency score per surviving capsule.

    Weights stay frozen unless ``update_weights`` is set, in which case an
    optimizer step follows the scoring of every batch.
    """
    if criterion not in CRITERIA:
        raise ArgumentError(f"unknown criterion {criterion!r}; choose from {CRITERIA}")
    if len(data) == 0:
        raise ArgumentError("scoring needs a non-empty dataset")
    ranking = ranking if ranking is not None else PruneRanking.empty(model.survivors)
    if update_weights and opt is None:
        opt = Adam()
    rng = np.random.Generator(np.random.Philox(seed)) if update_weights else None
    if criterion == "min_weight" and not update_weights:
        return accumulate(ranking, min_weight_scores(model.params["transform"]))
    for idx in batches(len(data), batch_size, rng):
        images, labels = data.images[idx], data.labels[idx]
        if criterion == "taylor" or update_weights:
            _, out = loss_and_grads(model, images, labels)
        else:
            out = forward(model, images)
        a = out.pc_activations
        if criterion == "taylor":
            s = taylor_score_batch(a, a.grad * len(idx), abs_mode)
        elif criterion == "activation":
            s = activation_score_batch(a)
        else:
            s = min_weight_scores(model.params["transform"])
        ranking = accumulate(ranking, s)
        if update_weights:
            opt.step(model)
    return ranking


def fine_tune(model: CapsNetModel, train_set, test_set, epochs: int, **kw) -> tuple[CapsNetModel, float]:
    """Continue training; returns the best-test-accuracy parameters and that accuracy."""
    if epochs < 0:
        raise ArgumentError("epochs must be >= 0")
    best, hist = train(model, train_set, test_set, epochs, **kw)
    return best, hist.best_acc


@dataclass
class PruneRecord:
    n_remaining: int
    best_accuracy: float
    flops_pc: int
    flops_routing: int
    wall_time_s: float
    removed: list = field(default_factory=list)


def prune_loop(
    model: CapsNetModel,
    train_set,
    test_set,
    schedule: PruneSchedule,
    criterion: str = "taylor",
    *,
    batch_size: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
    scoring_updates: bool = False,
    abs_mode: str = "batch",
    on_event: Optional[Callable[[PruneRecord, CapsNetModel], None]] = None,
) -> tuple[CapsNetModel, list]:
    """Score, prune and fine-tune until the last phase floor; one record per prune event."""
    if criterion not in CRITERIA:
        raise ArgumentError(f"unknown criterion {criterion!r}; choose from {CRITERIA}")
    if len(train_set) == 0 or len(test_set) == 0:
        raise ArgumentError("prune_loop needs non-empty train and test sets")
    c = model.config
    records = []
    for event, k in enumerate(schedule.events(model.n_surviving)):
        t0 = time.perf_counter()
        ranking = None
        opt = Adam(lr) if scoring_updates else None
        for w in range(schedule.warmup_epochs):
            ranking = score_epoch(model, train_set, criterion, batch_size=batch_size, ranking=ranking,
                                  update_weights=scoring_updates, opt=opt, seed=seed + 7919 * event + w,
                                  abs_mode=abs_mode)
        targets = select_prune_targets(normalize(ranking), k)
        model = apply_prune(model, targets)
        model, acc = fine_tune(model, train_set, test_set, schedule.finetune_epochs,
                               batch_size=batch_size, lr=lr, seed=seed + event + 1)
        n = model.n_surviving
        rec = PruneRecord(
            n_remaining=n,
            best_accuracy=acc,
            flops_pc=flops_pc_transform(n, c.pc_dim, c.out_caps_dim),
            flops_routing=flops_routing(n, c.num_classes, c.out_caps_dim, c.routing_iters),
            wall_time_s=time.perf_counter() - t0,
            removed=targets,
        )
        log.info("pruned %d -> %d capsules, best accuracy %.4f", n + k, n, acc)
        records.append(rec)
        if on_event is not None:
            on_event(rec, model)
    return model, records


def exact_removal_deltas(model: CapsNetModel, images, labels, batch_size: int = 256) -> np.ndarray:
    """``|L(without capsule i) - L|`` for each surviving capsule, by zeroing its predictions."""
    n = model.n_surviving

    def total_loss(mask):
        tot = 0.0
        for i in range(0, len(labels), batch_size):
            out = forward(model, images[i:i + batch_size], labels[i:i + batch_size], pc_mask=mask)
            tot += out.loss.item() * len(labels[i:i + batch_size])
        return tot / len(labels)

    base = total_loss(np.ones(n))
    deltas = np.empty(n)
    for i in range(n):
        mask = np.ones(n)
        mask[i] = 0.0
        deltas[i] = abs(total_loss(mask) - base)
    return deltas


def taylor_scores(model: CapsNetModel, data, batch_size: int = 64, abs_mode: str = "batch") -> np.ndarray:
    """Normalized Taylor ranking values in survivor order."""
    r = score_epoch(model, data, "taylor", batch_size=batch_size, abs_mode=abs_mode)
    vals = normalize(r)
    return np.array([vals[int(i)] for i in r.indices])
