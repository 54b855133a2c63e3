"""Training objectives, gradient verification, and the toy SGD loop.

The objective is the weighted sum of three geometric terms:

* trajectory regression: mean squared error over valid steps,
* temporal smoothness: mean squared second difference of the prediction,
* identity consistency: cosine pull/push on slot pairs across turns.

All gradients are handwritten reverse-mode (see model.dialogue_backward);
`grad_check` verifies every parameter block against central finite
differences. In the detached-anchor mode the finite-difference probe holds
the anchors frozen at their base values so that both sides measure the
same partial derivative.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import TrajectoryPrediction
from .encoding import FourierTimeConfig
from .model import (
    ModelDims,
    ModelParams,
    TrainSample,
    TurnTask,
    TokenArrays,
    dialogue_backward,
    dialogue_forward,
    zero_grads,
)
from .state import identity_consistency_loss_grad

__all__ = [
    "LossWeights",
    "TrainConfig",
    "GradCheckReport",
    "DivergenceError",
    "trajectory_loss",
    "smoothness_loss",
    "total_loss",
    "batch_loss",
    "grad_check",
    "make_gradcheck_batch",
    "train_toy",
    "TrainResult",
]


class DivergenceError(RuntimeError):
    """Raised when the training loss explodes or becomes non-finite."""


@dataclass(frozen=True)
class LossWeights:
    traj: float = 1.0
    smooth: float = 0.1
    identity: float = 0.1

    def __post_init__(self):
        vals = (self.traj, self.smooth, self.identity)
        if any(not np.isfinite(v) or v < 0 for v in vals):
            raise ValueError(f"loss weights must be nonnegative and finite, got {vals}")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    iterations: int = 2000
    batch_size: int = 8
    seed: int = 0
    detach_anchor: bool = False
    hidden: int = 32
    num_frequencies: int = 8
    weights: LossWeights = field(default_factory=LossWeights)
    identity_margin: float = 0.5
    divergence_limit: float = 1e6

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.iterations < 0:
            raise ValueError("learning_rate/batch_size must be positive, iterations >= 0")


# ---------------------------------------------------------------------------
# individual loss terms


def _traj_loss_arrays(points: np.ndarray, target: np.ndarray, valid: np.ndarray):
    v = np.asarray(valid, dtype=bool)
    n_valid = int(v.sum())
    if n_valid == 0:
        return 0.0, 0
    diff = points[v] - np.asarray(target, dtype=np.float64)[v]
    return float(np.sum(diff * diff)) / n_valid, n_valid


def _traj_loss_grad(points, target, valid) -> np.ndarray:
    v = np.asarray(valid, dtype=bool)
    g = np.zeros_like(points)
    n_valid = int(v.sum())
    if n_valid:
        g[v] = 2.0 * (points[v] - target[v]) / n_valid
    return g


def _smooth_loss_arrays(points: np.ndarray) -> float:
    h = points.shape[0]
    if h < 3:
        return 0.0
    second = points[2:] - 2.0 * points[1:-1] + points[:-2]
    return float(np.mean(np.sum(second * second, axis=1)))


def _smooth_loss_grad(points: np.ndarray) -> np.ndarray:
    h = points.shape[0]
    g = np.zeros_like(points)
    if h < 3:
        return g
    second = points[2:] - 2.0 * points[1:-1] + points[:-2]
    d2 = 2.0 * second / (h - 2)
    g[2:] += d2
    g[1:-1] -= 2.0 * d2
    g[:-2] += d2
    return g


def trajectory_loss(pred: TrajectoryPrediction, target, valid) -> float:
    """Mean over valid steps of the squared error; 0 if no step is valid."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.points.shape:
        raise ValueError(f"target shape {target.shape} != prediction {pred.points.shape}")
    loss, _ = _traj_loss_arrays(pred.points, target, valid)
    return loss


def smoothness_loss(pred: TrajectoryPrediction) -> float:
    """Mean squared second difference over interior steps; 0 when H < 3."""
    return _smooth_loss_arrays(pred.points)


# ---------------------------------------------------------------------------
# batch loss with gradients


def _collect_identity_pairs(slot_entries):
    """All cross pairs among geometric turns, keyed by target identity.

    slot_entries: list of (sample_idx, turn_idx, key, slot_vec), in batch
    order. Returns (same_pairs, diff_pairs) as index pairs into the list.
    """
    same, diff = [], []
    for i in range(len(slot_entries)):
        for j in range(i + 1, len(slot_entries)):
            if slot_entries[i][2] == slot_entries[j][2]:
                same.append((i, j))
            else:
                diff.append((i, j))
    return same, diff


def batch_loss(
    params: ModelParams,
    samples: list[TrainSample],
    weights: LossWeights,
    detach_anchor: bool = False,
    anchor_overrides: dict | None = None,
    state_overrides: dict | None = None,
    compute_grads: bool = True,
    identity_margin: float = 0.5,
):
    """Total loss, per-term breakdown, and (optionally) parameter grads.

    anchor_overrides maps (sample_idx, turn_idx, step) -> constant anchor;
    state_overrides maps sample_idx -> per-turn (prev slot, pool weights)
    constants. Both exist for the finite-difference probes, which must
    evaluate the loss under the same stop-gradient semantics the analytic
    backward implements (frozen cross-turn state; frozen anchors when the
    anchor path is detached).
    """
    records = []
    for si, sample in enumerate(samples):
        overrides = None
        if anchor_overrides is not None:
            overrides = {
                (ti, h): v for (s, ti, h), v in anchor_overrides.items() if s == si
            }
        records.append(dialogue_forward(
            params, sample.tokens, sample.turns, history="self",
            anchor_overrides=overrides,
            state_overrides=None if state_overrides is None else state_overrides[si]))

    geom_items = []  # (sample_idx, turn_idx, points, gt, valid)
    slot_entries = []  # (sample_idx, turn_idx, key, slot_vec)
    zero_valid_warnings = 0
    for si, (sample, rec) in enumerate(zip(samples, records)):
        for ti, turn in enumerate(sample.turns):
            if turn.geometric and turn.gt_points is not None:
                valid = np.asarray(turn.gt_valid, dtype=bool)
                if not valid.any():
                    zero_valid_warnings += 1
                geom_items.append((si, ti, rec.turns[ti].decoded.points,
                                   np.asarray(turn.gt_points, dtype=np.float64), valid))
            if turn.geometric and turn.target_key is not None:
                slot_entries.append((si, ti, turn.target_key, rec.turns[ti].slot))

    n_items = len(geom_items)
    l_traj = 0.0
    l_smooth = 0.0
    if n_items:
        for _, _, pts, gt, valid in geom_items:
            l_traj += _traj_loss_arrays(pts, gt, valid)[0]
            l_smooth += _smooth_loss_arrays(pts)
        l_traj /= n_items
        l_smooth /= n_items

    same_idx, diff_idx = _collect_identity_pairs(slot_entries)
    same_pairs = [(slot_entries[i][3], slot_entries[j][3]) for i, j in same_idx]
    diff_pairs = [(slot_entries[i][3], slot_entries[j][3]) for i, j in diff_idx]
    l_id, same_grads, diff_grads = identity_consistency_loss_grad(
        same_pairs, diff_pairs, margin=identity_margin)

    total = weights.traj * l_traj + weights.smooth * l_smooth + weights.identity * l_id
    breakdown = {
        "total": float(total), "traj": float(l_traj), "smooth": float(l_smooth),
        "identity": float(l_id), "zero_valid_turns": zero_valid_warnings,
    }
    if not compute_grads:
        return total, breakdown, None

    grads = zero_grads(params)
    d_points_by = {}
    for si, ti, pts, gt, valid in geom_items:
        dp = (weights.traj * _traj_loss_grad(pts, gt, valid)
              + weights.smooth * _smooth_loss_grad(pts)) / n_items
        d_points_by[(si, ti)] = dp
    d_slots_by = {}
    for (i, j), (ga, gb) in zip(same_idx + diff_idx, same_grads + diff_grads):
        for k, g in ((i, ga), (j, gb)):
            si, ti = slot_entries[k][0], slot_entries[k][1]
            key = (si, ti)
            d_slots_by[key] = d_slots_by.get(key, 0.0) + weights.identity * g

    for si, (sample, rec) in enumerate(zip(samples, records)):
        d_points = [d_points_by.get((si, ti)) for ti in range(len(sample.turns))]
        d_slots = [d_slots_by.get((si, ti)) for ti in range(len(sample.turns))]
        dialogue_backward(params, rec, d_points, d_slots, grads,
                          detach_anchor=detach_anchor)
    return total, breakdown, grads


def total_loss(batch: list[TrainSample], params: ModelParams, weights: LossWeights):
    """Forward-only objective with per-term breakdown."""
    total, breakdown, _ = batch_loss(params, batch, weights, compute_grads=False)
    return total, breakdown


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    block_errors: dict[str, float]
    block_grad_norms: dict[str, float]
    passed: bool
    tolerance: float
    step: float
    detach_anchor: bool
    worst_block: str
    failures: list[str]

    def summary_lines(self) -> list[str]:
        lines = []
        for name, err in self.block_errors.items():
            status = "ok" if err < self.tolerance else "FAIL"
            lines.append(f"{status:4s} {name:14s} max_rel_err={err:.3e} "
                         f"|grad|={self.block_grad_norms[name]:.3e}")
        mode = "detached" if self.detach_anchor else "attached"
        lines.append(f"anchor mode: {mode}; worst block {self.worst_block}; "
                     f"{'PASS' if self.passed else 'FAIL'}")
        return lines


def _collect_probe_state(params, samples):
    """Base-parameter recurrent state and anchors for the FD probes."""
    anchor_overrides = {}
    state_overrides = {}
    for si, sample in enumerate(samples):
        rec = dialogue_forward(params, sample.tokens, sample.turns, history="self")
        state_overrides[si] = [
            (tr.slot_cache["prev"].copy(), tr.pool_w.copy()) for tr in rec.turns
        ]
        for ti, turn_rec in enumerate(rec.turns):
            if turn_rec.decoded is not None:
                for h in range(turn_rec.decoded.anchors.shape[0]):
                    anchor_overrides[(si, ti, h)] = turn_rec.decoded.anchors[h].copy()
    return anchor_overrides, state_overrides


def grad_check(
    params: ModelParams,
    samples: list[TrainSample],
    weights: LossWeights | None = None,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    detach_anchor: bool = False,
    corrupt_block: str | None = None,
) -> GradCheckReport:
    """Central finite differences vs handwritten gradients, per block.

    Relative error uses a max(1, |analytic|) denominator. `corrupt_block`
    is a test hook that inflates one block's analytic gradient by 10% so an
    injected fault must be caught.
    """
    weights = weights or LossWeights()
    base_loss, _, grads = batch_loss(params, samples, weights,
                                     detach_anchor=detach_anchor)
    if not np.isfinite(base_loss):
        return GradCheckReport(
            block_errors={}, block_grad_norms={}, passed=False,
            tolerance=tolerance, step=step, detach_anchor=detach_anchor,
            worst_block="<loss non-finite>", failures=["loss is non-finite"])
    if corrupt_block is not None:
        if corrupt_block not in grads:
            raise ValueError(f"unknown block {corrupt_block!r}")
        grads[corrupt_block] = grads[corrupt_block] * 1.1

    anchor_ovr, state_ovr = _collect_probe_state(params, samples)
    if not detach_anchor:
        anchor_ovr = None

    def probe_loss():
        loss, _, _ = batch_loss(params, samples, weights,
                                anchor_overrides=anchor_ovr,
                                state_overrides=state_ovr, compute_grads=False)
        return loss

    blocks = params.blocks()
    block_errors: dict[str, float] = {}
    block_norms: dict[str, float] = {}
    failures: list[str] = []
    for name, arr in blocks.items():
        g = grads[name]
        block_norms[name] = float(np.linalg.norm(g))
        max_err = 0.0
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = probe_loss()
            flat[i] = orig - step
            f_minus = probe_loss()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            if not np.isfinite(fd):
                failures.append(f"{name}: non-finite finite-difference probe")
                max_err = np.inf
                break
            err = abs(gflat[i] - fd) / max(1.0, abs(gflat[i]))
            max_err = max(max_err, err)
        block_errors[name] = max_err
        if max_err >= tolerance:
            failures.append(f"{name}: max relative error {max_err:.3e}")
    worst = max(block_errors, key=block_errors.get) if block_errors else "<none>"
    return GradCheckReport(
        block_errors=block_errors, block_grad_norms=block_norms,
        passed=not failures, tolerance=tolerance, step=step,
        detach_anchor=detach_anchor, worst_block=worst, failures=failures)


def make_gradcheck_batch(
    dims: ModelDims,
    seed: int = 0,
    n_clips: int = 2,
    n_tokens: int = 6,
    parallel_rays: bool = False,
) -> list[TrainSample]:
    """Small random batch exercising every gradient path.

    Two clips querying different targets give the identity loss both a
    same-target and a different-target pair; one non-geometric turn checks
    that the slot path alone still backpropagates. With `parallel_rays` all
    ray directions coincide so every anchor takes the degenerate fallback.
    """
    rng = np.random.default_rng([int(seed), 0xFD])
    samples = []
    for c in range(n_clips):
        if parallel_rays:
            dirs = np.tile(np.array([0.0, 0.0, 1.0]), (n_tokens, 1))
        else:
            dirs = rng.normal(size=(n_tokens, 3))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        origins = rng.normal(0.0, 2.0, (n_tokens, 3))
        moments = np.cross(origins, dirs)
        tok = TokenArrays(
            features=rng.normal(0.0, 1.0, (n_tokens, dims.token_dim)),
            ray6=np.concatenate([dirs, moments], axis=1),
            dirs=dirs, origins=origins,
            times=np.linspace(0.0, 2.0, n_tokens),
        )
        key = "tgt_a" if c % 2 == 0 else "tgt_b"
        turns = [
            TurnTask(question=f"track target {key}", geometric=True,
                     gt_points=rng.normal(0.0, 1.0, (dims.horizon, 3)),
                     gt_valid=np.array([True, True, False, True][:dims.horizon]
                                       + [True] * max(0, dims.horizon - 4)),
                     target_key=key),
            TurnTask(question="describe the scene", geometric=False,
                     question_type="scene-level"),
            TurnTask(question="where does it go next", geometric=True,
                     gt_points=rng.normal(0.0, 1.0, (dims.horizon, 3)),
                     gt_valid=np.ones(dims.horizon, dtype=bool),
                     target_key=key),
        ]
        samples.append(TrainSample(clip_id=f"grad_{c}", tokens=tok, turns=turns))
    return samples


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params: ModelParams
    curve: list[tuple[int, float, float, float, float]]  # iter, total, traj, smooth, id
    initial_traj: float
    final_traj: float


def train_toy(
    config: TrainConfig,
    dataset: list[TrainSample],
    dims: ModelDims | None = None,
) -> TrainResult:
    """Plain SGD on the combined objective; deterministic given the seed.

    The time-frequency ladder is derived from the dataset's timestamp span
    (geometric spectrum with base period covering the longest clip).
    """
    if not dataset:
        raise ValueError("dataset is empty")
    token_dim = dataset[0].tokens.token_dim
    if dims is None:
        dims = ModelDims(token_dim=token_dim, num_frequencies=config.num_frequencies,
                         hidden=config.hidden)
    span = max(float(s.tokens.times.max() - s.tokens.times.min()) for s in dataset)
    time_cfg = FourierTimeConfig.geometric(dims.num_frequencies, max(span, 1.0))
    params = ModelParams.init(dims, time_cfg, seed=config.seed)
    rng = np.random.default_rng([int(config.seed), 0x5A11])
    blocks = params.blocks()

    curve = []
    initial_traj = None
    final_traj = 0.0
    for it in range(config.iterations):
        idx = rng.integers(0, len(dataset), size=min(config.batch_size, len(dataset)))
        batch = [dataset[i] for i in idx]
        loss, breakdown, grads = batch_loss(
            params, batch, config.weights, detach_anchor=config.detach_anchor,
            identity_margin=config.identity_margin)
        if not np.isfinite(loss) or loss > config.divergence_limit:
            raise DivergenceError(
                f"iteration {it}: loss {loss!r} exceeds limit "
                f"{config.divergence_limit:g} (traj={breakdown['traj']:.3g}, "
                f"smooth={breakdown['smooth']:.3g}, id={breakdown['identity']:.3g})")
        if initial_traj is None:
            initial_traj = breakdown["traj"]
        final_traj = breakdown["traj"]
        for name, g in grads.items():
            blocks[name] -= config.learning_rate * g
        curve.append((it, breakdown["total"], breakdown["traj"],
                      breakdown["smooth"], breakdown["identity"]))
    return TrainResult(params=params, curve=curve,
                       initial_traj=initial_traj if initial_traj is not None else 0.0,
                       final_traj=final_traj)
