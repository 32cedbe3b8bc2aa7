"""Training objective, training loop, error metrics, and the
generalization-bound calculator for ellipsoidal inverse perception contracts.

A contract maps nine camera-frame features (velocity, angular velocity, and
the perceived target position, which fills the last three slots) to an
ellipsoid intended to contain the ground-truth target position. Training
minimizes a hinge surrogate of the miss indicator plus a log-determinant
volume penalty.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import dataclass

import numpy as np

from . import jsonio, mlp
from .geometry import DET_FLOOR, Ellipsoid

# Order of the nine network inputs; hashed into frame fingerprints so a
# contract is never evaluated against features it was not trained on.
FEATURE_DESCRIPTOR = "v_c(3),omega_c(3),yhat_c(3)"

MODEL_FORMAT = 1

# Gauge values below this are treated as exactly centered; the norm has no
# usable gradient there.
_GAUGE_EPS = 1e-12


class TrainingDiverged(RuntimeError):
    """A loss term became non-finite; .term names the offending component."""

    def __init__(self, term: str, epoch: int, batch_index: int):
        super().__init__(
            f"{term} loss became non-finite at epoch {epoch}, batch {batch_index}"
        )
        self.term = term
        self.epoch = epoch
        self.batch_index = batch_index


class DegeneracyWarning(UserWarning):
    """More than 10% of a batch hit the determinant floor."""


@dataclass(frozen=True)
class Sample:
    """One training record: camera-frame features, ground truth, perceived value."""

    state_c: np.ndarray      # (9,) features: v_c, omega_c, yhat_c
    truth_c: np.ndarray      # (3,) ground-truth target position, camera frame
    perceived_c: np.ndarray  # (3,) perceived target position, camera frame

    def __post_init__(self):
        state = np.asarray(self.state_c, dtype=float)
        truth = np.asarray(self.truth_c, dtype=float)
        perceived = np.asarray(self.perceived_c, dtype=float)
        if state.shape != (9,) or truth.shape != (3,) or perceived.shape != (3,):
            raise ValueError("sample fields must be 9-, 3-, and 3-vectors")
        if not (
            np.all(np.isfinite(state))
            and np.all(np.isfinite(truth))
            and np.all(np.isfinite(perceived))
        ):
            raise ValueError("sample entries must be finite")
        object.__setattr__(self, "state_c", state)
        object.__setattr__(self, "truth_c", truth)
        object.__setattr__(self, "perceived_c", perceived)


@dataclass
class TrainConfig:
    """Training knobs. alpha/lambda defaults give a deliberately conservative
    contract; see recipes.py for the tuned experiment configuration."""

    alpha: float = 0.1        # hinge sharpness
    lam: float = 1e-3         # volume-penalty weight
    lr: float = 0.001
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    train_fraction: float = 0.9
    slope: float = 0.01       # leaky-rectifier slope of the network
    beta1: float = 0.9        # Adam first-moment decay
    beta2: float = 0.999      # Adam second-moment decay
    # Optional settle phase: the last settle_epochs epochs run with the batch
    # size multiplied by settle_batch_factor, damping optimizer dither without
    # touching the learning rate.
    settle_epochs: int = 0
    settle_batch_factor: int = 8

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError("train_fraction must be in (0, 1]")
        if self.slope <= 0 or self.slope >= 1:
            raise ValueError("slope must be in (0, 1)")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError("Adam betas must be in [0, 1)")
        if self.settle_epochs < 0 or self.settle_epochs > self.epochs:
            raise ValueError("settle_epochs must be in [0, epochs]")
        if self.settle_batch_factor < 1:
            raise ValueError("settle_batch_factor must be >= 1")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "lambda": self.lam,
            "lr": self.lr,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "train_fraction": self.train_fraction,
            "slope": self.slope,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "settle_epochs": self.settle_epochs,
            "settle_batch_factor": self.settle_batch_factor,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        base = cls()
        return cls(
            alpha=float(doc.get("alpha", base.alpha)),
            lam=float(doc.get("lambda", base.lam)),
            lr=float(doc.get("lr", base.lr)),
            epochs=int(doc.get("epochs", base.epochs)),
            batch_size=int(doc.get("batch_size", base.batch_size)),
            seed=int(doc.get("seed", base.seed)),
            train_fraction=float(doc.get("train_fraction", base.train_fraction)),
            slope=float(doc.get("slope", base.slope)),
            beta1=float(doc.get("beta1", base.beta1)),
            beta2=float(doc.get("beta2", base.beta2)),
            settle_epochs=int(doc.get("settle_epochs", base.settle_epochs)),
            settle_batch_factor=int(doc.get("settle_batch_factor", base.settle_batch_factor)),
        )


def net_input(state_c, perceived_c) -> np.ndarray:
    """Nine network inputs: velocity and angular-velocity features from the
    state, with the perceived value occupying the last three slots."""
    state_c = np.asarray(state_c, dtype=float)
    perceived_c = np.asarray(perceived_c, dtype=float)
    return np.concatenate([state_c[:6], perceived_c])


def stack_samples(samples) -> tuple[np.ndarray, np.ndarray]:
    """Dataset as matrices: inputs X (N, 9) and truths Y (N, 3)."""
    X = np.stack([net_input(s.state_c, s.perceived_c) for s in samples])
    Y = np.stack([s.truth_c for s in samples])
    return X, Y


def truth_gauge(params: mlp.MlpParams, sample: Sample) -> float:
    """Gauge of the predicted ellipsoid at the ground truth; <= 1 iff contained."""
    heads = mlp.forward(params, net_input(sample.state_c, sample.perceived_c))
    return float(np.linalg.norm(heads.shape_raw @ (sample.truth_c - heads.center)))


def gauges(params: mlp.MlpParams, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Batched truth gauges for inputs X (N, in) and truths Y (N, 3)."""
    centers, shapes = mlp.forward_batch(params, X)
    r = np.einsum("bij,bj->bi", shapes, Y - centers)
    return np.linalg.norm(r, axis=1)


def hinge(x: float, alpha: float) -> float:
    """max(0, x / alpha + 1): a soft proxy for the indicator of x > 0."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return max(0.0, x / alpha + 1.0)


def truncated_hinge(x: float, alpha: float) -> float:
    """Hinge capped at 1; the bounded loss used by the generalization bound."""
    return min(1.0, hinge(x, alpha))


@dataclass(frozen=True)
class LossTerms:
    total: float
    erm: float
    reg: float
    clamp_count: int


def _terms_from_heads(centers, shapes, Y, alpha, lam) -> tuple[LossTerms, dict]:
    d = Y - centers
    r = np.einsum("bij,bj->bi", shapes, d)
    g = np.linalg.norm(r, axis=1)
    erm_vals = np.maximum(0.0, (g - 1.0) / alpha + 1.0)
    erm = float(np.mean(erm_vals))
    signs, logabs = np.linalg.slogdet(shapes)
    floor_log = math.log(DET_FLOOR)
    clamped = ~np.isfinite(logabs) | (logabs < floor_log)
    reg_vals = np.where(clamped, -2.0 * floor_log, -2.0 * logabs)
    reg = float(np.mean(reg_vals))
    total = erm + lam * reg
    terms = LossTerms(total, erm, reg, int(np.count_nonzero(clamped)))
    cache = {"d": d, "r": r, "g": g, "clamped": clamped}
    return terms, cache


def loss_terms(params: mlp.MlpParams, X, Y, alpha: float, lam: float) -> LossTerms:
    """Total, hinge, and volume-penalty losses on an input/truth batch."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if len(X) == 0:
        raise ValueError("batch must be non-empty")
    centers, shapes = mlp.forward_batch(params, X)
    terms, _ = _terms_from_heads(centers, shapes, Y, alpha, lam)
    return terms


def loss_grads(
    params: mlp.MlpParams, X, Y, alpha: float, lam: float
) -> tuple[LossTerms, mlp.Grads]:
    """Loss terms plus the full parameter gradient of the total loss."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if len(X) == 0:
        raise ValueError("batch must be non-empty")
    trace = mlp.forward_trace(params, X)
    centers = trace.out[:, :3]
    shapes = trace.out[:, 3:].reshape(-1, 3, 3)
    terms, cache = _terms_from_heads(centers, shapes, Y, alpha, lam)
    d, r, g, clamped = cache["d"], cache["r"], cache["g"], cache["clamped"]
    n = len(g)

    # Hinge term: dl/dg = 1/alpha where g - 1 > -alpha (left-branch
    # subgradient 0 at the kink), scaled by the batch mean.
    active = (g - 1.0) > -alpha
    safe_g = np.where(g > _GAUGE_EPS, g, 1.0)
    rhat = np.where((g > _GAUGE_EPS)[:, None], r / safe_g[:, None], 0.0)
    coef = active.astype(float) / (alpha * n)
    grad_center = -np.einsum("bji,bj->bi", shapes, rhat) * coef[:, None]
    grad_shape = np.einsum("bi,bj->bij", rhat, d) * coef[:, None, None]

    # Volume penalty: d(-log det(C^T C))/dC = -2 C^-T; zero where clamped.
    if lam > 0.0:
        ok = ~clamped
        if np.any(ok):
            inv_t = np.transpose(np.linalg.inv(shapes[ok]), (0, 2, 1))
            grad_shape[ok] += (lam / n) * (-2.0 * inv_t)

    gout = np.concatenate([grad_center, grad_shape.reshape(n, 9)], axis=1)
    return terms, mlp.backward_trace(params, trace, gout)


def erm_loss(params: mlp.MlpParams, batch, alpha: float) -> float:
    """Mean hinge loss of (gauge - 1) over a non-empty batch of samples."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    X, Y = stack_samples(batch)
    g = gauges(params, X, Y)
    return float(np.mean(np.maximum(0.0, (g - 1.0) / alpha + 1.0)))


def reg_loss(params: mlp.MlpParams, batch) -> float:
    """Mean volume penalty -log det(C^T C) over a non-empty batch."""
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    X, Y = stack_samples(batch)
    return loss_terms(params, X, Y, alpha=1.0, lam=1.0).reg


def total_loss(params: mlp.MlpParams, batch, cfg: TrainConfig) -> float:
    """erm_loss + lambda * reg_loss on a batch of samples."""
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    X, Y = stack_samples(batch)
    return loss_terms(params, X, Y, cfg.alpha, cfg.lam).total


@dataclass
class TrainReport:
    loss_curve: list[dict]
    final_train_error: float
    heldout_error: float | None
    clamp_fraction: float
    n_train: int
    n_heldout: int
    config: TrainConfig
    wall_time_s: float

    def to_dict(self) -> dict:
        return {
            "loss_curve": self.loss_curve,
            "final_train_error": self.final_train_error,
            "heldout_error": self.heldout_error,
            "clamp_fraction": self.clamp_fraction,
            "n_train": self.n_train,
            "n_heldout": self.n_heldout,
            "config": self.config.to_dict(),
            "wall_time_s": self.wall_time_s,
        }


def train(dataset, cfg: TrainConfig) -> tuple[mlp.MlpParams, TrainReport]:
    """Shuffled mini-batch Adam on the hinge + volume objective.

    Deterministic given cfg.seed: the split, the initialization, and every
    batch order derive from it. Raises TrainingDiverged if either loss term
    goes non-finite.
    """
    if len(dataset) < cfg.batch_size:
        raise ValueError("dataset must hold at least one batch")
    started = time.perf_counter()
    X_all, Y_all = stack_samples(dataset)
    n = len(dataset)
    rng = np.random.default_rng([cfg.seed, 1])
    perm = rng.permutation(n)
    n_train = max(1, int(round(n * cfg.train_fraction)))
    train_idx = perm[:n_train]
    held_idx = perm[n_train:]

    params = mlp.init(cfg.seed, input_dim=X_all.shape[1], slope=cfg.slope)
    state = mlp.adam_init(params, beta1=cfg.beta1, beta2=cfg.beta2)
    curve: list[dict] = []
    clamp_total = 0
    seen_total = 0
    for epoch in range(cfg.epochs):
        batch_size = cfg.batch_size
        if epoch >= cfg.epochs - cfg.settle_epochs:
            batch_size = cfg.batch_size * cfg.settle_batch_factor
        order = rng.permutation(n_train)
        sums = {"total": 0.0, "erm": 0.0, "reg": 0.0}
        clamp_epoch = 0
        for batch_index, start in enumerate(range(0, n_train, batch_size)):
            idx = train_idx[order[start : start + batch_size]]
            terms, grads = loss_grads(params, X_all[idx], Y_all[idx], cfg.alpha, cfg.lam)
            if not math.isfinite(terms.erm):
                raise TrainingDiverged("erm", epoch, batch_index)
            if not math.isfinite(terms.reg):
                raise TrainingDiverged("reg", epoch, batch_index)
            b = len(idx)
            sums["total"] += terms.total * b
            sums["erm"] += terms.erm * b
            sums["reg"] += terms.reg * b
            clamp_epoch += terms.clamp_count
            mlp.adam_step(params, grads, state, cfg.lr)
        curve.append(
            {
                "epoch": epoch,
                "total": sums["total"] / n_train,
                "erm": sums["erm"] / n_train,
                "reg": sums["reg"] / n_train,
            }
        )
        clamp_total += clamp_epoch
        seen_total += n_train
        if clamp_epoch > 0.1 * n_train:
            warnings.warn(
                f"epoch {epoch}: {clamp_epoch}/{n_train} shape matrices hit the "
                f"determinant floor",
                DegeneracyWarning,
            )

    train_error = float(np.mean(gauges(params, X_all[train_idx], Y_all[train_idx]) > 1.0))
    heldout_error = (
        float(np.mean(gauges(params, X_all[held_idx], Y_all[held_idx]) > 1.0))
        if len(held_idx)
        else None
    )
    report = TrainReport(
        loss_curve=curve,
        final_train_error=train_error,
        heldout_error=heldout_error,
        clamp_fraction=clamp_total / max(1, seen_total),
        n_train=n_train,
        n_heldout=len(held_idx),
        config=cfg,
        wall_time_s=time.perf_counter() - started,
    )
    return params, report


def evaluate_error(params: mlp.MlpParams, dataset) -> float:
    """Fraction of samples whose truth falls strictly outside the contract."""
    if len(dataset) == 0:
        raise ValueError("dataset must be non-empty")
    X, Y = stack_samples(dataset)
    return float(np.mean(gauges(params, X, Y) > 1.0))


def empirical_truncated_loss(params: mlp.MlpParams, dataset, alpha: float) -> float:
    """Mean truncated hinge of (gauge - 1); always in [0, 1]."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if len(dataset) == 0:
        raise ValueError("dataset must be non-empty")
    X, Y = stack_samples(dataset)
    g = gauges(params, X, Y)
    return float(np.mean(np.minimum(1.0, np.maximum(0.0, (g - 1.0) / alpha + 1.0))))


def estimate_lipschitz(params: mlp.MlpParams, dataset, safety: float = 2.0) -> float:
    """Empirical stand-in for the gauge's Lipschitz constant in the parameters:
    max parameter-gradient norm of the gauge over the dataset, times a safety
    factor. Not a certified bound; the PAC report flags it as estimated."""
    best = 0.0
    for s in dataset:
        x = net_input(s.state_c, s.perceived_c)
        trace = mlp.forward_trace(params, x[None, :])
        center = trace.out[0, :3]
        shape = trace.out[0, 3:].reshape(3, 3)
        d = s.truth_c - center
        r = shape @ d
        g = float(np.linalg.norm(r))
        if g < _GAUGE_EPS:
            continue
        rhat = r / g
        gout = np.concatenate([-(shape.T @ rhat), np.outer(rhat, d).ravel()])[None, :]
        grads = mlp.backward_trace(params, trace, gout)
        norm = float(np.linalg.norm(grads.flat()))
        if norm > best:
            best = norm
    return safety * best


@dataclass(frozen=True)
class PacInputs:
    empirical_trunc_loss: float
    alpha: float
    lipschitz_lg: float
    param_count_p: int
    sample_count_n: int
    epsilon: float

    def __post_init__(self):
        if not 0.0 <= self.empirical_trunc_loss <= 1.0:
            raise ValueError("empirical truncated loss must be in [0, 1]")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.lipschitz_lg < 0:
            raise ValueError("Lipschitz constant must be nonnegative")
        if self.param_count_p < 1:
            raise ValueError("parameter count must be >= 1")
        if self.sample_count_n < 1:
            raise ValueError("sample count must be >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")


def pac_bound(inp: PacInputs) -> tuple[float, float]:
    """High-probability upper bound on the true miss probability.

    bound = empirical truncated loss + (12 / alpha) L_g sqrt(p / N) + epsilon,
    holding with probability at least 1 - 2 exp(-2 N epsilon^2).
    """
    slack = (12.0 / inp.alpha) * inp.lipschitz_lg * math.sqrt(
        inp.param_count_p / inp.sample_count_n
    )
    bound = inp.empirical_trunc_loss + slack + inp.epsilon
    confidence = 1.0 - 2.0 * math.exp(-2.0 * inp.sample_count_n * inp.epsilon**2)
    return bound, confidence


def query(params: mlp.MlpParams, state_c, perceived_c) -> Ellipsoid:
    """One contract query: forward pass packaged as an Ellipsoid.

    Raises DegenerateEllipsoidError if the predicted shape matrix is at or
    below the determinant floor.
    """
    heads = mlp.forward(params, net_input(state_c, perceived_c))
    return Ellipsoid(heads.center, heads.shape_raw)


def write_dataset(path, samples) -> None:
    """JSON Lines, one sample per line: {"x_c": [...], "y_c": [...], "yhat_c": [...]}."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(
                jsonio.render(
                    {"x_c": s.state_c, "y_c": s.truth_c, "yhat_c": s.perceived_c}
                )
            )
            fh.write("\n")


def read_dataset(path) -> list[Sample]:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            samples.append(Sample(doc["x_c"], doc["y_c"], doc["yhat_c"]))
    return samples


def save_model(
    path,
    params: mlp.MlpParams,
    train_config: TrainConfig | None = None,
    dataset_fingerprint: str | None = None,
    sim_config: dict | None = None,
) -> None:
    doc = {"format": MODEL_FORMAT}
    doc.update(mlp.params_to_dict(params))
    doc["train_config"] = train_config.to_dict() if train_config else None
    doc["dataset_fingerprint"] = dataset_fingerprint
    doc["sim_config"] = sim_config
    jsonio.dump(doc, path, indent=2)


def load_model(path) -> tuple[mlp.MlpParams, dict]:
    """Returns the parameters and the metadata block (config echo, fingerprint)."""
    doc = jsonio.load(path)
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"unsupported model format: {doc.get('format')!r}")
    params = mlp.params_from_dict(doc)
    meta = {
        "train_config": doc.get("train_config"),
        "dataset_fingerprint": doc.get("dataset_fingerprint"),
        "sim_config": doc.get("sim_config"),
    }
    return params, meta
