"""Small feedforward score network with exact reverse-mode gradients.

The network regresses endpoint-conditional score vectors on inputs
``[state, time features, pin]`` where the pin is one conditioning endpoint.
Targets are always analytic (closed-form Gaussian scores), never simulated:

* forward-time objective: the endpoint score grad_x log p(x1 | x_t)
  (:func:`analytic_ft_target`),
* reverse-time objective: the two-endpoint bridge score
  grad_x log p(x_t | x0, x1) (:func:`analytic_rt_target`).

Training minimizes ``mean lambda(t) |model - target|^2`` with Adam.  The pin
fed to a trained model at generation time is the run's own starting endpoint
(x0 for forward runs, x1 for reverse runs), so the learned function
marginalizes the unseen endpoint and the generative SDE stays runnable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .bridge import ConditionedGaussianBridge, EndTables
from .errors import DomainError, TrainingDiverged
from .sde import DriftField

#: Number of sinusoidal time features; frequencies 2^0 .. 2^7 times pi.
N_TIME_FEATURES = 8
_TIME_FREQS = (2.0 ** np.arange(N_TIME_FEATURES)) * np.pi

#: Training step size matching the reference experiments.
DEFAULT_LEARNING_RATE = 1e-4


def time_features(t) -> np.ndarray:
    """Sinusoidal embedding of scalar times; (B,) -> (B, 8)."""
    tt = np.atleast_1d(np.asarray(t, dtype=float))
    return np.sin(tt[:, None] * _TIME_FREQS)


@dataclass
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = DEFAULT_LEARNING_RATE
    epochs: int = 10
    steps_per_epoch: int = 200
    weight: str = "unit"            # "unit" or "sigma_trace"
    seed: int = 0
    objective: str = "RT"           # "FT" or "RT"

    def __post_init__(self):
        if self.learning_rate < 0:
            raise DomainError("learning rate must be >= 0")
        if self.objective not in ("FT", "RT"):
            raise DomainError("objective must be 'FT' or 'RT'")


class ScoreModel:
    """Fully-connected tanh network mapping (t, x, pin) to a k-vector.

    Parameters live in one flat float64 vector so the optimizer and the
    checkpoint format stay trivial.  ``hidden=()`` gives a plain affine map,
    which the gradient tests exploit.
    """

    def __init__(self, dim: int, hidden=(128, 128), pin_role: str = "x1", seed: int = 0):
        if pin_role not in ("x0", "x1", "none"):
            raise DomainError("pin_role must be 'x0', 'x1' or 'none'")
        self.dim = dim
        self.hidden = tuple(hidden)
        self.pin_role = pin_role
        self.seed = seed
        in_dim = dim + N_TIME_FEATURES + (dim if pin_role != "none" else 0)
        self.sizes = (in_dim, *self.hidden, dim)
        self._shapes = []
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            self._shapes.append((a, b))
        rng = np.random.default_rng(seed)
        chunks = []
        for a, b in self._shapes:
            chunks.append(rng.normal(0.0, math.sqrt(1.0 / a), size=a * b))
            chunks.append(np.zeros(b))
        self.params = np.concatenate(chunks)

    @property
    def n_params(self) -> int:
        return self.params.size

    def _unpack(self, params):
        mats, offset = [], 0
        for a, b in self._shapes:
            W = params[offset:offset + a * b].reshape(a, b)
            offset += a * b
            bias = params[offset:offset + b]
            offset += b
            mats.append((W, bias))
        return mats

    def _features(self, t, x, pin):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        B = x.shape[0]
        tf = time_features(np.broadcast_to(np.asarray(t, dtype=float), (B,)))
        cols = [x, tf]
        if self.pin_role != "none":
            if pin is None:
                raise DomainError(f"model conditions on pin '{self.pin_role}'")
            cols.append(np.atleast_2d(np.asarray(pin, dtype=float)))
        return np.concatenate(cols, axis=1)

    def forward(self, t, x, pin=None, params=None):
        out, _ = self._forward_cached(t, x, pin, params)
        return out

    def __call__(self, t, x, pin=None):
        single = np.asarray(x).ndim == 1
        out = self.forward(t, x, pin)
        return out[0] if single else out

    def _forward_cached(self, t, x, pin, params=None):
        params = self.params if params is None else params
        h = self._features(t, x, pin)
        acts = [h]
        layers = self._unpack(params)
        for i, (W, b) in enumerate(layers):
            z = h @ W + b
            h = z if i == len(layers) - 1 else np.tanh(z)
            acts.append(h)
        return h, acts

    def backward(self, acts, d_out, params=None) -> np.ndarray:
        """Gradient of sum(d_out * output) with respect to the flat parameters."""
        params = self.params if params is None else params
        layers = self._unpack(params)
        grads = [None] * len(layers)
        delta = d_out
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            h_prev = acts[i]
            gW = h_prev.T @ delta
            gb = delta.sum(axis=0)
            grads[i] = (gW, gb)
            if i > 0:
                delta = (delta @ W.T) * (1.0 - acts[i] ** 2)
        flat = []
        for gW, gb in grads:
            flat.append(gW.ravel())
            flat.append(gb)
        return np.concatenate(flat)

    def save(self, path) -> None:
        """JSON header next to a little-endian float64 parameter blob."""
        header = {"dim": self.dim, "hidden": list(self.hidden),
                  "pin_role": self.pin_role, "seed": self.seed,
                  "activation": "tanh", "n_params": int(self.n_params)}
        with open(str(path) + ".json", "w") as fh:
            json.dump(header, fh, sort_keys=True)
        with open(str(path) + ".bin", "wb") as fh:
            fh.write(self.params.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ScoreModel":
        with open(str(path) + ".json") as fh:
            header = json.load(fh)
        model = cls(dim=header["dim"], hidden=tuple(header["hidden"]),
                    pin_role=header["pin_role"], seed=header.get("seed", 0))
        with open(str(path) + ".bin", "rb") as fh:
            params = np.frombuffer(fh.read(), dtype="<f8").copy()
        if params.size != model.n_params:
            raise DomainError("checkpoint parameter count mismatch")
        model.params = params
        return model


def analytic_ft_target(schedule, prop, t, x_t, x1) -> np.ndarray:
    """Forward-time regression target: the endpoint score of the base process."""
    return EndTables(schedule, prop).doob_score(t, x_t, x1)


def analytic_rt_target(spec, t, x_t) -> np.ndarray:
    """Reverse-time regression target: -cov(t)^{-1} (x_t - mean(t)) of the bridge."""
    m = spec.marginal(t)
    if m.degenerate:
        raise DomainError("bridge score undefined at a pinned time")
    x_t = np.asarray(x_t, dtype=float)
    single = x_t.ndim == 1
    r = np.atleast_2d(x_t) - m.mean
    out = -np.linalg.solve(m.cov, r.T).T
    return out[0] if single else out


def loss_and_grad(model: ScoreModel, batch, weight_fn=None, params=None):
    """Weighted mean squared score-matching loss and its exact gradient.

    ``batch`` is (t, x_t, pin, target) with matching leading dimensions.
    """
    t, x, pin, target = batch
    lam = np.ones(np.atleast_1d(t).shape[0]) if weight_fn is None \
        else np.asarray(weight_fn(np.atleast_1d(t)), dtype=float)
    out, acts = model._forward_cached(t, x, pin, params)
    resid = out - np.atleast_2d(target)
    B = resid.shape[0]
    loss = float(np.sum(lam * np.sum(resid * resid, axis=1)) / B)
    d_out = (2.0 / B) * lam[:, None] * resid
    return loss, model.backward(acts, d_out, params)


class Adam:
    """Standard Adam on a flat parameter vector."""

    def __init__(self, n_params: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainResult:
    model: ScoreModel
    epoch_losses: np.ndarray
    weight: str = "unit"

    def losses_to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("epoch,loss\n")
            for i, v in enumerate(self.epoch_losses):
                fh.write(f"{i},{v:.17g}\n")


class BridgeTrainingSampler:
    """Draws (t, x_t, pin, target) batches from the exact bridge conditional.

    One table pass over the base-process grid serves both objectives:

    * FT: x0 from the tractable start, x1 from the data set, target is the
      endpoint score given x1;
    * RT: x0 from the data set, x1 from the tractable end, target is the
      two-endpoint bridge score.

    The pin column follows ``pin_role`` and defaults to the endpoint a
    generative run of that objective starts from.
    """

    def __init__(self, schedule, prop, gt_data, p0, objective="RT",
                 pin_role=None, eps=1e-3):
        self.cond = ConditionedGaussianBridge(schedule, prop)
        self.tables = EndTables(schedule, prop)
        self.gt = np.asarray(gt_data, dtype=float)
        self.p0 = p0
        self.objective = objective
        if pin_role is None:
            pin_role = "x0" if objective == "FT" else "x1"
        self.pin_role = pin_role
        grid = prop.grid
        self.j_lo = max(1, int(np.ceil((eps - grid.t_start) / grid.dt)))
        self.j_hi = grid.n_steps - self.j_lo
        self.times = grid.times
        k = schedule.dim
        n = grid.n_steps
        # Per-node matrices for vectorized target evaluation.
        self.doob_mat = np.zeros((n + 1, k, k))
        for j in range(self.j_lo, self.j_hi + 1):
            self.doob_mat[j] = np.linalg.solve(self.tables.sigma_end[j],
                                               self.tables.omega_end[j])
        self.sigma_trace = np.einsum("jii->j", self.cond.cov) / k

    def weight_fn(self, kind: str):
        if kind == "unit":
            return lambda t: np.ones(np.atleast_1d(t).shape[0])
        if kind == "sigma_trace":
            times, vals = self.times, self.sigma_trace
            return lambda t: np.interp(np.atleast_1d(t), times, vals)
        raise DomainError(f"unknown weight kind '{kind}'")

    def __call__(self, batch_size: int, rng: np.random.Generator):
        js = rng.integers(self.j_lo, self.j_hi + 1, size=batch_size)
        gt = self.gt[rng.integers(0, self.gt.shape[0], size=batch_size)]
        p0s = self.p0.sample(batch_size, rng)
        if self.objective == "FT":
            x0, x1 = p0s, gt
        else:
            x0, x1 = gt, p0s
        mean = (np.einsum("sij,sj->si", self.cond.M0[js], x0)
                + np.einsum("sij,sj->si", self.cond.M1[js], x1)
                + self.cond.const[js])
        z = rng.standard_normal(x0.shape)
        x_t = mean + np.einsum("sij,sj->si", self.cond.chol[js], z)
        if self.objective == "FT":
            r = x1 - np.einsum("sij,sj->si", self.tables.omega_end[js], x_t) \
                - self.tables.offset_end[js]
            target = np.einsum("sji,sj->si", self.doob_mat[js], r)
        else:
            target = -np.einsum("sij,sj->si", self.cond.prec[js], x_t - mean)
        pin = x0 if self.pin_role == "x0" else x1
        return self.times[js], x_t, pin, target


def train(model: ScoreModel, sampler, config: TrainConfig) -> TrainResult:
    """Adam training against analytic targets; per-epoch mean loss curve."""
    weight_fn = sampler.weight_fn(config.weight) if hasattr(sampler, "weight_fn") \
        and config.weight != "unit" else None
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.n_params, config.learning_rate)
    losses = np.empty(config.epochs)
    for epoch in range(config.epochs):
        total = 0.0
        for _ in range(config.steps_per_epoch):
            batch = sampler(config.batch_size, rng)
            loss, grad = loss_and_grad(model, batch, weight_fn)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch}")
            model.params = opt.step(model.params, grad)
            total += loss
        losses[epoch] = total / config.steps_per_epoch
    return TrainResult(model=model, epoch_losses=losses, weight=config.weight)


def score_drift_field(model, schedule, direction: str,
                      bar_schedule=None) -> DriftField:
    """Compose the affine part and the kappa-weighted score for a scheme.

    Forward scheme: base drift plus kappa * score; reverse scheme: pinned
    drift toward the run's start endpoint minus kappa * score.  ``model`` is
    any callable (t, X, pin) -> (B, k); a trained :class:`ScoreModel` or an
    analytic closure both qualify.
    """
    if direction == "forward":
        def ev(t, X, pin):
            A = np.asarray(schedule.A(t), dtype=float)
            c = np.asarray(schedule.c(t), dtype=float)
            kap = np.asarray(schedule.kappa(t), dtype=float)
            base = X @ A.T + c
            if kap.any():
                base = base + model(t, X, pin) @ kap.T
            return base
        return DriftField(evaluator=ev, direction="forward", name="score-forward")
    if direction == "reverse":
        bar = bar_schedule if bar_schedule is not None else schedule
        def ev(t, X, pin):
            if pin is None:
                raise DomainError("reverse scheme needs the start-endpoint pin")
            Abar = np.asarray(bar.A(t), dtype=float)
            kap = np.asarray(bar.kappa(t), dtype=float)
            out = (pin - X) @ Abar.T
            if kap.any():
                out = out - model(t, X, pin) @ kap.T
            return out
        return DriftField(evaluator=ev, direction="reverse", name="score-reverse")
    raise DomainError("direction must be 'forward' or 'reverse'")
