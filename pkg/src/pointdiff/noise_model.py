"""Toy per-point noise predictor with scan conditioning, and its training loop.

The network is a stack of per-point layers. Before each layer the features are
gated by a conditioning block: every point looks up its nearest condition
point, passes that point's embedding and the step embedding through small
MLPs, projects their concatenation back to the feature width and multiplies
it into the features element-wise. Gradients are written out by hand so the
whole model runs on numpy in double precision.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .geometry import as_cloud, fps_indices, nearest_neighbor
from .schedule import NoiseSchedule, forward_noise_local

log = logging.getLogger(__name__)


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_t: int = 96
    d_c: int = 32
    layer_dims: tuple[int, ...] = (64, 64, 64, 64)
    n_condition_points: int = 64
    encoder_hidden: int = 64
    coord_scale: float = 10.0
    activation: str = "silu"

    def validate(self) -> None:
        if self.d_t < 2 or self.d_t % 2:
            raise ModelError("temporal embedding size must be even and positive")
        dims = (self.d_c, self.n_condition_points, self.encoder_hidden, *self.layer_dims)
        if not self.layer_dims or min(dims) < 1:
            raise ModelError("all model dimensions must be >= 1")
        if self.coord_scale <= 0:
            raise ModelError("coord_scale must be positive")
        if self.activation != "silu":
            raise ModelError(f"unsupported activation {self.activation!r}")


@dataclass
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 1e-4
    lr_halving_period: int = 5
    weight_decay: float = 1e-4
    batch_size: int = 2
    r: float = 5.0
    p_null: float = 0.1
    seed: int = 0
    # dataset passes folded into one reported epoch
    passes_per_epoch: int = 1
    # random subset of ground-truth points per pair and step; 0 keeps all
    points_per_step: int = 0
    # "uniform": iid steps; "stratified": one draw per stratum of [1, T] each epoch,
    # still uniform per draw but with far less epoch-to-epoch loss jitter
    t_sampling: str = "uniform"

    def validate(self) -> None:
        if not 0.0 <= self.p_null <= 1.0:
            raise ModelError("p_null must lie in [0, 1]")
        if self.r < 0:
            raise ModelError("regularization weight must be non-negative")
        if self.learning_rate < 0:
            raise ModelError("learning rate must be non-negative")
        if self.epochs < 1 or self.batch_size < 1 or self.passes_per_epoch < 1:
            raise ModelError("epochs, batch_size and passes_per_epoch must be >= 1")
        if self.points_per_step < 0:
            raise ModelError("points_per_step must be >= 0")
        if self.t_sampling not in ("uniform", "stratified"):
            raise ModelError(f"unknown t_sampling {self.t_sampling!r}")


def temporal_embedding(t, d_t: int) -> np.ndarray:
    """Sinusoidal step embedding: [sin(t w_0), cos(t w_0), sin(t w_1), ...], w_i = 10000^(-2i/d_t)."""
    if d_t < 2 or d_t % 2:
        raise ModelError("temporal embedding size must be even")
    freqs = 10000.0 ** (-np.arange(0, d_t, 2, dtype=np.float64) / d_t)
    ang = float(t) * freqs
    out = np.empty(d_t)
    out[0::2] = np.sin(ang)
    out[1::2] = np.cos(ang)
    return out


@dataclass
class ConditionSet:
    positions: np.ndarray  # (N', 3)
    features: np.ndarray  # (N', d_c)
    cache: tuple | None = field(default=None, repr=False)


def init_params(config: ModelConfig, seed: int = 0) -> nn.Params:
    """Weights in declaration order, which is also their order on disk."""
    config.validate()
    rng = np.random.default_rng(seed)
    p: nn.Params = {}
    p["enc.w1"], p["enc.b1"] = nn.init_linear(rng, 3, config.encoder_hidden)
    p["enc.w2"], p["enc.b2"] = nn.init_linear(rng, config.encoder_hidden, config.d_c)
    p["null"] = rng.normal(0.0, 1.0, size=config.d_c)
    dims = list(config.layer_dims)
    p["in.w"], p["in.b"] = nn.init_linear(rng, 3, dims[0])
    for l, d in enumerate(dims):
        d_next = dims[l + 1] if l + 1 < len(dims) else dims[-1]
        p[f"cond{l}.w"], p[f"cond{l}.b"] = nn.init_linear(rng, config.d_c, d)
        p[f"time{l}.w"], p[f"time{l}.b"] = nn.init_linear(rng, config.d_t, d)
        p[f"proj{l}.w"], p[f"proj{l}.b"] = nn.init_linear(rng, 2 * d, d)
        # start the gate near 1 so the untrained stack passes features through
        p[f"proj{l}.w"] *= 0.1
        p[f"proj{l}.b"][:] = 1.0
        p[f"layer{l}.w"], p[f"layer{l}.b"] = nn.init_linear(rng, d + 3, d_next)
    p["out.w"], p["out.b"] = nn.init_linear(rng, dims[-1], 3)
    p["out.w"] *= 0.1
    return p


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {k: v.shape for k, v in init_params(config).items()}


def _encoder_forward(params: nn.Params, positions: np.ndarray, scale: float):
    xs = positions / scale
    a1 = xs @ params["enc.w1"] + params["enc.b1"]
    h1 = nn.silu(a1)
    feats = h1 @ params["enc.w2"] + params["enc.b2"]
    return feats, (xs, a1, h1)


def encode_condition(scan, params: nn.Params, config: ModelConfig, seed: int = 0) -> ConditionSet:
    """Downsample the scan to N' points by FPS and embed each with the encoder MLP."""
    scan = as_cloud(scan)
    n = config.n_condition_points
    if len(scan) < n:
        raise ModelError(f"condition scan has {len(scan)} points, encoder needs {n}")
    pos = scan[fps_indices(scan, n, seed)] if n < len(scan) else scan.copy()
    feats, cache = _encoder_forward(params, pos, config.coord_scale)
    return ConditionSet(pos, feats, cache)


def _block_forward(F, G, tau, w_cond, b_cond, w_time, b_time, w_proj, b_proj):
    ac = G @ w_cond + b_cond
    Cl = nn.silu(ac)
    at = tau @ w_time + b_time
    tl = nn.silu(at)
    Wcat = np.concatenate([Cl, np.broadcast_to(tl, Cl.shape)], axis=1)
    Wp = Wcat @ w_proj + b_proj
    return Wp * F, (ac, at, Wcat, Wp)


def conditioning_block(features, positions, condition: ConditionSet | None, tau,
                       weights: dict[str, np.ndarray], null_embedding=None) -> np.ndarray:
    """Gate per-point features by their nearest condition embedding and the step embedding.

    ``weights`` holds ``cond_w, cond_b, time_w, time_b, proj_w, proj_b``.
    With ``condition=None`` every lookup returns ``null_embedding``.
    """
    F = np.asarray(features, dtype=np.float64)
    if condition is None:
        if null_embedding is None:
            raise ModelError("null-token path needs a null embedding")
        G = np.broadcast_to(np.asarray(null_embedding, dtype=np.float64), (len(F), len(null_embedding)))
    else:
        idx, _ = nearest_neighbor(positions, condition.positions)
        G = condition.features[idx]
    if G.shape[1] != weights["cond_w"].shape[0] or F.shape[1] != weights["proj_w"].shape[1]:
        raise ModelError("conditioning block weights do not match feature shapes")
    out, _ = _block_forward(F, G, tau, weights["cond_w"], weights["cond_b"], weights["time_w"],
                            weights["time_b"], weights["proj_w"], weights["proj_b"])
    return out


class ToyNoisePredictor:
    def __init__(self, config: ModelConfig | None = None, params: nn.Params | None = None,
                 seed: int = 0):
        self.config = config or ModelConfig()
        self.config.validate()
        self.params = params if params is not None else init_params(self.config, seed)
        expected = param_shapes(self.config)
        if list(self.params) != list(expected) or any(
                self.params[k].shape != s for k, s in expected.items()):
            raise ModelError("parameter set does not match the model config")

    @property
    def n_layers(self) -> int:
        return len(self.config.layer_dims)

    def encode(self, scan, seed: int = 0) -> ConditionSet:
        return encode_condition(scan, self.params, self.config, seed)

    def _resolve(self, condition):
        if condition is None or isinstance(condition, ConditionSet):
            return condition
        return self.encode(condition)

    def predict(self, noisy, condition, t: int) -> np.ndarray:
        out, _ = self.forward(noisy, self._resolve(condition), t)
        return out

    __call__ = predict

    def forward(self, noisy, condition: ConditionSet | None, t: int):
        p = self.params
        X = as_cloud(noisy)
        xs = X / self.config.coord_scale
        tau = temporal_embedding(t, self.config.d_t)
        if condition is None:
            idx = None
            G = np.broadcast_to(p["null"], (len(X), self.config.d_c))
        else:
            idx, _ = nearest_neighbor(X, condition.positions)
            G = condition.features[idx]
        F = xs @ p["in.w"] + p["in.b"]
        layers = []
        for l in range(self.n_layers):
            Fp, bc = _block_forward(F, G, tau, p[f"cond{l}.w"], p[f"cond{l}.b"], p[f"time{l}.w"],
                                    p[f"time{l}.b"], p[f"proj{l}.w"], p[f"proj{l}.b"])
            inp = np.concatenate([Fp, xs], axis=1)
            z = inp @ p[f"layer{l}.w"] + p[f"layer{l}.b"]
            layers.append((F, inp, z, bc))
            F = nn.silu(z)
        out = F @ p["out.w"] + p["out.b"]
        return out, (xs, tau, idx, G, condition, layers, F)

    def backward(self, cache, d_out: np.ndarray) -> nn.Params:
        p = self.params
        xs, tau, idx, G, condition, layers, F_last = cache
        g = nn.zeros_like_params(p)
        g["out.w"] = F_last.T @ d_out
        g["out.b"] = d_out.sum(axis=0)
        dF = d_out @ p["out.w"].T
        dG = np.zeros(G.shape)
        for l in reversed(range(self.n_layers)):
            F, inp, z, (ac, at, Wcat, Wp) = layers[l]
            d = F.shape[1]
            dz = dF * nn.silu_grad(z)
            g[f"layer{l}.w"] = inp.T @ dz
            g[f"layer{l}.b"] = dz.sum(axis=0)
            dFp = (dz @ p[f"layer{l}.w"].T)[:, :d]
            dWp = dFp * F
            dF = dFp * Wp
            g[f"proj{l}.w"] = Wcat.T @ dWp
            g[f"proj{l}.b"] = dWp.sum(axis=0)
            dWcat = dWp @ p[f"proj{l}.w"].T
            dac = dWcat[:, :d] * nn.silu_grad(ac)
            g[f"cond{l}.w"] = G.T @ dac
            g[f"cond{l}.b"] = dac.sum(axis=0)
            dG += dac @ p[f"cond{l}.w"].T
            dat = dWcat[:, d:].sum(axis=0) * nn.silu_grad(at)
            g[f"time{l}.w"] = np.outer(tau, dat)
            g[f"time{l}.b"] = dat
        g["in.w"] = xs.T @ dF
        g["in.b"] = dF.sum(axis=0)
        if condition is None:
            g["null"] = dG.sum(axis=0)
        elif condition.cache is not None:
            dfeat = np.zeros(condition.features.shape)
            np.add.at(dfeat, idx, dG)
            cxs, a1, h1 = condition.cache
            g["enc.w2"] = h1.T @ dfeat
            g["enc.b2"] = dfeat.sum(axis=0)
            da1 = (dfeat @ p["enc.w2"].T) * nn.silu_grad(a1)
            g["enc.w1"] = cxs.T @ da1
            g["enc.b1"] = da1.sum(axis=0)
        return g


def predict_noise(predictor, noisy, condition, t: int) -> np.ndarray:
    return predictor.predict(noisy, condition, t)


def _same_shape(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ModelError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def loss_diff(eps_true, eps_pred) -> float:
    """Mean squared error over every point and coordinate."""
    e, p = _same_shape(eps_true, eps_pred)
    return float(np.mean((e - p) ** 2))


def loss_reg(eps_pred) -> tuple[float, float]:
    """(mean^2, (std - 1)^2) of all predicted components pooled, population std."""
    v = np.asarray(eps_pred, dtype=np.float64).ravel()
    if v.size == 0:
        raise ModelError("regularization of an empty prediction")
    mu = v.mean()
    sd = np.sqrt(np.mean((v - mu) ** 2))
    return float(mu ** 2), float((sd - 1.0) ** 2)


def loss_total(l_diff: float, l_mean: float, l_std: float, r: float) -> float:
    return l_diff + r * (l_mean + l_std)


@dataclass
class LossBreakdown:
    total: float
    diff: float
    mean: float
    std: float
    t: int = 0
    null: bool = False


def loss_and_grad_output(eps_true, eps_pred, r: float) -> tuple[LossBreakdown, np.ndarray]:
    """Total loss and its gradient with respect to the predictions."""
    e, p = _same_shape(eps_true, eps_pred)
    n = p.size
    l_diff = loss_diff(e, p)
    l_mean, l_std = loss_reg(p)
    d = 2.0 * (p - e) / n
    if r:
        mu = p.mean()
        sd = np.sqrt(np.mean((p - mu) ** 2))
        d = d + r * 2.0 * mu / n
        if sd > 0:
            d = d + r * 2.0 * (sd - 1.0) * (p - mu) / (n * sd)
    return LossBreakdown(loss_total(l_diff, l_mean, l_std, r), l_diff, l_mean, l_std), d


def pair_loss(model: ToyNoisePredictor, pair, sched: NoiseSchedule, r: float, t: int,
              eps: np.ndarray, use_null: bool, cond_seed: int = 0):
    """Loss and weight gradients for one scene pair at a fixed step, noise and null draw."""
    gt = as_cloud(pair.gt)
    noisy = forward_noise_local(gt, t, eps, sched)
    cond = None if use_null else model.encode(pair.input, cond_seed)
    pred, cache = model.forward(noisy, cond, t)
    breakdown, d_out = loss_and_grad_output(eps, pred, r)
    breakdown.t, breakdown.null = int(t), bool(use_null)
    return breakdown, model.backward(cache, d_out)


def train_step(model: ToyNoisePredictor, pairs, sched: NoiseSchedule, config: TrainConfig,
               rng: np.random.Generator, optimizer: nn.AdamW | None = None,
               lr: float | None = None, steps=None) -> LossBreakdown:
    """One optimizer update over a batch of pairs; returns the batch-mean losses.

    ``steps`` optionally fixes the diffusion step per pair; otherwise each is
    drawn uniformly from [1, T].
    """
    if not isinstance(pairs, (list, tuple)):
        pairs = [pairs]
    if optimizer is None:
        optimizer = nn.AdamW(model.params, weight_decay=config.weight_decay)
    grads = nn.zeros_like_params(model.params)
    parts = []
    for k, pair in enumerate(pairs):
        t = int(steps[k]) if steps is not None else int(rng.integers(1, sched.T + 1))
        n = len(pair.gt)
        if 0 < config.points_per_step < n:
            keep = rng.choice(n, size=config.points_per_step, replace=False)
            pair = type(pair)(input=pair.input, gt=np.asarray(pair.gt)[keep])
        eps = rng.standard_normal(np.shape(pair.gt))
        use_null = bool(rng.random() < config.p_null)
        b, g = pair_loss(model, pair, sched, config.r, t, eps, use_null)
        nn.add_into(grads, g, 1.0 / len(pairs))
        parts.append(b)
    optimizer.step(model.params, grads, config.learning_rate if lr is None else lr)
    return LossBreakdown(
        total=float(np.mean([b.total for b in parts])),
        diff=float(np.mean([b.diff for b in parts])),
        mean=float(np.mean([b.mean for b in parts])),
        std=float(np.mean([b.std for b in parts])),
        t=parts[0].t, null=parts[0].null)


def epoch_steps(n: int, T: int, rng: np.random.Generator, mode: str = "uniform") -> np.ndarray:
    """Diffusion steps for ``n`` draws; every draw is marginally uniform on [1, T]."""
    if mode == "uniform":
        return rng.integers(1, T + 1, size=n)
    u = (np.arange(n) + rng.random(n)) / n
    return rng.permutation(np.minimum((u * T).astype(np.int64) + 1, T))


def train(model: ToyNoisePredictor, dataset, sched: NoiseSchedule, config: TrainConfig,
          on_epoch=None) -> list[dict[str, float]]:
    """Run the epoch loop and return per-epoch mean losses.

    The learning rate halves every ``lr_halving_period`` epochs.
    """
    config.validate()
    dataset = list(dataset)
    if not dataset:
        raise ModelError("training needs at least one scene pair")
    rng = np.random.default_rng(config.seed)
    optimizer = nn.AdamW(model.params, weight_decay=config.weight_decay)
    history = []
    for epoch in range(config.epochs):
        lr = nn.lr_at_epoch(config.learning_rate, epoch, config.lr_halving_period)
        ts = epoch_steps(config.passes_per_epoch * len(dataset), sched.T, rng, config.t_sampling)
        steps = []
        k = 0
        for _ in range(config.passes_per_epoch):
            order = rng.permutation(len(dataset))
            for i in range(0, len(order), config.batch_size):
                batch = [dataset[j] for j in order[i:i + config.batch_size]]
                steps.append(train_step(model, batch, sched, config, rng, optimizer, lr,
                                        ts[k:k + len(batch)]))
                k += len(batch)
        rec = {"epoch": epoch, "lr": lr,
               "total": float(np.mean([s.total for s in steps])),
               "diff": float(np.mean([s.diff for s in steps])),
               "mean": float(np.mean([s.mean for s in steps])),
               "std": float(np.mean([s.std for s in steps]))}
        history.append(rec)
        log.info("epoch %d lr %.3g loss %.4f (diff %.4f)", epoch, lr, rec["total"], rec["diff"])
        if on_epoch is not None:
            on_epoch(rec)
    return history
