"""Offset-based refinement and upsampling of completed clouds.

A per-point MLP predicts ``kappa`` bounded offsets for every input point; the
refined cloud holds ``p_i + o_ij`` at row ``i * kappa + j``. Training
minimizes the symmetric squared chamfer loss against a dense target, with
nearest-neighbour assignments recomputed each forward pass and held fixed in
the backward pass.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import nn
from .geometry import EmptyInputError, as_cloud, nearest_neighbor

log = logging.getLogger(__name__)


class RefineError(ValueError):
    pass


@dataclass
class RefineConfig:
    kappa: int = 6
    max_offset: float = 0.10
    jitter_sigma: float = 0.05
    hidden: tuple[int, ...] = (64, 64)
    coord_scale: float = 10.0
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 5
    batch_size: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.kappa < 1:
            raise RefineError("kappa must be at least 1")
        if self.max_offset <= 0:
            raise RefineError("max_offset must be positive")
        if self.jitter_sigma < 0:
            raise RefineError("jitter sigma must be non-negative")
        if not self.hidden or min(self.hidden) < 1:
            raise RefineError("hidden widths must be >= 1")
        if self.coord_scale <= 0:
            raise RefineError("coord_scale must be positive")


def _nonempty(points, name: str) -> np.ndarray:
    pts = as_cloud(points)
    if len(pts) == 0:
        raise EmptyInputError(f"{name} is empty")
    return pts


def chamfer_sq(A, B) -> float:
    """Mean over A of the squared distance to the closest point of B."""
    A = _nonempty(A, "first cloud")
    B = _nonempty(B, "second cloud")
    _, d = nearest_neighbor(A, B)
    return float(np.mean(d ** 2))


def refine_loss(gt, pred) -> float:
    return chamfer_sq(gt, pred) + chamfer_sq(pred, gt)


def refine_loss_and_grad(gt, pred) -> tuple[float, np.ndarray]:
    """Symmetric squared chamfer and its gradient with respect to ``pred``."""
    gt = _nonempty(gt, "ground truth")
    pred = _nonempty(pred, "prediction")
    i_gp, d_gp = nearest_neighbor(gt, pred)
    i_pg, d_pg = nearest_neighbor(pred, gt)
    loss = float(np.mean(d_gp ** 2) + np.mean(d_pg ** 2))
    grad = 2.0 * (pred - gt[i_pg]) / len(pred)
    np.add.at(grad, i_gp, 2.0 * (pred[i_gp] - gt) / len(gt))
    return loss, grad


def init_refine_params(config: RefineConfig, seed: int = 0) -> nn.Params:
    config.validate()
    rng = np.random.default_rng(seed)
    p: nn.Params = {}
    dims = [3, *config.hidden]
    for l in range(len(config.hidden)):
        p[f"hid{l}.w"], p[f"hid{l}.b"] = nn.init_linear(rng, dims[l], dims[l + 1])
    p["out.w"], p["out.b"] = nn.init_linear(rng, dims[-1], 3 * config.kappa)
    p["out.w"] *= 0.1
    return p


class RefineNet:
    def __init__(self, config: RefineConfig | None = None, params: nn.Params | None = None,
                 seed: int = 0):
        self.config = config or RefineConfig()
        self.config.validate()
        self.params = params if params is not None else init_refine_params(self.config, seed)
        expected = init_refine_params(self.config)
        if list(self.params) != list(expected) or any(
                self.params[k].shape != v.shape for k, v in expected.items()):
            raise RefineError("parameter set does not match the refine config")

    @classmethod
    def zeros(cls, config: RefineConfig | None = None) -> "RefineNet":
        net = cls(config)
        for v in net.params.values():
            v[:] = 0.0
        return net

    def forward(self, points):
        p = self.params
        xs = as_cloud(points) / self.config.coord_scale
        h = xs
        acts = []
        for l in range(len(self.config.hidden)):
            a = h @ p[f"hid{l}.w"] + p[f"hid{l}.b"]
            acts.append((h, a))
            h = nn.silu(a)
        th = np.tanh(h @ p["out.w"] + p["out.b"])
        offsets = self.config.max_offset * th
        return offsets.reshape(len(xs), self.config.kappa, 3), (acts, h, th)

    def offsets(self, points) -> np.ndarray:
        return self.forward(points)[0]

    def backward(self, cache, d_offsets: np.ndarray) -> nn.Params:
        p = self.params
        acts, h, th = cache
        g = nn.zeros_like_params(p)
        d_pre = d_offsets.reshape(len(h), -1) * self.config.max_offset * (1.0 - th ** 2)
        g["out.w"] = h.T @ d_pre
        g["out.b"] = d_pre.sum(axis=0)
        dh = d_pre @ p["out.w"].T
        for l in reversed(range(len(acts))):
            h_in, a = acts[l]
            da = dh * nn.silu_grad(a)
            g[f"hid{l}.w"] = h_in.T @ da
            g[f"hid{l}.b"] = da.sum(axis=0)
            dh = da @ p[f"hid{l}.w"].T
        return g

    def upsample(self, points) -> np.ndarray:
        return refine_upsample(points, self)


def refine_upsample(points, net: RefineNet) -> np.ndarray:
    pts = _nonempty(points, "cloud")
    off = net.offsets(pts)
    return (pts[:, None, :] + off).reshape(-1, 3)


def jitter(points, sigma: float, seed: int) -> np.ndarray:
    if sigma < 0:
        raise RefineError("jitter sigma must be non-negative")
    pts = as_cloud(points)
    if sigma == 0:
        return pts.copy()
    return pts + np.random.default_rng(seed).normal(0.0, sigma, size=pts.shape)


def refine_pair_loss(net: RefineNet, inp, gt) -> tuple[float, nn.Params]:
    """Loss and weight gradients for one (input, target) pair at fixed assignments."""
    inp = _nonempty(inp, "input")
    off, cache = net.forward(inp)
    pred = (inp[:, None, :] + off).reshape(-1, 3)
    loss, d_pred = refine_loss_and_grad(gt, pred)
    return loss, net.backward(cache, d_pred.reshape(off.shape))


def make_refine_example(gt, sigma: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Training example: jittered copy of the target as input, the clean target as ground truth."""
    gt = _nonempty(gt, "ground truth")
    return jitter(gt, sigma, seed), gt


def train_refine(net: RefineNet, dataset, config: RefineConfig | None = None,
                 on_epoch=None) -> list[float]:
    """Adam on the symmetric chamfer loss; returns per-epoch mean loss.

    ``dataset`` is a sequence of ``(input, gt)`` cloud pairs.
    """
    config = config or net.config
    config.validate()
    dataset = list(dataset)
    if not dataset:
        raise RefineError("refinement training needs at least one example")
    rng = np.random.default_rng(config.seed)
    opt = nn.AdamW(net.params, weight_decay=config.weight_decay)
    history = []
    for epoch in range(config.epochs):
        losses = []
        order = rng.permutation(len(dataset))
        for i in range(0, len(order), config.batch_size):
            batch = order[i:i + config.batch_size]
            grads = nn.zeros_like_params(net.params)
            for j in batch:
                loss, g = refine_pair_loss(net, *dataset[j])
                nn.add_into(grads, g, 1.0 / len(batch))
                losses.append(loss)
            opt.step(net.params, grads, config.learning_rate)
        history.append(float(np.mean(losses)))
        log.info("refine epoch %d loss %.6f", epoch, history[-1])
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    return history
