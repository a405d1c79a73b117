"""Momentum-SGD training, evaluation, calibration, retraining from a quantized model, gradient checking."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import gf2
from .errors import ConfigError, GraphError, NumericError, ShapeError
from .nn.builders import insert_compression, insert_quantization
from .nn.graph import NetworkGraph
from .quantizer import calibrate, in_range_mask

log = logging.getLogger(__name__)

METRIC_FIELDS = ("iteration", "lr", "loss", "top1", "top5")


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    step_size: int = 1000
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    iterations: int = 300
    batch_size: int = 32
    seed: int = 0
    eval_interval: int = 100

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 < self.gamma < 1:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.step_size < 1 or self.batch_size < 1 or self.iterations < 0 or self.eval_interval < 1:
            raise ConfigError("step_size, batch_size and eval_interval must be >= 1; iterations >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train settings {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def step_lr(iteration: int, cfg: TrainConfig) -> float:
    if iteration < 0:
        raise ConfigError("iteration must be non-negative")
    return cfg.base_lr * cfg.gamma ** (iteration // cfg.step_size)


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. ``logits`` (same shape as given)."""
    shape = logits.shape
    z = logits.reshape(shape[0], -1).astype(np.float64)
    labels = np.asarray(labels)
    k = z.shape[1]
    if labels.shape != (shape[0],):
        raise ShapeError(f"labels shape {labels.shape} != ({shape[0]},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    grad /= n
    return float(loss), grad.reshape(shape).astype(logits.dtype)


def topk_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> int:
    z = logits.reshape(logits.shape[0], -1)
    k = min(k, z.shape[1])
    # stable order: higher score first, lower class index on ties
    order = np.argsort(-z, axis=1, kind="stable")[:, :k]
    return int((order == np.asarray(labels)[:, None]).any(axis=1).sum())


def sgd_step(params: dict, grads: dict, lr: float, momentum: float, state: dict,
             weight_decay: float = 0.0, frozen=()) -> None:
    """In place: v <- momentum*v + (g + wd*p); p <- p - lr*v."""
    for lname, gp in grads.items():
        if lname in frozen:
            continue
        for key, g in gp.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in {lname}.{key}; training aborted")
            p = params[lname][key]
            if not np.issubdtype(p.dtype, np.floating):
                continue
            if g.shape != p.shape:
                raise ShapeError(f"gradient {lname}.{key} shape {g.shape} != parameter {p.shape}")
            if weight_decay:
                g = g + weight_decay * p
            v = state.get((lname, key))
            v = g.astype(p.dtype) if v is None else momentum * v + g
            state[(lname, key)] = v
            p -= (lr * v).astype(p.dtype)


def evaluate(g: NetworkGraph, images: np.ndarray, labels: np.ndarray, batch: int = 256):
    """(mean loss, top-1, top-5) over the whole set."""
    n = len(labels)
    if n == 0:
        raise ShapeError("cannot evaluate on an empty set")
    loss = top1 = top5 = 0.0
    for i in range(0, n, batch):
        out = g.forward(images[i:i + batch])
        lb = labels[i:i + batch]
        l, _ = softmax_xent(out, lb)
        loss += l * len(lb)
        top1 += topk_hits(out, lb, 1)
        top5 += topk_hits(out, lb, 5)
    return loss / n, top1 / n, top5 / n


def _append_metrics(path, row: dict) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        if new:
            w.writeheader()
        w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})


def train(g: NetworkGraph, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
          eval_set=None, metrics_path=None, frozen=(), start_iteration: int = 0) -> list[dict]:
    """Mini-batch momentum SGD; logs (iteration, lr, loss, top1, top5) every eval interval."""
    rng = np.random.default_rng(cfg.seed)
    state: dict = {}
    history = []
    n = len(labels)
    if n == 0:
        raise ShapeError("empty training set")
    eval_images, eval_labels = eval_set if eval_set is not None else (images, labels)
    order = rng.permutation(n)
    pos = 0
    for it in range(cfg.iterations):
        if pos + cfg.batch_size > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + cfg.batch_size]
        pos += cfg.batch_size
        lr = step_lr(start_iteration + it, cfg)
        out = g.forward(images[idx], keep=True)
        loss, grad = softmax_xent(out, labels[idx])
        if not math.isfinite(loss):
            raise NumericError(f"loss became non-finite at iteration {start_iteration + it}")
        grads = g.backward(grad)
        sgd_step(g.weights, grads, lr, cfg.momentum, state, cfg.weight_decay, frozen)
        done = it + 1
        if done % cfg.eval_interval == 0 or done == cfg.iterations:
            _, top1, top5 = evaluate(g, eval_images, eval_labels)
            row = {"iteration": start_iteration + done, "lr": lr, "loss": loss, "top1": top1, "top5": top5}
            history.append(row)
            log.info("iter %d lr %.3g loss %.4f top1 %.4f", row["iteration"], lr, loss, top1)
            if metrics_path is not None:
                _append_metrics(metrics_path, row)
    return history


def calibrate_graph(g: NetworkGraph, images: np.ndarray, batch: int = 256) -> None:
    """Set every quantizer's scale (abs-max, in graph order) and every binarize grad_norm."""
    for spec in g.layers:
        if spec.kind != "quantize":
            continue
        src = spec.inputs[0]
        batches = (g.forward(images[i:i + batch], until=src) if src != g.input_name else images[i:i + batch]
                   for i in range(0, len(images), batch))
        g.quant[spec.name] = calibrate(batches, int(spec.params["bits"]), bool(spec.params.get("signed", False)))
    for spec in g.layers:
        if spec.kind == "binarize":
            planes = (g.forward(images[i:i + batch], until=spec.output) for i in range(0, len(images), batch))
            spec.params["grad_norm"] = gf2.estimate_grad_norm((p, int(spec.params["bits"])) for p in planes)
    g.validate()


@dataclass
class QuantConfig:
    bits: int = 8
    targets: list[str] = field(default_factory=list)
    signed: bool = False


@dataclass
class CompressionConfig:
    mode: str = "none"
    stored_bits: int | None = None
    init: str | None = None
    noise: float = 1e-3

    @property
    def enabled(self) -> bool:
        return self.mode not in (None, "", "none")


def quantize_model(g: NetworkGraph, qcfg: QuantConfig, ccfg: CompressionConfig | None = None,
                   seed: int = 0) -> NetworkGraph:
    """Copy of ``g`` with quantizers (and optionally compression sandwiches) on the target edges."""
    q = g.copy()
    if not qcfg.targets:
        raise ConfigError("quantization needs at least one target edge")
    for t in qcfg.targets:
        if t not in q.edges:
            raise GraphError(f"quantization target {t!r} is not an edge of the graph")
        if ccfg is not None and ccfg.enabled:
            c = q.edges[t].shape[0]
            ct = (ccfg.stored_bits or qcfg.bits) * c
            insert_compression(q, t, qcfg.bits, ccfg.mode, ct, init=ccfg.init, noise=ccfg.noise,
                               seed=seed, signed=qcfg.signed)
        else:
            insert_quantization(q, t, qcfg.bits, qcfg.signed)
    return q


def retrain_from_quantized(g: NetworkGraph, images: np.ndarray, labels: np.ndarray, qcfg: QuantConfig,
                           ccfg: CompressionConfig | None, cfg: TrainConfig, eval_set=None,
                           metrics_path=None, calib_images=None):
    """calibrate -> insert quantize/binarize/compression (identity-initialized) -> finetune.

    Returns (graph, metrics before finetuning, history).
    """
    if not g.weights:
        raise GraphError("retraining needs a trained float model")
    g.check_weights()
    q = quantize_model(g, qcfg, ccfg, cfg.seed)
    calibrate_graph(q, calib_images if calib_images is not None else images[: min(len(images), 1024)])
    eval_images, eval_labels = eval_set if eval_set is not None else (images, labels)
    before = evaluate(q, eval_images, eval_labels)
    if metrics_path is not None:
        _append_metrics(metrics_path, {"iteration": 0, "lr": 0.0, "loss": before[0],
                                       "top1": before[1], "top5": before[2]})
    history = train(q, images, labels, cfg, (eval_images, eval_labels), metrics_path)
    return q, before, history


# ----------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    errors: dict[str, float]
    checked: dict[str, int]
    excluded: dict[str, int]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values()) and sum(self.checked.values()) > 0

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def lines(self) -> list[str]:
        out = [f"{k}: normwise rel err {v:.3e} over {self.checked[k]} coords ({self.excluded[k]} kink-filtered)"
               for k, v in sorted(self.errors.items())]
        out.append(f"{'PASS' if self.passed else 'FAIL'} (tolerance {self.tolerance:g})")
        return out


def _kink_signature(g: NetworkGraph) -> list[np.ndarray]:
    """Which side of every non-differentiable point each activation sits on."""
    sig = []
    for spec in g.layers:
        cache = g._cache.get(spec.name)
        if spec.kind == "conv" and spec.params.get("activation") == "relu":
            sig.append(cache[1] > 0)
        elif spec.kind == "relu":
            sig.append(cache > 0)
        elif spec.kind == "maxpool":
            sig.append(cache[1])
        elif spec.kind == "quantize":
            sig.append(in_range_mask(cache, g.quant_params(spec.name)))
    return sig


def _normwise_error(num: np.ndarray, ana: np.ndarray, atol: float) -> float:
    """max|num - ana| relative to the larger max-magnitude of the two; 0 when both are below atol."""
    if num.size == 0:
        return 0.0
    scale = max(np.abs(num).max(), np.abs(ana).max())
    return float(np.abs(num - ana).max() / scale) if scale > atol else 0.0


def finite_diff_check(g: NetworkGraph, x: np.ndarray, labels: np.ndarray | None = None,
                      tolerance: float | None = None, h: float | None = None, dtype=np.float64,
                      max_coords: int = 24, seed: int = 0, atol: float | None = None) -> GradCheckReport:
    """Compare analytic gradients to central differences (quantizers in pass-through).

    The error per parameter tensor is normwise: the largest coordinate
    discrepancy over the largest gradient magnitude among checked coordinates.

    The loss is softmax cross-entropy when ``labels`` are given, otherwise a
    fixed random projection of the output. Coordinates whose +-h perturbation
    moves any ReLU, max-pool argmax or quantizer clip boundary are excluded.
    """
    single = np.dtype(dtype) == np.float32
    tolerance = tolerance if tolerance is not None else (1e-3 if single else 1e-5)
    h = h if h is not None else (1e-2 if single else 1e-5)
    atol = atol if atol is not None else (1e-4 if single else 1e-9)
    work = g.astype(dtype)
    x = np.array(x, dtype)
    rng = np.random.default_rng(seed)
    probe = None

    def loss_and_grad(xx):
        nonlocal probe
        out = work.forward(xx, keep=True, passthrough=True)
        if labels is not None:
            loss, gout = softmax_xent(out, labels)
        else:
            if probe is None:
                probe = rng.standard_normal(out.shape).astype(dtype)
            loss, gout = float((out.astype(np.float64) * probe).sum()), probe
        return loss, gout

    def loss_only(xx):
        loss, _ = loss_and_grad(xx)
        sig = _kink_signature(work)
        work._cache = None
        return loss, sig

    base_loss, gout = loss_and_grad(x)
    base_sig = _kink_signature(work)
    grads = work.backward(gout)
    grads["input"] = {"x": work.input_grad}
    targets = {"input": {"x": x}}
    targets.update({k: v for k, v in work.weights.items() if k in grads})

    errors, checked, excluded = {}, {}, {}
    for lname, params in targets.items():
        for key, arr in params.items():
            if not np.issubdtype(arr.dtype, np.floating):
                continue
            name = f"{lname}.{key}"
            ana = grads[lname][key]
            flat = arr.reshape(-1)
            picks = np.arange(flat.size) if flat.size <= max_coords else rng.choice(flat.size, max_coords, replace=False)
            nums, anas, n_skip = [], [], 0
            for i in picks:
                old = flat[i]
                flat[i] = old + h
                lp, sp = loss_only(x)
                flat[i] = old - h
                lm, sm = loss_only(x)
                flat[i] = old
                if any(not np.array_equal(a, b) for a, b in zip(base_sig, sp)) or \
                        any(not np.array_equal(a, b) for a, b in zip(base_sig, sm)):
                    n_skip += 1
                    continue
                nums.append((lp - lm) / (2 * h))
                anas.append(float(ana.reshape(-1)[i]))
            errors[name] = _normwise_error(np.array(nums), np.array(anas), atol)
            checked[name], excluded[name] = len(nums), n_skip
    return GradCheckReport(errors, checked, excluded, tolerance)
