"""Central finite-difference checks of every backward rule, at float64."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import acw_loss, graph_head, multiview
from .backbone import Backbone
from .layers import BatchNorm
from .model import MSCGNet
from .numerics import RngState, Var, backward, ops, param

STEP = 1e-5
TOLERANCE = 1e-4
FLOOR = 1e-8


@dataclass
class CheckResult:
    component: str
    name: str
    max_rel_err: float
    checked: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """``|a - n| / max(|a|, |n|)``, zero where ``|a| + |n| < 1e-8``."""
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    scale = np.maximum(np.abs(a), np.abs(n))
    keep = np.abs(a) + np.abs(n) >= FLOOR
    out = np.zeros_like(a)
    out[keep] = np.abs(a - n)[keep] / scale[keep]
    return out


def check_params(loss_fn: Callable[[], Var], params, rng: RngState, probes: int = 12,
                 step: float = STEP, extended=()) -> tuple[float, int]:
    """Compare analytic and central-difference gradients on sampled elements.

    ``loss_fn`` rebuilds the scalar loss from the current parameter values.
    Leaves listed in ``extended`` are promoted to ``np.longdouble`` for the
    finite differences only: on a composite loss of size ~1 a float64 central
    difference resolves ~1e-10, too coarse for gradient entries near 1e-6.
    Returns the worst relative error and the number of elements compared.
    """
    params = [p for p in params]
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    analytic = [p.grad.copy() for p in params]
    saved = [(v, v.value) for v in {id(v): v for v in [*params, *extended]}.values()] if extended else []
    for v, value in saved:
        v.value = value.astype(np.longdouble)
    try:
        return _numeric_compare(loss_fn, params, analytic, rng, probes, step)
    finally:
        for v, value in saved:
            v.value = value


def _numeric_compare(loss_fn, params, analytic, rng, probes, step) -> tuple[float, int]:
    worst, count = 0.0, 0
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        k = min(probes, flat.size)
        idx = rng.permutation(flat.size)[:k] if flat.size > k else np.arange(flat.size)
        num = np.empty(k)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn().value
            flat[i] = orig - step
            down = loss_fn().value
            flat[i] = orig
            num[j] = float((up - down) / (2 * step))
        err = relative_errors(ga.reshape(-1)[idx], num)
        worst = max(worst, float(err.max(initial=0.0)))
        count += k
    for p in params:
        p.zero_grad()
    return worst, count


def _weighted_sum(out: Var, weights: np.ndarray) -> Var:
    return ops.sum(out * weights)


def elementwise_case(fn, *shapes, low=-2.0, high=2.0):
    """Case builder: random inputs, loss = sum(fn(*inputs) * fixed random weights)."""
    def build(rng: RngState):
        xs = [param(rng.uniform(s, low, high)) for s in shapes]
        w = rng.uniform(np.shape(fn(*[x.value for x in xs]).value), -1, 1)
        return (lambda: _weighted_sum(fn(*xs), w)), xs
    return build


def _bn_case(train: bool):
    def build(rng: RngState):
        x = param(rng.uniform((3, 4, 5), -2, 2))
        bn = BatchNorm(4, channel_axis=1, dtype=np.float64)
        bn.running_mean[:] = rng.uniform(4, -0.5, 0.5)
        bn.running_var[:] = rng.uniform(4, 0.5, 2.0)
        bn.scale.value = rng.uniform(4, 0.5, 1.5)
        bn.shift.value = rng.uniform(4, -0.5, 0.5)
        w = rng.uniform((3, 4, 5), -1, 1)
        rm, rv = bn.running_mean.copy(), bn.running_var.copy()

        def loss():
            # keep buffers fixed between evaluations
            bn.running_mean[:] = rm
            bn.running_var[:] = rv
            return _weighted_sum(bn(x, train), w)
        return loss, [x, bn.scale, bn.shift]
    return build


def _latent_graph_case(rng: RngState):
    mu = param(rng.uniform((2, 9, 3), -1, 1))
    ls = param(rng.uniform((2, 9, 3), -1, 0.5))
    noise = rng.normal((2, 9, 3))
    w = rng.uniform((2, 9, 9), -1, 1)
    wr = rng.uniform((2, 9, 3), -1, 1)

    def loss():
        gb = graph_head.build_graph(mu, ls, noise)
        return (_weighted_sum(gb.a_hat, w) + _weighted_sum(gb.residual, wr) + gb.kl_loss + gb.dl_loss)
    return loss, [mu, ls]


def _diag_loss_case(rng: RngState):
    # diagonal kept inside (0, 1) so the clamp is differentiable at the probe point
    z = rng.uniform((5, 3), -0.5, 0.5)
    a = param(np.abs(z @ z.T) + np.eye(5) * 0.2)

    def loss():
        dl, gamma = graph_head.diagonal_loss(a)
        return dl + 0.3 * gamma
    return loss, [a]


def _scg_module_case(rng: RngState):
    scg = graph_head.SCG(6, 3, 3, rng.substream("scg"), dtype=np.float64)
    x = param(rng.uniform((2, 6, 5, 5), -1, 1))
    w = rng.uniform((2, 9, 9), -1, 1)
    noise_rng = rng.substream("noise")

    def loss():
        gb = scg(x, True, RngState(noise_rng.seed, noise_rng.keys))
        return _weighted_sum(gb.a_hat, w) + ops.sum(gb.residual) * 0.1 + gb.kl_loss + gb.dl_loss
    return loss, [x, scg.conv_mu.weight, scg.conv_mu.bias, scg.conv_logsigma.weight, scg.conv_logsigma.bias]


def _gcn_case(rng: RngState):
    gcn = graph_head.GCN(5, 4, 3, rng.substream("gcn"), dtype=np.float64)
    z = rng.uniform((2, 6, 2), -1, 1)
    a_hat = graph_head.normalize_adjacency(np.maximum(z @ np.swapaxes(z, 1, 2), 0)).value
    x = param(rng.uniform((2, 6, 5), -1, 1))
    w = rng.uniform((2, 6, 3), -1, 1)
    return (lambda: _weighted_sum(gcn(a_hat, x, True), w)), [x, gcn.theta_1, gcn.theta_2, gcn.bn.scale]


def _fuse_case(rng: RngState):
    outs = [param(rng.uniform((2, 9, 3), -1, 1)) for _ in range(3)]
    w = rng.uniform((2, 3, 3, 3), -1, 1)
    return (lambda: _weighted_sum(multiview.fuse(outs, (0, 1, 2)), w)), outs


def _head_case(rng: RngState):
    head = multiview.MultiViewHead(4, 5, 3, 3, rng.substream("head"), dtype=np.float64)
    x = param(rng.uniform((2, 4, 3, 3), -1, 1))
    w = rng.uniform((2, 3, 3, 3), -1, 1)
    nrng = rng.substream("noise")

    def loss():
        fused, bundle = head(x, True, RngState(nrng.seed, nrng.keys))
        return _weighted_sum(fused, w) + sum((g.kl_loss + g.dl_loss for g in bundle.graphs), start=Var(0.0))
    return loss, [x, head.scg.conv_mu.weight, head.gcn.theta_1, head.gcn.theta_2]


def _backbone_case(rng: RngState):
    bb = Backbone(rng.substream("bb"), out_channels=8, widths=(4, 6, 8), dtype=np.float64)
    x = param(rng.uniform((1, 4, 32, 32), 0, 1))
    w = rng.uniform((1, 8, 2, 2), -1, 1)
    return (lambda: _weighted_sum(bb(x, True), w)), [x, bb.conv1.weight, bb.conv2.weight, bb.conv4.weight,
                                                     bb.bn4.shift, bb.bn2.scale]


def _labels(rng: RngState, shape):
    b, c, h, w = shape
    cls = rng.integers(0, c, size=(b, h, w))
    y = np.zeros(shape)
    np.put_along_axis(y, cls[:, None], 1.0, axis=1)
    return y


def _acw_case(rng: RngState):
    shape = (2, 4, 5, 5)
    y = _labels(rng, shape)
    valid = (rng.uniform((2, 1, 5, 5)) > 0.2).astype(float)
    state = acw_loss.ClassFrequencyState(4)
    acw_loss.update_frequency(state, y, valid)
    logits = param(rng.uniform(shape, -2, 2))
    kl = param(np.array(0.3))
    return (lambda: acw_loss.acw_total(y, ops.softmax(logits, 1), state, kl, 0.1, valid).total), [logits, kl]


def _dice_case(rng: RngState):
    shape = (2, 3, 4, 4)
    y = _labels(rng, shape)
    logits = param(rng.uniform(shape, -2, 2))
    return (lambda: acw_loss.dice_total(y, ops.softmax(logits, 1)).total), [logits]


def _ce_case(rng: RngState):
    shape = (2, 3, 4, 4)
    y = _labels(rng, shape)
    logits = param(rng.uniform(shape, -2, 2))
    return (lambda: acw_loss.cross_entropy_total(y, logits).total), [logits]


def pipeline_case(rng: RngState, loss_kind: str = "acw"):
    """Full network on a 2-image 32x32 batch; returns (loss_fn, probed params, all leaves)."""
    net = MSCGNet(num_classes=4, feature_dim=8, hidden_dim=6, node_side=2, seed=3,
                  dtype=np.float64, widths=(4, 6, 8))
    images = rng.uniform((2, 4, 32, 32), 0, 1)
    y = _labels(rng, (2, 4, 32, 32))
    valid = (rng.uniform((2, 1, 32, 32)) > 0.1).astype(float)
    state = acw_loss.ClassFrequencyState(4)
    acw_loss.update_frequency(state, y, valid)
    nrng = rng.substream("noise")

    def loss():
        out = net(images, True, RngState(nrng.seed, nrng.keys))
        probs = ops.softmax(out.logits, 1)
        if loss_kind == "dice":
            return acw_loss.dice_total(y, probs, out.kl, out.dl, valid).total
        return acw_loss.acw_total(y, probs, state, out.kl, out.dl, valid).total
    probed = [net.backbone.conv1.weight, net.backbone.conv3.weight, net.backbone.bn4.scale,
              net.head.scg.conv_mu.weight, net.head.scg.conv_logsigma.weight, net.head.scg.conv_mu.bias,
              net.head.gcn.theta_1, net.head.gcn.theta_2, net.head.gcn.bn.shift]
    return loss, probed, net.parameters()


CASES: list[tuple[str, str, Callable]] = [
    ("numerics", "add_broadcast", elementwise_case(ops.add, (3, 4), (4,))),
    ("numerics", "sub", elementwise_case(ops.sub, (3, 4), (3, 1))),
    ("numerics", "mul_broadcast", elementwise_case(ops.mul, (2, 3, 4), (3, 1))),
    ("numerics", "div", elementwise_case(ops.div, (3, 4), (3, 4), low=0.2, high=2.0)),
    ("numerics", "square", elementwise_case(ops.square, (3, 4))),
    ("numerics", "power", elementwise_case(lambda a: ops.power(a, -0.5), (3, 4), low=0.2, high=2.0)),
    ("numerics", "sqrt", elementwise_case(ops.sqrt, (3, 4), low=0.2, high=2.0)),
    ("numerics", "exp", elementwise_case(ops.exp, (3, 4))),
    ("numerics", "log", elementwise_case(ops.log, (3, 4), low=0.1, high=2.0)),
    ("numerics", "relu", elementwise_case(ops.relu, (4, 5))),
    ("numerics", "clamp", elementwise_case(lambda a: ops.clamp(a, -1.0, 1.0), (4, 5))),
    ("numerics", "matmul", elementwise_case(ops.matmul, (4, 5), (5, 3))),
    ("numerics", "matmul_batched", elementwise_case(ops.matmul, (2, 4, 5), (5, 3))),
    ("numerics", "transpose", elementwise_case(lambda a: ops.transpose(a, (2, 0, 1)), (2, 3, 4))),
    ("numerics", "reshape", elementwise_case(lambda a: ops.reshape(a, (6, 4)), (2, 3, 4))),
    ("numerics", "rot90", elementwise_case(lambda a: ops.rot90(a, 1), (2, 3, 3))),
    ("numerics", "diagonal", elementwise_case(ops.diagonal, (2, 4, 4))),
    ("numerics", "stack", elementwise_case(lambda a, b: ops.stack([a, b], 1), (3, 2), (3, 2))),
    ("numerics", "sum_axis", elementwise_case(lambda a: ops.sum(a, axis=1), (3, 4, 2))),
    ("numerics", "mean_axes", elementwise_case(lambda a: ops.mean(a, axis=(0, 2), keepdims=True), (3, 4, 2))),
    ("numerics", "max_axis", elementwise_case(lambda a: ops.max(a, axis=-1), (3, 5))),
    ("numerics", "softmax", elementwise_case(lambda a: ops.softmax(a, 1), (2, 4, 3))),
    ("numerics", "log_softmax", elementwise_case(lambda a: ops.log_softmax(a, 1), (2, 4, 3))),
    ("numerics", "conv2d", elementwise_case(lambda x, w, b: ops.conv2d(x, w, b, stride=1, padding=1),
                                            (2, 3, 5, 5), (4, 3, 3, 3), (4,))),
    ("numerics", "conv2d_stride2", elementwise_case(lambda x, w: ops.conv2d(x, w, stride=2, padding=1),
                                                    (1, 2, 6, 6), (3, 2, 3, 3))),
    ("numerics", "adaptive_avg_pool", elementwise_case(lambda a: ops.adaptive_avg_pool(a, 3, 2), (1, 2, 7, 5))),
    ("numerics", "upsample_bilinear", elementwise_case(lambda a: ops.upsample_bilinear(a, 7, 8), (1, 2, 3, 4))),
    ("numerics", "batch_norm_train", _bn_case(True)),
    ("numerics", "batch_norm_eval", _bn_case(False)),
    ("scg", "kl_divergence", elementwise_case(graph_head.kl_divergence, (2, 6, 3), (2, 6, 3), low=-1, high=1)),
    ("scg", "diagonal_loss", _diag_loss_case),
    ("scg", "enhance_diagonal", elementwise_case(
        lambda a, g: graph_head.enhance_diagonal(a, g), (2, 4, 4), (2,), low=0.1, high=2.0)),
    ("scg", "normalize_adjacency", elementwise_case(graph_head.normalize_adjacency, (2, 5, 5), low=0.0, high=2.0)),
    ("scg", "adaptive_residual", elementwise_case(graph_head.adaptive_residual, (2, 4, 3), (2, 4, 3), (2,))),
    ("scg", "latent_graph", _latent_graph_case),
    ("scg", "scg_module", _scg_module_case),
    ("scg", "gcn_forward", _gcn_case),
    ("multiview", "fuse", _fuse_case),
    ("multiview", "project", elementwise_case(lambda a: multiview.project(a, 8, 8), (1, 3, 2, 2))),
    ("multiview", "head", _head_case),
    ("backbone", "backbone_32x32", _backbone_case),
    ("loss", "pnc", elementwise_case(lambda t: acw_loss.pnc(np.eye(4)[:3], t), (3, 4), low=0.05, high=0.95)),
    ("loss", "pixel_weights", elementwise_case(
        lambda t: acw_loss.pixel_weights([1.0, 2.0, 0.5], np.eye(3)[None, :, :, None].repeat(2, 3), t),
        (1, 3, 3, 2), low=0.05, high=0.95)),
    ("loss", "dice_coefficients", elementwise_case(
        lambda t: acw_loss.dice_coefficients(np.eye(3)[None, :, :, None].repeat(2, 3), t),
        (1, 3, 3, 2), low=0.05, high=0.95)),
    ("loss", "acw_total", _acw_case),
    ("loss", "dice_total", _dice_case),
    ("loss", "cross_entropy", _ce_case),
    ("pipeline", "mscg_acw", pipeline_case),
    ("pipeline", "mscg_dice", lambda rng: pipeline_case(rng, "dice")),
]

SELECTORS = ("all", "numerics", "scg", "multiview", "backbone", "loss", "pipeline")


def run(selector: str = "all", seed: int = 0, probes: int = 12) -> list[CheckResult]:
    if selector not in SELECTORS:
        raise ValueError(f"unknown selector {selector!r}; choose from {', '.join(SELECTORS)}")
    results = []
    for component, name, build in CASES:
        if selector != "all" and component != selector:
            continue
        rng = RngState(seed).substream("gradcheck", name)
        t0 = time.perf_counter()
        loss_fn, params, *extended = build(rng)
        err, count = check_params(loss_fn, params, rng.substream("probe"), probes,
                                  extended=extended[0] if extended else ())
        results.append(CheckResult(component, name, err, count, time.perf_counter() - t0))
    return results


def format_table(results: list[CheckResult]) -> str:
    rows = [f"{'component':<10} {'check':<22} {'max rel err':>12} {'n':>5}  status"]
    for r in results:
        rows.append(f"{r.component:<10} {r.name:<22} {r.max_rel_err:>12.3e} {r.checked:>5}  "
                    f"{'ok' if r.passed else 'FAIL'}")
    return "\n".join(rows)
