"""Central finite differences and the gradient-check suite.

The error reported for a case is ``max|analytic - numeric|`` divided by the
largest gradient magnitude seen (either route), computed per checked tensor.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from . import functional as F
from . import tensor as T
from .tensor import Tensor, new_tape, no_grad

TOLERANCE = 1e-5


def _step(x: np.ndarray) -> np.ndarray:
    return 1e-6 * (1.0 + np.abs(x))


def finite_diff_grad(f: Callable, x, h: Optional[float] = None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` receives a Tensor; the step defaults to ``1e-6 * (1 + |x_i|)`` per element.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    steps = _step(base) if h is None else np.full(base.shape, float(h))
    grad = np.zeros_like(base)
    with no_grad():
        for i in np.ndindex(base.shape):
            hi = steps[i]
            xp = base.copy()
            xp[i] += hi
            fp = _scalar(f(Tensor(xp)))
            xp[i] = base[i] - hi
            fm = _scalar(f(Tensor(xp)))
            grad[i] = (fp - fm) / (2 * hi)
    return grad


def _scalar(v) -> float:
    return float(v.data) if isinstance(v, Tensor) else float(v)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(fn: Callable[[], Tensor], tensors: list, max_elems: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> float:
    """Compare ``backward()`` against central differences for every tensor in ``tensors``.

    ``fn`` re-runs the forward pass from the tensors' current data.  With
    ``max_elems`` only that many randomly chosen elements per tensor are probed.
    Returns the worst relative error.
    """
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    new_tape()
    loss = fn()
    loss.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]
    worst = 0.0
    with no_grad():
        for t, ga in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_elems is not None and flat.size > max_elems:
                idx = (rng or np.random.default_rng(0)).choice(flat.size, max_elems, replace=False)
            num = np.empty(len(idx))
            for n, i in enumerate(idx):
                orig = flat[i]
                h = 1e-6 * (1.0 + abs(orig))
                flat[i] = orig + h
                fp = _scalar(fn())
                flat[i] = orig - h
                fm = _scalar(fn())
                flat[i] = orig
                num[n] = (fp - fm) / (2 * h)
            worst = max(worst, relative_error(ga.reshape(-1)[idx], num))
    return worst


# ---------------------------------------------------------------------------
# the suite
# ---------------------------------------------------------------------------

@dataclass
class CaseResult:
    group: str
    name: str
    shape: str
    seed: int
    error: float

    @property
    def ok(self) -> bool:
        return self.error < TOLERANCE


def _weighted_sum(out: Tensor, w: np.ndarray) -> Tensor:
    return T.tsum(out * w)


def _op_case(op, in_shapes, rng, positive=False, extra=None):
    """Generic case: random inputs, scalarised by a fixed random weighting."""
    ins = []
    for s in in_shapes:
        a = rng.normal(size=s)
        ins.append(Tensor(np.abs(a) + 0.5 if positive else a))
    w = None

    def fn():
        nonlocal w
        out = op(*ins)
        if w is None:
            w = rng.normal(size=out.shape)
        return _weighted_sum(out, w)

    fn()
    return fn, ins


_SHAPES_4D = [(1, 2, 4, 4), (2, 3, 4, 4), (1, 4, 6, 6), (2, 2, 8, 8), (1, 1, 4, 8)]
_SHAPES_2D = [(2, 3), (3, 4), (1, 5), (4, 2), (3, 3)]


def _tensor_cases():
    """(name, builder(rng, i)) for the core tensor ops."""
    s2, s4 = _SHAPES_2D, _SHAPES_4D
    return [
        ("add_broadcast", lambda r, i: _op_case(T.add, [s2[i], s2[i][1:]], r)),
        ("sub", lambda r, i: _op_case(T.sub, [s2[i], s2[i]], r)),
        ("mul_broadcast", lambda r, i: _op_case(T.mul, [s4[i], (1, s4[i][1], 1, 1)], r)),
        ("div", lambda r, i: _op_case(T.div, [s2[i], s2[i]], r, positive=True)),
        ("pow", lambda r, i: _op_case(lambda a: T.power(a, 2.5), [s2[i]], r, positive=True)),
        ("exp", lambda r, i: _op_case(T.exp, [s2[i]], r)),
        ("log", lambda r, i: _op_case(T.log, [s2[i]], r, positive=True)),
        ("sigmoid", lambda r, i: _op_case(T.sigmoid, [s4[i]], r)),
        ("tanh", lambda r, i: _op_case(T.tanh, [s2[i]], r)),
        ("sum_axis", lambda r, i: _op_case(lambda a: T.tsum(a, axis=1, keepdims=True), [s4[i]], r)),
        ("mean_axis", lambda r, i: _op_case(lambda a: T.mean(a, axis=(2, 3)), [s4[i]], r)),
        ("min_axis", lambda r, i: _op_case(lambda a: T.tmin(a, axis=-1), [s2[i]], r)),
        ("max_axis", lambda r, i: _op_case(lambda a: T.tmax(a, axis=0), [s2[i]], r)),
        ("matmul_batched", lambda r, i: _op_case(T.matmul, [(2, 3, i + 1, 4), (3, 4, 2)], r)),
        ("matmul_shared_weight", lambda r, i: _op_case(T.matmul, [(2, i + 2, 3), (3, 4)], r)),
        ("reshape", lambda r, i: _op_case(lambda a: T.reshape(a, (-1,)), [s4[i]], r)),
        ("transpose", lambda r, i: _op_case(lambda a: T.transpose(a, (0, 2, 3, 1)), [s4[i]], r)),
        ("concat", lambda r, i: _op_case(lambda a, b: T.concat([a, b], axis=1), [s4[i], s4[i]], r)),
        ("getitem_slice", lambda r, i: _op_case(lambda a: a[:, 1:, ::2], [s4[i][1:] + (1,)], r)),
        ("getitem_advanced", lambda r, i: _op_case(lambda a: T.getitem(a, (slice(None), np.array([0, 0, -1]))), [s2[i]], r)),
        ("pad", lambda r, i: _op_case(lambda a: T.pad(a, ((0, 0), (0, 0), (0, 2), (1, 3))), [s4[i]], r)),
        ("gather_mask", lambda r, i: _op_case(lambda a: T.gather_mask(a, (np.arange(a.size) % 3 == 0).reshape(a.shape)), [s4[i]], r)),
        ("clamp_min", lambda r, i: _op_case(lambda a: T.clamp_min(a, 0.1), [s2[i]], r)),
        ("softmax", lambda r, i: _op_case(lambda a: F.softmax(a, axis=1), [s4[i]], r)),
        ("log_softmax", lambda r, i: _op_case(lambda a: F.log_softmax(a, axis=-1), [s2[i]], r)),
        ("gelu", lambda r, i: _op_case(F.gelu, [s4[i]], r)),
        ("layernorm", lambda r, i: _op_case(lambda a, w, b: F.layernorm(a, w, b, axis=1),
                                            [s4[i], (s4[i][1],), (s4[i][1],)], r)),
        ("conv2d_padded", lambda r, i: _op_case(lambda a, w, b: F.conv2d(a, w, b, stride=1 + i % 2, padding=1),
                                                [s4[i], (3, s4[i][1], 3, 3), (3,)], r)),
        ("conv2d_patch", lambda r, i: _op_case(lambda a, w: F.conv2d(a, w, stride=2),
                                               [s4[i], (2, s4[i][1], 2, 2)], r)),
        ("conv2d_depthwise", lambda r, i: _op_case(lambda a, w: F.conv2d(a, w, padding=1, groups=a.shape[1]),
                                                   [s4[i], (s4[i][1], 1, 3, 3)], r)),
        ("avgpool2d", lambda r, i: _op_case(lambda a: F.avgpool2d(a, 2), [s4[i]], r)),
        ("global_avgpool", lambda r, i: _op_case(F.global_avgpool, [s4[i]], r)),
        ("interpolate_nearest", lambda r, i: _op_case(lambda a: F.interpolate_nearest(a, 2), [s4[i]], r)),
        ("interpolate_bilinear", lambda r, i: _op_case(lambda a: F.interpolate_bilinear(a, 1 + i % 3 + 1), [s4[i]], r)),
    ]


def _module_case(module, in_shapes, rng, call=None, max_param_elems=24):
    ins = [Tensor(rng.normal(size=s)) for s in in_shapes]
    for p in module.parameters():
        # move every parameter off its init value (zeros, ones) so all paths are exercised
        p.data = p.data + rng.normal(scale=0.3, size=p.shape)
    params = module.parameters()
    w = None

    def fn():
        nonlocal w
        out = call(*ins) if call else module(*ins)
        if w is None:
            w = rng.normal(size=out.shape)
        return _weighted_sum(out, w)

    fn()
    return fn, ins, params, max_param_elems


def _attention_cases():
    from .blocks import (GlobalSubsampledAttention, LocalGroupAttention, Mlp, PatchEmbed,
                         StageConfig, TransformerBlock)

    lsa_shapes = [((1, 4, 4, 4), 2), ((2, 4, 4, 4), 4), ((1, 8, 6, 6), 4), ((1, 4, 8, 8), 4), ((1, 4, 3, 5), 2)]
    gsa_shapes = [((1, 4, 4, 4), 1), ((1, 4, 4, 4), 2), ((2, 8, 4, 4), 2), ((1, 4, 6, 6), 4), ((1, 4, 5, 3), 2)]
    blk_shapes = [(1, 8, 4, 4), (1, 4, 4, 4), (2, 4, 4, 4), (1, 8, 2, 6), (1, 4, 8, 8)]
    pe_shapes = [((1, 1, 8, 8), 4, 8), ((2, 2, 4, 4), 2, 4), ((1, 3, 6, 6), 2, 4), ((1, 1, 7, 9), 4, 4), ((1, 4, 4, 8), 2, 8)]

    def lsa_case(r, i):
        shp, ws = lsa_shapes[i]
        return _module_case(LocalGroupAttention(shp[1], 2, ws, r, std=0.3), [shp], r)

    def gsa_case(r, i):
        shp, sr = gsa_shapes[i]
        return _module_case(GlobalSubsampledAttention(shp[1], 2, sr, r, std=0.3), [shp], r)

    def mlp_case(r, i):
        shp = blk_shapes[i]
        return _module_case(Mlp(shp[-1], 2.0, r, std=0.3), [shp], r)

    def pe_case(r, i):
        shp, s, c = pe_shapes[i]
        return _module_case(PatchEmbed(shp[1], c, s, r), [shp], r)

    def block_case(r, i):
        shp = blk_shapes[i]
        cfg = StageConfig(shp[1], shp[1], 1, depth=1, window=2, sr_ratio=2, mlp_ratio=2.0, num_heads=2)
        return _module_case(TransformerBlock(cfg, r, std=0.3), [shp], r)

    return [("patch_embed", pe_case), ("lsa", lsa_case), ("gsa", gsa_case), ("mlp", mlp_case),
            ("transformer_block", block_case)]


def _msfif_cases():
    from .msfif import McAb, MsFif

    mc_shapes = [(1, 8, 4, 4), (2, 4, 4, 4), (1, 8, 2, 6), (1, 4, 6, 6), (1, 12, 3, 3)]
    fif_shapes = [(1, 4, 4, 4), (2, 4, 4, 4), (1, 8, 2, 2), (1, 4, 6, 2), (1, 4, 2, 8)]

    def mc_case(r, i):
        shp = mc_shapes[i]
        return _module_case(McAb(shp[1], 2, r), [shp], r)

    def fif_case(r, i):
        b, c, h, w = fif_shapes[i]
        return _module_case(MsFif(c, 2, r), [(b, c, h, w), (b, 2 * c, h // 2, w // 2)], r)

    return [("mc_ab", mc_case), ("ms_fif", fif_case)]


def tiny_model_config(num_classes: int = 3, **kw):
    from .config import ModelConfig

    base = dict(embed_dims=(4, 8, 16, 32), depths=(1, 1, 1, 1), decoder_depths=(1, 1, 1, 1),
                head_dim=4, mlp_ratio=1.0, window=2, sr_ratios=(2, 1, 1, 1), sr_reference_size=32,
                img_size=32, mcab_reduction=2, num_classes=num_classes, init_std=0.2)
    base.update(kw)
    return ModelConfig(**base)


def _model_cases():
    from .losses import level_predictions, combined_loss, training_levels
    from .model import MsTwins

    sizes = [(1, 32, 32), (1, 32, 64), (2, 32, 32), (1, 64, 32), (1, 40, 36)]

    def encode_case(r, i):
        b, h, w = sizes[i]
        m = MsTwins(tiny_model_config(), seed=int(r.integers(1 << 30)))
        return _model_case(m, (b, 1, h, w), r, lambda x: T.concat([f.reshape(-1) for f in m.encode(x).levels]))

    def fuse_case(r, i):
        b, h, w = sizes[i]
        m = MsTwins(tiny_model_config(), seed=int(r.integers(1 << 30)))
        return _model_case(m, (b, 1, h, w), r,
                           lambda x: T.concat([f.reshape(-1) for f in m.fuse_pyramid(m.encode(x)).levels]))

    def net_case(r, i):
        b, h, w = sizes[i]
        m = MsTwins(tiny_model_config(), seed=int(r.integers(1 << 30)))
        return _model_case(m, (b, 1, h, w), r, lambda x: m(x).final_logits)

    def net_loss_case(r, i):
        b, h, w = sizes[i]
        cfg = tiny_model_config(cascade="downsample" if i == 4 else "residual", use_msfif=i != 3)
        m = MsTwins(cfg, seed=int(r.integers(1 << 30)))
        y = r.integers(0, 3, size=(b, h, w))

        def loss(x):
            return combined_loss(level_predictions(*training_levels(m(x)), y))

        return _model_case(m, (b, 1, h, w), r, loss, scalar=True)

    return [("encode", encode_case), ("fuse_pyramid", fuse_case), ("network_logits", net_case),
            ("network_combined_loss", net_loss_case)]


def _model_case(model, x_shape, rng, forward, scalar=False):
    x = Tensor(rng.normal(size=x_shape))
    # probe a random 4x4 input patch plus a random subset of parameter entries
    h0 = int(rng.integers(0, x_shape[2] - 3))
    w0 = int(rng.integers(0, x_shape[3] - 3))
    w = None

    def fn():
        nonlocal w
        out = forward(x)
        if scalar:
            return out
        if w is None:
            w = rng.normal(size=out.shape)
        return _weighted_sum(out, w)

    fn()
    patch = np.zeros(x_shape, dtype=bool)
    patch[0, 0, h0:h0 + 4, w0:w0 + 4] = True
    return fn, [x], model.parameters(), 12, patch


def _loss_cases():
    from .config import LossConfig
    from .losses import balance_loss, cascade_error_masks, combined_loss, contrastive_loss, downsample_labels

    shapes = [(1, 3, 4, 4), (2, 2, 4, 4), (1, 4, 8, 8), (2, 3, 8, 8), (1, 5, 4, 4)]

    def setup(r, i, levels=2):
        b, k, h, w = shapes[i]
        logits = [Tensor(r.normal(size=(b, k, h >> j, w >> j))) for j in range(levels)]
        y = r.integers(0, k, size=(b, h, w))
        labels = [downsample_labels(y, 1 << j) for j in range(levels)]
        return logits, labels

    def con_case(mode, square):
        def build(r, i):
            logits, _ = setup(r, i)
            cfg = LossConfig(pair_reduce=mode, dice_square=square)
            return (lambda: contrastive_loss([F.softmax(lg, axis=1) for lg in logits], cfg)), logits
        return build

    def bal_case(q_kind):
        def build(r, i):
            logits, labels = setup(r, i)
            k = logits[0].shape[1]
            q = {"zero": np.zeros(k), "two": np.full(k, 2.0), "per_class": r.uniform(0.5, 3.0, size=k)}[q_kind]
            masks = cascade_error_masks(logits, labels)
            return (lambda: balance_loss([F.softmax(lg, axis=1) for lg in logits], labels, masks, q)), logits
        return build

    def combined_case(r, i):
        logits, labels = setup(r, i, levels=3 if shapes[i][2] >= 8 else 2)
        cfg = LossConfig(alpha=1.0)

        def fn():
            from .losses import LevelPredictions
            probs = [F.softmax(lg, axis=1) for lg in logits]
            return combined_loss(LevelPredictions(probs, labels, cascade_error_masks(logits, labels)), cfg)

        return fn, logits

    return [("contrastive_min", con_case("min", False)), ("contrastive_max", con_case("max", False)),
            ("contrastive_square", con_case("min", True)), ("balance_q0", bal_case("zero")),
            ("balance_q2", bal_case("two")), ("balance_per_class_q", bal_case("per_class")),
            ("combined", combined_case)]


GROUPS = {
    "tensor": _tensor_cases,
    "attention": _attention_cases,
    "msfif": _msfif_cases,
    "model": _model_cases,
    "losses": _loss_cases,
}


def run_case(group: str, name: str, builder, seed: int, i: int) -> CaseResult:
    rng = np.random.default_rng([seed, i, zlib.crc32(name.encode())])
    built = builder(rng, i)
    if group in ("tensor", "losses"):
        fn, ins = built
        err = check_gradients(fn, ins)
    elif group == "model":
        fn, ins, params, per_param, patch = built
        err = _check_model(fn, ins[0], params, per_param, patch, rng)
    else:
        fn, ins, params, max_param = built
        err = max(check_gradients(fn, ins), check_gradients(fn, params, max_elems=max_param, rng=rng))
    shape = "x".join(str(d) for d in ins[0].shape)
    return CaseResult(group, name, shape, seed, err)


def _check_model(fn, x, params, n_param, patch, rng) -> float:
    """Input-patch gradients plus ``n_param`` entries drawn from random parameter tensors."""
    x.requires_grad = True
    for p in params:
        p.grad = None
    new_tape()
    fn().backward()
    picks = rng.choice(len(params), min(n_param, len(params)), replace=False)
    groups = [[(x, i) for i in np.flatnonzero(patch)],
              [(params[k], int(rng.integers(params[k].size))) for k in picks]]
    worst = 0.0
    with no_grad():
        for group in groups:
            ana, num = [], []
            for t, i in group:
                flat = t.data.reshape(-1)
                orig = flat[i]
                h = 1e-6 * (1.0 + abs(orig))
                flat[i] = orig + h
                fp = _scalar(fn())
                flat[i] = orig - h
                fm = _scalar(fn())
                flat[i] = orig
                ana.append(0.0 if t.grad is None else t.grad.reshape(-1)[i])
                num.append((fp - fm) / (2 * h))
            worst = max(worst, relative_error(np.array(ana), np.array(num)))
    return worst


def run_suite(groups: Iterable[str] = tuple(GROUPS), seeds=(0, 1, 2), n_shapes: int = 5,
              report: Optional[Callable[[CaseResult], None]] = None) -> list:
    results = []
    for group in groups:
        for name, builder in GROUPS[group]():
            for seed in seeds:
                for i in range(n_shapes):
                    res = run_case(group, name, builder, seed, i)
                    results.append(res)
                    if report:
                        report(res)
    return results


def main_report(groups, stream=print) -> bool:
    t0 = time.time()
    results = run_suite(groups)
    by_op: dict = {}
    for r in results:
        by_op.setdefault((r.group, r.name), []).append(r)
    for (g, n), rs in by_op.items():
        worst = max(r.error for r in rs)
        flag = "PASS" if worst < TOLERANCE else "FAIL"
        stream(f"{flag}  {g:<9} {n:<24} cases={len(rs):<3} max_rel_err={worst:.2e}")
    ok = all(r.ok for r in results)
    stream(f"{'PASS' if ok else 'FAIL'}  {len(results)} cases in {time.time() - t0:.1f}s (tolerance {TOLERANCE:g})")
    return ok
