"""Finite-difference verification suite covering every differentiable op,
both inception block variants, and partial attention.

Each check builds a tiny scalar loss from seeded random inputs and compares
reverse-mode gradients against central differences in f64.  Composite checks
(batch norm and anything containing it) use a narrower FD step because the
normalization rescales relu pre-activations toward the kink.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .blocks import InceptionBlockConfig, ParamStore, PartialAttention, ResidualInception


def _quadratic(y):
    return T.reduce(T.mul(y, y), "mean")


def _check(build, inputs, tolerance, h):
    return T.grad_check(build, inputs, tolerance=tolerance, h=h)


def _layer_inputs(store, base):
    inputs = dict(base)
    for name, p in store.params.items():
        inputs[name] = p.data.astype(np.float64)
    return inputs


def _bind_all(g, store, tensors):
    for name in store.params:
        g.bind(name, tensors[name])


# --- individual op checks; each takes (rng, tolerance) and returns a report


def check_conv2d_same(rng, tol):
    inputs = {"x": rng.normal(size=(2, 2, 5, 5)), "w": rng.normal(size=(3, 2, 3, 3)),
              "b": rng.normal(size=3)}
    return _check(lambda g, t: _quadratic(T.conv2d(t["x"], t["w"], t["b"], 1, "same")),
                  inputs, tol, 1e-5)


def check_conv2d_strided(rng, tol):
    inputs = {"x": rng.normal(size=(2, 2, 6, 6)), "w": rng.normal(size=(2, 2, 3, 3)),
              "b": rng.normal(size=2)}
    return _check(lambda g, t: _quadratic(T.conv2d(t["x"], t["w"], t["b"], 2, "same")),
                  inputs, tol, 1e-5)


def check_conv2d_valid(rng, tol):
    inputs = {"x": rng.normal(size=(2, 2, 5, 5)), "w": rng.normal(size=(2, 2, 2, 2)),
              "b": rng.normal(size=2)}
    return _check(lambda g, t: _quadratic(T.conv2d(t["x"], t["w"], t["b"], 1, "valid")),
                  inputs, tol, 1e-5)


def check_pool_max(rng, tol):
    inputs = {"x": rng.normal(size=(2, 2, 6, 6))}
    return _check(lambda g, t: _quadratic(T.pool2d(t["x"], "max", 2, 2)),
                  inputs, tol, 1e-5)


def check_pool_avg(rng, tol):
    inputs = {"x": rng.normal(size=(2, 2, 6, 6))}
    return _check(lambda g, t: _quadratic(T.pool2d(t["x"], "avg", 3, 1)),
                  inputs, tol, 1e-5)


def _binary_op_check(op):
    def fn(rng, tol):
        inputs = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4)) + 2.0}
        return _check(lambda g, t: _quadratic(op(t["a"], t["b"])), inputs, tol, 1e-5)
    return fn


def _unary_op_check(op):
    def fn(rng, tol):
        inputs = {"a": rng.normal(size=(3, 4))}
        return _check(lambda g, t: _quadratic(op(t["a"])), inputs, tol, 1e-5)
    return fn


def check_concat(rng, tol):
    inputs = {"a": rng.normal(size=(2, 2, 3, 3)), "b": rng.normal(size=(2, 3, 3, 3))}
    return _check(lambda g, t: _quadratic(T.concat_channels([t["a"], t["b"]])),
                  inputs, tol, 1e-5)


def check_dense(rng, tol):
    inputs = {"x": rng.normal(size=(3, 4)), "w": rng.normal(size=(4, 2)),
              "b": rng.normal(size=2)}
    return _check(lambda g, t: _quadratic(T.dense(t["x"], t["w"], t["b"])),
                  inputs, tol, 1e-5)


def check_softmax(rng, tol):
    c = rng.normal(size=(3, 4))
    inputs = {"x": rng.normal(size=(3, 4))}
    return _check(lambda g, t: T.reduce(T.mul(T.softmax(t["x"]), g.constant(c)), "sum"),
                  inputs, tol, 1e-5)


def check_log_softmax(rng, tol):
    c = rng.normal(size=(3, 4))
    inputs = {"x": rng.normal(size=(3, 4))}
    return _check(
        lambda g, t: T.reduce(T.mul(T.log_softmax(t["x"]), g.constant(c)), "sum"),
        inputs, tol, 1e-5)


def check_reduce_sum(rng, tol):
    inputs = {"x": rng.normal(size=(2, 3, 4))}
    return _check(lambda g, t: _quadratic(T.reduce(t["x"], "sum", axes=(1,))),
                  inputs, tol, 1e-5)


def check_reduce_mean(rng, tol):
    inputs = {"x": rng.normal(size=(2, 3, 4))}
    return _check(lambda g, t: _quadratic(T.reduce(t["x"], "mean", axes=(0, 2))),
                  inputs, tol, 1e-5)


def check_reshape(rng, tol):
    inputs = {"x": rng.normal(size=(2, 6))}
    return _check(lambda g, t: _quadratic(T.reshape(t["x"], (3, 4))), inputs, tol, 1e-5)


def check_pad(rng, tol):
    inputs = {"x": rng.normal(size=(1, 2, 3, 3))}
    return _check(lambda g, t: _quadratic(T.pad2d(t["x"], 1, 2, 0, 1)), inputs, tol, 1e-5)


def check_upsample(rng, tol):
    inputs = {"x": rng.normal(size=(1, 2, 3, 3))}
    return _check(lambda g, t: _quadratic(T.upsample2x(t["x"])), inputs, tol, 1e-5)


def check_scale_channels(rng, tol):
    inputs = {"x": rng.normal(size=(2, 3, 4, 4)), "s": rng.normal(size=(2, 3))}
    return _check(lambda g, t: _quadratic(T.scale_channels(t["x"], t["s"])),
                  inputs, tol, 1e-5)


def check_channel_affine(rng, tol):
    inputs = {"x": rng.normal(size=(3, 4)), "w": rng.normal(size=4),
              "b": rng.normal(size=4)}
    return _check(lambda g, t: _quadratic(T.channel_affine(t["x"], t["w"], t["b"])),
                  inputs, tol, 1e-5)


def check_dropout(rng, tol):
    inputs = {"x": rng.normal(size=(4, 5))}

    def build(g, t):
        # fixed mask seed: the same mask must apply on every FD evaluation
        return _quadratic(T.dropout(t["x"], 0.4, "train", np.random.default_rng(123)))

    return _check(build, inputs, tol, 1e-5)


def check_batch_norm(rng, tol):
    # h=1e-5 is fine here: no relu downstream, and the input gradients are
    # small (normalization cancels most first-order effects), so narrower
    # steps only amplify rounding noise
    inputs = {"x": rng.normal(size=(3, 2, 4, 4)), "g": rng.normal(size=2) + 1.5,
              "b": rng.normal(size=2)}

    def build(g, t):
        y = T.batch_norm(t["x"], t["g"], t["b"], np.zeros(2), np.ones(2), "train")
        return _quadratic(y)

    return _check(build, inputs, tol, 1e-5)


def _inception_check(factorized):
    def fn(rng, tol):
        seed = int(rng.integers(0, 2**31))
        store = ParamStore(seed)
        cfg = InceptionBlockConfig(2, 2, 2, 2, 2, 2, 2, 3, factorized)
        block = ResidualInception(store, "blk", cfg)
        inputs = _layer_inputs(store, {"x": rng.normal(size=(2, 2, 6, 6))})

        def build(g, t):
            _bind_all(g, store, t)
            return _quadratic(block.forward(g, t["x"], "train"))

        return _check(build, inputs, tol, 1e-6)
    return fn


def check_partial_attention(rng, tol):
    seed = int(rng.integers(0, 2**31))
    store = ParamStore(seed)
    attn = PartialAttention(store, "attn", [2, 2], [(8, 8), (4, 4)], 2, (4, 4))
    attn.attn_w.data[:] = rng.normal(size=2)
    attn.attn_b.data[:] = rng.normal(size=2)
    inputs = _layer_inputs(store, {
        "s0": rng.normal(size=(2, 2, 8, 8)),
        "s1": rng.normal(size=(2, 2, 4, 4)),
        "tgt": rng.normal(size=(2, 2, 4, 4)),
    })

    def build(g, t):
        _bind_all(g, store, t)
        return _quadratic(attn.forward(g, [t["s0"], t["s1"]], t["tgt"], "train"))

    return _check(build, inputs, tol, 1e-6)


CHECKS = {
    "conv2d_same": check_conv2d_same,
    "conv2d_strided": check_conv2d_strided,
    "conv2d_valid": check_conv2d_valid,
    "pool2d_max": check_pool_max,
    "pool2d_avg": check_pool_avg,
    "add": _binary_op_check(T.add),
    "sub": _binary_op_check(T.sub),
    "mul": _binary_op_check(T.mul),
    "div": _binary_op_check(T.div),
    "maximum": _binary_op_check(T.maximum),
    "relu": _unary_op_check(T.relu),
    "exp": _unary_op_check(T.exp),
    "sigmoid": _unary_op_check(T.sigmoid),
    "scale": _unary_op_check(lambda x: T.scale(x, 1.7)),
    "concat_channels": check_concat,
    "dense": check_dense,
    "softmax": check_softmax,
    "log_softmax": check_log_softmax,
    "reduce_sum": check_reduce_sum,
    "reduce_mean": check_reduce_mean,
    "reshape": check_reshape,
    "pad2d": check_pad,
    "upsample2x": check_upsample,
    "scale_channels": check_scale_channels,
    "channel_affine": check_channel_affine,
    "dropout": check_dropout,
    "batch_norm": check_batch_norm,
    "residual_inception": _inception_check(False),
    "factorized_residual_inception": _inception_check(True),
    "partial_attention": check_partial_attention,
}


def run_suite(instances: int = 10, tolerance: float = 1e-3) -> list[dict]:
    """Run every check over seeded instances; one result row per op."""
    results = []
    for name, fn in CHECKS.items():
        worst = 0.0
        for seed in range(instances):
            rng = np.random.default_rng([hash(name) % 2**31, seed])
            report = fn(rng, tolerance)
            worst = max(worst, report["max_rel_err"])
        results.append({"name": name, "max_rel_err": worst,
                        "pass": worst < tolerance})
    return results
