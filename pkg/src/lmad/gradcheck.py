"""Finite-difference verification of every backward rule.

Each op case builds small float64 inputs, reduces the op's output to a
scalar through a *frozen* random projection, and compares tape gradients
against central differences (step ``h = 1e-6``).  The error metric is the
L2 norm of (analytic − numeric) over the larger of the two norms, taken
worst-case across the case's inputs and instances.

Kinked or piecewise ops get inputs sampled away from their non-smooth sets
(|x| margins for relu, distinct values for max) so the finite-difference
probe stays on one branch.

``run_op_checks`` covers the primitive ops plus the attention / loss
composites; ``run_model_checks`` differentiates complete miniature models
(every head variant) end to end through encoder, text stack and loss.
"""

from __future__ import annotations

import time

import numpy as np

from . import autograd as ag
from .autograd import BatchNormState, GradTape, Tensor
from .model import HeadVariant, Model, micro_model_config, pair_loss

OPS_TOLERANCE = 1e-5
MODEL_TOLERANCE = 1e-4
FD_STEP = 1e-6


def _p(rng, shape, lo=-1.5, hi=1.5) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def max_rel_error(tensors, forward, h: float = FD_STEP) -> float:
    """Worst-case relative gradient error of ``forward()`` w.r.t. ``tensors``."""
    with GradTape() as tape:
        loss = forward()
    ag.backward(tape, loss)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat, nflat = t.data.reshape(-1), numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            f_plus = forward().data.item()
            flat[j] = orig - h
            f_minus = forward().data.item()
            flat[j] = orig
            nflat[j] = (f_plus - f_minus) / (2.0 * h)
        scale = max(np.linalg.norm(analytic.ravel()), np.linalg.norm(numeric.ravel()), 1e-12)
        worst = max(worst, float(np.linalg.norm((analytic - numeric).ravel()) / scale))
        t.grad = None
    return worst


def _projected(raw_forward, rng):
    """Wrap an op forward into a scalar loss with projection weights frozen now."""
    probe = raw_forward()
    w = Tensor(rng.uniform(-1.0, 1.0, size=probe.shape))
    return lambda: ag.reduce_sum(raw_forward() * w)


# --- op cases ---------------------------------------------------------------
# Each builder returns (inputs_to_check, scalar_forward) for one instance.

def _case_add(rng):
    a, b = _p(rng, (3, 4)), _p(rng, (4,) if rng.uniform() < 0.5 else (3, 4))
    return [a, b], _projected(lambda: ag.add(a, b), rng)


def _case_sub(rng):
    a, b = _p(rng, (3, 4)), _p(rng, (3, 4))
    return [a, b], _projected(lambda: ag.sub(a, b), rng)


def _case_mul(rng):
    a, b = _p(rng, (3, 4)), _p(rng, (3, 1) if rng.uniform() < 0.5 else (3, 4))
    return [a, b], _projected(lambda: ag.mul(a, b), rng)


def _case_div(rng):
    a = _p(rng, (3, 4))
    denom = rng.uniform(0.4, 1.6, size=(3, 4)) * np.where(rng.uniform(size=(3, 4)) < 0.5, -1.0, 1.0)
    b = Tensor(denom, requires_grad=True)
    return [a, b], _projected(lambda: ag.div(a, b), rng)


def _case_neg(rng):
    a = _p(rng, (2, 5))
    return [a], _projected(lambda: ag.neg(a), rng)


def _case_matmul(rng):
    if rng.uniform() < 0.5:
        a, b = _p(rng, (3, 4)), _p(rng, (4, 5))
    else:
        a, b = _p(rng, (2, 3, 4)), _p(rng, (2, 4, 5))
    return [a, b], _projected(lambda: ag.matmul(a, b), rng)


def _case_transpose(rng):
    a = _p(rng, (2, 3, 4))
    axes = tuple(int(x) for x in rng.permutation(3))
    return [a], _projected(lambda: ag.transpose(a, axes), rng)


def _case_reshape(rng):
    a = _p(rng, (3, 4))
    return [a], _projected(lambda: ag.reshape(a, (2, 6)), rng)


def _case_concat(rng):
    axis = int(rng.integers(0, 2))
    a, b = _p(rng, (3, 4)), _p(rng, (3, 4))
    return [a, b], _projected(lambda: ag.concat([a, b], axis=axis), rng)


def _case_gather_rows(rng):
    table = _p(rng, (6, 4))
    ids = rng.integers(0, 6, size=5)
    return [table], _projected(lambda: ag.gather_rows(table, ids), rng)


def _case_reduce_sum(rng):
    a = _p(rng, (3, 4))
    axis = (None, 0, 1)[int(rng.integers(0, 3))]
    keep = bool(rng.uniform() < 0.5) if axis is not None else False
    return [a], _projected(lambda: ag.reduce_sum(a, axis=axis, keepdims=keep), rng)


def _case_reduce_mean(rng):
    a = _p(rng, (3, 4))
    axis = (None, 0, 1)[int(rng.integers(0, 3))]
    return [a], _projected(lambda: ag.reduce_mean(a, axis=axis), rng)


def _case_reduce_max(rng):
    # Distinct entries with comfortable margins keep the argmax stable under h.
    vals = rng.permutation(12).astype(np.float64) * 0.1 + rng.uniform(-0.01, 0.01, 12)
    a = Tensor(vals.reshape(3, 4), requires_grad=True)
    axis = int(rng.integers(0, 2))
    return [a], _projected(lambda: ag.reduce_max(a, axis=axis), rng)


def _case_relu(rng):
    x = rng.uniform(0.05, 1.5, size=(3, 4)) * np.where(rng.uniform(size=(3, 4)) < 0.5, -1.0, 1.0)
    a = Tensor(x, requires_grad=True)
    return [a], _projected(lambda: ag.relu(a), rng)


def _case_gelu(rng):
    a = _p(rng, (3, 4), lo=-2.0, hi=2.0)
    return [a], _projected(lambda: ag.gelu(a), rng)


def _case_exp(rng):
    a = _p(rng, (3, 4))
    return [a], _projected(lambda: ag.exp(a), rng)


def _case_log(rng):
    a = Tensor(rng.uniform(0.2, 3.0, size=(3, 4)), requires_grad=True)
    return [a], _projected(lambda: ag.log(a), rng)


def _case_sqrt(rng):
    a = Tensor(rng.uniform(0.2, 3.0, size=(3, 4)), requires_grad=True)
    return [a], _projected(lambda: ag.sqrt(a), rng)


def _case_softmax(rng):
    a = _p(rng, (3, 5), lo=-2.0, hi=2.0)
    return [a], _projected(lambda: ag.softmax(a, axis=-1), rng)


def _case_log_softmax(rng):
    a = _p(rng, (3, 5), lo=-2.0, hi=2.0)
    return [a], _projected(lambda: ag.log_softmax(a, axis=-1), rng)


def _case_layer_norm(rng):
    x = _p(rng, (4, 6))
    gain = Tensor(rng.uniform(0.5, 1.5, size=6), requires_grad=True)
    bias = _p(rng, (6,))
    return [x, gain, bias], _projected(lambda: ag.layer_norm(x, gain, bias), rng)


def _case_batch_norm_train(rng):
    x = _p(rng, (6, 4))
    gain = Tensor(rng.uniform(0.5, 1.5, size=4), requires_grad=True)
    bias = _p(rng, (4,))
    state = BatchNormState(4, dtype=np.float64)
    fwd = lambda: ag.batch_norm_1d(x, gain, bias, state, training=True,
                                   update_running=False)
    return [x, gain, bias], _projected(fwd, rng)


def _case_batch_norm_eval(rng):
    x = _p(rng, (6, 4))
    gain = Tensor(rng.uniform(0.5, 1.5, size=4), requires_grad=True)
    bias = _p(rng, (4,))
    state = BatchNormState(4, dtype=np.float64)
    state.mean[:] = rng.uniform(-0.5, 0.5, size=4)
    state.var[:] = rng.uniform(0.5, 2.0, size=4)
    fwd = lambda: ag.batch_norm_1d(x, gain, bias, state, training=False)
    return [x, gain, bias], _projected(fwd, rng)


def _case_attention(rng):
    from .lm import init_attention_params, multi_head_attention

    p = init_attention_params(rng, d_q=6, d_kv=5, d_attn=4, n_heads=2, dtype=np.float64)
    q, kv = _p(rng, (3, 6)), _p(rng, (4, 5))
    mask = np.array([True, True, True, False]) if rng.uniform() < 0.5 else None
    # Key bias excluded: a per-row constant score shift has exactly zero
    # gradient through softmax, so finite differences on it read roundoff.
    tensors = [q, kv] + [t for n, t in p.tensors("attn") if not n.endswith(".bk")]
    fwd = lambda: multi_head_attention(q, kv, p, key_mask=mask)
    return tensors, _projected(fwd, rng)


def _case_cross_entropy(rng):
    from .heads import cross_entropy_loss

    logits = _p(rng, (5, 2), lo=-2.0, hi=2.0)
    target = rng.integers(0, 2, size=5)
    return [logits], lambda: cross_entropy_loss(logits, target)


def _case_cosine_head(rng):
    from .heads import cosine_head, init_cosine_params

    p = init_cosine_params(rng, d_model=4, point_dim=3, dtype=np.float64)
    h_c = _p(rng, (4, 3))
    states = _p(rng, (3, 4))
    mask = np.array([True, True, False])
    tensors = [h_c, states] + [t for _, t in p.tensors("cos")]
    return tensors, _projected(lambda: cosine_head(h_c, states, mask, p), rng)


OP_CASES = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "div": _case_div,
    "neg": _case_neg,
    "matmul": _case_matmul,
    "transpose": _case_transpose,
    "reshape": _case_reshape,
    "concat": _case_concat,
    "gather_rows": _case_gather_rows,
    "reduce_sum": _case_reduce_sum,
    "reduce_mean": _case_reduce_mean,
    "reduce_max": _case_reduce_max,
    "relu": _case_relu,
    "gelu": _case_gelu,
    "exp": _case_exp,
    "log": _case_log,
    "sqrt": _case_sqrt,
    "softmax": _case_softmax,
    "log_softmax": _case_log_softmax,
    "layer_norm": _case_layer_norm,
    "batch_norm_train": _case_batch_norm_train,
    "batch_norm_eval": _case_batch_norm_eval,
    "attention": _case_attention,
    "cross_entropy": _case_cross_entropy,
    "cosine_head": _case_cosine_head,
}


def run_op_checks(seed: int = 0, instances: int = 20,
                  tolerance: float = OPS_TOLERANCE, ops=None) -> dict:
    """Finite-difference every op; returns a JSON-ready report."""
    names = list(OP_CASES) if ops is None else list(ops)
    results = []
    for name in names:
        builder = OP_CASES[name]
        start = time.perf_counter()
        worst = 0.0
        for i in range(instances):
            rng = np.random.default_rng((seed, i, sum(map(ord, name))))
            tensors, forward = builder(rng)
            worst = max(worst, max_rel_error(tensors, forward))
        results.append({"op": name, "max_rel_err": worst, "tolerance": tolerance,
                        "instances": instances, "passed": worst < tolerance,
                        "seconds": round(time.perf_counter() - start, 3)})
    return {"scope": "ops", "passed": all(r["passed"] for r in results),
            "results": results}


def _model_case(head: HeadVariant, seed: int):
    cfg = micro_model_config(words=("grasp",), head=head)
    model = Model(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    coords = rng.uniform(-1.0, 1.0, size=(16, 3))
    target = rng.integers(0, 2, size=16)
    # Key biases shift every pre-softmax score in a row equally, so their true
    # gradient is identically zero and a finite-difference probe on them only
    # measures roundoff. They stay in the model; they just aren't FD-checkable.
    params = [t for name, t in model.named_tensors() if not name.endswith("attn.bk")]
    # The constructed model sits at a deliberately symmetric point (the
    # inserted cross-attention starts with a zero output projection, and the
    # untrained decode emits near-identical logits for every point), where the
    # true gradients shrink toward the h=1e-6 finite-difference noise floor
    # and the zeroed projection masks its own q/k/v weights entirely.
    # Re-randomizing every parameter checks the same graph at a generic point.
    for t in params:
        t.data[...] = rng.uniform(-0.6, 0.6, size=t.data.shape)

    def forward():
        return pair_loss(model, coords, "grasp", target,
                         training=True, update_stats=False)

    return params, forward


def run_model_checks(seed: int = 0, tolerance: float = MODEL_TOLERANCE) -> dict:
    """End-to-end gradcheck of each miniature head variant."""
    results = []
    for head in HeadVariant:
        start = time.perf_counter()
        params, forward = _model_case(head, seed)
        worst = max_rel_error(params, forward)
        results.append({"op": f"model_{head.value}", "max_rel_err": worst,
                        "tolerance": tolerance, "instances": 1,
                        "passed": worst < tolerance,
                        "seconds": round(time.perf_counter() - start, 3)})
    return {"scope": "model", "passed": all(r["passed"] for r in results),
            "results": results}
