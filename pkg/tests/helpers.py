"""Shared test utilities: central finite-difference gradient oracle."""

import numpy as np

from statconsist import tensor as t


def numeric_grad_coord(make_loss, arrays, name, flat_index, h=1e-5):
    """Central-difference derivative of the scalar loss w.r.t. one coordinate.

    ``make_loss`` maps {name: ndarray} -> scalar; evaluated twice with the
    named coordinate nudged by +/- h.
    """
    def eval_at(delta):
        shifted = {k: v.copy() for k, v in arrays.items()}
        shifted[name].flat[flat_index] += delta
        out = make_loss(shifted)
        return float(t.val(out))

    return (eval_at(+h) - eval_at(-h)) / (2.0 * h)


def check_grad(make_loss, arrays, n_coords=6, h=1e-5, seed=0):
    """Max relative error between tape gradients and finite differences.

    ``make_loss`` maps {name: ndarray-or-Var} -> scalar Var; it is called
    once with params lifted to Vars for the analytic pass, then re-run on
    perturbed plain arrays for the numeric probes.  ``n_coords`` coordinates
    per parameter are sampled (all of them when the parameter is small).
    """
    rng = np.random.default_rng(seed)
    params = {k: t.param(v) for k, v in arrays.items()}
    loss = make_loss(params)
    assert isinstance(loss, t.Var), "loss did not depend on any parameter"
    t.backward(loss)
    worst = 0.0
    for name, arr in arrays.items():
        grad = params[name].grad
        if grad is None:
            grad = np.zeros_like(arr)
        size = arr.size
        idx = (np.arange(size) if size <= n_coords
               else rng.choice(size, size=n_coords, replace=False))
        for i in idx:
            num = numeric_grad_coord(make_loss, arrays, name, i, h=h)
            ana = float(np.asarray(grad).flat[i])
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-6)
            worst = max(worst, rel)
    return worst
