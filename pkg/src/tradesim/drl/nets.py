"""Small fully-connected blocks with hand-written backward passes.

Parameters live in flat name -> ndarray dicts so the optimizer and
finite-difference tests can treat every network uniformly.
"""

from __future__ import annotations

import numpy as np

Params = dict[str, np.ndarray]


def linear_init(rng: np.random.Generator, prefix: str, d_in: int, d_out: int) -> Params:
    bound = 1.0 / np.sqrt(d_in)
    return {
        f"{prefix}.W": rng.uniform(-bound, bound, size=(d_out, d_in)),
        f"{prefix}.b": np.zeros(d_out),
    }


def linear_forward(params: Params, prefix: str, x: np.ndarray) -> np.ndarray:
    return x @ params[f"{prefix}.W"].T + params[f"{prefix}.b"]


def linear_backward(
    params: Params, prefix: str, x: np.ndarray, dout: np.ndarray, grads: Params
) -> np.ndarray:
    grads[f"{prefix}.W"] += dout.T @ x
    grads[f"{prefix}.b"] += dout.sum(axis=0)
    return dout @ params[f"{prefix}.W"]


def mlp_init(rng: np.random.Generator, prefix: str, sizes: tuple[int, ...]) -> Params:
    """Tanh MLP: sizes = (d_in, h1, ..., hk); output is the last tanh layer."""
    params: Params = {}
    for i in range(len(sizes) - 1):
        params.update(linear_init(rng, f"{prefix}{i}", sizes[i], sizes[i + 1]))
    return params


def mlp_forward(params: Params, prefix: str, depth: int, x: np.ndarray) -> tuple[np.ndarray, list]:
    cache = []
    h = x
    for i in range(depth):
        pre = linear_forward(params, f"{prefix}{i}", h)
        out = np.tanh(pre)
        cache.append((h, out))
        h = out
    return h, cache


def mlp_backward(params: Params, prefix: str, cache: list, dout: np.ndarray, grads: Params) -> np.ndarray:
    d = dout
    for i in range(len(cache) - 1, -1, -1):
        x_in, out = cache[i]
        d = d * (1.0 - out * out)  # tanh'
        d = linear_backward(params, f"{prefix}{i}", x_in, d, grads)
    return d


def zeros_like_params(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}
