import numpy as np

from ipcontract import mlp


def forced_params(center, shape, input_dim: int = 9) -> mlp.MlpParams:
    """Network with zero weights whose heads always output (center, shape)."""
    params = mlp.init(0, input_dim)
    for w in params.weights:
        w[:] = 0.0
    for b in params.biases:
        b[:] = 0.0
    params.biases[-1][:3] = np.asarray(center, dtype=float)
    params.biases[-1][3:] = np.asarray(shape, dtype=float).ravel()
    return params


def noisy_params(seed: int, input_dim: int = 9, hidden=(5, 6), scale: float = 0.2) -> mlp.MlpParams:
    """Small random network: default init plus Gaussian jitter on every array."""
    rng = np.random.default_rng(seed)
    params = mlp.init(seed, input_dim, hidden=hidden)
    for arr in params.weights + params.biases:
        arr += rng.normal(0.0, scale, arr.shape)
    return params
