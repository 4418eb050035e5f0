"""Small random networks shared by the gradient tests and the acceptance suite."""

import numpy as np

from rankher.nn import (Conv2D, Dense, Flatten, MaxPool2D, Network, ReLU, Softmax, Tanh,
                        loss_categorical_crossentropy, loss_mse)

KINDS = ("linear", "mlp", "tanh", "conv_pool_dense", "conv_softmax")


def random_case(seed):
    """``(net, x, loss_fn, skip_softmax, linear_only)`` for the ``seed``-th test network."""
    rng = np.random.default_rng(seed)
    kind = KINDS[seed % len(KINDS)]
    n = int(rng.integers(2, 5))
    if kind == "linear":
        a, b, c = rng.integers(2, 6, 3)
        net = Network([Dense(a, b, rng), Dense(b, c, rng)], (a,))
        x = rng.standard_normal((n, a))
        target = rng.standard_normal((n, c))
        return net, x, lambda out: loss_mse(out, target), False, True
    if kind in ("mlp", "tanh"):
        a, h, c = rng.integers(2, 7, 3)
        act = ReLU if kind == "mlp" else Tanh
        net = Network([Dense(a, h, rng), act(), Dense(h, h, rng), act(), Dense(h, c, rng)], (a,))
        x = rng.standard_normal((n, a))
        target = rng.standard_normal((n, c))
        return net, x, lambda out: loss_mse(out, target), False, False
    size = int(rng.integers(7, 10))
    ch = int(rng.integers(1, 3))
    k = int(rng.integers(2, 5))
    x = rng.standard_normal((n, ch, size, size))
    labels = rng.integers(0, k, n)
    ce = lambda out: loss_categorical_crossentropy(out, labels)
    if kind == "conv_pool_dense":
        layers = [Conv2D(ch, 3, 3, 1, rng), ReLU(), MaxPool2D(2, 2), Flatten()]
        flat = 3 * ((size - 2) // 2) ** 2
        layers += [Dense(flat, k, rng), Softmax()]
    else:
        layers = [Conv2D(ch, 4, 3, 2, rng), ReLU(), Conv2D(4, k, 1, 1, rng), Softmax()]
    return Network(layers, (ch, size, size)), x, ce, True, False
