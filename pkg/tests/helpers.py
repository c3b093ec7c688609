"""Shared test utilities: finite-difference gradient checks and random networks."""

import numpy as np

from martingale_cv.nn import init_network


def random_network(rng, batchnorm, n_nets=1):
    """Random architecture with randomised biases and batch-norm affine parameters."""
    depth = int(rng.integers(1, 4))
    sizes = [int(rng.integers(1, 5))] + [int(rng.integers(2, 7)) for _ in range(depth)] + [int(rng.integers(1, 3))]
    net = init_network(sizes, batchnorm, int(rng.integers(2**32)), n_nets=n_nets)
    for b in net.biases:
        b[...] = rng.normal(size=b.shape)
    for g, be in zip(net.gamma, net.beta):
        g[...] = rng.uniform(0.5, 1.5, size=g.shape)
        be[...] = rng.normal(size=be.shape)
    return net


def gradient_errors(net, x, upstream, train, h=2e-5, rel_floor=1e-4):
    """Relative errors of reverse-mode gradients against central differences.

    The numeric derivative is Richardson-extrapolated from steps ``h`` and
    ``h/2``. Each block error is ``|a - b| / max(|a|, |b|, rel_floor * G)``
    with ``G`` the norm of the whole analytic gradient, so blocks that are
    zero or nearly so by batch-norm invariance are judged on the scale the
    difference quotient can resolve.

    Returns ``(param_errors, input_error, smooth)``. ``smooth`` is False when
    some difference stencil flipped a ReLU mask; the comparison is then not
    meaningful and the caller should draw new inputs.
    """
    out, cache = net.forward(x, train=train, update_stats=False)
    base_masks = [m.copy() for m in cache.masks]
    smooth = True

    def objective():
        nonlocal smooth
        out, c = net.forward(x, train=train, update_stats=False)
        if any(not np.array_equal(m, b) for m, b in zip(c.masks, base_masks)):
            smooth = False
        return float(np.sum(upstream * out))

    def central(arr, i, step):
        old = arr[i]
        arr[i] = old + step
        plus = objective()
        arr[i] = old - step
        minus = objective()
        arr[i] = old
        return (plus - minus) / (2 * step)

    def numeric(arr):
        fd = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            fd[i] = (4.0 * central(arr, i, h / 2) - central(arr, i, h)) / 3.0
        return fd

    grads, dx = net.backward(cache, upstream)
    total = np.sqrt(sum(np.sum(g**2) for g in grads) + np.sum(dx**2))

    def rel(a, b):
        scale = max(np.linalg.norm(a), np.linalg.norm(b), rel_floor * total)
        return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)

    errors = {name: rel(g, numeric(p)) for name, p, g in zip(net.parameter_names(), net.parameters(), grads)}
    return errors, rel(dx, numeric(x)), smooth


def smooth_gradient_errors(net, rng, train, batch=8):
    """``gradient_errors`` on fresh Gaussian inputs, redrawn until no stencil crosses a ReLU kink."""
    while True:
        x = rng.normal(size=(net.n_nets, batch, net.input_width))
        u = rng.normal(size=(net.n_nets, batch, net.output_width))
        errors, input_error, smooth = gradient_errors(net, x, u, train)
        if smooth:
            return errors, input_error
