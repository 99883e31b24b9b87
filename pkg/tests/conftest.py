import numpy as np
import pytest

from flowlab.rng import SplitRng


@pytest.fixture
def rng():
    return SplitRng(12345)


def randomize_output_layer(source, rng, scale=0.3):
    """Give a generator's zero-initialized output layer random values.

    Source models start as exactly N(0, I); gradient tests randomize the
    heads so the checked point is not the degenerate neutral start.
    """
    source.net.weights[-1][...] = scale * rng.normal(source.net.weights[-1].shape)
    source.net.biases[-1][...] = scale * rng.normal(source.net.biases[-1].shape)
    source.net.mark_updated()


def finite_diff_param(loss_fn, param, idx, h=1e-5):
    """Central finite difference of loss_fn() in one parameter coordinate."""
    old = param[idx]
    param[idx] = old + h
    lp = loss_fn()
    param[idx] = old - h
    lm = loss_fn()
    param[idx] = old
    return (lp - lm) / (2.0 * h)


def assert_grads_close(loss_fn, params, grads, rel=1e-4, h=1e-5,
                       sample=None, rng=None):
    """Compare analytic grads against central differences.

    When ``sample`` is given, only that many randomly chosen coordinates per
    parameter are checked (for large nets).
    """
    for p, g in zip(params, grads):
        coords = list(np.ndindex(p.shape))
        if sample is not None and len(coords) > sample:
            pick = rng.integers(0, len(coords), size=sample)
            coords = [coords[i] for i in np.asarray(pick)]
        for idx in coords:
            fd = finite_diff_param(loss_fn, p, idx, h=h)
            an = g[idx]
            denom = max(abs(fd), abs(an), 1e-6)
            assert abs(fd - an) / denom < rel, (
                f"grad mismatch at {idx}: fd={fd} analytic={an}")
