import numpy as np
import pytest

from orion3d import kernels
from orion3d.layers import Dense, LayerSpec, build_layer
from orion3d.model import Network, OrientationScheme


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    kernels.warmup(np.float32)
    kernels.warmup(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def spread_values(rng, shape, step=0.05):
    """Values with pairwise gaps >= step/2: safe for FD through max/kinks."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2) * step
    return vals.reshape(shape).astype(np.float64)


def kink_margin(net, x):
    """Distance to the nearest piecewise-linear kink along the forward pass.

    Returns the smaller of (a) the minimum |pre-activation| feeding any
    leaky_relu and (b) the minimum top-2 gap inside any max-pool window.
    Finite differences are only trustworthy when this margin comfortably
    exceeds the perturbation-induced activation shift (~the FD step).
    """
    net.forward(np.asarray(x, dtype=net.dtype), mode="eval", retain=True)
    acts = net.activations
    margin = np.inf
    for i, name in enumerate(net.trunk_names):
        prev = acts["input"] if i == 0 else acts[net.trunk_names[i - 1]]
        layer = net.trunk[i]
        kind = layer.spec.kind
        if kind == "leaky_relu":
            margin = min(margin, float(np.abs(prev).min()))
        elif kind == "maxpool3d":
            k, s = layer.spec.kernel, layer.spec.stride
            n, d, h, w, c = prev.shape
            do, ho, wo = ((e - k) // s + 1 for e in (d, h, w))
            for dd in range(do):
                for hh in range(ho):
                    for ww in range(wo):
                        win = prev[:, dd * s:dd * s + k, hh * s:hh * s + k,
                                   ww * s:ww * s + k, :].reshape(n, -1, c)
                        top2 = np.sort(win, axis=1)[:, -2:, :]
                        margin = min(margin, float((top2[:, 1] - top2[:, 0]).min()))
    return margin


def kink_safe_input(net, batch, floor, base_seed=0, tries=50):
    """First random input whose kink margin clears ``floor``."""
    shape = (batch,) + net.in_shape
    for t in range(tries):
        x = np.random.default_rng(base_seed + t).standard_normal(shape)
        if kink_margin(net, x) > floor:
            return x
    raise AssertionError(f"no kink-safe input found in {tries} tries")


def build_toy_twohead(seed=0, extent=8, dtype=np.float64, n_classes=3,
                      scheme=None, pool=True):
    """A small two-conv + fc1 two-head network for oracle tests.

    Layer naming mirrors the real trunks (conv1/conv2/fc1) so analysis code
    works on it; extents stay tiny so finite differences are affordable.
    """
    rng_ = np.random.default_rng(seed)
    scheme = scheme or OrientationScheme.uniform(n_classes, 3, 90.0)
    specs = [
        ("conv1", LayerSpec.conv3d(3, 3, stride=1)),
        ("act1", LayerSpec.leaky_relu()),
        ("conv2", LayerSpec.conv3d(4, 3, stride=1)),
        ("act2", LayerSpec.leaky_relu()),
    ]
    if pool:
        specs.append(("pool", LayerSpec.maxpool3d(2, 2)))
    specs += [
        ("flatten", LayerSpec.flatten()),
        ("fc1", LayerSpec.dense(6)),
        ("act_fc", LayerSpec.leaky_relu()),
    ]
    trunk_named = []
    shape = (extent, extent, extent, 1)
    for name, spec in specs:
        trunk_named.append((name, build_layer(spec, shape, rng=rng_, dtype=dtype,
                                              name=name)))
        shape = spec.out_shape(shape)
    class_head = Dense(LayerSpec.dense(n_classes), shape[0], rng_, dtype=dtype,
                       name="class_head")
    orient_head = Dense(LayerSpec.dense(scheme.total_nodes), shape[0], rng_,
                        dtype=dtype, name="orient_head")
    return Network("baseline", trunk_named, class_head, orient_head, scheme,
                   (extent, extent, extent, 1), dtype)
