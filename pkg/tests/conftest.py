"""Shared fixtures and independent oracles.

The oracles deliberately avoid the package's quadrature code: heat-kernel
values come from modified-Bessel products (the coordinates of the
nearest-neighbor walk are independent rate-1/d one-dimensional walks), and
Green values from their time integral plus an analytic large-time tail.
"""

import math

import numpy as np
import pytest
from scipy import integrate, special

from brwlab import JumpKernel, TorusGrid


@pytest.fixture(scope="session")
def srw1():
    return JumpKernel.simple(1)


@pytest.fixture(scope="session")
def srw2():
    return JumpKernel.simple(2)


@pytest.fixture(scope="session")
def srw3():
    return JumpKernel.simple(3)


@pytest.fixture(scope="session")
def grid3():
    return TorusGrid(3, 64)


def bessel_heat_kernel(t: float, x, d: int) -> float:
    """p(t, 0, x) for the d-dimensional nearest-neighbor walk, exactly.

    Each coordinate is an independent rate-1/d walk, whose return kernel is
    exp(-s) I_m(s) at s = t/d.
    """
    out = 1.0
    for c in x:
        out *= float(special.ive(abs(int(c)), t / d))
    return out


def bessel_green_zero(x, d: int, t_split: float = 200.0, t_max: float = 4000.0) -> float:
    """G_0(0, x) for the nearest-neighbor walk: time integral plus tail.

    The tail beyond t_max uses the local-limit form
    p(t, x) ~ (d/(2 pi t))^{d/2} (1 + (d^2/8 - d |x|^2/2)/t), integrated in
    closed form; for t_max = 4000 the neglected remainder is far below 1e-6.
    """
    if d < 3:
        raise ValueError("transient walks only")
    f = lambda t: bessel_heat_kernel(t, x, d)
    v1, _ = integrate.quad(f, 0.0, t_split, limit=400)
    v2, _ = integrate.quad(f, t_split, t_max, limit=1500)
    pref = (d / (2.0 * math.pi)) ** (d / 2.0)
    r2 = float(sum(int(c) * int(c) for c in x))
    c1 = d * d / 8.0 - d * r2 / 2.0
    if d == 3:
        tail = pref * (2.0 * t_max ** -0.5 + c1 * (2.0 / 3.0) * t_max ** -1.5)
    else:
        e = d / 2.0
        tail = pref * (t_max ** (1 - e) / (e - 1) + c1 * t_max ** -e / e)
    return v1 + v2 + tail


WATSON_G0_D3 = 1.5163860591519780  # bessel_green_zero((0,0,0), 3) to 12 digits


def pooled_chisquare(observed, expected, min_expected=5.0):
    """Chi-square with adjacent-bin pooling so every expected count >= 5."""
    from scipy import stats as sst

    o_pool, e_pool = [], []
    co = ce = 0.0
    for o, e in zip(observed, expected):
        co += o
        ce += e
        if ce >= min_expected:
            o_pool.append(co)
            e_pool.append(ce)
            co = ce = 0.0
    if ce > 0 and e_pool:
        o_pool[-1] += co
        e_pool[-1] += ce
    o_arr = np.asarray(o_pool)
    e_arr = np.asarray(e_pool)
    e_arr = e_arr * o_arr.sum() / e_arr.sum()
    return sst.chisquare(o_arr, e_arr)
