"""Shared scalar oracles.

These fold with the bit-level scalar functions one operation at a time, so
they share no code with the vectorised engine arithmetic.
"""

import numpy as np
import pytest

from streamaccel import fp16


def hbits(a):
    return np.asarray(a, np.float16).view(np.uint16)


def scalar_conv_point(x_lines, w_lines, init_bits, ks):
    """fsum for one output point: per-lane psum over ks atoms, then lanes in order."""
    x = hbits(x_lines)
    w = hbits(w_lines)
    n_lines, p = x.shape
    fs = int(init_bits)
    for g in range(n_lines // ks):
        psum = [0] * p
        for j in range(ks):
            row = g * ks + j
            for lane in range(p):
                prod = fp16.half_mul(int(x[row, lane]), int(w[row, lane]))
                psum[lane] = fp16.half_add(psum[lane], prod)
        for lane in range(p):
            fs = fp16.half_add(fs, psum[lane])
    return fs


def scalar_maxpool(lines, init_bits=0):
    x = hbits(lines)
    out = []
    for lane in range(x.shape[1]):
        held = init_bits
        for j in range(x.shape[0]):
            if fp16.half_gt(int(x[j, lane]), held):
                held = int(x[j, lane])
        out.append(held)
    return out


def scalar_avgpool(lines, k_squared):
    x = hbits(lines)
    div = fp16.real_to_half(float(k_squared))
    out = []
    for lane in range(x.shape[1]):
        acc = 0
        for j in range(x.shape[0]):
            acc = fp16.half_add(acc, int(x[j, lane]))
        out.append(fp16.half_div(acc, div))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    lines = test_acceptance.summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
