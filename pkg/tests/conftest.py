"""Shared fixtures: network tripwire, default configs, signal builders.

The whole suite must run offline; any attempt to open a socket fails the
test that made it, and the acceptance suite asserts the attempt counter
stayed at zero.
"""

import math
import socket

import numpy as np
import pytest

from sleepdistill.assess import load_thresholds
from sleepdistill.hrv import load_reference_ranges
from sleepdistill.reports import load_exemplar_report, load_rule_set


@pytest.fixture(autouse=True, scope="session")
def network_guard():
    attempts = {"count": 0}
    real_connect = socket.socket.connect
    real_create = socket.create_connection

    def guarded_connect(self, *args, **kwargs):
        attempts["count"] += 1
        raise RuntimeError(f"network access attempted: connect{args}")

    def guarded_create(*args, **kwargs):
        attempts["count"] += 1
        raise RuntimeError(f"network access attempted: create_connection{args}")

    socket.socket.connect = guarded_connect
    socket.create_connection = guarded_create
    try:
        yield attempts
    finally:
        socket.socket.connect = real_connect
        socket.create_connection = real_create


@pytest.fixture(scope="session")
def ranges():
    return load_reference_ranges()


@pytest.fixture(scope="session")
def rule_set():
    return load_rule_set()


@pytest.fixture(scope="session")
def thresholds():
    return load_thresholds()


@pytest.fixture(scope="session")
def exemplar():
    return load_exemplar_report()


def build_modulated_series(f_mod, amp=50.0, mean=1000.0, duration_s=300.0):
    """RR series whose tachogram is a sinusoid at f_mod Hz."""
    out = []
    t = 0.0
    while t < duration_s:
        x = mean + amp * math.sin(2.0 * math.pi * f_mod * t)
        out.append(x)
        t += x / 1000.0
    return out


def oracle_band_ratio(f_mod, amp=50.0, duration_s=300.0, fs=4.0):
    """Plain periodogram LF/HF of the analytic modulation signal.

    Independent of the production estimator: direct rFFT power summed
    over the two bands, no interpolation and no Welch averaging.
    """
    grid = np.arange(0.0, duration_s, 1.0 / fs)
    s = amp * np.sin(2.0 * np.pi * f_mod * grid)
    spec = np.abs(np.fft.rfft(s - s.mean())) ** 2
    freqs = np.fft.rfftfreq(len(s), d=1.0 / fs)
    lf = spec[(freqs >= 0.04) & (freqs < 0.15)].sum()
    hf = spec[(freqs >= 0.15) & (freqs <= 0.40)].sum()
    return lf / hf if hf > 0 else float("inf")


@pytest.fixture(scope="session")
def modulated_series():
    return build_modulated_series
