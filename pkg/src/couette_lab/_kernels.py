"""Compiled per-mode kernels: 3x3 linear symbols, Magnus steps and matrix exponentials."""

from __future__ import annotations

import math

import numba as nb
import numpy as np

_SQ3_12 = math.sqrt(3.0) / 12.0
_C1 = 0.5 - math.sqrt(3.0) / 6.0
_C2 = 0.5 + math.sqrt(3.0) / 6.0


@nb.njit(cache=True)
def mode_matrix(k, kap, mu, lampmu, inv_m2, lift, out):
    """Linear symbol of the moving-frame system for one Fourier mode."""
    p = k * k + kap * kap
    out[0, 0] = 0.0
    out[0, 1] = -1j * k
    out[0, 2] = -1j * kap
    out[1, 0] = -1j * k * inv_m2
    out[1, 1] = -mu * p - lampmu * k * k
    out[1, 2] = -lift - lampmu * k * kap
    out[2, 0] = -1j * kap * inv_m2
    out[2, 1] = -lampmu * k * kap
    out[2, 2] = -mu * p - lampmu * kap * kap


@nb.njit(cache=True)
def _matmul3(a, b, out):
    for i in range(3):
        for j in range(3):
            s = 0j
            for m in range(3):
                s += a[i, m] * b[m, j]
            out[i, j] = s


@nb.njit(cache=True)
def expm3(a, out):
    """exp of a 3x3 complex matrix by scaling, Taylor (degree 16) and squaring."""
    nrm = 0.0
    for i in range(3):
        r = 0.0
        for j in range(3):
            r += abs(a[i, j])
        if r > nrm:
            nrm = r
    s = 0
    if nrm > 0.25:
        s = int(math.ceil(math.log2(nrm / 0.25)))
    scale = 1.0 / (2.0**s)
    x = np.empty((3, 3), dtype=np.complex128)
    for i in range(3):
        for j in range(3):
            x[i, j] = a[i, j] * scale
    term = np.zeros((3, 3), dtype=np.complex128)
    tmp = np.empty((3, 3), dtype=np.complex128)
    for i in range(3):
        term[i, i] = 1.0
        for j in range(3):
            out[i, j] = term[i, j]
    for m in range(1, 17):
        _matmul3(term, x, tmp)
        inv = 1.0 / m
        for i in range(3):
            for j in range(3):
                term[i, j] = tmp[i, j] * inv
                out[i, j] += term[i, j]
    for _ in range(s):
        _matmul3(out, out, tmp)
        for i in range(3):
            for j in range(3):
                out[i, j] = tmp[i, j]


@nb.njit(cache=True)
def _symbol_norm(k, kap, mu, lampmu, inv_m2, lift):
    # norm after rescaling phi by 1/M, which balances the acoustic off-diagonals;
    # the Magnus error is invariant under that similarity transform
    p = k * k + kap * kap
    return (mu + lampmu) * p + 2.0 * math.sqrt(p * inv_m2) + lift


@nb.njit(cache=True)
def magnus_propagator(k, kap0, h, mu, lampmu, inv_m2, lift, max_phase, out):
    """Fourth-order Magnus propagator over [t0, t0 + h] for the mode whose
    sheared wavenumber at t0 is ``kap0`` (it then decreases at rate k).

    The interval is split so that every sub-step has |A| h_sub <= max_phase.
    """
    kap1 = kap0 - k * h
    nrm = max(_symbol_norm(k, kap0, mu, lampmu, inv_m2, lift),
              _symbol_norm(k, kap1, mu, lampmu, inv_m2, lift))
    nsub = max(1, int(math.ceil(nrm * h / max_phase)))
    hs = h / nsub
    a1 = np.empty((3, 3), dtype=np.complex128)
    a2 = np.empty((3, 3), dtype=np.complex128)
    om = np.empty((3, 3), dtype=np.complex128)
    ex = np.empty((3, 3), dtype=np.complex128)
    c12 = np.empty((3, 3), dtype=np.complex128)
    c21 = np.empty((3, 3), dtype=np.complex128)
    acc = np.zeros((3, 3), dtype=np.complex128)
    tmp = np.empty((3, 3), dtype=np.complex128)
    for i in range(3):
        acc[i, i] = 1.0
    for js in range(nsub):
        ka = kap0 - k * hs * js
        mode_matrix(k, ka - k * _C1 * hs, mu, lampmu, inv_m2, lift, a1)
        mode_matrix(k, ka - k * _C2 * hs, mu, lampmu, inv_m2, lift, a2)
        _matmul3(a2, a1, c21)
        _matmul3(a1, a2, c12)
        for i in range(3):
            for j in range(3):
                om[i, j] = 0.5 * hs * (a1[i, j] + a2[i, j]) + _SQ3_12 * hs * hs * (c21[i, j] - c12[i, j])
        expm3(om, ex)
        _matmul3(ex, acc, tmp)
        for i in range(3):
            for j in range(3):
                acc[i, j] = tmp[i, j]
    for i in range(3):
        for j in range(3):
            out[i, j] = acc[i, j]


@nb.njit(cache=True, parallel=True)
def magnus_batch(ks, kap0s, h, mu, lampmu, inv_m2, lift, max_phase, out):
    for n in nb.prange(ks.size):
        magnus_propagator(ks[n], kap0s[n], h, mu, lampmu, inv_m2, lift, max_phase, out[n])


@nb.njit(cache=True, parallel=True)
def expm_batch(mats, out):
    for n in nb.prange(mats.shape[0]):
        expm3(mats[n], out[n])


@nb.njit(cache=True, parallel=True)
def apply_batch(mats, u, out):
    """out[:, n] = mats[n] @ u[:, n] for flattened mode index n."""
    for n in nb.prange(mats.shape[0]):
        for i in range(3):
            s = 0j
            for j in range(3):
                s += mats[n, i, j] * u[j, n]
            out[i, n] = s


@nb.njit(cache=True, parallel=True)
def apply_gather(table, idx, u, out):
    """out[:, n] = table[idx[n]] @ u[:, n]."""
    for n in nb.prange(idx.size):
        m = idx[n]
        for i in range(3):
            s = 0j
            for j in range(3):
                s += table[m, i, j] * u[j, n]
            out[i, n] = s
