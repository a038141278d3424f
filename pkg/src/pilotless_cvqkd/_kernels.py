"""Compiled inner loops. Callers validate inputs; nothing here raises."""

import numpy as np
from numba import njit

_LOG_PI = np.log(np.pi)
_LOG_2PI = np.log(2 * np.pi)
# Zero-variance transitions: deterministic match tolerance (rad, rad/symbol).
_DETERMINISTIC_TOL = 1e-9


@njit(cache=True)
def _bessel_i0(x):
    total = 1.0
    term = 1.0
    k = 1
    while term > 1e-17 * total:
        term *= (x / (2.0 * k)) ** 2
        total += term
        k += 1
    return total


@njit(cache=True)
def fractional_delay_kernel(x, delay, taps, beta):
    n_out = x.size
    y = np.zeros(n_out, dtype=np.complex128)
    half = taps // 2
    norm = 1.0 / _bessel_i0(beta)
    for m in range(n_out):
        c = m - delay[m]
        base = np.floor(c)
        frac = c - base
        if frac < 1e-12 or frac > 1.0 - 1e-12:
            src = int(np.rint(c))
            if 0 <= src < n_out:
                y[m] = x[src]
            continue
        lo = int(base) - half + 1
        acc = 0.0 + 0.0j
        for n in range(lo, lo + taps):
            if n < 0 or n >= n_out:
                continue
            t = c - n
            r = t / half
            if r >= 1.0 or r <= -1.0:
                continue
            win = _bessel_i0(beta * np.sqrt(1.0 - r * r)) * norm
            acc += x[n] * win * np.sin(np.pi * t) / (np.pi * t)
        y[m] = acc
    return y


@njit(cache=True)
def _log2cosh(x):
    ax = abs(x)
    return ax + np.log1p(np.exp(-2.0 * ax))


@njit(cache=True)
def _loglik_trig(b, cph, sph, revealed, known, alphabet, p_tn):
    base = -_LOG_PI - np.log(p_tn)
    if revealed:
        mr = known.real * cph - known.imag * sph
        mi = known.real * sph + known.imag * cph
        dr = b.real - mr
        di = b.imag - mi
        return base - (dr * dr + di * di) / p_tn
    # b * exp(-j phase)
    br = b.real * cph + b.imag * sph
    bi = b.imag * cph - b.real * sph
    c = 2.0 / p_tn
    M = alphabet.size
    mag2 = b.real * b.real + b.imag * b.imag
    base = base - (mag2 + 1.0) / p_tn - np.log(M)
    # closed forms: the alphabet is {+-1} or {+-1, +-j}
    if M == 2:
        return base + _log2cosh(c * br)
    if M == 4:
        l1 = _log2cosh(c * br)
        l2 = _log2cosh(c * bi)
        hi = max(l1, l2)
        return base + hi + np.log1p(np.exp(-abs(l1 - l2)))
    mx = -np.inf
    for i in range(M):
        t = c * (br * alphabet[i].real + bi * alphabet[i].imag)
        if t > mx:
            mx = t
    acc = 0.0
    for i in range(M):
        t = c * (br * alphabet[i].real + bi * alphabet[i].imag)
        acc += np.exp(t - mx)
    return base + mx + np.log(acc)


@njit(cache=True)
def measurement_loglik_kernel(b, phase, revealed, known, alphabet, p_tn):
    """Log of the revealed Gaussian or the equal-weight M-PSK mixture."""
    return _loglik_trig(b, np.cos(phase), np.sin(phase), revealed, known, alphabet, p_tn)


@njit(cache=True)
def _systematic_indices(logw, u):
    N = logw.size
    idx = np.empty(N, dtype=np.int64)
    cum = 0.0
    j = 0
    cum = np.exp(logw[0])
    for i in range(N):
        pos = (u + i) / N
        while pos > cum and j < N - 1:
            j += 1
            cum += np.exp(logw[j])
        idx[i] = j
    return idx


@njit(cache=True)
def pf_chunk(
    samples, revealed, known, alphabet, p_tn, s_phi, s_om, thresh,
    phases, freqs, logw, z_phi, z_om, u, start_fresh,
    out_ph, out_fr, out_lw, out_est, out_neff, out_resampled, degenerate,
):
    """Advance the bootstrap filter over one chunk, mutating the cloud in place.

    Returns the accumulated one-step prediction log-density.
    """
    K = samples.size
    N = phases.size
    tmp = np.empty(N)
    cph = np.empty(N)
    sph = np.empty(N)
    ll_total = 0.0
    for k in range(K):
        if not (k == 0 and start_fresh):
            for i in range(N):
                phases[i] += freqs[i] + s_phi * z_phi[k, i]
                freqs[i] += s_om * z_om[k, i]
        mx = -np.inf
        for i in range(N):
            cph[i] = np.cos(phases[i])
            sph[i] = np.sin(phases[i])
            ll = _loglik_trig(samples[k], cph[i], sph[i], revealed[k], known[k], alphabet, p_tn)
            v = logw[i] + ll
            if np.isnan(v):
                v = -np.inf
            tmp[i] = v
            if v > mx:
                mx = v
        if not np.isfinite(mx):
            degenerate[k] = True
            for i in range(N):
                logw[i] = -np.log(N)
        else:
            s = 0.0
            for i in range(N):
                s += np.exp(tmp[i] - mx)
            lse = mx + np.log(s)
            ll_total += lse
            for i in range(N):
                logw[i] = tmp[i] - lse
        s2 = 0.0
        cr = 0.0
        ci = 0.0
        for i in range(N):
            w = np.exp(logw[i])
            s2 += w * w
            cr += w * cph[i]
            ci += w * sph[i]
            out_ph[k, i] = phases[i]
            out_fr[k, i] = freqs[i]
            out_lw[k, i] = logw[i]
        neff = 1.0 / s2
        out_neff[k] = neff
        out_est[k] = np.arctan2(ci, cr)
        if neff < thresh * N:
            idx = _systematic_indices(logw, u[k])
            new_ph = phases[idx]
            new_fr = freqs[idx]
            for i in range(N):
                phases[i] = new_ph[i]
                freqs[i] = new_fr[i]
                logw[i] = -np.log(N)
            out_resampled[k] = True
    return ll_total


@njit(cache=True)
def _log_transition(diff, var):
    if var > 0.0:
        return -0.5 * diff * diff / var
    if abs(diff) <= _DETERMINISTIC_TOL:
        return 0.0
    return -np.inf


@njit(cache=True, fastmath=True)
def _draw(logb, mx, u, buf):
    """Inverse-CDF draw from unnormalized log weights with known maximum."""
    total = 0.0
    for i in range(logb.size):
        total += np.exp(logb[i] - mx)
        buf[i] = total
    target = u * total
    for i in range(logb.size):
        if buf[i] >= target:
            return i
    return logb.size - 1


@njit(cache=True)
def _max(x):
    mx = -np.inf
    for i in range(x.size):
        if x[i] > mx:
            mx = x[i]
    return mx


@njit(cache=True)
def backward_simulation_kernel(ph, fr, lw, var_phi, var_om, u, out_ph, out_fr):
    """Draw ``u.shape[1]`` trajectories backward through stored filter clouds.

    Returns the number of (step, trajectory) pairs where no particle was
    consistent with the future trajectory (filter weights used instead).
    """
    K, N = ph.shape
    J = u.shape[1]
    logb = np.empty(N)
    buf = np.empty(N)
    fallbacks = 0
    mx_last = _max(lw[K - 1])
    for j in range(J):
        idx = _draw(lw[K - 1], mx_last, u[K - 1, j], buf)
        out_ph[K - 1, j] = ph[K - 1, idx]
        out_fr[K - 1, j] = fr[K - 1, idx]
    for k in range(K - 2, -1, -1):
        ph_k = ph[k]
        fr_k = fr[k]
        lw_k = lw[k]
        for j in range(J):
            cur_ph = out_ph[k + 1, j]
            cur_fr = out_fr[k + 1, j]
            mx = -np.inf
            for i in range(N):
                v = (
                    lw_k[i]
                    + _log_transition(cur_ph - ph_k[i] - fr_k[i], var_phi)
                    + _log_transition(cur_fr - fr_k[i], var_om)
                )
                logb[i] = v
                if v > mx:
                    mx = v
            if not np.isfinite(mx):
                fallbacks += 1
                idx = _draw(lw_k, _max(lw_k), u[k, j], buf)
            else:
                idx = _draw(logb, mx, u[k, j], buf)
            out_ph[k, j] = ph_k[idx]
            out_fr[k, j] = fr_k[idx]
    return fallbacks


@njit(cache=True)
def ekf_kernel(
    samples, revealed, known, alphabet, p_tn, var_phi, var_om, x0, P0,
    out_phase, out_freq, out_logdens,
):
    """Extended Kalman filter on (phase, frequency) with a Cartesian measurement.

    Returns the index of the first step with a non-positive-definite
    covariance, or -1.
    """
    K = samples.size
    x_ph = x0[0]
    x_fr = x0[1]
    p00 = P0[0, 0]
    p01 = P0[0, 1]
    p11 = P0[1, 1]
    r = p_tn / 2.0
    M = alphabet.size
    for k in range(K):
        if k > 0:
            x_ph = x_ph + x_fr
            n00 = p00 + 2.0 * p01 + p11 + var_phi
            n01 = p01 + p11
            n11 = p11 + var_om
            p00, p01, p11 = n00, n01, n11
        b = samples[k]
        cph = np.cos(x_ph)
        sph = np.sin(x_ph)
        if revealed[k]:
            a = known[k]
        else:
            # hard decision on the de-rotated sample
            br = b.real * cph + b.imag * sph
            bi = b.imag * cph - b.real * sph
            best = 0
            best_v = -np.inf
            for i in range(M):
                v = br * alphabet[i].real + bi * alphabet[i].imag
                if v > best_v:
                    best_v = v
                    best = i
            a = alphabet[best]
        hr = a.real * cph - a.imag * sph
        hi = a.real * sph + a.imag * cph
        g0 = -hi
        g1 = hr
        nu0 = b.real - hr
        nu1 = b.imag - hi
        s00 = p00 * g0 * g0 + r
        s01 = p00 * g0 * g1
        s11 = p00 * g1 * g1 + r
        det = s00 * s11 - s01 * s01
        i00 = s11 / det
        i01 = -s01 / det
        i11 = s00 / det
        quad = nu0 * (i00 * nu0 + i01 * nu1) + nu1 * (i01 * nu0 + i11 * nu1)
        out_logdens[k] = -_LOG_2PI - 0.5 * np.log(det) - 0.5 * quad
        # gain K = P H^T S^-1, with H = [[g0, 0], [g1, 0]]
        a0 = p00 * g0
        a1 = p00 * g1
        c0 = p01 * g0
        c1 = p01 * g1
        k00 = a0 * i00 + a1 * i01
        k01 = a0 * i01 + a1 * i11
        k10 = c0 * i00 + c1 * i01
        k11 = c0 * i01 + c1 * i11
        x_ph += k00 * nu0 + k01 * nu1
        x_fr += k10 * nu0 + k11 * nu1
        # Joseph form: (I - KH) P (I - KH)^T + K R K^T
        m00 = 1.0 - (k00 * g0 + k01 * g1)
        m10 = -(k10 * g0 + k11 * g1)
        t00 = m00 * p00
        t01 = m00 * p01
        t10 = m10 * p00 + p01
        t11 = m10 * p01 + p11
        n00 = t00 * m00 + r * (k00 * k00 + k01 * k01)
        n01 = t00 * m10 + t01 + r * (k00 * k10 + k01 * k11)
        n11 = t10 * m10 + t11 + r * (k10 * k10 + k11 * k11)
        p00, p01, p11 = n00, n01, n11
        out_phase[k] = x_ph
        out_freq[k] = x_fr
        if not (p00 > 0.0 and p11 >= 0.0 and p00 * p11 - p01 * p01 >= -1e-9 * p00 * p11):
            return k
    return -1
