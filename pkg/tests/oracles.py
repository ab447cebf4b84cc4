"""Slow, obviously-correct reference implementations used only by the tests."""

import numpy as np


def conv2d_loops(x, w, b=None, stride=(1, 1), pad=(0, 0), groups=1, dilation=(1, 1)):
    """Direct nested-loop grouped convolution of a [C, H, W] input."""
    C, H, W = x.shape
    Co, Cg, kh, kw = w.shape
    sh, sw = stride
    ph, pw = pad
    dh, dw = dilation
    xp = np.zeros((C, H + 2 * ph, W + 2 * pw))
    xp[:, ph:ph + H, pw:pw + W] = x
    Ho = (H + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    Wo = (W + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    out_per_group = Co // groups
    y = np.zeros((Co, Ho, Wo))
    for o in range(Co):
        g = o // out_per_group
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0 if b is None else b[o]
                for c in range(Cg):
                    for u in range(kh):
                        for v in range(kw):
                            acc += w[o, c, u, v] * xp[g * Cg + c, i * sh + u * dh, j * sw + v * dw]
                y[o, i, j] = acc
    return y


def sweep_rates(scores, labels):
    """(threshold, p_miss, p_fa) at every candidate threshold; accept when score >= thr."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    tar, non = scores[labels], scores[~labels]
    rows = []
    for t in list(np.unique(scores)) + [np.inf]:
        rows.append((t, float(np.mean(tar < t)), float(np.mean(non >= t))))
    return rows


def brute_eer(scores, labels):
    """Interpolate p_miss and p_fa linearly between the two sweep points where they cross."""
    rows = sweep_rates(scores, labels)
    for (t0, m0, f0), (t1, m1, f1) in zip(rows, rows[1:]):
        d0, d1 = m0 - f0, m1 - f1
        if d0 == 0:
            return m0
        if d0 < 0 <= d1:
            lam = -d0 / (d1 - d0)
            return m0 + lam * (m1 - m0)
    return rows[-1][1]


def brute_min_dcf(scores, labels, p_target, c_miss=1.0, c_fa=1.0):
    best = min(c_miss * p_target * m + c_fa * (1 - p_target) * f for _, m, f in sweep_rates(scores, labels))
    return best / min(c_miss * p_target, c_fa * (1 - p_target))


def dominant_freq(x, sr):
    """Spectral peak refined by parabolic interpolation on the log magnitude."""
    X = np.abs(np.fft.rfft(x * np.hanning(len(x))))
    k = int(np.argmax(X[1:-1])) + 1
    a, b, c = np.log(X[k - 1:k + 2] + 1e-300)
    delta = 0.5 * (a - c) / (a - 2 * b + c)
    return (k + delta) * sr / len(x)
