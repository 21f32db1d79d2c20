"""Independent brute-force oracles used by the unit and acceptance tests.

Everything here is deliberately naive (explicit loops, textbook
elimination) and kept free of the library's own code paths.
"""

import numpy as np

LOG_EPS = 1e-12


def cos_oracle(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(u @ v / (nu * nv))


def aggregation_oracle(fmaps, labels, bank) -> float:
    """Mean over samples of min over same-class vectors and patches of -cos."""
    fmaps = np.asarray(fmaps, dtype=np.float64)
    bank = np.asarray(bank, dtype=np.float64)
    n, _, h, w = fmaps.shape
    total = 0.0
    for i in range(n):
        per_pair = []
        for j in range(bank.shape[1]):
            for r in range(h):
                for c in range(w):
                    per_pair.append(-cos_oracle(bank[labels[i], j], fmaps[i, :, r, c]))
        total += min(per_pair)
    return total / n


def separation_oracle(fmaps, labels, bank) -> float:
    """Mean over samples of min over wrong-class vectors and patches of cos."""
    fmaps = np.asarray(fmaps, dtype=np.float64)
    bank = np.asarray(bank, dtype=np.float64)
    n, _, h, w = fmaps.shape
    total = 0.0
    for i in range(n):
        per_pair = []
        for cls in range(bank.shape[0]):
            if cls == labels[i]:
                continue
            for j in range(bank.shape[1]):
                for r in range(h):
                    for c in range(w):
                        per_pair.append(cos_oracle(bank[cls, j], fmaps[i, :, r, c]))
        total += min(per_pair)
    return total / n


def orthogonality_oracle(bank) -> float:
    """Explicit per-class Gram construction, triple loop."""
    bank = np.asarray(bank, dtype=np.float64)
    num_classes, per_class, _ = bank.shape
    total = 0.0
    for c in range(num_classes):
        for i in range(per_class):
            for j in range(per_class):
                gram_ij = float(bank[c, i] @ bank[c, j])
                target = 1.0 if i == j else 0.0
                total += (gram_ij - target) ** 2
    return total


def subspace_separation_oracle(bank) -> float:
    """Pairwise projector-difference norms, explicit pair loop."""
    bank = np.asarray(bank, dtype=np.float64)
    num_classes = bank.shape[0]
    total = 0.0
    for c1 in range(num_classes):
        for c2 in range(c1 + 1, num_classes):
            p1 = bank[c1].T @ bank[c1]
            p2 = bank[c2].T @ bank[c2]
            total += np.sqrt(((p1 - p2) ** 2).sum())
    return -total / np.sqrt(2.0)


def cross_entropy_oracle(probs, onehot) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    onehot = np.asarray(onehot, dtype=np.float64)
    n = probs.shape[0]
    total = 0.0
    for i in range(n):
        for c in range(probs.shape[1]):
            total -= onehot[i, c] * np.log(max(probs[i, c], LOG_EPS))
    return total / n


def gaussian_elimination_rank(matrix, tol: float = 1e-9) -> int:
    """Row-reduction rank with partial pivoting and a relative pivot cutoff."""
    a = np.asarray(matrix, dtype=np.float64).copy()
    scale = np.abs(a).max()
    if scale == 0.0:
        return 0
    cutoff = tol * scale
    rows, cols = a.shape
    rank = 0
    pivot_row = 0
    for col in range(cols):
        pivot = pivot_row + np.abs(a[pivot_row:, col]).argmax()
        if abs(a[pivot, col]) <= cutoff:
            continue
        a[[pivot_row, pivot]] = a[[pivot, pivot_row]]
        a[pivot_row] = a[pivot_row] / a[pivot_row, col]
        for r in range(rows):
            if r != pivot_row:
                a[r] -= a[r, col] * a[pivot_row]
        rank += 1
        pivot_row += 1
        if pivot_row == rows:
            break
    return rank


def finite_difference_gradient(fn, x, step: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function over a flat array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    g = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(x)
        flat[i] = orig - step
        lo = fn(x)
        flat[i] = orig
        g[i] = (hi - lo) / (2 * step)
    return grad


def sorted_quantile_oracle(values, q: float) -> float:
    """Linear-interpolation quantile computed from an explicit sort."""
    values = np.sort(np.asarray(values, dtype=np.float64))
    n = values.size
    pos = q * (n - 1)
    lo = int(np.floor(pos))
    hi = int(np.ceil(pos))
    if lo == hi:
        return float(values[lo])
    frac = pos - lo
    return float(values[lo] * (1 - frac) + values[hi] * frac)


def normal_cdf_quadrature(x: float, mean: float, std: float) -> float:
    """Normal CDF by numerical integration of the density (independent of erf)."""
    from scipy import integrate

    def pdf(t):
        return np.exp(-0.5 * ((t - mean) / std) ** 2) / (std * np.sqrt(2 * np.pi))

    value, _ = integrate.quad(pdf, mean - 12 * std, x)
    return float(value)
