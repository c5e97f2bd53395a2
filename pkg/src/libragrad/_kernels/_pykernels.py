"""Pure-Python/numpy versions of the compiled kernels.

Must stay result-compatible with ``_ckernels.pyx``: the PRNG kernels agree
bit-for-bit, the float kernels to rounding.
"""

import math

import numpy as np

_MASK = (1 << 64) - 1
_TWO_PI = 2.0 * math.pi
_INV_2_53 = 1.0 / 9007199254740992.0
BICUBIC_A = -0.75


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _MASK


def _next(s):
    s0, s1, s2, s3 = s
    result = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
    t = (s1 << 17) & _MASK
    s2 ^= s0
    s3 ^= s1
    s1 ^= s2
    s0 ^= s3
    s2 ^= t
    s3 = _rotl(s3, 45)
    s[0], s[1], s[2], s[3] = s0, s1, s2, s3
    return result


def xoshiro_next_u64(state):
    s = [int(v) for v in state]
    r = _next(s)
    state[:] = np.array(s, dtype=np.uint64)
    return r


def xoshiro_uniform_fill(state, out):
    s = [int(v) for v in state]
    for i in range(out.shape[0]):
        out[i] = (_next(s) >> 11) * _INV_2_53
    state[:] = np.array(s, dtype=np.uint64)


def xoshiro_normal_fill(state, out):
    # Box-Muller, both outputs of each pair used; an odd tail drops the sine
    s = [int(v) for v in state]
    n = out.shape[0]
    i = 0
    while i < n:
        u1 = 1.0 - (_next(s) >> 11) * _INV_2_53
        u2 = (_next(s) >> 11) * _INV_2_53
        r = math.sqrt(-2.0 * math.log(u1))
        out[i] = r * math.cos(_TWO_PI * u2)
        if i + 1 < n:
            out[i + 1] = r * math.sin(_TWO_PI * u2)
        i += 2
    state[:] = np.array(s, dtype=np.uint64)


def _cubic(x):
    a = BICUBIC_A
    x = abs(x)
    if x <= 1.0:
        return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    if x < 2.0:
        return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    return 0.0


def _resize_matrix(n, factor):
    m = np.zeros((n * factor, n))
    for o in range(n * factor):
        src = (o + 0.5) / factor - 0.5
        i0 = math.floor(src)
        t = src - i0
        for k in range(-1, 3):
            w = _cubic(t - k)
            j = min(max(i0 + k, 0), n - 1)
            m[o, j] += w
    return m


def bicubic_upsample(img, factor):
    img = np.asarray(img, dtype=np.float64)
    ry = _resize_matrix(img.shape[0], factor)
    rx = _resize_matrix(img.shape[1], factor)
    return ry @ img @ rx.T


def ordering_aucs(table, n):
    """Mean performance over s=0..n removals for every removal ordering.

    ``table[mask]`` is the performance with the tokens in bit-set ``mask``
    kept. Orderings are enumerated in lexicographic order.
    """
    full = (1 << n) - 1
    perm = list(range(n))
    count = math.factorial(n)
    out = np.empty(count)
    tab = [float(v) for v in table]
    for p in range(count):
        mask = full
        total = tab[mask]
        for s in range(n):
            mask &= ~(1 << perm[s])
            total += tab[mask]
        out[p] = total / (n + 1)
        # next lexicographic permutation
        i = n - 2
        while i >= 0 and perm[i] > perm[i + 1]:
            i -= 1
        if i < 0:
            break
        j = n - 1
        while perm[j] < perm[i]:
            j -= 1
        perm[i], perm[j] = perm[j], perm[i]
        perm[i + 1:] = reversed(perm[i + 1:])
    return out
