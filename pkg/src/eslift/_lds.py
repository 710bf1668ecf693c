"""Exact-arithmetic core for the equispaced low-discrepancy levels on (0,1).

The level sizes M_m follow a floor-crossing rule on the count function
c(M) = b (M+1) M^(-(1+eta)/3).  For eta close to 2 the sizes grow past 2^53,
so every floor/membership decision is reduced to a big-integer comparison
(eta is snapped to a nearby rational; the exponent (1+eta)/3 = aN/aD then
turns powers of M into integer powers).  Point windows are located exactly
and hold only a handful of grid points, which keeps all of this cheap even
for level sizes around 1e23.
"""
from __future__ import annotations

from fractions import Fraction
from math import exp, floor, log

# Direct scan bound before switching to the monotone bisection path.
_SCAN_LIMIT = 4096


def snap_eta(eta) -> Fraction:
    """Rational eta with a small denominator (decimal inputs like 0.3 mean 3/10)."""
    f = Fraction(eta).limit_denominator(10_000)
    if not 0 < f < 2:
        raise ValueError("eta must lie in (0, 2)")
    return f


def alpha_of(eta: Fraction) -> Fraction:
    return (1 + eta) / 3


def radius_float(m_size: int, b: Fraction, alpha: Fraction) -> float:
    """r(M) = (b/2) M^(-alpha) in floating point."""
    if m_size == 1:
        return float(b) / 2.0
    return float(b) / 2.0 * exp(-float(alpha) * log(m_size))


def _count_ge(m_size: int, k: int, b: Fraction, alpha: Fraction) -> bool:
    """b (M+1) M^-alpha >= k, exactly."""
    a_n, a_d = alpha.numerator, alpha.denominator
    return (b.numerator * (m_size + 1)) ** a_d >= (k * b.denominator) ** a_d * m_size ** a_n


def _cond_prev(m_size: int, k: int, b: Fraction, alpha: Fraction) -> bool:
    """b M (M-1)^-alpha <= k, exactly (the left inequality of the level rule)."""
    a_n, a_d = alpha.numerator, alpha.denominator
    return (b.numerator * m_size) ** a_d <= (k * b.denominator) ** a_d * (m_size - 1) ** a_n


def floor_count(m_size: int, b: Fraction, alpha: Fraction) -> int:
    """floor(b (M+1) M^-alpha) via a float estimate with exact fix-up."""
    if m_size == 1:
        est = float(b) * 2.0
    else:
        est = float(b) * (m_size + 1) * exp(-float(alpha) * log(m_size))
    k = max(0, floor(est) - 2)
    while _count_ge(m_size, k + 1, b, alpha):
        k += 1
    while k > 0 and not _count_ge(m_size, k, b, alpha):
        k -= 1
    return k


def _smallest_with_count(k: int, lo: int, b: Fraction, alpha: Fraction) -> int:
    """Smallest M >= lo with c(M) >= k; c is monotone increasing past lo."""
    if _count_ge(lo, k, b, alpha):
        return lo
    hi = lo
    while not _count_ge(hi, k, b, alpha):
        hi *= 4
    while lo + 1 < hi:
        mid = (lo + hi) // 2
        if _count_ge(mid, k, b, alpha):
            hi = mid
        else:
            lo = mid
    return hi


def next_level_size(m_prev: int, b: Fraction, alpha: Fraction) -> int:
    """First M > m_prev with 2r(M-1)M <= floor(2r(M)(M+1)) < 2r(M)(M+1)."""
    m = m_prev + 1
    scan_to = max(m_prev + 1, _SCAN_LIMIT)
    while m <= scan_to:
        k = floor_count(m, b, alpha)
        if k >= 1 and _cond_prev(m, k, b, alpha):
            return m
        m += 1
    # c(M) is monotone here (it increases for M > alpha/(1-alpha), far below
    # the scan limit for every eta < 2); try successive integer bands of c.
    k = floor_count(scan_to, b, alpha)
    while True:
        k += 1
        cand = max(_smallest_with_count(k, scan_to, b, alpha), m_prev + 1)
        if floor_count(cand, b, alpha) == k and _cond_prev(cand, k, b, alpha):
            return cand


def level_sizes(eta: Fraction, b: Fraction, levels: int) -> list[int]:
    """Sizes M_1=1 < M_2 < ... < M_levels of the sequence."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    sizes = [1]
    for _ in range(levels - 1):
        sizes.append(next_level_size(sizes[-1], b, alpha_of(eta)))
    return sizes


def window_stats(m_size: int, p: Fraction, b: Fraction, alpha: Fraction):
    """Exact (count, sum of squared offsets) of grid points with |x - p| < r(M).

    The grid is {i/(M+1)} for i = 1..M; membership is decided by the exact
    big-integer comparison of (i/(M+1) - p)^2 against r(M)^2.
    """
    a_n, a_d = alpha.numerator, alpha.denominator
    p_n, p_d = p.numerator, p.denominator
    center = (p_n * (m_size + 1)) // p_d
    half = int(radius_float(m_size, b, alpha) * (m_size + 1)) + 3
    rhs = (b.numerator ** 2 * p_d ** 2 * (m_size + 1) ** 2) ** a_d
    m_pow = m_size ** (2 * a_n)
    count = 0
    quad = 0.0
    for i in range(max(1, center - half), min(m_size, center + half) + 1):
        num = i * p_d - p_n * (m_size + 1)
        lhs = (4 * b.denominator ** 2 * num * num) ** a_d * m_pow
        if lhs < rhs:
            count += 1
            # num/(p_d (M+1)) is tiny; the subtraction already happened exactly
            quad += (float(num) / (p_d * float(m_size + 1))) ** 2
    return count, quad


def worst_case_gaps(m_size: int, eta: Fraction, b: Fraction,
                    n_offsets: int = 64) -> tuple[float, float]:
    """Worst count/quadrature gaps over window placements around x = 2/5.

    Scans n_offsets sub-grid shifts of the window centre; the count branch of
    the supremum is attained on offset intervals, so the scan recovers it.
    Returns (count_gap, quad_gap), both unnormalised.
    """
    alpha = alpha_of(eta)
    r = radius_float(m_size, b, alpha)
    base_i = (2 * (m_size + 1)) // 5
    worst_c = 0.0
    worst_q = 0.0
    for t in range(n_offsets):
        p = Fraction(base_i * n_offsets + t, (m_size + 1) * n_offsets)
        if not 0 < p < 1:
            continue
        count, quad = window_stats(m_size, p, b, alpha)
        worst_c = max(worst_c, abs(count / m_size - 2.0 * r))
        worst_q = max(worst_q, abs(quad / m_size - 2.0 * r ** 3 / 3.0))
    return worst_c, worst_q
