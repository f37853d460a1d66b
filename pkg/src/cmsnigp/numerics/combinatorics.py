"""Generalized factorial coefficients C(m, k; sigma) stored in log-space."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GenFactorialTable:
    """Table of ``ln C(m, k; sigma)`` for ``0 <= k <= m <= m_max``.

    Entries that are exactly zero (``k = 0 < m`` and ``k > m``) hold ``-inf``.
    """

    sigma: float
    m_max: int
    log_table: np.ndarray

    def log_coef(self, m, k):
        if not (0 <= m <= self.m_max):
            raise ValueError(f"m={m} outside table range 0..{self.m_max}")
        if k < 0 or k > m:
            return -math.inf
        return float(self.log_table[m, k])

    def coef(self, m, k):
        return math.exp(self.log_coef(m, k))


def gen_factorial_table(sigma, m_max):
    """Fill the table with the triangular recurrence.

    ``C(m+1, k) = (m - k sigma) C(m, k) + sigma C(m, k-1)`` with
    ``C(0, 0) = 1`` and ``C(m, 0) = 0`` for ``m >= 1``. Both terms are
    non-negative for ``0 < sigma < 1`` (``m - k sigma > 0`` whenever
    ``1 <= k <= m``), so the update is a log-add-exp of two finite logs.
    """
    sigma = float(sigma)
    if not 0.0 < sigma < 1.0:
        raise ValueError("sigma must lie in (0, 1)")
    m_max = int(m_max)
    if m_max < 1:
        raise ValueError("m_max must be at least 1")
    table = np.full((m_max + 1, m_max + 1), -np.inf)
    table[0, 0] = 0.0
    log_sigma = math.log(sigma)
    k = np.arange(m_max + 1)
    for m in range(m_max):
        prev = table[m]
        stay = np.full(m_max + 1, -np.inf)
        ks = k[1:m + 1]
        stay[1:m + 1] = prev[1:m + 1] + np.log(m - ks * sigma)
        grow = np.full(m_max + 1, -np.inf)
        grow[1:] = prev[:-1] + log_sigma
        table[m + 1] = np.logaddexp(stay, grow)
    return GenFactorialTable(sigma, m_max, table)
