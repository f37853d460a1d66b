"""Log-space numerical building blocks."""

from cmsnigp.numerics.combinatorics import GenFactorialTable, gen_factorial_table
from cmsnigp.numerics.quadrature import (
    QuadratureRule,
    integrate_log,
    integrate_log_auto,
    locate_peak,
    tanh_sinh_rule,
)
from cmsnigp.numerics.special import (
    log_bessel_k_half,
    log_bessel_k_int,
    log_factorials,
    log_gamma,
    log_rising_factorial,
    log_sum_exp,
)

__all__ = [
    "GenFactorialTable",
    "QuadratureRule",
    "gen_factorial_table",
    "integrate_log",
    "integrate_log_auto",
    "locate_peak",
    "log_bessel_k_half",
    "log_bessel_k_int",
    "log_factorials",
    "log_gamma",
    "log_rising_factorial",
    "log_sum_exp",
    "tanh_sinh_rule",
]
