# Численные ядра: B-сплайны, квадратуры, поиск корня, произведение-интеграл
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from itertools import product

import numpy as np
from scipy.interpolate import BSpline
from scipy.optimize import brentq
from scipy.special import roots_hermite

from jmstate.errors import NumericalError, RootBracketError, ValidationError

# Абсциссы и веса Кронрода-15 на [-1, 1] (положительная половина, последний узел 0)
KRONROD_NODES = np.array([
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
])
KRONROD_WEIGHTS = np.array([
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
])
# Веса Гаусса-7 в узлах KRONROD_NODES[1], [3], [5], [7]
GAUSS7_WEIGHTS = np.array([
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
])


def _symmetric(half_nodes, half_weights):
    """Полное правило по положительной половине с центральным узлом в конце"""
    nodes = np.concatenate([-half_nodes[:-1], half_nodes[::-1]])
    weights = np.concatenate([half_weights[:-1], half_weights[::-1]])
    return nodes, weights


_K15 = _symmetric(KRONROD_NODES, KRONROD_WEIGHTS)
_G7 = _symmetric(KRONROD_NODES[1::2], GAUSS7_WEIGHTS)

# веса Гаусса-7 на сетке из 15 узлов (нули в узлах Кронрода)
_G7_ON_K15 = np.zeros(15)
for _j, _i in enumerate((1, 3, 5)):
    _G7_ON_K15[_i] = _G7_ON_K15[14 - _i] = GAUSS7_WEIGHTS[_j]
_G7_ON_K15[7] = GAUSS7_WEIGHTS[3]


@dataclass(frozen=True, eq=False)
class BSplineBasis:
    """Базис B-сплайнов с полным вектором узлов"""
    degree: int
    knots: np.ndarray

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        object.__setattr__(self, 'knots', knots)
        d = self.degree
        if d < 0:
            raise ValidationError("negative spline degree")
        if knots.size < 2 * (d + 1) or np.any(np.diff(knots) < 0):
            raise ValidationError("knot vector must be non-decreasing with repeated boundaries")
        if np.any(knots[:d + 1] != knots[0]) or np.any(knots[-(d + 1):] != knots[-1]):
            raise ValidationError("boundary knots must have multiplicity degree+1")
        if not knots[-1] > knots[0]:
            raise ValidationError("knot span is empty")

    @classmethod
    def from_breakpoints(cls, breakpoints, degree=3):
        """Узлы (граница, внутренние..., граница) -> полный вектор"""
        points = np.asarray(breakpoints, dtype=float)
        full = np.concatenate([np.repeat(points[0], degree), points, np.repeat(points[-1], degree)])
        return cls(degree, full)

    @property
    def n_basis(self):
        return self.knots.size - self.degree - 1

    @property
    def lower(self):
        return float(self.knots[0])

    @property
    def upper(self):
        return float(self.knots[-1])

    @property
    def breakpoints(self):
        return self.knots[self.degree:self.knots.size - self.degree]

    def out_of_range(self, t):
        t = np.asarray(t, dtype=float)
        return bool(np.any((t < self.lower) | (t > self.upper)))

    @cached_property
    def _curve(self):
        return BSpline(self.knots, np.eye(self.n_basis), self.degree, extrapolate=True)

    def evaluate(self, t):
        """Значения базиса (n, n_basis); время прижимается к границам узлов"""
        t = np.clip(np.atleast_1d(np.asarray(t, dtype=float)), self.lower, self.upper)
        return self._curve(t)

    def combine(self, t, coefs):
        """sum_j B_j(t) c_j; коэффициент -inf даёт нулевую интенсивность"""
        return basis_dot(self.evaluate(t), coefs)


def basis_dot(B, coefs):
    """Свёртка базиса с коэффициентами только по положительным значениям базиса"""
    with np.errstate(invalid='ignore'):
        terms = np.where(B > 0.0, B * coefs, 0.0)
    return terms.sum(axis=-1)


def bspline_eval(basis, t, clamp=False):
    """Вектор значений базиса в точке t"""
    if not clamp and basis.out_of_range(t):
        raise ValidationError("time outside knot range",
                              {'time': float(t), 'lower': basis.lower, 'upper': basis.upper})
    return basis.evaluate(t)[0]


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray
    kind: str


@lru_cache(maxsize=64)
def _hermite(n):
    nodes, weights = roots_hermite(n)
    return nodes, weights


def gauss_hermite(n):
    """Правило Гаусса-Эрмита для веса exp(-x^2)"""
    if n < 1:
        raise ValidationError("Gauss-Hermite order must be at least 1", {'order': n})
    nodes, weights = _hermite(int(n))
    return QuadratureRule(nodes.copy(), weights.copy(), "hermite")


@lru_cache(maxsize=64)
def hermite_grid(n, q):
    """Тензорная сетка: узлы x (n^q, q) и лог-веса с множителем exp(|x|^2) 2^(q/2)"""
    nodes, weights = _hermite(int(n))
    if q == 0:
        return np.zeros((1, 0)), np.zeros(1)
    grid = np.array(list(product(range(n), repeat=q)))
    x = nodes[grid]
    log_w = np.log(weights)[grid].sum(axis=1) + (x ** 2).sum(axis=1) + 0.5 * q * math.log(2.0)
    x.setflags(write=False)
    log_w.setflags(write=False)
    return x, log_w


@dataclass(frozen=True, eq=False)
class AdaptedGrid:
    """Узлы b и лог-веса для интеграла по случайным эффектам"""
    nodes: np.ndarray
    log_weights: np.ndarray

    @property
    def weights(self):
        return np.exp(self.log_weights)


def pseudo_adaptive_nodes(rule, mode, scale):
    """b = mode + sqrt(2) * scale * x; веса нацелены на интеграл g(b) db"""
    if rule.kind != "hermite":
        raise ValidationError("adaptive nodes need a Hermite rule")
    mode = np.atleast_1d(np.asarray(mode, dtype=float))
    q = mode.size
    scale = np.asarray(scale, dtype=float).reshape(q, q)
    log_det = 0.0
    if q:
        sign, log_det = np.linalg.slogdet(scale)
        if sign == 0 or not np.isfinite(log_det):
            raise NumericalError("singular scale matrix for adaptive quadrature")
    x, base = hermite_grid(rule.nodes.size, q)
    nodes = mode + math.sqrt(2.0) * x @ scale.T
    return AdaptedGrid(nodes, base + float(log_det))


def kronrod_rule(a, b, order=15, panels=1):
    """Узлы и веса составного правила на [a, b]"""
    if order == 15:
        ref_nodes, ref_weights = _K15
    elif order == 7:
        ref_nodes, ref_weights = _G7
    else:
        raise ValidationError("unsupported Gauss-Kronrod order", {'order': order})
    edges = np.linspace(a, b, panels + 1)
    half = 0.5 * np.diff(edges)
    centers = 0.5 * (edges[1:] + edges[:-1])
    nodes = (centers[:, None] + half[:, None] * ref_nodes[None, :]).ravel()
    weights = (half[:, None] * ref_weights[None, :]).ravel()
    return nodes, weights


def gauss_kronrod(f, a, b, order=15, panels=1):
    """Интеграл f на [a, b] и оценка ошибки |K15 - G7|"""
    if b < a:
        raise ValidationError("integration bounds reversed", {'a': a, 'b': b})
    if a == b:
        return 0.0, 0.0
    edges = np.linspace(a, b, panels + 1)
    total, error = 0.0, 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        half = 0.5 * (hi - lo)
        center = 0.5 * (hi + lo)
        values = np.array([f(x) for x in center + half * _K15[0]], dtype=float)
        if not np.all(np.isfinite(values)):
            raise NumericalError("non-finite integrand value", {'a': float(lo), 'b': float(hi)})
        gauss = half * float(values @ _G7_ON_K15)
        if order == 7:
            total += gauss
        else:
            kronrod = half * float(values @ _K15[1])
            total += kronrod
            error += abs(kronrod - gauss)
    return total, error


def gauss_kronrod_15(f, a, b):
    return gauss_kronrod(f, a, b, order=15, panels=1)


def brent_root(f, lo, hi, tol=1e-8):
    """Корень f на [lo, hi] методом Брента"""
    f_lo, f_hi = f(lo), f(hi)
    if math.isnan(f_lo) or math.isnan(f_hi):
        raise NumericalError("function is not finite at the bracket ends", {'lo': lo, 'hi': hi})
    if f_lo == 0.0:
        return float(lo)
    if f_hi == 0.0:
        return float(hi)
    if np.sign(f_lo) == np.sign(f_hi):
        raise RootBracketError("no sign change in bracket", {'lo': lo, 'hi': hi})
    return float(brentq(f, lo, hi, xtol=tol, maxiter=500))


@dataclass(frozen=True, eq=False)
class StepFunctionMatrix:
    """Матричная ступенчатая функция: скачки в моменты jump_times"""
    jump_times: np.ndarray
    increments: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.jump_times, dtype=float)
        increments = np.asarray(self.increments, dtype=float)
        object.__setattr__(self, 'jump_times', times)
        object.__setattr__(self, 'increments', increments)
        if times.size and np.any(np.diff(times) <= 0):
            raise ValidationError("jump times must be strictly increasing")
        if increments.ndim != 3 or increments.shape[0] != times.size or increments.shape[1] != increments.shape[2]:
            raise ValidationError("increments must be one square matrix per jump time")

    @property
    def dimension(self):
        return self.increments.shape[1]

    def window(self, s, t):
        """Индексы скачков в (s, t]"""
        return np.flatnonzero((self.jump_times > s) & (self.jump_times <= t))

    def cumulative(self, t):
        """Сумма приращений до t включительно"""
        mask = self.jump_times <= t
        return self.increments[mask].sum(axis=0)


def product_integral(steps, s, t):
    """Упорядоченное произведение (I + dL) по скачкам в (s, t]"""
    if t < s:
        raise ValidationError("product integral needs s <= t", {'s': s, 't': t})
    M = steps.dimension
    P = np.eye(M)
    for j in steps.window(s, t):
        delta = steps.increments[j]
        if np.any(np.diag(delta) < -1.0 - 1e-12):
            raise NumericalError("diagonal increment below -1",
                                 {'time': float(steps.jump_times[j])})
        P = P @ (np.eye(M) + delta)
    return P
