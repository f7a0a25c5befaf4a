# Выражения столбцов дизайна и функции времени
from dataclasses import dataclass

import numpy as np

from jmstate.errors import ConfigError, ValidationError

BASIS_KINDS = ("identity", "f1", "f2")


@dataclass(frozen=True)
class TimeBasis:
    """Именованная функция времени с аналитической производной"""
    name: str
    kind: str = "identity"
    alpha: float = 0.0
    nu: float = 0.0

    def __post_init__(self):
        if self.kind not in BASIS_KINDS:
            raise ConfigError(f"unknown time basis kind '{self.kind}'", {'basis': self.name})
        if not self.name or "'" in self.name or ":" in self.name or self.name == "1":
            raise ConfigError("invalid time basis name", {'basis': self.name})

    def value(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "identity":
            return t.copy()
        if self.kind == "f1":
            return (1.0 + t) ** self.alpha - 1.0
        return t ** (1.0 + self.nu) / (1.0 + t) ** self.nu

    def derivative(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "identity":
            return np.ones_like(t)
        if self.kind == "f1":
            return self.alpha * (1.0 + t) ** (self.alpha - 1.0)
        return t ** self.nu * (1.0 + t) ** (-self.nu - 1.0) * (1.0 + self.nu + t)


def time_basis(name, kind="identity", **params):
    """Фабрика функций времени: identity, f1 (alpha), f2 (nu)"""
    return TimeBasis(name, kind, float(params.get('alpha', 0.0)), float(params.get('nu', 0.0)))


def parse_term(expression):
    """Разбор выражения 'a:b:c' в кортеж множителей"""
    text = str(expression).strip()
    if not text:
        raise ConfigError("empty design term")
    factors = tuple(part.strip() for part in text.split(":"))
    if any(not f for f in factors):
        raise ConfigError("empty factor in design term", {'term': text})
    kept = tuple(f for f in factors if f != "1")
    return kept or ("1",)


def term_name(factors):
    return ":".join(factors)


@dataclass(frozen=True)
class DerivDesign:
    """Производная по времени фиксированной и случайной частей"""
    fixed: tuple
    ind_fixed: tuple
    random: tuple = ()
    ind_random: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, 'fixed', tuple(str(x) for x in self.fixed))
        object.__setattr__(self, 'random', tuple(str(x) for x in self.random))
        object.__setattr__(self, 'ind_fixed', tuple(int(i) for i in self.ind_fixed))
        object.__setattr__(self, 'ind_random', tuple(int(i) for i in self.ind_random))
        if len(self.fixed) != len(self.ind_fixed) or len(self.random) != len(self.ind_random):
            raise ConfigError("derivative design terms and index maps differ in length")

    def check_against(self, p, q):
        for i in self.ind_fixed:
            if not 0 <= i < p:
                raise ConfigError("derivative fixed index out of range", {'index': i, 'p': p})
        for i in self.ind_random:
            if not 0 <= i < q:
                raise ConfigError("derivative random index out of range", {'index': i, 'q': q})


def _differentiate(factors, bases):
    """Производная одного члена; None если член не зависит от времени"""
    timed = [i for i, f in enumerate(factors) if f in bases]
    if any(f.endswith("'") for f in factors):
        raise ConfigError("term already holds a derivative", {'term': term_name(factors)})
    if not timed:
        return None
    if len(timed) > 1:
        raise ConfigError("term with two time-basis factors cannot be differentiated",
                          {'term': term_name(factors)})
    position = timed[0]
    name = factors[position]
    rest = list(factors)
    if bases[name].kind == "identity":
        del rest[position]
    else:
        rest[position] = name + "'"
    return term_name(rest) if rest else "1"


def derive_deriv_design(fixed, random, bases):
    """Автоматическая производная дизайна по времени"""
    lookup = {b.name: b for b in bases}
    fixed_terms, ind_fixed = [], []
    for index, expression in enumerate(fixed):
        derived = _differentiate(parse_term(expression), lookup)
        if derived is not None:
            fixed_terms.append(derived)
            ind_fixed.append(index)
    random_terms, ind_random = [], []
    for index, expression in enumerate(random):
        derived = _differentiate(parse_term(expression), lookup)
        if derived is not None:
            random_terms.append(derived)
            ind_random.append(index)
    return DerivDesign(tuple(fixed_terms), tuple(ind_fixed), tuple(random_terms), tuple(ind_random))


class DesignEvaluator:
    """Вычисление строк дизайна по времени и ковариатам"""

    def __init__(self, fixed, random, bases=(), deriv=None):
        self.bases = {b.name: b for b in bases}
        self.fixed_terms = tuple(parse_term(e) for e in fixed)
        self.random_terms = tuple(parse_term(e) for e in random)
        self.deriv = deriv
        if deriv is not None:
            deriv.check_against(len(self.fixed_terms), len(self.random_terms))
            self.dfixed_terms = tuple(parse_term(e) for e in deriv.fixed)
            self.drandom_terms = tuple(parse_term(e) for e in deriv.random)
        for factors in self.fixed_terms + self.random_terms:
            for factor in factors:
                if factor.endswith("'"):
                    raise ConfigError("derivative factor in a level design", {'factor': factor})

    @property
    def p(self):
        return len(self.fixed_terms)

    @property
    def q(self):
        return len(self.random_terms)

    def covariate_names(self):
        """Ковариаты, используемые в выражениях"""
        names = []
        terms = self.fixed_terms + self.random_terms
        if self.deriv is not None:
            terms = terms + self.dfixed_terms + self.drandom_terms
        for factors in terms:
            for factor in factors:
                base = factor.rstrip("'")
                if factor != "1" and base not in self.bases and factor not in names:
                    names.append(factor)
        return tuple(names)

    def _factor(self, factor, t, covariates):
        if factor == "1":
            return np.ones_like(t)
        if factor.endswith("'"):
            name = factor[:-1]
            if name not in self.bases:
                raise ConfigError("derivative of an unknown time basis", {'factor': factor})
            return self.bases[name].derivative(t)
        if factor in self.bases:
            return self.bases[factor].value(t)
        if factor not in covariates:
            raise ValidationError("unknown covariate column", {'covariate': factor})
        return np.broadcast_to(np.asarray(covariates[factor], dtype=float), t.shape)

    def _matrix(self, terms, t, covariates):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty((t.shape[0], len(terms)))
        for j, factors in enumerate(terms):
            column = np.ones_like(t)
            for factor in factors:
                column = column * self._factor(factor, t, covariates)
            out[:, j] = column
        return out

    def fixed(self, t, covariates):
        return self._matrix(self.fixed_terms, t, covariates)

    def random(self, t, covariates):
        return self._matrix(self.random_terms, t, covariates)

    def dfixed(self, t, covariates):
        """Производная фиксированного дизайна, развёрнутая до p столбцов"""
        if self.deriv is None:
            raise ConfigError("model has no derivative design")
        compact = self._matrix(self.dfixed_terms, t, covariates)
        full = np.zeros((compact.shape[0], self.p))
        for j, index in enumerate(self.deriv.ind_fixed):
            full[:, index] += compact[:, j]
        return full

    def drandom(self, t, covariates):
        if self.deriv is None:
            raise ConfigError("model has no derivative design")
        compact = self._matrix(self.drandom_terms, t, covariates)
        full = np.zeros((compact.shape[0], self.q))
        for j, index in enumerate(self.deriv.ind_random):
            full[:, index] += compact[:, j]
        return full
