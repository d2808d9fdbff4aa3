"""Population (expected) mortality: tabular life tables and a Weibull hazard.

Life-table CSV layout, header exactly ``sex,age,year,rate``::

    sex,age,year,rate
    M,60,2000,0.0123
    F,60,2000,0.0071

``sex`` is ``M`` or ``F``, ``age`` an integer in 0..120, ``year`` an integer and
``rate`` a non-negative death rate per person-year. A cell covers ages
``[age, age + 1)`` and calendar time ``[year, year + 1)``; attained ages are
floored, never interpolated. Queries outside the table are clamped to the
nearest cell.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

__all__ = [
    "LifeTableError",
    "LifeTable",
    "Lookup",
    "WeibullPopHazard",
    "load_life_table",
    "pop_hazard",
    "pop_cum_hazard",
]

HEADER = ["sex", "age", "year", "rate"]
SEXES = ("M", "F")


class LifeTableError(ValueError):
    """Malformed or conflicting life-table input."""


class Lookup(NamedTuple):
    rate: float
    clamped: bool


@dataclass(frozen=True)
class WeibullPopHazard:
    """Weibull background hazard ``(k/s) (u/s)^(k-1)`` in attained age ``u``."""

    scale: float
    shape: float

    def __post_init__(self):
        if not (self.scale > 0 and self.shape > 0):
            raise ValueError("Weibull scale and shape must be > 0")

    def hazard(self, attained_age):
        u = np.asarray(attained_age, dtype=float)
        return (self.shape / self.scale) * (u / self.scale) ** (self.shape - 1.0)

    def cum_hazard(self, from_age, delta):
        """Hazard accumulated between ages ``from_age`` and ``from_age + delta``."""
        a = np.asarray(from_age, dtype=float)
        d = np.asarray(delta, dtype=float)
        return ((a + d) / self.scale) ** self.shape - (a / self.scale) ** self.shape


class LifeTable:
    """Immutable rate lookup keyed by (sex, integer age, calendar year).

    The table must be rectangular: every (sex, age, year) combination within
    the declared age and year ranges has a rate for each sex present.
    """

    def __init__(self, rates: dict):
        if not rates:
            raise LifeTableError("empty life table")
        self._rates = dict(rates)
        sexes = sorted({k[0] for k in rates})
        ages = sorted({k[1] for k in rates})
        years = sorted({k[2] for k in rates})
        self.sexes = tuple(sexes)
        self.age_range = (ages[0], ages[-1])
        self.year_range = (years[0], years[-1])
        missing = [
            (s, a, y)
            for s in sexes
            for a in range(ages[0], ages[-1] + 1)
            for y in range(years[0], years[-1] + 1)
            if (s, a, y) not in self._rates
        ]
        if missing:
            raise LifeTableError(
                f"life table is not rectangular; {len(missing)} missing cells, e.g. {missing[0]}"
            )
        vals = np.fromiter(self._rates.values(), dtype=float)
        self.rate_range = (float(vals.min()), float(vals.max()))

    def __len__(self):
        return len(self._rates)

    def summary(self) -> dict:
        return {
            "rows": len(self),
            "sexes": list(self.sexes),
            "age_range": list(self.age_range),
            "year_range": list(self.year_range),
            "rate_range": list(self.rate_range),
        }

    def lookup(self, attained_age: float, sex: str, year: float) -> Lookup:
        if sex not in self.sexes:
            raise KeyError(f"sex {sex!r} not in life table (has {self.sexes})")
        age = math.floor(attained_age)
        yr = math.floor(year)
        a = min(max(age, self.age_range[0]), self.age_range[1])
        y = min(max(yr, self.year_range[0]), self.year_range[1])
        return Lookup(self._rates[(sex, a, y)], (a, y) != (age, yr))

    def hazard(self, attained_age: float, sex: str, year: float) -> float:
        return self.lookup(attained_age, sex, year).rate

    def cum_hazard(self, from_age: float, delta: float, sex: str, year: float,
                   static_year: bool = False) -> float:
        """Integrate the piecewise-constant rate over ``[0, delta]`` of follow-up.

        Age advances with follow-up time; so does the calendar year unless
        ``static_year`` is set. Cell edges fall where either crosses an integer.
        """
        if delta <= 0:
            return 0.0
        total = 0.0
        s = 0.0
        while s < delta:
            age = from_age + s
            nxt = math.floor(age) + 1 - from_age
            if not static_year:
                nxt = min(nxt, math.floor(year + s) + 1 - year)
            nxt = min(max(nxt, s), delta)
            if nxt <= s:
                # float guard: step at least one ulp past the edge
                nxt = min(math.nextafter(s, math.inf), delta)
            yr = year if static_year else year + s
            total += self.hazard(age, sex, yr) * (nxt - s)
            s = nxt
        return total


def load_life_table(path) -> LifeTable:
    """Parse a life-table CSV (see module docstring for the layout).

    Raises:
        LifeTableError: on a bad header, malformed row (with line number),
            negative rate or duplicate stratum.
    """
    path = Path(path)
    rates = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LifeTableError(f"{path}: empty file") from None
        if [h.strip() for h in header] != HEADER:
            raise LifeTableError(f"{path}:1: header must be {','.join(HEADER)}, got {','.join(header)}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise LifeTableError(f"{path}:{line}: expected 4 fields, got {len(row)}")
            sex, age_s, year_s, rate_s = (c.strip() for c in row)
            if sex not in SEXES:
                raise LifeTableError(f"{path}:{line}: sex must be M or F, got {sex!r}")
            try:
                age = int(age_s)
                year = int(year_s)
                rate = float(rate_s)
            except ValueError as exc:
                raise LifeTableError(f"{path}:{line}: {exc}") from None
            if not 0 <= age <= 120:
                raise LifeTableError(f"{path}:{line}: age {age} outside 0..120")
            if not (math.isfinite(rate) and rate >= 0):
                raise LifeTableError(f"{path}:{line}: rate must be a non-negative number, got {rate_s}")
            key = (sex, age, year)
            if key in rates:
                raise LifeTableError(f"{path}:{line}: duplicate stratum {key}")
            rates[key] = rate
    return LifeTable(rates)


def pop_hazard(source, attained_age, sex: str | None = None, year: float | None = None):
    """Population hazard at an attained age, from a table or a Weibull model."""
    if isinstance(source, WeibullPopHazard):
        return source.hazard(attained_age)
    if sex is None or year is None:
        raise ValueError("tabular lookup needs sex and year")
    return source.hazard(attained_age, sex, year)


def pop_cum_hazard(source, from_age, delta, sex: str | None = None, year: float | None = None,
                   static_year: bool = False):
    if isinstance(source, WeibullPopHazard):
        return source.cum_hazard(from_age, delta)
    if sex is None or year is None:
        raise ValueError("tabular lookup needs sex and year")
    return source.cum_hazard(from_age, delta, sex, year, static_year=static_year)
