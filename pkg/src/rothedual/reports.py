"""Records for verified inequalities and their JSON form."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# Relative slack on certified inequality checks.
ASSERT_RTOL = 1e-9


def conjugate(p):
    if np.isinf(p):
        return 1.0
    if p == 1:
        return np.inf
    return p / (p - 1.0)


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if np.isfinite(x) else str(x)


@dataclass
class EstimateReport:
    """One inequality ``lhs <= rhs``.

    ``certified`` marks checks whose constants are exact, so a failure is a
    real violation. Uncertified checks are informational only.
    """

    inequality: str
    p: float
    lhs: float
    rhs: float
    certified: bool = True
    K_hat: Optional[float] = None
    K_method: Optional[str] = None
    params: dict = field(default_factory=dict)
    rtol: float = ASSERT_RTOL

    @property
    def p_conj(self):
        return conjugate(self.p)

    @property
    def margin(self):
        return self.rhs - self.lhs

    @property
    def passed(self):
        return bool(self.lhs <= self.rhs * (1.0 + self.rtol) + 1e-300)

    def to_dict(self):
        return {
            "inequality": self.inequality,
            "p": _num(self.p),
            "p_conj": _num(self.p_conj),
            "lhs": _num(self.lhs),
            "rhs": _num(self.rhs),
            "margin": _num(self.margin),
            "pass": self.passed,
            "certified": self.certified,
            "K_hat": _num(self.K_hat),
            "method": self.K_method,
            "params": {k: _num(v) if isinstance(v, (int, float, np.floating)) else v
                       for k, v in self.params.items()},
        }


@dataclass
class VerificationReport:
    """A named group of inequality records."""

    name: str
    records: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    @property
    def passed(self):
        """True when every certified record holds."""
        return all(r.passed for r in self.records if r.certified)

    def add(self, record):
        self.records.append(record)
        return record

    def __getitem__(self, inequality):
        for r in self.records:
            if r.inequality == inequality:
                return r
        raise KeyError(inequality)

    def violations(self):
        return [r for r in self.records if r.certified and not r.passed]

    def to_dict(self):
        return {"name": self.name, "pass": self.passed, "info": self.info,
                "records": [r.to_dict() for r in self.records]}
