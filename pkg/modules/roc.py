"""
ROC module for serialroc
Builds empirical ROC curves from class-conditional scores and extracts the
zeroFRR / zeroFAR operational points a cascade stage is calibrated with.

Conventions:
    FAR(t) = |{impostor s : s > t}| / |impostor|   (accept iff s > t)
    FRR(t) = |{genuine s : s <= t}| / |genuine|    (not accepted = rejected)
"""

import io
import json
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Any, List, Tuple, Union, Sequence

import numpy as np
import pandas as pd

from modules.scores import ScoreSet

logger = logging.getLogger(__name__)


class RocError(Exception):
    """Custom exception for ROC curve errors"""
    pass


class PointKind(str, Enum):
    ZERO_FAR = 'zeroFAR'
    ZERO_FRR = 'zeroFRR'
    GENERIC = 'generic'


def _check_rate(name: str, value: float):
    if not (0.0 <= value <= 1.0):
        raise RocError(f"{name} must be a rate in [0, 1], got {value}")


@dataclass(frozen=True)
class OperationalPoint:
    """A threshold with its FAR and FRR values"""
    threshold: float
    far: float
    frr: float
    kind: PointKind = PointKind.GENERIC
    clamped: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'kind', PointKind(self.kind))
        if not np.isfinite(self.threshold):
            raise RocError(f"threshold must be finite, got {self.threshold}")
        _check_rate('far', self.far)
        _check_rate('frr', self.frr)
        if self.kind == PointKind.ZERO_FAR and self.far != 0.0:
            raise RocError(f"zeroFAR point must have far == 0, got {self.far}")
        if self.kind == PointKind.ZERO_FRR and self.frr != 0.0:
            raise RocError(f"zeroFRR point must have frr == 0, got {self.frr}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'threshold': self.threshold,
            'far': self.far,
            'frr': self.frr,
            'kind': self.kind.value,
            'clamped': self.clamped,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'OperationalPoint':
        try:
            return cls(float(data['threshold']), float(data['far']), float(data['frr']),
                       PointKind(data.get('kind', 'generic')), bool(data.get('clamped', False)))
        except (KeyError, TypeError, ValueError) as e:
            raise RocError(f"invalid operational point: {e}")


@dataclass(frozen=True, eq=False)
class RocCurve:
    """
    Step representation of (threshold, far, frr) sorted by threshold.

    Rates must be monotone (far non-increasing, frr non-decreasing). The
    far = 1 / frr = 1 sentinel ends are a property of build_roc output only;
    predicted and simulated cascade curves are RocCurves too.
    """
    thresholds: np.ndarray
    far: np.ndarray
    frr: np.ndarray

    def __post_init__(self):
        thresholds = np.array(self.thresholds, dtype=np.float64).reshape(-1)
        far = np.array(self.far, dtype=np.float64).reshape(-1)
        frr = np.array(self.frr, dtype=np.float64).reshape(-1)

        if thresholds.size == 0:
            raise RocError("ROC curve needs at least one point")
        if not (thresholds.size == far.size == frr.size):
            raise RocError("thresholds, far and frr must have the same length")
        if not np.all(np.isfinite(thresholds)):
            raise RocError("thresholds must be finite")
        if np.any(np.diff(thresholds) < 0):
            raise RocError("thresholds must be sorted ascending")
        for name, rates in (('far', far), ('frr', frr)):
            if np.any(~np.isfinite(rates)) or np.any(rates < 0.0) or np.any(rates > 1.0):
                raise RocError(f"{name} values must lie in [0, 1]")
        if np.any(np.diff(far) > 0):
            raise RocError("far must be non-increasing in threshold")
        if np.any(np.diff(frr) < 0):
            raise RocError("frr must be non-decreasing in threshold")

        for name, array in (('thresholds', thresholds), ('far', far), ('frr', frr)):
            array.setflags(write=False)
            object.__setattr__(self, name, array)

    def __len__(self) -> int:
        return self.thresholds.size

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RocCurve):
            return NotImplemented
        return (np.array_equal(self.thresholds, other.thresholds)
                and np.array_equal(self.far, other.far)
                and np.array_equal(self.frr, other.frr))

    __hash__ = None

    @property
    def points(self) -> List[Tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.far.tolist(), self.frr.tolist()))

    def rates_at(self, thresholds: Union[float, Sequence[float], np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
        """
        Step evaluation: rates of the last stored threshold <= t.
        Thresholds below the first stored one take the first point's rates.
        """
        t = np.atleast_1d(np.asarray(thresholds, dtype=np.float64))
        idx = np.searchsorted(self.thresholds, t, side='right') - 1
        idx = np.clip(idx, 0, len(self) - 1)
        return self.far[idx], self.frr[idx]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'threshold': self.thresholds, 'far': self.far, 'frr': self.frr})

    def to_csv(self) -> str:
        return self.to_frame().to_csv(index=False, lineterminator='\n')

    @classmethod
    def from_csv(cls, text: str) -> 'RocCurve':
        try:
            frame = pd.read_csv(io.StringIO(text), float_precision='round_trip')
        except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise RocError(f"cannot parse curve CSV: {e}")
        missing = {'threshold', 'far', 'frr'} - set(frame.columns)
        if missing:
            raise RocError(f"curve CSV is missing columns {sorted(missing)}")
        return cls(frame['threshold'].to_numpy(), frame['far'].to_numpy(), frame['frr'].to_numpy())

    def to_list(self) -> List[Dict[str, float]]:
        return [{'threshold': t, 'far': a, 'frr': r} for t, a, r in self.points]

    @classmethod
    def from_list(cls, items: List[Dict[str, float]]) -> 'RocCurve':
        try:
            return cls([float(p['threshold']) for p in items],
                       [float(p['far']) for p in items],
                       [float(p['frr']) for p in items])
        except (KeyError, TypeError, ValueError) as e:
            raise RocError(f"invalid curve document: {e}")

    def to_json(self) -> str:
        return json.dumps(self.to_list(), indent=2)


def far_at(scores: ScoreSet, threshold: float) -> float:
    """Fraction of impostor scores strictly above the threshold"""
    return np.count_nonzero(scores.impostor > threshold) / scores.impostor.size


def frr_at(scores: ScoreSet, threshold: float) -> float:
    """Fraction of genuine scores at or below the threshold"""
    return np.count_nonzero(scores.genuine <= threshold) / scores.genuine.size


def rates_on_grid(scores: ScoreSet, thresholds: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized far_at / frr_at over a grid of thresholds"""
    thresholds = np.asarray(thresholds, dtype=np.float64)
    impostor = np.sort(scores.impostor)
    genuine = np.sort(scores.genuine)
    n_imp, n_gen = impostor.size, genuine.size
    far = (n_imp - np.searchsorted(impostor, thresholds, side='right')) / n_imp
    frr = np.searchsorted(genuine, thresholds, side='right') / n_gen
    return far, frr


def _below(x: float) -> float:
    candidate = x - 1.0
    return candidate if candidate < x else float(np.nextafter(x, -np.inf))


def _above(x: float) -> float:
    candidate = x + 1.0
    return candidate if candidate > x else float(np.nextafter(x, np.inf))


def threshold_grid(values: Union[Sequence[float], np.ndarray]) -> np.ndarray:
    """Distinct values plus one sentinel below the minimum and one above the maximum"""
    distinct = np.unique(np.asarray(values, dtype=np.float64))
    if distinct.size == 0:
        raise RocError("threshold grid needs at least one value")
    return np.concatenate([[_below(distinct[0])], distinct, [_above(distinct[-1])]])


def uniform_grid(values: Union[Sequence[float], np.ndarray], k: int) -> np.ndarray:
    """k evenly spaced thresholds spanning the value range"""
    if k < 2:
        raise RocError(f"uniform grid needs k >= 2, got {k}")
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise RocError("uniform grid needs at least one value")
    return np.unique(np.linspace(values.min(), values.max(), k))


def build_roc(scores: ScoreSet) -> RocCurve:
    """Empirical ROC with one point per distinct score plus both sentinels"""
    thresholds = threshold_grid(np.concatenate([scores.genuine, scores.impostor]))
    far, frr = rates_on_grid(scores, thresholds)
    return RocCurve(thresholds, far, frr)


def zero_frr_point(scores: ScoreSet) -> OperationalPoint:
    """
    Lower threshold at the minimum genuine score. With the s < l reject rule
    that genuine is forwarded, so frr is exactly 0; far is the fraction of
    impostors with s >= l (the zeroFRR value).
    """
    lower = float(scores.genuine.min())
    far = np.count_nonzero(scores.impostor >= lower) / scores.impostor.size
    if far == 1.0:
        logger.warning(f"⚠️ Full class overlap at the zeroFRR point (threshold {lower:.6g})")
    return OperationalPoint(lower, far, 0.0, PointKind.ZERO_FRR)


def zero_far_point(scores: ScoreSet) -> OperationalPoint:
    """Upper threshold at the maximum impostor score; frr is the zeroFAR value"""
    upper = float(scores.impostor.max())
    frr = np.count_nonzero(scores.genuine <= upper) / scores.genuine.size
    if frr == 1.0:
        logger.warning(f"⚠️ Full class overlap at the zeroFAR point (threshold {upper:.6g})")
    return OperationalPoint(upper, 0.0, frr, PointKind.ZERO_FAR)


def eer(curve: RocCurve) -> float:
    """
    Equal error rate. Taken at the first point where far <= frr: far itself
    on an exact crossing, otherwise the mean of the bracketing points'
    (far + frr) / 2.
    """
    far, frr = curve.far, curve.frr
    crossed = np.flatnonzero(far <= frr)
    if crossed.size == 0:
        return float((far[-1] + frr[-1]) / 2)
    i = int(crossed[0])
    if far[i] == frr[i]:
        return float(far[i])
    if i == 0:
        return float((far[0] + frr[0]) / 2)
    return float(((far[i - 1] + frr[i - 1]) / 2 + (far[i] + frr[i]) / 2) / 2)


def auc(curve: RocCurve) -> float:
    """
    Trapezoidal area under (far, 1 - frr). A curve whose largest far is
    below 1 is extended horizontally to far = 1 at its first frr value.
    """
    x = curve.far[::-1]
    y = 1.0 - curve.frr[::-1]
    area = float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))
    if x[-1] < 1.0:
        area += (1.0 - x[-1]) * y[-1]
    return float(min(max(area, 0.0), 1.0))


def curve_metrics(curve: RocCurve) -> Dict[str, float]:
    """AUC and EER of a curve"""
    return {'auc': auc(curve), 'eer': eer(curve)}
