"""
Error model module for serialroc
Models estimation errors of the stage operational points:

    alpha   - displacement of the zeroFRR / zeroFAR rate values
              (class distributions mis-estimated on the training data)
    epsilon - residual error left at the estimated thresholds
              (genuines rejected / impostors accepted by a stage)

First-order displacement of the predicted chain ROC:

    dFAR(t) = sum_j (+/- alpha_j) * prod_{i != j} zeroFRR_i * FAR_N(t) + epsilon
    dFRR(t) = sum_j (+/- alpha_j) * prod_{i != j} zeroFAR_i * FRR_N(t) + epsilon

For two matchers this is +/- alpha * FAR_2(t) + epsilon.
"""

import io
import json
import logging
import dataclasses
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Any, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from modules.cascade import CascadeModel, PredictedRoc, ordered_product
from modules.config import Settings
from modules.roc import OperationalPoint, PointKind, RocCurve
from modules.scores import MatchedScoreTable, column_score_set

logger = logging.getLogger(__name__)


class ErrorModelError(Exception):
    """Custom exception for error model errors"""
    pass


class Sign(str, Enum):
    PLUS = 'plus'
    MINUS = 'minus'
    BOTH = 'both'


@dataclass(frozen=True)
class StageError:
    """
    Signed per-stage errors measured on a probe set.

    far_alpha / frr_alpha: probe minus stored zeroFRR / zeroFAR value.
    far_epsilon: impostors accepted at the stage (s > upper).
    frr_epsilon: genuines rejected at the stage (s < lower).
    """
    matcher: str
    far_alpha: float
    frr_alpha: float
    far_epsilon: float
    frr_epsilon: float

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class ErrorParams:
    """
    alpha is absolute unless ``relative`` is set, in which case it is a
    fraction rho of each stage's own zero value.
    """
    alpha: float
    epsilon: float
    sign: Sign = Sign.BOTH
    relative: bool = False
    stages: Tuple[StageError, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'sign', Sign(self.sign))
        object.__setattr__(self, 'stages', tuple(self.stages))
        for name in ('alpha', 'epsilon'):
            value = getattr(self, name)
            if not (np.isfinite(value) and 0.0 <= value < 1.0):
                raise ErrorModelError(f"{name} must be in [0, 1), got {value}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'alpha': self.alpha,
            'epsilon': self.epsilon,
            'sign': self.sign.value,
            'relative': self.relative,
            'stages': [s.to_dict() for s in self.stages],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ErrorParams':
        try:
            return cls(
                alpha=float(data['alpha']),
                epsilon=float(data['epsilon']),
                sign=Sign(data.get('sign', 'both')),
                relative=bool(data.get('relative', False)),
                stages=tuple(StageError(**s) for s in data.get('stages', [])),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ErrorModelError(f"invalid error params document: {e}")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> 'ErrorParams':
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise ErrorModelError(f"error params are not valid JSON: {e}")


def _sign_value(sign: Union[Sign, str]) -> float:
    sign = Sign(sign)
    if sign == Sign.BOTH:
        raise ErrorModelError("a definite sign (plus or minus) is required")
    return 1.0 if sign == Sign.PLUS else -1.0


def _clamp(value: float) -> Tuple[float, bool]:
    clamped = min(max(value, 0.0), 1.0)
    return clamped, clamped != value


def perturb_point(point: OperationalPoint, params: ErrorParams,
                  sign: Union[Sign, str]) -> OperationalPoint:
    """
    Displace a zero point: the zero value moves by +/- alpha and the
    complementary rate becomes epsilon. Values are clamped to [0, 1].
    """
    if point.kind == PointKind.GENERIC:
        raise ErrorModelError("only zeroFRR / zeroFAR points can be perturbed")
    s = _sign_value(sign)

    value = point.far if point.kind == PointKind.ZERO_FRR else point.frr
    alpha = params.alpha * value if params.relative else params.alpha
    moved, moved_clamped = _clamp(value + s * alpha)
    residual, residual_clamped = _clamp(params.epsilon)
    kind = point.kind if params.epsilon == 0.0 else PointKind.GENERIC

    if point.kind == PointKind.ZERO_FRR:
        far, frr = moved, residual
    else:
        far, frr = residual, moved
    return OperationalPoint(point.threshold, far, frr, kind, moved_clamped or residual_clamped)


def _stage_terms(model: CascadeModel, params: ErrorParams,
                 s: float) -> Tuple[List[float], List[float], float, float]:
    """Signed per-stage alphas for both sides plus the epsilon of each side"""
    if params.stages:
        measured = {e.matcher: e for e in params.stages}
        missing = [st.matcher for st in model.stages if st.matcher not in measured]
        if missing:
            raise ErrorModelError(f"error params have no stage details for {missing}")
        errors = [measured[st.matcher] for st in model.stages]
        far_alphas = [s * e.far_alpha for e in errors]
        frr_alphas = [s * e.frr_alpha for e in errors]
        return (far_alphas, frr_alphas,
                sum(e.far_epsilon for e in errors), sum(e.frr_epsilon for e in errors))

    if params.relative:
        far_alphas = [s * params.alpha * st.zero_frr for st in model.stages]
        frr_alphas = [s * params.alpha * st.zero_far for st in model.stages]
    else:
        far_alphas = [s * params.alpha for _ in model.stages]
        frr_alphas = [s * params.alpha for _ in model.stages]
    return far_alphas, frr_alphas, params.epsilon, params.epsilon


def _first_order(alphas: List[float], values: List[float]) -> float:
    coefficient = 0.0
    for j, alpha in enumerate(alphas):
        others = ordered_product(v for i, v in enumerate(values) if i != j)
        coefficient += alpha * others
    return coefficient


def _coefficients(model: CascadeModel, params: ErrorParams,
                  sign: Union[Sign, str]) -> Tuple[float, float, float, float]:
    """(far slope, far offset, frr slope, frr offset) of the displacement"""
    s = _sign_value(sign)
    far_alphas, frr_alphas, far_eps, frr_eps = _stage_terms(model, params, s)
    far_slope = _first_order(far_alphas, [st.zero_frr for st in model.stages])
    frr_slope = _first_order(frr_alphas, [st.zero_far for st in model.stages])
    return far_slope, far_eps, frr_slope, frr_eps


def delta_roc(model: CascadeModel, params: ErrorParams,
              last_threshold: float) -> Tuple[float, float]:
    """(dFAR, dFRR) of the predicted chain ROC at one last-stage threshold"""
    far_n, frr_n = model.last_roc.rates_at(last_threshold)
    far_slope, far_eps, frr_slope, frr_eps = _coefficients(model, params, params.sign)
    return (float(far_slope * far_n[0] + far_eps),
            float(frr_slope * frr_n[0] + frr_eps))


def _delta_arrays(model: CascadeModel, params: ErrorParams, sign: Sign,
                  thresholds: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    far_n, frr_n = model.last_roc.rates_at(thresholds)
    far_slope, far_eps, frr_slope, frr_eps = _coefficients(model, params, sign)
    return far_slope * far_n + far_eps, frr_slope * frr_n + frr_eps


def exact_roc(model: CascadeModel, params: ErrorParams,
              sign: Union[Sign, str]) -> RocCurve:
    """
    Chain ROC recomputed with every term kept.

    Each non-final stage accepts an epsilon fraction and forwards
    (zero value +/- alpha - epsilon); nothing is dropped from the sums.
    """
    s = _sign_value(sign)
    far_alphas, frr_alphas, far_eps, frr_eps = _stage_terms(model, params, s)
    if params.stages:
        measured = {e.matcher: e for e in params.stages}
        far_residuals = [measured[st.matcher].far_epsilon for st in model.stages]
        frr_residuals = [measured[st.matcher].frr_epsilon for st in model.stages]
    else:
        far_residuals = [params.epsilon] * len(model.stages)
        frr_residuals = [params.epsilon] * len(model.stages)

    def cascade_rate(zero_values, alphas, residuals, last_rates):
        early, through = 0.0, 1.0
        for value, alpha, residual in zip(zero_values, alphas, residuals):
            early += through * residual
            forward = min(max(value + alpha - residual, 0.0), 1.0)
            through *= forward
        return np.clip(early + through * last_rates, 0.0, 1.0)

    far = cascade_rate([st.zero_frr for st in model.stages], far_alphas, far_residuals,
                       model.last_roc.far)
    frr = cascade_rate([st.zero_far for st in model.stages], frr_alphas, frr_residuals,
                       model.last_roc.frr)
    return RocCurve(model.last_roc.thresholds, far, frr)


def corrected_roc(prediction: PredictedRoc, model: CascadeModel,
                  params: ErrorParams) -> RocCurve:
    """Prediction plus the first-order displacement for params.sign"""
    far_slope, far_eps, frr_slope, frr_eps = _coefficients(model, params, params.sign)
    far_coefficient = prediction.g_factor + far_slope
    frr_coefficient = prediction.h_factor + frr_slope
    if far_coefficient < 0 or frr_coefficient < 0:
        raise ErrorModelError(
            f"correction makes a rate slope negative (far {far_coefficient:.4g}, frr {frr_coefficient:.4g})")

    far_n, frr_n = model.last_roc.rates_at(prediction.thresholds)
    far = np.clip(far_coefficient * far_n + far_eps, 0.0, 1.0)
    frr = np.clip(frr_coefficient * frr_n + frr_eps, 0.0, 1.0)
    return RocCurve(prediction.thresholds, far, frr)


BAND_COLUMNS = ['threshold', 'far', 'far_low', 'far_high', 'frr', 'frr_low', 'frr_high']


@dataclass(frozen=True, eq=False)
class ErrorBand:
    """Per-threshold FAR/FRR interval around a predicted curve"""
    thresholds: np.ndarray
    far: np.ndarray
    far_low: np.ndarray
    far_high: np.ndarray
    frr: np.ndarray
    frr_low: np.ndarray
    frr_high: np.ndarray
    clamped: np.ndarray
    params: Optional[ErrorParams] = None

    def __len__(self) -> int:
        return len(self.thresholds)

    def _rows_at(self, thresholds: Optional[np.ndarray]) -> np.ndarray:
        if thresholds is None:
            return np.arange(len(self))
        idx = np.searchsorted(self.thresholds, np.asarray(thresholds, dtype=np.float64), side='right') - 1
        return np.clip(idx, 0, len(self) - 1)

    def contains(self, curve: RocCurve, thresholds: Optional[np.ndarray] = None) -> np.ndarray:
        """
        Per-point containment of a curve, evaluated at the band thresholds
        or at the given ones (band and curve both stepped).
        """
        at = self.thresholds if thresholds is None else np.asarray(thresholds, dtype=np.float64)
        rows = self._rows_at(thresholds)
        far, frr = curve.rates_at(at)
        return ((self.far_low[rows] <= far) & (far <= self.far_high[rows])
                & (self.frr_low[rows] <= frr) & (frr <= self.frr_high[rows]))

    def coverage(self, curve: RocCurve, thresholds: Optional[np.ndarray] = None) -> float:
        return float(np.mean(self.contains(curve, thresholds)))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({name: getattr(self, name if name != 'threshold' else 'thresholds')
                             for name in BAND_COLUMNS})

    def to_csv(self) -> str:
        return self.to_frame().to_csv(index=False, lineterminator='\n')

    @classmethod
    def from_csv(cls, text: str) -> 'ErrorBand':
        try:
            frame = pd.read_csv(io.StringIO(text), float_precision='round_trip')
        except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise ErrorModelError(f"cannot parse band CSV: {e}")
        missing = set(BAND_COLUMNS) - set(frame.columns)
        if missing:
            raise ErrorModelError(f"band CSV is missing columns {sorted(missing)}")
        columns = {name: frame[name].to_numpy(dtype=np.float64) for name in BAND_COLUMNS}
        return cls(columns['threshold'], columns['far'], columns['far_low'], columns['far_high'],
                   columns['frr'], columns['frr_low'], columns['frr_high'],
                   np.zeros(len(frame), dtype=bool))


def band(prediction: PredictedRoc, model: CascadeModel, params: ErrorParams) -> ErrorBand:
    """
    Error band around a prediction. Sign BOTH takes the worst case over
    plus and minus; bounds always include the predicted value and are
    clamped to [0, 1].
    """
    signs = [Sign.PLUS, Sign.MINUS] if params.sign == Sign.BOTH else [params.sign]
    deltas = [_delta_arrays(model, params, s, prediction.thresholds) for s in signs]
    far_deltas = np.vstack([d[0] for d in deltas])
    frr_deltas = np.vstack([d[1] for d in deltas])

    far_low = prediction.far + np.minimum(0.0, far_deltas.min(axis=0))
    far_high = prediction.far + np.maximum(0.0, far_deltas.max(axis=0))
    frr_low = prediction.frr + np.minimum(0.0, frr_deltas.min(axis=0))
    frr_high = prediction.frr + np.maximum(0.0, frr_deltas.max(axis=0))

    raw = np.vstack([far_low, far_high, frr_low, frr_high])
    clamped = np.any((raw < 0.0) | (raw > 1.0), axis=0)
    if clamped.any():
        logger.warning(f"⚠️ Band clamped to [0, 1] at {int(clamped.sum())} of {clamped.size} points")

    return ErrorBand(
        thresholds=prediction.thresholds,
        far=prediction.far,
        far_low=np.clip(far_low, 0.0, 1.0),
        far_high=np.clip(far_high, 0.0, 1.0),
        frr=prediction.frr,
        frr_low=np.clip(frr_low, 0.0, 1.0),
        frr_high=np.clip(frr_high, 0.0, 1.0),
        clamped=clamped,
        params=params,
    )


def inject_displacement(model: CascadeModel, rho: float) -> CascadeModel:
    """Copy of a model with every stored zero value scaled by (1 + rho), clamped to [0, 1]"""
    stages = []
    for stage in model.stages:
        zero_frr, frr_clamped = _clamp(stage.zero_frr * (1.0 + rho))
        zero_far, far_clamped = _clamp(stage.zero_far * (1.0 + rho))
        stages.append(dataclasses.replace(
            stage,
            lower=dataclasses.replace(stage.lower, far=zero_frr, clamped=frr_clamped),
            upper=dataclasses.replace(stage.upper, frr=zero_far, clamped=far_clamped),
        ))
    return dataclasses.replace(model, stages=tuple(stages))


def estimate_params(model: CascadeModel, probe: MatchedScoreTable,
                    min_class_rows: Optional[int] = None) -> ErrorParams:
    """
    Fit alpha and epsilon on a probe set at the stored stage thresholds.

    alpha:   mean |probe forward probability - stored zero value| over both
             zero values of every non-final stage
    epsilon: mean of probe genuines rejected (s < lower) and impostors
             accepted (s > upper) over the stages
    """
    missing = [m for m in model.chain if m not in probe.matcher_names]
    if missing:
        raise ErrorModelError(f"probe table is missing matcher column(s) {missing}")
    if probe.n_genuine == 0 or probe.n_impostor == 0:
        raise ErrorModelError(
            f"probe must contain both classes (genuine={probe.n_genuine}, impostor={probe.n_impostor})")

    if min_class_rows is None:
        min_class_rows = Settings.from_env().min_class_rows
    if probe.n_genuine < min_class_rows or probe.n_impostor < min_class_rows:
        logger.warning(
            f"⚠️ Small probe sample (genuine={probe.n_genuine}, impostor={probe.n_impostor})")

    details = []
    for stage in model.stages:
        scores = column_score_set(probe, stage.matcher)
        lower, upper = stage.lower.threshold, stage.upper.threshold
        n_gen, n_imp = scores.genuine.size, scores.impostor.size
        details.append(StageError(
            matcher=stage.matcher,
            far_alpha=np.count_nonzero(scores.impostor >= lower) / n_imp - stage.zero_frr,
            frr_alpha=np.count_nonzero(scores.genuine <= upper) / n_gen - stage.zero_far,
            far_epsilon=np.count_nonzero(scores.impostor > upper) / n_imp,
            frr_epsilon=np.count_nonzero(scores.genuine < lower) / n_gen,
        ))

    alpha = float(np.mean([abs(d.far_alpha) for d in details] + [abs(d.frr_alpha) for d in details]))
    epsilon = float(np.mean([d.far_epsilon for d in details] + [d.frr_epsilon for d in details]))
    logger.info(f"📐 Estimated alpha={alpha:.6f}, epsilon={epsilon:.6f} over {len(details)} stage(s)")
    return ErrorParams(alpha, epsilon, Sign.PLUS, False, tuple(details))
