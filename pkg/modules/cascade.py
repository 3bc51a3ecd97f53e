"""
🔗 Cascade Module - Serial Matcher Chain
Calibrates a serial multi-matcher chain on training scores and predicts the
whole-chain ROC from the individual operational points:

    FAR(t) = [prod zeroFRR_i] * FAR_N(t)
    FRR(t) = [prod zeroFAR_i] * FRR_N(t)        (i = 1 .. N-1)

Also enumerates and ranks chain orderings by predicted AUC.
"""

import json
import math
import logging
import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Any, List, Optional, Sequence, Tuple, Union, Iterable

import numpy as np

from modules.config import Settings
from modules.roc import (
    OperationalPoint, PointKind, RocCurve, RocError,
    build_roc, zero_frr_point, zero_far_point, auc, curve_metrics,
)
from modules.scores import MatchedScoreTable, column_score_set

logger = logging.getLogger(__name__)


class CascadeError(Exception):
    """Custom exception for cascade calibration and prediction errors"""
    pass


def ordered_product(values: Iterable[float]) -> float:
    """Product taken in ascending order, so any permutation gives the same bits"""
    return math.prod(sorted(float(v) for v in values))


@dataclass(frozen=True)
class StageConfig:
    """Non-final stage: reject below ``lower``, accept above ``upper``, forward between"""
    matcher: str
    lower: OperationalPoint
    upper: OperationalPoint

    def __post_init__(self):
        if self.lower.kind != PointKind.ZERO_FRR:
            raise CascadeError(f"{self.matcher}: lower point must be zeroFRR, got {self.lower.kind.value}")
        if self.upper.kind != PointKind.ZERO_FAR:
            raise CascadeError(f"{self.matcher}: upper point must be zeroFAR, got {self.upper.kind.value}")

    @property
    def zero_frr(self) -> float:
        """Impostor forward probability"""
        return self.lower.far

    @property
    def zero_far(self) -> float:
        """Genuine forward probability"""
        return self.upper.frr

    @property
    def empty_region(self) -> bool:
        return self.lower.threshold > self.upper.threshold

    @property
    def degenerate(self) -> bool:
        return self.zero_frr == 1.0 or self.zero_far == 1.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            'matcher': self.matcher,
            'lower': self.lower.to_dict(),
            'upper': self.upper.to_dict(),
            'zero_frr': self.zero_frr,
            'zero_far': self.zero_far,
            'degenerate': self.degenerate,
            'empty_region': self.empty_region,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'StageConfig':
        try:
            return cls(str(data['matcher']),
                       OperationalPoint.from_dict(data['lower']),
                       OperationalPoint.from_dict(data['upper']))
        except (KeyError, TypeError, RocError) as e:
            raise CascadeError(f"invalid stage document: {e}")


@dataclass(frozen=True, eq=False)
class CascadeModel:
    """Calibrated chain: stages 1..N-1 plus the last matcher's ROC"""
    stages: Tuple[StageConfig, ...]
    last_matcher: str
    last_roc: RocCurve
    provenance: str = ''

    def __post_init__(self):
        stages = tuple(self.stages)
        object.__setattr__(self, 'stages', stages)
        if not stages:
            raise CascadeError("a cascade needs at least 2 matchers")
        names = self.chain
        if len(set(names)) != len(names):
            raise CascadeError(f"chain matchers must be distinct: {list(names)}")

    @property
    def chain(self) -> Tuple[str, ...]:
        return tuple(s.matcher for s in self.stages) + (self.last_matcher,)

    @property
    def g_factor(self) -> float:
        return ordered_product(s.zero_frr for s in self.stages)

    @property
    def h_factor(self) -> float:
        return ordered_product(s.zero_far for s in self.stages)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CascadeModel):
            return NotImplemented
        return (self.stages == other.stages and self.last_matcher == other.last_matcher
                and self.last_roc == other.last_roc and self.provenance == other.provenance)

    __hash__ = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'chain': list(self.chain),
            'stages': [s.to_dict() for s in self.stages],
            'last_matcher': self.last_matcher,
            'last_roc': self.last_roc.to_list(),
            'g_factor': self.g_factor,
            'h_factor': self.h_factor,
            'provenance': self.provenance,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'CascadeModel':
        try:
            return cls(
                tuple(StageConfig.from_dict(s) for s in data['stages']),
                str(data['last_matcher']),
                RocCurve.from_list(data['last_roc']),
                str(data.get('provenance', '')),
            )
        except (KeyError, TypeError, RocError) as e:
            raise CascadeError(f"invalid cascade model document: {e}")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> 'CascadeModel':
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise CascadeError(f"cascade model is not valid JSON: {e}")


@dataclass(frozen=True, eq=False)
class PredictedRoc:
    """Chain ROC predicted from the stage factors and the last matcher's curve"""
    thresholds: np.ndarray
    far: np.ndarray
    frr: np.ndarray
    g_factor: float
    h_factor: float

    @property
    def points(self) -> List[Tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.far.tolist(), self.frr.tolist()))

    def as_curve(self) -> RocCurve:
        return RocCurve(self.thresholds, self.far, self.frr)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'g_factor': self.g_factor,
            'h_factor': self.h_factor,
            'points': self.as_curve().to_list(),
        }


def calibrate(train: MatchedScoreTable, chain: Sequence[str],
              min_class_rows: Optional[int] = None,
              provenance: Optional[str] = None) -> CascadeModel:
    """
    Calibrate a chain on training data.

    Every non-final matcher gets its zeroFRR (lower) and zeroFAR (upper)
    operational points; the last matcher keeps its full ROC.
    """
    chain = tuple(chain)
    if len(chain) < 2:
        raise CascadeError(f"chain too short: {list(chain)} (need at least 2 matchers)")
    if len(set(chain)) != len(chain):
        raise CascadeError(f"chain matchers must be distinct: {list(chain)}")
    unknown = [m for m in chain if m not in train.matcher_names]
    if unknown:
        raise CascadeError(f"unknown matcher(s) {unknown}; table has {list(train.matcher_names)}")
    if train.n_genuine == 0 or train.n_impostor == 0:
        raise CascadeError(
            f"training data must contain both classes (genuine={train.n_genuine}, impostor={train.n_impostor})")

    if min_class_rows is None:
        min_class_rows = Settings.from_env().min_class_rows
    if train.n_genuine < min_class_rows or train.n_impostor < min_class_rows:
        logger.warning(
            f"⚠️ Small training sample (genuine={train.n_genuine}, impostor={train.n_impostor}); "
            f"operational points will be noisy")

    stages = []
    for matcher in chain[:-1]:
        scores = column_score_set(train, matcher)
        stage = StageConfig(matcher, zero_frr_point(scores), zero_far_point(scores))
        if stage.degenerate:
            logger.warning(
                f"⚠️ Degenerate stage {matcher}: zeroFRR={stage.zero_frr:.4f}, zeroFAR={stage.zero_far:.4f}")
        if stage.empty_region:
            logger.warning(f"⚠️ Stage {matcher} has an empty uncertainty region; it never forwards")
        stages.append(stage)

    last_roc = build_roc(column_score_set(train, chain[-1]))
    model = CascadeModel(tuple(stages), chain[-1], last_roc,
                         provenance if provenance is not None else train.fingerprint())
    logger.debug(f"Calibrated chain {'→'.join(chain)}: g={model.g_factor:.6g}, h={model.h_factor:.6g}")
    return model


def predict_roc(model: CascadeModel) -> PredictedRoc:
    """Scale the last matcher's FAR by g and FRR by h at every threshold"""
    g, h = model.g_factor, model.h_factor
    return PredictedRoc(
        thresholds=model.last_roc.thresholds,
        far=g * model.last_roc.far,
        frr=h * model.last_roc.frr,
        g_factor=g,
        h_factor=h,
    )


def predicted_auc(model: CascadeModel) -> float:
    """Closed-form AUC of the predicted curve: 1 - g*h*(1 - AUC_N)"""
    return 1.0 - model.g_factor * model.h_factor * (1.0 - auc(model.last_roc))


def matcher_metrics(table: MatchedScoreTable) -> Dict[str, Dict[str, float]]:
    """AUC and EER of every matcher column"""
    metrics = {}
    for matcher in table.matcher_names:
        metrics[matcher] = curve_metrics(build_roc(column_score_set(table, matcher)))
    return metrics


def heuristic_order(metrics: Dict[str, Union[Dict[str, float], Tuple[float, float]]]) -> List[str]:
    """
    Increasing order of performance, so the best matcher is last.
    Key: auc ascending, then eer descending, then name.
    """
    if len(metrics) < 2:
        raise CascadeError("heuristic ordering needs at least 2 matchers")

    def key(name: str):
        value = metrics[name]
        if isinstance(value, dict):
            area, rate = value['auc'], value['eer']
        else:
            area, rate = value
        return (area, -rate, name)

    return sorted(metrics, key=key)


def enumerate_chains(matchers: Iterable[str], length: int) -> List[Tuple[str, ...]]:
    """All ordered selections without repetition: n! / (n - length)! chains"""
    pool = sorted(set(matchers))
    if not 2 <= length <= len(pool):
        raise CascadeError(f"chain length must be in [2, {len(pool)}], got {length}")
    return list(itertools.permutations(pool, length))


@dataclass(frozen=True)
class ChainRanking:
    chain: Tuple[str, ...]
    auc: float
    g_factor: float
    h_factor: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            'chain': ','.join(self.chain),
            'auc': self.auc,
            'g_factor': self.g_factor,
            'h_factor': self.h_factor,
        }


def rank_chains(train: MatchedScoreTable, chains: Sequence[Sequence[str]],
                workers: Optional[int] = None) -> List[ChainRanking]:
    """
    Calibrate and predict every chain, ranked by predicted AUC descending.
    Ties are broken by the lexicographic order of the chain names.
    """
    settings = Settings.from_env()
    workers = workers or settings.workers
    provenance = train.fingerprint()

    def evaluate(chain: Sequence[str]) -> ChainRanking:
        model = calibrate(train, chain, settings.min_class_rows, provenance)
        return ChainRanking(model.chain, predicted_auc(model), model.g_factor, model.h_factor)

    if workers > 1 and len(chains) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rankings = list(pool.map(evaluate, chains))
    else:
        rankings = [evaluate(chain) for chain in chains]

    rankings.sort(key=lambda r: (-r.auc, r.chain))
    logger.info(f"Ranked {len(rankings)} chains; best {','.join(rankings[0].chain)} "
                f"(auc {rankings[0].auc:.6f})" if rankings else "No chains to rank")
    return rankings
