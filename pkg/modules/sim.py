"""
🧪 Simulation Module - Cascade Execution
Runs a calibrated cascade over matched probe scores, measures the empirical
FAR/FRR, and quantifies how far a predicted ROC is from the measured one.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Any, List, Optional, Tuple

import numpy as np

from modules.cascade import CascadeModel, StageConfig
from modules.roc import RocCurve, RocError, threshold_grid
from modules.scores import MatchedScoreTable

logger = logging.getLogger(__name__)


class SimulationError(Exception):
    """Custom exception for cascade simulation errors"""
    pass


class Decision(str, Enum):
    ACCEPT = 'accept'
    REJECT = 'reject'
    FORWARD = 'forward'


def decide_stage(score: float, stage: StageConfig) -> Decision:
    """Accept above upper, reject below lower, forward otherwise (bounds included)"""
    if score > stage.upper.threshold:
        return Decision.ACCEPT
    if score < stage.lower.threshold:
        return Decision.REJECT
    return Decision.FORWARD


@dataclass(frozen=True)
class OutcomeCounts:
    accepted: int
    rejected: int
    forwarded: int

    @property
    def inflow(self) -> int:
        return self.accepted + self.rejected + self.forwarded

    def to_dict(self) -> Dict[str, int]:
        return {'accepted': self.accepted, 'rejected': self.rejected,
                'forwarded': self.forwarded, 'inflow': self.inflow}


@dataclass(frozen=True)
class StageCounts:
    matcher: str
    genuine: OutcomeCounts
    impostor: OutcomeCounts

    def to_dict(self) -> Dict[str, Any]:
        return {'matcher': self.matcher,
                'genuine': self.genuine.to_dict(),
                'impostor': self.impostor.to_dict()}


@dataclass(frozen=True)
class CascadeRunResult:
    """Outcome of walking every probe row through the chain at one last threshold"""
    last_threshold: float
    far: float
    frr: float
    stages: Tuple[StageCounts, ...]
    mean_stages_used: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            'last_threshold': self.last_threshold,
            'far': self.far,
            'frr': self.frr,
            'mean_stages_used': self.mean_stages_used,
            'stages': [s.to_dict() for s in self.stages],
        }


def _check_probe(model: CascadeModel, probe: MatchedScoreTable):
    missing = [m for m in model.chain if m not in probe.matcher_names]
    if missing:
        raise SimulationError(f"probe table is missing matcher column(s) {missing}")
    if probe.n_genuine == 0 or probe.n_impostor == 0:
        raise SimulationError(
            f"probe must contain both classes (genuine={probe.n_genuine}, impostor={probe.n_impostor})")


def _counts(genuine: np.ndarray, accepted: np.ndarray, rejected: np.ndarray,
            forwarded: np.ndarray, matcher: str) -> StageCounts:
    def by_class(mask: np.ndarray) -> OutcomeCounts:
        return OutcomeCounts(int(np.count_nonzero(accepted & mask)),
                             int(np.count_nonzero(rejected & mask)),
                             int(np.count_nonzero(forwarded & mask)))
    return StageCounts(matcher, by_class(genuine), by_class(~genuine))


@dataclass
class _EarlyPass:
    """State after the non-final stages"""
    stages: List[StageCounts]
    accepted: np.ndarray
    rejected: np.ndarray
    reaching_last: np.ndarray
    stages_used: np.ndarray


def _walk_stages(model: CascadeModel, probe: MatchedScoreTable) -> _EarlyPass:
    active = np.ones(len(probe), dtype=bool)
    accepted = np.zeros(len(probe), dtype=bool)
    rejected = np.zeros(len(probe), dtype=bool)
    stages_used = np.zeros(len(probe), dtype=np.int64)
    stages = []

    for stage in model.stages:
        scores = probe.column(stage.matcher)
        stages_used[active] += 1
        accept = active & (scores > stage.upper.threshold)
        reject = active & ~accept & (scores < stage.lower.threshold)
        forward = active & ~accept & ~reject
        stages.append(_counts(probe.genuine, accept, reject, forward, stage.matcher))
        accepted |= accept
        rejected |= reject
        active = forward

    stages_used[active] += 1
    return _EarlyPass(stages, accepted, rejected, active, stages_used)


def run_cascade(model: CascadeModel, probe: MatchedScoreTable,
                last_threshold: float) -> CascadeRunResult:
    """Walk every probe row through the chain; the last stage accepts iff s > last_threshold"""
    _check_probe(model, probe)
    early = _walk_stages(model, probe)

    last_scores = probe.column(model.last_matcher)
    accept = early.reaching_last & (last_scores > last_threshold)
    reject = early.reaching_last & ~accept
    nothing = np.zeros(len(probe), dtype=bool)
    stages = early.stages + [_counts(probe.genuine, accept, reject, nothing, model.last_matcher)]

    accepted = early.accepted | accept
    rejected = early.rejected | reject
    genuine = probe.genuine
    far = np.count_nonzero(accepted & ~genuine) / probe.n_impostor
    frr = np.count_nonzero(rejected & genuine) / probe.n_genuine
    return CascadeRunResult(float(last_threshold), far, frr, tuple(stages),
                            float(early.stages_used.mean()))


def empirical_roc(model: CascadeModel, probe: MatchedScoreTable,
                  thresholds: Optional[np.ndarray] = None) -> RocCurve:
    """
    Measured chain ROC over a grid of last-stage thresholds. The default grid
    is the distinct last-matcher probe scores plus sentinels.
    """
    _check_probe(model, probe)
    last_scores = probe.column(model.last_matcher)
    if thresholds is None:
        thresholds = threshold_grid(last_scores)
    thresholds = np.unique(np.asarray(thresholds, dtype=np.float64))
    if thresholds.size == 0:
        raise SimulationError("threshold grid is empty")

    early = _walk_stages(model, probe)
    genuine = probe.genuine
    early_accepted_impostors = np.count_nonzero(early.accepted & ~genuine)
    early_rejected_genuines = np.count_nonzero(early.rejected & genuine)
    forwarded_impostors = np.sort(last_scores[early.reaching_last & ~genuine])
    forwarded_genuines = np.sort(last_scores[early.reaching_last & genuine])

    accepted_late = forwarded_impostors.size - np.searchsorted(forwarded_impostors, thresholds, side='right')
    rejected_late = np.searchsorted(forwarded_genuines, thresholds, side='right')
    far = (early_accepted_impostors + accepted_late) / probe.n_impostor
    frr = (early_rejected_genuines + rejected_late) / probe.n_genuine

    logger.debug(f"Empirical ROC over {thresholds.size} thresholds, "
                 f"{int(early.reaching_last.sum())} rows reach {model.last_matcher}")
    try:
        return RocCurve(thresholds, far, frr)
    except RocError as e:
        raise SimulationError(f"empirical curve is invalid: {e}")


@dataclass(frozen=True)
class DivergenceReport:
    """Distance between two ROC curves on shared rate grids"""
    max_abs_dfar: float
    mean_abs_dfar: float
    max_abs_dfrr: float
    mean_abs_dfrr: float
    frr_grid_size: int
    far_grid_size: int

    def to_dict(self) -> Dict[str, Any]:
        """Undefined divergences (no overlapping range) become None"""
        def value(x: float) -> Optional[float]:
            return None if np.isnan(x) else x
        return {
            'max_abs_dfar': value(self.max_abs_dfar),
            'mean_abs_dfar': value(self.mean_abs_dfar),
            'max_abs_dfrr': value(self.max_abs_dfrr),
            'mean_abs_dfrr': value(self.mean_abs_dfrr),
            'frr_grid_size': self.frr_grid_size,
            'far_grid_size': self.far_grid_size,
        }


def _overlap_grid(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    low = max(a.min(), b.min())
    high = min(a.max(), b.max())
    grid = np.union1d(a, b)
    return grid[(grid >= low) & (grid <= high)]


def far_at_frr(curve: RocCurve, levels: np.ndarray) -> np.ndarray:
    """Previous-point step: far of the last point whose frr <= level"""
    idx = np.searchsorted(curve.frr, levels, side='right') - 1
    return curve.far[np.clip(idx, 0, len(curve) - 1)]


def frr_at_far(curve: RocCurve, levels: np.ndarray) -> np.ndarray:
    """Previous-point step: frr of the first point whose far <= level"""
    far_ascending = curve.far[::-1]
    idx = np.searchsorted(far_ascending, levels, side='right') - 1
    idx = np.clip(idx, 0, len(curve) - 1)
    return curve.frr[len(curve) - 1 - idx]


def _summary(diff: np.ndarray) -> Tuple[float, float]:
    if diff.size == 0:
        return float('nan'), float('nan')
    return float(diff.max()), float(diff.mean())


def compare_rocs(a: RocCurve, b: RocCurve) -> DivergenceReport:
    """
    max / mean |dFAR| on the union of both FRR value sets clipped to their
    common range, and the symmetric |dFRR| on an FAR grid.
    """
    frr_grid = _overlap_grid(a.frr, b.frr)
    far_grid = _overlap_grid(a.far, b.far)
    if frr_grid.size == 0 or far_grid.size == 0:
        logger.warning("⚠️ Curves have no overlapping rate range; divergence is undefined")

    dfar = np.abs(far_at_frr(a, frr_grid) - far_at_frr(b, frr_grid))
    dfrr = np.abs(frr_at_far(a, far_grid) - frr_at_far(b, far_grid))
    max_far, mean_far = _summary(dfar)
    max_frr, mean_frr = _summary(dfrr)
    return DivergenceReport(max_far, mean_far, max_frr, mean_frr, int(frr_grid.size), int(far_grid.size))
