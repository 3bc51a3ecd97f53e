"""
📥 Scores Module - Matched Score Tables
Ingests, splits, synthesizes and characterizes per-comparison matcher scores.
Every downstream module works on a MatchedScoreTable: one row per comparison
event, one score per matcher, and a genuine/impostor label.
"""

import csv
import io
import json
import hashlib
import logging
from dataclasses import dataclass
from enum import IntEnum
from typing import Dict, Any, List, Optional, Sequence, Tuple, Union, Iterable, TextIO

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

# tolerance used when checking correlation matrices read from JSON
SYMMETRY_TOLERANCE = 1e-12
PSD_TOLERANCE = 1e-10


class ScoreTableError(Exception):
    """Custom exception for score table errors"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SynthSpecError(Exception):
    """Custom exception for synthetic score specification errors"""
    pass


class Label(IntEnum):
    """Comparison class, encoded 1/0 in score files"""
    IMPOSTOR = 0
    GENUINE = 1


@dataclass(frozen=True)
class ScoreRow:
    """One comparison event"""
    comparison_id: str
    label: Label
    scores: Tuple[float, ...]


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class MatchedScoreTable:
    """
    Column-oriented matched score table.

    ``genuine`` is a boolean mask over rows and ``scores`` has one column per
    matcher in ``matcher_names`` order. Arrays are read-only after construction.
    """
    matcher_names: Tuple[str, ...]
    ids: np.ndarray
    genuine: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        names = tuple(str(name) for name in self.matcher_names)
        if not names:
            raise ScoreTableError("table needs at least one matcher")
        if any(not name.strip() for name in names):
            raise ScoreTableError("matcher names must be non-empty")
        if len(set(names)) != len(names):
            raise ScoreTableError(f"duplicate matcher names in {list(names)}")

        ids = np.array(self.ids, dtype=object).reshape(-1)
        genuine = np.array(self.genuine, dtype=bool).reshape(-1)
        scores = np.array(self.scores, dtype=np.float64)
        if scores.size == 0:
            scores = scores.reshape(0, len(names))

        if scores.ndim != 2 or scores.shape[1] != len(names):
            raise ScoreTableError(
                f"score matrix shape {scores.shape} does not match {len(names)} matchers")
        if not (len(ids) == len(genuine) == scores.shape[0]):
            raise ScoreTableError("ids, labels and scores must have the same number of rows")
        if not np.all(np.isfinite(scores)):
            raise ScoreTableError("all scores must be finite")

        object.__setattr__(self, 'matcher_names', names)
        object.__setattr__(self, 'ids', _readonly(ids))
        object.__setattr__(self, 'genuine', _readonly(genuine))
        object.__setattr__(self, 'scores', _readonly(scores))

    @classmethod
    def from_rows(cls, matcher_names: Sequence[str],
                  rows: Iterable[Tuple[str, Union[Label, int], Sequence[float]]]) -> 'MatchedScoreTable':
        """Build a table from (comparison_id, label, scores) tuples"""
        ids, labels, scores = [], [], []
        for comparison_id, label, row_scores in rows:
            if len(row_scores) != len(matcher_names):
                raise ScoreTableError(
                    f"row {comparison_id!r} has {len(row_scores)} scores, "
                    f"expected {len(matcher_names)}")
            ids.append(str(comparison_id))
            labels.append(Label(int(label)) == Label.GENUINE)
            scores.append([float(s) for s in row_scores])
        return cls(tuple(matcher_names), np.array(ids, dtype=object),
                   np.array(labels, dtype=bool),
                   np.array(scores, dtype=np.float64).reshape(len(ids), len(matcher_names)))

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MatchedScoreTable):
            return NotImplemented
        return (self.matcher_names == other.matcher_names
                and len(self) == len(other)
                and bool(np.all(self.ids == other.ids))
                and np.array_equal(self.genuine, other.genuine)
                and np.array_equal(self.scores, other.scores))

    __hash__ = None

    @property
    def rows(self) -> List[ScoreRow]:
        return [
            ScoreRow(str(cid), Label.GENUINE if gen else Label.IMPOSTOR, tuple(float(s) for s in row))
            for cid, gen, row in zip(self.ids, self.genuine, self.scores)
        ]

    @property
    def n_genuine(self) -> int:
        return int(np.count_nonzero(self.genuine))

    @property
    def n_impostor(self) -> int:
        return len(self) - self.n_genuine

    def index_of(self, matcher: str) -> int:
        try:
            return self.matcher_names.index(matcher)
        except ValueError:
            raise ScoreTableError(
                f"unknown matcher {matcher!r}; table has {list(self.matcher_names)}")

    def column(self, matcher: str) -> np.ndarray:
        return self.scores[:, self.index_of(matcher)]

    def subset(self, indices: np.ndarray) -> 'MatchedScoreTable':
        """Rows at the given positions, in the given order"""
        indices = np.asarray(indices, dtype=np.intp)
        return MatchedScoreTable(self.matcher_names, self.ids[indices],
                                 self.genuine[indices], self.scores[indices])

    def fingerprint(self) -> str:
        """Stable SHA-256 of names, ids, labels and scores"""
        digest = hashlib.sha256()
        digest.update('\x1f'.join(self.matcher_names).encode('utf-8'))
        digest.update(b'\x1e')
        digest.update('\x1f'.join(str(i) for i in self.ids).encode('utf-8'))
        digest.update(b'\x1e')
        digest.update(np.ascontiguousarray(self.genuine, dtype=np.uint8).tobytes())
        digest.update(np.ascontiguousarray(self.scores, dtype='<f8').tobytes())
        return digest.hexdigest()

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({
            'id': self.ids.astype(str) if len(self) else pd.Series([], dtype=str),
            'label': self.genuine.astype(int),
        })
        for j, name in enumerate(self.matcher_names):
            frame[name] = self.scores[:, j]
        return frame


@dataclass(frozen=True, eq=False)
class ScoreSet:
    """Class-conditional scores of a single matcher"""
    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        genuine = np.array(self.genuine, dtype=np.float64).reshape(-1)
        impostor = np.array(self.impostor, dtype=np.float64).reshape(-1)
        if genuine.size == 0 or impostor.size == 0:
            raise ScoreTableError(
                f"score set needs both classes (genuine={genuine.size}, impostor={impostor.size})")
        if not (np.all(np.isfinite(genuine)) and np.all(np.isfinite(impostor))):
            raise ScoreTableError("score set values must be finite")
        object.__setattr__(self, 'genuine', _readonly(genuine))
        object.__setattr__(self, 'impostor', _readonly(impostor))

    def to_dict(self) -> Dict[str, Any]:
        return {'genuine': self.genuine.tolist(), 'impostor': self.impostor.tolist()}


@dataclass(frozen=True, eq=False)
class CorrelationMatrix:
    """Pearson coefficients between matcher columns"""
    matcher_names: Tuple[str, ...]
    entries: np.ndarray
    pooling: str = 'pooled'

    def __post_init__(self):
        entries = np.array(self.entries, dtype=np.float64)
        m = len(self.matcher_names)
        if entries.shape != (m, m):
            raise ScoreTableError(f"correlation entries shape {entries.shape}, expected {(m, m)}")
        if not np.all(np.diag(entries) == 1.0):
            raise ScoreTableError("correlation diagonal must be exactly 1")
        if not np.array_equal(entries, entries.T):
            raise ScoreTableError("correlation matrix must be exactly symmetric")
        object.__setattr__(self, 'matcher_names', tuple(self.matcher_names))
        object.__setattr__(self, 'entries', _readonly(entries))

    def value(self, a: str, b: str) -> float:
        names = list(self.matcher_names)
        return float(self.entries[names.index(a), names.index(b)])

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.entries, columns=list(self.matcher_names))
        frame.insert(0, 'matcher', list(self.matcher_names))
        return frame

    def to_csv(self) -> str:
        return self.to_frame().to_csv(index=False, lineterminator='\n')


def parse_score_table(text: Union[str, TextIO]) -> MatchedScoreTable:
    """
    Parse a wide CSV score table.

    Header ``id,label,<matcher1>,...``; labels 1 (genuine) / 0 (impostor).
    Errors carry the physical line number of the offending record.
    """
    if hasattr(text, 'read'):
        text = text.read()
    text = text.lstrip('\ufeff')
    reader = csv.reader(io.StringIO(text))

    header = None
    ids: List[str] = []
    labels: List[bool] = []
    rows: List[List[float]] = []

    for record in reader:
        line = reader.line_num
        if not record or all(not cell.strip() for cell in record):
            continue

        if header is None:
            cells = [cell.strip() for cell in record]
            if len(cells) < 3 or cells[0] != 'id' or cells[1] != 'label':
                raise ScoreTableError(
                    "malformed header: expected 'id,label,<matcher>,...'", line)
            names = cells[2:]
            if any(not name for name in names):
                raise ScoreTableError("malformed header: empty matcher name", line)
            if len(set(names)) != len(names):
                raise ScoreTableError("malformed header: duplicate matcher name", line)
            header = names
            continue

        if len(record) != len(header) + 2:
            raise ScoreTableError(
                f"ragged row: expected {len(header) + 2} fields, got {len(record)}", line)

        label = record[1].strip()
        if label not in ('0', '1'):
            raise ScoreTableError(f"unknown label {label!r} (expected 1 or 0)", line)

        values = []
        for name, cell in zip(header, record[2:]):
            try:
                value = float(cell)
            except ValueError:
                raise ScoreTableError(f"non-numeric score {cell!r} for matcher {name!r}", line)
            if not np.isfinite(value):
                raise ScoreTableError(f"non-finite score {cell!r} for matcher {name!r}", line)
            values.append(value)

        ids.append(record[0])
        labels.append(label == '1')
        rows.append(values)

    if header is None:
        raise ScoreTableError("malformed header: input is empty", 1)

    return MatchedScoreTable(
        tuple(header),
        np.array(ids, dtype=object),
        np.array(labels, dtype=bool),
        np.array(rows, dtype=np.float64).reshape(len(ids), len(header)),
    )


def write_score_table(table: MatchedScoreTable) -> str:
    """Serialize a table to the wide CSV format read by parse_score_table"""
    return table.to_frame().to_csv(index=False, lineterminator='\n')


def load_score_matrices(paths: Dict[str, str]) -> MatchedScoreTable:
    """
    Convert per-matcher square similarity matrices into a matched table.

    Each file holds one row per probe subject and one column per gallery
    subject (whitespace or comma separated); the diagonal is genuine.
    All matrices must have the same shape.
    """
    if not paths:
        raise ScoreTableError("no score matrices given")

    matrices = []
    for name, path in paths.items():
        try:
            with open(path, 'r', encoding='utf-8') as f:
                content = f.read()
        except UnicodeDecodeError as e:
            raise ScoreTableError(f"score matrix for {name!r} in {path} is not valid UTF-8: {e.reason}")
        delimiter = ',' if ',' in content.split('\n', 1)[0] else None
        try:
            matrix = np.loadtxt(io.StringIO(content), delimiter=delimiter, ndmin=2)
        except ValueError as e:
            raise ScoreTableError(f"cannot read score matrix for {name!r} from {path}: {e}")
        if matrix.shape[0] != matrix.shape[1]:
            raise ScoreTableError(f"score matrix for {name!r} is {matrix.shape}, expected square")
        matrices.append(matrix)

    shape = matrices[0].shape
    if any(m.shape != shape for m in matrices):
        raise ScoreTableError("score matrices have different shapes")

    n = shape[0]
    probe, gallery = np.divmod(np.arange(n * n), n)
    ids = np.array([f"p{p}_g{g}" for p, g in zip(probe, gallery)], dtype=object)
    scores = np.column_stack([m.reshape(-1) for m in matrices])
    logger.info(f"Loaded {len(paths)} score matrices of {n}x{n} subjects")
    return MatchedScoreTable(tuple(paths.keys()), ids, probe == gallery, scores)


def class_counts(table: MatchedScoreTable) -> Dict[str, int]:
    return {'genuine': table.n_genuine, 'impostor': table.n_impostor}


def split_table(table: MatchedScoreTable, n_genuine_train: int, n_impostor_train: int,
                seed: int) -> Tuple[MatchedScoreTable, MatchedScoreTable]:
    """
    Random train/probe partition with exact per-class train counts.

    Rows keep their original relative order inside each part.
    """
    if n_genuine_train < 0 or n_impostor_train < 0:
        raise ScoreTableError("train counts must be non-negative")
    if seed < 0:
        raise ScoreTableError("seed must be a non-negative integer")

    genuine_idx = np.flatnonzero(table.genuine)
    impostor_idx = np.flatnonzero(~table.genuine)
    if n_genuine_train > len(genuine_idx):
        raise ScoreTableError(
            f"insufficient genuine rows: requested {n_genuine_train}, available {len(genuine_idx)}")
    if n_impostor_train > len(impostor_idx):
        raise ScoreTableError(
            f"insufficient impostor rows: requested {n_impostor_train}, available {len(impostor_idx)}")

    rng = np.random.default_rng(seed)
    in_train = np.zeros(len(table), dtype=bool)
    in_train[rng.permutation(genuine_idx)[:n_genuine_train]] = True
    in_train[rng.permutation(impostor_idx)[:n_impostor_train]] = True

    train = table.subset(np.flatnonzero(in_train))
    probe = table.subset(np.flatnonzero(~in_train))
    logger.info(f"Split table: train {class_counts(train)}, probe {class_counts(probe)}")
    return train, probe


def correlation_matrix(table: MatchedScoreTable, label: Optional[Label] = None) -> CorrelationMatrix:
    """
    Pearson correlation between matcher columns.

    Rows of both classes are pooled unless ``label`` restricts the matrix
    to one class.
    """
    if label is None:
        scores, pooling = table.scores, 'pooled'
    else:
        mask = table.genuine if Label(label) == Label.GENUINE else ~table.genuine
        scores, pooling = table.scores[mask], Label(label).name.lower()

    if scores.shape[0] < 2:
        raise ScoreTableError(f"correlation needs at least 2 rows ({pooling}), got {scores.shape[0]}")
    for j, name in enumerate(table.matcher_names):
        if np.all(scores[:, j] == scores[0, j]):
            raise ScoreTableError(f"zero-variance column {name!r} ({pooling})")

    entries = np.atleast_2d(np.corrcoef(scores, rowvar=False))
    entries = np.clip(entries, -1.0, 1.0)
    upper = np.triu(entries, 1)
    entries = upper + upper.T
    np.fill_diagonal(entries, 1.0)
    return CorrelationMatrix(table.matcher_names, entries, pooling)


def column_score_set(table: MatchedScoreTable, matcher: str) -> ScoreSet:
    """Genuine/impostor scores of one matcher column"""
    column = table.column(matcher)
    return ScoreSet(column[table.genuine], column[~table.genuine])


@dataclass(frozen=True)
class MatcherMarginals:
    """Gaussian class-conditional marginals of one synthetic matcher"""
    name: str
    genuine_mean: float
    genuine_std: float
    impostor_mean: float
    impostor_std: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            'name': self.name,
            'genuine': {'mean': self.genuine_mean, 'std': self.genuine_std},
            'impostor': {'mean': self.impostor_mean, 'std': self.impostor_std},
        }


def _correlation_factor(corr: np.ndarray) -> np.ndarray:
    """Return L with L @ L.T == corr; falls back to eigh for singular PSD input"""
    try:
        return np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        eigenvalues, vectors = np.linalg.eigh(corr)
        if eigenvalues.min() < -PSD_TOLERANCE:
            raise SynthSpecError(
                f"correlation matrix is not positive semidefinite (min eigenvalue {eigenvalues.min():.3g})")
        return vectors * np.sqrt(np.clip(eigenvalues, 0.0, None))


def _check_correlation(corr: np.ndarray, m: int, which: str) -> np.ndarray:
    corr = np.array(corr, dtype=np.float64)
    if corr.shape != (m, m):
        raise SynthSpecError(f"{which} correlation shape {corr.shape}, expected {(m, m)}")
    if not np.all(np.isfinite(corr)):
        raise SynthSpecError(f"{which} correlation has non-finite entries")
    if np.max(np.abs(corr - corr.T)) > SYMMETRY_TOLERANCE:
        raise SynthSpecError(f"{which} correlation is not symmetric")
    if not np.allclose(np.diag(corr), 1.0, rtol=0.0, atol=SYMMETRY_TOLERANCE):
        raise SynthSpecError(f"{which} correlation must have a unit diagonal")
    if np.any(np.abs(corr) > 1.0 + SYMMETRY_TOLERANCE):
        raise SynthSpecError(f"{which} correlation entries must lie in [-1, 1]")
    _correlation_factor(corr)
    return _readonly(corr)


@dataclass(frozen=True, eq=False)
class SynthSpec:
    """Gaussian-copula recipe for a synthetic matched score table"""
    matchers: Tuple[MatcherMarginals, ...]
    genuine_correlation: np.ndarray
    impostor_correlation: Optional[np.ndarray] = None
    n_genuine: int = 1000
    n_impostor: int = 10000

    def __post_init__(self):
        matchers = tuple(self.matchers)
        if not matchers:
            raise SynthSpecError("at least one matcher is required")
        names = [m.name for m in matchers]
        if any(not n for n in names) or len(set(names)) != len(names):
            raise SynthSpecError(f"matcher names must be unique and non-empty: {names}")
        for m in matchers:
            for value in (m.genuine_mean, m.impostor_mean):
                if not np.isfinite(value):
                    raise SynthSpecError(f"{m.name}: means must be finite")
            for value in (m.genuine_std, m.impostor_std):
                if not (np.isfinite(value) and value > 0):
                    raise SynthSpecError(f"{m.name}: std-devs must be positive, got {value}")
        for count_name in ('n_genuine', 'n_impostor'):
            count = getattr(self, count_name)
            if int(count) != count or count < 1:
                raise SynthSpecError(f"{count_name} must be a positive integer, got {count}")

        genuine_corr = _check_correlation(self.genuine_correlation, len(matchers), 'genuine')
        impostor_corr = (genuine_corr if self.impostor_correlation is None
                         else _check_correlation(self.impostor_correlation, len(matchers), 'impostor'))

        object.__setattr__(self, 'matchers', matchers)
        object.__setattr__(self, 'genuine_correlation', genuine_corr)
        object.__setattr__(self, 'impostor_correlation', impostor_corr)
        object.__setattr__(self, 'n_genuine', int(self.n_genuine))
        object.__setattr__(self, 'n_impostor', int(self.n_impostor))

    @property
    def matcher_names(self) -> Tuple[str, ...]:
        return tuple(m.name for m in self.matchers)

    @classmethod
    def equicorrelated(cls, matchers: Sequence[MatcherMarginals], rho: float,
                       n_genuine: int, n_impostor: int) -> 'SynthSpec':
        """Same off-diagonal coefficient for every pair, shared by both classes"""
        m = len(matchers)
        corr = np.full((m, m), float(rho))
        np.fill_diagonal(corr, 1.0)
        return cls(tuple(matchers), corr, None, n_genuine, n_impostor)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SynthSpec':
        try:
            matchers = tuple(
                MatcherMarginals(
                    name=str(item['name']),
                    genuine_mean=float(item['genuine']['mean']),
                    genuine_std=float(item['genuine']['std']),
                    impostor_mean=float(item['impostor']['mean']),
                    impostor_std=float(item['impostor']['std']),
                )
                for item in data['matchers']
            )
            m = len(matchers)
            corr = data.get('correlation', 0.0)
            if isinstance(corr, dict):
                genuine_corr = corr['genuine']
                impostor_corr = corr.get('impostor')
            else:
                genuine_corr, impostor_corr = corr, None
            if isinstance(genuine_corr, (int, float)):
                rho = float(genuine_corr)
                genuine_corr = np.full((m, m), rho)
                np.fill_diagonal(genuine_corr, 1.0)
            return cls(matchers, np.array(genuine_corr, dtype=np.float64),
                       None if impostor_corr is None else np.array(impostor_corr, dtype=np.float64),
                       int(data.get('n_genuine', 1000)), int(data.get('n_impostor', 10000)))
        except (KeyError, TypeError, ValueError) as e:
            raise SynthSpecError(f"invalid synthetic spec document: {e}")

    @classmethod
    def from_json(cls, text: str) -> 'SynthSpec':
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise SynthSpecError(f"synthetic spec is not valid JSON: {e}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'matchers': [m.to_dict() for m in self.matchers],
            'correlation': {
                'genuine': self.genuine_correlation.tolist(),
                'impostor': self.impostor_correlation.tolist(),
            },
            'n_genuine': self.n_genuine,
            'n_impostor': self.n_impostor,
        }


def _draw_class(rng: np.random.Generator, n: int, corr: np.ndarray,
                means: np.ndarray, stds: np.ndarray) -> np.ndarray:
    latent = rng.standard_normal((n, len(means))) @ _correlation_factor(corr).T
    return means + latent * stds


def synth_generate(spec: SynthSpec, seed: int) -> MatchedScoreTable:
    """
    Draw a synthetic matched table from a SynthSpec.

    Genuine rows come first (ids ``g000000``...), then impostor rows
    (``i000000``...). The same seed always yields the same table.
    """
    if seed < 0:
        raise SynthSpecError("seed must be a non-negative integer")
    rng = np.random.default_rng(seed)

    genuine = _draw_class(rng, spec.n_genuine, spec.genuine_correlation,
                          np.array([m.genuine_mean for m in spec.matchers]),
                          np.array([m.genuine_std for m in spec.matchers]))
    impostor = _draw_class(rng, spec.n_impostor, spec.impostor_correlation,
                           np.array([m.impostor_mean for m in spec.matchers]),
                           np.array([m.impostor_std for m in spec.matchers]))

    ids = ([f"g{i:06d}" for i in range(spec.n_genuine)]
           + [f"i{i:06d}" for i in range(spec.n_impostor)])
    labels = np.concatenate([np.ones(spec.n_genuine, dtype=bool), np.zeros(spec.n_impostor, dtype=bool)])

    logger.debug(f"Generated {spec.n_genuine} genuine / {spec.n_impostor} impostor rows (seed {seed})")
    return MatchedScoreTable(spec.matcher_names, np.array(ids, dtype=object), labels,
                             np.vstack([genuine, impostor]))
