"""
CLI module for serialroc
Command-line surface tying the pipeline together:

    synth / split / corr / roc          score data
    calibrate / predict / order-search  chain model
    simulate / compare                  validation on probe scores
    band / estimate-errors              error model
    plot                                SVG rendering

Every command writes its outputs plus ``<out>.manifest.json``.
"""

import os
import sys
import json
import logging
import argparse
import dataclasses
from typing import Dict, Any, List, Optional, Callable

import colorlog
import numpy as np
import pandas as pd
from dotenv import load_dotenv

from modules import __version__
from modules.config import Settings, ConfigError
from modules.scores import (
    Label, MatchedScoreTable, ScoreTableError, SynthSpec, SynthSpecError,
    parse_score_table, write_score_table, load_score_matrices, split_table,
    correlation_matrix, column_score_set, synth_generate, class_counts,
)
from modules.roc import RocCurve, RocError, build_roc, rates_on_grid, uniform_grid
from modules.cascade import (
    CascadeModel, CascadeError, calibrate, predict_roc, heuristic_order,
    matcher_metrics, enumerate_chains, rank_chains,
)
from modules.error_model import (
    ErrorBand, ErrorParams, ErrorModelError, Sign, band, corrected_roc, estimate_params,
)
from modules.sim import SimulationError, compare_rocs, empirical_roc, run_cascade
from modules.plot import PlotError, render_svg

logger = logging.getLogger(__name__)


class InputFileError(Exception):
    """Custom exception for input files that cannot be decoded"""
    pass


DOMAIN_ERRORS = (
    ScoreTableError, SynthSpecError, RocError, CascadeError, ErrorModelError,
    SimulationError, PlotError, ConfigError, InputFileError, OSError,
)

_HANDLER_TAG = '_serialroc_handler'


def setup_logging(settings: Settings):
    """Colored stderr handler plus an optional plain file log; safe to call repeatedly"""
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, _HANDLER_TAG, False):
            root.removeHandler(handler)
            handler.close()

    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(colorlog.ColoredFormatter(
        '%(log_color)s%(levelname)-8s%(reset)s %(name)s: %(message)s'))
    handlers = [console]

    if settings.log_dir:
        os.makedirs(settings.log_dir, exist_ok=True)
        file_handler = logging.FileHandler(os.path.join(settings.log_dir, 'serialroc.log'))
        file_handler.setFormatter(logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s'))
        handlers.append(file_handler)

    for handler in handlers:
        setattr(handler, _HANDLER_TAG, True)
        root.addHandler(handler)
    root.setLevel(settings.log_level)


# ----------------------------------------------------------------------------
# I/O helpers
# ----------------------------------------------------------------------------

def _read_text(path: str) -> str:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return f.read()
    except UnicodeDecodeError as e:
        raise InputFileError(f"{path} is not valid UTF-8 (byte {e.start}: {e.reason})")


def _write_text(path: str, text: str):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        f.write(text)


def _sibling(path: str, tag: str) -> str:
    stem, ext = os.path.splitext(path)
    return f"{stem}.{tag}{ext or '.csv'}"


def _parse_matrices(value: str) -> Dict[str, str]:
    paths = {}
    for item in value.split(','):
        name, sep, path = item.partition('=')
        if not sep or not name.strip() or not path.strip():
            raise argparse.ArgumentTypeError(f"expected name=path, got {item!r}")
        paths[name.strip()] = path.strip()
    return paths


def _parse_chain(value: str) -> List[str]:
    chain = [name.strip() for name in value.split(',') if name.strip()]
    if not chain:
        raise argparse.ArgumentTypeError("chain must list at least one matcher")
    return chain


def _parse_grid(value: str) -> Optional[int]:
    """None for the score grid, K for uniform:K"""
    if value == 'scores':
        return None
    kind, _, count = value.partition(':')
    if kind != 'uniform' or not count.isdigit() or int(count) < 2:
        raise argparse.ArgumentTypeError(f"grid must be 'scores' or 'uniform:K' with K >= 2, got {value!r}")
    return int(count)


def _load_table(args: argparse.Namespace, attr: str = 'input') -> MatchedScoreTable:
    matrices = getattr(args, 'matrices', None)
    if matrices:
        return load_score_matrices(matrices)
    path = getattr(args, attr)
    table = parse_score_table(_read_text(path))
    logger.info(f"Loaded {path}: {class_counts(table)}, matchers {list(table.matcher_names)}")
    return table


def _table_inputs(args: argparse.Namespace) -> List[str]:
    if getattr(args, 'matrices', None):
        return list(args.matrices.values())
    return [args.input]


def _load_model(path: str) -> CascadeModel:
    return CascadeModel.from_json(_read_text(path))


def _done(inputs: List[str], outputs: List[str], **extra) -> Dict[str, Any]:
    return {'success': True, 'inputs': inputs, 'outputs': outputs, **extra}


# ----------------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace, settings: Settings) -> Dict[str, Any]:
    spec = SynthSpec.from_json(_read_text(args.spec))
    table = synth_generate(spec, args.seed)
    _write_text(args.out, write_score_table(table))
    return _done([args.spec], [args.out], counts=class_counts(table))


def cmd_split(args: argparse.Namespace, settings: Settings) -> Dict[str, Any]:
    table = _load_table(args)
    train, probe = split_table(table, args.train_genuine, args.train_impostor, args.seed)
    _write_text(args.out, write_score_table(train))
    _write_text(args.probe_out, write_score_table(probe))
    return _done(_table_inputs(args), [args.out, args.probe_out],
                 train=class_counts(train), probe=class_counts(probe))


def cmd_corr(args: argparse.Namespace, settings: Settings) -> Dict[str, Any]:
    table = _load_table(args)
    outputs = [args.out]
    _write_text(args.out, correlation_matrix(table).to_csv())
    if args.per_class:
        for label in (Label.GENUINE, Label.IMPOSTOR):
            path = _sibling(args.out, label.name.lower())
            _write_text(path, correlation_matrix(table, label).to_csv())
            outputs.append(path)
    return _done(_table_inputs(args), outputs)


def cmd_roc(args: argparse.Namespace, settings: Settings) -> Dict[str, Any]:
    table = _load_table(args)
    scores = column_score_set(table, args.matcher)
    if args.grid is None:
        curve = build_roc(scores)
    else:
        thresholds = uniform_grid(np.concatenate([scores.genuine, scores.impostor]), args.grid)
        curve = RocCurve(thresholds, *rates_on_grid(scores, thresholds))
    _write_text(args.out, curve.to_csv())
    return _done(_table_inputs(args), [args.out])


def cmd_calibrate(args: argparse.Namespace, settings: Settings) -> Dict[str, Any]:
    table = _load_table(args)
    chain = args.chain
    if chain is None:
        chain = heuristic_order(matcher_metrics(table))
        logger.info(f"No chain given; using increasing performance order {chain}")
    model = calibrate(table, chain, settings.min_class_rows)
    _write_text(args.out, model.to_json())
    return _done(_table_inputs(args), [args.out], chain=list(model.chain))


def cmd_predict(args: argparse.Namespace, settings: Settings) -> Dict[str, Any]:
    model = _load_model(args.model)
    prediction = predict_roc(model)
    _write_text(args.out, prediction.as_curve().to_csv())
    inputs, outputs = [args.model], [args.out]
    if args.params:
        params = ErrorParams.from_json(_read_text(args.params))
        if params.sign == Sign.BOTH:
            params = dataclasses.replace(params, sign=Sign.PLUS)
        corrected_path = _sibling(args.out, 'corrected')
        _write_text(corrected_path, corrected_roc(prediction, model, params).to_csv())
        inputs.append(args.params)
        outputs.append(corrected_path)
    return _done(inputs, outputs, chain=list(model.chain))


def cmd_simulate(args: argparse.Namespace, settings: Settings) -> Dict[str, Any]:
    model = _load_model(args.model)
    probe = _load_table(args)
    inputs = [args.model] + _table_inputs(args)

    if args.threshold is not None:
        result = run_cascade(model, probe, args.threshold)
        _write_text(args.out, json.dumps(result.to_dict(), indent=2))
        return _done(inputs, [args.out], chain=list(model.chain))

    thresholds = None
    if args.grid is not None:
        thresholds = uniform_grid(probe.column(model.last_matcher), args.grid)
    curve = empirical_roc(model, probe, thresholds)
    _write_text(args.out, curve.to_csv())
    return _done(inputs, [args.out], chain=list(model.chain))


def cmd_compare(args: argparse.Namespace, settings: Settings) -> Dict[str, Any]:
    curve = RocCurve.from_csv(_read_text(args.input))
    reference = RocCurve.from_csv(_read_text(args.reference))
    report = compare_rocs(curve, reference)
    _write_text(args.out, json.dumps(report.to_dict(), indent=2, allow_nan=False))
    return _done([args.input, args.reference], [args.out], report=report.to_dict())


def cmd_band(args: argparse.Namespace, settings: Settings) -> Dict[str, Any]:
    model = _load_model(args.model)
    inputs = [args.model]
    if args.params:
        params = ErrorParams.from_json(_read_text(args.params))
        inputs.append(args.params)
    elif args.alpha_rel is not None:
        params = ErrorParams(args.alpha_rel, args.epsilon, Sign.BOTH, relative=True)
    else:
        params = ErrorParams(args.alpha or 0.0, args.epsilon, Sign.BOTH)
    if args.sign:
        params = dataclasses.replace(params, sign=Sign(args.sign))

    error_band = band(predict_roc(model), model, params)
    _write_text(args.out, error_band.to_csv())
    return _done(inputs, [args.out], chain=list(model.chain),
                 clamped_points=int(error_band.clamped.sum()))


def cmd_estimate_errors(args: argparse.Namespace, settings: Settings) -> Dict[str, Any]:
    model = _load_model(args.model)
    probe = _load_table(args)
    params = estimate_params(model, probe, settings.min_class_rows)
    _write_text(args.out, params.to_json())
    return _done([args.model] + _table_inputs(args), [args.out], chain=list(model.chain),
                 alpha=params.alpha, epsilon=params.epsilon)


def cmd_order_search(args: argparse.Namespace, settings: Settings) -> Dict[str, Any]:
    table = _load_table(args)
    pool = args.chain if args.chain else list(table.matcher_names)
    chains = enumerate_chains(pool, args.length)
    rankings = rank_chains(table, chains, settings.workers)

    frame = pd.DataFrame([r.to_dict() for r in rankings])
    frame.insert(0, 'rank', np.arange(1, len(rankings) + 1))
    inputs = _table_inputs(args)

    if args.simulate_top:
        probe = parse_score_table(_read_text(args.probe))
        inputs.append(args.probe)
        divergence = [np.nan] * len(rankings)
        for i, ranking in enumerate(rankings[:args.simulate_top]):
            model = calibrate(table, ranking.chain, settings.min_class_rows)
            empirical = empirical_roc(model, probe)
            divergence[i] = compare_rocs(predict_roc(model).as_curve(), empirical).mean_abs_dfar
            print(f"🔬 {','.join(ranking.chain)}: mean |dFAR| {divergence[i]:.6f}")
        frame['mean_abs_dfar'] = divergence

    _write_text(args.out, frame.to_csv(index=False, lineterminator='\n'))
    return _done(inputs, [args.out], chains=len(rankings))


def cmd_plot(args: argparse.Namespace, settings: Settings) -> Dict[str, Any]:
    curves = {os.path.splitext(os.path.basename(path))[0]: RocCurve.from_csv(_read_text(path))
              for path in args.input}
    inputs = list(args.input)
    error_band = None
    if args.band:
        error_band = ErrorBand.from_csv(_read_text(args.band))
        inputs.append(args.band)
    _write_text(args.out, render_svg(curves, error_band, args.title))
    return _done(inputs, [args.out])


COMMANDS: Dict[str, Callable[[argparse.Namespace, Settings], Dict[str, Any]]] = {
    'synth': cmd_synth,
    'split': cmd_split,
    'corr': cmd_corr,
    'roc': cmd_roc,
    'calibrate': cmd_calibrate,
    'predict': cmd_predict,
    'simulate': cmd_simulate,
    'compare': cmd_compare,
    'band': cmd_band,
    'estimate-errors': cmd_estimate_errors,
    'order-search': cmd_order_search,
    'plot': cmd_plot,
}


# ----------------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------------

def _add_table_input(parser: argparse.ArgumentParser, required: bool = True):
    source = parser.add_mutually_exclusive_group(required=required)
    source.add_argument('--in', dest='input', help='Wide CSV score table')
    source.add_argument('--matrices', type=_parse_matrices,
                        help='Per-matcher square score matrices: name=path,name=path')


def build_parser(settings: Settings) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='serialroc',
        description='Serial multi-matcher ROC prediction, simulation and error bands')
    parser.add_argument('--version', action='version', version=f'serialroc {__version__}')
    sub = parser.add_subparsers(dest='command', required=True, metavar='COMMAND')

    p = sub.add_parser('synth', help='Generate a synthetic matched score table')
    p.add_argument('--spec', required=True, help='Synthetic spec JSON')
    p.add_argument('--seed', type=int, default=settings.default_seed)
    p.add_argument('--out', required=True)

    p = sub.add_parser('split', help='Random train/probe partition')
    _add_table_input(p)
    p.add_argument('--train-genuine', type=int, required=True)
    p.add_argument('--train-impostor', type=int, required=True)
    p.add_argument('--seed', type=int, default=settings.default_seed)
    p.add_argument('--out', required=True, help='Train table CSV')
    p.add_argument('--probe-out', required=True, help='Probe table CSV')

    p = sub.add_parser('corr', help='Pearson correlation between matchers')
    _add_table_input(p)
    p.add_argument('--per-class', action='store_true', help='Also write genuine/impostor matrices')
    p.add_argument('--out', required=True)

    p = sub.add_parser('roc', help='ROC curve of one matcher')
    _add_table_input(p)
    p.add_argument('--matcher', required=True)
    p.add_argument('--grid', type=_parse_grid, default=None, help='scores | uniform:K')
    p.add_argument('--out', required=True)

    p = sub.add_parser('calibrate', help='Calibrate a chain on training scores')
    _add_table_input(p)
    p.add_argument('--chain', type=_parse_chain, help='m1,m2,m3 (default: increasing performance)')
    p.add_argument('--out', required=True, help='Model JSON')

    p = sub.add_parser('predict', help='Predicted chain ROC from a model')
    p.add_argument('--model', required=True)
    p.add_argument('--params', help='Error params JSON; also writes the corrected curve')
    p.add_argument('--out', required=True)

    p = sub.add_parser('simulate', help='Run the chain on probe scores')
    p.add_argument('--model', required=True)
    _add_table_input(p)
    p.add_argument('--grid', type=_parse_grid, default=None, help='scores | uniform:K')
    p.add_argument('--threshold', type=float, help='Single last-stage threshold; writes run JSON')
    p.add_argument('--out', required=True)

    p = sub.add_parser('compare', help='Divergence between two curve CSVs')
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--reference', required=True)
    p.add_argument('--out', required=True)

    p = sub.add_parser('band', help='Error band around the predicted ROC')
    p.add_argument('--model', required=True)
    alpha = p.add_mutually_exclusive_group(required=True)
    alpha.add_argument('--alpha', type=float, help='Absolute rate displacement')
    alpha.add_argument('--alpha-rel', type=float, help='Displacement as a fraction of each zero value')
    alpha.add_argument('--params', help='Error params JSON from estimate-errors')
    p.add_argument('--epsilon', type=float, default=0.0)
    p.add_argument('--sign', choices=[s.value for s in Sign], help='Override the params sign')
    p.add_argument('--out', required=True)

    p = sub.add_parser('estimate-errors', help='Fit alpha/epsilon on probe scores')
    p.add_argument('--model', required=True)
    _add_table_input(p)
    p.add_argument('--out', required=True, help='Error params JSON')

    p = sub.add_parser('order-search', help='Rank chain orderings by predicted AUC')
    _add_table_input(p)
    p.add_argument('--length', type=int, default=2)
    p.add_argument('--chain', type=_parse_chain, help='Matcher pool (default: every matcher)')
    p.add_argument('--simulate-top', type=int, default=0, help='Simulate the top K chains')
    p.add_argument('--probe', help='Probe CSV for --simulate-top')
    p.add_argument('--out', required=True)

    p = sub.add_parser('plot', help='Render curve CSVs to SVG')
    p.add_argument('--in', dest='input', type=lambda v: [x for x in v.split(',') if x], required=True,
                   help='Curve CSVs: a.csv,b.csv')
    p.add_argument('--band', help='Band CSV')
    p.add_argument('--title', default='ROC')
    p.add_argument('--out', required=True, help='SVG file')

    return parser


def _manifest(argv: List[str], args: argparse.Namespace, result: Dict[str, Any]) -> Dict[str, Any]:
    skip = {'command', 'input', 'matrices', 'out', 'probe_out', 'model', 'params', 'probe',
            'reference', 'spec', 'band', 'seed', 'chain'}
    parameters = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    return {
        'command': args.command,
        'argv': list(argv),
        'inputs': result.get('inputs', []),
        'seed': getattr(args, 'seed', None),
        'chain': result.get('chain', getattr(args, 'chain', None)),
        'parameters': parameters,
        'outputs': result.get('outputs', []),
        'version': __version__,
    }


def run(argv: Optional[List[str]] = None) -> int:
    """Parse argv, dispatch one command; 0 on success, 1 on domain errors, 2 on usage errors"""
    argv = list(sys.argv[1:] if argv is None else argv)
    load_dotenv()
    try:
        settings = Settings.from_env()
    except ConfigError as e:
        print(f"❌ config: {e}", file=sys.stderr)
        return 1

    parser = build_parser(settings)
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    if args.command == 'order-search' and args.simulate_top and not args.probe:
        print("❌ order-search: --simulate-top needs --probe", file=sys.stderr)
        return 2

    setup_logging(settings)
    logger.debug(f"Settings: {settings.to_dict()}")
    try:
        result = COMMANDS[args.command](args, settings)
    except DOMAIN_ERRORS as e:
        logger.error(f"{args.command} failed: {e}")
        result = {'success': False, 'error': str(e)}

    if not result['success']:
        print(f"❌ {args.command}: {result['error']}", file=sys.stderr)
        return 1

    manifest_path = f"{result['outputs'][0]}.manifest.json"
    _write_text(manifest_path, json.dumps(_manifest(argv, args, result), indent=2))
    print(f"✅ {args.command}: wrote {', '.join(result['outputs'])}")
    return 0
