#!/usr/bin/env python3
"""
serialroc - Main Entry Point
Serial multi-matcher verification: calibrate a chain, predict its ROC,
simulate it on probe scores and bound the prediction error.

Usage:
    python serialroc.py synth --spec spec.json --seed 7 --out table.csv
    python serialroc.py split --in table.csv --train-genuine 100 --train-impostor 1000 \
        --out train.csv --probe-out probe.csv
    python serialroc.py calibrate --in train.csv --chain face,finger --out model.json
    python serialroc.py predict --model model.json --out predicted.csv
    python serialroc.py simulate --model model.json --in probe.csv --out empirical.csv
    python serialroc.py compare --in predicted.csv --reference empirical.csv --out report.json
    python serialroc.py band --model model.json --alpha-rel 0.3 --out band.csv
    python serialroc.py estimate-errors --model model.json --in probe.csv --out params.json
    python serialroc.py order-search --in train.csv --length 2 --out ranking.csv
    python serialroc.py plot --in predicted.csv,empirical.csv --band band.csv --out roc.svg
"""

import sys

from dotenv import load_dotenv

from modules.cli import run

if __name__ == "__main__":
    load_dotenv()
    sys.exit(run(sys.argv[1:]))
