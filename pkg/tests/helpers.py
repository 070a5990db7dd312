import csv
from pathlib import Path

MS_TABLE = Path(__file__).parent / "data" / "ms_table.csv"


def ms_table():
    """Published (method, benchmark, acc %, params in millions, score) rows."""
    with open(MS_TABLE) as fh:
        return [(r["method"], r["benchmark"], float(r["acc"]), float(r["num_m"]), float(r["ms"]))
                for r in csv.DictReader(fh)]
