"""Shared helpers for the experiment scripts."""
import argparse
import json
from pathlib import Path

import numpy as np


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--out", default="results", help="directory for the JSON result file")
    return p


def save(obj, out: str, name: str) -> Path:
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    path = d / name
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_plain) + "\n", "utf-8")
    print(f"wrote {path}")
    return path


def _plain(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, set):
        return sorted(o)
    raise TypeError(type(o))
