#!/usr/bin/env python3
"""Objective metrics for `sssr evaluate` via the external evaluator protocol.

    metric_bridge.py REFERENCE.wav ESTIMATE.wav   -> JSON object of scores
    metric_bridge.py --version                    -> version string

PESQ (wideband) comes from `pesq`, STOI from `pystoi`. Csig/Cbak/Covl are
emitted only when `pysepm` is installed. Metrics whose package is missing are
left out of the output rather than reported as errors.
"""

import argparse
import json
import sys

import numpy as np
from scipy.io import wavfile

RATE = 16000


def _version(name):
    try:
        from importlib.metadata import version

        return version(name)
    except Exception:
        return None


def versions():
    parts = []
    for pkg in ("pesq", "pystoi", "pysepm"):
        v = _version(pkg)
        if v is not None:
            parts.append(f"{pkg}={v}")
    return "metric_bridge 1 (" + ", ".join(parts) + ")"


def read(path):
    rate, data = wavfile.read(path)
    if rate != RATE:
        raise SystemExit(f"{path}: expected {RATE} Hz, got {rate}")
    if data.dtype.kind == "i":
        data = data.astype(np.float64) / float(np.iinfo(data.dtype).max)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim > 1:
        data = data.mean(axis=1)
    return data


def scores(ref, est):
    out = {}
    try:
        from pesq import pesq

        out["pesq"] = float(pesq(RATE, ref, est, "wb"))
    except ImportError:
        pass
    try:
        from pystoi import stoi

        out["stoi"] = float(stoi(ref, est, RATE, extended=False))
    except ImportError:
        pass
    try:
        import pysepm

        csig, cbak, covl = pysepm.composite(ref, est, RATE)
        out.update(csig=float(csig), cbak=float(cbak), covl=float(covl))
    except ImportError:
        pass
    return out


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="store_true")
    parser.add_argument("reference", nargs="?")
    parser.add_argument("estimate", nargs="?")
    args = parser.parse_args()
    if args.version:
        print(versions())
        return 0
    if args.reference is None or args.estimate is None:
        parser.error("REFERENCE and ESTIMATE are required")
    ref, est = read(args.reference), read(args.estimate)
    n = min(len(ref), len(est))
    json.dump(scores(ref[:n], est[:n]), sys.stdout)
    print()
    return 0


if __name__ == "__main__":
    sys.exit(main())
