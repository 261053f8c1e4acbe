#!/usr/bin/env python3
"""Fetch the COMPAS, Adult and Communities & Crime files into ./data.

The original hosting sites (GitHub raw, UCI archive) are not always reachable
from build machines, so this script pulls the same files from PyPI wheels that
redistribute them:

  responsibly 0.1.2  -> compas-scores-two-years.csv   (raw ProPublica export)
  ethicml 1.3.0      -> adult_old.csv                 (full 48,842-row Adult, one-hot)
  ethicml 1.3.0      -> crime.csv                     (Communities & Crime, headered)

Usage: python3 scripts/fetch_datasets.py [--out data]
"""
import argparse
import gzip
import pathlib
import shutil
import subprocess
import sys
import tempfile
import zipfile

FILES = [
    ("responsibly==0.1.2", "responsibly/dataset/compas/compas-scores-two-years.csv",
     "compas-scores-two-years.csv", False),
    ("ethicml==1.3.0", "ethicml/data/csvs/adult_old.csv", "adult.csv.gz", True),
    ("ethicml==1.3.0", "ethicml/data/csvs/crime.csv", "communities-crime.csv", False),
]


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data")
    args = ap.parse_args()
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        wheels = {}
        for req, member, target, gz in FILES:
            if req not in wheels:
                subprocess.check_call(
                    [sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", tmp, req]
                )
                name = req.split("==")[0]
                wheels[req] = next(pathlib.Path(tmp).glob(f"{name}-*.whl"))
            with zipfile.ZipFile(wheels[req]) as z, z.open(member) as src:
                dst_path = out / target
                if gz:
                    with gzip.GzipFile(dst_path, "wb", mtime=0) as dst:
                        shutil.copyfileobj(src, dst)
                else:
                    with open(dst_path, "wb") as dst:
                        shutil.copyfileobj(src, dst)
            print(f"wrote {dst_path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
