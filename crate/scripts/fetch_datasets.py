#!/usr/bin/env python3
"""Populate data/uci/ with the benchmark CSVs listed in data/registry.toml.

Boston housing and Auto MPG are extracted from PyPI packages that ship
them (pydataset, ISLP); no other network access is needed. The remaining
datasets must be downloaded manually from the UCI repository; see the
`source` field of each registry entry.
"""
import io
import pathlib
import subprocess
import sys
import tarfile
import tempfile
import zipfile

ROOT = pathlib.Path(__file__).resolve().parent.parent
OUT = ROOT / "data" / "uci"


def pip_download(package, dest):
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "-q",
         "--timeout", "120", package, "-d", str(dest)],
        check=True,
    )
    return next(pathlib.Path(dest).iterdir())


def boston(tmp):
    sdist = pip_download("pydataset==0.2.0", tmp / "pydataset")
    with tarfile.open(sdist) as outer:
        member = next(m for m in outer.getmembers() if m.name.endswith("resources.tar.gz"))
        inner = tarfile.open(fileobj=io.BytesIO(outer.extractfile(member).read()))
        csv = inner.extractfile("resources/rdata/csv/MASS/Boston.csv").read()
    (OUT / "boston.csv").write_bytes(csv)


def autompg(tmp):
    wheel = pip_download("ISLP==0.4.1", tmp / "islp")
    with zipfile.ZipFile(wheel) as z:
        (OUT / "autompg.csv").write_bytes(z.read("ISLP/data/Auto.csv"))


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as d:
        tmp = pathlib.Path(d)
        for name, fetch in [("boston", boston), ("autompg", autompg)]:
            if (OUT / f"{name}.csv").exists():
                print(f"{name}: present")
                continue
            fetch(tmp)
            print(f"{name}: written to {OUT / (name + '.csv')}")


if __name__ == "__main__":
    main()
