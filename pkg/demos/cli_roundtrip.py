"""Command-line workflow: generate data, segment, then replay the run.

Every command writes ``run.json`` next to its outputs; ``masflow rerun``
replays it and the outputs match byte for byte.
"""
import hashlib
import sys
import tempfile
from pathlib import Path

from masflow.cli import main

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
data, first, second = root / "data", root / "seg", root / "replay"

main(["make-phantoms", "--count", "6", "--seed", "3", "--out", str(data)])
main(["segment", "--manifest", str(data / "manifest.json"), "--set", "configuration=MASr_LW",
      "--set", "R=3", "--set", "regularisation.a=1.0", "--out", str(first)])
main(["rerun", str(first / "run.json"), "--out", str(second)])

for name in ("segmentation.raw", "report.json"):
    a, b = (hashlib.sha256((d / name).read_bytes()).hexdigest() for d in (first, second))
    print(f"{name}: {'identical' if a == b else 'DIFFERENT'}")
