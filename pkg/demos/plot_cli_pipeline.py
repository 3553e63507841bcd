"""
Driving the command-line runner from Python
===========================================

The ``mil`` entry point is a thin wrapper over the library. This walks
through generate, train, eval and report in a temporary directory.
Five epochs keep it quick; the accuracies are not representative.
"""
import tempfile
from pathlib import Path

from modalinc.cli import main

work = Path(tempfile.mkdtemp())
main(["generate", "--out", str(work / "data"), "--seed", "0"])
for method in ("seqf", "harmony"):
    main(["train", "--data", str(work / "data"), "--method", method, "--epochs", "5",
          "--out", str(work / method)])
main(["eval", "--checkpoint", str(work / "harmony" / "checkpoints" / "phase3"), "--data", str(work / "data")])
main(["report", str(work / "seqf"), str(work / "harmony"),
      "--out", str(work / "comparison")])
