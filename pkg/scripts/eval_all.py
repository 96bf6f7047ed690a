"""Run the episodic and zero-shot evaluations plus the benchmark."""

import sys

from sfs.cli import main

if __name__ == "__main__":
    extra = sys.argv[1:]
    for command in ("eval-episodes", "eval-zeroshot", "bench"):
        rc = main([command, *extra])
        if rc != 0:
            sys.exit(rc)
    sys.exit(0)
