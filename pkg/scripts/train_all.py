"""Train all three networks in sequence and leave checkpoints under --out."""

import sys

from sfs.cli import main

if __name__ == "__main__":
    extra = sys.argv[1:]
    for command in ("gen-data", "train-dnss", "train-nrmn", "train-lfn"):
        rc = main([command, *extra])
        if rc != 0:
            sys.exit(rc)
    sys.exit(0)
