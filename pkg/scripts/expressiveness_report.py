#!/usr/bin/env python3
"""Print the full expressiveness report.

Runs every hand-constructed attention layer against its brute-force oracle
(mean, sum, combine-with-self, max, and the uniform whole-graph readout),
then the structural-sensitivity experiment showing a case where per-pair
distances separate graphs that color refinement cannot. Exits nonzero if
any check fails.
"""

import sys

from graphormer_kit.cli import main as cli

if __name__ == "__main__":
    sys.exit(cli(["express-check"]))
