#!/usr/bin/env python3
"""
fedseg - command-line entry point

Examples:
    python3 run_fedseg.py gen --cases 45 --out data/desk
    python3 run_fedseg.py train --manifest data/desk --config configs/desk.json --out runs/polar
    python3 run_fedseg.py report --in runs/polar --out runs/polar-figures
"""

import sys

from fedseg_app.cli import main

if __name__ == '__main__':
    sys.exit(main())
