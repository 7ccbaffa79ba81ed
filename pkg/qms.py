"""
qms.py
──────
Entry point:  python qms.py --scenario data/scenarios/depolarizing_m2.json
"""

import sys

from cli.main import main

if __name__ == "__main__":
    sys.exit(main())
