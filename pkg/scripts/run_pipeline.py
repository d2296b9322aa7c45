"""Run the full toy experiment (synth, train, translate, evaluate) into a run directory.

Usage: python scripts/run_pipeline.py [RUN_DIR]
"""

import json
import logging
import sys

from staintrans.experiment import run

if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    root = sys.argv[1] if len(sys.argv) > 1 else "runs/acceptance"
    print(json.dumps(run(root), indent=1, sort_keys=True))
