"""Branch task for the adaptive example.

    python3 converge.py ITERATION TOLERANCE [LATER_STAGE_UID ...]

The stand-in error halves every iteration. Once it drops below the tolerance
the remaining iterations are canceled. A decision file is always written so
output staging has something to copy.
"""

import json
import sys

iteration, tolerance, later = int(sys.argv[1]), float(sys.argv[2]), sys.argv[3:]
error = 0.5 ** iteration
decision = {"iteration": iteration, "error": error, "cancel": later if error < tolerance else []}
with open("decision.json", "w") as fh:
    json.dump(decision, fh)
print(json.dumps(decision))
