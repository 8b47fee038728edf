"""Regenerate src/stars/fixtures/rate_gap.json (run: python3 scripts/pin_rate_gap.py)."""

import json
from pathlib import Path

from stars.analysis import RateSetup, moment_matched_pair, rate_functional, rate_gap

setup = RateSetup(tau=2.0, v_th=1.0, steps=4)
p, q = moment_matched_pair(0.0, 1.0, "gaussian_vs_two_point")
doc = {
    "command": "python3 scripts/pin_rate_gap.py",
    "setup": {"tau": setup.tau, "v_th": setup.v_th, "steps": setup.steps},
    "P": p.describe(),
    "Q": q.describe(),
    "R_P": rate_functional(p, setup),
    "R_Q": rate_functional(q, setup),
    "rate_gap": rate_gap(p, q, setup),
}
out = Path(__file__).resolve().parents[1] / "src" / "stars" / "fixtures" / "rate_gap.json"
out.write_text(json.dumps(doc, indent=2) + "\n")
print(out, doc["rate_gap"])
