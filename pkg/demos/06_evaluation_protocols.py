"""
Scoring counts, locations, and tracks
=====================================

Three protocol layers.  Counting compares per-frame totals with MAE and
root-mean-squared error.  Localization matches predicted points to true
heads greedily by confidence and averages precision over distance
thresholds from 1 to 25 pixels.  Tracking applies the same idea to
whole tracklets, scored by how completely they cover a true trajectory.
The script finishes by pushing perfect predictions through the file
pipeline, which must come back with perfect scores.
"""

import json
import subprocess
import sys
import tempfile
from pathlib import Path

from crowdflow.metrics import (
    CountRecord, l_map, localization_ap, mae_mse, t_map,
    tracklet_match_ratio,
)
from crowdflow.postprocess import Detection, Tracklet

# --- counting ------------------------------------------------------------
records = [CountRecord(video=0, frame=0, true_count=10, pred_count=12),
           CountRecord(video=0, frame=1, true_count=20, pred_count=17)]
mae, mse = mae_mse(records)
print(f"counting: MAE {mae}, MSE {mse:.4f} (sqrt(6.5) = 2.5495)")

# --- localization --------------------------------------------------------
# One prediction 10.5 px from the only head: it counts as correct for
# thresholds 11..25, so 15 of the 25 averaged APs are 1.
preds = [Detection(frame=0, x=10.5, y=0.0, conf=1.0)]
gts = [(0, 0.0, 0.0)]
scores = l_map(preds, gts)
print(f"localization: offset 10.5 px -> L-mAP {scores['l_map']}, "
      f"AP@10 {scores['l_ap10']}, AP@15 {scores['l_ap15']}")

ap5 = localization_ap(preds, gts, dist=5.0)
print(f"AP at 5 px for the same prediction: {ap5}")

# --- tracking ------------------------------------------------------------
truth = {f: (float(f), 0.0) for f in range(10)}
half = Tracklet(0, [Detection(f, float(f), 0.4, 0.9) for f in range(5)])
ratio = tracklet_match_ratio(half, truth, dist=25.0)
print(f"tracking: a 5-frame tracklet covers a 10-frame truth -> "
      f"match ratio {ratio}")

full = Tracklet(0, [Detection(f, float(f), 0.2, 0.9) for f in range(10)])
scores = t_map([full], [truth])
print(f"complete coverage -> T-mAP {scores['t_map']}")

# --- the whole loop through files ----------------------------------------
# Generate a tiny dataset, convert its annotations into prediction
# artifacts, and score them: the evaluation must return zeros and ones.
with tempfile.TemporaryDirectory() as tmp:
    base = Path(tmp)
    run = [sys.executable, "-m", "crowdflow.cli"]
    cfg = {"sequences": [{"name": "demo", "width": 48, "height": 40,
                          "frame_count": 5, "count_min": 4,
                          "count_max": 8}]}
    (base / "scenes.json").write_text(json.dumps(cfg))
    for argv in ([*run, "generate", "--out", str(base / "data"),
                  "--config", str(base / "scenes.json"), "--seed", "9"],
                 [*run, "gtmaps", "--data", str(base / "data"),
                  "--out", str(base / "pred")],
                 [*run, "evaluate", "--data", str(base / "data"),
                  "--pred", str(base / "pred"),
                  "--out", str(base / "eval")]):
        subprocess.run(argv, check=True, capture_output=True)
    doc = json.loads((base / "eval" / "results.json").read_text())
    o = doc["overall"]
    print("\nground truth scored as a prediction:")
    print(f"  MAE {o['mae']}  MSE {o['mse']}  "
          f"L-mAP {o['l_map']}  T-mAP {o['t_map']}")
    print("  per-attribute keys:", sorted(k for k in doc if k != "overall"))
