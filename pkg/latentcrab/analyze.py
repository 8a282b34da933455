###
# Licensed under the Apache License, Version 2.0 (the "License");
# You may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
# http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
###

import json
import os
import typing as t

import numpy as np
import pandas as pd
from scipy.stats import binomtest

# ablation rows, weakest supervision first
ABLATION_ROWS = (
    ("no_cot", "no CoT"),
    ("explicit_cot", "explicit text CoT"),
    ("latent_text", "latent text CoT"),
    ("latent_full", "latent text + visual CoT"),
)


def wilson_interval(successes: int, n: int, confidence: float = 0.95) -> t.Tuple[float, float]:
    if n < 1:
        raise ValueError(f"need at least one rollout, got {n}")
    if not 0 <= successes <= n:
        raise ValueError(f"{successes} successes out of {n} rollouts")
    ci = binomtest(int(successes), int(n)).proportion_ci(confidence_level=confidence, method="wilson")
    return float(ci.low), float(ci.high)


def add_intervals(frame: pd.DataFrame, successes: str = "successes", n: str = "n_rollouts") -> pd.DataFrame:
    frame = frame.copy()
    bounds = [wilson_interval(int(s), int(k)) for s, k in zip(frame[successes], frame[n])]
    frame["ci_low"] = [low for low, _ in bounds]
    frame["ci_high"] = [high for _, high in bounds]
    return frame


def ablation_table(results: pd.DataFrame) -> pd.DataFrame:
    """One row per supervision variant in the fixed order, with 95% Wilson bounds."""
    order = {variant: i for i, (variant, _) in enumerate(ABLATION_ROWS)}
    unknown = set(results["variant"]) - set(order)
    if unknown:
        raise ValueError(f"unknown ablation variants: {sorted(unknown)}")
    if results["variant"].duplicated().any():
        raise ValueError("ablation results hold more than one row per variant")
    table = results.copy()
    table["row"] = table["variant"].map(order)
    table["label"] = table["variant"].map(dict(ABLATION_ROWS))
    table = table.sort_values("row").drop(columns="row").reset_index(drop=True)
    if "ci_low" not in table:
        table = add_intervals(table)
    return table


def trend_holds(table: pd.DataFrame) -> bool:
    """Success rates non-decreasing down the table, up to overlapping intervals."""
    rates = table["success_rate"].to_numpy()
    lows, highs = table["ci_low"].to_numpy(), table["ci_high"].to_numpy()
    for i in range(len(rates) - 1):
        if rates[i + 1] < rates[i] and highs[i + 1] < lows[i]:
            return False
    return True


def write_report(frame: pd.DataFrame, directory: str, name: str, meta: t.Optional[t.Dict] = None) -> t.Tuple[str, str]:
    os.makedirs(directory, exist_ok=True)
    csv_path = os.path.join(directory, f"{name}.csv")
    json_path = os.path.join(directory, f"{name}.json")
    frame.to_csv(csv_path, index=False)
    records = json.loads(frame.to_json(orient="records"))
    with open(json_path, "w") as f:
        json.dump({"meta": meta or {}, "rows": records}, f, indent=1, sort_keys=True)
    return csv_path, json_path


def percentile_summary(values: t.Sequence[float]) -> t.Dict[str, float]:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return {"median": float("nan"), "p90": float("nan"), "mean": float("nan")}
    return {
        "median": float(np.median(values)),
        "p90": float(np.percentile(values, 90)),
        "mean": float(np.mean(values)),
    }


def loss_curves(metrics_path: str) -> pd.DataFrame:
    """Metrics CSV indexed by a global step that runs across stages."""
    frame = pd.read_csv(metrics_path)
    frame = frame.sort_values(["stage", "step"], kind="stable").reset_index(drop=True)
    frame["global_step"] = np.arange(len(frame))
    return frame
