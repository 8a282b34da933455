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

import logging
import os
import typing as t

import mlflow
import pandas as pd
from mlflow.utils.file_utils import local_file_uri_to_path
from ray import tune
from ray.train import RunConfig

logger = logging.getLogger(__name__)

TrialFn = t.Callable[[t.Dict, t.Dict], t.Dict]


def storage_dir(config: t.Dict) -> str:
    # inside an mlflow run, ray tune results land in the run's artifact store
    if mlflow.active_run():
        return local_file_uri_to_path(mlflow.active_run().info.artifact_uri)
    return os.path.abspath(config.get("paths", {}).get("reports", "reports"))


def schedule_ablation(
    config: t.Dict,
    trial_fn: TrialFn,
    variants: t.Sequence[str],
    seed: int = 0,
    threads: int = 1,
) -> pd.DataFrame:
    """Run ``trial_fn`` once per variant as a ray tune grid; one result row per variant."""
    search_space = {
        "variant": tune.grid_search(list(variants)),
        "seed": seed,
    }
    cpus_per_trial = config.get("ablation", {}).get("cpus_per_trial", 1)
    objective_fn = tune.with_resources(tune.with_parameters(trial_fn, params=config), {"cpu": cpus_per_trial})
    run_config = RunConfig(
        name=config.get("experiment_name", "latentcrab") + "_ablation",
        storage_path=storage_dir(config),
        log_to_file=True,
    )
    tuner = tune.Tuner(
        objective_fn,
        tune_config=tune.TuneConfig(
            metric="success_rate",
            mode="max",
            num_samples=1,
            max_concurrent_trials=threads,
        ),
        param_space=search_space,
        run_config=run_config,
    )
    results = tuner.fit()
    errors = results.errors
    if errors:
        raise RuntimeError(f"{len(errors)} ablation trial(s) failed: {errors[0]}")
    frame = results.get_dataframe()
    if "variant" not in frame:
        frame["variant"] = frame["config/variant"]
    logger.info("ablation grid finished: %d trials", len(frame))
    return frame
