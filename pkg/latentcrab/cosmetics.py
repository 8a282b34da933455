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

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd

params = {'legend.fontsize': 'x-large',
          'figure.figsize': (4, 4),
          'axes.labelsize': 'x-large',
          'axes.titlesize': 'x-large',
          'xtick.labelsize': 'x-large',
          'ytick.labelsize': 'x-large',
          'figure.dpi': 80,
          'figure.autolayout': False}
plt.rcParams.update(params)

ROLE_COLORS = {
    "thinking_1": "tab:red",
    "thinking_2": "tab:blue",
    "thinking_3": "tab:green",
    "instruction": "tab:gray",
}
LOSS_TERMS = ("cot", "vis", "act_dis", "act_con", "total")


def set_size(width: float, height: float, ax=None) -> None:
    """Resize the figure so the axes area, not the whole canvas, is ``width`` x ``height`` inches."""
    ax = plt.gca() if ax is None else ax
    margins = ax.figure.subplotpars
    ax.figure.set_size_inches(
        float(width) / (margins.right - margins.left),
        float(height) / (margins.top - margins.bottom),
    )


def plot_latent_pca(coords: pd.DataFrame, path: str, explained=None) -> str:
    fig, ax = plt.subplots()
    for role, group in coords.groupby("role", sort=False):
        ax.scatter(group["x"], group["y"], s=6, alpha=0.6, label=role, color=ROLE_COLORS.get(role))
    if explained is not None:
        ax.set_xlabel(f"PC1 ({explained[0]:.0%})")
        ax.set_ylabel(f"PC2 ({explained[1]:.0%})")
    ax.legend(markerscale=3, fontsize="small")
    set_size(4, 4, ax)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_loss_curves(curves: pd.DataFrame, path: str) -> str:
    """``curves`` as returned by ``analyze.loss_curves``; stage changes drawn as dashed lines."""
    fig, ax = plt.subplots()
    for term in LOSS_TERMS:
        if term in curves and curves[term].notna().any():
            ax.plot(curves["global_step"], curves[term], label=term, linewidth=1)
    for start in curves.groupby("stage")["global_step"].min().iloc[1:]:
        ax.axvline(start, color="black", linestyle="--", linewidth=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize="small")
    set_size(6, 3, ax)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path
