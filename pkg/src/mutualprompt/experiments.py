"""Ablation-ladder and prompting-strategy sweeps over a seed list."""

from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass

from .config import ABLATION_LADDER, STRATEGY_ROWS, RunConfig, ablation_config, strategy_config
from .data import DomainData, generate
from .trainer import train


@dataclass
class SweepRow:
    table: str  # "ablation" or "strategy"
    row: str
    seeds: list[int]
    target_acc: list[float]
    source_acc: list[float]
    naive_target_acc: list[float]

    @staticmethod
    def _mean_std(xs: list[float]) -> tuple[float, float]:
        if not xs:
            return float("nan"), float("nan")
        return statistics.fmean(xs), (statistics.pstdev(xs) if len(xs) > 1 else 0.0)

    def summary(self) -> dict:
        t_mean, t_std = self._mean_std(self.target_acc)
        s_mean, s_std = self._mean_std(self.source_acc)
        n_mean, _ = self._mean_std(self.naive_target_acc)
        return {
            "table": self.table,
            "row": self.row,
            "seeds": " ".join(map(str, self.seeds)),
            "target_acc_mean": t_mean,
            "target_acc_std": t_std,
            "source_acc_mean": s_mean,
            "source_acc_std": s_std,
            "naive_target_acc": n_mean,
        }


def _with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    out = RunConfig.from_dict(cfg.to_dict())
    out.seed = seed
    return out


def run_row(table: str, row: str, cfg: RunConfig, seeds: list[int], data: DomainData) -> SweepRow:
    result = SweepRow(table, row, list(seeds), [], [], [])
    for seed in seeds:
        final = train(_with_seed(cfg, seed), data=data).final
        result.target_acc.append(final["target_acc"])
        result.source_acc.append(final["source_acc"])
        result.naive_target_acc.append(final["naive_target_acc"])
    return result


def ladder_configs(base: RunConfig) -> list[tuple[str, RunConfig]]:
    return [(name, ablation_config(base, name)) for name, *_ in ABLATION_LADDER]


def strategy_configs(base: RunConfig) -> list[tuple[str, RunConfig]]:
    return [(s.value, strategy_config(base, s)) for s in STRATEGY_ROWS]


def run_sweep(
    base: RunConfig,
    seeds: list[int],
    ladder: bool = True,
    strategies: bool = True,
    progress=None,
) -> list[SweepRow]:
    """Every row is trained on the same generated dataset (one data seed)."""
    data = generate(base.data)
    jobs = []
    if ladder:
        jobs += [("ablation", name, cfg) for name, cfg in ladder_configs(base)]
    if strategies:
        jobs += [("strategy", name, cfg) for name, cfg in strategy_configs(base)]
    rows = []
    for table, name, cfg in jobs:
        rows.append(run_row(table, name, cfg, seeds, data))
        if progress:
            progress(rows[-1])
    return rows


CSV_FIELDS = [
    "table",
    "row",
    "seeds",
    "target_acc_mean",
    "target_acc_std",
    "source_acc_mean",
    "source_acc_std",
    "naive_target_acc",
]


def sweep_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        s = r.summary()
        writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in s.items()})
    return buf.getvalue()


def ladder_steps(means: dict[str, float]) -> list[tuple[str, str, float]]:
    """Accuracy change for each single-component addition in the ladder.

    Pairs are (before, after) rows that differ by exactly one enabled toggle.
    """
    toggles = {name: flags for name, *flags in ABLATION_LADDER}
    steps = []
    for a, fa in toggles.items():
        for b, fb in toggles.items():
            added = [i for i in range(len(fa)) if fb[i] and not fa[i]]
            removed = [i for i in range(len(fa)) if fa[i] and not fb[i]]
            if len(added) == 1 and not removed and a in means and b in means:
                steps.append((a, b, means[b] - means[a]))
    return steps
