import pytest

from mutualprompt.config import ABLATION_LADDER, ablation_config, strategy_config
from mutualprompt.experiments import SweepRow, ladder_configs, ladder_steps, run_sweep, sweep_csv
from mutualprompt.prompter import Strategy

from conftest import tiny_run_config

# (ITP, VP, L_sc, L_idc, L_im) per row of the reference ablation table
REFERENCE_ROWS = [
    (False, False, False, False, False),
    (False, True, False, False, False),
    (True, False, False, False, False),
    (True, True, False, False, False),
    (True, True, True, False, False),
    (True, True, True, True, False),
    (True, True, True, True, True),
]


def test_ladder_matches_reference_rows():
    assert [tuple(r[1:]) for r in ABLATION_LADDER] == REFERENCE_ROWS


def test_ladder_rows_are_distinct_configs():
    cfgs = [c.to_dict() for _, c in ladder_configs(tiny_run_config())]
    assert len({repr(c) for c in cfgs}) == 7


def test_row_toggles_applied():
    cfg = ablation_config(tiny_run_config(), "mutual+sc")
    assert cfg.prompter.textual_prompting and cfg.prompter.visual_prompting
    assert (cfg.use_sc, cfg.use_idc, cfg.use_im) == (True, False, False)
    full = ablation_config(tiny_run_config(), "full")
    assert (full.use_sc, full.use_idc, full.use_im) == (True, True, True)


def test_strategy_rows_only_supervised():
    cfg = strategy_config(tiny_run_config(), "independent")
    assert cfg.prompter.strategy is Strategy.INDEPENDENT
    assert not (cfg.use_sc or cfg.use_idc or cfg.use_im)


def test_ladder_steps_are_single_additions():
    means = {name: float(i) for i, (name, *_) in enumerate(ABLATION_LADDER)}
    steps = {(a, b) for a, b, _ in ladder_steps(means)}
    assert steps == {
        ("baseline_coop", "vp_only"),
        ("baseline_coop", "itp_only"),
        ("vp_only", "mutual"),
        ("itp_only", "mutual"),
        ("mutual", "mutual+sc"),
        ("mutual+sc", "mutual+sc+idc"),
        ("mutual+sc+idc", "full"),
    }


def test_summary_and_csv():
    row = SweepRow("ablation", "full", [0, 1], [0.5, 0.7], [0.9, 0.9], [0.4, 0.4])
    s = row.summary()
    assert s["target_acc_mean"] == pytest.approx(0.6)
    assert s["target_acc_std"] == pytest.approx(0.1)
    text = sweep_csv([row])
    assert text.splitlines()[0].startswith("table,row,seeds")
    assert "0.600000" in text


def test_run_sweep_progress_callback():
    seen = []
    rows = run_sweep(tiny_run_config(epochs=1), [0], ladder=False, progress=seen.append)
    assert [r.row for r in rows] == [s.value for s in Strategy]
    assert seen == rows
