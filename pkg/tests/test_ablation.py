from pathlib import Path

import pytest

from maskplan.ablation import AblationCell, AblationConfig, AblationReport, ablation_world_spec, run_ablation
from maskplan.artifacts import read_csv
from maskplan.masking import HARD, NONE, SOFT

TINY = AblationConfig(
    action_sizes=(8,),
    seeds=(0,),
    videos=30,
    classifier_steps=2,
    train_steps=2,
    batch_size=8,
    diffusion_steps=5,
    channels=(8, 8, 8),
    eval_limit=5,
)


def _cell(mask: str, size: int, seed: int, sr: float) -> AblationCell:
    return AblationCell(mask=mask, num_actions=size, seed=seed, success_rate=sr, mean_accuracy=sr, mean_iou=sr)


def test_report_averages_over_seeds() -> None:
    report = AblationReport(
        [
            _cell(HARD, 20, 0, 0.6),
            _cell(HARD, 20, 1, 0.8),
            _cell(NONE, 20, 0, 0.5),
            _cell(NONE, 20, 1, 0.5),
            _cell(HARD, 60, 0, 0.4),
            _cell(NONE, 60, 0, 0.1),
        ]
    )

    assert report.mean_sr(HARD, 20) == pytest.approx(0.7)
    assert report.gaps() == pytest.approx({20: 0.2, 60: 0.3})
    assert report.matrix()[NONE] == pytest.approx({20: 0.5, 60: 0.1})


def test_world_size_follows_action_count() -> None:
    spec = ablation_world_spec(AblationConfig(), 60, seed=3)

    assert spec.num_tasks == 15
    assert spec.num_actions == 60
    assert spec.seed == 3


def test_action_sizes_must_divide_evenly() -> None:
    with pytest.raises(ValueError):
        run_ablation(AblationConfig(action_sizes=(10,), actions_per_task=4))


def test_sweep_covers_every_cell_and_writes_tables(tmp_path: Path) -> None:
    report = run_ablation(TINY, out_dir=tmp_path, config_hash="abc")

    assert sorted(cell.mask for cell in report.cells) == sorted([HARD, NONE, SOFT])
    assert all(0.0 <= cell.success_rate <= 1.0 for cell in report.cells)
    rows = read_csv(tmp_path / "ablation.csv")
    assert len(rows) == 3
    gap = read_csv(tmp_path / "gap.csv")
    assert gap[0]["num_actions"] == "8"
    assert (tmp_path / "gap.csv").read_text().startswith("# maskplan 0.1.0 config=abc")
