import csv
import json

import numpy as np
import pytest

from prostate_dl.experiments import ExperimentConfig, run_experiment
from prostate_dl.objectives import OrdinalConfusion
from prostate_dl.report import (CONFUSION_COLORS, REFERENCE, REFERENCE_NOTE, confusion_colors, emit_report,
                                montage_slice, plot_confusion, results_table, write_tables)

TINY = {"width_divisor": 8, "dense_units": [64, 32], "optim": {"epochs": 1, "batch_size": 4}}


@pytest.fixture(scope="module")
def runs(small_cohort, tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    codes = {"bin:E:NR:ADC": {}, "bin:E:NR:T2W": {}, "pirads:E:ADC": {"resample_224": False},
             "seg:A:unet:noaug:ADC": {"seg_extent": [16, 16, 16]}}
    for code, extra in codes.items():
        cfg = ExperimentConfig.from_code(code).with_overrides({**TINY, **extra})
        run_experiment(cfg, small_cohort, root, report=False)
    return root


def test_confusion_colors():
    c = confusion_colors(5)
    assert c[0, 0] == 0 and c[2, 3] == 1 and c[4, 0] == 2 and c[1, 4] == 2
    assert np.array_equal(c, c.T)
    assert len(CONFUSION_COLORS) == 3


def test_plot_confusion_writes_files(tmp_path):
    files = plot_confusion(OrdinalConfusion(np.eye(5, dtype=int)), "t", tmp_path / "cm")
    assert sorted(files) == ["cm.png", "cm.svg"]
    assert (tmp_path / "cm.png").stat().st_size > 0


def test_montage_slice():
    t = np.zeros((4, 5, 5))
    t[2, :2] = 1
    t[1, 0, 0] = 1
    assert montage_slice(t) == 2
    assert montage_slice(np.zeros((6, 3, 3))) == 3


def test_reference_values_spot_check():
    assert REFERENCE["bin:E:NR:ADC"] == 0.870
    assert REFERENCE["bin:F:WR:T2W"] == 0.815
    assert REFERENCE["seg:B:unet:aug:ADC"] == 0.915
    assert REFERENCE["lesionseg:A:resnet:noaug:T2W"] == 0.385
    assert REFERENCE["pirads:F:T2W"] == 0.664
    # unreported combinations have no reference
    assert "bin:D:NR:ADC" not in REFERENCE and "seg:C:unet:aug:T2W" not in REFERENCE


def test_binary_report(runs):
    run = runs / "bin_E_NR_ADC"
    bundle = emit_report(run)
    rec = json.loads((run / "results.json").read_text())
    for fold, m in bundle.metrics.items():
        assert m == rec["per_fold"][str(fold)]
        if m is not None:
            assert (run / "report" / f"roc_fold{fold}.png").exists()
            assert (run / "report" / f"roc_fold{fold}.svg").exists()
            rows = list(csv.reader(open(run / "report" / f"roc_fold{fold}.csv")))
            assert rows[0] == ["threshold", "fpr", "tpr"] and rows[1][0] == "inf"
    summary = (run / "report" / "summary.md").read_text()
    assert "0.870" in summary and REFERENCE_NOTE in summary
    assert all((run / p).exists() for p in bundle.artifacts)


def test_pirads_report(runs):
    run = runs / "pirads_E_ADC"
    emit_report(run)
    assert (run / "report" / "confusion_all.png").exists()
    assert list((run / "report").glob("confusion_fold*.svg"))


def test_segmentation_report(runs, small_cohort):
    run = runs / "seg_A_unet_noaug_ADC"
    bundle = emit_report(run)
    overlays = sorted(p.stem for p in (run / "report").glob("overlay_*.png"))
    assert overlays == sorted(f"overlay_{s.patient_id}" for s in small_cohort)
    assert all(m is not None and 0 <= m["dice"] <= 1 for m in bundle.metrics.values())


def test_report_is_repeatable(runs):
    run = runs / "bin_E_NR_T2W"
    emit_report(run)
    first = (run / "report" / "summary.md").read_bytes()
    emit_report(run)
    assert (run / "report" / "summary.md").read_bytes() == first


def test_results_table(runs):
    header, rows = results_table(runs, "binary")
    assert header == ["config", "ADC", "T2W", "ADC+T2W", "Average"]
    assert [r[0] for r in rows] == ["bin:E:NR"]
    adc, t2w, both, avg = rows[0][1:]
    assert both is None and avg == pytest.approx((adc + t2w) / 2)
    header, rows = results_table(runs, "prostate_seg")
    assert header == ["config", "ADC", "T2W", "Average"] and rows[0][0] == "seg:A:unet:noaug"


def test_write_tables(runs):
    paths = write_tables(runs)
    names = sorted(p.name for p in paths)
    assert names == ["table_binary.csv", "table_binary.md", "table_pirads.csv", "table_pirads.md",
                     "table_prostate_seg.csv", "table_prostate_seg.md"]
    md = (runs / "table_binary.md").read_text()
    assert md.startswith("| config | ADC | T2W | ADC+T2W | Average |")
    assert "bin:E:NR:ADC=0.870" in md and REFERENCE_NOTE in md


def test_emit_report_missing_predictions(tmp_path):
    cfg = ExperimentConfig.from_code("bin:E:NR:ADC")
    (tmp_path / "config.json").write_text(json.dumps(cfg.to_dict()))
    with pytest.raises(FileNotFoundError):
        emit_report(tmp_path)
