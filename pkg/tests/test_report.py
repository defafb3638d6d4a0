import csv
import statistics
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from shiftfold.embed2d import write_tsne_csv
from shiftfold.harness.experiment import METRICS_HEADER, MetricsRecord, write_metrics
from shiftfold.harness.report import render_report
from shiftfold.transport import write_distance_csv

SVG = "{http://www.w3.org/2000/svg}"

# final-epoch accuracies per (splitter, split): fold 0, fold 1
FINAL = {
    ("vgmm", "train"): (0.95, 0.85),
    ("vgmm", "val"): (0.9, 0.7),
    ("vgmm", "test"): (0.5, 0.3),
    ("random", "train"): (0.9, 0.9),
    ("random", "val"): (0.8, 0.8),
    ("random", "test"): (0.75, 0.85),
}


def fixture_records():
    recs = []
    for (splitter, split), finals in FINAL.items():
        for fold, acc in enumerate(finals):
            recs.append(MetricsRecord("r0", splitter, "mlp-small", fold, 1, split, 0.25, 1.0))
            recs.append(MetricsRecord("r0", splitter, "mlp-small", fold, 2, split, acc, 0.5))
    return recs


@pytest.fixture
def report_dir(tmp_path):
    write_metrics(tmp_path / "metrics.csv", fixture_records())
    g = np.random.default_rng(0)
    write_tsne_csv(tmp_path / "tsne.csv", g.standard_normal((20, 2)), np.arange(20) % 2, np.arange(20) % 3)
    D = np.array([[0.0, 0.2, 0.4], [0.2, 0.0, 0.6], [0.4, 0.6, 0.0]])
    write_distance_csv(tmp_path / "distances_vgmm.csv", D)
    write_distance_csv(tmp_path / "distances_random.csv", D / 2)
    return tmp_path


def render(d):
    return render_report(d / "metrics.csv", d / "out", d / "tsne.csv",
                         {"vgmm": d / "distances_vgmm.csv", "random": d / "distances_random.csv"})


def test_summary_matches_hand_computation(report_dir):
    summary = render(report_dir)
    # hand values: vgmm val (0.9 + 0.7) / 2 = 0.8, population std 0.1; vgmm test 0.4 +- 0.1
    assert summary.stats[("vgmm", "mlp-small", "val")][:2] == pytest.approx((0.8, 0.1))
    assert summary.stats[("vgmm", "mlp-small", "test")][:2] == pytest.approx((0.4, 0.1))
    assert summary.stats[("random", "mlp-small", "val")][:2] == pytest.approx((0.8, 0.0))
    assert summary.stats[("random", "mlp-small", "test")][:2] == pytest.approx((0.8, 0.05))
    lines = (report_dir / "out" / "summary.txt").read_text().splitlines()
    assert "vgmm\tmlp-small\tval\t0.800000\t0.100000\t2" in lines
    assert "vgmm\tmlp-small\ttest\t0.400000\t0.100000\t2" in lines
    assert summary.distances["vgmm"] == pytest.approx(0.4)
    assert summary.distances["random"] == pytest.approx(0.2)


def test_summary_equals_independent_recomputation(report_dir):
    summary = render(report_dir)
    with open(report_dir / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    last = max(int(r["epoch"]) for r in rows)
    for (splitter, split) in FINAL:
        accs = [float(r["accuracy"]) for r in rows
                if r["splitter"] == splitter and r["split"] == split and int(r["epoch"]) == last]
        mean, std, n = summary.stats[(splitter, "mlp-small", split)]
        assert mean == pytest.approx(statistics.fmean(accs), abs=1e-12)
        assert std == pytest.approx(statistics.pstdev(accs), abs=1e-12)
        assert n == len(accs)


def test_svg_outputs(report_dir):
    summary = render(report_dir)
    assert summary.panels == 6
    root = ET.parse(report_dir / "out" / "report.svg").getroot()
    titles = [t.text for t in root.iter(f"{SVG}text") if t.text and t.text.endswith("accuracy")]
    assert len(titles) == 6
    # 2 folds per panel, each a polyline over two epochs
    assert len(list(root.iter(f"{SVG}polyline"))) == 12
    assert sum("Wasserstein" in (t.text or "") for t in root.iter(f"{SVG}text")) == 2
    scatter = ET.parse(report_dir / "out" / "tsne.svg").getroot()
    assert len(list(scatter.iter(f"{SVG}circle"))) == 20 + 3


def test_empty_metrics_is_an_error(tmp_path):
    (tmp_path / "metrics.csv").write_text(",".join(METRICS_HEADER) + "\n")
    with pytest.raises(ValueError, match="no metrics"):
        render_report(tmp_path / "metrics.csv", tmp_path / "out")
    assert not (tmp_path / "out" / "report.svg").exists()


def test_malformed_csv_is_an_error(tmp_path):
    (tmp_path / "metrics.csv").write_text("splitter,accuracy\nvgmm,0.5\n")
    with pytest.raises(ValueError):
        render_report(tmp_path / "metrics.csv", tmp_path / "out")
