import glob
import json
import math
import os

import numpy as np
import pytest

from ovalseg import evaluation as ev
from ovalseg.errors import ConfigError, ShapeError
from ovalseg.imaging import write_pfm, write_pgm
from ovalseg.network import NetConfig, ParameterSet, save_params
from ovalseg.synthdata import DatasetManifest, ManifestRecord, generate_phantom, read_manifest, write_manifest
from ovalseg.training import TrainConfig

TINY_NET = NetConfig(init_channels=4, depth=2, pyramid_scales=(1, 2), dropout_p=0.2)
TINY_TRAIN = TrainConfig(epochs=1, augment=False, seed=0)


def test_dsc_examples():
    m = np.zeros((4, 5), np.uint8)
    m[1, :] = 1
    assert ev.dsc(m, m) == 1.0
    other = np.zeros_like(m)
    other[3, :] = 1
    assert ev.dsc(m, other) == 0.0
    g = np.zeros((4, 5), np.uint8)
    g[1:3, :] = 1
    assert ev.dsc(m, g) == pytest.approx(2 * 5 / 15)
    assert ev.dsc(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    with pytest.raises(ShapeError):
        ev.dsc(np.zeros((2, 2)), np.zeros((2, 3)))


def test_dsc_symmetric_and_permutation_invariant():
    rng = np.random.default_rng(0)
    a = rng.random((8, 8)) < 0.4
    b = rng.random((8, 8)) < 0.4
    assert ev.dsc(a, b) == ev.dsc(b, a)
    perm = rng.permutation(64)
    assert ev.dsc(a.reshape(-1)[perm], b.reshape(-1)[perm]) == ev.dsc(a, b)


def test_binarize_threshold_inclusive():
    np.testing.assert_array_equal(ev.binarize([0.49999, 0.5, 0.9]), [0, 1, 1])


def _dataset(root, n=10, size=32):
    os.makedirs(root, exist_ok=True)
    recs = []
    for i in range(n):
        ph = generate_phantom(i, size)
        write_pfm(os.path.join(root, f"img_{i:03d}.pfm"), ph.image)
        write_pgm(os.path.join(root, f"mask_{i:03d}.pgm"), ph.truth)
        recs.append(ManifestRecord(i, f"img_{i:03d}.pfm", f"mask_{i:03d}.pgm"))
    write_manifest(os.path.join(root, "manifest.tsv"), DatasetManifest(recs))
    return read_manifest(os.path.join(root, "manifest.tsv"))


def _fake_manifest(n):
    return DatasetManifest([ManifestRecord(i, f"i{i}", f"m{i}") for i in range(n)])


def test_kfold_partition_and_sizes():
    folds = ev.kfold_split(_fake_manifest(40), 5, seed=3)
    tests = [[r.index for r in te.records] for _, te in folds]
    assert [len(t) for t in tests] == [8] * 5
    assert sorted(i for t in tests for i in t) == list(range(40))
    for (tr, te) in folds:
        assert not {r.index for r in tr.records} & {r.index for r in te.records}
        assert len(tr.records) == 32


def test_kfold_deterministic_and_seeded():
    a = ev.kfold_split(_fake_manifest(23), 5, seed=1)
    b = ev.kfold_split(_fake_manifest(23), 5, seed=1)
    c = ev.kfold_split(_fake_manifest(23), 5, seed=2)
    idx = lambda f: [[r.index for r in te.records] for _, te in f]  # noqa: E731
    assert idx(a) == idx(b) != idx(c)
    assert sorted(len(t) for t in idx(a)) == [4, 4, 5, 5, 5]


def test_kfold_errors():
    with pytest.raises(ConfigError):
        ev.kfold_split(_fake_manifest(3), 5)
    with pytest.raises(ConfigError):
        ev.kfold_split(_fake_manifest(10), 1)


def test_fold_report_json_round_trip():
    rep = ev.FoldReport.from_scores(2, [0.5, 1.0], "abc", 0.25)
    data = json.loads(rep.to_json())
    assert data == {"fold_id": 2, "dscs": [0.5, 1.0], "mean_dsc": 0.75, "config_fingerprint": "abc",
                    "final_loss": 0.25}
    assert ev.FoldReport(**data) == rep


def test_config_fingerprint_order_independent():
    assert ev.config_fingerprint({"a": 1, "b": 2.0}) == ev.config_fingerprint({"b": 2.0, "a": 1})
    assert ev.config_fingerprint({"a": 1}) != ev.config_fingerprint({"a": 2})


def test_evaluate_checkpoint_scores_accurate_only(tmp_path):
    man = _dataset(str(tmp_path / "data"), n=4)
    man.records[0].flag = "oval"
    ps = ParameterSet.create(TINY_NET, seed=0)
    path = tmp_path / "ck.bin"
    save_params(path, ps, TINY_NET)
    rep = ev.evaluate_checkpoint(path, man)
    assert len(rep.dscs) == 3
    assert all(0 <= d <= 1 for d in rep.dscs)
    assert len(rep.config_fingerprint) == 64 and rep.final_loss is None


@pytest.fixture(scope="module")
def sweep(tmp_path_factory):
    root = tmp_path_factory.mktemp("sweep")
    man = _dataset(str(root / "data"))
    out = str(root / "out")
    report = ev.run_sweep(man, out, TINY_NET, TINY_TRAIN, subsets=2, k=2, k_folds=2)
    return man, out, report


def test_sweep_report_has_seven_rows(sweep):
    _, out, report = sweep
    assert [(r.model, r.n) for r in report.rows] == ev.sweep_cells()
    assert len(report.rows) == 7
    for r in report.rows:
        assert r.runs == 4
        assert 0 <= r.mean_dsc <= 1 and r.std_dsc >= 0
    assert report.baseline().improvement_pct == 0.0
    assert len(glob.glob(os.path.join(out, "runs", "*.json"))) == 28
    assert len(glob.glob(os.path.join(out, "runs", "*.cpu"))) == 28
    assert ev.cpu_seconds(out) > 0


def test_sweep_means_equal_persisted_runs(sweep):
    _, out, report = sweep
    for r in report.rows:
        name = ev._cell_name(r.model, r.n)
        means = []
        for path in sorted(glob.glob(os.path.join(out, "runs", f"{name}_s*_f*_seed*.json"))):
            with open(path) as f:
                means.append(json.load(f)["mean_dsc"])
        assert r.mean_dsc == pytest.approx(float(np.mean(means)), abs=1e-12)
        assert r.std_dsc == pytest.approx(float(np.std(means, ddof=1)), abs=1e-12)


def test_sweep_resumes_without_retraining(sweep):
    man, out, report = sweep
    runs = sorted(glob.glob(os.path.join(out, "runs", "*.json")))
    stamps = [os.stat(p).st_mtime_ns for p in runs]
    again = ev.run_sweep(man, out, TINY_NET, TINY_TRAIN, subsets=2, k=2, k_folds=2)
    assert again.to_csv() == report.to_csv()
    assert [os.stat(p).st_mtime_ns for p in runs] == stamps


def test_sweep_recomputes_stale_run(sweep):
    man, out, report = sweep
    victim = os.path.join(out, "runs", "moi2_n2_s1_f1_seed0.json")
    with open(victim) as f:
        data = json.load(f)
    data["config_fingerprint"] = "stale"
    with open(victim, "w") as f:
        json.dump(data, f)
    again = ev.run_sweep(man, out, TINY_NET, TINY_TRAIN, subsets=2, k=2, k_folds=2)
    assert again.to_csv() == report.to_csv()
    with open(victim) as f:
        assert json.load(f)["config_fingerprint"] != "stale"


def test_sweep_report_formats(sweep):
    _, out, report = sweep
    ev.write_report(report, out)
    csv = open(os.path.join(out, "sweep.csv")).read().splitlines()
    assert csv[0] == "model,n,mean_dsc,std_dsc,improvement_pct"
    assert csv[1].startswith("none,-,")
    assert len(csv) == 8
    text = open(os.path.join(out, "sweep.txt")).read()
    assert "MoI2" in text and "no MoI" in text


def test_all_ones_weights_cell_equals_baseline(tmp_path):
    # with k = 0 no sample is an oval, so every MoI map is all ones
    man = _dataset(str(tmp_path / "data"), n=6)
    rep = ev.run_sweep(man, str(tmp_path / "out"), TINY_NET, TINY_TRAIN, subsets=1, k=0, grid=(1.0,),
                       models=("moi1",), k_folds=2)
    base, cell = rep.rows
    assert cell.model == "moi1" and cell.n == 1.0
    assert cell.mean_dsc == base.mean_dsc and cell.std_dsc == base.std_dsc
    for f in range(2):
        a = json.load(open(tmp_path / "out" / "runs" / f"none_s0_f{f}_seed0.json"))
        b = json.load(open(tmp_path / "out" / "runs" / f"moi1_n1_s0_f{f}_seed0.json"))
        assert a["dscs"] == b["dscs"] and a["final_loss"] == b["final_loss"]


def test_sweep_rejects_overlapping_subsets(tmp_path):
    with pytest.raises(ConfigError):
        ev.run_sweep(_fake_manifest(10), str(tmp_path), TINY_NET, TINY_TRAIN, subsets=5, k=3)


def test_summarize_handles_missing_runs():
    cells = ev.sweep_cells(("moi1",), (1.0,))
    rep = ev.summarize(cells, {cells[0]: [ev.FoldReport.from_scores(0, [0.5], "x")]})
    assert rep.rows[0].mean_dsc == 0.5 and rep.rows[0].std_dsc == 0.0
    assert math.isnan(rep.rows[1].mean_dsc) and rep.rows[1].runs == 0
