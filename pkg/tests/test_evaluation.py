import json
import subprocess

import numpy as np
import pytest

from ma2t import evaluation as ev
from ma2t.driving import METRICS, sample_metrics
from ma2t.errors import ContractError
from ma2t.evaluation import CorruptionSpec
from ma2t.pipeline import forward_with_noise


@pytest.fixture(scope="module")
def val(small_data):
    return small_data[1].subset(np.arange(12))


def test_clean_row_is_direct_forward(pretrained, val):
    m = ev.evaluate_whitebox(pretrained, val, [], n_samples=None, batch_size=5)
    obs, labels = val.batch(np.arange(len(val)))
    heads, _ = forward_with_noise(pretrained.to_pipeline(), obs, labels)
    direct = sample_metrics(heads, labels)
    for metric in METRICS:
        v = direct[metric][np.isfinite(direct[metric])]
        assert m.cell("Clean", metric) == pytest.approx(v.mean() if len(v) else 0.0)


def test_whitebox_rows_and_attack_strength(pretrained, val):
    attacks = [ev.image_attack("pgd", "linf"), ev.image_attack("fgsm", "linf")] + ev.adaptive_attacks()
    m = ev.evaluate_whitebox(pretrained, val, attacks, restarts=1)
    assert m.rows == ["Clean", "PGD-linf", "FGSM-linf", "Plan-targeted PGD-linf",
                      "Module-wise PGD-linf", "Sub-loss PGD-linf"]
    assert m.cell("Plan-targeted PGD-linf", "avg_l2") > m.cell("Clean", "avg_l2")
    assert m.descriptors[1]["restarts"] == 1 and m.metadata["n_samples"] == 12
    threaded = ev.evaluate_whitebox(pretrained, val, attacks, restarts=1, batch_size=4, threads=3)
    assert np.array_equal(threaded.mean, ev.evaluate_whitebox(pretrained, val, attacks, restarts=1,
                                                              batch_size=4).mean)


def test_blackbox_self_transfer_equals_whitebox(pretrained, val):
    attacks = [ev.image_attack("pgd", "linf", restarts=1), ev.image_attack("fgsm", "linf", restarts=1)]
    bb = ev.evaluate_blackbox(pretrained, {"self": pretrained}, val, attacks)
    wb = ev.evaluate_whitebox(pretrained, val, attacks, restarts=None)
    row = bb.rows[1]
    chosen = row[len("self ("):-1]
    cand = bb.descriptors[1]["candidates"]
    assert chosen == max(cand, key=cand.get)
    assert np.allclose(bb.mean[1], wb.mean[wb.rows.index(chosen)])
    with pytest.raises(ContractError):
        ev.evaluate_blackbox(pretrained, {"s": pretrained}, val, ev.adaptive_attacks(restarts=1))


def test_corruption_examples():
    rs = np.random.default_rng(0)
    x = (rs.uniform(size=(4, 32, 32)) > 0.7).astype(float)
    for kind in ev.CORRUPTIONS:
        assert np.array_equal(ev.apply_corruption(x, CorruptionSpec(kind, 0)), x)
        prev = 0.0
        for sev in range(1, 6):
            out = ev.apply_corruption(x, CorruptionSpec(kind, sev))
            assert out.shape == x.shape and out.min() >= 0 and out.max() <= 1
            assert np.array_equal(out, ev.apply_corruption(x, CorruptionSpec(kind, sev)))
            dist = np.abs(out - x).mean()
            assert dist >= prev - 1e-12, (kind, sev)
            prev = dist
    # uniform grey is a fixed point of contrast
    grey = np.full((4, 32, 32), 0.5)
    assert np.allclose(ev.apply_corruption(grey, CorruptionSpec("contrast", 5)), grey)
    with pytest.raises(ContractError):
        CorruptionSpec("fog", 1)
    with pytest.raises(ContractError):
        CorruptionSpec("snow", 6)


def test_corruption_matrix(pretrained, val):
    m = ev.evaluate_corruption(pretrained, val, n_samples=4)
    assert len(m.rows) == 30 and m.rows[0] == "contrast@1" and m.rows[-1] == "spatter@5"
    assert m.metadata["summary_avg_l2"] == pytest.approx(ev.corruption_summary(m))


def test_git_blob_hash_matches_git(tmp_path):
    p = tmp_path / "f.txt"
    p.write_bytes(b"hello\n")
    out = subprocess.run(["git", "hash-object", str(p)], capture_output=True, text=True)
    if out.returncode == 0:
        assert ev.git_blob_hash(b"hello\n") == out.stdout.strip()
    assert ev.git_blob_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_report_round_trip(tmp_path, pretrained, val):
    m = ev.evaluate_whitebox(pretrained, val, [ev.image_attack("fgsm", "linf")], restarts=1)
    pretrained.save(tmp_path / "v.ckpt")
    a = ev.emit_report([m], {"seed": np.int64(0)}, tmp_path / "a", inputs={"victim": tmp_path / "v.ckpt"},
                       extra_csv={"plot.csv": (["x", "y"], [[1, 2]])})
    b = ev.emit_report([m], {"seed": 0}, tmp_path / "b", inputs={"victim": tmp_path / "v.ckpt"},
                       extra_csv={"plot.csv": (["x", "y"], [[1, 2]])})
    assert a.read_bytes() == b.read_bytes()
    bundle = ev.load_report(a)
    back = ev.EvalMatrix.from_dict(bundle["matrices"][0])
    assert back.rows == m.rows and np.array_equal(back.mean, m.mean)
    lines = (tmp_path / "a" / "whitebox.csv").read_text().splitlines()
    assert lines[0].split(",") == ev.CSV_HEADER and len(lines) == 3
    assert (tmp_path / "a" / "plot.csv").read_text() == "x,y\n1,2\n"
    bundle["matrices"][0]["columns"] = ["bogus"]
    with pytest.raises(Exception):
        ev.validate_report(bundle)


def test_population_std_and_nan_exclusion():
    samples = {m: np.array([1.0, 3.0, np.nan]) for m in METRICS}
    mean, std, count = ev._summarise(samples)
    assert mean[0] == 2.0 and std[0] == 1.0 and count[0] == 2
    empty = {m: np.array([np.nan]) for m in METRICS}
    assert ev._summarise(empty) == ([0.0] * 5, [0.0] * 5, [0] * 5)


def test_report_json_is_sorted(tmp_path, pretrained, val):
    m = ev.evaluate_corruption(pretrained, val, kinds=("snow",), severities=(1,), n_samples=2)
    path = ev.emit_report([m], {"b": 1, "a": 2}, tmp_path)
    text = path.read_text()
    assert text == json.dumps(json.loads(text), sort_keys=True, indent=2) + "\n"
