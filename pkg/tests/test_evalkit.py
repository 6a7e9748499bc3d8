import csv
import statistics
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import random_durations, random_path
from snapalloc.dataprep import SynthConfig, build_dataset, synth_curves, to_range_angle
from snapalloc.evalkit import (
    REFERENCE_RESULTS,
    CostRecord,
    CostReport,
    attention_export,
    attention_summary,
    band_mass,
    collect_attention,
    evaluate_methods,
    histogram,
    histogram_export,
    normalized_cost,
    ood_eval,
    prepare_baselines,
    read_report_csv,
    relative_error,
    sample_efficiency_sweep,
    sample_path,
    uniform_band_mass,
    write_run_manifest,
)
from snapalloc.seqmodel.mlp import train_bank
from snapalloc.seqmodel.model import AllocationModel, AttentionRecord, ModelConfig
from snapalloc.seqmodel.train import TrainConfig
from snapalloc.timealloc import tvp_allocate
from snapalloc.trajopt import TimeAllocation, WaypointPath, solve_min_snap

TOY = ModelConfig(embed_dim=8, num_heads=2, enc_layers=1, dec_layers=1, ffn_dim=16, max_seq_len=24)


@pytest.fixture(scope="module")
def data():
    curves = synth_curves(SynthConfig(seed=11), 6)
    return build_dataset(curves, range(3, 7)).samples


class TestMetrics:
    def test_normalized_cost(self):
        assert normalized_cost(0.0) == 0.0
        assert normalized_cost(128.0) == pytest.approx(2.0)
        with pytest.raises(ValueError):
            normalized_cost(-1.0)

    def test_normalized_cost_time_scaling(self, rng):
        path = random_path(rng, 6)
        t = random_durations(rng, 5)
        J1 = solve_min_snap(path, TimeAllocation(t))[1]
        J2 = solve_min_snap(path, TimeAllocation(2 * t))[1]
        assert normalized_cost(J1) / normalized_cost(J2) == pytest.approx(2.0, rel=1e-9)

    def test_relative_error(self):
        assert relative_error(5.0, 5.0) == 0.0
        assert relative_error(2**7 * 3.0, 3.0) == pytest.approx(100.0)
        assert relative_error(1.0, 2**7) < 0
        with pytest.raises(ZeroDivisionError):
            relative_error(1.0, 0.0)


def _fixture_report():
    rng = np.random.default_rng(3)
    recs = []
    for i in range(10):
        bgd = float(rng.uniform(1, 100))
        recs.append(
            CostRecord(f"s{i}", 4 + i % 3, 1.0, bgd, bgd * float(rng.uniform(1, 3)), bgd * float(rng.uniform(0.8, 2)),
                       None if i % 4 == 0 else bgd * float(rng.uniform(0.9, 2)))
        )
    return CostReport(recs)


class TestReport:
    def test_means_match_hand_computation(self):
        rep = _fixture_report()
        for method in ("T", "MLP", "TVP"):
            vals = []
            for r in rep.records:
                J = getattr(r, "J_" + method)
                if J is not None:
                    vals.append(100 * (J ** (1 / 7) - r.J_BGD ** (1 / 7)) / r.J_BGD ** (1 / 7))
            agg = rep.aggregate()[method]
            assert agg["count"] == len(vals)
            assert agg["mean"] == pytest.approx(statistics.fmean(vals), rel=1e-12)
            assert agg["std"] == pytest.approx(statistics.pstdev(vals), rel=1e-9)
            assert agg["fraction_negative"] == sum(v < 0 for v in vals) / len(vals)

    def test_csv_marks_absent(self, tmp_path):
        rep = _fixture_report()
        path = rep.write_csv(tmp_path / "r.csv")
        with path.open() as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["sample_id", "N", "J_BGD", "J_T", "J_MLP", "J_TVP", "E_T", "E_MLP", "E_TVP"]
        assert rows[0]["J_MLP"] == "" and rows[0]["E_MLP"] == ""
        back = read_report_csv(path)
        assert back.aggregate()["MLP"]["count"] == 7
        assert back.mean("T") == pytest.approx(rep.mean("T"), rel=1e-12)

    def test_summary_carries_reference(self, tmp_path):
        import json

        doc = json.loads(_fixture_report().write_summary(tmp_path / "s.json").read_text())
        assert doc["reference"]["E_T_mean"] == 15.7
        assert set(REFERENCE_RESULTS.values()) >= {15.7, 21.4, 50.7, 10.7, 42.7, 22.6}


class TestEvaluate:
    def test_protocol(self, data):
        model = AllocationModel(TOY, seed=1)
        rep = evaluate_methods(data, model)
        assert len(rep.records) == len(data)
        for r, s in zip(rep.records, data):
            path = sample_path(s)
            T = tvp_allocate(path).total_time
            assert r.T == pytest.approx(T, rel=1e-12)
            # descent starts from the trapezoidal allocation and never increases cost
            assert r.error("TVP") >= -1e-6
            assert all(J >= 0 for J in (r.J_BGD, r.J_T, r.J_TVP))
            assert r.J_MLP is None
        agg = rep.aggregate()
        assert agg["MLP"] is None and np.isfinite(agg["T"]["mean"])

    def test_stored_label_equals_recomputed(self, data):
        a = prepare_baselines(data[:6])
        b = prepare_baselines(data[:6], recompute=True)
        for x, y in zip(a, b):
            assert x.J_BGD == pytest.approx(y.J_BGD, rel=1e-9)

    def test_rebuilt_path_keeps_scale(self, rng):
        path = WaypointPath(random_path(rng, 7))
        rebuilt = sample_path(type("S", (), {"range_angle": to_range_angle(path)})())
        assert_allclose(rebuilt.segment_lengths(), path.segment_lengths(), rtol=1e-12)

    def test_mlp_column(self, data):
        bank, _ = train_bank([s for s in data if s.n in (3, 4)], [], TrainConfig(epochs=2), hidden=(8,))
        rep = evaluate_methods(data, None, bank)
        for r in rep.records:
            assert (r.J_MLP is None) == (r.N not in (3, 4))
            assert r.J_T is None

    def test_deterministic(self, data):
        model = AllocationModel(TOY, seed=1)
        a = evaluate_methods(data, model)
        b = evaluate_methods(data, model)
        assert [r.row() for r in a.records] == [r.row() for r in b.records]

    def test_ood(self):
        curves = synth_curves(SynthConfig(seed=12), 2)
        big = build_dataset(curves, [16]).samples
        model = AllocationModel(TOY, seed=1)
        rep = ood_eval(model, big, trained_max_n=12)
        assert len(rep.records) == len(big)
        assert np.isfinite(rep.mean("T"))
        with pytest.raises(ValueError):
            ood_eval(model, big, trained_max_n=16)


class TestHistogram:
    def test_known_values(self):
        vals = np.arange(100, dtype=float)
        rep = CostReport([CostRecord(str(i), 3, 1.0, 1.0, 1.0, (1 + v / 100) ** 7) for i, v in enumerate(vals)])
        h = histogram(rep, bins=10, methods=["T"])
        e = rep.errors("T")
        assert_allclose(e, vals, atol=1e-9)
        lo, hi = e.min(), e.max()
        assert_allclose(h.edges, lo + (hi - lo) * np.arange(11) / 10)
        expected = [0] * 10
        for v in e:
            expected[min(int((v - lo) / ((hi - lo) / 10)), 9)] += 1
        assert h.counts["T"].tolist() == expected

    def test_conserves_counts(self):
        rep = _fixture_report()
        h = histogram(rep, bins=7)
        assert h.counts["T"].sum() == 10 and h.counts["MLP"].sum() == 7

    def test_identical_values(self):
        rep = CostReport([CostRecord(str(i), 3, 1.0, 2.0, 2.0, 2.0) for i in range(5)])
        h = histogram(rep, bins=5, methods=["T"])
        assert np.count_nonzero(h.counts["T"]) == 1 and h.counts["T"].sum() == 5

    def test_export(self, tmp_path):
        c, s = histogram_export(_fixture_report(), tmp_path, bins=6)
        assert len(c.read_text().splitlines()) == 7
        ET.parse(s)

    def test_empty(self):
        with pytest.raises(ValueError):
            histogram(CostReport([]))


class TestSweep:
    def test_sweep(self, data):
        cfg = TrainConfig(epochs=2)
        rep = sample_efficiency_sweep(data, [], [0.3, 0.6, 1.0], TOY, cfg, data[:8], seed=3)
        assert [f for f, _ in rep.points] == [0.3, 0.6, 1.0]
        assert all(np.isfinite(e) for _, e in rep.points)
        from snapalloc.evalkit import evaluate_methods as ev
        from snapalloc.seqmodel.train import train

        full = AllocationModel(TOY)
        train(full, data, [], cfg)
        assert rep.points[-1][1] == ev(data[:8], full).mean("T")

    def test_validation(self, data):
        with pytest.raises(ValueError):
            sample_efficiency_sweep(data, [], [0.5, 1.0], TOY, TrainConfig(epochs=1), data[:2])
        with pytest.raises(ValueError):
            sample_efficiency_sweep(data, [], [1.0, 0.5, 0.2], TOY, TrainConfig(epochs=1), data[:2])


class TestAttention:
    def test_uniform_band(self):
        m = 6
        rec = AttentionRecord(cross=[np.full((2, 3, m, m), 1.0 / m)])
        s = attention_summary([rec])
        for k, (mass, uni) in s.band.items():
            assert mass == pytest.approx(uni)
            assert uni == pytest.approx(uniform_band_mass(m, m, k))
        assert uniform_band_mass(4, 4, 1) == pytest.approx(10 / 16)

    def test_identity_band(self):
        rec = AttentionRecord(cross=[np.eye(5)[None, None]])
        assert attention_summary([rec]).band[1][0] == pytest.approx(1.0)
        assert band_mass(np.eye(5), 0) == 1.0

    def test_model_records(self, data, tmp_path):
        model = AllocationModel(TOY, seed=2)
        recs = collect_attention(model, data)
        s = attention_summary(recs)
        assert s.max_row_error <= 1e-5
        for layer in s.mean_maps.values():
            for a in layer.values():
                assert_allclose(a.sum(axis=1), 1.0, atol=1e-5)
        files = attention_export(s, tmp_path)
        assert (tmp_path / "attention_band.csv").exists()
        for f in files:
            if f.suffix == ".svg":
                ET.parse(f)


def test_run_manifest(tmp_path):
    f = tmp_path / "x.txt"
    f.write_text("abc")
    import hashlib
    import json

    doc = json.loads(write_run_manifest(tmp_path / "m.json", {"seed": 1}, {"x": f}).read_text())
    assert doc["files"]["x"]["sha256"] == hashlib.sha256(b"abc").hexdigest()
    assert doc["seeds"] == {"seed": 1}
