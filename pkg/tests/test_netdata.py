import json

import numpy as np
import pytest

from synlik.errors import ConsistencyError, NotIpdStudy, SchemaError
from synlik.models.nmr import StudyKind, subgroup_logor_diff
from synlik.netdata import (
    MaskMode,
    SimConfig,
    build_integration_grid,
    example_sim_config,
    load_network,
    mask_study,
    save_network,
    simulate_network,
)


@pytest.fixture(scope="module")
def sim_pair():
    return simulate_network(example_sim_config(n_per_study=200, K=8, seed=13))


class TestSimulate:
    def test_reproducible_bitwise(self):
        cfg = example_sim_config(n_per_study=50, seed=5)
        a, ta = simulate_network(cfg)
        b, tb = simulate_network(cfg)
        assert np.array_equal(ta.pack(), tb.pack())
        for sa, sb in zip(a.studies, b.studies):
            assert np.array_equal(sa.ipd_y, sb.ipd_y)
            assert np.array_equal(sa.ipd_x, sb.ipd_x)
            assert sa.ipd_trt == sb.ipd_trt

    def test_zero_theta_gives_half_event_rate(self):
        cfg = example_sim_config(n_per_study=2000, seed=1)
        cfg.true_mu = [0.0, 0.0, 0.0]
        cfg.true_gamma = [0.0, 0.0]
        cfg.true_beta1 = [0.0, 0.0, 0.0]
        cfg.true_beta2 = [[0.0, 0.0, 0.0]]
        net, _ = simulate_network(cfg)
        pooled = np.concatenate([s.ipd_y for s in net.studies])
        se = 0.5 / np.sqrt(pooled.size)
        assert abs(pooled.mean() - 0.5) < 4 * se

    def test_huge_effect_saturates_response(self):
        cfg = example_sim_config(n_per_study=500, seed=2)
        cfg.true_gamma = [30.0, 30.0]
        net, _ = simulate_network(cfg)
        s = net.studies[0]
        on_trt = np.asarray([t != "REF" for t in s.ipd_trt])
        assert np.asarray(s.ipd_y)[on_trt].mean() > 0.97

    def test_large_sample_log_or_matches_gamma(self):
        # two-arm binomial at centered covariates: empirical log-OR ~ gamma
        cfg = example_sim_config(n_per_study=20_000, seed=3)
        cfg.true_beta2 = [[0.0, 0.0, 0.0]]
        cfg.true_beta1 = [0.0, 0.0, 0.0]
        cfg.studies = cfg.studies[:1]
        cfg.true_mu = [cfg.true_mu[0]]
        cfg.studies[0].arms = ["REF", "TRT_B"]
        net, theta = simulate_network(cfg)
        s = net.studies[0]
        y = np.asarray(s.ipd_y)
        trt = np.asarray(s.ipd_trt)
        tab = {}
        for arm in ("REF", "TRT_B"):
            rows = trt == arm
            tab[arm] = (np.sum(y[rows] == 1), np.sum(y[rows] == 0))
        log_or = np.log(tab["TRT_B"][0] * tab["REF"][1] / (tab["TRT_B"][1] * tab["REF"][0]))
        a, b = tab["TRT_B"]
        c, d = tab["REF"]
        se = np.sqrt(1 / a + 1 / b + 1 / c + 1 / d)
        assert abs(log_or - theta.gamma[0]) < 3 * se

    def test_masking_plan_must_name_existing_study(self):
        cfg = example_sim_config().to_dict()
        cfg["masking"] = {"study": "study_99", "mode": "drop_covariates"}
        with pytest.raises(SchemaError):
            SimConfig.from_dict(cfg)


class TestMasking:
    def test_counts_preserved(self, sim_pair):
        net, _ = sim_pair
        masked = mask_study(net, "study_2", MaskMode.DROP_COVARIATES)
        s = masked.study("study_2")
        assert s.kind is StudyKind.PARTIAL_IPD
        assert s.ipd_x is None and s.ipd_y is None
        orig = net.study("study_2")
        tally = {}
        for yi, ti in zip(orig.ipd_y, orig.ipd_trt):
            tally[(int(yi), ti)] = tally.get((int(yi), ti), 0) + 1
        assert s.agg_counts == tally

    def test_other_studies_untouched(self, sim_pair):
        net, _ = sim_pair
        masked = mask_study(net, "study_2", MaskMode.DROP_COVARIATES)
        assert masked.study("study_1").kind is StudyKind.FULL_IPD
        assert np.array_equal(masked.study("study_1").ipd_x, net.study("study_1").ipd_x)

    def test_subgroup_mode_dimension(self, sim_pair):
        net, _ = sim_pair
        masked = mask_study(net, "study_3", MaskMode.DROP_COVARIATES_KEEP_SUBGROUPS)
        s = masked.study("study_3")
        assert s.kind is StudyKind.PARTIAL_IPD_SUBGROUPS
        # 2 non-reference arms x 3 covariate splits
        assert s.subgroup_summaries.dimension == 6

    def test_subgroup_values_match_independent_tabulation(self, sim_pair):
        net, _ = sim_pair
        masked = mask_study(net, "study_3", MaskMode.DROP_COVARIATES_KEEP_SUBGROUPS)
        entries = masked.study("study_3").subgroup_summaries.entries
        orig = net.study("study_3")
        y = np.asarray(orig.ipd_y)
        trt = np.asarray(orig.ipd_trt)
        cov_idx = {c.name: p for p, c in enumerate(net.covariates)}
        for e in entries:
            x = orig.ipd_x[:, cov_idx[e.covariate]]
            high = x > e.threshold
            table = np.zeros((2, 2, 2))
            for g, grp in enumerate((high, ~high)):
                for a, arm in enumerate((e.treatment, "REF")):
                    rows = grp & (trt == arm)
                    table[g, a, 0] = np.sum(y[rows] == 1)
                    table[g, a, 1] = np.sum(y[rows] == 0)
            assert e.value == pytest.approx(subgroup_logor_diff(table), rel=1e-12)

    def test_cannot_mask_aggregate_study(self, sim_pair):
        net, _ = sim_pair
        masked = mask_study(net, "study_1", MaskMode.DROP_COVARIATES)
        with pytest.raises(NotIpdStudy):
            mask_study(masked, "study_1", MaskMode.DROP_COVARIATES)

    def test_grid_uses_model_scale(self, sim_pair):
        net, _ = sim_pair
        masked = mask_study(net, "study_3", MaskMode.DROP_COVARIATES, K=16)
        grid = masked.study("study_3").integration_grid
        assert grid.shape == (16, 3)
        # binary coordinate is exact 0/1 before centering
        center = masked.covariates[2].center
        assert set(np.round(grid[:, 2] + center, 9).tolist()) <= {0.0, 1.0}


class TestGrid:
    def test_respects_marginal_moments(self):
        from synlik.models.nmr import CovariateSpec

        covs = [CovariateSpec("a", "continuous", divisor=1.0, center=0.0),
                CovariateSpec("b", "binary", divisor=1.0, center=0.0)]
        moments = {"a": {"mean": 3.0, "sd": 2.0}, "b": {"prevalence": 0.25}}
        grid = build_integration_grid(covs, moments, 256)
        assert abs(grid[:, 0].mean() - 3.0) < 0.1
        assert abs(grid[:, 0].std() - 2.0) < 0.1
        assert abs(grid[:, 1].mean() - 0.25) < 0.05

    def test_gaussian_copula_induces_correlation(self):
        from synlik.models.nmr import CovariateSpec

        covs = [CovariateSpec("a", "continuous"), CovariateSpec("b", "continuous")]
        moments = {"a": {"mean": 0.0, "sd": 1.0}, "b": {"mean": 0.0, "sd": 1.0}}
        corr = np.array([[1.0, 0.8], [0.8, 1.0]])
        grid = build_integration_grid(covs, moments, 512, correlation=corr)
        got = np.corrcoef(grid.T)[0, 1]
        assert abs(got - 0.8) < 0.1


class TestRoundTrip:
    def test_save_load_structurally_equal(self, sim_pair, tmp_path):
        net, _ = sim_pair
        masked = mask_study(net, "study_3", MaskMode.DROP_COVARIATES_KEEP_SUBGROUPS)
        save_network(masked, tmp_path / "n1")
        again = load_network(tmp_path / "n1")
        save_network(again, tmp_path / "n2")
        assert (tmp_path / "n1" / "network.json").read_text() == \
            (tmp_path / "n2" / "network.json").read_text()
        for s in ("study_1", "study_2"):
            assert (tmp_path / "n1" / f"{s}.csv").read_text() == \
                (tmp_path / "n2" / f"{s}.csv").read_text()

    def test_minimal_network_loads(self, tmp_path):
        doc = {
            "treatments": [{"name": "REF", "reference": True}, {"name": "A"}],
            "covariates": [{"name": "x1", "kind": "continuous"}],
            "default_K": 4,
            "studies": [{
                "id": "s1", "kind": "partial_ipd",
                "agg_counts": [{"y": 1, "trt": "A", "n": 3}, {"y": 0, "trt": "A", "n": 7},
                                {"y": 1, "trt": "REF", "n": 2}, {"y": 0, "trt": "REF", "n": 8}],
                "covariate_moments": {"x1": {"mean": 0.0, "sd": 1.0}},
            }],
        }
        (tmp_path / "network.json").write_text(json.dumps(doc))
        net = load_network(tmp_path)
        assert net.study("s1").integration_grid.shape == (4, 1)

    def test_undeclared_treatment_rejected(self, tmp_path):
        doc = {
            "treatments": [{"name": "REF", "reference": True}],
            "covariates": [],
            "studies": [{
                "id": "s1", "kind": "partial_ipd",
                "agg_counts": [{"y": 1, "trt": "GHOST", "n": 3}],
                "covariate_moments": {},
            }],
        }
        (tmp_path / "network.json").write_text(json.dumps(doc))
        with pytest.raises(SchemaError, match="GHOST"):
            load_network(tmp_path)

    def test_count_mismatch_names_cell(self, sim_pair, tmp_path):
        net, _ = sim_pair
        save_network(net, tmp_path)
        doc = json.loads((tmp_path / "network.json").read_text())
        for row in doc["studies"][0]["agg_counts"]:
            if row["y"] == 1 and row["trt"] == "TRT_B":
                row["n"] += 1
        (tmp_path / "network.json").write_text(json.dumps(doc))
        with pytest.raises(ConsistencyError, match=r"y=1.*TRT_B|TRT_B.*y=1"):
            load_network(tmp_path)

    def test_two_references_rejected(self, tmp_path):
        doc = {
            "treatments": [{"name": "A", "reference": True}, {"name": "B", "reference": True}],
            "covariates": [], "studies": [],
        }
        (tmp_path / "network.json").write_text(json.dumps(doc))
        with pytest.raises(SchemaError, match="reference"):
            load_network(tmp_path)

    def test_sim_config_round_trip(self):
        cfg = example_sim_config(seed=9)
        again = SimConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again.to_dict() == cfg.to_dict()
