"""
Unit tests for the utils modules of depth-trace: numerics, trajectories,
residual probes, effective depth, reports and charts.
"""
import itertools
import json
import math
import sys
from pathlib import Path

import numpy as np
import pytest

PROJECT_ROOT = Path(__file__).resolve().parents[1]
sys.path.append(str(PROJECT_ROOT))

# =========================
# utils/numerics.py
# =========================

from utils.errors import (
    NonFiniteError,
    ParameterError,
    ReportError,
    SchemaError,
    ShapeError,
)
from utils.numerics import (
    as_tensor,
    cosine_similarity,
    kl_divergence,
    matmul,
    rmsnorm,
    softmax,
    topk,
    topk_rows,
)


class TestMatmul:
    def test_matches_triple_loop(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((8, 8)).astype(np.float32)
        b = rng.standard_normal((8, 8)).astype(np.float32)
        expected = np.zeros((8, 8), dtype=np.float64)
        for i in range(8):
            for j in range(8):
                for k in range(8):
                    expected[i, j] += float(a[i, k]) * float(b[k, j])
        np.testing.assert_allclose(matmul(a, b), expected.astype(np.float32), rtol=1e-6, atol=1e-6)

    def test_associative_within_tolerance(self):
        rng = np.random.default_rng(21)
        a, b, c = (rng.standard_normal((4, 4)).astype(np.float32) for _ in range(3))
        np.testing.assert_allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), rtol=1e-4, atol=1e-5)

    def test_inner_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3), np.float32), np.ones((2, 3), np.float32))

    def test_rejects_non_finite(self):
        a = np.array([[np.inf, 1.0]], dtype=np.float32)
        with pytest.raises(NonFiniteError):
            matmul(a, np.ones((2, 1), np.float32))


class TestAsTensor:
    def test_reshapes(self):
        t = as_tensor([1, 2, 3, 4, 5, 6], (2, 3))
        assert t.shape == (2, 3)
        assert t.dtype == np.float32

    def test_count_mismatch(self):
        with pytest.raises(ShapeError):
            as_tensor([1, 2, 3], (2, 2))

    def test_non_positive_dimension(self):
        with pytest.raises(ShapeError):
            as_tensor([], (0, 3))


class TestSoftmax:
    def test_matches_direct_evaluation(self):
        x = np.array([1.0, 2.0, 3.0], dtype=np.float32)
        e = np.exp(np.array([1.0, 2.0, 3.0]) - 3.0)
        np.testing.assert_allclose(softmax(x), e / e.sum(), atol=1e-7)

    def test_large_values_are_stable(self):
        p = softmax(np.array([1000.0, 1000.0], dtype=np.float32))
        np.testing.assert_allclose(p, [0.5, 0.5])

    def test_mask_zeroes_dropped_entries(self):
        p = softmax(np.array([1.0, 5.0, 1.0], dtype=np.float32), mask=np.array([True, False, True]))
        assert p[1] == 0.0
        np.testing.assert_allclose(p[[0, 2]], [0.5, 0.5])

    def test_empty_vector(self):
        with pytest.raises(ShapeError):
            softmax(np.array([], dtype=np.float32))

    def test_fully_masked_row(self):
        with pytest.raises(ShapeError):
            softmax(np.ones(3, np.float32), mask=np.zeros(3, dtype=bool))


class TestRmsnorm:
    def test_hand_example(self):
        y = rmsnorm(np.array([3.0, 4.0], np.float32), np.ones(2, np.float32), 0.0)
        np.testing.assert_allclose(y, [0.8485, 1.1314], atol=1e-4)

    def test_unit_rms_with_unit_gain(self):
        x = np.random.default_rng(22).standard_normal(16).astype(np.float32)
        y = rmsnorm(x, np.ones(16, np.float32), 1e-12).astype(np.float64)
        assert math.sqrt(np.mean(y * y)) == pytest.approx(1.0, abs=1e-5)

    def test_zero_vector_with_eps_zero_fails(self):
        with pytest.raises(NonFiniteError):
            rmsnorm(np.zeros(2, np.float32), np.ones(2, np.float32), 0.0)

    def test_negative_eps(self):
        with pytest.raises(ParameterError):
            rmsnorm(np.ones(2, np.float32), np.ones(2, np.float32), -1.0)


class TestTopk:
    def test_matches_full_sort(self):
        v = np.random.default_rng(11).standard_normal(16).astype(np.float32)
        result = topk(v, 4)
        expected = np.argsort(-v)[:4]
        assert result.indices.tolist() == expected.tolist()
        np.testing.assert_array_equal(result.values, v[expected])

    def test_ties_go_to_lowest_index(self):
        assert topk(np.array([1.0, 3.0, 3.0, 0.0], np.float32), 2).indices.tolist() == [1, 2]
        assert topk_rows(np.array([[2.0, 2.0, 2.0]], np.float32), 1).tolist() == [[0]]

    def test_k_out_of_range(self):
        with pytest.raises(ParameterError):
            topk(np.ones(3, np.float32), 4)
        with pytest.raises(ParameterError):
            topk(np.ones(3, np.float32), 0)


class TestCosineSimilarity:
    def test_trivial_values(self):
        x = np.array([1.0, 0.0], np.float32)
        assert cosine_similarity(x, x).value == pytest.approx(1.0)
        assert cosine_similarity(x, -x).value == pytest.approx(-1.0)
        assert cosine_similarity(x, np.array([0.0, 1.0], np.float32)).value == pytest.approx(0.0)

    def test_symmetric_and_scale_invariant(self):
        rng = np.random.default_rng(23)
        x = rng.standard_normal(12).astype(np.float32)
        y = rng.standard_normal(12).astype(np.float32)
        base = cosine_similarity(x, y).value
        assert cosine_similarity(y, x).value == pytest.approx(base, abs=1e-6)
        for a, b in ((2.5, 0.3), (-1.5, 4.0), (-0.5, -7.0)):
            scaled = cosine_similarity((a * x).astype(np.float32), (b * y).astype(np.float32)).value
            assert scaled == pytest.approx(math.copysign(1.0, a * b) * base, abs=1e-6)

    def test_zero_vector_is_degenerate(self):
        result = cosine_similarity(np.zeros(3, np.float32), np.ones(3, np.float32))
        assert result.value == 0.0
        assert result.degenerate is True

    def test_rows(self):
        x = np.array([[1.0, 0.0], [0.0, 0.0]], np.float32)
        result = cosine_similarity(x, np.array([[2.0, 0.0], [1.0, 1.0]], np.float32))
        assert result.value.tolist() == [1.0, 0.0]
        assert result.degenerate.tolist() == [False, True]


class TestKlDivergence:
    def test_identical_is_zero(self):
        p = np.array([0.2, 0.3, 0.5], np.float32)
        assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-9)

    def test_known_value(self):
        p = np.array([0.5, 0.5])
        q = np.array([0.25, 0.75])
        expected = 0.5 * math.log(2.0) + 0.5 * math.log(0.5 / 0.75)
        assert kl_divergence(p, q) == pytest.approx(expected, rel=1e-9)

    def test_rejects_non_distribution(self):
        with pytest.raises(ParameterError):
            kl_divergence(np.array([0.5, 0.6]), np.array([0.5, 0.5]))


# =========================
# utils/trajectory.py
# =========================

from utils.trajectory import (
    MIN_VOCAB,
    ROLE_MARKERS,
    Segment,
    Trajectory,
    Turn,
    detokenize,
    load_trajectory,
    prefix_for_turn,
    save_trajectory,
    synthesize,
    tokenize,
)


def two_turn_trajectory():
    return Trajectory(
        "code_generation",
        (
            Turn(1, (Segment("user", "ab"), Segment("assistant", "c"))),
            Turn(2, (Segment("user", "dé"),)),
        ),
    )


class TestTokenize:
    def test_offsets_and_markers(self):
        tok = tokenize(two_turn_trajectory(), MIN_VOCAB)
        assert tok.tokens[:5] == (ROLE_MARKERS["user"], 97, 98, ROLE_MARKERS["assistant"], 99)
        # "é" is two UTF-8 bytes
        assert tok.turn_offsets == (5, 9)
        assert tok.segment_spans[0] == ("user", 0, 3)

    def test_boundaries_and_prefix(self):
        tok = tokenize(two_turn_trajectory(), MIN_VOCAB)
        assert tok.boundary(1) == 4
        assert tok.boundaries() == (4, 8)
        assert len(prefix_for_turn(tok, 1)) == 5
        assert prefix_for_turn(tok, 2) == tok.tokens

    def test_turn_out_of_range(self):
        tok = tokenize(two_turn_trajectory(), MIN_VOCAB)
        with pytest.raises(ParameterError):
            prefix_for_turn(tok, 3)
        with pytest.raises(ParameterError):
            prefix_for_turn(tok, 0)

    def test_vocab_too_small(self):
        with pytest.raises(ParameterError):
            tokenize(two_turn_trajectory(), 256)

    def test_detokenize_restores_transcript(self):
        trajectory = two_turn_trajectory()
        assert detokenize(tokenize(trajectory, MIN_VOCAB)) == trajectory


class TestTrajectorySchema:
    def test_unknown_kind_reports_path(self):
        data = two_turn_trajectory().to_dict()
        data["turns"][0]["segments"][1]["kind"] = "tool"
        with pytest.raises(SchemaError) as excinfo:
            Trajectory.from_dict(data)
        assert excinfo.value.path == "turns[0].segments[1].kind"

    def test_unknown_domain_is_rejected(self):
        data = two_turn_trajectory().to_dict()
        data["domain"] = "astrology"
        with pytest.raises(SchemaError) as excinfo:
            Trajectory.from_dict(data)
        assert excinfo.value.path == "domain"
        assert "astrology" in str(excinfo.value)

    def test_missing_turns(self):
        with pytest.raises(SchemaError) as excinfo:
            Trajectory.from_dict({"domain": "x"})
        assert excinfo.value.path == "turns"

    def test_turn_indices_must_count_from_one(self):
        with pytest.raises(SchemaError):
            Trajectory("code_generation", (Turn(2, (Segment("user", "a"),)),))

    def test_save_and_load(self, tmp_path):
        trajectory = synthesize("deep_research", 2, 5)
        path = save_trajectory(trajectory, tmp_path / "t.json")
        assert load_trajectory(path) == trajectory

    def test_load_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(SchemaError):
            load_trajectory(path)

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_trajectory(tmp_path / "missing.json")


class TestSynthesize:
    def test_deterministic(self):
        assert synthesize("code_generation", 4, 7) == synthesize("code_generation", 4, 7)
        assert synthesize("code_generation", 4, 7) != synthesize("code_generation", 4, 8)

    def test_turn_structure(self):
        trajectory = synthesize("tabular_processing", 3, 0)
        assert trajectory.n_turns == 3
        for turn in trajectory.turns:
            kinds = [s.kind for s in turn.segments]
            assert kinds == ["user", "thought", "action", "observation", "assistant"]

    def test_later_turns_reuse_first_artifact(self):
        trajectory = synthesize("code_generation", 4, 2)
        first = trajectory.metadata["first_artifact"]
        for turn in trajectory.turns[1:]:
            assert first in turn.segments[0].text

    def test_bad_arguments(self):
        with pytest.raises(ParameterError):
            synthesize("poetry", 2, 0)
        with pytest.raises(ParameterError):
            synthesize("deep_research", 0, 0)


# =========================
# utils/probes.py
# =========================

import utils.probes as probes
from utils.probes import (
    AMPLIFICATION,
    CORRECTION,
    INJECTION,
    aggregate_positions,
    classify_regime,
    count_phase_changes,
    regime_histogram,
)


class TestClassifyRegime:
    def test_bands(self):
        assert classify_regime(0.3) == AMPLIFICATION
        assert classify_regime(-0.3) == CORRECTION
        assert classify_regime(0.05) == INJECTION
        assert classify_regime(-0.05) == INJECTION
        assert classify_regime(float("nan")) == INJECTION

    def test_tau_must_be_positive(self):
        with pytest.raises(ParameterError):
            classify_regime(0.1, tau=0.0)


class TestPhaseChanges:
    def test_crossing_through_band_counts_once(self):
        assert count_phase_changes([0.3, 0.02, -0.3]) == 1

    def test_same_sign_around_band(self):
        assert count_phase_changes([0.3, 0.0, 0.3]) == 0

    def test_exhaustive_sequences(self):
        def oracle(seq):
            signs = [int(np.sign(x)) for x in seq if abs(x) > 0.05]
            return int(np.count_nonzero(np.diff(signs))) if len(signs) > 1 else 0

        alphabet = (-0.3, -0.04, 0.0, 0.04, 0.3)
        for length in range(1, 6):
            for seq in itertools.product(alphabet, repeat=length):
                assert count_phase_changes(seq) == oracle(seq), seq

    def test_histogram(self):
        assert regime_histogram([0.3, 0.0, -0.3, -0.2]) == {INJECTION: 1, AMPLIFICATION: 1, CORRECTION: 2}


class TestAggregatePositions:
    def test_mean_and_median_skip_dropped(self):
        values = np.array([[1.0, 2.0, 9.0], [0.0, 0.0, 0.0]])
        keep = np.array([[True, True, False], [False, False, False]])
        mean = aggregate_positions(values, keep, "mean")
        assert mean[0] == pytest.approx(1.5)
        assert math.isnan(mean[1])
        median = aggregate_positions(np.array([[1.0, 2.0, 9.0]]), np.ones((1, 3), bool), "median")
        assert median[0] == pytest.approx(2.0)

    def test_unknown_method(self):
        with pytest.raises(ParameterError):
            aggregate_positions(np.zeros((1, 1)), np.ones((1, 1), bool), "max")


class TestProbeDefaults:
    def test_shipped_defaults(self):
        defaults = probes.load_probe_defaults()
        assert defaults["tau"] == 0.05
        assert defaults["kl_fraction"] == 0.5
        assert defaults["overlap_threshold"] == 0.3
        assert defaults["overlap_top_k"] == 5

    def test_missing_file(self, monkeypatch, tmp_path):
        monkeypatch.setattr(probes, "PROBE_DEFAULTS_PATH", tmp_path / "none.json")
        with pytest.raises(FileNotFoundError):
            probes.load_probe_defaults()


# =========================
# utils/effective_depth.py
# =========================

from utils.effective_depth import (
    BOUNDARY,
    EffectiveDepthReport,
    DEGENERATE,
    NEVER,
    NEVER_NEGATIVE,
    RatioCell,
    average_curves,
    build_report,
    depth_ratio,
    effective_depth_cosine,
    effective_depth_kl,
    effective_depth_overlap,
    effective_depth_report,
    reconcile_ratios,
)

# (model, L, domain) -> {criterion: (ED, tabulated ratio)}
PUBLISHED_DEPTHS = {
    ("Qwen3-Instruct", 48): {
        "deep_research": {"cosine": (19, 0.40), "kl": (44, 0.92), "overlap": (45, 0.94)},
        "code_generation": {"cosine": (20, 0.42), "kl": (44, 0.92), "overlap": (45, 0.94)},
        "tabular_processing": {"cosine": (19, 0.40), "kl": (45, 0.94), "overlap": (46, 0.96)},
    },
    ("Qwen3-Thinking", 48): {
        "deep_research": {"cosine": (19, 0.40), "kl": (44, 0.92), "overlap": (45, 0.94)},
        "code_generation": {"cosine": (20, 0.42), "kl": (44, 0.92), "overlap": (45, 0.94)},
        "tabular_processing": {"cosine": (20, 0.42), "kl": (45, 0.94), "overlap": (47, 0.98)},
    },
    ("GLM-4.5-Air", 46): {
        "deep_research": {"cosine": (13, 0.28), "kl": (31, 0.67), "overlap": (36, 0.78)},
        "code_generation": {"cosine": (34, 0.74), "kl": (32, 0.70), "overlap": (39, 0.85)},
        "tabular_processing": {"cosine": (34, 0.74), "kl": (36, 0.78), "overlap": (41, 0.89)},
    },
    ("Minimax-M2", 62): {
        "deep_research": {"cosine": (16, 0.26), "kl": (55, 0.89), "overlap": (62, 1.00)},
        "code_generation": {"cosine": (29, 0.47), "kl": (56, 0.90), "overlap": (62, 1.00)},
        "tabular_processing": {"cosine": (20, 0.32), "kl": (58, 0.94), "overlap": (62, 1.00)},
    },
}


def published_cells():
    for (model, n_layers), domains in PUBLISHED_DEPTHS.items():
        for domain, criteria in domains.items():
            for criterion, (ed, ratio) in criteria.items():
                yield RatioCell(f"{model}/{domain}/{criterion}", ed, n_layers, ratio)


class TestEffectiveDepthCosine:
    def test_final_transition_wins(self):
        assert effective_depth_cosine([0.2, -0.1, 0.3, -0.2, 0.5]) == (4, None)

    def test_never_negative(self):
        assert effective_depth_cosine([0.1, 0.2]) == (0, NEVER_NEGATIVE)

    def test_negative_last_layer(self):
        assert effective_depth_cosine([0.1, -0.2]) == (2, BOUNDARY)

    def test_nan_layers_are_ignored(self):
        assert effective_depth_cosine([-0.1, float("nan"), 0.2]) == (1, None)


class TestEffectiveDepthKl:
    def test_half_of_maximum(self):
        assert effective_depth_kl([2, 5, 4, 2, 0.5, 0.1]) == (3, None)

    def test_hand_examples(self):
        assert effective_depth_kl([4, 3, 2, 1, 0]) == (2, None)
        assert effective_depth_kl([1, 1, 1, 1]) == (3, NEVER)

    def test_scaling_the_curve_keeps_the_depth(self):
        curve = [2, 5, 4, 2, 0.5, 0.1]
        assert effective_depth_kl([7.0 * v for v in curve]) == effective_depth_kl(curve)

    def test_all_zero_is_degenerate(self):
        assert effective_depth_kl([0.0, 0.0, 0.0]) == (0, DEGENERATE)

    def test_bad_input(self):
        with pytest.raises(ParameterError):
            effective_depth_kl([])
        with pytest.raises(ParameterError):
            effective_depth_kl([1.0, -0.1])
        with pytest.raises(ParameterError):
            effective_depth_kl([1.0], fraction=1.5)


class TestEffectiveDepthOverlap:
    def test_strict_threshold(self):
        assert effective_depth_overlap([0.0, 0.2, 0.4, 0.6]) == (2, None)
        assert effective_depth_overlap([0.3, 0.4]) == (1, None)

    def test_immediate_convergence(self):
        assert effective_depth_overlap([1.0, 1.0, 1.0]) == (0, None)

    def test_never_reached(self):
        assert effective_depth_overlap([0.0, 0.2, 0.3]) == (2, NEVER)


class TestDepthRatio:
    def test_published_examples(self):
        assert f"{depth_ratio(19, 48):.2f}" == "0.40"
        assert f"{depth_ratio(13, 46):.2f}" == "0.28"
        assert depth_ratio(62, 62) == 1.0

    def test_alias_and_plus_one(self):
        assert depth_ratio(19, 48, "ed_plus1_over_L") == pytest.approx(20 / 48)
        assert depth_ratio(19, 48, "ed_over_L") == depth_ratio(19, 48, "ed")

    def test_bounds(self):
        with pytest.raises(ParameterError):
            depth_ratio(49, 48)
        with pytest.raises(ParameterError):
            depth_ratio(1, 0)
        with pytest.raises(ParameterError):
            depth_ratio(1, 4, "ed-minus-1")


class TestReconcileRatios:
    def test_ed_over_l_reproduces_every_published_cell(self):
        cells = list(published_cells())
        assert len(cells) == 36
        failures = reconcile_ratios(cells)
        assert failures["ed"] == []

    def test_plus_one_convention_misses_cells(self):
        failures = reconcile_ratios(published_cells())
        assert "Qwen3-Instruct/deep_research/cosine" in failures["ed-plus-1"]


class TestEffectiveDepthReport:
    def test_curves_to_report(self):
        report = effective_depth_report(
            "m", "code_generation",
            [0.2, -0.1, 0.3, -0.2], [2.0, 5.0, 2.0, 0.0], [0.0, 0.2, 0.4, 1.0],
        )
        assert report.ed == {"cosine": 4, "kl": 2, "overlap": 2}
        assert report.flags["cosine"] == BOUNDARY
        assert report.ratios["cosine"] == 1.0
        assert report.gap_kl == pytest.approx(0.5 - 1.0)

    def test_convention_mismatch_is_listed(self):
        report = build_report("q", "d", 48, {"cosine": (19, None), "kl": (44, None), "overlap": (45, None)})
        assert "cosine" in report.convention_mismatch
        assert report.alternate_ratios["cosine"] == pytest.approx(20 / 48)

    def test_dict_round_trip_keeps_values(self):
        report = build_report("q", "d", 48, {"cosine": (19, None), "kl": (44, NEVER), "overlap": (45, None)})
        again = EffectiveDepthReport.from_dict(json.loads(json.dumps(report.to_dict())))
        assert again == report

    def test_malformed_record(self):
        with pytest.raises(ReportError):
            EffectiveDepthReport.from_dict({"model": "q"})

    def test_mismatched_curves(self):
        with pytest.raises(ReportError):
            effective_depth_report("m", "d", [0.1, 0.2], [1.0], [0.1, 0.2])


class TestAverageCurves:
    def test_ignores_nan(self):
        out = average_curves([[1.0, float("nan")], [3.0, float("nan")], [float("nan"), float("nan")]])
        assert out[0] == pytest.approx(2.0)
        assert math.isnan(out[1])

    def test_empty(self):
        with pytest.raises(ReportError):
            average_curves([])


# =========================
# utils/storage.py
# =========================

from utils.storage import ed_table_rows, emit_ed_table, jsonable, load_report, read_csv, write_report


def published_reports(model="Qwen3-Instruct", n_layers=48):
    return [
        build_report(model, domain, n_layers, {c: (ed, None) for c, (ed, _) in criteria.items()})
        for domain, criteria in PUBLISHED_DEPTHS[(model, n_layers)].items()
    ]


class TestEdTable:
    def test_qwen_row_matches_published_ratios(self, tmp_path):
        path = emit_ed_table(published_reports(), tmp_path / "table.csv")
        rows = read_csv(path)
        assert len(rows) == 1
        row = rows[0]
        assert row["model"] == "Qwen3-Instruct"
        assert row["n_layers"] == "48"
        shown = [row[f"{c}.{d}.Ratio"] for c in ("cosine", "kl", "overlap")
                 for d in ("deep_research", "code_generation", "tabular_processing")]
        assert shown == ["0.40", "0.42", "0.40", "0.92", "0.92", "0.94", "0.94", "0.94", "0.96"]
        assert row["cosine.deep_research.ED"] == "19"

    def test_rows_per_model(self):
        header, rows = ed_table_rows(published_reports() + published_reports("GLM-4.5-Air", 46))
        assert [r[0] for r in rows] == ["Qwen3-Instruct", "GLM-4.5-Air"]
        assert header[:3] == ["model", "n_layers", "convention"]
        assert header[-1] == "flags"

    def test_inconsistent_layer_count(self):
        reports = published_reports()
        bad = build_report("Qwen3-Instruct", "other", 40, {c: (1, None) for c in ("cosine", "kl", "overlap")})
        with pytest.raises(ReportError):
            ed_table_rows(reports + [bad])

    def test_duplicate_cell(self):
        reports = published_reports()
        with pytest.raises(ReportError):
            ed_table_rows(reports + reports[:1])

    def test_mixed_conventions(self):
        other = build_report("x", "d", 4, {c: (1, None) for c in ("cosine", "kl", "overlap")}, convention="ed-plus-1")
        with pytest.raises(ReportError):
            ed_table_rows(published_reports() + [other])

    def test_empty(self):
        with pytest.raises(ReportError):
            ed_table_rows([])


class TestReportFiles:
    def test_write_and_load(self, tmp_path):
        report = published_reports()[0]
        path = write_report(report, tmp_path / "r.json")
        assert load_report(path) == report

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "r.json"
        path.write_text("[", encoding="utf-8")
        with pytest.raises(ReportError):
            load_report(path)


class TestJsonable:
    def test_nan_and_numpy(self):
        data = jsonable({"a": float("nan"), "b": np.float32(1.5), "c": (1, np.int64(2)), "d": np.array([0.5])})
        assert data == {"a": None, "b": 1.5, "c": [1, 2], "d": [0.5]}


# =========================
# utils/comparison.py
# =========================

from utils.comparison import TurnSummary, change_label, compare_trajectory, compare_turns, profile_distance


def summary(turn, effect, strong, reach, phases, profile):
    return TurnSummary(turn, effect, strong, reach, {"block": phases}, profile)


class TestCompareTurns:
    def test_deltas(self):
        result = compare_turns(summary(1, 0.1, 2, 1.0, 0, (0.1, 0.2)), summary(2, 0.3, 5, None, 2, (0.1, -0.2)))
        assert result["delta_mean_effect"] == pytest.approx(0.2)
        assert result["delta_strong_count"] == 3
        assert result["delta_mean_reach"] is None
        assert result["delta_phase_changes"] == {"block": 2}
        assert result["cosine_distance"] == pytest.approx(0.4)
        assert result["change"] == "significant"

    def test_labels(self):
        assert change_label(0.0) == "identical"
        assert change_label(0.05) == "slight"
        assert change_label(0.2) == "moderate"

    def test_distance_skips_nan(self):
        assert profile_distance((float("nan"), 1.0), (0.0, 0.5)) == pytest.approx(0.5)

    def test_trajectory_orders_turns(self):
        out = compare_trajectory([summary(2, 0.2, 1, 1.0, 1, (0.0,)), summary(1, 0.1, 0, None, 0, (0.0,))])
        assert [t["turn"] for t in out["turns"]] == [1, 2]
        assert out["transitions"][0]["from_turn"] == 1


# =========================
# utils/svg_charts.py
# =========================

from utils.svg_charts import diverging_scale, emit_bar_svg, emit_heatmap_svg, matrix_from_rows, sequential_scale


class TestSvgCharts:
    def test_single_cell_heatmap(self, tmp_path):
        path = emit_heatmap_svg(np.array([[0.5]]), diverging_scale(), tmp_path / "one.svg")
        text = path.read_text(encoding="utf-8")
        assert text.startswith("<svg")
        assert text.count('class="cell"') == 1

    def test_absent_cells_are_marked(self, tmp_path):
        matrix = np.array([[np.nan, 0.2], [np.nan, np.nan]])
        text = emit_heatmap_svg(matrix, sequential_scale(matrix), tmp_path / "fe.svg").read_text(encoding="utf-8")
        assert text.count('class="cell absent"') == 3
        assert text.count('class="cell"') == 1

    def test_same_input_same_bytes(self, tmp_path):
        matrix = np.array([[0.1, -0.4], [0.9, 0.0]])
        a = emit_heatmap_svg(matrix, diverging_scale(), tmp_path / "a.svg").read_bytes()
        b = emit_heatmap_svg(matrix, diverging_scale(), tmp_path / "b.svg").read_bytes()
        assert a == b

    def test_colour_anchors(self):
        scale = diverging_scale()
        assert scale.color(-1.0) == "#ca0020"
        assert scale.color(0.0) == "#ffffff"
        assert scale.color(1.0) == "#2a99d6"
        assert scale.color(5.0) == "#2a99d6"

    def test_bars(self, tmp_path):
        text = emit_bar_svg([0.0, 1.0, 0.5], tmp_path / "d.svg").read_text(encoding="utf-8")
        assert text.count('class="bar"') == 3

    def test_empty_inputs(self, tmp_path):
        with pytest.raises(ShapeError):
            emit_heatmap_svg(np.zeros((0, 0)), diverging_scale(), tmp_path / "x.svg")
        with pytest.raises(ShapeError):
            emit_bar_svg([], tmp_path / "x.svg")

    def test_matrix_from_future_effect_rows(self):
        rows = [{"s": "0", "l": "1", "value": "0.5"}, {"s": "1", "l": "2", "value": ""}]
        matrix, row_ticks, col_ticks = matrix_from_rows(rows, "s", "l")
        assert matrix.shape == (3, 3)
        assert row_ticks == [0, 1, 2]
        assert matrix[0, 1] == 0.5
        assert math.isnan(matrix[1, 2])


# =========================
# utils/formatter.py
# =========================

from utils.formatter import summarize_cell


def ok_cell(**summary):
    return {
        "model": "small", "trajectory": "code_generation_4t_s7", "turn": 2,
        "status": "ok", "n_tokens": 120, "summary": summary,
    }


class TestSummarizeCell:
    def test_regimes_per_variant(self, capsys):
        regimes = {
            "block": {"injection": 2, "amplification": 5, "correction": 1},
            "attention": {"injection": 0, "amplification": 3, "correction": 5},
        }
        summarize_cell(ok_cell(regimes=regimes))
        out = capsys.readouterr().out
        assert "regimes (block) injection 2, amplification 5, correction 1" in out
        assert "regimes (attention) injection 0, amplification 3, correction 5" in out

    def test_skipped_logit_change(self, capsys):
        summarize_cell(ok_cell(logit_change_skipped="pivot leaves no later tokens"))
        assert "logit change    skipped: pivot leaves no later tokens" in capsys.readouterr().out

    def test_failed_cell(self, capsys):
        summarize_cell({"model": "m", "trajectory": "t", "turn": 5, "status": "failed", "error": "ParameterError: x"})
        assert capsys.readouterr().out.strip() == "[m] t turn 5: FAILED (ParameterError: x)"
