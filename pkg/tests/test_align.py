import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_force_dtw
from scorealign.align import (
    AlignConfig,
    MemoryBudgetError,
    WarpPath,
    align,
    band_mask,
    cost_matrix,
    dtw,
    frame_cost,
    tempo_ratios,
    transfer_labels,
    write_alignment_report,
)
from scorealign.audio_io import AudioBuffer
from scorealign.experiments import ConstantWarp, SyntheticSpec, generate_score, warp_score
from scorealign.score import score_from_beats
from scorealign.synth import synthesize


def check_path(path, n, m):
    p = path.pairs
    assert tuple(p[0]) == (0, 0) and tuple(p[-1]) == (n - 1, m - 1)
    steps = np.diff(p, axis=0)
    assert {tuple(s) for s in steps} <= {(1, 0), (0, 1), (1, 1)}


def path_cost(cost, path):
    return float(sum(cost[i, j] for i, j in path.pairs))


def test_frame_cost_examples():
    cfg = AlignConfig(cutoff_dims=2)
    assert frame_cost([3, 4, 99], [0, 0, 0], cfg) == 5.0
    assert frame_cost([1, 2, 3], [1, 2, 3], cfg) == 0.0
    assert frame_cost([3, -4, 99], [0, 0, 0], AlignConfig(cutoff_dims=2, norm="L1")) == 7.0
    assert frame_cost([3, -4, 99], [0, 0, 0], AlignConfig(cutoff_dims=2, norm="Linf")) == 4.0
    with pytest.raises(ValueError):
        frame_cost([1.0], [1.0], cfg)


def test_frame_cost_and_matrix_match_direct(rng):
    a = rng.standard_normal((7, 60))
    b = rng.standard_normal((5, 60))
    cfg = AlignConfig()
    c = cost_matrix(a, b, cfg)
    for i, j in itertools.product(range(7), range(5)):
        direct = np.sqrt(sum((a[i, k] - b[j, k]) ** 2 for k in range(50)))
        assert c[i, j] == pytest.approx(direct, abs=1e-12)
        assert frame_cost(a[i], b[j], cfg) == pytest.approx(direct, abs=1e-12)


def test_trivial_dtw():
    path = dtw([[2.5]])
    assert path.pairs.tolist() == [[0, 0]] and path.total_cost == 2.5


def test_zero_diagonal():
    cost = np.ones((6, 6)) - np.eye(6)
    path = dtw(cost)
    assert path.pairs.tolist() == [[k, k] for k in range(6)]
    assert path.total_cost == 0


@pytest.mark.parametrize("shape", [(3, 3), (4, 4)])
def test_all_small_matrices_from_three_levels(shape):
    # every 3x3 / a sample of 4x4 matrices with entries in {0, 0.5, 1}
    rng = np.random.default_rng(shape[0])
    cells = shape[0] * shape[1]
    if cells == 9:
        grids = itertools.product((0, 0.5, 1), repeat=9)
    else:
        grids = (rng.choice([0, 0.5, 1], size=cells) for _ in range(300))
    for values in grids:
        cost = np.array(values, dtype=float).reshape(shape)
        path = dtw(cost)
        check_path(path, *shape)
        assert path.total_cost == pytest.approx(brute_force_dtw(cost))
        assert path_cost(cost, path) == pytest.approx(path.total_cost)


def test_random_rectangles_match_enumeration(rng):
    for shape in [(4, 6)] * 20 + [(5, 5)] * 20:
        cost = rng.uniform(0, 1, shape)
        assert dtw(cost).total_cost == pytest.approx(brute_force_dtw(cost), abs=1e-12)


matrices = st.tuples(st.integers(1, 6), st.integers(1, 6)).flatmap(
    lambda s: arrays(np.float64, s, elements=st.floats(0, 10, allow_nan=False)))


@given(matrices)
def test_transpose_symmetry(cost):
    assert dtw(cost.T).total_cost == pytest.approx(dtw(cost).total_cost)


@given(matrices, st.floats(0, 5))
def test_constant_shift(cost, c):
    base = dtw(cost)
    n, m = cost.shape
    assert max(n, m) <= len(base) <= n + m - 1
    shifted = dtw(cost + c)
    check_path(shifted, n, m)
    # shifted optimum is at most base + c * len(base), and at least the oracle
    assert shifted.total_cost <= base.total_cost + c * len(base) + 1e-9
    assert shifted.total_cost == pytest.approx(path_cost(cost + c, shifted))


def test_constant_shift_with_unique_path():
    cost = np.ones((5, 5)) - np.eye(5)
    assert dtw(cost + 2).total_cost == pytest.approx(2 * 5)


def test_tie_break_prefers_diagonal_then_performance_advance():
    path = dtw(np.zeros((2, 3)))
    # from (1, 2): diagonal to (0, 1), then performance advance to (0, 0)
    assert path.pairs.tolist() == [[0, 0], [0, 1], [1, 2]]
    path = dtw(np.zeros((3, 2)))
    assert path.pairs.tolist() == [[0, 0], [1, 0], [2, 1]]


def test_bad_costs_rejected():
    for bad in (np.zeros((0, 3)), [[np.nan]], [[-1.0]], [[np.inf, 0]]):
        with pytest.raises(ValueError):
            dtw(bad)


def test_band_restricts_path(rng):
    cost = rng.uniform(0, 1, (40, 60))
    path = dtw(cost, band_radius=3)
    mask = band_mask(40, 60, 3)
    assert all(mask[i, j] for i, j in path.pairs)
    assert path.total_cost >= dtw(cost).total_cost - 1e-12


def test_tempo_ratio_of_straight_paths():
    pairs = np.array([(i, 2 * i) for i in range(100)])
    ratios = tempo_ratios(WarpPath(pairs, 0.0), 10)
    np.testing.assert_allclose(ratios, 2.0)


def melody(seed=0, seconds=8):
    return generate_score(SyntheticSpec(duration_s=seconds, seed=seed, polyphony=2))


def test_self_alignment_near_diagonal():
    score = melody()
    cfg = AlignConfig()
    result = align(synthesize(score), score, cfg)
    i, j = result.path.pairs.T
    assert result.score_frames == result.performance_frames
    assert np.max(np.abs(result.path.first_performance_frame() - np.arange(result.score_frames))) <= 1
    labels = transfer_labels(result.path, score, cfg)
    starts = np.array([r.start_s for r in labels])
    truth = np.array(sorted(e.onset_seconds for e in score.events))
    assert np.median(np.abs(starts - truth)) < 512 / 44100


def test_half_tempo_ratio():
    score = melody(seed=3, seconds=10)
    slow = synthesize(warp_score(score, ConstantWarp(2.0)))
    result = align(slow, score)
    assert 1.9 <= result.median_tempo_ratio <= 2.1


def test_leading_silence_maps_first_frame_across_block():
    score = melody(seed=5, seconds=6)
    rendered = synthesize(score)
    silence = 100 * 512
    perf = AudioBuffer(np.r_[np.zeros(silence), rendered.samples])
    result = align(perf, score)
    pairs = result.path.pairs
    first_row = pairs[pairs[:, 0] == 0, 1]
    assert first_row.max() >= 95


def test_transfer_labels_monotone_and_schema():
    score = score_from_beats([(79, 0, 0.5), (58, 0.5, 3), (72, 3.5, 0.5)])
    cfg = AlignConfig()
    result = align(synthesize(score), score, cfg)
    labels = list(transfer_labels(result.path, score, cfg))
    assert [r.start_s for r in labels] == sorted(r.start_s for r in labels)
    assert all(r.end_s > r.start_s for r in labels)
    assert (labels[0].note_name, labels[0].note_value, labels[0].measure) == ("G5", "Eighth", 1)
    assert labels[1].note_value == "Dotted Half"


def test_scaled_offset_mode():
    score = melody(seed=2, seconds=5)
    cfg = AlignConfig(offset_mode="scaled")
    result = align(synthesize(score), score, cfg)
    for r in transfer_labels(result.path, score, cfg):
        assert r.end_s > r.start_s


def test_memory_budget():
    score = melody(seconds=4)
    with pytest.raises(MemoryBudgetError, match="bytes"):
        align(synthesize(score), score, AlignConfig(memory_budget_bytes=1000))


def test_rate_and_empty_score_errors():
    score = melody(seconds=3)
    with pytest.raises(ValueError):
        align(AudioBuffer(np.zeros(50000), 48000), score)
    from scorealign.score import Score
    with pytest.raises(ValueError):
        align(AudioBuffer(np.zeros(50000)), Score())


def test_report_file(tmp_path):
    score = melody(seconds=3)
    result = align(synthesize(score), score)
    write_alignment_report(result, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("# total_cost=")
    header = lines.index("score_frame,performance_frame,cost")
    rows = [l.split(",") for l in lines[header + 1:]]
    assert len(rows) == len(result.path)
    total = sum(float(r[2]) for r in rows)
    assert total == pytest.approx(result.total_cost)
