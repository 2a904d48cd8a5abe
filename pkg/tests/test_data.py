import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stelar.data import (
    DataError,
    SyntheticSpec,
    TensorBundle,
    generate_synthetic,
    ingest_csv,
    load_model,
    read_config,
    save_model,
    write_csv,
)
from stelar.engine import Hyperparams, fit, predict_slabs
from stelar.epi import SirConfig
from stelar.tensor import reconstruct

D0 = dt.date(2021, 1, 1)


def write(tmp_path, text, name="in.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestIngest:
    def test_full_grid(self, tmp_path):
        rows = ["location,signal,date,value"]
        for loc, base in (("a", 0), ("b", 10)):
            for d in range(3):
                rows.append(f"{loc},cases,2021-01-0{d + 1},{base + d}")
        b = ingest_csv(write(tmp_path, "\n".join(rows)))
        assert b.tensor.shape == (2, 1, 3)
        np.testing.assert_array_equal(b.tensor[:, 0, :], [[0, 1, 2], [10, 11, 12]])
        assert b.location_labels == ["a", "b"] and b.signal_labels == ["cases"]
        assert b.dates == [D0, D0 + dt.timedelta(days=1), D0 + dt.timedelta(days=2)]

    def test_missing_cell_zero_filled(self, tmp_path):
        text = ("location,signal,date,value\n"
                "a,s,2021-01-01,1\na,s,2021-01-03,3\nb,s,2021-01-02,5\n")
        b = ingest_csv(write(tmp_path, text))
        np.testing.assert_array_equal(b.tensor[:, 0, :], [[1, 0, 3], [0, 5, 0]])

    def test_missing_cell_error_policy(self, tmp_path):
        text = "location,signal,date,value\na,s,2021-01-01,1\nb,s,2021-01-01,2\na,s,2021-01-02,3\n"
        with pytest.raises(DataError, match="missing"):
            ingest_csv(write(tmp_path, text), fill_policy="error")

    def test_date_gap_error_policy(self, tmp_path):
        text = "location,signal,date,value\na,s,2021-01-01,1\na,s,2021-01-03,3\n"
        with pytest.raises(DataError, match="consecutive"):
            ingest_csv(write(tmp_path, text), fill_policy="error")

    def test_duplicate_names_line(self, tmp_path):
        text = "location,signal,date,value\na,s,2021-01-01,1\na,s,2021-01-02,1\na,s,2021-01-01,4\n"
        with pytest.raises(DataError, match=r"line 4: duplicate .* line 2"):
            ingest_csv(write(tmp_path, text))

    @pytest.mark.parametrize("row,pattern", [
        ("a,s,2021-01-01,-1", "line 2: negative"),
        ("a,s,01/02/2021,1", "line 2: invalid date"),
        ("a,s,2021-01-01,abc", "line 2: value"),
        ("a,s,2021-01-01", "line 2: expected 4 fields"),
        ("a,s,2021-01-01,nan", "line 2: value must be finite"),
    ])
    def test_bad_rows(self, tmp_path, row, pattern):
        with pytest.raises(DataError, match=pattern):
            ingest_csv(write(tmp_path, f"location,signal,date,value\n{row}\n"))

    def test_bad_header(self, tmp_path):
        with pytest.raises(DataError, match="line 1"):
            ingest_csv(write(tmp_path, "loc,sig,day,v\na,s,2021-01-01,1\n"))

    def test_empty(self, tmp_path):
        with pytest.raises(DataError):
            ingest_csv(write(tmp_path, "location,signal,date,value\n"))

    @settings(max_examples=20, deadline=None)
    @given(M=st.integers(1, 4), N=st.integers(1, 3), L=st.integers(1, 6), seed=st.integers(0, 999))
    def test_round_trip(self, tmp_path_factory, M, N, L, seed):
        rng = np.random.default_rng(seed)
        X = rng.random((M, N, L)) * rng.choice([0.0, 1.0, 1e6], size=(M, N, L))
        bundle = TensorBundle(X, [f"l{m}" for m in range(M)], [f"s{n}" for n in range(N)],
                              [D0 + dt.timedelta(days=t) for t in range(L)])
        path = tmp_path_factory.mktemp("rt") / "x.csv"
        write_csv(bundle, path)
        back = ingest_csv(path, fill_policy="error")
        np.testing.assert_array_equal(back.tensor, X)
        assert back.location_labels == bundle.location_labels
        assert back.signal_labels == bundle.signal_labels and back.dates == bundle.dates


class TestBundle:
    def test_label_mismatch(self):
        with pytest.raises(ValueError):
            TensorBundle(np.zeros((2, 1, 1)), ["a"], ["s"], [D0])

    def test_non_consecutive_dates(self):
        with pytest.raises(ValueError):
            TensorBundle(np.zeros((1, 1, 2)), ["a"], ["s"], [D0, D0 + dt.timedelta(days=2)])

    def test_future_dates_and_head(self):
        b = TensorBundle(np.zeros((1, 1, 3)), ["a"], ["s"],
                         [D0 + dt.timedelta(days=t) for t in range(3)])
        assert b.future_dates(2) == [D0 + dt.timedelta(days=3), D0 + dt.timedelta(days=4)]
        assert b.head(2).tensor.shape == (1, 1, 2)


class TestSynthetic:
    def test_deterministic(self):
        spec = SyntheticSpec(M=5, N=3, L=20, K=2, noise_level=0.05, seed=7)
        (a, ta), (b, tb) = generate_synthetic(spec), generate_synthetic(spec)
        np.testing.assert_array_equal(a.tensor, b.tensor)
        np.testing.assert_array_equal(ta.C_extended, tb.C_extended)

    def test_noiseless_is_exact_low_rank(self):
        b, truth = generate_synthetic(SyntheticSpec(M=6, N=4, L=30, K=2, seed=1, horizon=5))
        np.testing.assert_array_equal(b.tensor, reconstruct(truth.model))
        assert truth.C_extended.shape == (35, 2)
        np.testing.assert_array_equal(truth.C_extended[:30], truth.model.C)

    def test_rank_one_fits_exactly(self):
        b, _ = generate_synthetic(SyntheticSpec(M=6, N=4, L=30, K=1, seed=2))
        f = fit(b.tensor, Hyperparams(K=1, nu=0.0, iters_outer=50))
        rel = np.linalg.norm(b.tensor - reconstruct(f.model)) / np.linalg.norm(b.tensor)
        assert rel < 1e-8

    def test_zero_infected_gives_zero_tensor(self):
        comps = [SirConfig(0.9, 0.0, 0.4, 0.1, 25)] * 2
        b, _ = generate_synthetic(SyntheticSpec(M=3, N=2, L=20, K=2, components=comps, horizon=5))
        assert not b.tensor.any()

    def test_noise_ratio_over_ten_seeds(self):
        for seed in range(10):
            b, truth = generate_synthetic(SyntheticSpec(noise_level=0.05, seed=seed))
            ratio = np.linalg.norm(truth.noise) / np.linalg.norm(truth.signal)
            assert 0.03 <= ratio <= 0.07, (seed, ratio)
            assert b.tensor.min() >= 0

    def test_true_continuation_matches_sir(self):
        from stelar.sir_fit import build_template

        _, truth = generate_synthetic(SyntheticSpec(L=40, K=3, seed=3, horizon=10))
        np.testing.assert_allclose(build_template(truth.sir, 50), truth.C_extended, rtol=1e-9)

    def test_peaks_staggered(self):
        _, truth = generate_synthetic(SyntheticSpec(L=60, K=3, seed=4, horizon=0))
        peaks = np.argmax(truth.C_extended, axis=0)
        assert np.all(np.diff(peaks) > 0)

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            SyntheticSpec(M=0)
        with pytest.raises(ValueError):
            SyntheticSpec(noise_level=-0.1)


def test_model_round_trip_bit_identical(tmp_path):
    b, _ = generate_synthetic(SyntheticSpec(M=6, N=3, L=40, K=2, seed=5, noise_level=0.05))
    f = fit(b.tensor, Hyperparams(K=2, nu=1.0, iters_outer=40, warmup=10, L_o=7))
    path = tmp_path / "model.json"
    save_model(path, f, b)
    g, labels = load_model(path)
    np.testing.assert_array_equal(predict_slabs(g), predict_slabs(f))
    assert g.hp == f.hp and g.n_total == f.n_total and g.best_iteration == f.best_iteration
    assert labels["locations"] == b.location_labels and labels["dates"] == b.dates


def test_load_rejects_foreign_json(tmp_path):
    path = tmp_path / "x.json"
    path.write_text('{"format": "other"}')
    with pytest.raises(DataError):
        load_model(path)


def test_read_config(tmp_path):
    path = write(tmp_path, "# settings\nK = 4\nnu=0.5  # strength\n\n", "c.txt")
    assert read_config(path) == {"K": "4", "nu": "0.5"}
    with pytest.raises(DataError, match="c2.txt:1"):
        read_config(write(tmp_path, "K 4\n", "c2.txt"))
