from __future__ import annotations

import numpy as np

from mlaref.verify import (
    max_rel_err,
    random_small_config,
    run_exactness_suite,
    run_exactness_trial,
)


def test_max_rel_err_basics():
    a = np.array([1.0, 2.0])
    assert max_rel_err(a, a) == 0.0
    assert abs(max_rel_err(np.array([1.0]), np.array([1.1])) - 0.1 / 1.1) < 1e-12
    # Near-zero arrays do not blow up.
    assert max_rel_err(np.zeros(3), np.zeros(3)) == 0.0


def test_random_small_config_in_bounds(rng):
    for _ in range(40):
        c = random_small_config(rng)
        assert c.num_heads in (1, 2, 4, 8)
        assert c.kv_lora_rank in (8, 16, 32)
        assert c.rope_dim % 2 == 0


def test_single_trial_exact(rng):
    r = run_exactness_trial(rng, dtype=np.float64)
    assert r.max_err <= 1e-10


def test_trial_covers_empty_sides(rng):
    r0 = run_exactness_trial(rng, dtype=np.float64, shared_len=0, tail_len=9)
    r1 = run_exactness_trial(rng, dtype=np.float64, shared_len=9, tail_len=0)
    assert r0.max_err <= 1e-10
    assert r1.max_err <= 1e-10


def test_suite_passes_and_reports(rng):
    report = run_exactness_suite(trials=25, seed=3, dtype=np.float64)
    assert report.passed
    assert report.trials == 25
    assert report.failures == 0
    assert report.max_err <= report.tolerance
    assert len(report.results) == 25
    d = report.to_dict()
    assert d["passed"] is True and d["dtype"] == "float64"


def test_suite_float32_band(rng):
    report = run_exactness_suite(trials=25, seed=4, dtype=np.float32)
    assert report.passed
    assert report.tolerance == 1e-5


def test_fault_injection_is_detected():
    report = run_exactness_suite(trials=10, seed=5, dtype=np.float64, fault_injection=True)
    assert not report.passed
    assert report.failures == 10
