import json
import math

import numpy as np
import pytest
import yaml

from twolevel.harness import (ConfigError, StudyConfig, exit_times, run_study, variance_se)


def cfg(**kw):
    return StudyConfig.from_dict(kw)


# --- configuration ------------------------------------------------------------------


def test_unknown_key_is_named():
    with pytest.raises(ConfigError) as ei:
        cfg(kind="steady_state", model={"lambda": 3}, colour="red")
    assert ei.value.key == "colour"


@pytest.mark.parametrize("kw,key", [
    (dict(kind="nonsense"), "kind"),
    (dict(kind="det_convergence", ladder=[]), "ladder"),
    (dict(kind="det_convergence", ladder=[[10, 10], [10, 20], [30, 30]]), "ladder"),
    (dict(kind="qv_scaling", ladder=[[20, 20], [40, 10]]), "ladder"),
    (dict(kind="fv_martingale", ladder=[[5, 5]], replicas=0), "replicas"),
    (dict(kind="fv_martingale", ladder=[[5, 5]], seed=-1), "seed"),
    (dict(kind="fv_martingale", ladder=[[5, 5]], seed=2 ** 64), "seed"),
])
def test_config_validation(kw, key):
    with pytest.raises(ConfigError) as ei:
        cfg(**kw)
    assert ei.value.key == key


def test_config_yaml_roundtrip(tmp_path):
    c = cfg(kind="qv_scaling", ladder=[[10, 20], [20, 20]], model={"s": 0.1}, seed=3)
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(c.to_dict()))
    assert StudyConfig.from_yaml(p).to_dict() == c.to_dict()


def test_malformed_yaml(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("kind: [unclosed\n")
    with pytest.raises(ConfigError):
        StudyConfig.from_yaml(p)


# --- det_convergence ------------------------------------------------------------------------


LADDER3 = [[4, 4], [6, 6], [8, 8]]


def test_det_convergence_from_delta0_is_exact():
    r = run_study(cfg(kind="det_convergence", ladder=LADDER3, model={"s": 1, "r": 2, "w": 1},
                      initial="delta:0", T=1.0, replicas=3, seed=1))
    assert [row["mean_w1"] for row in r.rows] == [0.0, 0.0, 0.0]
    assert r.passed


def test_det_convergence_guards():
    with pytest.raises(ConfigError) as ei:
        run_study(cfg(kind="det_convergence", ladder=LADDER3, model={"s": 0, "r": 1}))
    assert ei.value.key == "model.s"
    with pytest.raises(ConfigError):
        run_study(cfg(kind="det_convergence", ladder=[[4, 4], [6, 6]], model={"s": 1, "r": 1}))


def test_rows_align_with_rungs_and_csv_is_reproducible(tmp_path):
    c = cfg(kind="det_convergence", ladder=LADDER3, model={"s": 1, "r": 3}, T=0.5, replicas=5, seed=9)
    a, b = run_study(c), run_study(c)
    assert [(row["m"], row["n"]) for row in a.rows] == [tuple(p) for p in LADDER3]
    assert a.csv_text() == b.csv_text()
    csv_path, json_path = a.write(tmp_path)
    assert csv_path.read_text() == a.csv_text()
    man = json.loads(json_path.read_text())
    assert len(man["wall_clock_s"]) == 3 and man["config"]["seed"] == 9


# --- qv_scaling ----------------------------------------------------------------------------


def test_qv_scaling_degenerate_guard():
    with pytest.raises(ConfigError):
        run_study(cfg(kind="qv_scaling", ladder=[[4, 5], [8, 5]], model={"s": 0.1, "r": 1},
                      initial="delta:0", replicas=5))


def test_variance_se_scales_like_inverse_sqrt_replicas():
    rng = np.random.default_rng(0)
    ratios = [variance_se(rng.normal(size=400)) / variance_se(rng.normal(size=800)) for _ in range(50)]
    assert np.mean(ratios) == pytest.approx(math.sqrt(2.0), rel=0.3)


def test_variance_se_normal_formula():
    x = np.random.default_rng(1).normal(size=20000)
    assert variance_se(x) == pytest.approx(math.sqrt(2.0 / 20000), rel=0.05)


# --- steady_state ----------------------------------------------------------------------------


@pytest.mark.parametrize("initial,lam,limit", [("example2", 3.0, "Beta(2,1)"),
                                               ("example4:0.8", 5.0, "Delta0"),
                                               ("mixture:[0.3*delta:1;0.7*uniform]", 2.0, "Delta1")])
def test_steady_state_examples(initial, lam, limit):
    r = run_study(cfg(kind="steady_state", model={"lambda": lam}, initial=initial))
    assert r.rows[-1]["limit"] == limit
    assert r.passed


def test_steady_state_rejects_nonpositive_lambda():
    with pytest.raises(ConfigError):
        run_study(cfg(kind="steady_state", model={"lambda": 0.0}))


# --- quasi_invariance ------------------------------------------------------------------------


QI = dict(kind="quasi_invariance", ladder=[[5, 5], [8, 8]],
          model={"lambda": 3, "alpha": 1, "s": 1, "r": 3, "w": 1}, T=5.0, replicas=10, seed=4)


def test_quasi_invariance_unreachable_threshold():
    r = run_study(cfg(**QI, options={"threshold": 1.1}))
    assert all(row["mean_exit"] == 5.0 and row["censored"] == 1.0 for row in r.rows)


def test_quasi_invariance_reproducible():
    a, b = run_study(cfg(**QI)), run_study(cfg(**QI))
    assert a.csv_text() == b.csv_text()


def test_quasi_invariance_guards():
    with pytest.raises(ConfigError):
        run_study(cfg(**QI, options={"threshold": 0.0}))
    bad = dict(QI, model={"lambda": 2, "alpha": 1, "s": 1, "r": 3, "w": 1})
    with pytest.raises(ConfigError):
        run_study(cfg(**bad))


def test_exit_times():
    w1 = np.array([[0.0, 0.05, 0.2, 0.0], [0.0, 0.0, 0.0, 0.0]])
    t = np.array([0.0, 1.0, 2.0, 3.0])
    np.testing.assert_array_equal(exit_times(w1, t, 0.1, 3.0), [2.0, 3.0])


# --- fv_martingale --------------------------------------------------------------------------


def test_fv_wrapper_horizon_zero():
    r = run_study(cfg(kind="fv_martingale", ladder=[[5, 5], [6, 6]], model={"sigma": 1, "rho": 1},
                      T=0.0, replicas=100, seed=2))
    assert all(row["mean"] == 0.0 for row in r.rows)
    assert r.verdicts["qform"] == "PASS"
