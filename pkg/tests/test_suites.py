import json
import math

import numpy as np
import pytest

from safedyn import suites
from safedyn.harness import MetricsReport, MethodId


def _rep(method, rmse, var=1.0):
    return MetricsReport("b1", method, 3, rmse, 0.0, 0.0, 0.0, 1.0, 1.0, var, 1.0, 0)


def _table(full, kiss, kunc, van):
    vals = {MethodId.CsodeIcodeMppi: full, MethodId.KoopmanIss: kiss,
            MethodId.KoopmanUncert: kunc, MethodId.VanillaNode: van}
    return {m.value: _rep(m.value, v) for m, v in vals.items()}


def test_table_verdict_pass_and_margin():
    v = suites.table_verdict(_table(0.05, 0.08, 0.1, 0.12))
    assert v["pass"] and v["improvement"] == pytest.approx(0.5)
    v = suites.table_verdict(_table(0.09, 0.095, 0.1, 0.12))
    assert not v["pass"] and v["full_lt_koopman_iss"] and v["koopman_iss_lt_uncertified"]


def test_table_verdict_ordering_failure():
    v = suites.table_verdict(_table(0.05, 0.2, 0.1, 0.12))
    assert not v["pass"] and not v["koopman_iss_lt_uncertified"]


def test_ablation_verdict():
    order = [m.value for m in suites.H.ABLATION_METHODS]
    reps = {m: _rep(m, r) for m, r in zip(order, (0.07, 0.09, 0.1, 0.13))}
    reps[MethodId.AblateNoIss.value].cost_variance_ratio = 3.0
    assert suites.ablation_verdict(reps)["pass"]
    reps[MethodId.AblateNoIss.value].cost_variance_ratio = 1.5
    v = suites.ablation_verdict(reps)
    assert v["ordered"] and not v["pass"]


def test_recovery_time_dwell():
    t = np.arange(0, 10, 0.02)
    err = np.where(t < 6.0, 0.2, 0.01)
    assert suites.recovery_time(t, err) == pytest.approx(1.0, abs=1e-9)
    # a brief dip inside the band does not count as recovery
    err2 = err.copy()
    err2[(t > 5.3) & (t < 5.4)] = 0.0
    assert suites.recovery_time(t, err2) == pytest.approx(1.0, abs=1e-9)
    assert math.isinf(suites.recovery_time(t, np.full_like(t, 0.3)))


def test_write_json_is_canonical(tmp_path):
    suites.write_json(tmp_path / "a.json", {"b": np.float64(np.inf), "a": [np.int64(1), np.nan]})
    text = (tmp_path / "a.json").read_text()
    assert json.loads(text) == {"a": [1, "nan"], "b": "inf"}
    assert text.index('"a"') < text.index('"b"')


def test_write_csv_repr_floats(tmp_path):
    suites.write_csv(tmp_path / "x.csv", ("k", "v"), [("a", 0.1), ("b", 1 / 3)])
    raw = (tmp_path / "x.csv").read_bytes()
    assert raw == b"k,v\r\na,0.1\r\nb,0.3333333333333333\r\n"


def test_unknown_suite_rejected(tmp_path):
    with pytest.raises(ValueError):
        suites.run_suite("table9", str(tmp_path))


def test_zero_episodes_rejected(tmp_path):
    with pytest.raises(ValueError):
        suites.run_suite("table1", str(tmp_path), episodes=0)
