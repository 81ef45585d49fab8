import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tokenwatt.attribution import (
    attribute,
    infer_domain,
    integrate_energy,
    ledger_from_dict,
    ledger_to_dict,
    per_request_energy,
)
from tokenwatt.errors import EmptyTimeline, UnorderedSamples
from tokenwatt.phases import DECODE, IDLE, PREFILL, PhaseTimeline, RequestWindow
from tokenwatt.sampler import PowerSample

S = 1_000_000_000


def sample_series(source_id, points):
    return [PowerSample(ts, source_id, w) for ts, w in points]


def make_timeline(run_end, intervals, requests=None, run_id="run"):
    return PhaseTimeline(
        run_id=run_id,
        run_interval=(0, run_end),
        engine_intervals=intervals,
        requests=requests or {},
    )


# --- integrate_energy --------------------------------------------------------


def test_constant_power_exact():
    samples = sample_series("s", [(0, 100.0), (10 * S, 100.0)])
    assert integrate_energy(samples, (0, 10 * S)) == pytest.approx(1000.0, rel=1e-12)


def test_linear_ramp_exact():
    samples = sample_series("s", [(0, 0.0), (10 * S, 100.0)])
    assert integrate_energy(samples, (0, 10 * S)) == pytest.approx(500.0, rel=1e-12)


def test_ramp_interior_window_matches_analytic_and_riemann():
    # w(t) = 10 t over [0,10]s sampled only at the ends; window [2,4]s.
    # Analytic: integral of 10 t dt from 2 to 4 = 5 t^2 | = 5*(16-4) = 60 J.
    samples = sample_series("s", [(0, 0.0), (10 * S, 100.0)])
    result = integrate_energy(samples, (2 * S, 4 * S))
    assert result == pytest.approx(60.0, rel=1e-9)

    # Independent brute force: left-rectangle Riemann sum at 1 us steps.
    step = 1_000_000_000 // 1_000_000  # 1 us in ns
    ts = np.arange(2 * S, 4 * S, step, dtype=np.int64)
    watts = 10.0 * (ts / 1e9)
    riemann = float(np.sum(watts * step)) * 1e-9
    assert result == pytest.approx(riemann, rel=1e-6)


def test_window_outside_samples_is_zero():
    samples = sample_series("s", [(0, 50.0), (1 * S, 50.0)])
    assert integrate_energy(samples, (2 * S, 3 * S)) == 0.0


def test_single_sample_is_zero():
    assert integrate_energy(sample_series("s", [(5, 10.0)]), (0, 10 * S)) == 0.0


def test_straddling_window_interpolates_edges():
    # Ramp 0..100 W over [0,10]s; window [5,15]s only has data until 10 s.
    samples = sample_series("s", [(0, 0.0), (10 * S, 100.0)])
    expected = 5.0 * (10.0**2 - 5.0**2)  # integral of 10t over [5,10]
    assert integrate_energy(samples, (5 * S, 15 * S)) == pytest.approx(expected, rel=1e-12)


def test_unordered_samples_rejected():
    samples = [PowerSample(10, "s", 1.0), PowerSample(5, "s", 2.0)]
    with pytest.raises(UnorderedSamples):
        integrate_energy(samples, (0, 20))


@settings(max_examples=100)
@given(
    watts=st.lists(
        st.floats(min_value=0, max_value=1000, allow_nan=False, allow_infinity=False),
        min_size=2,
        max_size=12,
    ),
    cut_fraction=st.floats(min_value=0.001, max_value=0.999),
)
def test_splitting_invariance(watts, cut_fraction):
    samples = [PowerSample((i + 1) * S, "s", w) for i, w in enumerate(watts)]
    lo, hi = samples[0].ts_ns, samples[-1].ts_ns
    cut = lo + int((hi - lo) * cut_fraction)
    whole = integrate_energy(samples, (lo, hi))
    left = integrate_energy(samples, (lo, cut))
    right = integrate_energy(samples, (cut, hi))
    assert left + right == pytest.approx(whole, rel=1e-12, abs=1e-12)


# --- attribute ----------------------------------------------------------------


def one_request_timeline():
    requests = {
        "r1": RequestWindow(
            prefill=(0, 1 * S), decode=(1 * S, 3 * S), prompt_tokens=100, generated_tokens=10, complete=True
        )
    }
    intervals = [(0, 1 * S, PREFILL), (1 * S, 3 * S, DECODE), (3 * S, 4 * S, IDLE)]
    return make_timeline(4 * S, intervals, requests)


def constant_samples(source_id, watts, run_end=4 * S, step=S // 10):
    return [PowerSample(ts, source_id, watts) for ts in range(0, run_end + 1, step)]


def test_attribute_constant_single_source():
    timeline = one_request_timeline()
    ledger = attribute({"gpu0": constant_samples("gpu0", 100.0)}, timeline, {"gpu0": "GPU"})
    cells = ledger.by_source_phase["gpu0"]
    assert cells[PREFILL] == pytest.approx(100.0, rel=1e-12)
    assert cells[DECODE] == pytest.approx(200.0, rel=1e-12)
    assert cells[IDLE] == pytest.approx(100.0, rel=1e-12)
    assert ledger.totals["total_j"] == pytest.approx(400.0, rel=1e-12)
    assert ledger.identity_residual < 1e-9


def test_attribute_two_sources_decomposition():
    timeline = one_request_timeline()
    ledger = attribute(
        {"gpu0": constant_samples("gpu0", 300.0), "cpu0": constant_samples("cpu0", 50.0)},
        timeline,
        {"gpu0": "GPU", "cpu0": "CPU"},
    )
    assert ledger.by_source_phase["gpu0"][PREFILL] == pytest.approx(300.0)
    assert ledger.by_source_phase["gpu0"][DECODE] == pytest.approx(600.0)
    assert ledger.by_source_phase["cpu0"][IDLE] == pytest.approx(50.0)
    assert ledger.totals["prefill_j"] == pytest.approx(350.0)
    assert ledger.totals["decode_j"] == pytest.approx(700.0)
    assert ledger.totals["idle_j"] == pytest.approx(350.0)
    assert ledger.totals["total_j"] == pytest.approx(1400.0)
    # decomposition: phase totals equal the sum over component domains
    assert ledger.totals["total_j"] == pytest.approx(
        ledger.by_domain["GPU"] + ledger.by_domain["CPU"], rel=1e-12
    )


def test_attribute_node_source_not_in_component_sums():
    timeline = one_request_timeline()
    ledger = attribute(
        {
            "gpu0": constant_samples("gpu0", 300.0),
            "node0": constant_samples("node0", 500.0),
        },
        timeline,
        {"gpu0": "GPU", "node0": "NODE"},
    )
    assert ledger.totals["total_j"] == pytest.approx(1200.0)  # gpu only
    assert ledger.by_domain["NODE"] == pytest.approx(2000.0)
    # unmetered remainder: node 2000 - components 1200
    assert ledger.others_estimate_j == pytest.approx(800.0)


def test_attribute_other_domain_sums_when_no_node():
    timeline = one_request_timeline()
    ledger = attribute(
        {"gpu0": constant_samples("gpu0", 300.0), "nic0": constant_samples("nic0", 20.0)},
        timeline,
        {"gpu0": "GPU", "nic0": "OTHER"},
    )
    assert ledger.others_estimate_j == pytest.approx(80.0)
    assert ledger.totals["total_j"] == pytest.approx(1280.0)  # OTHER counts as a component


def test_attribute_empty_timeline_rejected():
    timeline = make_timeline(0, [])
    with pytest.raises(EmptyTimeline):
        attribute({"s": constant_samples("s", 1.0)}, timeline, {"s": "GPU"})


def test_attribute_coverage_fraction():
    timeline = one_request_timeline()
    # samples only cover the first half of the 4 s run
    samples = [PowerSample(ts, "gpu0", 100.0) for ts in range(0, 2 * S + 1, S // 10)]
    ledger = attribute({"gpu0": samples}, timeline, {"gpu0": "GPU"})
    assert ledger.coverage["gpu0"] == pytest.approx(0.5)


def test_refinement_invariance():
    timeline = one_request_timeline()
    refined = make_timeline(
        4 * S,
        [
            (0, S // 2, PREFILL),
            (S // 2, 1 * S, PREFILL),
            (1 * S, 3 * S, DECODE),
            (3 * S, 4 * S, IDLE),
        ],
        timeline.requests,
    )
    samples = {"gpu0": constant_samples("gpu0", 217.5)}
    a = attribute(samples, timeline, {"gpu0": "GPU"})
    b = attribute(samples, refined, {"gpu0": "GPU"})
    for phase in (PREFILL, DECODE, IDLE):
        assert a.by_source_phase["gpu0"][phase] == pytest.approx(
            b.by_source_phase["gpu0"][phase], rel=1e-12
        )


# --- per-request sharing --------------------------------------------------------


def test_single_request_gets_phase_totals():
    timeline = one_request_timeline()
    ledger = attribute({"gpu0": constant_samples("gpu0", 100.0)}, timeline, {"gpu0": "GPU"})
    share = ledger.per_request["r1"]
    assert share["prefill_j"] == pytest.approx(ledger.totals["prefill_j"], rel=1e-12)
    assert share["decode_j"] == pytest.approx(ledger.totals["decode_j"], rel=1e-12)


def test_concurrent_decode_split_equally():
    requests = {
        "a": RequestWindow(prefill=(0, S), decode=(S, 3 * S), prompt_tokens=10, generated_tokens=1, complete=True),
        "b": RequestWindow(prefill=(0, S), decode=(S, 3 * S), prompt_tokens=10, generated_tokens=1, complete=True),
    }
    intervals = [(0, S, PREFILL), (S, 3 * S, DECODE), (3 * S, 4 * S, IDLE)]
    timeline = make_timeline(4 * S, intervals, requests)
    ledger = attribute({"gpu0": constant_samples("gpu0", 100.0)}, timeline, {"gpu0": "GPU"})
    assert ledger.totals["decode_j"] == pytest.approx(200.0)
    assert ledger.per_request["a"]["decode_j"] == pytest.approx(100.0)
    assert ledger.per_request["b"]["decode_j"] == pytest.approx(100.0)


def test_concurrent_prefill_split_by_prompt_tokens():
    requests = {
        "a": RequestWindow(prefill=(0, S), decode=(S, 2 * S), prompt_tokens=300, generated_tokens=1, complete=True),
        "b": RequestWindow(prefill=(0, S), decode=(S, 2 * S), prompt_tokens=100, generated_tokens=1, complete=True),
    }
    intervals = [(0, S, PREFILL), (S, 2 * S, DECODE)]
    timeline = make_timeline(2 * S, intervals, requests)
    ledger = attribute({"gpu0": constant_samples("gpu0", 100.0, run_end=2 * S)}, timeline, {"gpu0": "GPU"})
    assert ledger.totals["prefill_j"] == pytest.approx(100.0)
    assert ledger.per_request["a"]["prefill_j"] == pytest.approx(75.0)
    assert ledger.per_request["b"]["prefill_j"] == pytest.approx(25.0)


def test_conservation_on_complete_sessions():
    rng = random.Random(11)
    for _ in range(20):
        run_end = 4 * S
        requests = {}
        for i in range(rng.randint(1, 5)):
            ps = rng.randint(0, run_end - 3 * 10**6) // 10**6 * 10**6
            pe = min(run_end, ps + rng.randint(1, 1000) * 10**6)
            de = min(run_end, pe + rng.randint(1, 2000) * 10**6)
            requests[f"r{i}"] = RequestWindow(
                prefill=(ps, pe),
                decode=(pe, de),
                prompt_tokens=rng.randint(1, 500),
                generated_tokens=rng.randint(0, 100),
                complete=True,
            )
        cuts = sorted({0, run_end} | {t for w in requests.values() for t in (*w.prefill, *w.decode)})
        intervals = []
        from tokenwatt.phases import phase_at

        for a, b in zip(cuts, cuts[1:]):
            if b > a:
                intervals.append((a, b, phase_at(requests, a)))
        timeline = make_timeline(run_end, intervals, requests)
        samples = {
            "gpu0": constant_samples("gpu0", 287.5),
            "cpu0": constant_samples("cpu0", 55.0),
        }
        ledger = attribute(samples, timeline, {"gpu0": "GPU", "cpu0": "CPU"})
        total_shared = sum(
            v["prefill_j"] + v["decode_j"] for v in ledger.per_request.values()
        )
        assert total_shared == pytest.approx(
            ledger.totals["prefill_j"] + ledger.totals["decode_j"], rel=1e-9
        )


def test_request_with_no_overlap_gets_zero():
    requests = {
        "r1": RequestWindow(prefill=(0, S), decode=(S, 2 * S), prompt_tokens=10, generated_tokens=1, complete=True)
    }
    intervals = [(0, S, PREFILL), (S, 2 * S, DECODE)]
    timeline = make_timeline(2 * S, intervals, requests)
    # samples exist only after the run: zero energy anywhere
    samples = {"gpu0": [PowerSample(3 * S, "gpu0", 10.0), PowerSample(4 * S, "gpu0", 10.0)]}
    shares = per_request_energy(samples, timeline, {"gpu0": "GPU"})
    assert shares["r1"] == {"prefill_j": 0.0, "decode_j": 0.0}


# --- serialization ---------------------------------------------------------------


def test_ledger_dict_round_trip():
    timeline = one_request_timeline()
    ledger = attribute({"gpu0": constant_samples("gpu0", 100.0)}, timeline, {"gpu0": "GPU"})
    rebuilt = ledger_from_dict(ledger_to_dict(ledger))
    assert ledger_to_dict(rebuilt) == ledger_to_dict(ledger)


def test_infer_domain_prefixes():
    assert infer_domain("gpu3") == "GPU"
    assert infer_domain("CPU-pkg0") == "CPU"
    assert infer_domain("dram0") == "DRAM"
    assert infer_domain("node") == "NODE"
    assert infer_domain("fan0") == "OTHER"
