import logging
import os
import pathlib
import statistics
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semflow import variants
from semflow.comm import HarnessError, spawn
from semflow.mesh import build_global_box, read_container
from semflow.neknek import SessionFailure
from semflow.reference import dealias_order
from semflow.runtime.autotune import CROSS_CHECK_TOL, TuneInput, autotune, representative_inputs
from semflow.runtime.cases import EXIT_CONFIG, EXIT_HARNESS, EXIT_NUMERICAL, classify, execute_case, run_case, \
    scaling_study
from semflow.runtime.cli import main
from semflow.runtime.config import SCHEMA, SESSION_SCHEMA, ConfigError, parse_config, serialize
from semflow.runtime.timers import TimerTree, emit_stats, format_stats, percent_check
from semflow.solver import SolverError

HERE = pathlib.Path(__file__).parent
CASES = HERE.parent / "cases"

MINIMAL = """
[GENERAL]
dt = 0.1
numSteps = 3
[MESH]
elements = 1 1 1
"""

COND = """
[GENERAL]
dt = 0.05
numSteps = 10
polynomialOrder = 4
[MESH]
elements = 1 1 1
[PROBLEM]
source = manufactured
bcXmin = dirichlet 0
bcXmax = dirichlet 0
[SCALAR]
residualTol = 1e-12
"""


# ---------------------------------------------------------------------------
# configuration

def test_minimal_config_defaults():
    cfg = parse_config(MINIMAL)
    g = cfg["GENERAL"]
    assert g["polynomialOrder"] == 7
    assert g["integratorOrder"] == 2
    assert g["statsInterval"] == 500
    assert cfg["SCALAR"]["residualTol"] == 1e-6
    assert cfg.Nq == dealias_order(7) == 11
    assert cfg["PROBLEM"]["type"] == "conduction"
    assert cfg["COMM"] == {"ranks": 1, "seed": 0, "scheduler": "concurrent"}
    echo = cfg.echo()
    assert "polynomialOrder = 7" in echo and "residualTol = 1e-06" in echo


@pytest.mark.parametrize("text, line, match", [
    ("[GENERAL]\ndt = 0.1\nnumSteps = 1\npolynomialOrder = banana\n[MESH]\nelements = 1 1 1\n", 4, "polynomialOrder"),
    ("[GENERAL]\ndt = 0.1\nnumSteps = 1\n[MESH]\nelements = 1 1 1\nfoo = 3\n", 6, "unknown key"),
    ("[GENERAL]\ndt = 0.1\n[BOGUS]\n", 3, "unknown section"),
    ("[GENERAL]\ndt = 0.1\ndt = 0.2\n", 3, "duplicate key"),
    ("dt = 0.1\n", 1, "outside"),
    ("[GENERAL]\ndt 0.1\n", 2, "key = value"),
    ("[GENERAL]\ndt = -1\nnumSteps = 1\n[MESH]\nelements = 1 1 1\n", 2, "positive"),
    ("[GENERAL]\ndt = 1\nnumSteps = 1\n[MESH]\nelements = 1 1\n", 5, "three"),
])
def test_config_errors_name_line(text, line, match):
    with pytest.raises(ConfigError, match=match) as ei:
        parse_config(text)
    assert ei.value.line == line
    assert str(ei.value).startswith(f"line {line}:")


def test_missing_required_key():
    with pytest.raises(ConfigError, match="numSteps"):
        parse_config("[GENERAL]\ndt = 1\n[MESH]\nelements = 1 1 1\n")


@pytest.mark.parametrize("path", sorted(CASES.glob("*.cfg")), ids=lambda p: p.stem)
def test_shipped_cases_parse_and_roundtrip(path):
    cfg = parse_config(path.read_text())
    again = parse_config(serialize(cfg))
    assert again.sections == cfg.sections
    assert again.sessions == cfg.sessions


_finite = st.floats(1e-6, 1e6, allow_nan=False)


@st.composite
def configs(draw):
    lines = ["[GENERAL]", f"dt = {draw(_finite)!r}", f"numSteps = {draw(st.integers(0, 10**6))}",
             f"polynomialOrder = {draw(st.integers(1, 15))}",
             f"integratorOrder = {draw(st.sampled_from([1, 2, 3]))}",
             f"autotune = {draw(st.booleans())}".lower()]
    E = draw(st.tuples(*[st.integers(1, 9)] * 3))
    lines += ["[MESH]", "elements = " + " ".join(map(str, E)),
              f"deformAmplitude = {draw(st.floats(0, 0.2))!r}"]
    bc = st.sampled_from(["insulated", "symmetry", "dirichlet 1.5", "neumann -2", "dirichlet 0"])
    lines += ["[PROBLEM]", f"Re = {draw(_finite)!r}", f"bcXmin = {draw(bc)}", f"bcZmax = {draw(bc)}",
              f"source = {draw(st.sampled_from(['0', 'sinx', 'manufactured', '2.5']))}"]
    sec = draw(st.sampled_from(["PRESSURE", "VELOCITY", "SCALAR"]))
    lines += [f"[{sec}]", f"residualTol = {draw(_finite)!r}",
              f"preconditioner = {draw(st.sampled_from(['pmg', 'jacobi', 'none']))}",
              f"precision = {draw(st.sampled_from(['FP64', 'FP32']))}",
              "pMGSchedule = " + ", ".join(map(str, draw(st.lists(st.integers(1, 9), min_size=1, max_size=4))))]
    lines += ["[COMM]", f"ranks = {draw(st.integers(1, 16))}", f"seed = {draw(st.integers(0, 2**31))}"]
    return "\n".join(lines) + "\n"


@given(configs())
@settings(max_examples=60, deadline=None)
def test_config_roundtrip(text):
    cfg = parse_config(text)
    again = parse_config(serialize(cfg))
    assert again.sections == cfg.sections
    assert serialize(again) == serialize(cfg)


_keys = sorted({k for s in SCHEMA.values() for k in s} | set(SESSION_SCHEMA))
_token = st.one_of(st.sampled_from(_keys + [f"[{s}]" for s in SCHEMA] + ["[SESSION 0]", "[SESSION 7]", "=", "#"]),
                   st.text(max_size=12))


@given(st.lists(st.lists(_token, max_size=4).map(" ".join), max_size=15).map("\n".join))
@settings(max_examples=300, deadline=None)
def test_config_parsing_is_total(text):
    try:
        parse_config(text)
    except ConfigError:
        pass


# ---------------------------------------------------------------------------
# runtime statistics

def _synthetic_tree():
    tt = TimerTree(clock=lambda: 0.0)
    for s in (49.0, 51.0):
        tt.root.add(s)
    rows = {
        "makef": (14.6, 2), "makeq": (1.25, 2), "udfProperties": (0.004, 2),
        "neknek": (12.0, 2), "neknek/sync": (2.5, 2), "neknek/exchange": (9.25, 2),
        "neknek/exchange/eval kernel": (6.0, 2),
        "velocitySolve": (10.5, 2), "velocitySolve/rhs": (1.5, 2),
        "pressureSolve": (40.0, 2), "pressureSolve/rhs": (2.0, 2), "pressureSolve/preconditioner": (30.0, 24),
        "pressureSolve/preconditioner/pMG smoother L0": (18.0, 48),
        "pressureSolve/preconditioner/pMG smoother L1": (6.0, 48),
        "pressureSolve/preconditioner/coarse grid": (4.5, 24), "pressureSolve/initial guess": (3.0, 2),
        "scalarSolve": (8.0, 2), "scalarSolve/rhs": (0.75, 2), "udfExecuteStep": (0.5, 2),
    }
    for path, (sec, cnt) in rows.items():
        tt.record(path, sec, cnt)
    tt.flops = 1.234567e9
    return tt


def test_stats_golden_file():
    text = format_stats(_synthetic_tree(), 2000, total_elapsed=1037.87)
    assert text == (HERE / "golden_stats.txt").read_text()


def test_stats_abs_column_and_header():
    text = format_stats(_synthetic_tree(), 2000, total_elapsed=1037.87)
    lines = text.splitlines()
    assert lines[0] == "runtime statistics (step= 2000  totalElapsed= 1037.87s):"
    assert lines[2] == "name                    time          abs"
    makef = next(ln for ln in lines if ln.strip().startswith("makef"))
    assert makef[24:36] == "1.46000e+01s"
    assert makef[36:42].strip() == "14.6"
    assert percent_check(text)


def test_stats_empty_tree():
    text = format_stats(TimerTree(), 0, total_elapsed=0.0)
    assert text.splitlines() == ["runtime statistics (step= 0  totalElapsed= 0s):", "",
                                 "name                    time          abs"]


def test_percent_check_flags_overfull_children():
    tt = TimerTree(clock=lambda: 0.0)
    tt.root.add(10.0)
    tt.record("pressureSolve", 6.0)
    tt.record("pressureSolve/rhs", 4.0)
    tt.record("pressureSolve/preconditioner", 3.0)
    assert not percent_check(format_stats(tt, 1, total_elapsed=10.0))
    tt2 = TimerTree(clock=lambda: 0.0)
    tt2.root.add(10.0)
    tt2.record("makef", 6.0)
    tt2.record("scalarSolve", 6.0)
    assert not percent_check(format_stats(tt2, 1, total_elapsed=10.0))


def test_timer_nesting_follows_calls():
    ticks = iter(range(100))
    tt = TimerTree(clock=lambda: float(next(ticks)))
    with tt.step():
        with tt("pressureSolve"):
            with tt("preconditioner"):
                pass
        with tt("makef"):
            pass
    assert tt.get("pressureSolve/preconditioner").elapsed == 1.0
    assert tt.get("pressureSolve").elapsed == 3.0
    assert tt.root.count == 1
    with pytest.raises(RuntimeError):
        with tt("makef"):
            with tt.step():
                pass


def test_stats_reduce_over_ranks_with_different_trees():
    def prog(c):
        tt = TimerTree(clock=lambda: 0.0)
        tt.root.add(10.0 + c.rank)
        tt.record("neknek", 4.0)
        tt.record("neknek/sync", 1.0 + 2 * c.rank)
        tt.record("neknek/exchange", 2.0)
        if c.rank == 0:
            tt.record("velocitySolve", 3.0)
        return format_stats(tt, 5, total_elapsed=1.0, comm=c)

    a, b = spawn(2, prog)
    assert a == b
    lines = {ln.split()[0]: ln for ln in a.splitlines()[3:]}
    assert float(lines["solve"][24:35]) == 10.5
    assert float(lines["sync"][24:35]) == 2.0
    assert float(lines["velocitySolve"][24:35]) == 1.5
    assert float(lines["min"][24:35]) == 10.0 and float(lines["max"][24:35]) == 11.0
    assert percent_check(a)


def test_emit_stats_rank0_only(capsys):
    def prog(c):
        return emit_stats(_synthetic_tree(), 1, total_elapsed=1.0, comm=c)

    spawn(3, prog)
    out = capsys.readouterr().out
    assert out.count("runtime statistics") == 1


# ---------------------------------------------------------------------------
# autotuning

def _toy_registry(*fns, precision=None):
    reg = variants.KernelVariantRegistry()
    for i, fn in enumerate(fns):
        reg.register("toy", f"v{i}", fn, (precision or {}).get(i, "FP64"))
    return reg


def _ones(_=None):
    return np.ones(64)


def _slow_ones(_=None):
    time.sleep(1e-3)
    return np.ones(64)


_TOY = {"toy": TuneInput(lambda f: f(), 64, 1e6, 512.0, ("k",))}


def test_autotune_avoids_sleeping_variant():
    for fns, expect in (((_slow_ones, _ones), 1), ((_ones, _slow_ones), 0)):
        reg = _toy_registry(*fns)
        rep = autotune(reg, _TOY, warmup=5, reps=20)
        assert rep.chosen["toy"] == expect
        assert reg.selected["toy"] == expect
        chosen = [e for e in rep.for_op("toy") if e.chosen]
        assert len(chosen) == 1 and chosen[0].seconds == min(e.seconds for e in rep.for_op("toy"))


def test_autotune_tie_goes_to_lower_index():
    def work(_=None):
        time.sleep(4e-3)
        return np.arange(8.0)

    for _ in range(3):
        reg = _toy_registry(work, work)
        assert autotune(reg, _TOY, warmup=2, reps=9).chosen["toy"] == 0


def test_autotune_disqualifies_disagreeing_variant(caplog):
    def wrong(_=None):
        return np.ones(64) + 1e-9

    reg = _toy_registry(_slow_ones, wrong)
    with caplog.at_level(logging.WARNING, logger="semflow.autotune"):
        rep = autotune(reg, _TOY, warmup=1, reps=3)
    assert rep.chosen["toy"] == 0
    bad = rep.for_op("toy")[1]
    assert bad.disqualified and not bad.chosen and bad.error > CROSS_CHECK_TOL
    assert "disqualified" in caplog.text
    assert "DISQUALIFIED" in rep.format()


def test_autotune_gflops_accounting():
    reg = _toy_registry(_ones, _ones, precision={1: "FP32"})
    rep = autotune(reg, _TOY, warmup=1, reps=5)
    e64, e32 = rep.for_op("toy")
    assert e64.gflops * e64.seconds * 1e9 == pytest.approx(1e6)
    assert e32.gflops * e32.seconds * 1e9 == pytest.approx(0.5e6)
    assert e64.gdofs * e64.seconds * 1e9 == pytest.approx(64)
    assert e64.gbs * e64.seconds * 1e9 == pytest.approx(512)
    assert e64.key == ("k",)


def test_builtin_variants_agree_on_tuning_inputs():
    gm = build_global_box((2, 2, 1), N=5)

    def prog(c):
        m = gm.partition(c.size)[c.rank]
        m.setup_gs(c)
        reg = variants.default_registry()
        return autotune(reg, representative_inputs(m), c, warmup=1, reps=3)

    rep = spawn(2, prog)[0]
    assert {"local_grad", "laplacian_apply", "findpts_eval", "gs_exchange"} <= set(rep.chosen)
    assert not any(e.disqualified for e in rep.entries)
    assert all(e.error <= CROSS_CHECK_TOL for e in rep.entries)


def test_gs_strategy_matches_external_stopwatch():
    gm = build_global_box((4, 2, 2), N=4)

    def prog(c):
        m = gm.partition(c.size)[c.rank]
        m.setup_gs(c)
        reg = variants.default_registry()
        inp = representative_inputs(m)
        rep = autotune(reg, inp, c, ops={"gs_exchange"}, warmup=5, reps=20)
        # independent timing: alternate strategies, barrier-bracketed, rank-max per sample
        u = np.random.default_rng(c.rank).standard_normal(m.coords[:, 0].shape)
        samples = {"per-message": [], "pre-pack": []}
        for _ in range(30):
            for s in samples:
                c.barrier()
                t0 = time.perf_counter()
                m.gs.apply(u, strategy=s)
                c.barrier()
                samples[s].append(c.allreduce(time.perf_counter() - t0, "max"))
        return rep.chosen["gs_exchange"], {s: statistics.median(v) for s, v in samples.items()}

    chosen, med = spawn(4, prog)[0]
    names = ["per-message", "pre-pack"]
    fast, slow = sorted(med.values())
    if slow > 1.2 * fast:
        assert names[chosen] == min(med, key=med.get)
    else:
        # within timing noise: both answers are consistent with the stopwatch
        assert chosen in (0, 1)


# ---------------------------------------------------------------------------
# cases and CLI

def _write(tmp_path, text, name="case.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_conduction_case_outputs(tmp_path):
    res = execute_case(parse_config(COND), tmp_path / "out")
    assert res.status == 0
    assert res.n == 1 * 4**3 and res.E == 1 and res.N == 4
    assert res.stats_blocks == 1 and res.percent_ok
    assert len(res.snapshots) == 1
    c = read_container(res.snapshots[0])
    assert c.E == 1 and "T" in c.fields
    assert os.path.exists(res.snapshots[0].replace(".msem", ".vtk"))
    log_text = (tmp_path / "out" / "logfile.txt").read_text()
    assert log_text.count("runtime statistics") == 1
    assert "gridpoints n = E*N^3    64" in log_text
    assert "autotuning report" in log_text


def test_stats_interval_and_write_interval(tmp_path):
    text = COND.replace("numSteps = 10", "numSteps = 10\nwriteInterval = 5\nstatsInterval = 5")
    res = execute_case(parse_config(text), tmp_path / "o", stats_interval=None)
    assert res.stats_blocks == 2
    assert len(res.snapshots) == 2


def test_forced_and_autotuned_runs_agree(tmp_path):
    cfg = parse_config(COND.replace("elements = 1 1 1", "elements = 2 1 1").replace("[PROBLEM]", "[COMM]\nranks = 2\n[PROBLEM]"))
    a = execute_case(cfg, tmp_path / "a")
    forced = {"laplacian_apply": 0, "local_grad": 0, "findpts_eval": 0, "gs_exchange": 1}
    b = execute_case(cfg, tmp_path / "b", force_variants=forced)
    assert b.tuning["gs_exchange"] == "pre-pack"
    Ta = read_container(a.snapshots[0]).fields["T"]
    Tb = read_container(b.snapshots[0]).fields["T"]
    assert np.max(np.abs(Ta - Tb)) <= 1e-12


def test_taylor_green_case_metrics(tmp_path):
    text = (CASES / "taylor_green.cfg").read_text()
    text = text.replace("numSteps = 100", "numSteps = 4").replace("polynomialOrder = 8", "polynomialOrder = 5")
    text = text.replace("elements = 4 4 1", "elements = 2 2 1")
    res = execute_case(parse_config(text), tmp_path / "tg")
    assert res.status == 0 and res.n == 4 * 5**3
    rows = (tmp_path / "tg" / "metrics.csv").read_text().splitlines()
    assert rows[0] == "step,t,ke,ke_exact,rel_err"
    assert len(rows) == 5
    assert abs(float(rows[-1].split(",")[-1])) < 1e-3


def test_overset_case_reports_neknek_rows(tmp_path):
    text = (CASES / "overset.cfg").read_text().replace("numSteps = 80", "numSteps = 4")
    text = text.replace("polynomialOrder = 6", "polynomialOrder = 3").replace("statsInterval = 40", "statsInterval = 2")
    res = execute_case(parse_config(text), tmp_path / "ov")
    assert res.ranks == 3 and res.n == 6 * 27 and res.percent_ok
    log_text = (tmp_path / "ov" / "logfile.txt").read_text()
    block = log_text.split("runtime statistics")[-1].split("summary:")[0]
    rows = {ln[:24].strip(): float(ln[24:35]) for ln in block.splitlines()[3:] if ln[24:35].strip()}
    assert rows["neknek"] >= rows["sync"] + rows["exchange"] - 1e-5
    assert rows["neknek"] - rows["sync"] - rows["exchange"] <= 0.02 * rows["neknek"] + 1e-4
    assert "eval kernel" in rows
    assert len({s for s in res.snapshots}) == 2


def test_exit_status_mapping():
    assert classify(ConfigError("x")) == EXIT_CONFIG
    assert classify(HarnessError(1, SolverError("x"))) == EXIT_NUMERICAL
    inner = SessionFailure(1, SolverError("x"))
    inner.__cause__ = SolverError("x")
    assert classify(HarnessError(0, inner)) == EXIT_NUMERICAL
    assert classify(HarnessError(2, RuntimeError("boom"))) == EXIT_HARNESS


def test_cli_run_and_mesh_info(tmp_path, capsys):
    case = _write(tmp_path, COND)
    out = tmp_path / "o"
    assert main(["run", case, "-o", str(out), "--force-variant", "gs_exchange=0"]) == 0
    snaps = sorted(out.glob("*.msem"))
    assert len(snaps) == 1
    capsys.readouterr()
    assert main(["mesh-info", str(snaps[0])]) == 0
    info = capsys.readouterr().out
    assert "elements E       1" in info and "gridpoints E*N^3 64" in info
    assert "x-" in info


def test_cli_error_codes(tmp_path, capsys):
    assert main(["run", str(tmp_path / "missing.cfg")]) == EXIT_CONFIG
    bad = _write(tmp_path, "[GENERAL]\ndt = 0.1\nnumSteps = 1\npolynomialOrder = banana\n[MESH]\nelements = 1 1 1\n")
    assert main(["run", bad, "-o", str(tmp_path / "b")]) == EXIT_CONFIG
    assert "line 4" in capsys.readouterr().err
    extents = _write(tmp_path, COND.replace("elements = 1 1 1", "elements = 0 1 1"), "ext.cfg")
    assert main(["run", extents, "-o", str(tmp_path / "c")]) == EXIT_CONFIG
    assert "partition error" in capsys.readouterr().err
    starve = _write(tmp_path, COND.replace("residualTol = 1e-12", "residualTol = 1e-14\nmaxIterations = 2"), "n.cfg")
    assert main(["run", starve, "-o", str(tmp_path / "d")]) == EXIT_NUMERICAL
    assert main(["run", _write(tmp_path, COND, "f.cfg"), "--force-variant", "nope=3"]) == EXIT_CONFIG
    assert main(["mesh-info", bad]) == EXIT_CONFIG


def test_cli_tune_prints_report(tmp_path, capsys):
    assert main(["tune", _write(tmp_path, COND)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("autotuning report:")
    assert "laplacian_apply" in out and "selected" in out


def test_scaling_study(tmp_path):
    cfg = parse_config(COND.replace("elements = 1 1 1", "elements = 2 2 1").replace("numSteps = 10", "numSteps = 2"))
    rows, n08 = scaling_study(cfg, [2, 1], tmp_path)
    assert [r[0] for r in rows] == [1, 2]
    assert rows[0][3] == 1.0
    assert rows[1][1] == 4 * 4**3 / 2
    assert n08 is None or n08 > 0


def test_run_case_returns_zero(tmp_path):
    assert run_case(parse_config(COND), tmp_path) == 0
