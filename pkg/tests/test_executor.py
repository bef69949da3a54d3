import threading
import time

import pytest

from benchforge import DEMO_DIR
from benchforge.errors import ExecutorError, MachineError, UnknownHandleError
from benchforge.executor import (
    JobHandle,
    JobRequest,
    JobState,
    JobStatus,
    LocalExecutor,
    MachineSpec,
    MockBatchExecutor,
    Resources,
    build_env,
    load_machines,
)


def machine(capacity=2, delay=0, run_ticks=1, seed=0, max_nodes=4):
    return MachineSpec.from_dict({
        "name": "m",
        "seed": seed,
        "internet_access_node_classes": ["login"],
        "node_classes": {
            "login": {"capacity": 1, "max_nodes": 1},
            "compute": {"capacity": capacity, "max_nodes": max_nodes, "queue_delay": delay, "run_ticks": run_ticks},
        },
    })


def req(tmp_path, name, *commands, **kw):
    return JobRequest(commands or ("true",), tmp_path / name, **kw)


@pytest.fixture
def local():
    ex = LocalExecutor(max_workers=4, grace_period=2.0)
    yield ex
    ex.shutdown()


class TestValues:
    def test_resources_positive(self):
        with pytest.raises(ExecutorError, match="nodes"):
            Resources(nodes=0)
        with pytest.raises(ExecutorError):
            Resources(threads_per_task=-1)

    def test_commands_required(self, tmp_path):
        with pytest.raises(ExecutorError):
            JobRequest((), tmp_path)

    def test_status_exit_code_rule(self):
        assert JobStatus(JobState.SUCCEEDED, 0).exit_code == 0
        for bad in [(JobState.SUCCEEDED, None), (JobState.SUCCEEDED, 1), (JobState.FAILED, 0), (JobState.QUEUED, 0)]:
            with pytest.raises(ExecutorError):
                JobStatus(*bad)

    def test_build_env_allowlist_then_overlay(self):
        env = build_env(["PATH", "HOME"], {"HOME": "/h", "X": 1}, base={"PATH": "/bin", "SECRET": "s", "HOME": "/old"})
        assert env == {"PATH": "/bin", "HOME": "/h", "X": "1"}


class TestLocal:
    def test_runs_immediately(self, local, tmp_path):
        h = local.submit(req(tmp_path, "a", "echo hello"))
        (st,) = local.wait_all([h], timeout=10)
        assert st.state is JobState.SUCCEEDED and st.exit_code == 0
        assert (tmp_path / "a/stdout.txt").read_text() == "hello\n"
        # terminal statuses are stable
        assert local.poll(h) == local.poll(h) == st

    def test_fail_fast_exit_code(self, local, tmp_path):
        h = local.submit(req(tmp_path, "a", "echo one", "exit 3", "echo never"))
        (st,) = local.wait_all([h], timeout=10)
        assert st.state is JobState.FAILED and st.exit_code == 3
        assert (tmp_path / "a/stdout.txt").read_text() == "one\n"

    def test_env_is_restricted(self, local, tmp_path, monkeypatch):
        monkeypatch.setenv("LEAKY_SECRET", "x")
        h = local.submit(req(tmp_path, "a", 'echo "[$LEAKY_SECRET][$MINE]"', env={"MINE": "ok"}))
        local.wait_all([h], timeout=10)
        assert (tmp_path / "a/stdout.txt").read_text() == "[][ok]\n"

    def test_unknown_handle(self, local):
        with pytest.raises(UnknownHandleError):
            local.poll(JobHandle("nope", 0.0))
        with pytest.raises(UnknownHandleError):
            local.cancel(JobHandle("nope", 0.0))

    def test_unknown_node_class_and_limits(self, tmp_path):
        ex = LocalExecutor(max_nodes=2)
        with pytest.raises(ExecutorError, match="node class"):
            ex.submit(req(tmp_path, "a", node_class="gpu"))
        with pytest.raises(ExecutorError, match="exceed"):
            ex.submit(req(tmp_path, "a", resources=Resources(nodes=3)))
        ex.shutdown()
        with pytest.raises(ExecutorError, match="shut down"):
            ex.submit(req(tmp_path, "a"))

    def test_wait_all_empty(self, local):
        assert local.wait_all([], timeout=0) == []

    def test_wait_returns_after_last(self, local, tmp_path):
        hs = [local.submit(req(tmp_path, f"j{i}", f"sleep {0.05 * i}")) for i in range(3)]
        sts = local.wait_all(hs, timeout=10)
        assert [s.state for s in sts] == [JobState.SUCCEEDED] * 3

    def test_hung_job_times_out(self, local, tmp_path):
        hs = [local.submit(req(tmp_path, "a", "true")), local.submit(req(tmp_path, "b", "true")),
              local.submit(req(tmp_path, "c", "sleep 60"))]
        t0 = time.monotonic()
        sts = local.wait_all(hs, timeout=1.5)
        assert time.monotonic() - t0 < 10
        assert [s.state for s in sts] == [JobState.SUCCEEDED, JobState.SUCCEEDED, JobState.TIMED_OUT]
        assert local.poll(hs[2]).state is JobState.TIMED_OUT

    def test_cancel_running_within_grace(self, local, tmp_path):
        h = local.submit(req(tmp_path, "a", "sleep 60"))
        deadline = time.monotonic() + 5
        while local.poll(h).state is not JobState.RUNNING and time.monotonic() < deadline:
            time.sleep(0.01)
        t0 = time.monotonic()
        st = local.cancel(h)
        assert st.state is JobState.CANCELLED
        assert time.monotonic() - t0 < local.grace_period + 1

    def test_cancel_succeeded_is_noop(self, local, tmp_path):
        h = local.submit(req(tmp_path, "a"))
        local.wait_all([h], timeout=10)
        assert local.cancel(h).state is JobState.SUCCEEDED

    def test_cancel_queued(self, tmp_path):
        ex = LocalExecutor(max_workers=1, grace_period=1.0)
        first = ex.submit(req(tmp_path, "a", "sleep 60"))
        second = ex.submit(req(tmp_path, "b", "echo ran"))
        assert ex.cancel(second).state is JobState.CANCELLED
        ex.cancel(first)
        ex.wait_all([first, second], timeout=5)
        assert ex.poll(second).state is JobState.CANCELLED
        assert not (tmp_path / "b/stdout.txt").exists()
        ex.shutdown()

    def test_concurrent_submits_unique_ids(self, local, tmp_path):
        handles = []
        lock = threading.Lock()

        def go(i):
            h = local.submit(req(tmp_path, f"t{i}"))
            with lock:
                handles.append(h)

        threads = [threading.Thread(target=go, args=(i,)) for i in range(20)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len({h.job_id for h in handles}) == 20
        assert all(s.state is JobState.SUCCEEDED for s in local.wait_all(handles, timeout=30))


class TestMock:
    def test_third_job_queued_until_slot_frees(self, tmp_path):
        ex = MockBatchExecutor(machine(capacity=2, run_ticks=2))
        hs = [ex.submit(req(tmp_path, f"j{i}")) for i in range(3)]
        ex.advance(0)
        assert [ex._job(h).state for h in hs] == [JobState.RUNNING, JobState.RUNNING, JobState.QUEUED]
        ex.wait_all(hs)
        trace = ex.trace
        start3 = next(t for t, j, s in trace if j == hs[2].job_id and s == "running")
        done = [t for t, j, s in trace if j in (hs[0].job_id, hs[1].job_id) and s == "succeeded"]
        assert start3 >= min(done) == 2
        assert ex.max_running_seen["compute"] == 2

    def test_queue_delay_three_polls(self, tmp_path):
        ex = MockBatchExecutor(machine(delay=3))
        h = ex.submit(req(tmp_path, "a"))
        states = [ex.poll(h).state for _ in range(6)]
        assert states[:3] == [JobState.QUEUED] * 3
        assert states[3] is JobState.RUNNING
        assert states[4:] == [JobState.SUCCEEDED] * 2

    def test_terminal_stable(self, tmp_path):
        ex = MockBatchExecutor(machine())
        h = ex.submit(req(tmp_path, "a"))
        ex.wait_all([h])
        assert all(ex.poll(h).state is JobState.SUCCEEDED and ex.poll(h).exit_code == 0 for _ in range(5))

    def test_failure_exit_code(self, tmp_path):
        ex = MockBatchExecutor(machine())
        h = ex.submit(req(tmp_path, "a", "exit 7"))
        (st,) = ex.wait_all([h])
        assert st.state is JobState.FAILED and st.exit_code == 7

    def test_errors(self, tmp_path):
        ex = MockBatchExecutor(machine(max_nodes=2))
        with pytest.raises(ExecutorError, match="node class"):
            ex.submit(req(tmp_path, "a", node_class="gpu"))
        with pytest.raises(ExecutorError, match="exceed"):
            ex.submit(req(tmp_path, "a", resources=Resources(nodes=3)))
        with pytest.raises(UnknownHandleError):
            ex.poll(JobHandle("x", 0))
        ex.shutdown()
        with pytest.raises(ExecutorError):
            ex.submit(req(tmp_path, "a"))

    def test_internet_rule(self, tmp_path):
        ex = MockBatchExecutor(machine())
        with pytest.raises(ExecutorError, match="internet"):
            ex.submit(req(tmp_path, "a", node_class="compute", needs_internet=True))
        h = ex.submit(req(tmp_path, "b", node_class="login", needs_internet=True))
        assert ex.wait_all([h])[0].state is JobState.SUCCEEDED

    def test_cancel(self, tmp_path):
        ex = MockBatchExecutor(machine(capacity=1, run_ticks=5))
        a = ex.submit(req(tmp_path, "a"))
        b = ex.submit(req(tmp_path, "b"))
        ex.advance(0)
        assert ex.cancel(b).state is JobState.CANCELLED
        assert ex.cancel(a).state is JobState.CANCELLED
        c = ex.submit(req(tmp_path, "c"))
        ex.wait_all([c])
        assert ex.cancel(c).state is JobState.SUCCEEDED

    def test_wait_all_timeout_ticks(self, tmp_path):
        ex = MockBatchExecutor(machine(capacity=1, run_ticks=10))
        a = ex.submit(req(tmp_path, "a"))
        b = ex.submit(req(tmp_path, "b"))
        sts = ex.wait_all([a, b], timeout=3)
        assert [s.state for s in sts] == [JobState.TIMED_OUT] * 2
        assert ex.wait_all([]) == []

    def test_fifo_and_capacity(self, tmp_path):
        ex = MockBatchExecutor(machine(capacity=2, delay={"min": 0, "max": 2}, run_ticks=3, seed=5))
        hs = [ex.submit(req(tmp_path, f"j{i}")) for i in range(8)]
        ex.wait_all(hs)
        starts = [next(t for t, j, s in ex.trace if j == h.job_id and s == "running") for h in hs]
        assert starts == sorted(starts)
        # replay the trace and check the running count at every instant
        running = 0
        for _, _, s in ex.trace:
            running += {"running": 1, "succeeded": -1, "failed": -1}.get(s, 0)
            assert running <= 2

    def test_deterministic_trace(self, tmp_path):
        def once(sub):
            ex = MockBatchExecutor(machine(capacity=3, delay={"min": 0, "max": 4}, run_ticks=2, seed=9))
            hs = [ex.submit(req(tmp_path / sub, f"j{i}")) for i in range(10)]
            ex.wait_all(hs)
            return ex.trace_text()

        assert once("x") == once("y")

    def test_machine_env_overlay(self, tmp_path):
        m = MachineSpec.from_dict({"name": "e", "env": {"MACHINE_VAR": "m"}, "node_classes": {"compute": {}}})
        ex = MockBatchExecutor(m)
        h = ex.submit(req(tmp_path, "a", 'echo "$MACHINE_VAR $JOB_VAR"', env={"JOB_VAR": "j"}))
        ex.wait_all([h])
        assert (tmp_path / "a/stdout.txt").read_text() == "m j\n"


class TestMachines:
    def test_demo_machines(self):
        ms = load_machines(DEMO_DIR / "machines")
        assert {"mock-A", "mock-B"} <= set(ms)
        a = ms["mock-A"]
        assert a.internet_access_node_classes == ("login",)
        assert a.stage_resources("Execution").nodes == "{{run.nodes}}"
        assert a.stage_resources("Plot").node_class == a.stages["default"].node_class

    @pytest.mark.parametrize("data", [
        {"name": "x"},
        {"name": "x", "node_classes": {"c": {"queue_delay": {"min": 3, "max": 1}}}},
        {"name": "x", "node_classes": {"c": {}}, "internet_access_node_classes": ["ghost"]},
        {"name": "x", "node_classes": {"c": {}}, "stages": {"Build": {"node_class": "ghost"}}},
    ])
    def test_bad_machine(self, data):
        with pytest.raises(MachineError):
            MachineSpec.from_dict(data)
