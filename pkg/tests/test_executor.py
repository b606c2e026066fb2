import os
import random
import sys
import threading
import time

import numpy as np
import pytest

from jeeva import pipeline
from jeeva.core import TaskKind
from jeeva.executor import (
    DependencyEntry,
    DependencyRegistry,
    DictModels,
    DirModels,
    DispatchError,
    ExecutorTaskError,
    NonZeroExit,
    TaskSandbox,
    TaskTimeout,
    UnknownDependency,
    run_dependency,
    run_inline,
    run_task,
)
from jeeva.fixtures import write_model_dir
from jeeva.protocol import TaskPackage

from conftest import WINDOW, random_sequence


@pytest.fixture
def model_source(random_models):
    return DictModels(random_models)


class TestInlineDispatch:
    def test_profile_stage(self, model_source):
        out = run_inline(TaskPackage.inline("A", {"backend": "onehot"},
                                            {"sequence": b"AC"}), model_source)
        profile = pipeline.blob_to_array(out["profile"])
        assert profile.shape == (2, 20)
        assert profile[0, 0] == 1.0

    def test_create_vector_matches_direct_call(self, model_source, tables,
                                               tables_text):
        rng = random.Random(3)
        seq = random_sequence(rng, 25)
        profile = pipeline.generate_profile(seq, pipeline.OneHotBackend())
        out = run_inline(TaskPackage.inline(
            "B", {"window": WINDOW},
            {"profile": pipeline.array_to_blob(profile.rows),
             "sequence": seq.residues.encode(),
             "tables": tables_text.encode()}), model_source)
        direct = pipeline.create_feature_vectors(profile, seq, tables, WINDOW)
        assert np.array_equal(pipeline.blob_to_array(out["features"]),
                              direct.vectors)

    def test_classifier_stage_matches_direct_call(self, model_source,
                                                  random_models, tables):
        rng = random.Random(5)
        seq = random_sequence(rng, 12)
        profile = pipeline.generate_profile(seq, pipeline.OneHotBackend())
        features = pipeline.create_feature_vectors(profile, seq, tables, WINDOW)
        out = run_inline(TaskPackage.inline(
            "C", {"model_ref": "HH"},
            {"features": pipeline.array_to_blob(features.vectors)}), model_source)
        direct = pipeline.run_classifier(TaskKind.CLASS_HH, features,
                                         random_models[TaskKind.CLASS_HH])
        assert np.array_equal(pipeline.blob_to_array(out["posteriors"]),
                              direct.posteriors)

    def test_final_stage(self, model_source, random_models, tables):
        rng = random.Random(7)
        seq = random_sequence(rng, 9)
        profile = pipeline.generate_profile(seq, pipeline.OneHotBackend())
        features = pipeline.create_feature_vectors(profile, seq, tables, WINDOW)
        blobs = {"sequence": seq.residues.encode()}
        outs = []
        for kind in (TaskKind.CLASS_HH, TaskKind.CLASS_SS, TaskKind.CLASS_TT,
                     TaskKind.CLASS_HS, TaskKind.CLASS_ST, TaskKind.CLASS_TH):
            o = pipeline.run_classifier(kind, features, random_models[kind])
            outs.append(o)
            blobs[f"post_{kind.letter}"] = pipeline.array_to_blob(o.posteriors)
        got = run_inline(TaskPackage.inline("I", {"job_id": "jz"}, blobs),
                         model_source)
        expected = pipeline.combine_predictions(outs, seq, job_id="jz")
        assert got["result"] == pipeline.result_to_blob(expected)

    def test_unknown_model_ref(self, model_source):
        with pytest.raises(DispatchError):
            run_inline(TaskPackage.inline(
                "C", {"model_ref": "nope"},
                {"features": pipeline.array_to_blob(np.zeros((1, 4)))}),
                model_source)

    def test_external_backend_not_inline(self, model_source):
        with pytest.raises(DispatchError):
            run_inline(TaskPackage.inline("A", {"backend": "external"},
                                          {"sequence": b"AC"}), model_source)

    def test_dir_models(self, tmp_path, random_models, tables):
        write_model_dir(str(tmp_path), random_models, tables)
        src = DirModels(str(tmp_path))
        model = src.resolve("HS")
        assert model.kind == TaskKind.CLASS_HS
        assert src.resolve("HS") is model  # cached
        with pytest.raises(DispatchError):
            src.resolve("XX")


class TestRegistry:
    def test_parse_file(self, tmp_path):
        path = tmp_path / "deps.txt"
        path.write_text(
            "# deployed deps\n"
            "blast-nr 2.2 /usr/bin/blastpgp -d nr /data/blast\n"
            "sleep 1 /bin/sleep -\n")
        reg = DependencyRegistry.parse_file(str(path))
        assert len(reg) == 2
        entry = reg.lookup("blast-nr", "2.2")
        assert entry.command == "/usr/bin/blastpgp"
        assert entry.fixed_args == ("-d", "nr")
        assert entry.data_dir == "/data/blast"
        assert reg.lookup("sleep", "1").data_dir == ""

    def test_parse_errors(self, tmp_path):
        path = tmp_path / "deps.txt"
        path.write_text("too few\n")
        with pytest.raises(ValueError):
            DependencyRegistry.parse_file(str(path))

    def test_unknown_dependency(self):
        reg = DependencyRegistry()
        pkg = TaskPackage.dependency_ref("blast-nr", "1")
        sandbox = TaskSandbox(None, "t")
        try:
            with pytest.raises(UnknownDependency):
                run_task(pkg, DictModels({}), reg, sandbox)
        finally:
            sandbox.cleanup()


def _script_entry(tmp_path, name, body):
    path = tmp_path / name
    path.write_text(body)
    return DependencyEntry(name=name, version="1", command=sys.executable,
                           fixed_args=(str(path),), data_dir="")


class TestDependencyRun:
    def test_collects_declared_outputs(self, tmp_path):
        entry = _script_entry(
            tmp_path, "emit",
            "open('out.txt','w').write(open('in.txt').read().upper())")
        reg = DependencyRegistry([entry])
        pkg = TaskPackage.dependency_ref("emit", "1", blobs={"in.txt": b"abc"},
                                         output_files=("out.txt",))
        sandbox = TaskSandbox(str(tmp_path), "t1")
        try:
            out = run_dependency(pkg, reg, sandbox, limit_s=10)
        finally:
            sandbox.cleanup()
        assert out == {"out.txt": b"ABC"}

    def test_missing_output(self, tmp_path):
        entry = _script_entry(tmp_path, "noop", "pass")
        reg = DependencyRegistry([entry])
        pkg = TaskPackage.dependency_ref("noop", "1", output_files=("gone.txt",))
        sandbox = TaskSandbox(str(tmp_path), "t2")
        try:
            with pytest.raises(ExecutorTaskError):
                run_dependency(pkg, reg, sandbox, limit_s=10)
        finally:
            sandbox.cleanup()

    def test_nonzero_exit_keeps_stderr(self, tmp_path):
        entry = _script_entry(tmp_path, "boom",
                              "import sys; sys.stderr.write('kaput'); sys.exit(3)")
        reg = DependencyRegistry([entry])
        pkg = TaskPackage.dependency_ref("boom", "1")
        sandbox = TaskSandbox(str(tmp_path), "t3")
        try:
            with pytest.raises(NonZeroExit) as exc:
                run_dependency(pkg, reg, sandbox, limit_s=10)
        finally:
            sandbox.cleanup()
        assert exc.value.code == 3
        assert "kaput" in str(exc.value)

    def test_timeout(self, tmp_path):
        entry = DependencyEntry(name="sleep", version="1", command="/bin/sleep",
                                fixed_args=(), data_dir="")
        reg = DependencyRegistry([entry])
        pkg = TaskPackage.dependency_ref("sleep", "1", args=("5",))
        sandbox = TaskSandbox(str(tmp_path), "t4")
        start = time.monotonic()
        try:
            with pytest.raises(TaskTimeout):
                run_dependency(pkg, reg, sandbox, limit_s=0.3)
        finally:
            sandbox.cleanup()
        assert time.monotonic() - start < 3.0

    def test_env_scrubbed_and_cwd_isolated(self, tmp_path):
        entry = _script_entry(
            tmp_path, "env",
            "import os, json\n"
            "open('env.json','w').write(json.dumps("
            "{'cwd': os.getcwd(), 'home': os.environ.get('HOME'),"
            " 'data': os.environ.get('JEEVA_DEP_DATA'),"
            " 'leak': os.environ.get('SOME_SECRET')}))")
        os.environ["SOME_SECRET"] = "leakme"
        try:
            entry = DependencyEntry(name="env", version="1", command=entry.command,
                                    fixed_args=entry.fixed_args, data_dir="/data/x")
            reg = DependencyRegistry([entry])
            pkg = TaskPackage.dependency_ref("env", "1", output_files=("env.json",))
            sandbox = TaskSandbox(str(tmp_path), "t5")
            try:
                out = run_dependency(pkg, reg, sandbox, limit_s=10)
                import json

                info = json.loads(out["env.json"])
                assert info["cwd"] == os.path.realpath(sandbox.path) or \
                    info["cwd"] == sandbox.path
                assert info["home"] == sandbox.path
                assert info["data"] == "/data/x"
                assert info["leak"] is None
            finally:
                sandbox.cleanup()
        finally:
            del os.environ["SOME_SECRET"]


class TestAbortRace:
    """Exactly one outcome message per assignment, whichever side wins."""

    def _service(self, tmp_path, registry=None):
        from jeeva.executor import ExecutorService

        service = ExecutorService(("127.0.0.1", 1), "race-exec", slots=2,
                                  registry=registry, work_root=str(tmp_path))
        sent = []
        service._send_result = sent.append  # capture instead of network
        service._send = lambda msg: sent.append(msg)
        return service, sent

    def _wait_results(self, sent, n, timeout=10.0):
        from jeeva.protocol import TaskResult

        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            results = [m for m in sent if isinstance(m, TaskResult)]
            if len(results) >= n:
                return results
            time.sleep(0.01)
        raise AssertionError(f"expected {n} results, saw {sent}")

    def test_abort_wins_running_command_killed(self, tmp_path):
        from jeeva.protocol import AssignTask, TaskPackage
        from jeeva.scheduler import ABORT_ACK

        entry = DependencyEntry(name="sleep", version="1", command="/bin/sleep",
                                fixed_args=(), data_dir="")
        service, sent = self._service(tmp_path, DependencyRegistry([entry]))
        pkg = TaskPackage.dependency_ref("sleep", "1", args=("30",))
        service._handle_assign(AssignTask(task_id="t-abort", package=pkg))
        deadline = time.monotonic() + 5
        while True:
            with service._slots_lock:
                ctx = service._running.get("t-abort")
            if ctx is not None:
                with ctx.lock:
                    if ctx.proc is not None:
                        break
            assert time.monotonic() < deadline
            time.sleep(0.01)
        start = time.monotonic()
        service.handle_abort("t-abort")
        results = self._wait_results(sent, 1)
        assert time.monotonic() - start < 5.0  # killed, not waited out
        assert results[0].error == ABORT_ACK
        assert len(results) == 1

    def test_natural_completion_wins(self, tmp_path, random_models):
        from jeeva.executor import DictModels
        from jeeva.protocol import AssignTask, TaskPackage

        service, sent = self._service(tmp_path)
        service.models = DictModels(random_models)
        pkg = TaskPackage.inline("A", {"backend": "onehot"}, {"sequence": b"MKV"})
        service._handle_assign(AssignTask(task_id="t-fast", package=pkg))
        results = self._wait_results(sent, 1)
        assert results[0].outputs is not None
        # late abort: the outcome was already sent, nothing more goes out
        service.handle_abort("t-fast")
        time.sleep(0.1)
        assert len(self._wait_results(sent, 1)) == 1

    def test_abort_unknown_local_task(self, tmp_path):
        from jeeva.protocol import Error

        service, sent = self._service(tmp_path)
        service.handle_abort("ghost")
        errors = [m for m in sent if isinstance(m, Error)]
        assert len(errors) == 1
        assert errors[0].code == "UnknownLocalTask"
        assert errors[0].ref == "ghost"


class TestSandboxIsolation:
    def test_concurrent_tasks_do_not_share_directories(self, tmp_path):
        # both tasks write the same filename; isolation keeps them distinct
        entry = _script_entry(
            tmp_path, "writer",
            "import sys, time, os\n"
            "time.sleep(0.2)\n"
            "open('shared.txt','w').write(open('tag.txt').read())\n")
        reg = DependencyRegistry([entry])
        results = {}
        paths = {}

        def run(tag):
            pkg = TaskPackage.dependency_ref("writer", "1",
                                             blobs={"tag.txt": tag.encode()},
                                             output_files=("shared.txt",))
            sandbox = TaskSandbox(str(tmp_path), f"task-{tag}")
            paths[tag] = sandbox.path
            try:
                results[tag] = run_dependency(pkg, reg, sandbox, limit_s=10)
            finally:
                sandbox.cleanup()

        threads = [threading.Thread(target=run, args=(t,)) for t in ("one", "two")]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert paths["one"] != paths["two"]
        assert results["one"]["shared.txt"] == b"one"
        assert results["two"]["shared.txt"] == b"two"

    def test_sandbox_removed_after_cleanup(self, tmp_path):
        sandbox = TaskSandbox(str(tmp_path), "gone")
        assert os.path.isdir(sandbox.path)
        sandbox.cleanup()
        assert not os.path.exists(sandbox.path)
