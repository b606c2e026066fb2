import os
import threading
import time

import pytest

from jeeva import pipeline
from jeeva.client import (
    JobDriver,
    JobFailed,
    NullPackageBuilder,
    PipelinePackageBuilder,
)
from jeeva.core import validate_sequence
from jeeva.executor import DictModels, run_inline
from jeeva.scheduler import ABORTED, COMPLETED, FAILED
from jeeva.store import (
    BadTransition,
    DISPATCHED,
    PENDING,
    RequestRecord,
    Store,
    StoreError,
    UnknownRequest,
    UserRecord,
    result_obj,
)


class TestJobDriver:
    def _driver(self):
        return JobDriver("j1", validate_sequence("MKVLA"), NullPackageBuilder())

    def test_precedence_order_and_exact_nine_submissions(self):
        driver = self._driver()
        first = driver.start()
        assert [s.task_id for s in first] == ["j1-A"]
        total = list(first)
        subs = driver.on_terminal("j1-A", COMPLETED, outputs={})
        assert [s.task_id for s in subs] == ["j1-B"]
        total += subs
        subs = driver.on_terminal("j1-B", COMPLETED, outputs={})
        # C..H submitted together, before any of them completes
        assert sorted(s.task_id for s in subs) == [f"j1-{x}" for x in "CDEFGH"]
        total += subs
        for x in "CDEFG":
            assert driver.on_terminal(f"j1-{x}", COMPLETED, outputs={}) == []
        subs = driver.on_terminal("j1-H", COMPLETED, outputs={})
        assert [s.task_id for s in subs] == ["j1-I"]
        total += subs
        assert not driver.done
        driver.on_terminal("j1-I", COMPLETED, outputs={})
        assert driver.done
        assert len(total) == 9

    def test_failure_gates_downstream(self):
        driver = self._driver()
        driver.start()
        driver.on_terminal("j1-A", COMPLETED, outputs={})
        subs = driver.on_terminal("j1-B", FAILED, reason="bad profile")
        assert subs == []
        assert driver.done
        with pytest.raises(JobFailed) as exc:
            driver.result()
        assert exc.value.task_id == "j1-B"
        assert exc.value.reason == "bad profile"

    def test_aborted_counts_as_failure(self):
        driver = self._driver()
        driver.start()
        driver.on_terminal("j1-A", ABORTED)
        assert driver.done
        with pytest.raises(JobFailed):
            driver.result()

    def test_in_process_pipeline_through_driver(self, random_models, tables,
                                                tables_text):
        seq = validate_sequence("MKVLANDERQ")
        builder = PipelinePackageBuilder(tables_text, window=15)
        driver = JobDriver("jd", seq, builder)
        models = DictModels(random_models)
        pending = driver.start()
        while pending:
            nxt = []
            for sub in pending:
                outputs = run_inline(sub.package, models)
                nxt.extend(driver.on_terminal(sub.task_id, COMPLETED,
                                              outputs=outputs))
            pending = nxt
        assert driver.done
        expected = pipeline.run_sequential(seq, random_models, tables,
                                           window=15, job_id="jd")
        assert pipeline.result_to_blob(driver.result()) == \
            pipeline.result_to_blob(expected)


def _request(rid, owner="", submitted_at=None, **kw):
    if submitted_at is None:
        submitted_at = time.time()
    return RequestRecord(request_id=rid, owner=owner, header=f"h-{rid}",
                         sequence="MKVLA", submitted_at=submitted_at, **kw)


class TestStoreBasics:
    def test_add_get_and_duplicate(self, tmp_path):
        store = Store(str(tmp_path))
        store.add_request(_request("r1"))
        assert store.get_request("r1").state == PENDING
        with pytest.raises(StoreError):
            store.add_request(_request("r1"))

    def test_transitions(self, tmp_path):
        store = Store(str(tmp_path))
        store.add_request(_request("r1"))
        claimed = store.claim_pending()
        assert [r.request_id for r in claimed] == ["r1"]
        assert store.get_request("r1").state == DISPATCHED
        seq = validate_sequence("MKVLA")
        from jeeva.core import PredictionResult, StructureString

        result = PredictionResult(job_id="r1", sequence=seq,
                                  structure=StructureString("HHECC"),
                                  confidence=(0.5,) * 5)
        store.complete_request("r1", result)
        rec = store.get_request("r1")
        assert rec.state == "completed"
        assert rec.result == result_obj(result)
        # idempotent re-delivery
        store.complete_request("r1", result)
        with pytest.raises(BadTransition):
            store.fail_request("r1", "nope")

    def test_release_for_redispatch(self, tmp_path):
        store = Store(str(tmp_path))
        store.add_request(_request("r1"))
        store.claim_pending()
        store.release_request("r1")
        assert store.get_request("r1").state == PENDING
        assert [r.request_id for r in store.claim_pending()] == ["r1"]

    def test_fail_then_delete(self, tmp_path):
        store = Store(str(tmp_path))
        store.add_request(_request("r1"))
        store.claim_pending()
        store.fail_request("r1", "task j1-B: bad profile")
        assert store.get_request("r1").failure_reason == "task j1-B: bad profile"
        store.delete_request("r1")
        assert store.get_request("r1") is None
        with pytest.raises(UnknownRequest):
            store.delete_request("r1")

    def test_history_sorted_newest_first(self, tmp_path):
        store = Store(str(tmp_path))
        for i in range(3):
            store.add_request(_request(f"r{i}", owner="u1", submitted_at=float(i)))
        store.add_request(_request("other", owner="u2", submitted_at=10.0))
        mine = store.requests_for("u1")
        assert [r.request_id for r in mine] == ["r2", "r1", "r0"]

    def test_users(self, tmp_path):
        store = Store(str(tmp_path))
        store.put_user(UserRecord(user_id="u1", name="A", email="a@x",
                                  password_hash="h", salt="s", created_at=1.0))
        assert store.find_user_by_email("a@x").user_id == "u1"
        with pytest.raises(StoreError):
            store.put_user(UserRecord(user_id="u2", name="B", email="a@x",
                                      password_hash="h", salt="s", created_at=2.0))


class TestDurability:
    def test_reopen_replays_journal(self, tmp_path):
        store = Store(str(tmp_path))
        store.add_request(_request("r1"))
        store.claim_pending()
        again = Store(str(tmp_path))
        assert again.get_request("r1").state == DISPATCHED

    def test_compaction_preserves_state(self, tmp_path):
        store = Store(str(tmp_path))
        for i in range(20):
            store.add_request(_request(f"r{i}", submitted_at=float(i)))
        store.claim_pending()
        compacted = Store(str(tmp_path), compact=True)
        assert len(compacted.all_requests()) == 20
        assert all(r.state == DISPATCHED for r in compacted.all_requests())
        assert os.path.getsize(compacted.journal_path) == 0
        # journal keeps working after compaction
        compacted.add_request(_request("extra"))
        third = Store(str(tmp_path))
        assert third.get_request("extra") is not None

    def test_torn_tail_line_ignored(self, tmp_path):
        store = Store(str(tmp_path))
        store.add_request(_request("r1"))
        with open(store.journal_path, "ab") as fh:
            fh.write(b'{"kind":"request","data":{"request_id":"torn"')  # no newline
        again = Store(str(tmp_path))
        assert again.get_request("r1") is not None
        assert again.get_request("torn") is None

    def test_cross_instance_visibility(self, tmp_path):
        a = Store(str(tmp_path))
        b = Store(str(tmp_path))
        a.add_request(_request("r1"))
        assert b.get_request("r1") is not None
        b.claim_pending()
        assert a.get_request("r1").state == DISPATCHED


class TestConcurrentClaims:
    def test_each_request_claimed_exactly_once(self, tmp_path):
        seed = Store(str(tmp_path))
        for i in range(100):
            seed.add_request(_request(f"r{i:03d}", submitted_at=float(i)))
        claims: dict[str, list[str]] = {"a": [], "b": []}

        def poller(name):
            store = Store(str(tmp_path))
            while True:
                got = store.claim_pending(limit=7)
                if not got:
                    if not store.claim_pending():
                        break
                claims[name].extend(r.request_id for r in got)

        threads = [threading.Thread(target=poller, args=(n,)) for n in claims]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        all_claimed = claims["a"] + claims["b"]
        assert len(all_claimed) == len(set(all_claimed))
        check = Store(str(tmp_path))
        assert all(r.state == DISPATCHED for r in check.all_requests())


class TestOutboxAndLogs:
    def _completed_store(self, tmp_path):
        store = Store(str(tmp_path))
        store.add_request(_request("r1", notify_email="who@x"))
        store.claim_pending()
        from jeeva.core import PredictionResult, StructureString

        seq = validate_sequence("MKVLA")
        result = PredictionResult(job_id="r1", sequence=seq,
                                  structure=StructureString("HHECC"),
                                  confidence=(0.9,) * 5)
        store.complete_request("r1", result)
        return store

    def test_outbox_written_once(self, tmp_path):
        store = self._completed_store(tmp_path)
        assert store.write_outbox("r1", "who@x") is True
        assert store.write_outbox("r1", "who@x") is False  # idempotent
        with open(store.outbox_path("r1")) as fh:
            text = fh.read()
        assert "To: who@x" in text
        assert "MKVLA" in text and "HHECC" in text

    def test_outbox_requires_terminal(self, tmp_path):
        store = Store(str(tmp_path))
        store.add_request(_request("r1", notify_email="who@x"))
        assert store.write_outbox("r1", "who@x") is False

    def test_crash_recovery_resend(self, tmp_path):
        # outcome persisted but crash before notify: restart re-sends
        store = self._completed_store(tmp_path)
        assert not os.path.exists(store.outbox_path("r1"))
        for rec in store.terminal_requests():
            if rec.notify_email:
                store.write_outbox(rec.request_id, rec.notify_email)
        assert os.path.exists(store.outbox_path("r1"))
        # a second recovery pass does not duplicate
        mtime = os.path.getmtime(store.outbox_path("r1"))
        for rec in store.terminal_requests():
            store.write_outbox(rec.request_id, rec.notify_email)
        assert os.path.getmtime(store.outbox_path("r1")) == mtime

    def test_task_log_append_and_read(self, tmp_path):
        store = Store(str(tmp_path))
        store.append_task_log("j1", "submitted j1-A")
        store.append_task_log("j1", "failed j1-B reason=exit 2")
        text = store.read_task_log("j1")
        assert text.splitlines() == ["submitted j1-A", "failed j1-B reason=exit 2"]
        assert store.read_task_log("missing") == ""

    def test_purge_expired_anonymous(self, tmp_path):
        store = Store(str(tmp_path), anonymous_retention_days=1)
        store.add_request(_request("old", anon_token="tok"))
        store.claim_pending()
        store.fail_request("old", "x")
        rec = store.get_request("old")
        # age it two days
        from dataclasses import replace

        store._append("request", replace(rec, completed_at=time.time() - 2 * 86400).to_obj())
        store.add_request(_request("fresh", owner="u1"))
        assert store.purge_expired_anonymous() == 1
        assert store.get_request("old") is None
        assert store.get_request("fresh") is not None
