import json
import socket
import time
import urllib.error
import urllib.request

import pytest

from jeeva.core import PredictionResult, StructureString, parse_rendered_result, validate_sequence
from jeeva.executor import DictModels, ExecutorService
from jeeva.portal import PortalServer, PortalService
from jeeva.server import SchedulerServer
from jeeva.store import Store


class Client:
    def __init__(self, address):
        self.base = f"http://{address[0]}:{address[1]}"

    def call(self, method, path, body=None, token=None, raw=None,
             ctype="application/json"):
        data = raw if raw is not None else (
            json.dumps(body).encode() if body is not None else None)
        req = urllib.request.Request(self.base + path, data=data, method=method)
        if data is not None:
            req.add_header("Content-Type", ctype)
        if token:
            req.add_header("Authorization", f"Bearer {token}")
        try:
            with urllib.request.urlopen(req, timeout=10) as resp:
                payload = resp.read()
                return resp.status, json.loads(payload) if payload else {}
        except urllib.error.HTTPError as exc:
            payload = exc.read()
            return exc.code, json.loads(payload) if payload else {}

    def text(self, path, token=None):
        req = urllib.request.Request(self.base + path)
        if token:
            req.add_header("Authorization", f"Bearer {token}")
        with urllib.request.urlopen(req, timeout=10) as resp:
            return resp.status, resp.read().decode()


@pytest.fixture
def portal(tmp_path):
    store = Store(str(tmp_path / "store"))
    service = PortalService(store)
    service.ensure_admin("admin@x", "adminpw")
    server = PortalServer(service).start()
    client = Client(server.address)
    yield client, service, store
    server.stop()


def register_and_login(client, email="u1@x", password="pw1", name="u1"):
    code, _ = client.call("POST", "/api/auth/register",
                          {"name": name, "email": email, "password": password})
    assert code == 201
    code, body = client.call("POST", "/api/auth/login",
                             {"email": email, "password": password})
    assert code == 200
    return body["token"]


class TestAuth:
    def test_register_login_submit(self, portal):
        client, _, _ = portal
        token = register_and_login(client)
        code, body = client.call("POST", "/api/requests",
                                 {"fasta": ">s1\nACDE\n"}, token=token)
        assert code == 201
        assert len(body["request_ids"]) == 1
        assert "token" not in body  # registered users need no anon token

    def test_duplicate_email(self, portal):
        client, _, _ = portal
        register_and_login(client)
        code, body = client.call("POST", "/api/auth/register",
                                 {"name": "x", "email": "u1@x", "password": "pw"})
        assert code == 409
        assert body["error"] == "DuplicateEmail"

    def test_bad_credentials(self, portal):
        client, _, _ = portal
        register_and_login(client)
        code, _ = client.call("POST", "/api/auth/login",
                              {"email": "u1@x", "password": "nope"})
        assert code == 401

    def test_tampered_token_rejected(self, portal):
        client, _, _ = portal
        token = register_and_login(client)
        flipped = token[:-1] + ("A" if token[-1] != "A" else "B")
        code, _ = client.call("GET", "/api/requests", token=flipped)
        assert code == 401

    def test_expired_session(self, portal):
        client, service, _ = portal
        token = register_and_login(client)
        user_id, _ = service.sessions._sessions[token]
        service.sessions._sessions[token] = (user_id, time.time() - 1)
        code, _ = client.call("GET", "/api/requests", token=token)
        assert code == 401


class TestSubmission:
    def test_single_record_pending(self, portal):
        client, _, _ = portal
        token = register_and_login(client)
        _, body = client.call("POST", "/api/requests",
                              {"fasta": ">s1\nACDE\n"}, token=token)
        rid = body["request_ids"][0]
        code, view = client.call("GET", f"/api/requests/{rid}", token=token)
        assert code == 200
        assert view["state"] == "pending"
        assert view["sequence"] == "ACDE"

    def test_sixty_four_records(self, portal):
        client, _, store = portal
        token = register_and_login(client)
        fasta = "".join(f">s{i}\nMKVLA\n" for i in range(64))
        code, body = client.call("POST", "/api/requests", {"fasta": fasta},
                                 token=token)
        assert code == 201
        assert len(body["request_ids"]) == 64
        assert len(store.all_requests()) == 64

    def test_illegal_residue_400_with_position(self, portal):
        client, _, _ = portal
        code, body = client.call("POST", "/api/requests", {"fasta": ">s\nACXE\n"})
        assert code == 400
        assert body["error"] == "IllegalResidue"
        assert body["position"] == 2
        assert body["char"] == "X"

    def test_bad_fasta_400(self, portal):
        client, _, _ = portal
        code, body = client.call("POST", "/api/requests", {"fasta": "no header"})
        assert code == 400
        assert body["error"] == "BadFasta"

    def test_payload_too_large_413(self, portal):
        client, _, _ = portal
        big = ">s\n" + "A" * (2 * 1024 * 1024)
        code, body = client.call("POST", "/api/requests", {"fasta": big})
        assert code == 413

    def test_raw_fasta_body(self, portal):
        client, _, _ = portal
        code, body = client.call("POST", "/api/requests",
                                 raw=b">r1\nMKVLA\n", ctype="text/plain")
        assert code == 201
        assert body["token"]


class TestOwnership:
    def test_anonymous_token_controls_access(self, portal):
        client, _, _ = portal
        _, body = client.call("POST", "/api/requests", {"fasta": ">a\nMKV\n"})
        rid = body["request_ids"][0]
        anon = body["token"]
        code, _ = client.call("GET", f"/api/requests/{rid}")
        assert code == 403
        code, view = client.call("GET", f"/api/requests/{rid}?token={anon}")
        assert code == 200
        code, _ = client.call("GET", f"/api/requests/{rid}?token=wrong")
        assert code == 403

    def test_other_user_forbidden(self, portal):
        client, _, _ = portal
        t1 = register_and_login(client, "u1@x", "pw1")
        t2 = register_and_login(client, "u2@x", "pw2", name="u2")
        _, body = client.call("POST", "/api/requests", {"fasta": ">a\nMKV\n"},
                              token=t1)
        rid = body["request_ids"][0]
        code, _ = client.call("GET", f"/api/requests/{rid}", token=t2)
        assert code == 403
        code, _ = client.call("GET", f"/api/requests/{rid}", token=t1)
        assert code == 200

    def test_unknown_request_404(self, portal):
        client, _, _ = portal
        token = register_and_login(client)
        code, _ = client.call("GET", "/api/requests/nope", token=token)
        assert code == 404

    def test_history_isolated_and_sorted(self, portal):
        client, _, _ = portal
        t1 = register_and_login(client, "u1@x", "pw1")
        t2 = register_and_login(client, "u2@x", "pw2", name="u2")
        ids1 = []
        for i in range(3):
            _, body = client.call("POST", "/api/requests",
                                  {"fasta": f">r{i}\nMKV\n"}, token=t1)
            ids1 += body["request_ids"]
            time.sleep(0.01)
        client.call("POST", "/api/requests", {"fasta": ">x\nMKV\n"}, token=t2)
        _, hist1 = client.call("GET", "/api/requests", token=t1)
        _, hist2 = client.call("GET", "/api/requests", token=t2)
        got1 = [r["request_id"] for r in hist1["requests"]]
        assert got1 == list(reversed(ids1))  # newest first
        assert set(got1).isdisjoint({r["request_id"] for r in hist2["requests"]})

    def test_fresh_user_empty_history(self, portal):
        client, _, _ = portal
        token = register_and_login(client)
        _, hist = client.call("GET", "/api/requests", token=token)
        assert hist["requests"] == []

    def test_admin_can_view_user_history(self, portal):
        client, _, _ = portal
        t1 = register_and_login(client, "u1@x", "pw1")
        _, body = client.call("POST", "/api/requests", {"fasta": ">a\nMKV\n"},
                              token=t1)
        _, admin = client.call("POST", "/api/auth/login",
                               {"email": "admin@x", "password": "adminpw"})
        _, login = client.call("POST", "/api/auth/login",
                               {"email": "u1@x", "password": "pw1"})
        code, hist = client.call(
            "GET", f"/api/requests?user={login['user_id']}", token=admin["token"])
        assert code == 200
        assert [r["request_id"] for r in hist["requests"]] == body["request_ids"]
        # but a plain user cannot read someone else's history
        t2 = register_and_login(client, "u2@x", "pw2", name="u2")
        code, _ = client.call(
            "GET", f"/api/requests?user={login['user_id']}", token=t2)
        assert code == 403


class TestResultsAndLogs:
    def _complete(self, store, rid):
        store.claim_pending()
        seq = validate_sequence(store.get_request(rid).sequence)
        result = PredictionResult(job_id=rid, sequence=seq,
                                  structure=StructureString("HEC" * (len(seq) // 3) +
                                                            "H" * (len(seq) % 3)),
                                  confidence=tuple(0.42 for _ in range(len(seq))))
        store.complete_request(rid, result)
        return result

    def test_rendering_round_trip(self, portal):
        client, _, store = portal
        token = register_and_login(client)
        _, body = client.call("POST", "/api/requests", {"fasta": ">a\nMKVLAC\n"},
                              token=token)
        rid = body["request_ids"][0]
        stored = self._complete(store, rid)
        code, view = client.call("GET", f"/api/requests/{rid}", token=token)
        assert code == 200
        assert view["state"] == "completed"
        residues, structure, digits = parse_rendered_result(
            view["result"]["rendering"])
        assert residues == stored.sequence.residues
        assert structure == stored.structure.labels
        assert digits == "4" * 6

    def test_failed_view_carries_reason_and_log(self, portal):
        client, _, store = portal
        token = register_and_login(client)
        _, body = client.call("POST", "/api/requests", {"fasta": ">a\nMKVLA\n"},
                              token=token)
        rid = body["request_ids"][0]
        store.claim_pending()
        store.fail_request(rid, f"{rid}-B: exit 2")
        store.append_task_log(rid, f"submitted {rid}-A")
        store.append_task_log(rid, f"failed {rid}-B reason=exit 2")
        code, view = client.call("GET", f"/api/requests/{rid}", token=token)
        assert view["state"] == "failed"
        assert view["failure_reason"] == f"{rid}-B: exit 2"
        assert view["log_name"] == f"{rid}.log"
        status, text = client.text(f"/api/requests/{rid}/log", token=token)
        assert "exit 2" in text


class TestAdmin:
    def test_non_admin_forbidden(self, portal):
        client, _, _ = portal
        token = register_and_login(client)
        for path in ("/api/admin/nodes", "/api/admin/stats", "/api/admin/users"):
            code, _ = client.call("GET", path, token=token)
            assert code == 403, path
        code, _ = client.call("GET", "/api/admin/nodes")
        assert code == 401

    def test_users_listing_hides_password_material(self, portal):
        client, _, _ = portal
        register_and_login(client)
        _, admin = client.call("POST", "/api/auth/login",
                               {"email": "admin@x", "password": "adminpw"})
        code, body = client.call("GET", "/api/admin/users", token=admin["token"])
        assert code == 200
        assert len(body["users"]) == 2
        for user in body["users"]:
            assert "password_hash" not in user and "salt" not in user

    def test_delete_request(self, portal):
        client, _, store = portal
        token = register_and_login(client)
        _, body = client.call("POST", "/api/requests", {"fasta": ">a\nMKV\n"},
                              token=token)
        rid = body["request_ids"][0]
        _, admin = client.call("POST", "/api/auth/login",
                               {"email": "admin@x", "password": "adminpw"})
        code, _ = client.call("DELETE", f"/api/admin/requests/{rid}", token=token)
        assert code == 403
        code, _ = client.call("DELETE", f"/api/admin/requests/{rid}",
                              token=admin["token"])
        assert code == 200
        assert store.get_request(rid) is None
        code, _ = client.call("DELETE", f"/api/admin/requests/{rid}",
                              token=admin["token"])
        assert code == 404

    def test_grid_unreachable_502(self, tmp_path):
        # a freshly released port refuses connections immediately
        probe = socket.socket()
        probe.bind(("127.0.0.1", 0))
        dead_addr = probe.getsockname()
        probe.close()
        store = Store(str(tmp_path / "store"))
        service = PortalService(store, scheduler_addr=dead_addr)
        service.ensure_admin("a@x", "pw")
        server = PortalServer(service).start()
        try:
            client = Client(server.address)
            _, admin = client.call("POST", "/api/auth/login",
                                   {"email": "a@x", "password": "pw"})
            code, body = client.call("GET", "/api/admin/nodes",
                                     token=admin["token"])
            assert code == 502
            assert body["error"] == "GridUnreachable"
        finally:
            server.stop()


class TestConsoleStatic:
    def test_serves_bundle_and_blocks_traversal(self, tmp_path):
        console = tmp_path / "console"
        (console / "js").mkdir(parents=True)
        (console / "index.html").write_text("<html>console shell</html>")
        (console / "js" / "main.js").write_text("// app")
        (tmp_path / "secret.txt").write_text("keep out")
        store = Store(str(tmp_path / "store"))
        service = PortalService(store, console_dir=str(console))
        server = PortalServer(service).start()
        try:
            client = Client(server.address)
            status, text = client.text("/console/")
            assert status == 200 and "console shell" in text
            status, text = client.text("/console/js/main.js")
            assert status == 200 and "app" in text
            code, _ = client.call("GET", "/console/../secret.txt")
            assert code == 404
            code, _ = client.call("GET", "/console/missing.js")
            assert code == 404
        finally:
            server.stop()

    def test_404_when_console_not_deployed(self, portal):
        client, _, _ = portal
        code, _ = client.call("GET", "/console/")
        assert code == 404


class TestAdminWithLiveGrid:
    def test_nodes_stats_and_stream(self, tmp_path, random_models):
        sched = SchedulerServer(token="tok", heartbeat_ms=100, dead_after=5).start()
        execs = [ExecutorService(sched.address, f"e{i}", token="tok",
                                 models=DictModels(random_models),
                                 heartbeat_s=0.1).start() for i in range(3)]
        store = Store(str(tmp_path / "store"))
        service = PortalService(store, scheduler_addr=sched.address,
                                grid_token="tok")
        service.ensure_admin("a@x", "pw")
        server = PortalServer(service).start()
        try:
            for e in execs:
                assert e.wait_registered(5)
            client = Client(server.address)
            _, admin = client.call("POST", "/api/auth/login",
                                   {"email": "a@x", "password": "pw"})
            token = admin["token"]
            code, body = client.call("GET", "/api/admin/nodes", token=token)
            assert code == 200
            assert len(body["nodes"]) == 3
            assert all(n["slot_count"] == 1 for n in body["nodes"])
            code, stats = client.call("GET", "/api/admin/stats", token=token)
            assert code == 200
            assert stats == {"waiting": 0, "running": 0, "finished": 0}

            # server-push stream: at least two snapshots within the interval
            req = urllib.request.Request(client.base + "/api/admin/stats/stream")
            req.add_header("Authorization", f"Bearer {token}")
            with urllib.request.urlopen(req, timeout=10) as resp:
                events = []
                deadline = time.time() + 5
                while len(events) < 2 and time.time() < deadline:
                    line = resp.readline().decode()
                    if line.startswith("data: "):
                        events.append(json.loads(line[len("data: "):]))
            assert len(events) >= 2
            assert all(set(e) >= {"waiting", "running", "finished"} for e in events)
        finally:
            server.stop()
            for e in execs:
                e.stop()
            sched.stop()
