import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from csipose import csi

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def radio():
    return csi.RadioConfig.default()


@pytest.fixture
def small_radio():
    return csi.RadioConfig.default(n_subcarriers=8, n_rx_antennas=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- mock image-editing service ---------------------------------------------------

class _EditHandler(BaseHTTPRequestHandler):
    def log_message(self, *args):
        pass

    def do_POST(self):
        srv = self.server
        body_ = self.rfile.read(int(self.headers["Content-Length"]))
        srv.requests.append((self.path, json.loads(body_)))
        action = srv.script.pop(0) if srv.script else "echo"
        if action == "stall":
            time.sleep(srv.stall_s)
            return
        if isinstance(action, int):
            self._reply(action, b"busy")
        elif action == "garbage":
            self._reply(200, b"{not json")
        elif action == "no_image":
            self._reply(200, json.dumps({"other": 1}).encode())
        else:
            req = json.loads(body_)
            self._reply(200, json.dumps({"image_b64": req["image_b64"]}).encode())

    def _reply(self, status, payload):
        self.send_response(status)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)


@pytest.fixture
def aigc_server():
    srv = ThreadingHTTPServer(("127.0.0.1", 0), _EditHandler)
    srv.daemon_threads = True
    srv.script, srv.requests, srv.stall_s = [], [], 5.0
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    yield srv, f"http://127.0.0.1:{srv.server_address[1]}"
    srv.shutdown()
    srv.server_close()


# --- acceptance verdicts ------------------------------------------------------------

_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """record(n, title, ok, detail) prints one PASS/FAIL line and returns ok."""
    table = request.config.stash.setdefault(_VERDICTS, {})

    def record(n: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"criterion {n:2d}  {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        table[n] = line
        print(line)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, config):
    table = config.stash.get(_VERDICTS, {})
    if table:
        terminalreporter.section("acceptance criteria")
        for n in sorted(table):
            terminalreporter.write_line(table[n])
