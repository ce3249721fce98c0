import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest


class _ChatHandler(BaseHTTPRequestHandler):
    """Echoes the last value of the query block as a flat forecast."""

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        self.server.requests.append(body)
        prompt = body["messages"][-1]["content"]
        horizon = int(re.search(r"exactly (\d+) comma-separated", prompt).group(1))
        query = prompt.split("Query (last")[1].split("\n")[1]
        last = query.split(",")[-1].strip()
        reply = {"choices": [{"message": {"role": "assistant",
                                          "content": ", ".join([last] * horizon)}}]}
        data = json.dumps(reply).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def chat_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _ChatHandler)
    server.requests = []
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server, f"http://127.0.0.1:{server.server_address[1]}/v1/chat/completions"
    server.shutdown()
    server.server_close()


# --- acceptance summary ------------------------------------------------------

_criteria: dict[str, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id, title): acceptance criterion checked by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    cid, title = marker.args
    entry = _criteria.setdefault(cid, [title, "PASS"])
    if rep.skipped:
        entry[1] = "SKIP" if entry[1] == "PASS" else entry[1]
    elif rep.failed:
        entry[1] = "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_criteria, key=lambda c: [int(p) if p.isdigit() else p for p in c.split(".")]):
        title, status = _criteria[cid]
        terminalreporter.write_line(f"[{status}] criterion {cid}: {title}")
