import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from hardsift import data, synth


class ScriptedEndpoint:
    """Local chat-completions stand-in with a scripted response queue.

    Script entries are (status, body) pairs consumed one request at a time;
    once the script runs dry every request gets a 200 with ``default_text``
    wrapped in the usual completion envelope. A status of ``-1`` sleeps past
    the client timeout instead of answering properly. With ``responder`` set,
    unscripted requests are answered by calling it with the decoded payload.
    """

    def __init__(self, script=None, default_text="<score>7</score>", responder=None):
        self.script = list(script or [])
        self.default_text = default_text
        self.responder = responder
        self.requests = []
        self.headers_seen = []
        self._lock = threading.Lock()
        self._server = None
        self._thread = None

    def _next_action(self, payload, headers):
        with self._lock:
            self.requests.append(payload)
            self.headers_seen.append(dict(headers))
            if self.script:
                return self.script.pop(0)
        if self.responder is not None:
            return (200, self.responder(payload))
        return (200, self.default_text)

    def __enter__(self):
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                payload = json.loads(self.rfile.read(length) or b"{}")
                status, body = stub._next_action(payload, self.headers)
                if status == -1:
                    import time

                    time.sleep(body)
                    status, body = 200, stub.default_text
                if isinstance(body, str):
                    body = {"choices": [{"message": {"content": body}}]}
                raw = json.dumps(body).encode() if body is not None else b"not json {"
                try:
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(raw)))
                    self.end_headers()
                    self.wfile.write(raw)
                except (BrokenPipeError, ConnectionResetError):
                    pass  # the client gave up first (timeout tests)

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        host, port = self._server.server_address
        return f"http://{host}:{port}/v1/chat/completions"

    def __exit__(self, *exc):
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)
        return False


@pytest.fixture
def scripted_endpoint():
    return ScriptedEndpoint


@pytest.fixture(scope="session")
def small_world():
    return synth.generate_world(
        users=60, items=40, dim=4, positives_per_user=10, noise_ratio=0.1, seed=11
    )


@pytest.fixture(scope="session")
def small_split(small_world):
    return data.split(small_world.dataset, seed=11)


@pytest.fixture
def tiny_dataset():
    rows = [
        data.Interaction(user=0, item=0, rating=5),
        data.Interaction(user=0, item=1, rating=4),
        data.Interaction(user=0, item=2, rating=5),
        data.Interaction(user=0, item=3, rating=3),
        data.Interaction(user=1, item=1, rating=5),
        data.Interaction(user=1, item=2, rating=2),
        data.Interaction(user=1, item=4, rating=4),
        data.Interaction(user=1, item=0, rating=5),
        data.Interaction(user=2, item=3, rating=4),
        data.Interaction(user=2, item=4, rating=5),
        data.Interaction(user=2, item=0, rating=3),
        data.Interaction(user=2, item=2, rating=4),
    ]
    return data.Dataset(interactions=tuple(rows), user_count=3, item_count=5)
