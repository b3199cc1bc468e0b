"""HTTP client for the sync service.

Speaks the wire protocol in syncd: JSON over HTTP/1.1 for registration,
chunk upload, commit, and queries, plus a server-sent-event stream for
commit fan-out. Failure mapping follows the upload state machine's
needs: a refused connect raises ServerRejected (the attempt is consumed
and retried with backoff), an error on an established exchange raises
NetworkError (resume is free; offsets are re-asked from the server),
and a 416 raises OffsetMismatch carrying the server's durable offset.
"""

from __future__ import annotations

import http.client
import json
import queue
import socket
import threading
import urllib.parse

from .errors import NetworkError
from .model import PackageManifest, serialize_manifest
from .packstore import OffsetMismatch, ServerRejected
from .syncd import OFFSET_HEADER


def _error_text(body: bytes) -> str:
    try:
        doc = json.loads(body)
    except (ValueError, UnicodeDecodeError):
        return body[:200].decode("utf-8", "replace")
    if isinstance(doc, dict) and "error" in doc:
        return str(doc["error"])
    return str(doc)[:200]


class HttpTransport:
    """One keep-alive connection; reopened on demand after failures."""

    def __init__(self, base_url: str, timeout: float = 10.0):
        parsed = urllib.parse.urlsplit(base_url)
        if parsed.scheme != "http":
            raise ValueError(f"unsupported scheme {parsed.scheme!r}")
        if parsed.hostname is None:
            raise ValueError(f"no host in {base_url!r}")
        self.host = parsed.hostname
        self.port = parsed.port or 80
        self.timeout = timeout
        self._conn: http.client.HTTPConnection | None = None

    def _connect(self) -> http.client.HTTPConnection:
        if self._conn is None:
            conn = http.client.HTTPConnection(self.host, self.port, timeout=self.timeout)
            try:
                conn.connect()
            except OSError as e:
                raise ServerRejected(f"cannot reach {self.host}:{self.port}: {e}") from e
            self._conn = conn
        return self._conn

    def close(self) -> None:
        if self._conn is not None:
            try:
                self._conn.close()
            finally:
                self._conn = None

    def request(
        self,
        method: str,
        path: str,
        body: bytes = b"",
        headers: dict | None = None,
    ) -> tuple[int, dict, bytes]:
        """Returns (status, lowercase header dict, body bytes)."""
        conn = self._connect()
        try:
            conn.request(method, path, body=body, headers=headers or {})
            resp = conn.getresponse()
            data = resp.read()
        except (http.client.HTTPException, OSError) as e:
            self.close()
            raise NetworkError(f"{method} {path} failed mid-exchange: {e}") from e
        if resp.will_close:
            self.close()
        return resp.status, {k.lower(): v for k, v in resp.getheaders()}, data


class StreamEnded(NetworkError):
    """The server closed the event stream; reconnect with last_seq."""


class EventStream:
    """One SSE subscription. Dedup by commit_seq is built in: events at or
    below ``last_seq`` are dropped, so reconnect-replay never double-delivers.
    """

    def __init__(self, host: str, port: int, from_seq: int, timeout: float = 10.0):
        self.last_seq = from_seq
        self._conn = http.client.HTTPConnection(host, port, timeout=timeout)
        path = f"/v1/stream?from_seq={from_seq}"
        try:
            self._conn.request("GET", path)
            # the response arrives with Connection: close, after which the
            # connection object forgets its socket; keep it for close()
            self._sock = self._conn.sock
            resp = self._conn.getresponse()
        except OSError as e:
            raise ServerRejected(f"cannot open event stream: {e}") from e
        if resp.status != 200:
            body = resp.read()
            self._conn.close()
            raise ServerRejected(f"stream: HTTP {resp.status}: {_error_text(body)}")
        self._resp = resp
        self._lines: queue.Queue = queue.Queue()
        self._thread = threading.Thread(target=self._pump, daemon=True)
        self._thread.start()

    def _pump(self) -> None:
        try:
            while True:
                line = self._resp.fp.readline()
                if not line:
                    break
                self._lines.put(line)
        except (OSError, ValueError, AttributeError):
            pass
        finally:
            self._lines.put(None)

    def next_event(self, timeout: float | None = None) -> dict | None:
        """Next deduplicated event, or None if the timeout expires.

        Raises StreamEnded once the server (or close()) ends the stream.
        """
        import time as _time

        deadline = None if timeout is None else _time.monotonic() + timeout
        while True:
            remaining = None if deadline is None else max(0.0, deadline - _time.monotonic())
            try:
                line = self._lines.get(timeout=remaining)
            except queue.Empty:
                return None
            if line is None:
                raise StreamEnded("event stream closed")
            line = line.strip()
            if not line.startswith(b"data:"):
                continue
            doc = json.loads(line[len(b"data:"):].strip())
            seq = int(doc["commit_seq"])
            if seq <= self.last_seq:
                continue  # replay overlap; dedup by seq
            self.last_seq = seq
            return doc

    def close(self) -> None:
        # shut the socket down first: the pump thread holds the response
        # buffer's lock inside readline(), so resp.close() would block on
        # it until the read timeout expired
        if self._sock is not None:
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        self._thread.join(timeout=2)
        try:
            self._resp.close()
        except Exception:
            pass
        try:
            self._conn.close()
        except Exception:
            pass

    def __enter__(self) -> "EventStream":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class SyncClient:
    """Client for one sync service endpoint.

    Satisfies the uploader's contract (create_session, blob_offset,
    put_chunk, commit) and adds the read side (query_packages,
    download_blob, subscribe).
    """

    def __init__(self, base_url: str, transport=None, timeout: float = 10.0):
        self.base_url = base_url.rstrip("/")
        self.transport = transport or HttpTransport(self.base_url, timeout=timeout)
        self.timeout = timeout

    # -- paths -------------------------------------------------------------

    @staticmethod
    def _pkg_path(package_id: str) -> str:
        return f"/v1/packages/{urllib.parse.quote(package_id, safe='')}"

    @classmethod
    def _blob_path(cls, package_id: str, name: str) -> str:
        return f"{cls._pkg_path(package_id)}/blobs/{urllib.parse.quote(name, safe='/')}"

    # -- upload side ---------------------------------------------------------

    def create_session(self, manifest: PackageManifest) -> dict:
        status, _, body = self.transport.request(
            "POST",
            "/v1/packages",
            body=serialize_manifest(manifest),
            headers={"Content-Type": "application/json"},
        )
        if status in (200, 201):
            return json.loads(body)
        raise ServerRejected(f"create package: HTTP {status}: {_error_text(body)}")

    def blob_offset(self, package_id: str, name: str) -> int:
        status, headers, body = self.transport.request(
            "HEAD", self._blob_path(package_id, name)
        )
        if status == 200:
            return int(headers[OFFSET_HEADER.lower()])
        raise ServerRejected(f"offset of {name!r}: HTTP {status}")

    def put_chunk(self, package_id: str, name: str, offset: int, data: bytes) -> int:
        status, headers, body = self.transport.request(
            "PUT",
            self._blob_path(package_id, name),
            body=data,
            headers={
                OFFSET_HEADER: str(offset),
                "Content-Type": "application/octet-stream",
            },
        )
        if status == 204:
            return int(headers[OFFSET_HEADER.lower()])
        if status == 416:
            try:
                expected = int(json.loads(body)["expected_offset"])
            except (ValueError, KeyError):
                expected = int(headers.get(OFFSET_HEADER.lower(), 0))
            raise OffsetMismatch(expected)
        raise ServerRejected(f"put chunk {name!r}@{offset}: HTTP {status}: {_error_text(body)}")

    def commit(self, package_id: str) -> dict:
        status, _, body = self.transport.request(
            "POST", f"{self._pkg_path(package_id)}/commit", body=b""
        )
        if status == 200:
            return json.loads(body)
        raise ServerRejected(f"commit: HTTP {status}: {_error_text(body)}")

    # -- read side -----------------------------------------------------------

    def query_packages(self, since_seq: int = 0) -> list[dict]:
        status, _, body = self.transport.request(
            "GET", f"/v1/packages?since_seq={int(since_seq)}"
        )
        if status == 200:
            return json.loads(body)
        raise ServerRejected(f"query packages: HTTP {status}: {_error_text(body)}")

    def download_blob(self, package_id: str, name: str) -> bytes:
        status, _, body = self.transport.request("GET", self._blob_path(package_id, name))
        if status == 200:
            return body
        raise ServerRejected(f"download {name!r}: HTTP {status}: {_error_text(body)}")

    def subscribe(self, from_seq: int = 0) -> EventStream:
        parsed = urllib.parse.urlsplit(self.base_url)
        return EventStream(parsed.hostname, parsed.port or 80, from_seq, timeout=self.timeout)

    def close(self) -> None:
        self.transport.close()

    def __enter__(self) -> "SyncClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
