import random

from psifeed.geotoken import BASE32, TimeMode, TokenSet


def universe(rnd: random.Random, size: int, r: int = 8) -> list[str]:
    out = set()
    while len(out) < size:
        out.add("".join(rnd.choice(BASE32) for _ in range(r)))
    return sorted(out)


def random_pair(rnd: random.Random, alphabet: list[str], max_size: int = 500, r: int = 8,
                mode: TimeMode = TimeMode.NONE):
    a = rnd.sample(alphabet, rnd.randint(1, max_size))
    b = rnd.sample(alphabet, rnd.randint(1, max_size))
    return TokenSet(frozenset(a), r, mode), TokenSet(frozenset(b), r, mode)


import contextlib
import socket
import threading


class RecordingProxy:
    """TCP relay that keeps every byte it forwards, per direction."""

    def __init__(self, target: str):
        host, port = target.rsplit(":", 1)
        self.target = (host, int(port))
        self.listener = socket.socket()
        self.listener.bind(("127.0.0.1", 0))
        self.listener.listen()
        self.up = bytearray()
        self.down = bytearray()
        self._threads = []
        threading.Thread(target=self._accept, daemon=True).start()

    @property
    def address(self):
        return "127.0.0.1:%d" % self.listener.getsockname()[1]

    def _accept(self):
        with contextlib.suppress(OSError):
            while True:
                client, _ = self.listener.accept()
                upstream = socket.create_connection(self.target)
                for src, dst, buf in ((client, upstream, self.up), (upstream, client, self.down)):
                    t = threading.Thread(target=self._pipe, args=(src, dst, buf), daemon=True)
                    t.start()
                    self._threads.append(t)

    @staticmethod
    def _pipe(src, dst, buf):
        with contextlib.suppress(OSError):
            while True:
                data = src.recv(65536)
                if not data:
                    break
                buf += data
                dst.sendall(data)
        with contextlib.suppress(OSError):
            dst.shutdown(socket.SHUT_WR)

    def wait(self, timeout=10):
        for t in self._threads:
            t.join(timeout)

    def close(self):
        self.listener.close()


@contextlib.contextmanager
def running_server(tokens, **kw):
    from psifeed import net

    srv = net.serve("127.0.0.1:0", tokens, **kw)
    net.start_background(srv)
    try:
        yield srv
    finally:
        srv.shutdown()
        srv.server_close()


def split_frames(data: bytes):
    from psifeed import net

    frames = []
    pos = 0
    while pos < len(data):
        frame, used = net.decode_frame(data[pos:])
        frames.append(frame)
        pos += used
    return frames
