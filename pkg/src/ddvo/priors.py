"""Pose-prior sources and the fallback chain that seeds image alignment.

Two directions are in play and both are stated explicitly:

- On the wire (and from any frame-to-frame pose network), the transform takes
  points from the *current* frame's camera coordinates into the *previous*
  frame's — the same direction a view-synthesis warp uses.
- In process, ``PriorResponse.pose`` carries the inverse: previous-frame
  coordinates into current-frame coordinates, which is the factor the tracker
  composes with the previous frame's keyframe-relative pose when seeding.

The external protocol is newline-delimited UTF-8 text over a stream
(TCP socket, unix socket, or a child process's stdio):

- handshake: server sends ``DDVO-PRIOR 1`` on connect
- request:   ``PRIOR <prev_frame_index> <cur_frame_index>``
- response:  ``OK <r00> <r01> <r02> <tx> <r10> <r11> <r12> <ty> <r20> <r21>
  <r22> <tz>`` (row-major 3x4) or ``NONE``

Rotations are re-orthonormalized on ingestion when off by less than 1e-3
(max-abs entry deviation), rejected otherwise.
"""

from __future__ import annotations

import os
import select
import shlex
import socket
import subprocess
import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    Pose,
    Twist,
    compose,
    constant_motion_extrapolate,
    inverse,
    nearest_rotation,
    rotation_defect,
    se3_exp,
)

PROTOCOL_VERSION = 1
HANDSHAKE = f"DDVO-PRIOR {PROTOCOL_VERSION}"
DEFAULT_TIMEOUT_MS = 100.0

KINDS = ("identity", "constant-motion", "external", "oracle")


class Unavailable(Exception):
    """The queried source produced no usable pose."""


class MissingFrame(KeyError):
    """Requested frame id absent from the oracle ground truth."""


@dataclass(frozen=True)
class PriorResponse:
    """pose maps previous-frame camera coordinates into current-frame ones."""

    pose: Pose
    source: str
    latency_ms: float


@dataclass
class PriorSource:
    """One entry of the fallback chain; exactly one kind is active."""

    kind: str
    endpoint: str = None
    timeout_ms: float = DEFAULT_TIMEOUT_MS
    gt: object = None  # evaluation.Trajectory for the oracle kind
    noise_rot_deg: float = 0.0
    noise_trans_frac: float = 0.0
    seed: int = 0
    _client: object = field(default=None, init=False, repr=False, compare=False)
    _rng: object = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        kind = {"constmotion": "constant-motion"}.get(self.kind, self.kind)
        if kind not in KINDS:
            raise ValueError(f"unknown prior kind {self.kind!r}")
        self.kind = kind
        if kind == "external" and not self.endpoint:
            raise ValueError("external prior needs an endpoint")
        if kind == "oracle" and self.gt is None:
            raise ValueError("oracle prior needs a ground-truth trajectory")

    def client(self) -> "ExternalClient":
        if self._client is None:
            self._client = ExternalClient(self.endpoint)
        return self._client

    def rng(self) -> np.random.Generator:
        if self._rng is None:
            self._rng = np.random.default_rng(self.seed)
        return self._rng


@dataclass(frozen=True)
class FrameContext:
    """What the chain may need to know about the tracking state."""

    prev_id: int
    cur_id: int
    prev_pose_world: Pose = None  # world-to-camera of frame t-1
    prevprev_pose_world: Pose = None  # world-to-camera of frame t-2


# ---------------------------------------------------------------------------
# Wire format


def format_prior_line(pose_cur_to_prev: Pose) -> str:
    """Serialize the current-to-previous transform as an OK response line."""
    vals = pose_cur_to_prev.matrix34().reshape(-1)
    return "OK " + " ".join(f"{v:.8e}" for v in vals)


def parse_prior_line(line: str) -> Pose:
    """Parse a response line into the current-to-previous transform.

    Raises Unavailable on NONE, malformed input, or a rotation block off by
    more than 1e-3; smaller deviations are projected back to orthonormal.
    """
    parts = line.strip().split()
    if not parts:
        raise Unavailable("empty response line")
    if parts[0] == "NONE":
        raise Unavailable("source declined")
    if parts[0] != "OK" or len(parts) != 13:
        raise Unavailable(f"malformed response {line!r}")
    try:
        vals = np.array([float(x) for x in parts[1:]])
    except ValueError:
        raise Unavailable(f"non-numeric response {line!r}") from None
    if not np.isfinite(vals).all():
        raise Unavailable("non-finite values in response")
    mat = vals.reshape(3, 4)
    if rotation_defect(mat[:, :3]) >= 1e-3:
        raise Unavailable("rotation block too far from orthonormal")
    return Pose(nearest_rotation(mat[:, :3]), mat[:, 3])


# ---------------------------------------------------------------------------
# External transport


class _SocketTransport:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.buf = b""

    def send_line(self, line: str, deadline: float) -> None:
        self.sock.settimeout(max(deadline - time.monotonic(), 1e-4))
        self.sock.sendall(line.encode() + b"\n")

    def recv_line(self, deadline: float) -> str:
        while b"\n" not in self.buf:
            self.sock.settimeout(max(deadline - time.monotonic(), 1e-4))
            chunk = self.sock.recv(4096)
            if not chunk:
                raise Unavailable("connection closed")
            self.buf += chunk
        line, self.buf = self.buf.split(b"\n", 1)
        return line.decode()

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class _PipeTransport:
    def __init__(self, proc: subprocess.Popen):
        self.proc = proc
        self.buf = b""

    def send_line(self, line: str, deadline: float) -> None:
        try:
            self.proc.stdin.write(line.encode() + b"\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise Unavailable(f"prior process pipe broken: {exc}") from None

    def recv_line(self, deadline: float) -> str:
        fd = self.proc.stdout.fileno()
        while b"\n" not in self.buf:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise Unavailable("timeout waiting for prior process")
            ready, _, _ = select.select([fd], [], [], remaining)
            if not ready:
                raise Unavailable("timeout waiting for prior process")
            chunk = os.read(fd, 4096)
            if not chunk:
                raise Unavailable("prior process closed stdout")
            self.buf += chunk
        line, self.buf = self.buf.split(b"\n", 1)
        return line.decode()

    def close(self) -> None:
        self.proc.terminate()
        try:
            self.proc.wait(timeout=1.0)
        except subprocess.TimeoutExpired:
            self.proc.kill()


class ExternalClient:
    """Owns one connection; requests and responses strictly in order.

    Endpoint forms: ``host:port`` (TCP), ``cmd:<command line>`` (child
    process stdio), anything else is a unix socket path.
    """

    def __init__(self, endpoint: str):
        self.endpoint = endpoint
        self.transport = None

    def _connect(self, deadline: float) -> None:
        timeout = max(deadline - time.monotonic(), 1e-4)
        if self.endpoint.startswith("cmd:"):
            proc = subprocess.Popen(
                shlex.split(self.endpoint[4:]),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                bufsize=0,
            )
            self.transport = _PipeTransport(proc)
        else:
            host, sep, port = self.endpoint.rpartition(":")
            try:
                if sep and port.isdigit():
                    sock = socket.create_connection((host or "127.0.0.1", int(port)), timeout)
                else:
                    sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
                    sock.settimeout(timeout)
                    sock.connect(self.endpoint)
            except OSError as exc:
                raise Unavailable(f"cannot reach {self.endpoint}: {exc}") from None
            self.transport = _SocketTransport(sock)
        greeting = self.transport.recv_line(deadline)
        if greeting.strip() != HANDSHAKE:
            self.close()
            raise Unavailable(f"bad handshake {greeting!r}")

    def query(self, prev_id: int, cur_id: int, timeout_ms: float) -> Pose:
        """Returns the previous-to-current transform (wire payload inverted)."""
        deadline = time.monotonic() + timeout_ms / 1000.0
        try:
            if self.transport is None:
                self._connect(deadline)
            self.transport.send_line(f"PRIOR {prev_id} {cur_id}", deadline)
            line = self.transport.recv_line(deadline)
            return inverse(parse_prior_line(line))
        except Unavailable:
            self.close()
            raise
        except (OSError, socket.timeout) as exc:
            self.close()
            raise Unavailable(str(exc)) from None

    def close(self) -> None:
        if self.transport is not None:
            self.transport.close()
            self.transport = None


# ---------------------------------------------------------------------------
# Sources


def oracle_prior(
    gt,
    prev_id: int,
    cur_id: int,
    noise_rot_deg: float = 0.0,
    noise_trans_frac: float = 0.0,
    rng: np.random.Generator = None,
) -> PriorResponse:
    """Ground-truth relative pose with seeded noise: rotation by an angle
    ~ |N(0, sigma_r)| about a uniform random axis, translation perturbed
    componentwise with sigma proportional to the true translation norm.

    ``gt`` holds camera-to-world poses (evaluation.Trajectory).
    """
    start = time.monotonic()
    lookup = {fid: k for k, fid in enumerate(gt.frame_ids)}
    if prev_id not in lookup or cur_id not in lookup:
        raise MissingFrame(f"frame {prev_id if prev_id not in lookup else cur_id}")
    c_prev = gt.poses[lookup[prev_id]]
    c_cur = gt.poses[lookup[cur_id]]
    rel = compose(inverse(c_cur), c_prev)  # previous-to-current camera map
    rng = np.random.default_rng(0) if rng is None else rng
    angle = abs(rng.normal(0.0, np.deg2rad(noise_rot_deg)))
    axis = rng.normal(0.0, 1.0, 3)
    axis /= max(np.linalg.norm(axis), 1e-12)
    t_noise = rng.normal(0.0, 1.0, 3) * (noise_trans_frac * np.linalg.norm(rel.t))
    delta_r = se3_exp(Twist(angle * axis, np.zeros(3))).R
    pose = Pose(delta_r @ rel.R, rel.t + t_noise)
    return PriorResponse(pose, "oracle", (time.monotonic() - start) * 1e3)


def validate_chain(chain) -> None:
    if not chain:
        raise ValueError("prior chain must be non-empty")
    if chain[-1].kind != "identity":
        raise ValueError("prior chain must terminate with an identity source")


def get_prior(chain, ctx: FrameContext) -> PriorResponse:
    """Query sources in order; the first usable pose wins.

    Latency reported is the total time spent in the chain, so a dead external
    endpoint shows up as identity with latency >= its timeout.
    """
    if not chain:
        raise ValueError("prior chain must be non-empty")
    start = time.monotonic()
    for src in chain:
        pose = None
        try:
            if src.kind == "identity":
                pose = Pose.identity()
            elif src.kind == "constant-motion":
                if ctx.prev_pose_world is None or ctx.prevprev_pose_world is None:
                    continue
                pose = constant_motion_extrapolate(ctx.prev_pose_world, ctx.prevprev_pose_world)
            elif src.kind == "external":
                pose = src.client().query(ctx.prev_id, ctx.cur_id, src.timeout_ms)
            elif src.kind == "oracle":
                pose = oracle_prior(
                    src.gt,
                    ctx.prev_id,
                    ctx.cur_id,
                    src.noise_rot_deg,
                    src.noise_trans_frac,
                    src.rng(),
                ).pose
        except (Unavailable, MissingFrame):
            continue
        if pose is not None:
            return PriorResponse(pose, src.kind, (time.monotonic() - start) * 1e3)
    return PriorResponse(Pose.identity(), "identity", (time.monotonic() - start) * 1e3)
