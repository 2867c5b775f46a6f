"""Split training over framed messages: classic and gradient-free modes.

Classic mode is the sequential structure: the client trains its condition
encoder from gradients the server returns each iteration (the server also
returns its noise estimate, since generation happens client-side).
Gradient-free mode freezes every client module (the pretrained encoder
replaces the condition encoder), so clients stream packets through a
bounded queue and nothing flows downstream; server-side monitoring of the
noise estimate stays in the server's own log rather than on the wire.

Packets cross the boundary only as framed bytes, in-process or over TCP,
so the byte ledger measures exactly what a real deployment would send.
The clock model is simulated: per-iteration client/server compute costs
plus transfer time at a configured rate, from which the ledger derives
both the sequential total (sum of stages) and the pipelined total
(makespan of the client/link/server pipeline).
"""

from __future__ import annotations

import queue
import socket
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .defenses import DefenseConfig, postprocess_features, preprocess_batch
from .diffusion import NoiseSchedule, forward_diffuse, training_loss
from .models import (ControlBranch, NoiseConfoundingActivation, PromptEncoder,
                     ToyAutoencoder, ToyUNet, noise_confound)
from .optim import AdamW
from .privacy import PrivacyParams, sample_private_timestep
from .rng import RngState
from .tensor import Tensor
from .wire import (CTRL_DONE, ControlMessage, FeaturePacket, GradientPacket,
                   frame_message, parse_message, read_frame, tensor_payload_bytes)


class TransportError(RuntimeError):
    pass


@dataclass
class SimClock:
    """Per-iteration cost constants for the simulated time model."""

    t_client: float = 1.0
    t_server: float = 1.0
    rate: float = 1e6  # bytes per clock unit
    wall: bool = False  # measure real compute time instead of the constants


@dataclass
class IterationSample:
    client_id: int
    t_client: float
    t_server: float
    bytes_up: int
    bytes_down: int


class TransmissionLedger:
    """Exact on-the-wire byte accounting plus per-iteration timing samples."""

    def __init__(self):
        self.bytes_up = 0
        self.bytes_down = 0
        self.payload_bytes_up = 0
        self.payload_bytes_down = 0
        self.packets = 0
        self.samples: list[IterationSample] = []
        self._lock = threading.Lock()

    def add(self, direction: str, framed_bytes: int, payload_bytes: int) -> None:
        with self._lock:
            if direction == "up":
                self.bytes_up += framed_bytes
                self.payload_bytes_up += payload_bytes
            elif direction == "down":
                self.bytes_down += framed_bytes
                self.payload_bytes_down += payload_bytes
            else:
                raise ValueError(f"direction must be up/down, got {direction!r}")
            self.packets += 1

    def add_sample(self, sample: IterationSample) -> None:
        with self._lock:
            self.samples.append(sample)

    def total_bytes(self) -> int:
        return self.bytes_up + self.bytes_down

    def t_total_sequential(self, clock: SimClock) -> float:
        """Lock-step total: every stage of every iteration strictly in series."""
        return sum(
            s.t_client + s.t_server + (s.bytes_up + s.bytes_down) / clock.rate
            for s in self.samples
        )

    def t_total_pipelined(self, clock: SimClock) -> float:
        """Makespan of the client -> link -> server pipeline over the samples."""
        per_client: dict[int, int] = {}
        ready = []
        for s in self.samples:
            k = per_client.get(s.client_id, 0) + 1
            per_client[s.client_id] = k
            ready.append((k * s.t_client, s))
        ready.sort(key=lambda r: (r[0], r[1].client_id))
        link_free = 0.0
        server_free = 0.0
        for r, s in ready:
            link_done = max(link_free, r) + s.bytes_up / clock.rate
            link_free = link_done
            server_free = max(server_free, link_done) + s.t_server
        return server_free

    def to_dict(self, clock: SimClock) -> dict:
        return {
            "bytes_up": self.bytes_up,
            "bytes_down": self.bytes_down,
            "packets": self.packets,
            "t_total_sequential": self.t_total_sequential(clock),
            "t_total_pipelined": self.t_total_pipelined(clock),
            "payload_bytes_up": self.payload_bytes_up,
            "payload_bytes_down": self.payload_bytes_down,
        }


def account_transmission(ledger: TransmissionLedger, msg, direction: str = "up") -> None:
    """Add one message's exact framed size to the ledger."""
    ledger.add(direction, len(frame_message(msg)), tensor_payload_bytes(msg))


# ---------------------------------------------------------------------------
# world and workers


@dataclass
class ClientDataset:
    images: np.ndarray
    conds: np.ndarray
    prompts: list[list[str]]


@dataclass
class SplitWorld:
    """Everything both parties hold before the partition is enforced."""

    sched: NoiseSchedule
    variant: str
    privacy: PrivacyParams
    defense: DefenseConfig
    prompt_encoder: PromptEncoder
    autoencoder: ToyAutoencoder
    unet: ToyUNet
    branch: ControlBranch
    act: NoiseConfoundingActivation | None
    datasets: list[ClientDataset]


@dataclass
class ProtocolConfig:
    mode: str = "gradient_free"  # | "classic"
    clients: int = 1
    iterations: int = 100  # per client
    batch: int = 4
    seed: int = 0
    transport: str = "in_process"  # | "tcp"
    queue_depth: int = 8
    server_lr: float = 1e-3
    client_lr: float = 1e-3
    weight_decay: float = 0.0
    return_n_pred: bool = True  # classic downlink carries the noise estimate
    monitor_n_pred: bool = False  # gradient-free: log estimates server-side
    capture_path: str | None = None
    clock: SimClock = field(default_factory=SimClock)
    tcp_host: str = "127.0.0.1"
    tcp_port: int = 0
    connect_retries: int = 3

    def validate(self):
        if self.mode not in ("classic", "gradient_free"):
            raise ValueError(f"mode must be classic|gradient_free, got {self.mode!r}")
        if self.transport not in ("in_process", "tcp"):
            raise ValueError(f"transport must be in_process|tcp, got {self.transport!r}")
        if self.clients < 1 or self.iterations < 0 or self.batch < 1:
            raise ValueError("clients/iterations/batch out of range")


class ClientWorker:
    """Client-side state: frozen encoders, the condition encoder, secrets."""

    def __init__(self, client_id: int, world: SplitWorld, cfg: ProtocolConfig, rng: RngState):
        self.client_id = client_id
        self.world = world
        self.cfg = cfg
        self.data = world.datasets[client_id]
        self.rng_order = rng.split("order")
        self.rng_t = rng.split("timestep")
        self.rng_noise = rng.split("noise")
        self.rng_drop = rng.split("dropout")
        self.rng_defense = rng.split("defense")
        self.trainable = cfg.mode == "classic" and not isinstance(
            world.branch.condition_encoder, ToyAutoencoder
        )
        if self.trainable:
            # classic split learning: each client trains its own condition encoder
            from .models import CondEncoder

            self.cond_encoder = CondEncoder(rng.split("cond_encoder"))
            src = world.branch.condition_encoder.named_parameters()
            for name, p in self.cond_encoder.named_parameters().items():
                p.data[...] = src[name].data
            self.opt = AdamW(
                list(self.cond_encoder.named_parameters().values()),
                lr=cfg.client_lr, weight_decay=cfg.weight_decay,
            )
        else:
            self.cond_encoder = None  # the shared frozen autoencoder stands in
            self.opt = None
        self._pending: Tensor | None = None

    def encode_condition(self, cond: Tensor) -> Tensor:
        if self.cond_encoder is not None:
            return self.cond_encoder(cond, self.rng_drop, training=True)
        return self.world.autoencoder.encode(cond, self.rng_drop, training=True)

    def forward_step(self, iteration: int) -> FeaturePacket:
        w = self.world
        idx = np.asarray(self.rng_order.integers(0, len(self.data.images) - 1, (self.cfg.batch,)))
        images = self.data.images[idx]
        conds = self.data.conds[idx]
        prompts = [self.data.prompts[i] for i in idx]
        images, conds = preprocess_batch(images, conds, w.defense, self.rng_defense)

        t = sample_private_timestep(w.privacy, self.rng_t)
        z0 = w.autoencoder.encode(Tensor(images), self.rng_drop, training=True)
        state = forward_diffuse(z0.data, t, w.sched, self.rng_noise, w.variant)
        prompt_feat = w.prompt_encoder.encode(prompts)
        h1 = w.unet.encode_block1(Tensor(state.zt), t, Tensor(prompt_feat))

        cond_feat = self.encode_condition(Tensor(conds))
        s = tt.add(Tensor(state.zt), cond_feat)
        if w.act is not None:
            s = noise_confound(s, w.act)
        self._pending = s if self.trainable else None

        feat_unet, feat_control = postprocess_features(
            h1.data, s.data, w.defense, w.privacy.delta, w.privacy.alpha_sens, self.rng_defense
        )
        return FeaturePacket(
            client_id=self.client_id,
            iteration=iteration,
            timestep=t,
            feat_unet=feat_unet,
            feat_control=feat_control,
            label_noise=state.n_hat,
            prompt_feat=None if w.defense.hides_prompt else prompt_feat,
        )

    def apply_gradient(self, gpkt: GradientPacket) -> None:
        if self.opt is None or self._pending is None:
            return
        self.opt.zero_grad()
        tt.backward(self._pending, seed_grad=gpkt.grad_control)
        self.opt.step()
        self._pending = None


def client_forward_step(client: ClientWorker, iteration: int) -> FeaturePacket:
    """One client inference pass; emits the transmission unit for `iteration`."""
    return client.forward_step(iteration)


class ServerWorker:
    """Server-side state: control branch remainder, frozen denoiser, optimizer."""

    def __init__(self, world: SplitWorld, cfg: ProtocolConfig):
        self.world = world
        self.cfg = cfg
        self.opt = AdamW(
            list(world.branch.server_parameters().values()),
            lr=cfg.server_lr, weight_decay=cfg.weight_decay,
        )
        self.loss_history: list[float] = []
        self.n_pred_log: list[np.ndarray] = []

    def train_step(self, pkt: FeaturePacket) -> tuple[float, GradientPacket | None]:
        w = self.world
        if pkt.feat_unet.shape != pkt.feat_control.shape or pkt.feat_unet.shape != pkt.label_noise.shape:
            raise ValueError(
                f"packet shape mismatch: feat_unet {pkt.feat_unet.shape}, "
                f"feat_control {pkt.feat_control.shape}, label {pkt.label_noise.shape}"
            )
        classic = self.cfg.mode == "classic"
        s = Tensor(pkt.feat_control, requires_grad=classic)
        h1 = Tensor(pkt.feat_unet)
        prompt = None if pkt.prompt_feat is None else Tensor(pkt.prompt_feat)
        taps = w.branch.server_forward(s, pkt.timestep, prompt)
        n = w.unet.server_forward(h1, pkt.timestep, prompt, taps)
        loss = training_loss(pkt.label_noise, n)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise FloatingPointError(
                f"non-finite training loss at client {pkt.client_id} iteration {pkt.iteration}"
            )
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        self.loss_history.append(loss_val)
        if classic:
            return loss_val, GradientPacket(
                iteration=pkt.iteration,
                grad_control=s.grad.copy(),
                n_pred=n.data.copy() if self.cfg.return_n_pred else None,
            )
        if self.cfg.monitor_n_pred:
            self.n_pred_log.append(n.data.copy())
        return loss_val, None


def server_train_step(server: ServerWorker, pkt: FeaturePacket):
    """One server training pass over a received packet."""
    return server.train_step(pkt)


@dataclass
class SplitResult:
    ledger: TransmissionLedger
    loss_history: list[float]
    server: ServerWorker
    clients: list[ClientWorker]
    capture_path: str | None


# ---------------------------------------------------------------------------
# transports


_DONE = object()


def run_split_training(world: SplitWorld, cfg: ProtocolConfig) -> SplitResult:
    """Drive the whole session; returns the ledger and trained server state."""
    cfg.validate()
    if cfg.mode == "gradient_free" and not isinstance(world.branch.condition_encoder, ToyAutoencoder):
        raise ValueError("gradient_free mode requires the pretrained encoder as condition encoder")
    server = ServerWorker(world, cfg)
    root = RngState(cfg.seed)
    clients = [
        ClientWorker(i, world, cfg, root.split(f"client-{i}"))
        for i in range(cfg.clients)
    ]
    ledger = TransmissionLedger()
    capture = open(cfg.capture_path, "wb") if cfg.capture_path else None
    capture_lock = threading.Lock()
    try:
        if cfg.transport == "in_process":
            _run_in_process(world, cfg, server, clients, ledger, capture, capture_lock)
        else:
            _run_tcp(world, cfg, server, clients, ledger, capture, capture_lock)
    finally:
        if capture:
            capture.close()
    return SplitResult(ledger, server.loss_history, server, clients, cfg.capture_path)


def _client_loop(client: ClientWorker, cfg: ProtocolConfig, send, recv, ledger, capture, capture_lock, errors):
    try:
        for it in range(cfg.iterations):
            t0 = time.perf_counter()
            pkt = client.forward_step(it)
            elapsed = time.perf_counter() - t0
            framed = frame_message(pkt)
            ledger.add("up", len(framed), tensor_payload_bytes(pkt))
            if capture is not None:
                with capture_lock:
                    capture.write(framed)
            send((framed, elapsed))
            if cfg.mode == "classic":
                resp = recv()
                if resp is None:
                    return  # server aborted
                gpkt = parse_message(resp)
                if not isinstance(gpkt, GradientPacket):
                    raise TransportError(f"expected GradientPacket, got {type(gpkt).__name__}")
                client.apply_gradient(gpkt)
    except BaseException as e:  # surfaced after join
        errors.append(e)
        send((None, 0.0))


def _run_in_process(world, cfg, server, clients, ledger, capture, capture_lock):
    up_q: queue.Queue = queue.Queue(maxsize=cfg.queue_depth)
    resp_qs = {c.client_id: queue.Queue(maxsize=1) for c in clients}
    errors: list[BaseException] = []
    threads = []
    for c in clients:
        t = threading.Thread(
            target=_client_loop,
            args=(c, cfg, up_q.put, resp_qs[c.client_id].get, ledger, capture, capture_lock, errors),
            daemon=True,
        )
        threads.append(t)
        t.start()
    total = cfg.clients * cfg.iterations
    processed = 0
    try:
        while processed < total and not errors:
            framed, t_client_wall = up_q.get()
            if framed is None:
                break
            pkt = parse_message(framed)
            t0 = time.perf_counter()
            _, gpkt = server.train_step(pkt)
            t_server_wall = time.perf_counter() - t0
            down_bytes = 0
            if gpkt is not None:
                framed_down = frame_message(gpkt)
                down_bytes = len(framed_down)
                ledger.add("down", down_bytes, tensor_payload_bytes(gpkt))
                resp_qs[pkt.client_id].put(framed_down)
            clock = cfg.clock
            ledger.add_sample(IterationSample(
                client_id=pkt.client_id,
                t_client=t_client_wall if clock.wall else clock.t_client,
                t_server=t_server_wall if clock.wall else clock.t_server,
                bytes_up=len(framed),
                bytes_down=down_bytes,
            ))
            processed += 1
    finally:
        # unblock any client waiting on a response or a full queue
        for q in resp_qs.values():
            try:
                q.put_nowait(None)
            except queue.Full:
                pass
        while True:
            try:
                up_q.get_nowait()
            except queue.Empty:
                break
        for t in threads:
            t.join(timeout=60)
    if errors:
        raise errors[0]


def _run_tcp(world, cfg, server, clients, ledger, capture, capture_lock):
    lsock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    lsock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    lsock.bind((cfg.tcp_host, cfg.tcp_port))
    lsock.listen(cfg.clients)
    port = lsock.getsockname()[1]

    up_q: queue.Queue = queue.Queue(maxsize=max(cfg.queue_depth, cfg.clients))
    conns: dict[int, socket.socket] = {}
    errors: list[BaseException] = []

    def reader(conn: socket.socket):
        try:
            while True:
                frame = read_frame(conn)
                if frame is None:
                    return
                msg = parse_message(frame)
                if isinstance(msg, ControlMessage):
                    if msg.code == CTRL_DONE:
                        return
                    conns[msg.client_id] = conn
                    continue
                up_q.put((frame, msg))
        except BaseException as e:
            errors.append(e)
            up_q.put((None, None))

    def tcp_send(conn):
        def send(item):
            framed, _ = item
            if framed is not None:
                conn.sendall(framed)
        return send

    def tcp_recv(conn):
        def recv():
            frame = read_frame(conn)
            if frame is None:
                raise TransportError("server closed connection mid-session")
            return frame
        return recv

    accept_threads = []
    client_threads = []
    client_socks = []
    try:
        for c in clients:
            csock = _connect_with_retry(cfg.tcp_host, port, cfg.connect_retries)
            client_socks.append(csock)
            csock.sendall(frame_message(ControlMessage(code=0, client_id=c.client_id)))
            sconn, _ = lsock.accept()
            rt = threading.Thread(target=reader, args=(sconn,), daemon=True)
            rt.start()
            accept_threads.append((rt, sconn))
            ct = threading.Thread(
                target=_client_loop,
                args=(c, cfg, tcp_send(csock), tcp_recv(csock), ledger, capture, capture_lock, errors),
                daemon=True,
            )
            client_threads.append(ct)
        # hellos register the response route before any packet flows
        deadline = time.time() + 10
        while len(conns) < cfg.clients and time.time() < deadline and not errors:
            time.sleep(0.001)
        for ct in client_threads:
            ct.start()
        total = cfg.clients * cfg.iterations
        processed = 0
        while processed < total and not errors:
            frame, pkt = up_q.get()
            if frame is None:
                break
            t0 = time.perf_counter()
            _, gpkt = server.train_step(pkt)
            t_server_wall = time.perf_counter() - t0
            down_bytes = 0
            if gpkt is not None:
                framed_down = frame_message(gpkt)
                down_bytes = len(framed_down)
                ledger.add("down", down_bytes, tensor_payload_bytes(gpkt))
                conns[pkt.client_id].sendall(framed_down)
            clock = cfg.clock
            ledger.add_sample(IterationSample(
                client_id=pkt.client_id,
                t_client=clock.t_client,
                t_server=t_server_wall if clock.wall else clock.t_server,
                bytes_up=len(frame),
                bytes_down=down_bytes,
            ))
            processed += 1
        for ct in client_threads:
            ct.join(timeout=60)
    finally:
        for s in client_socks:
            try:
                s.sendall(frame_message(ControlMessage(code=CTRL_DONE, client_id=0)))
            except OSError:
                pass
            s.close()
        for rt, sconn in accept_threads:
            sconn.close()
        lsock.close()
    if errors:
        raise errors[0]


def _connect_with_retry(host: str, port: int, retries: int) -> socket.socket:
    last = None
    for attempt in range(retries):
        try:
            return socket.create_connection((host, port), timeout=10)
        except OSError as e:
            last = e
            time.sleep(0.05 * (attempt + 1))
    raise TransportError(f"could not connect to {host}:{port} after {retries} attempts") from last


# ---------------------------------------------------------------------------
# standalone roles (cross-process deployment over TCP)


def run_server_role(world: SplitWorld, cfg: ProtocolConfig, host: str, port: int) -> SplitResult:
    """Serve `cfg.clients` remote clients until each signals done.

    Both endpoints rebuild the same world from the shared config; only
    framed messages cross the wire.
    """
    cfg.validate()
    server = ServerWorker(world, cfg)
    ledger = TransmissionLedger()
    capture = open(cfg.capture_path, "wb") if cfg.capture_path else None
    lsock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    lsock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    lsock.bind((host, port))
    lsock.listen(cfg.clients)

    up_q: queue.Queue = queue.Queue(maxsize=max(cfg.queue_depth, cfg.clients))
    conns: dict[int, socket.socket] = {}
    errors: list[BaseException] = []
    _DONE_MARK = "done"

    def reader(conn):
        try:
            while True:
                frame = read_frame(conn)
                if frame is None:
                    return
                msg = parse_message(frame)
                if isinstance(msg, ControlMessage):
                    if msg.code == CTRL_DONE:
                        # in-band so queued packets drain before we count it
                        up_q.put((_DONE_MARK, msg.client_id))
                        return
                    conns[msg.client_id] = conn
                    continue
                up_q.put((frame, msg))
        except BaseException as e:
            errors.append(e)
            up_q.put((None, None))

    readers = []
    finished = 0
    try:
        for _ in range(cfg.clients):
            conn, _ = lsock.accept()
            t = threading.Thread(target=reader, args=(conn,), daemon=True)
            t.start()
            readers.append((t, conn))
        while finished < cfg.clients and not errors:
            frame, pkt = up_q.get()
            if frame is None:
                break
            if frame == _DONE_MARK:
                finished += 1
                continue
            ledger.add("up", len(frame), tensor_payload_bytes(pkt))
            if capture is not None:
                capture.write(frame)
            t0 = time.perf_counter()
            _, gpkt = server.train_step(pkt)
            t_server_wall = time.perf_counter() - t0
            down_bytes = 0
            if gpkt is not None:
                framed_down = frame_message(gpkt)
                down_bytes = len(framed_down)
                ledger.add("down", down_bytes, tensor_payload_bytes(gpkt))
                conns[pkt.client_id].sendall(framed_down)
            clock = cfg.clock
            ledger.add_sample(IterationSample(
                client_id=pkt.client_id,
                t_client=clock.t_client,
                t_server=t_server_wall if clock.wall else clock.t_server,
                bytes_up=len(frame),
                bytes_down=down_bytes,
            ))
    finally:
        for t, conn in readers:
            conn.close()
        lsock.close()
        if capture:
            capture.close()
    if errors:
        raise errors[0]
    return SplitResult(ledger, server.loss_history, server, [], cfg.capture_path)


def run_client_role(world: SplitWorld, cfg: ProtocolConfig, client_id: int,
                    host: str, port: int) -> None:
    """One remote client: stream packets, apply gradients in classic mode."""
    cfg.validate()
    client = ClientWorker(client_id, world, cfg, RngState(cfg.seed).split(f"client-{client_id}"))
    sock = _connect_with_retry(host, port, cfg.connect_retries)
    try:
        sock.sendall(frame_message(ControlMessage(code=0, client_id=client_id)))
        for it in range(cfg.iterations):
            pkt = client.forward_step(it)
            sock.sendall(frame_message(pkt))
            if cfg.mode == "classic":
                frame = read_frame(sock)
                if frame is None:
                    raise TransportError("server closed connection mid-session")
                gpkt = parse_message(frame)
                if not isinstance(gpkt, GradientPacket):
                    raise TransportError(f"expected GradientPacket, got {type(gpkt).__name__}")
                client.apply_gradient(gpkt)
        sock.sendall(frame_message(ControlMessage(code=CTRL_DONE, client_id=client_id)))
    finally:
        sock.close()
