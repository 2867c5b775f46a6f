"""Split training protocol: packet contents, mode semantics, byte accounting,
the simulated time model, and transport parity."""

import io

import numpy as np
import pytest

from splitstream import protocol as pr
from splitstream.defenses import DefenseConfig
from splitstream.diffusion import make_linear_schedule
from splitstream.models import (ControlBranch, NoiseConfoundingActivation,
                                PromptEncoder, ToyAutoencoder, ToyUNet,
                                param_fingerprint, unet_denoise)
from splitstream.privacy import PrivacyParams, epsilon_for_timestep
from splitstream.protocol import (ClientDataset, ClientWorker, IterationSample,
                                  ProtocolConfig, ServerWorker, SimClock, SplitWorld,
                                  TransmissionLedger, account_transmission,
                                  client_forward_step, run_split_training,
                                  server_train_step)
from splitstream.rng import RngState
from splitstream.tensor import Tensor
from splitstream.wire import FeaturePacket, iter_frames

DELTA, ALPHA = 1e-4, 0.16
VOCAB = ["one", "two", "red", "blue", "circle", "rect"]


def build_world(defense_kind="none", seed=777, n_data=12, clients=1,
                cond_encoder="pretrained") -> SplitWorld:
    rng = RngState(seed)
    sched = make_linear_schedule(1000, 1.115e-5, 8.85e-4)
    defense = DefenseConfig(defense_kind)
    privacy = PrivacyParams.from_ts(sched, DELTA, ALPHA, defense.timestep_floor, 1000)
    ae = ToyAutoencoder(rng.split("ae"))
    ae.freeze()
    unet = ToyUNet(rng.split("unet"))
    unet.freeze()
    if cond_encoder == "pretrained":
        enc = ae
    else:
        from splitstream.models import CondEncoder

        enc = CondEncoder(rng.split("cond"))
    branch = ControlBranch(unet, enc, rng.split("branch"))
    pe = PromptEncoder(VOCAB, rng.split("pe"))
    act = NoiseConfoundingActivation.create(rng.split("act")) if defense.uses_confound else None
    if defense.hides_prompt:
        from splitstream.models import prompt_hide_transform

        branch, unet = prompt_hide_transform(branch, unet)
    data_rng = rng.split("data")
    datasets = []
    for _ in range(clients):
        images = data_rng.uniform((n_data, 3, 32, 32))
        conds = data_rng.uniform((n_data, 3, 32, 32))
        prompts = [[VOCAB[int(data_rng.integers(0, len(VOCAB) - 1))]] for _ in range(n_data)]
        datasets.append(ClientDataset(images, conds, prompts))
    return SplitWorld(sched, "cumulative", privacy, defense, pe, ae, unet, branch, act, datasets)


def make_cfg(**kw) -> ProtocolConfig:
    base = dict(mode="gradient_free", clients=1, iterations=4, batch=2, seed=5)
    base.update(kw)
    return ProtocolConfig(**base)


class TestClientForwardStep:
    def test_prompt_hiding_omits_prompt(self):
        world = build_world("ours_plus_plus")
        client = ClientWorker(0, world, make_cfg(), RngState(1))
        pkt = client_forward_step(client, 0)
        assert pkt.prompt_feat is None

    def test_prompt_present_without_hiding(self):
        world = build_world("none")
        client = ClientWorker(0, world, make_cfg(), RngState(1))
        pkt = client_forward_step(client, 0)
        assert pkt.prompt_feat is not None
        assert pkt.prompt_feat.shape[0] == 2  # batch

    def test_deterministic_given_rng(self):
        world = build_world("ours_plus_plus")
        a = client_forward_step(ClientWorker(0, world, make_cfg(), RngState(2)), 0)
        b = client_forward_step(ClientWorker(0, build_world("ours_plus_plus"), make_cfg(), RngState(2)), 0)
        assert a == b

    def test_timestep_respects_floor(self):
        world = build_world("ours_c")
        client = ClientWorker(0, world, make_cfg(), RngState(3))
        eps_s = epsilon_for_timestep(world.privacy.t_s, world.sched, DELTA, ALPHA)
        for it in range(40):
            pkt = client_forward_step(client, it)
            assert 536 <= pkt.timestep <= 1000
            assert epsilon_for_timestep(pkt.timestep, world.sched, DELTA, ALPHA) <= eps_s

    def test_undefended_samples_full_range(self):
        world = build_world("none")
        client = ClientWorker(0, world, make_cfg(), RngState(4))
        ts = {client_forward_step(client, i).timestep for i in range(50)}
        assert min(ts) < 536  # not clamped to the private floor

    def test_confound_changes_control_feature(self):
        base = build_world("none", seed=88)
        defended = build_world("ours_c", seed=88)
        pa = client_forward_step(ClientWorker(0, base, make_cfg(), RngState(5)), 0)
        pb = client_forward_step(ClientWorker(0, defended, make_cfg(), RngState(5)), 0)
        # same rng, same data: unet features before defenses agree on t? t_s
        # differs, so just check the defended control features are nonnegative
        # up to delta (|x| * 2 sigmoid(x) >= 0)
        assert pb.feat_control.min() >= defended.act.delta.min() - 1e-5


class TestServerTrainStep:
    def test_first_step_loss_matches_unconditional(self):
        world = build_world("none")
        cfg = make_cfg()
        client = ClientWorker(0, world, cfg, RngState(6))
        pkt = client_forward_step(client, 0)
        uncond = unet_denoise(pkt.feat_unet, pkt.timestep, pkt.prompt_feat, [], world.unet)
        # careful: unet_denoise runs block 1 again; compare via server path
        h1 = Tensor(pkt.feat_unet)
        uncond = world.unet.server_forward(h1, pkt.timestep, Tensor(pkt.prompt_feat), [])
        want = float(np.mean((pkt.label_noise.astype(np.float64) - uncond.data) ** 2))
        server = ServerWorker(world, cfg)
        loss, gpkt = server_train_step(server, pkt)
        assert gpkt is None
        assert abs(loss - want) < 1e-6 * max(1.0, want)

    def test_classic_returns_gradient_packet(self):
        world = build_world("none")
        cfg = make_cfg(mode="classic")
        client = ClientWorker(0, world, cfg, RngState(7))
        pkt = client_forward_step(client, 0)
        server = ServerWorker(world, cfg)
        loss, gpkt = server_train_step(server, pkt)
        assert gpkt is not None
        assert gpkt.grad_control.shape == pkt.feat_control.shape
        assert gpkt.n_pred is not None and gpkt.n_pred.shape == pkt.label_noise.shape
        # zero convs block the partition gradient at init; it appears once
        # they have moved off zero
        assert np.all(gpkt.grad_control == 0.0)
        pkt2 = client_forward_step(client, 1)
        _, gpkt2 = server_train_step(server, pkt2)
        assert np.abs(gpkt2.grad_control).max() > 0

    def test_frozen_hash_unchanged_after_steps(self):
        world = build_world("none")
        cfg = make_cfg()
        client = ClientWorker(0, world, cfg, RngState(8))
        server = ServerWorker(world, cfg)
        before = param_fingerprint({**world.unet.named_parameters("u."),
                                    **world.autoencoder.named_parameters("a.")})
        for it in range(25):
            server_train_step(server, client_forward_step(client, it))
        after = param_fingerprint({**world.unet.named_parameters("u."),
                                   **world.autoencoder.named_parameters("a.")})
        assert before == after
        assert len(server.loss_history) == 25

    def test_shape_mismatch_rejected(self):
        world = build_world("none")
        server = ServerWorker(world, make_cfg())
        bad = FeaturePacket(0, 0, 5, np.zeros((1, 4, 8, 8), np.float32),
                            np.zeros((1, 4, 4, 4), np.float32),
                            np.zeros((1, 4, 8, 8), np.float32))
        with pytest.raises(ValueError, match="shape"):
            server_train_step(server, bad)

    def test_nan_loss_aborts_with_diagnostic(self):
        world = build_world("none")
        server = ServerWorker(world, make_cfg())
        pkt = client_forward_step(ClientWorker(0, world, make_cfg(), RngState(9)), 3)
        pkt.feat_unet = np.full_like(pkt.feat_unet, np.nan)
        with pytest.raises(FloatingPointError, match="iteration 3"):
            server_train_step(server, pkt)


class TestLedger:
    def test_account_transmission_exact(self):
        from splitstream.wire import frame_message

        ledger = TransmissionLedger()
        pkt = FeaturePacket(0, 0, 1, np.zeros((1, 4, 8, 8), np.float32),
                            np.zeros((1, 4, 8, 8), np.float32),
                            np.zeros((1, 4, 8, 8), np.float32))
        account_transmission(ledger, pkt, "up")
        assert ledger.bytes_up == len(frame_message(pkt))
        assert ledger.payload_bytes_up == 3 * 256 * 4
        assert ledger.bytes_up >= 3 * 256 * 4 + 14

    def test_hundred_identical_packets(self):
        ledger = TransmissionLedger()
        pkt = FeaturePacket(0, 0, 1, np.zeros((2, 4, 8, 8), np.float32),
                            np.zeros((2, 4, 8, 8), np.float32),
                            np.zeros((2, 4, 8, 8), np.float32))
        for _ in range(100):
            account_transmission(ledger, pkt, "up")
        one = TransmissionLedger()
        account_transmission(one, pkt, "up")
        assert ledger.bytes_up == 100 * one.bytes_up
        assert ledger.packets == 100

    def test_time_totals_analytic(self):
        clock = SimClock(t_client=2.0, t_server=3.0, rate=1000.0)
        ledger = TransmissionLedger()
        for _ in range(30):
            ledger.add_sample(IterationSample(0, 2.0, 3.0, 500, 0))
        seq = ledger.t_total_sequential(clock)
        pipe = ledger.t_total_pipelined(clock)
        assert abs(seq - 30 * (2 + 3 + 0.5)) < 1e-9
        # server stage dominates: makespan ~ 30*3 + startup
        analytic = max(30 * 2.0, 30 * 3.0, 30 * 0.5)
        assert abs(pipe - analytic) / analytic < 0.2


class TestRunSplitTraining:
    def test_gradient_free_downlink_is_empty(self):
        world = build_world("ours_plus_plus")
        res = run_split_training(world, make_cfg(iterations=5))
        assert res.ledger.payload_bytes_down == 0
        assert res.ledger.bytes_down == 0
        assert res.ledger.packets == 5
        assert len(res.loss_history) == 5

    def test_classic_downlink_nonzero(self):
        world = build_world("none")
        res = run_split_training(world, make_cfg(mode="classic", iterations=5))
        assert res.ledger.payload_bytes_down > 0
        assert res.ledger.bytes_down > 0

    def test_mode_equivalence_with_frozen_encoder(self):
        # same seeds, frozen condition encoder on both sides: the training
        # math is transport- and mode-independent
        losses = {}
        for mode in ("classic", "gradient_free"):
            world = build_world("none", seed=314)
            res = run_split_training(world, make_cfg(mode=mode, iterations=10))
            losses[mode] = res.loss_history
        assert losses["classic"] == pytest.approx(losses["gradient_free"], abs=0.0)

    def test_classic_scratch_encoder_actually_trains(self):
        world = build_world("none", cond_encoder="scratch")
        cfg = make_cfg(mode="classic", iterations=6)
        before = None
        res = run_split_training(world, cfg)
        client = res.clients[0]
        assert client.trainable
        # optimizer stepped: moments allocated and step count advanced
        assert client.opt.step_count == 6

    def test_gradient_free_requires_pretrained_encoder(self):
        world = build_world("none", cond_encoder="scratch")
        with pytest.raises(ValueError, match="pretrained encoder"):
            run_split_training(world, make_cfg(mode="gradient_free"))

    def test_queue_depth_invariance_single_client(self):
        prints = []
        for depth in (1, 8):
            world = build_world("ours_plus_plus", seed=99)
            res = run_split_training(world, make_cfg(iterations=6, queue_depth=depth))
            prints.append(param_fingerprint(world.branch.server_parameters()))
            assert len(res.loss_history) == 6
        assert prints[0] == prints[1]

    def test_capture_file_replays(self, tmp_path):
        cap = tmp_path / "packets.bin"
        world = build_world("ours_plus_plus", seed=55)
        res = run_split_training(world, make_cfg(iterations=4, capture_path=str(cap)))
        with open(cap, "rb") as f:
            pkts = list(iter_frames(f))
        assert len(pkts) == 4
        assert all(isinstance(p, FeaturePacket) for p in pkts)
        assert [p.iteration for p in pkts] == [0, 1, 2, 3]

    def test_multi_client_processes_all(self):
        world = build_world("none", clients=3)
        res = run_split_training(world, make_cfg(clients=3, iterations=3))
        assert res.ledger.packets == 9
        assert len(res.loss_history) == 9

    def test_byte_ratio_classic_vs_gradient_free(self):
        # the headline accounting comparison: classic with prompts and
        # gradient downlink vs the gradient-free structure with prompt hiding
        world_c = build_world("none", seed=64)
        res_c = run_split_training(world_c, make_cfg(mode="classic", iterations=8))
        world_g = build_world("ours_plus_plus", seed=64)
        res_g = run_split_training(world_g, make_cfg(mode="gradient_free", iterations=8))
        ratio = res_c.ledger.total_bytes() / res_g.ledger.total_bytes()
        assert ratio >= 2.5

    def test_time_model_both_structures(self):
        clock = SimClock(t_client=1.0, t_server=2.0, rate=1e5)
        world = build_world("ours_plus_plus", seed=31)
        res = run_split_training(world, make_cfg(iterations=20, clock=clock))
        led = res.ledger
        t_c = sum(s.t_client for s in led.samples)
        t_s = sum(s.t_server for s in led.samples)
        t_r = sum(s.bytes_up + s.bytes_down for s in led.samples) / clock.rate
        assert abs(led.t_total_sequential(clock) - (t_c + t_s + t_r)) / (t_c + t_s + t_r) < 0.2
        assert abs(led.t_total_pipelined(clock) - max(t_c, t_s, t_r)) / max(t_c, t_s, t_r) < 0.2

    def test_ledger_dict_keys(self):
        world = build_world("none", seed=2)
        res = run_split_training(world, make_cfg(iterations=2))
        d = res.ledger.to_dict(SimClock())
        for key in ("bytes_up", "bytes_down", "packets", "t_total_sequential", "t_total_pipelined"):
            assert key in d


class TestTcpTransport:
    def test_tcp_matches_in_process(self):
        results = {}
        for transport in ("in_process", "tcp"):
            world = build_world("ours_plus_plus", seed=21)
            res = run_split_training(world, make_cfg(iterations=3, transport=transport))
            results[transport] = (res.loss_history, res.ledger.bytes_up)
        assert results["tcp"] == results["in_process"]

    def test_tcp_classic_roundtrip(self):
        world = build_world("none", seed=22)
        res = run_split_training(world, make_cfg(mode="classic", iterations=3, transport="tcp"))
        assert res.ledger.bytes_down > 0
        assert len(res.loss_history) == 3


class TestStandaloneRoles:
    def test_server_and_client_roles_match_in_process(self):
        import socket
        import threading

        from splitstream.protocol import run_client_role, run_server_role

        # both endpoints rebuild the same world from the shared seed
        cfg = make_cfg(iterations=4)
        baseline_world = build_world("ours_plus_plus", seed=23)
        baseline = run_split_training(baseline_world, make_cfg(iterations=4))

        lsock = socket.socket()
        lsock.bind(("127.0.0.1", 0))
        port = lsock.getsockname()[1]
        lsock.close()

        server_world = build_world("ours_plus_plus", seed=23)
        holder = {}

        def serve():
            holder["res"] = run_server_role(server_world, make_cfg(iterations=4),
                                            "127.0.0.1", port)

        t = threading.Thread(target=serve, daemon=True)
        t.start()
        client_world = build_world("ours_plus_plus", seed=23)
        run_client_role(client_world, cfg, 0, "127.0.0.1", port)
        t.join(timeout=30)
        res = holder["res"]
        assert res.loss_history == baseline.loss_history
        assert res.ledger.bytes_up == baseline.ledger.bytes_up

    def test_classic_roles_exchange_gradients(self):
        import socket
        import threading

        from splitstream.protocol import run_client_role, run_server_role

        lsock = socket.socket()
        lsock.bind(("127.0.0.1", 0))
        port = lsock.getsockname()[1]
        lsock.close()

        server_world = build_world("none", seed=24)
        holder = {}

        def serve():
            holder["res"] = run_server_role(server_world, make_cfg(mode="classic", iterations=3),
                                            "127.0.0.1", port)

        t = threading.Thread(target=serve, daemon=True)
        t.start()
        client_world = build_world("none", seed=24)
        run_client_role(client_world, make_cfg(mode="classic", iterations=3), 0,
                        "127.0.0.1", port)
        t.join(timeout=30)
        assert holder["res"].ledger.bytes_down > 0
        assert len(holder["res"].loss_history) == 3
