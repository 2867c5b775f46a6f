"""End-to-end experiment orchestration.

Stages: synthesize data (train / public / private from disjoint seed
ranges), pretrain and freeze the autoencoder, calibrate the privacy
budget, run split training with the configured mode and defense, capture
worst-case evaluation packets (timestep pinned to t_s), run the attack
suite against defended and undefended arms on the same seeds, and emit a
report directory: metrics JSONL, budget CSV, ledger JSON, reconstruction
PPMs, and a manifest with every seed and calibration constant. The whole
pipeline is a pure function of the config, so reruns are byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import data as dtt
from . import tensor as tt
from .attacks import (FeatureScaler, InverseNet, ReconstructionReport,
                      apply_inverse_net, train_inverse_network, unsplit_attack,
                      whitebox_gd_attack)
from .checkpoint import save_checkpoint
from .config import ExperimentConfig, config_to_dict
from .defenses import DefenseConfig
from .diffusion import forward_diffuse, make_linear_schedule, write_schedule_csv
from .models import (CondEncoder, ControlBranch, NoiseConfoundingActivation,
                     PromptEncoder, ToyUNet, noise_confound, param_fingerprint,
                     pretrain_autoencoder, prompt_hide_transform)
from .privacy import (PrivacyParams, epsilon_for_timestep, estimate_sensitivity,
                      timestep_for_epsilon)
from .protocol import (ClientDataset, ProtocolConfig, SimClock, SplitWorld,
                       run_split_training)
from .rng import RngState
from .tensor import Tensor
from .wire import frame_message


@dataclass
class DataBundle:
    train: tuple
    public: tuple
    private: tuple
    train_samples: list
    private_samples: list


def synthesize_data(cfg: ExperimentConfig) -> DataBundle:
    """Three datasets from disjoint seed ranges."""
    train = dtt.generate_dataset(cfg.dataset.n_train, cfg.seed + 1)
    public = dtt.generate_dataset(cfg.dataset.n_public, cfg.seed + 2)
    private = dtt.generate_dataset(cfg.dataset.n_private, cfg.seed + 3)
    kind = cfg.dataset.condition
    return DataBundle(
        train=dtt.dataset_arrays(train, kind),
        public=dtt.dataset_arrays(public, kind),
        private=dtt.dataset_arrays(private, kind),
        train_samples=train,
        private_samples=private,
    )


def build_world(cfg: ExperimentConfig, defense_kind: str, ae, data: DataBundle,
                alpha_sens: float) -> SplitWorld:
    """Deterministic world for one defense arm; frozen parts are identical
    across arms because they derive from the same seed labels."""
    rng = RngState(cfg.seed)
    sched = make_linear_schedule(cfg.schedule.T, cfg.schedule.k, cfg.schedule.beta0,
                                 cfg.schedule.lam)
    defense = DefenseConfig(
        kind=defense_kind,
        epsilon=cfg.defense.epsilon,
        rr_bits=cfg.defense.rr_bits,
        sigma2=cfg.defense.sigma2,
        mix_count=cfg.defense.mix_count,
        patch=cfg.defense.patch,
        t_s=cfg.defense.t_s,
    )
    if defense.kind in ("ours_c", "ours_plus_plus") and cfg.privacy.epsilon is not None:
        defense.t_s = timestep_for_epsilon(cfg.privacy.epsilon, sched,
                                           cfg.privacy.delta, alpha_sens)
    privacy = PrivacyParams.from_ts(sched, cfg.privacy.delta, alpha_sens,
                                    defense.timestep_floor, cfg.privacy.t_max)
    unet = ToyUNet(rng.split("unet"))
    unet.freeze()
    if cfg.protocol.condition_encoder == "scratch" and cfg.protocol.mode == "classic":
        cond_encoder = CondEncoder(rng.split("cond-encoder"), cfg.pretrain.ae_dropout)
    else:
        cond_encoder = ae
    branch = ControlBranch(unet, cond_encoder, rng.split("branch"))
    pe = PromptEncoder(dtt.VOCAB, rng.split("prompt-encoder"))
    act = NoiseConfoundingActivation.create(rng.split("confound")) if defense.uses_confound else None
    if defense.hides_prompt:
        branch, unet = prompt_hide_transform(branch, unet)
    images, conds, prompts = data.train
    per = max(1, len(images) // cfg.protocol.clients)
    datasets = []
    for c in range(cfg.protocol.clients):
        sl = slice(c * per, (c + 1) * per)
        datasets.append(ClientDataset(images[sl], conds[sl], prompts[sl]))
    return SplitWorld(sched, cfg.schedule.variant, privacy, defense, pe, ae, unet,
                      branch, act, datasets)


def protocol_config(cfg: ExperimentConfig, capture_path=None) -> ProtocolConfig:
    p = cfg.protocol
    return ProtocolConfig(
        mode=p.mode, clients=p.clients, iterations=p.iterations, batch=p.batch,
        seed=cfg.seed, transport=p.transport, queue_depth=p.queue_depth,
        server_lr=p.server_lr, client_lr=p.client_lr, weight_decay=p.weight_decay,
        capture_path=capture_path,
        clock=SimClock(t_client=p.t_client, t_server=p.t_server, rate=p.rate),
    )


# ---------------------------------------------------------------------------
# worst-case evaluation packets and attack arms


@dataclass
class EvalCapture:
    """Per-sample worst-case packets plus the internals attacks may be granted."""

    packets: list
    zt: np.ndarray          # (N, 4, 8, 8) noisy latents (whitebox side info)
    n_hat: np.ndarray
    t: int
    truth_conds: np.ndarray
    truth_images: np.ndarray


def generate_eval_packets(world: SplitWorld, data: DataBundle, seed: int) -> EvalCapture:
    """One packet per private sample at the worst-case timestep t = t_s."""
    from .wire import FeaturePacket

    images, conds, prompts = data.private
    t = world.privacy.t_s
    drop = RngState(seed).split("eval-dropout")
    noise = RngState(seed).split("eval-noise")
    packets, zts, nhats = [], [], []
    for i in range(len(images)):
        img, cond = images[i : i + 1], conds[i : i + 1]
        z0 = world.autoencoder.encode(Tensor(img), drop, training=True)
        state = forward_diffuse(z0.data, t, world.sched, noise, world.variant)
        pf = world.prompt_encoder.encode([prompts[i]])
        h1 = world.unet.encode_block1(Tensor(state.zt), t, Tensor(pf))
        cf = world.branch.encode_condition(Tensor(cond), drop, training=True)
        s = tt.add(Tensor(state.zt), cf)
        if world.act is not None:
            s = noise_confound(s, world.act)
        packets.append(FeaturePacket(
            client_id=0, iteration=i, timestep=t,
            feat_unet=h1.data, feat_control=s.data, label_noise=state.n_hat,
            prompt_feat=None if world.defense.hides_prompt else pf,
        ))
        zts.append(state.zt[0])
        nhats.append(state.n_hat[0])
    return EvalCapture(packets=packets, zt=np.stack(zts), n_hat=np.stack(nhats), t=t,
                       truth_conds=conds, truth_images=images)


def _packet_matrix(packets) -> np.ndarray:
    """Stack everything the server sees into the attacker's input channels."""
    return np.concatenate([
        np.concatenate([p.feat_control, p.feat_unet, p.label_noise], axis=1)
        for p in packets
    ], axis=0)


def attacker_view_features(world: SplitWorld, images, conds, prompts, t: int,
                           seed: int) -> np.ndarray:
    """The attacker's own simulation of the client pipeline on public data.

    It knows every frozen weight and the sampling policy; it does not know
    the secret confound offset and uses zero for it.
    """
    guess_act = (NoiseConfoundingActivation(delta=np.zeros((4, 8, 8), np.float32))
                 if world.act is not None else None)
    drop = RngState(seed).split("atk-dropout")
    noise = RngState(seed).split("atk-noise")
    z0 = world.autoencoder.encode(Tensor(images), drop, training=True)
    state = forward_diffuse(z0.data, t, world.sched, noise, world.variant)
    pf = world.prompt_encoder.encode(prompts)
    h1 = world.unet.encode_block1(Tensor(state.zt), t, Tensor(pf))
    cf = world.autoencoder.encode(Tensor(conds), drop, training=True)
    s = tt.add(Tensor(state.zt), cf)
    if guess_act is not None:
        s = noise_confound(s, guess_act)
    return np.concatenate([s.data, h1.data, state.n_hat], axis=1)


def run_inverse_net_attack(world: SplitWorld, data: DataBundle, cap: EvalCapture,
                           cfg: ExperimentConfig, net_type: str = "type2_condition"
                           ) -> ReconstructionReport:
    """Train an inverse network on public data, apply it to the captured
    packets, score against the private ground truth."""
    images, conds, prompts = data.public
    feats = attacker_view_features(world, images, conds, prompts, cap.t, cfg.seed + 11)
    targets = conds if net_type == "type2_condition" else images
    scaler = FeatureScaler(feats)
    net = InverseNet(net_type, RngState(cfg.seed).split("inverse-net"), in_ch=feats.shape[1])
    net, losses = train_inverse_network(
        scaler(feats), targets, net,
        {"lr": cfg.attacks.inverse_lr, "iters": cfg.attacks.inverse_iters,
         "batch": cfg.attacks.inverse_batch},
        RngState(cfg.seed).split("inverse-train"),
    )
    eval_feats = scaler(_packet_matrix(cap.packets))
    truth = cap.truth_conds if net_type == "type2_condition" else cap.truth_images
    report = apply_inverse_net(net, eval_feats, ground_truth=truth,
                               defense_config={"kind": world.defense.kind, "t_s": cap.t})
    report.attack_config.update(iters=cfg.attacks.inverse_iters,
                                lr=cfg.attacks.inverse_lr,
                                final_train_loss=losses[-1])
    return report


def run_whitebox_attack(world: SplitWorld, cap: EvalCapture,
                        cfg: ExperimentConfig) -> ReconstructionReport:
    """Per-sample gradient descent on the condition latent.

    The attacker knows the public encoder/decoder and the packet (n_hat, t)
    and is granted the noisy latent z_t, the strongest honest-but-curious
    position: without the confound activation it can subtract z_t exactly
    and decode; with it, the secret offset and the folded sign are missing.
    """
    recons, diverged = [], False
    guess_act = (NoiseConfoundingActivation(delta=np.zeros((4, 8, 8), np.float32))
                 if world.act is not None else None)
    for i, pkt in enumerate(cap.packets):
        zt = Tensor(cap.zt[i : i + 1])
        target = pkt.feat_control

        def model_fn(u):
            pred = tt.add(zt, u)
            if guess_act is not None:
                pred = noise_confound(pred, guess_act)
            return pred

        rep = whitebox_gd_attack(
            target, model_fn, (1, 4, 8, 8),
            {"iters": cfg.attacks.whitebox_iters, "lr": cfg.attacks.whitebox_lr,
             "clip": False, "init_scale": 0.1},
            RngState(cfg.seed + i).split("whitebox"),
        )
        diverged = diverged or rep.diverged
        recons.append(world.autoencoder.decode(Tensor(rep.recons)).data[0])
    report = ReconstructionReport(
        method="whitebox", recons=np.stack(recons),
        attack_config={"iters": cfg.attacks.whitebox_iters, "lr": cfg.attacks.whitebox_lr,
                       "granted": "zt, n_hat, t, all public weights"},
        defense_config={"kind": world.defense.kind, "t_s": cap.t},
        diverged=diverged,
    )
    return report.score_against(cap.truth_conds)


def run_unsplit_attack_arm(world: SplitWorld, cap: EvalCapture,
                           cfg: ExperimentConfig) -> ReconstructionReport:
    """Black-box alternating optimization against the condition-path features."""
    targets = np.concatenate([p.feat_control for p in cap.packets], axis=0)

    def make_model(rng):
        enc = CondEncoder(rng, dropout_p=0.0)
        params = list(enc.named_parameters().values())
        eval_rng = rng.split("fwd")
        return (lambda x: enc(x, eval_rng, training=False)), params

    n = len(cap.packets)
    rep = unsplit_attack(
        targets, make_model, (n, 3, 32, 32),
        {"outer": cfg.attacks.unsplit_outer, "inner_x": cfg.attacks.unsplit_inner_x,
         "inner_theta": cfg.attacks.unsplit_inner_theta, "lr": cfg.attacks.unsplit_lr},
        RngState(cfg.seed).split("unsplit"),
        ground_truth=cap.truth_conds,
    )
    rep.defense_config = {"kind": world.defense.kind, "t_s": cap.t}
    return rep


def run_attack_suite(cfg: ExperimentConfig, ae, data: DataBundle,
                     out_dir: Path | None = None) -> list[dict]:
    """Attacks x defense-arms grid; every arm shares seeds and private data."""
    rows = []
    for defense_kind in cfg.attacks.defenses:
        world = build_world(cfg, defense_kind, ae, data, _alpha(cfg, ae, data))
        cap = generate_eval_packets(world, data, cfg.seed + 7)
        if out_dir is not None:
            pkt_file = out_dir / f"packets_{defense_kind}.bin"
            with open(pkt_file, "wb") as f:
                for p in cap.packets:
                    f.write(frame_message(p))
        for method in cfg.attacks.methods:
            if method == "inverse_net":
                report = run_inverse_net_attack(world, data, cap, cfg)
            elif method == "inverse_net_type1":
                report = run_inverse_net_attack(world, data, cap, cfg, "type1_raw_image")
            elif method == "whitebox":
                report = run_whitebox_attack(world, cap, cfg)
            elif method == "unsplit":
                report = run_unsplit_attack_arm(world, cap, cfg)
            else:
                raise ValueError(f"unknown attack method {method!r}")
            row = report.summary_row()
            row.update(kind="attack", defense=defense_kind, t_s=cap.t,
                       psnr=report.psnr, ssim=report.ssim)
            rows.append(row)
            if out_dir is not None:
                rdir = out_dir / "recons"
                rdir.mkdir(exist_ok=True)
                for i, img in enumerate(report.recons):
                    dtt.write_ppm(rdir / f"{method}_{defense_kind}_{i:03d}.ppm",
                                  np.clip(img, 0.0, 1.0))
    return rows


def _alpha(cfg: ExperimentConfig, ae, data: DataBundle) -> float:
    """Sensitivity: the configured constant when given, else estimated over
    the training latents."""
    if cfg.privacy.alpha is not None:
        return cfg.privacy.alpha
    images = data.train[0][: min(128, len(data.train[0]))]
    rng = RngState(cfg.seed).split("sensitivity")
    latents = ae.encode(Tensor(images), rng, training=False).data
    return estimate_sensitivity(list(latents), clip_norm=cfg.privacy.clip_norm)


# ---------------------------------------------------------------------------
# the full pipeline


def run_experiment(cfg: ExperimentConfig) -> Path:
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics: list[dict] = []

    data = synthesize_data(cfg)
    images = data.train[0]
    ae = pretrain_autoencoder(images, cfg.pretrain.ae_epochs,
                              RngState(cfg.seed).split("autoencoder"),
                              lr=cfg.pretrain.ae_lr, batch=cfg.pretrain.ae_batch,
                              dropout_p=cfg.pretrain.ae_dropout)
    metrics.append({"kind": "pretrain", "epochs": cfg.pretrain.ae_epochs,
                    "final_loss": ae.pretrain_losses[-1] if ae.pretrain_losses else None})

    alpha = _alpha(cfg, ae, data)
    sched = make_linear_schedule(cfg.schedule.T, cfg.schedule.k, cfg.schedule.beta0,
                                 cfg.schedule.lam)
    rng_est = RngState(cfg.seed).split("sensitivity-log")
    latents = ae.encode(Tensor(images[: min(128, len(images))]), rng_est, training=False).data
    alpha_est = estimate_sensitivity(list(latents), clip_norm=cfg.privacy.clip_norm)
    with open(out_dir / "budget.csv", "w") as f:
        write_schedule_csv(sched, f,
                           epsilon_fn=lambda t: epsilon_for_timestep(
                               t, sched, cfg.privacy.delta, alpha))
    metrics.append({"kind": "calibration", "alpha_used": alpha,
                    "alpha_estimated": alpha_est, "delta": cfg.privacy.delta,
                    "t_s": DefenseConfig(cfg.defense.kind, t_s=cfg.defense.t_s).timestep_floor,
                    "epsilon_at_t_s": epsilon_for_timestep(
                        DefenseConfig(cfg.defense.kind, t_s=cfg.defense.t_s).timestep_floor,
                        sched, cfg.privacy.delta, alpha)})

    # split training under the configured mode and defense
    world = build_world(cfg, cfg.defense.kind, ae, data, alpha)
    frozen_before = param_fingerprint({**world.unet.named_parameters("unet."),
                                       **world.autoencoder.named_parameters("ae.")})
    result = None
    if cfg.protocol.iterations > 0:
        pcfg = protocol_config(cfg, capture_path=str(out_dir / "packets_training.bin"))
        result = run_split_training(world, pcfg)
        frozen_after = param_fingerprint({**world.unet.named_parameters("unet."),
                                          **world.autoencoder.named_parameters("ae.")})
        with open(out_dir / "ledger.json", "w") as f:
            json.dump(result.ledger.to_dict(pcfg.clock), f, indent=2, sort_keys=True)
        metrics.append({"kind": "ledger", **result.ledger.to_dict(pcfg.clock)})
        metrics.append({"kind": "training", "mode": cfg.protocol.mode,
                        "defense": cfg.defense.kind,
                        "iterations": cfg.protocol.iterations,
                        "losses": result.loss_history,
                        "frozen_unchanged": frozen_before == frozen_after})
        save_checkpoint(out_dir / "control_branch.tckp", world.branch.server_parameters())
        _write_model_manifest(out_dir / "model_manifest.txt", world)
        if world.act is not None:
            secret_dir = out_dir / "client_secret"
            secret_dir.mkdir(exist_ok=True)
            save_checkpoint(secret_dir / "confound_delta.tckp", {"delta": world.act.delta})

    # attacks over defended/undefended arms
    if cfg.attacks.methods and cfg.attacks.defenses:
        metrics.extend(run_attack_suite(cfg, ae, data, out_dir))

    manifest = {
        "package_version": __version__,
        "numpy_version": np.__version__,
        "config": config_to_dict(cfg),
        "seeds": {"root": cfg.seed, "train_data": cfg.seed + 1,
                  "public_data": cfg.seed + 2, "private_data": cfg.seed + 3,
                  "eval_packets": cfg.seed + 7},
        "calibration_constants": {
            "ssim_attack_floor": cfg.attacks.ssim_attack_floor,
            "ssim_drop_inverse": cfg.attacks.ssim_drop_inverse,
            "ssim_drop_whitebox": cfg.attacks.ssim_drop_whitebox,
            "note": "toy-scale thresholds; ordering is the contract, "
                    "absolute full-scale reconstruction numbers are not reproducible here",
        },
        "attacker_model": {
            "inverse_net_input": "feat_control + feat_unet + label_noise channels, "
                                 "standardized with public-data statistics",
            "inverse_net_scaling": "reference stack scaled to toy dims: halved depth, "
                                   "channels divided by ~10, two convs kept at latent "
                                   "resolution before upsampling",
            "whitebox_granted": "zt side information plus all public weights; "
                                "the secret confound offset stays unknown",
            "dropout_state": "eval packets keep dropout active (training-time artifact)",
        },
        "partition_point": "after denoiser enc_block_1 and after the condition encoder",
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    with open(out_dir / "metrics.jsonl", "w") as f:
        for row in metrics:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    emit_report(out_dir, metrics)
    return out_dir


def _write_model_manifest(path: Path, world: SplitWorld) -> None:
    """Module names, shapes, frozen flags, partition point. The confound
    secret never appears here."""
    lines = ["# model manifest", "partition_point = after enc_block_1 / condition encoder", ""]
    groups = [
        ("autoencoder", world.autoencoder.named_parameters(), True),
        ("unet", world.unet.named_parameters(), True),
        ("control_branch", world.branch.server_parameters(), False),
    ]
    for name, params, frozen in groups:
        for pname, p in sorted(params.items()):
            lines.append(f"{name}.{pname} shape={tuple(p.shape)} frozen={frozen}")
    path.write_text("\n".join(lines) + "\n")


def emit_report(out_dir: Path, metrics: list[dict]) -> None:
    """Summary table (defense x attack -> scores, bytes, time model)."""
    rows = [m for m in metrics if m.get("kind") == "attack"]
    ledger = next((m for m in metrics if m.get("kind") == "ledger"), {})
    header = ["method", "defense", "t_s", "ssim_mean", "psnr_mean", "n_samples",
              "diverged", "bytes_up", "bytes_down", "t_sequential", "t_pipelined"]

    def cell(r, k):
        if k == "bytes_up" or k == "bytes_down":
            return ledger.get(k, "")
        if k == "t_sequential":
            return ledger.get("t_total_sequential", "")
        if k == "t_pipelined":
            return ledger.get("t_total_pipelined", "")
        return r.get(k, "")

    csv_lines = [",".join(header)]
    for r in rows:
        csv_lines.append(",".join(str(cell(r, k)) for k in header))
    (out_dir / "summary.csv").write_text("\n".join(csv_lines) + "\n")

    md = ["| " + " | ".join(header) + " |",
          "|" + "|".join(["---"] * len(header)) + "|"]
    for r in rows:
        cells = []
        for k in header:
            v = cell(r, k)
            cells.append(f"{v:.4f}" if isinstance(v, float) else str(v))
        md.append("| " + " | ".join(cells) + " |")
    training = [m for m in metrics if m.get("kind") == "training"]
    extra = []
    if training:
        t = training[0]
        losses = t["losses"]
        if losses:
            extra.append(f"\ntraining: mode={t['mode']} defense={t['defense']} "
                         f"iterations={t['iterations']} first-loss={losses[0]:.4f} "
                         f"last-loss={losses[-1]:.4f}")
    if ledger:
        extra.append(f"wire: up={ledger['bytes_up']} B, down={ledger['bytes_down']} B, "
                     f"packets={ledger['packets']}; clock model: sequential "
                     f"{ledger['t_total_sequential']:.1f}, pipelined "
                     f"{ledger['t_total_pipelined']:.1f}")
    (out_dir / "summary.md").write_text("\n".join(md) + "\n" + "\n".join(extra) + "\n")
