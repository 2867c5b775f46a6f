"""Honest-but-curious server attacks against recorded partition features.

Three families: UnSplit-style alternating optimization over a guessed
client model and its input, white-box gradient descent against known
client weights, and trained inverse networks (type 1 reconstructs the
original image, type 2 the condition image). All attacks run offline over
packet logs and score their reconstructions with PSNR/SSIM on the 0..255
scale against the private ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .metrics import psnr, ssim
from .models import Conv
from .optim import AdamW
from .rng import RngState
from .tensor import Tensor


@dataclass
class ReconstructionReport:
    method: str
    recons: np.ndarray  # (N, 3, H, W) in [0, 1]
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    attack_config: dict = field(default_factory=dict)
    defense_config: dict = field(default_factory=dict)
    diverged: bool = False

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def score_against(self, truth01: np.ndarray) -> "ReconstructionReport":
        self.psnr = [psnr(r * 255.0, t * 255.0) for r, t in zip(self.recons, truth01)]
        self.ssim = [ssim(r * 255.0, t * 255.0) for r, t in zip(self.recons, truth01)]
        return self

    def summary_row(self) -> dict:
        return {
            "method": self.method,
            "psnr_mean": self.mean_psnr,
            "ssim_mean": self.mean_ssim,
            "n_samples": len(self.psnr),
            "diverged": self.diverged,
            "attack_config": self.attack_config,
            "defense_config": self.defense_config,
        }


def _score_or_empty(report: ReconstructionReport, truth01) -> ReconstructionReport:
    if truth01 is not None:
        report.score_against(np.asarray(truth01))
    return report


# ---------------------------------------------------------------------------
# gradient-descent attacks


def whitebox_gd_attack(target_feats: np.ndarray, model_fn, x_shape: tuple,
                       cfg: dict | None, rng: RngState,
                       ground_truth: np.ndarray | None = None) -> ReconstructionReport:
    """Optimize inputs so the known client model reproduces observed features.

    `model_fn(x: Tensor) -> Tensor` is the attacker's copy of the client
    computation (true weights; any secrets it lacks are its problem).
    """
    cfg = {"iters": 1000, "lr": 1e-3, "clip": True, "init_scale": 1.0, **(cfg or {})}
    if cfg["clip"]:
        x = Tensor(rng.uniform(x_shape) * np.float32(cfg["init_scale"]), requires_grad=True)
    else:
        x = Tensor(rng.normal(x_shape) * np.float32(cfg["init_scale"]), requires_grad=True)
    opt = AdamW([x], lr=cfg["lr"])
    diverged = False
    for _ in range(int(cfg["iters"])):
        loss = tt.mse(model_fn(x), Tensor(np.asarray(target_feats, dtype=np.float32)))
        if not np.isfinite(loss.data):
            diverged = True
            break
        opt.zero_grad()
        loss.backward()
        opt.step()
        if cfg["clip"]:
            np.clip(x.data, 0.0, 1.0, out=x.data)
    report = ReconstructionReport(
        method="whitebox", recons=x.data.copy(), attack_config=dict(cfg), diverged=diverged
    )
    return _score_or_empty(report, ground_truth)


def unsplit_attack(target_feats: np.ndarray, make_guess_model, x_shape: tuple,
                   cfg: dict | None, rng: RngState,
                   ground_truth: np.ndarray | None = None) -> ReconstructionReport:
    """Alternating optimization of a guessed client model and its input.

    `make_guess_model(rng)` returns (forward_fn, params): a randomly
    initialized stand-in for the unknown client model. Inner loops update
    the input against L_MSE + L2, then the guessed weights against L_MSE.
    """
    cfg = {"outer": 100, "inner_x": 100, "inner_theta": 100, "lr": 1e-3,
           "l2_weight": 1e-4, **(cfg or {})}
    forward_fn, params = make_guess_model(rng.split("model"))
    target = Tensor(np.asarray(target_feats, dtype=np.float32))
    x = Tensor(rng.split("input").uniform(x_shape), requires_grad=True)
    opt_x = AdamW([x], lr=cfg["lr"])
    opt_theta = AdamW(list(params), lr=cfg["lr"])
    diverged = False
    for _ in range(int(cfg["outer"])):
        for _ in range(int(cfg["inner_x"])):
            loss = tt.add(tt.mse(forward_fn(x), target),
                          tt.scale(tt.mean_all(tt.mul(x, x)), cfg["l2_weight"]))
            if not np.isfinite(loss.data):
                diverged = True
                break
            opt_x.zero_grad()
            loss.backward()
            opt_x.step()
            np.clip(x.data, 0.0, 1.0, out=x.data)
        for _ in range(int(cfg["inner_theta"])):
            loss = tt.mse(forward_fn(x), target)
            if not np.isfinite(loss.data):
                diverged = True
                break
            opt_theta.zero_grad()
            loss.backward()
            opt_theta.step()
        if diverged:
            break
    report = ReconstructionReport(
        method="unsplit", recons=x.data.copy(), attack_config=dict(cfg), diverged=diverged
    )
    return _score_or_empty(report, ground_truth)


# ---------------------------------------------------------------------------
# inverse networks


class InverseNet:
    """Feature-to-image decoder mirroring the reference attack stack at toy
    scale (conv + nearest upsample + SiLU trunk, Sigmoid head). Both types
    process at the latent resolution before upsampling, which the
    disentangling needs at 8x8."""

    def __init__(self, net_type: str, rng: RngState, in_ch: int = 4):
        if net_type not in ("type1_raw_image", "type2_condition"):
            raise ValueError(f"unknown inverse net type {net_type!r}")
        self.net_type = net_type
        if net_type == "type1_raw_image":
            self.convs = [
                Conv(in_ch, 24, 3, rng.split("c0"), padding=1),
                Conv(24, 24, 3, rng.split("c1"), padding=1),
                Conv(24, 16, 3, rng.split("c2"), padding=1),
                Conv(16, 8, 3, rng.split("c3"), padding=1),
                Conv(8, 3, 3, rng.split("c4"), padding=1),
            ]
            self.up_after = {1, 2}
        else:
            self.convs = [
                Conv(in_ch, 32, 3, rng.split("c0"), padding=1),
                Conv(32, 32, 3, rng.split("c1"), padding=1),
                Conv(32, 16, 3, rng.split("c2"), padding=1),
                Conv(16, 3, 3, rng.split("c3"), padding=1),
            ]
            self.up_after = {1, 2}

    def __call__(self, feat: Tensor) -> Tensor:
        h = feat
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = tt.silu(h)
            if i in self.up_after:
                h = tt.upsample2x(h)
        return tt.sigmoid(h)

    def parameters(self) -> list[Tensor]:
        return [p for c in self.convs for p in (c.w, c.b)]

    def named_parameters(self, prefix=""):
        out = {}
        for i, c in enumerate(self.convs):
            out.update(c.named_parameters(f"{prefix}conv{i}."))
        return out


class FeatureScaler:
    """Per-channel standardization fitted on the attacker's own feature set.

    Unnormalized partition features have mixed scales that stall the inverse
    net's optimization; the attacker fixes that from public data alone.
    """

    def __init__(self, features: np.ndarray):
        self.mean = features.mean(axis=(0, 2, 3), keepdims=True).astype(np.float32)
        self.std = (features.std(axis=(0, 2, 3), keepdims=True) + 1e-6).astype(np.float32)

    def __call__(self, features: np.ndarray) -> np.ndarray:
        return ((features - self.mean) / self.std).astype(np.float32)


def train_inverse_network(features: np.ndarray, targets: np.ndarray, net: InverseNet,
                          cfg: dict | None, rng: RngState) -> tuple[InverseNet, list[float]]:
    """Fit feature -> image by MSE on attacker-generated pairs."""
    cfg = {"lr": 1e-5, "iters": 2000, "batch": 8, **(cfg or {})}
    if len(features) != len(targets):
        raise ValueError("features/targets length mismatch")
    opt = AdamW(net.parameters(), lr=cfg["lr"])
    losses = []
    for _ in range(int(cfg["iters"])):
        idx = np.asarray(rng.integers(0, len(features) - 1, (int(cfg["batch"]),)))
        pred = net(Tensor(features[idx]))
        loss = tt.mse(pred, Tensor(targets[idx]))
        if not np.isfinite(loss.data):
            raise FloatingPointError("inverse network training diverged")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return net, losses


def apply_inverse_net(net: InverseNet, features: np.ndarray,
                      ground_truth: np.ndarray | None = None,
                      defense_config: dict | None = None) -> ReconstructionReport:
    recons = net(Tensor(np.asarray(features, dtype=np.float32))).data
    report = ReconstructionReport(
        method=f"inverse_net_{net.net_type}", recons=recons,
        attack_config={"net_type": net.net_type},
        defense_config=defense_config or {},
    )
    return _score_or_empty(report, ground_truth)


def estimate_client_model(make_model, pipeline_loss_fn, public_conds: np.ndarray,
                          cfg: dict | None, rng: RngState):
    """Black-box preliminary: fit a client-model stand-in through the known
    server-side computation.

    `pipeline_loss_fn(cond_feat: Tensor, batch_idx) -> Tensor` runs the rest
    of the (known) pipeline on the candidate condition features and returns
    the training loss the server would observe.
    """
    cfg = {"lr": 1e-3, "iters": 300, "batch": 8, **(cfg or {})}
    model = make_model(rng.split("init"))
    opt = AdamW(list(model.named_parameters().values()), lr=cfg["lr"])
    drop_rng = rng.split("dropout")
    for _ in range(int(cfg["iters"])):
        idx = np.asarray(rng.integers(0, len(public_conds) - 1, (int(cfg["batch"]),)))
        cond_feat = model(Tensor(public_conds[idx]), drop_rng, training=True)
        loss = pipeline_loss_fn(cond_feat, idx)
        if not np.isfinite(loss.data):
            raise FloatingPointError("client-model estimation diverged")
        opt.zero_grad()
        loss.backward()
        opt.step()
    return model
