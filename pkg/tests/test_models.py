"""Toy conditional diffusion model: zero-conv neutrality, the
noise-confounding activation's identities, prompt hiding, frozen-weight
conservation."""

import numpy as np
import pytest

from splitstream import models as M
from splitstream import tensor as tt
from splitstream.diffusion import training_loss
from splitstream.models import (ControlBranch, NoiseConfoundingActivation,
                                PromptEncoder, ToyAutoencoder, ToyUNet,
                                control_forward, noise_confound, param_fingerprint,
                                prompt_hide_transform, pretrain_autoencoder,
                                timestep_embedding, unet_denoise)
from splitstream.optim import AdamW
from splitstream.rng import RngState
from splitstream.tensor import Tensor


@pytest.fixture(scope="module")
def world():
    rng = RngState(1001)
    unet = ToyUNet(rng.split("unet"))
    unet.freeze()
    ae = ToyAutoencoder(rng.split("ae"))
    ae.freeze()
    branch = ControlBranch(unet, ae, rng.split("branch"))
    pe = PromptEncoder(["one", "red", "circle", "blue", "rect"], rng.split("pe"))
    return unet, ae, branch, pe


class TestNoiseConfound:
    def test_zero_input_returns_delta(self):
        act = NoiseConfoundingActivation.create(RngState(1))
        y = noise_confound(np.zeros((2, 4, 8, 8), np.float32), act)
        assert np.array_equal(y, np.broadcast_to(act.delta, (2, 4, 8, 8)))

    def test_symmetry_identity(self):
        act = NoiseConfoundingActivation.create(RngState(2))
        x = RngState(3).normal((4, 4, 8, 8)) * 3.0
        lhs = noise_confound(x, act) + noise_confound(-x, act)
        rhs = 2.0 * np.abs(x) + 2.0 * act.delta[None]
        assert np.abs(lhs - rhs).max() < 1e-5

    def test_value_at_one(self):
        act = NoiseConfoundingActivation(delta=np.zeros((1, 1, 1), np.float32))
        y = noise_confound(np.ones((1, 1, 1, 1), np.float32), act)
        assert abs(float(y.reshape(-1)[0]) - 1.4621171572600098) < 1e-6

    def test_non_injectivity_witness(self):
        # |silu| is not injective on the negatives: the lobe has an interior
        # minimum near -1.2785, so some value is hit twice
        def y(x):
            return 2.0 * abs(x) / (1.0 + np.exp(-x))

        target = y(-0.5)

        def bisect(lo, hi):
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if (y(mid) - target) * (y(lo) - target) <= 0:
                    hi = mid
                else:
                    lo = mid
            return 0.5 * (lo + hi)

        x1 = -0.5
        x2 = bisect(-8.0, -1.2785)
        assert x1 != x2
        assert abs(y(x1) - y(x2)) < 1e-6

    def test_shape_mismatch(self):
        act = NoiseConfoundingActivation.create(RngState(4))
        with pytest.raises(tt.ShapeError):
            noise_confound(np.zeros((1, 2, 2, 2), np.float32), act)

    def test_delta_fixed_across_calls(self):
        act = NoiseConfoundingActivation.create(RngState(5))
        x = RngState(6).normal((1, 4, 8, 8))
        assert np.array_equal(noise_confound(x, act), noise_confound(x, act))

    def test_gradient_flows_through(self):
        act = NoiseConfoundingActivation.create(RngState(7))
        x = Tensor(RngState(8).normal((1, 4, 8, 8)), requires_grad=True)
        tt.sum_all(noise_confound(x, act)).backward()
        assert x.grad is not None and np.abs(x.grad).max() > 0


class TestZeroConvNeutrality:
    def test_conditional_equals_unconditional_bit_exact(self, world):
        unet, ae, branch, pe = world
        rng = RngState(9)
        for _ in range(10):
            zt = rng.normal((2, 4, 8, 8))
            prompt = pe.encode([["one", "red"], ["circle"]])
            cond = rng.uniform((2, 3, 32, 32))
            cf = branch.encode_condition(Tensor(cond), rng, training=False)
            taps = control_forward(zt, cf, 100, prompt, branch)
            assert all(np.all(t.data == 0.0) for t in taps)
            uncond = unet_denoise(zt, 100, prompt, [], unet)
            cond_out = unet_denoise(zt, 100, prompt, taps, unet)
            assert uncond.data.tobytes() == cond_out.data.tobytes()

    def test_tap_count_checked(self, world):
        unet, _, _, pe = world
        zt = RngState(10).normal((1, 4, 8, 8))
        prompt = pe.encode([["one"]])
        with pytest.raises(ValueError, match="taps"):
            unet_denoise(zt, 5, prompt, [Tensor(np.zeros((1, 4, 8, 8)))], unet)


class TestControlForward:
    def test_zero_condition_runs_copied_encoder_on_zt(self, world):
        unet, ae, _, pe = world
        rng = RngState(11)
        branch = ControlBranch(unet, ae, rng.split("b"))
        # make the zero convs identity so the taps expose the encoder output
        for zc in (branch.zero_conv_1,):
            eye = np.zeros_like(zc.w.data)
            for c in range(eye.shape[0]):
                eye[c, c, 0, 0] = 1.0
            zc.w.data[...] = eye
        zt = rng.normal((1, 4, 8, 8))
        prompt = pe.encode([["one"]])
        taps = control_forward(zt, np.zeros_like(zt), 7, prompt, branch)
        want = branch.enc_block_1(Tensor(zt), 7, Tensor(prompt))
        assert np.abs(taps[0].data - want.data).max() < 1e-6

    def test_deterministic_with_fixed_act(self, world):
        unet, ae, branch, pe = world
        rng = RngState(12)
        act = NoiseConfoundingActivation.create(rng.split("act"))
        zt = rng.normal((1, 4, 8, 8))
        cond_feat = rng.normal((1, 4, 8, 8))
        prompt = pe.encode([["one"]])
        a = control_forward(zt, cond_feat, 9, prompt, branch, act)
        b = control_forward(zt, cond_feat, 9, prompt, branch, act)
        for x, y in zip(a, b):
            assert x.data.tobytes() == y.data.tobytes()

    def test_gradients_reach_branch_after_one_step(self, world):
        unet, ae, _, pe = world
        rng = RngState(13)
        branch = ControlBranch(unet, ae, rng.split("b2"))
        params = list(branch.server_parameters().values())
        opt = AdamW(params, lr=1e-2)
        prompt = pe.encode([["one"]])

        def step():
            zt = rng.normal((1, 4, 8, 8))
            cf = rng.normal((1, 4, 8, 8))
            taps = control_forward(zt, cf, 50, prompt, branch)
            out = unet_denoise(zt, 50, prompt, taps, unet)
            loss = training_loss(rng.normal((1, 4, 8, 8)), out)
            opt.zero_grad()
            loss.backward()
            opt.step()

        step()  # zero convs move off zero
        zt = rng.normal((1, 4, 8, 8))
        cf = rng.normal((1, 4, 8, 8))
        taps = control_forward(zt, cf, 50, prompt, branch)
        out = unet_denoise(zt, 50, prompt, taps, unet)
        loss = training_loss(rng.normal((1, 4, 8, 8)), out)
        opt.zero_grad()
        loss.backward()
        interior = branch.enc_block_1.conv1.w.grad
        assert interior is not None and np.abs(interior).max() > 0


class TestPromptHiding:
    def test_transform_and_isolation(self):
        rng = RngState(14)
        unet = ToyUNet(rng.split("u"))
        unet.freeze()
        ae = ToyAutoencoder(rng.split("a"))
        ae.freeze()
        branch = ControlBranch(unet, ae, rng.split("b"))
        pe = PromptEncoder(["one", "red", "circle", "blue"], rng.split("p"))
        branch, unet = prompt_hide_transform(branch, unet)

        # server-side forward requires no prompt argument
        zt = rng.normal((1, 4, 8, 8))
        h1 = unet.encode_block1(Tensor(zt), 3, Tensor(pe.encode([["red"]])))
        out_a = unet.server_forward(h1, 3, None, [])
        out_b = unet.server_forward(h1, 3, None, [])
        assert out_a.data.tobytes() == out_b.data.tobytes()

        # prompts no longer reach server blocks: identical h1, different
        # prompts, identical output
        out_c = unet.server_forward(h1, 3, Tensor(pe.encode([["blue", "blue"]])), [])
        assert out_a.data.tobytes() == out_c.data.tobytes()

        # but the client-side block still sees real prompts
        h1_other = unet.encode_block1(Tensor(zt), 3, Tensor(pe.encode([["blue"]])))
        assert h1.data.tobytes() != h1_other.data.tobytes()

        # control branch attention is now projection-free self-attention
        s = Tensor(rng.normal((1, 4, 8, 8)))
        taps = branch.server_forward(s, 3, None)
        assert len(taps) == 3

    def test_self_attention_matches_oracle(self):
        from splitstream.models import SelfAttention

        rng = RngState(15)
        tokens = Tensor(rng.normal((2, 5, 8)))
        got = SelfAttention()(tokens)
        want = tt.attention(tokens, tokens, tokens)
        assert np.abs(got.data - want.data).max() < 1e-6

    def test_zeroed_value_path_makes_prompt_irrelevant(self):
        rng = RngState(16)
        unet = ToyUNet(rng.split("u"))
        pe = PromptEncoder(["one", "red"], rng.split("p"))
        # zero the value path of every cross-attention: no prompt influence
        for blk in unet.blocks():
            blk.attn.wv.data[...] = 0.0
        zt = rng.normal((1, 4, 8, 8))
        a = unet_denoise(zt, 5, pe.encode([["one"]]), [], unet)
        b = unet_denoise(zt, 5, pe.encode([["red", "red"]]), [], unet)
        assert a.data.tobytes() == b.data.tobytes()


class TestFrozenConservation:
    def test_finetuning_never_touches_frozen_weights(self, world):
        unet, ae, _, pe = world
        rng = RngState(17)
        branch = ControlBranch(unet, ae, rng.split("b3"))
        frozen_before = param_fingerprint({**unet.named_parameters("unet."),
                                           **ae.named_parameters("ae.")})
        opt = AdamW(list(branch.server_parameters().values()), lr=5e-3)
        prompt = pe.encode([["one"], ["red", "circle"]])
        for _ in range(20):
            zt = rng.normal((2, 4, 8, 8))
            cf = ae.encode(Tensor(rng.uniform((2, 3, 32, 32))), rng, training=True)
            taps = control_forward(zt, cf, 30, prompt, branch)
            out = unet_denoise(zt, 30, prompt, taps, unet)
            loss = training_loss(rng.normal((2, 4, 8, 8)), out)
            opt.zero_grad()
            loss.backward()
            opt.step()
        frozen_after = param_fingerprint({**unet.named_parameters("unet."),
                                          **ae.named_parameters("ae.")})
        assert frozen_before == frozen_after


class TestAutoencoder:
    def test_zero_epochs_returns_frozen_random_init(self):
        imgs = RngState(18).uniform((4, 3, 32, 32))
        ae = pretrain_autoencoder(imgs, epochs=0, rng=RngState(19))
        assert ae.frozen
        assert ae.pretrain_losses == []
        assert all(not p.requires_grad for p in ae.named_parameters().values())

    def test_constant_dataset_converges(self):
        imgs = np.full((8, 3, 32, 32), 0.5, dtype=np.float32)
        ae = pretrain_autoencoder(imgs, epochs=40, rng=RngState(20), lr=3e-3)
        assert ae.pretrain_losses[-1] < 0.01
        assert ae.pretrain_losses[-1] < ae.pretrain_losses[0]

    def test_empty_dataset(self):
        with pytest.raises(ValueError, match="empty"):
            pretrain_autoencoder(np.zeros((0, 3, 32, 32)), 1, RngState(21))

    def test_latent_shape(self, world):
        _, ae, _, _ = world
        z = ae.encode(Tensor(RngState(22).uniform((2, 3, 32, 32))), RngState(23), training=False)
        assert z.shape == (2, 4, 8, 8)
        img = ae.decode(z)
        assert img.shape == (2, 3, 32, 32)
        assert img.data.min() >= 0.0 and img.data.max() <= 1.0


class TestPromptEncoder:
    def test_zero_feature_exactly_zero(self, world):
        *_, pe = world
        assert np.all(pe.zero_feature == 0.0)
        assert pe.zero_feature.shape == (1, 32)

    def test_padded_encoding(self, world):
        *_, pe = world
        out = pe.encode([["one", "red"], ["circle"]])
        assert out.shape == (2, M.MAX_PROMPT_LEN, 32)
        assert np.all(out[0, 2:] == 0.0)  # padding is zero
        assert np.any(out[0, 0] != 0.0)

    def test_vocab_cap(self):
        with pytest.raises(ValueError, match="vocab"):
            PromptEncoder([f"tok{i}" for i in range(65)], RngState(24))

    def test_unknown_token(self, world):
        *_, pe = world
        with pytest.raises(KeyError):
            pe.encode([["nonexistent"]])

    def test_too_long_prompt(self, world):
        *_, pe = world
        with pytest.raises(ValueError, match="longer"):
            pe.encode([["one"] * 100])


def test_timestep_embedding_distinct_and_bounded():
    embs = np.stack([timestep_embedding(t) for t in range(0, 1001, 50)])
    assert embs.shape[1] == M.D_TEMB
    assert np.abs(embs).max() <= 1.0
    assert len(np.unique(embs.round(6), axis=0)) == embs.shape[0]


def test_checkpoint_roundtrip_of_model(tmp_path):
    from splitstream.checkpoint import load_checkpoint, save_checkpoint

    rng = RngState(25)
    unet = ToyUNet(rng)
    path = tmp_path / "unet.tckp"
    save_checkpoint(path, unet.named_parameters())
    back = load_checkpoint(path)
    named = unet.named_parameters()
    assert set(back) == set(named)
    for k, v in named.items():
        assert back[k].tobytes() == v.data.tobytes()
