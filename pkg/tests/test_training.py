import csv
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from hyperseg.hypernet import HyperNetConfig, init_hypernet
from hyperseg.model import CheckpointError, SegModel, load_checkpoint, read_header, save_checkpoint
from hyperseg.segnet import UNetConfig, dispatch, param_layout, unet_forward
from hyperseg.synthdata import Dataset, PhantomSpec, SpacingRange, generate_phantom
from hyperseg.training import (
    TrainConfig, TrainingDivergedError, combined_loss, init_model, make_batch,
    make_optimizer, patch_shape, train, train_step_hs, train_step_plain,
)

SMALL_UNET = UNetConfig(levels=2, blocks_per_level=1, base_channels=4)


def loop_loss(logits, labels, w_dice, w_ce, eps=1.0):
    """Per-voxel summation with plain Python floats."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = logits.shape[:2]
    ce_sum, count = 0.0, 0
    inter = [0.0] * c
    psum = [0.0] * c
    gsum = [0.0] * c
    for b in range(n):
        for idx in np.ndindex(*logits.shape[2:]):
            z = [logits[(b, k) + idx] for k in range(c)]
            m = max(z)
            denom = sum(math.exp(v - m) for v in z)
            probs = [math.exp(v - m) / denom for v in z]
            y = int(labels[(b,) + idx])
            ce_sum += -math.log(probs[y])
            count += 1
            for k in range(c):
                psum[k] += probs[k]
                gsum[k] += 1.0 if k == y else 0.0
                inter[k] += probs[k] if k == y else 0.0
    dice = [(2 * inter[k] + eps) / (psum[k] + gsum[k] + eps) for k in range(1, c)]
    return w_dice * (1 - sum(dice) / len(dice)) + w_ce * ce_sum / count


@pytest.fixture(scope="module")
def dataset():
    spec = PhantomSpec(reference_spacing=1.0)
    pairs = [generate_phantom(spec, np.random.default_rng(i)) for i in range(2)]
    return Dataset(["a", "b"], pairs, SpacingRange.isotropic(1.0, 3.0), 4)


class TestLoss:
    def test_perfect_prediction(self):
        labels = torch.randint(0, 4, (2, 5, 6, 7), generator=torch.Generator().manual_seed(0))
        logits = 50.0 * torch.nn.functional.one_hot(labels, 4).movedim(-1, 1).double()
        assert combined_loss(logits, labels) < 0.01

    def test_uniform_binary_ce_is_ln2(self):
        labels = torch.tensor([[0, 1, 0, 1, 1, 0]])
        logits = torch.zeros(1, 2, 6, dtype=torch.float64)
        ce = combined_loss(logits, labels, w_dice=0.0, w_ce=1.0)
        assert abs(ce.item() - math.log(2)) < 1e-12

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_scalar_oracle(self, seed):
        gen = torch.Generator().manual_seed(seed)
        logits = 3 * torch.randn(2, 3, 4, 3, 2, generator=gen, dtype=torch.float64)
        labels = torch.randint(0, 3, (2, 4, 3, 2), generator=gen)
        for w_dice, w_ce in ((1.0, 1.0), (0.3, 2.0), (1.0, 0.0)):
            got = combined_loss(logits, labels, w_dice, w_ce).item()
            assert abs(got - loop_loss(logits, labels, w_dice, w_ce)) < 1e-10

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="label ids"):
            combined_loss(torch.zeros(1, 3, 4), torch.tensor([[0, 1, 3, 0]]))

    def test_batch_permutation_invariance(self):
        gen = torch.Generator().manual_seed(9)
        logits = torch.randn(4, 3, 5, 5, generator=gen, dtype=torch.float64)
        labels = torch.randint(0, 3, (4, 5, 5), generator=gen)
        perm = torch.tensor([2, 0, 3, 1])
        a = combined_loss(logits, labels)
        b = combined_loss(logits[perm], labels[perm])
        assert abs(a.item() - b.item()) < 1e-12

    def test_nonnegative_and_differentiable(self):
        logits = torch.randn(1, 4, 6, 6, requires_grad=True)
        loss = combined_loss(logits, torch.randint(0, 4, (1, 6, 6)))
        loss.backward()
        assert loss.item() >= 0 and logits.grad.abs().sum() > 0


class TestConfig:
    def test_r_fixed_iff_fs(self):
        with pytest.raises(ValueError):
            TrainConfig(regime="fs")
        with pytest.raises(ValueError):
            TrainConfig(regime="hs", r_fixed=(1, 1, 1))
        TrainConfig(regime="fsnr", r_fixed=(1, 1, 1))

    @pytest.mark.parametrize("kw", [{"iterations": 0}, {"w_dice": 0, "w_ce": 0}, {"w_ce": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_unknown_regime(self):
        with pytest.raises(ValueError, match="unknown regime"):
            TrainConfig(regime="xs")


class TestBatches:
    def test_fs_spacing_is_fixed(self, dataset):
        cfg = TrainConfig(regime="fs", r_fixed=(1.5, 1.5, 1.5))
        rng = np.random.default_rng(0)
        for _ in range(5):
            assert make_batch(cfg, dataset, rng, 2).spacing == (1.5, 1.5, 1.5)

    def test_hs_spacing_statistics(self, dataset):
        cfg = TrainConfig(regime="hs", spacing_range=SpacingRange.isotropic(1.0, 3.0), batch_size=1,
                          patch_size_mm=8.0)
        rng = np.random.default_rng(1)
        draws = np.array([make_batch(cfg, dataset, rng, 2).spacing for _ in range(1000)])
        assert draws.min() >= 1.0 and draws.max() <= 3.0
        sigma = 2.0 / math.sqrt(12) / math.sqrt(len(draws))
        assert np.all(np.abs(draws.mean(0) - 2.0) < 3 * sigma)

    def test_patch_voxels_follow_spacing(self, dataset):
        cfg = TrainConfig(regime="as", batch_size=2, patch_size_mm=32.0)
        rng = np.random.default_rng(2)
        for _ in range(5):
            b = make_batch(cfg, dataset, rng, 4)
            expected = patch_shape(32.0, b.spacing)
            assert expected == tuple(round(32.0 / r) for r in b.spacing)
            inner = tuple(n - a - c for n, a, c in zip(b.images.shape[2:], b.pad.pad_before, b.pad.pad_after))
            assert inner == expected
            assert all(n % 4 == 0 for n in b.images.shape[2:])
            assert b.images.shape[0] == 2 and b.labels.shape == b.images.shape[:1] + b.images.shape[2:]

    def test_patch_larger_than_volume(self, dataset):
        cfg = TrainConfig(regime="as", patch_size_mm=200.0)
        with pytest.raises(ValueError, match="exceeds volume"):
            make_batch(cfg, dataset, np.random.default_rng(0), 2)

    def test_foreground_patches_contain_foreground(self, dataset):
        cfg = TrainConfig(regime="as", patch_size_mm=16.0, foreground_fraction=1.0)
        rng = np.random.default_rng(5)
        for _ in range(20):
            assert make_batch(cfg, dataset, rng, 2).labels.max() > 0

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            make_batch(TrainConfig(), Dataset([], [], SpacingRange.isotropic(1, 2), 4), np.random.default_rng(0), 2)


def _model_and_opt(regime, unet=SMALL_UNET, r_fixed=None):
    cfg = TrainConfig(regime=regime, r_fixed=r_fixed, patch_size_mm=16.0, spacing_range=SpacingRange.isotropic(1.0, 3.0))
    model = init_model(cfg, unet, HyperNetConfig(hidden_width=16))
    return cfg, model, make_optimizer(model.trainable(), cfg.lr)


class TestSteps:
    def test_hs_step_updates_only_beta(self, dataset):
        cfg, model, opt = _model_and_opt("hs")
        assert model.eta is None
        before = {k: v.clone() for k, v in model.hypernet.state_dict().items()}
        rng = np.random.default_rng(0)
        batch = make_batch(cfg, dataset, rng, 2)
        train_step_hs(model, batch, opt, cfg)
        grads = [p.grad for p in model.hypernet.parameters()]
        assert sum(g.norm() for g in grads) > 0
        after = model.hypernet.state_dict()
        assert any(not torch.equal(before[k], after[k]) for k in before)
        # a second step at another spacing writes to the same parameter store
        ids = [id(p) for p in model.hypernet.parameters()]
        train_step_hs(model, make_batch(cfg, dataset, rng, 2), opt, cfg)
        assert [id(p) for p in model.hypernet.parameters()] == ids
        assert model.trainable() == list(model.hypernet.parameters())

    def test_plain_step_updates_eta(self, dataset):
        cfg, model, opt = _model_and_opt("as")
        before = model.eta.detach().clone()
        train_step_plain(model, make_batch(cfg, dataset, np.random.default_rng(0), 2), opt, cfg)
        assert model.eta.grad.norm() > 0 and not torch.equal(before, model.eta.detach())

    def test_wrong_step_function(self, dataset):
        cfg, model, opt = _model_and_opt("as")
        with pytest.raises(ValueError):
            train_step_hs(model, make_batch(cfg, dataset, np.random.default_rng(0), 2), opt, cfg)

    def test_divergence_reported(self, dataset):
        cfg, model, opt = _model_and_opt("as")
        with torch.no_grad():
            model.eta.fill_(float("nan"))
        batch = make_batch(cfg, dataset, np.random.default_rng(0), 2)
        with pytest.raises(TrainingDivergedError) as info:
            train_step_plain(model, batch, opt, cfg, step=7)
        assert info.value.step == 7 and info.value.spacing == batch.spacing

    @pytest.mark.parametrize("regime", ["hs", "as"])
    def test_overfit_single_phantom(self, dataset, regime):
        """A fixed batch is fitted to loss < 0.1 within 500 steps."""
        cfg, model, opt = _model_and_opt(regime, UNetConfig(levels=2, blocks_per_level=1, base_channels=8))
        one = Dataset(["a"], dataset.pairs[:1], dataset.spacing_range, 4)
        batch = make_batch(replace(cfg, foreground_fraction=1.0), one, np.random.default_rng(4), 2)
        assert batch.labels.max() > 0
        step = train_step_hs if regime == "hs" else train_step_plain
        losses = []
        for i in range(500):
            losses.append(step(model, batch, opt, cfg, i))
            if losses[-1] < 0.1:
                break
        assert min(losses) < 0.1, losses[-5:]


class TestGradientThroughHypernet:
    def test_finite_differences(self):
        """d loss / d beta through hypernet -> dispatch -> U-Net -> loss."""
        unet = UNetConfig(dim=2, levels=1, blocks_per_level=1, base_channels=2, num_classes=2)
        net = init_hypernet(HyperNetConfig(input_dim=2, hidden_width=8), unet, seed=0, dtype=torch.float64)
        gen = torch.Generator().manual_seed(0)
        x = torch.randn(1, 1, 8, 8, generator=gen, dtype=torch.float64)
        y = (x[:, 0] > 0).long()
        layout = param_layout(unet)
        r = (1.2, 0.8)

        def loss():
            return combined_loss(unet_forward(x, dispatch(net(r), layout), unet), y)

        params = list(net.parameters())
        grads = torch.autograd.grad(loss(), params)
        rng = np.random.default_rng(1)
        h = 1e-6
        for _ in range(24):
            i = int(rng.integers(len(params)))
            flat = params[i].data.view(-1)
            j = int(rng.integers(flat.numel()))
            with torch.no_grad():
                old = flat[j].item()
                flat[j] = old + h
                up = loss().item()
                flat[j] = old - h
                down = loss().item()
                flat[j] = old
            fd = (up - down) / (2 * h)
            g = grads[i].view(-1)[j].item()
            assert abs(g - fd) <= 1e-3 * max(abs(fd), 1e-7), (i, j, g, fd)


class TestTrainLoop:
    def test_loss_rows_and_checkpoint_schema(self, dataset, tmp_path):
        cfg = TrainConfig(regime="hs", iterations=6, log_every=2, patch_size_mm=16.0,
                          spacing_range=SpacingRange.isotropic(1.0, 3.0))
        train(cfg, dataset, SMALL_UNET, tmp_path, HyperNetConfig(hidden_width=8))
        with open(tmp_path / "loss.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == cfg.iterations // cfg.log_every
        assert list(rows[0]) == ["step", "loss", "r0", "r1", "r2"]
        header, _ = read_header(tmp_path / "model.ckpt")
        names = {t["name"] for t in header["tensors"]}
        assert header["regime"] == "hs" and "eta" not in names
        assert all(n.startswith(("hidden.", "head.")) for n in names)

    def test_plain_checkpoint_stores_eta_only(self, dataset, tmp_path):
        cfg = TrainConfig(regime="fsnr", r_fixed=(2, 2, 2), iterations=2, log_every=1, patch_size_mm=16.0)
        train(cfg, dataset, SMALL_UNET, tmp_path)
        header, _ = read_header(tmp_path / "model.ckpt")
        assert [t["name"] for t in header["tensors"]] == ["eta"]

    def test_fs_and_fsnr_train_identically(self, dataset, tmp_path):
        for regime in ("fs", "fsnr"):
            cfg = TrainConfig(regime=regime, r_fixed=(2, 2, 2), iterations=3, log_every=1, patch_size_mm=16.0)
            train(cfg, dataset, SMALL_UNET, tmp_path / regime)
        a = load_checkpoint(tmp_path / "fs" / "model.ckpt")
        b = load_checkpoint(tmp_path / "fsnr" / "model.ckpt")
        assert torch.equal(a.eta, b.eta)

    def test_resume_continues_identically(self, dataset, tmp_path):
        torch.use_deterministic_algorithms(True)
        try:
            cfg = TrainConfig(regime="hs", iterations=6, log_every=1, patch_size_mm=16.0,
                              spacing_range=SpacingRange.isotropic(1.0, 3.0))
            hyper = HyperNetConfig(hidden_width=8)
            train(cfg, dataset, SMALL_UNET, tmp_path / "full", hyper)
            train(cfg, dataset, SMALL_UNET, tmp_path / "split", hyper, iterations=3)
            train(cfg, dataset, SMALL_UNET, tmp_path / "split", hyper, resume=True)
        finally:
            torch.use_deterministic_algorithms(False)
        read = lambda p: [float(r["loss"]) for r in csv.DictReader(open(p / "loss.csv"))]
        full, split = read(tmp_path / "full"), read(tmp_path / "split")
        assert len(split) == 6
        np.testing.assert_allclose(split, full, rtol=1e-5)


class TestCheckpoint:
    def test_round_trip_and_regime_check(self, tmp_path):
        unet = SMALL_UNET
        net = init_hypernet(HyperNetConfig(hidden_width=8), unet, seed=0)
        model = SegModel("hs", unet, SpacingRange.isotropic(1, 3), hypernet=net)
        save_checkpoint(tmp_path / "m.ckpt", model)
        loaded = load_checkpoint(tmp_path / "m.ckpt")
        for (k, v), (k2, v2) in zip(net.state_dict().items(), loaded.hypernet.state_dict().items()):
            assert k == k2 and torch.equal(v, v2)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "m.ckpt", "as")

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x").write_bytes(b"nope")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x")
