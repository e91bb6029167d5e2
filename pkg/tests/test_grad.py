import copy

import numpy as np
import pytest
import torch

from modsplit import bench, composer, data, grad, models


class TestBinarize:
    def test_positive_maps_to_one(self):
        assert grad.binarize([0.3]).tolist() == [1]

    def test_negative_maps_to_zero(self):
        assert grad.binarize([-0.2]).tolist() == [0]

    def test_zero_maps_to_zero(self):
        assert grad.binarize([0.0]).tolist() == [0]

    def test_vector(self):
        assert grad.binarize([0.5, -1.0, 0.0, 2.0]).tolist() == [1, 0, 0, 1]

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            grad.binarize([float("nan")])


class TestActions:
    def test_first_five_epochs_head_only(self):
        actions = grad.default_actions(145)
        assert actions[:5] == (0, 0, 0, 0, 0)

    def test_repeating_pattern(self):
        actions = grad.default_actions(19)
        assert actions == (0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 0, 0, 1, 1, 1, 1, 1, 0, 0)

    def test_override_must_match_length(self):
        cfg = grad.GradConfig(epochs=10, actions=(0,) * 9)
        with pytest.raises(ValueError, match="length"):
            cfg.resolved_actions()


class TestSte:
    def test_upstream_gradient_clipped_to_unit(self):
        x = torch.tensor([0.4, -0.3, 0.2], requires_grad=True)
        y = (grad._BinSTE.apply(x) * torch.tensor([2.0, -5.0, 0.5])).sum()
        g, = torch.autograd.grad(y, x)
        assert g.tolist() == [1.0, -1.0, 0.5]

    def test_mask_update_bounded_by_lr(self, desk_tm, desk_data):
        cfg = grad.GradConfig(epochs=10, lr=1e-3, mask_lr=0.25, seed=0)
        masks = grad.MaskSet(desk_tm, 4, seed=0)
        heads = grad.HeadSet(4, seed=0)
        before = masks.kernel_values().copy()
        x = desk_tm.normalize(desk_data.train.images[:32])
        y = torch.from_numpy(desk_data.train.labels[:32])
        pred = grad.forward(masks, heads, desk_tm, x)
        grad.backward(masks, heads, pred, y, epoch=6, cfg=cfg)
        delta = np.abs(masks.kernel_values() - before)
        assert delta.max() <= 0.25 + 1e-12

    def test_head_gradients_match_finite_differences(self, desk_tm, desk_data):
        # double precision micro-batch; central differences at 1e-4
        torch.manual_seed(0)
        tm = desk_tm.clone()
        tm.net.double()
        for p in tm.net.parameters():
            p.requires_grad_(False)
        masks = grad.MaskSet(tm, 4, seed=0)
        masks.params = [torch.nn.Parameter(p.double()) for p in masks.params]
        heads = grad.HeadSet(4, seed=0)
        for net in heads.nets:
            net.double()
        x = tm.normalize(desk_data.train.images[:8]).double()
        y = torch.from_numpy(desk_data.train.labels[:8])

        def loss_value():
            pred = grad.forward(masks, heads, tm, x)
            l1, _ = grad.losses(pred, y, masks, binarized=masks._live)
            masks._live = None
            return l1

        loss = loss_value()
        params = list(heads.parameters())
        grads = torch.autograd.grad(loss, params)
        h = 1e-4
        checked = 0
        for p, g in zip(params, grads):
            flat = p.data.view(-1)
            gflat = g.view(-1)
            for idx in range(0, flat.numel(), max(1, flat.numel() // 4)):
                orig = flat[idx].item()
                flat[idx] = orig + h
                up = loss_value().item()
                flat[idx] = orig - h
                down = loss_value().item()
                flat[idx] = orig
                fd = (up - down) / (2 * h)
                assert abs(gflat[idx].item() - fd) <= 1e-3 * (abs(fd) + 1e-8) + 1e-9
                checked += 1
        assert checked >= 10


class TestLosses:
    def test_all_positive_masks_full_fraction(self, desk_tm):
        masks = grad.MaskSet(desk_tm, 4, seed=0)
        pred = torch.full((8, 4), 0.5)
        _, loss2 = grad.losses(pred, torch.zeros(8, dtype=torch.long), masks)
        assert float(loss2.detach()) == 1.0

    def test_half_positive_masks(self, desk_tm):
        masks = grad.MaskSet(desk_tm, 4, seed=0)
        with torch.no_grad():
            for p in masks.params:
                p[::2] = -1.0
        _, loss2 = grad.losses(torch.full((4, 4), 0.5),
                               torch.zeros(4, dtype=torch.long), masks)
        assert float(loss2.detach()) == pytest.approx(0.5)

    def test_confident_correct_predictions_drive_loss1_to_zero(self):
        labels = torch.tensor([0, 1, 2, 3])
        pred = torch.full((4, 4), -30.0)
        pred[torch.arange(4), labels] = 30.0
        l1 = torch.nn.functional.cross_entropy(pred, labels)
        masks_free = float(l1)
        assert masks_free < 1e-6


class TestForward:
    def test_all_positive_masks_match_plain_logits(self, desk_tm, desk_data):
        masks = grad.MaskSet(desk_tm, 4, seed=0)
        x = desk_tm.normalize(desk_data.test.images[:16])
        mb = [(p > 0).float() for p in masks.params]
        expanded = torch.stack([m.index_select(0, masks.slot_map) for m in mb])
        with torch.no_grad():
            logits = desk_tm.net(
                x.repeat(4, 1, 1, 1),
                channel_scales=grad._channel_scales(desk_tm.spec, expanded, 16),
            ).view(4, 16, 4)
            plain = desk_tm.net(x)
        for n in range(4):
            assert torch.equal(logits[n], plain)

    def test_outputs_in_unit_interval(self, desk_tm, desk_data):
        masks = grad.MaskSet(desk_tm, 4, seed=1)
        heads = grad.HeadSet(4, seed=1)
        pred = grad.forward(masks, heads, desk_tm, desk_data.test.images[:8])
        assert torch.all(pred > 0) and torch.all(pred < 1)

    def test_masked_kernel_contributes_nothing(self, desk_tm, desk_data):
        # zeroed kernel's weights can change without affecting outputs
        masks = grad.MaskSet(desk_tm, 4, seed=0)
        heads = grad.HeadSet(4, seed=0)
        kernel = 7   # kernel 7 of layer 1 -> flat index 16 + 7
        with torch.no_grad():
            for p in masks.params:
                p[16 + kernel] = -1.0
        x = desk_data.test.images[:8]
        before = grad.forward(masks, heads, desk_tm, x).detach().clone()
        perturbed = desk_tm.clone()
        with torch.no_grad():
            perturbed.net.convs[1].weight[kernel] = 99.0
            perturbed.net.convs[1].bias[kernel] = -5.0
        after = grad.forward(masks, heads, perturbed, x).detach()
        assert torch.equal(before, after)

    def test_matches_sliced_module_oracle(self, desk_tm, desk_data, rng):
        # slice-equivalence through composer.decode, heads included
        for seed in range(3):
            masks = grad.MaskSet(desk_tm, 4, seed=seed)
            with torch.no_grad():
                for p in masks.params:
                    p -= torch.from_numpy(
                        rng.random(len(p)).astype(np.float32))  # random sign pattern
                for p in masks.params:
                    for l in range(len(desk_tm.spec.conv_layers)):
                        sl = desk_tm.spec.kernel_slice(l)
                        slot_ids = masks.slot_map[sl.start:sl.stop]
                        if not (p[slot_ids] > 0).any():
                            p[slot_ids[0]] = 0.5
            heads = grad.HeadSet(4, seed=seed)
            x = desk_data.test.images[:32]
            probs = grad.forward(masks, heads, desk_tm, x).detach().numpy()
            bits = masks.binarized()
            for class_id in range(4):
                module = composer.decode(desk_tm, bits[class_id],
                                         head=heads.nets[class_id], class_id=class_id,
                                         provenance="grad")
                oracle = module.score(x)
                np.testing.assert_allclose(probs[:, class_id], oracle, rtol=0, atol=1e-4)


class TestBackward:
    def test_head_only_epochs_keep_masks_bit_identical(self, desk_tm, desk_data):
        cfg = grad.GradConfig(epochs=10, lr=1e-3, seed=0)
        masks = grad.MaskSet(desk_tm, 4, seed=0)
        heads = grad.HeadSet(4, seed=0)
        raw_before = [p.detach().clone() for p in masks.params]
        x = desk_tm.normalize(desk_data.train.images[:32])
        y = torch.from_numpy(desk_data.train.labels[:32])
        for epoch in (0, 1, 2):   # action bits are 0
            pred = grad.forward(masks, heads, desk_tm, x)
            grad.backward(masks, heads, pred, y, epoch, cfg)
        for before, p in zip(raw_before, masks.params):
            assert torch.equal(before, p.detach())

    def test_joint_epochs_move_masks(self, desk_tm, desk_data):
        cfg = grad.GradConfig(epochs=10, lr=1e-3, mask_lr=1.0, seed=0)
        masks = grad.MaskSet(desk_tm, 4, seed=0)
        heads = grad.HeadSet(4, seed=0)
        before = masks.kernel_values().copy()
        x = desk_tm.normalize(desk_data.train.images[:32])
        y = torch.from_numpy(desk_data.train.labels[:32])
        pred = grad.forward(masks, heads, desk_tm, x)
        grad.backward(masks, heads, pred, y, epoch=5, cfg=cfg)
        assert not np.array_equal(before, masks.kernel_values())


class TestSplit:
    def test_desk_run_trains_and_prunes(self, desk_grad, desk_tm, desk_data):
        assert desk_grad.valid_acc >= models.evaluate(desk_tm, desk_data.valid) - 0.02
        assert desk_grad.retained_fraction < 1.0
        assert len(desk_grad.log) == 30

    def test_selection_picks_best_accuracy_fewest_kernels(self, desk_grad):
        best = max(desk_grad.log, key=lambda r: (r["valid_acc"], -r["retained_fraction"]))
        assert desk_grad.valid_acc == best["valid_acc"]
        assert desk_grad.retained_fraction == best["retained_fraction"]

    def test_class_space_mismatch(self, desk_tm):
        other = data.gen_synthetic(6, 20, 16, seed=0)
        with pytest.raises(ValueError, match="class space mismatch"):
            grad.split(desk_tm, other, other, grad.GradConfig(epochs=1))

    def test_untrainable_heads_abort(self, desk_tm, desk_data):
        # lr=0 freezes the heads at chance level; abort fires at epoch 20
        tiny = desk_data.train.subset(np.arange(64))
        cfg = grad.GradConfig(epochs=25, lr=0.0, seed=0)
        with pytest.raises(RuntimeError, match="heads failed to train"):
            grad.split(desk_tm, tiny, tiny, cfg)

    def test_bundle_save_load_round_trip(self, desk_grad, desk_tm, desk_data, tmp_path):
        paths = desk_grad.save_bundles(desk_tm, str(tmp_path))
        probe = desk_data.test.images[:16]
        for class_id, path in enumerate(paths):
            loaded = composer.SlicedModule.load(path)
            original = desk_grad.to_modules(desk_tm)[class_id]
            assert loaded.class_id == class_id
            assert loaded.provenance == "grad"
            np.testing.assert_array_equal(loaded.score(probe), original.score(probe))
