import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from samref.patchdiff import (
    LocalHeads,
    PatchWindow,
    SelectorState,
    dynamic_select,
    find_refine_window,
    local_refine,
    paste_back,
    roi_crop,
)
from samref.prompt_codec import Click
from conftest import label_components_oracle, roi_crop_oracle


def click_at_map(r, c, polarity="positive", index=1):
    return Click(x=4 * c + 1, y=4 * r + 1, polarity=polarity, index=index)


class TestSelector:
    def test_first_interaction_skips(self):
        state = SelectorState(prev_error_area=None, curr_error_area=500)
        assert dynamic_select(state) == "skip"
        assert state.prev_error_area == 500

    def test_increase_runs(self):
        state = SelectorState(prev_error_area=100, curr_error_area=150)
        assert dynamic_select(state) == "run"

    def test_equal_area_skips(self):
        state = SelectorState(prev_error_area=100, curr_error_area=100)
        assert dynamic_select(state) == "skip"

    def test_decrease_skips(self):
        state = SelectorState(prev_error_area=100, curr_error_area=60)
        assert dynamic_select(state) == "skip"

    def test_scripted_sequence(self):
        areas = [120, 80, 90, 90, 200, 10]
        expected = ["skip", "skip", "run", "skip", "run", "skip"]
        state = SelectorState()
        got = []
        for a in areas:
            state.curr_error_area = a
            got.append(dynamic_select(state))
        assert got == expected


class TestFindWindow:
    def test_empty_diff_returns_none(self):
        mask = np.zeros((256, 256), dtype=bool)
        mask[10:20, 10:20] = True
        assert find_refine_window(mask, mask, click_at_map(15, 15)) is None

    def test_square_diff_expanded_box(self):
        refined = np.zeros((256, 256), dtype=bool)
        refined[100:110, 100:110] = True
        prev = np.zeros((256, 256), dtype=bool)
        w = find_refine_window(refined, prev, click_at_map(105, 105), ratio=1.4)
        # 10x10 box about center 105 expanded to 14 -> floor(98), ceil(112)
        assert (w.row0, w.col0, w.row1, w.col1) == (98, 98, 112, 112)

    def test_max_component_chosen_and_click_included(self):
        refined = np.zeros((256, 256), dtype=bool)
        refined[50:60, 50:55] = True  # 50 px component
        refined[200:201, 200:207] = True  # 7 px component
        prev = np.zeros((256, 256), dtype=bool)
        click = click_at_map(199, 199)  # adjacent to the small one
        w = find_refine_window(refined, prev, click, ratio=1.0)
        # the max component (around 50..60) defines the box, expanded to include the click
        assert w.contains(55, 52)
        assert w.contains(199, 199)

    def test_window_always_contains_click(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            refined = rng.random((256, 256)) > 0.97
            prev = rng.random((256, 256)) > 0.97
            r, c = rng.integers(256), rng.integers(256)
            w = find_refine_window(refined, prev, click_at_map(r, c), ratio=1.4)
            if w is not None:
                assert w.contains(r, c)

    def test_component_selection_matches_bruteforce(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            diff = rng.random((64, 64)) > 0.9
            refined = diff
            prev = np.zeros_like(diff)
            if not diff.any():
                continue
            click = Click(x=0, y=0, polarity="positive", index=1)
            w = find_refine_window(refined, prev, click, ratio=1.0, scale=1.0)
            comps = label_components_oracle(diff)
            best = max(
                comps,
                key=lambda comp: (len(comp), -min(p[0] for p in comp), -min(p[1] for p in comp)),
            )
            rows = [p[0] for p in best]
            cols = [p[1] for p in best]
            # box of component union click (0,0), possibly widened to min size
            assert w.row0 <= min(min(rows), 0) and w.row1 >= max(rows) + 1
            assert w.col0 <= min(min(cols), 0) and w.col1 >= max(cols) + 1

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            find_refine_window(np.zeros((256, 256), bool), np.zeros((128, 128), bool), click_at_map(0, 0))


class TestRoiCrop:
    def test_full_window_equals_resize(self):
        torch.manual_seed(0)
        x = torch.randn(4, 256, 256, dtype=torch.float64)
        w = PatchWindow(0, 0, 256, 256)
        got = roi_crop(x, w, out_hw=(128, 128))
        expected = torch.nn.functional.interpolate(
            x.unsqueeze(0), size=(128, 128), mode="bilinear", align_corners=False
        ).squeeze(0)
        torch.testing.assert_close(got, expected, rtol=1e-6, atol=1e-6)

    def test_constant_tensor_constant_crop(self):
        x = torch.full((2, 256, 256), 3.25)
        w = PatchWindow(13, 40, 77, 90)
        got = roi_crop(x, w, out_hw=(32, 32))
        torch.testing.assert_close(got, torch.full((2, 32, 32), 3.25))

    def test_matches_scalar_sampler_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            arr = rng.normal(size=(3, 64, 64))
            r0, c0 = rng.integers(0, 40), rng.integers(0, 40)
            h, w_ = rng.integers(5, 24), rng.integers(5, 24)
            window = PatchWindow(int(r0), int(c0), int(r0 + h), int(c0 + w_))
            got = roi_crop(torch.from_numpy(arr), window, out_hw=(16, 16)).numpy()
            expected = roi_crop_oracle(arr, window, (16, 16))
            np.testing.assert_allclose(got, expected, atol=1e-6)

    def test_degenerate_window_inflated(self):
        x = torch.randn(1, 256, 256)
        w = PatchWindow(10, 10, 11, 11, expand_ratio=1.0)
        out = roi_crop(x, w, out_hw=(8, 8))
        assert out.shape == (1, 8, 8)
        assert torch.isfinite(out).all()

    def test_rejects_batched_input(self):
        with pytest.raises(ValueError):
            roi_crop(torch.zeros(1, 1, 8, 8), PatchWindow(0, 0, 4, 4))


class TestPasteBack:
    def test_none_window_is_identity(self):
        x = torch.randn(1, 256, 256)
        out = paste_back(x, torch.randn(1, 128, 128), None)
        torch.testing.assert_close(out, x)

    def test_outside_window_bit_identical(self):
        torch.manual_seed(1)
        x = torch.randn(1, 256, 256)
        w = PatchWindow(30, 50, 90, 120)
        out = paste_back(x, torch.randn(1, 128, 128), w)
        mask = torch.ones(256, 256, dtype=torch.bool)
        mask[w.row0 : w.row1, w.col0 : w.col1] = False
        assert torch.equal(out[:, mask], x[:, mask])

    def test_roundtrip_at_aligned_sizes(self):
        torch.manual_seed(2)
        x = torch.randn(2, 256, 256, dtype=torch.float64)
        w = PatchWindow(40, 60, 168, 188)  # exactly 128x128
        out = paste_back(x, roi_crop(x, w, out_hw=(128, 128)), w)
        torch.testing.assert_close(out, x, rtol=1e-6, atol=1e-6)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_outside_immutability_random(self, seed):
        rng = np.random.default_rng(seed)
        x = torch.from_numpy(rng.normal(size=(1, 64, 64)))
        r0, c0 = int(rng.integers(0, 50)), int(rng.integers(0, 50))
        h, w_ = int(rng.integers(4, 14)), int(rng.integers(4, 14))
        win = PatchWindow(r0, c0, min(r0 + h, 64), min(c0 + w_, 64))
        local = torch.from_numpy(rng.normal(size=(1, 16, 16)))
        out = paste_back(x, local, win)
        mask = torch.ones(64, 64, dtype=torch.bool)
        mask[win.row0 : win.row1, win.col0 : win.col1] = False
        assert torch.equal(out[:, mask], x[:, mask])


class TestLocalRefine:
    def test_gate_closed_returns_local_coarse(self):
        heads = LocalHeads(channels=8)
        with torch.no_grad():
            for p in heads.parameters():
                p.zero_()
            heads.error_head.bias.fill_(-1e6)
        feat = torch.randn(8, 16, 16)
        coarse = torch.randn(1, 16, 16)
        _, _, refined = local_refine(feat, coarse, heads)
        torch.testing.assert_close(refined, coarse)

    def test_deterministic(self):
        torch.manual_seed(3)
        heads = LocalHeads(channels=8)
        feat = torch.randn(8, 16, 16)
        coarse = torch.randn(1, 16, 16)
        a = local_refine(feat, coarse, heads)
        b = local_refine(feat, coarse, heads)
        for x, y in zip(a, b):
            torch.testing.assert_close(x, y)


class TestWindowValidation:
    def test_invalid_windows_rejected(self):
        with pytest.raises(ValueError):
            PatchWindow(10, 10, 10, 20)  # empty rows
        with pytest.raises(ValueError):
            PatchWindow(-1, 0, 10, 10)
        with pytest.raises(ValueError):
            PatchWindow(0, 0, 300, 10)
