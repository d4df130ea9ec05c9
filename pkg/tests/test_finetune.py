import numpy as np
import pytest

from srft import degradation as D
from srft import finetune as F
from srft import models as M
from srft.metrics import psnr


def toy(scale=2, seed=0):
    return M.build(M.default_spec("edsr_style", scale, trunk_blocks=1, width=4), np.random.default_rng(seed))


def observation(h=6, w=6, seed=1):
    return np.random.default_rng(seed).uniform(0.1, 0.9, size=(1, 3, h, w)).astype(np.float32)


def identity_model():
    """Scale-1 network whose output conv is zero: f(y) = y through the global skip."""
    m = toy(scale=1)
    m.params["out.weight"][:] = 0
    return m


IDENT = D.DegradationSpec((D.Identity(),))
A2 = D.DegradationSpec.bicubic(2)


class TestConfig:
    def test_defaults(self):
        cfg = F.FinetuneConfig()
        assert (cfg.lr, cfg.momentum, cfg.max_iters, cfg.plateau_delta_db, cfg.patience) == (0.01, 0.9, 4000, 0.04, 50)
        assert cfg.monitor == "lr_psnr"

    @pytest.mark.parametrize("kw", [dict(lr=0), dict(momentum=1.0), dict(momentum=-0.1), dict(max_iters=-1),
                                    dict(plateau_delta_db=-1), dict(patience=0), dict(monitor="ps")])
    def test_invalid_rejected(self, kw):
        with pytest.raises(ValueError):
            F.FinetuneConfig(**kw)


class TestLoop:
    def test_max_iters_zero_is_identity(self):
        m, y = toy(), observation()
        out, tr = F.finetune(m, y, A2, F.FinetuneConfig(max_iters=0))
        assert tr.stop_reason == "max_iters"
        assert len(tr.records) == 1 and tr.iterations == 0
        assert list(out.params) == list(m.params)
        assert all(out.params[k].tobytes() == m.params[k].tobytes() for k in m.params)

    def test_already_consistent_fixture_plateaus(self):
        m, y = identity_model(), observation()
        out, tr = F.finetune(m, y, IDENT)
        assert tr.records[0].loss == 0.0
        assert tr.stop_reason == "plateau"
        assert len(tr.records) == 51
        drift = max(np.abs(out.params[k] - m.params[k]).max() for k in m.params)
        assert drift <= 1e-4

    def test_stop_when_consistent_opt_in(self):
        _, tr = F.finetune(identity_model(), observation(), IDENT, F.FinetuneConfig(stop_when_consistent=True))
        assert tr.stop_reason == "already_consistent"
        assert tr.iterations == 0

    def test_small_lr_no_momentum_decreases_loss(self):
        cfg = F.FinetuneConfig(lr=0.01, momentum=0.0, max_iters=10, patience=100)
        _, tr = F.finetune(toy(), observation(), A2, cfg)
        losses = [r.loss for r in tr.records]
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_input_model_not_modified(self):
        m = toy()
        before = {k: v.copy() for k, v in m.params.items()}
        F.finetune(m, observation(), A2, F.FinetuneConfig(max_iters=5))
        assert all(np.array_equal(before[k], m.params[k]) for k in before)

    def test_deterministic(self):
        cfg = F.FinetuneConfig(max_iters=20)
        a, ta = F.finetune(toy(), observation(), A2, cfg)
        b, tb = F.finetune(toy(), observation(), A2, cfg)
        assert ta.to_csv() == tb.to_csv()
        assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)

    def test_returns_best_snapshot(self):
        m, y = toy(), observation()
        cfg = F.FinetuneConfig(lr=0.05, max_iters=60, patience=1000)
        out, tr = F.finetune(m, y, A2, cfg)
        best = max(range(len(tr.records)), key=lambda i: tr.records[i].lr_psnr_db)
        assert tr.best_iter == best
        assert F.lr_psnr(out, y, A2) == pytest.approx(tr.records[best].lr_psnr_db, abs=1e-9)
        assert F.lr_psnr(out, y, A2) >= tr.records[0].lr_psnr_db
        assert len(tr.records) <= cfg.max_iters + 1

    def test_plateau_patience_counts_from_last_real_improvement(self):
        # a custom monitor that never moves: stops after exactly `patience` non-improving checks
        cfg = F.FinetuneConfig(monitor="custom_scalar", patience=7, max_iters=100)
        _, tr = F.finetune(toy(), observation(), A2, cfg, custom_monitor=lambda x: 1.0)
        assert tr.stop_reason == "plateau"
        assert len(tr.records) == 8

    def test_custom_monitor_min_mode(self):
        seen = []

        def mon(x):
            seen.append(x.shape)
            return float(len(seen))  # strictly worsening under "min"

        cfg = F.FinetuneConfig(monitor="custom_scalar", monitor_mode="min", patience=3, plateau_delta_db=0.0)
        _, tr = F.finetune(toy(), observation(), A2, cfg, custom_monitor=mon)
        assert tr.best_iter == 0
        assert len(tr.records) == 4
        assert seen[0] == (1, 3, 12, 12)

    def test_custom_monitor_required(self):
        with pytest.raises(ValueError, match="custom_monitor"):
            F.finetune(toy(), observation(), A2, F.FinetuneConfig(monitor="custom_scalar"))

    def test_non_finite_aborts_with_best_snapshot(self):
        m = toy()
        cfg = F.FinetuneConfig(lr=1e6, max_iters=200, patience=1000)
        with np.errstate(all="ignore"):
            out, tr = F.finetune(m, observation(), A2, cfg)
        assert tr.stop_reason == "non_finite"
        assert all(np.isfinite(v).all() for v in out.params.values())

    @pytest.mark.parametrize("a", [D.DegradationSpec.bicubic(4), IDENT])
    def test_shape_mismatch_rejected_before_iterating(self, a):
        with pytest.raises(ValueError, match="does not match|cannot be applied"):
            F.finetune(toy(), observation(), a)


class TestLrPsnr:
    def test_perfect_consistency_capped(self):
        assert F.lr_psnr(identity_model(), observation(), IDENT) == 99.0

    def test_matches_explicit_pair(self):
        m, y = toy(), observation()
        pair = D.apply(A2, M.predict(m, y))
        assert F.lr_psnr(m, y, A2) == psnr(pair, y)


class TestTraceCsv:
    def test_format_and_roundtrip(self):
        _, tr = F.finetune(toy(), observation(), A2, F.FinetuneConfig(max_iters=3))
        text = tr.to_csv()
        lines = text.splitlines()
        assert lines[0] == "iter,loss,lr_psnr_db"
        assert lines[-1] == "# stop_reason=max_iters"
        assert len(lines) == 4 + 2
        back = F.FinetuneTrace.from_csv(text)
        assert back.stop_reason == "max_iters"
        assert [r.loss for r in back.records] == [r.loss for r in tr.records]
        assert [r.lr_psnr_db for r in back.records] == [r.lr_psnr_db for r in tr.records]

    def test_bad_header_rejected(self):
        with pytest.raises(ValueError, match="header"):
            F.FinetuneTrace.from_csv("a,b,c\n")
