"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The lines are printed in the "acceptance criteria" section of pytest's
terminal summary. Tolerances and budgets are pinned below; heavy criteria
train their own models with ``nn.TRAIN_DEFAULTS``.
"""

import contextlib
import time

import numpy as np
import pytest

from tlab import attacks as atk
from tlab import cli, nn
from tlab import evalharness as ev
from tlab import transforms as tf
from tlab.data import LabeledDataset
from tlab.errors import ChecksumError
from tlab.tensor import Tensor, log_softmax, nll_loss

GRAD_COORDS = 50
GRAD_STEP = 1e-5
GRAD_RTOL = 1e-5
GRAD_BUDGET_S = 120
FEAS_IMAGES = 1000
FEAS_TOL = 1e-6
WB_EPS, WB_ALPHA, WB_T = 0.1, 0.0125, 10
WB_MIN_ACC, WB_MIN_ASR, WB_BUDGET_S = 0.95, 90.0, 600
TREND_TRIPLES = ((1, 2, 0), (3, 4, 1), (5, 6, 2))
TREND_BUDGET_S = 45 * 60
LOSS_RATIO_MAX = 2.0
LOSS_SIZES = (0, 4, 7, 14)
EVAL_IMAGES = 1000


@pytest.fixture
def criterion(acceptance_results):
    @contextlib.contextmanager
    def run(number, title):
        detail = {}
        ok = False
        try:
            yield detail
            ok = True
        finally:
            acceptance_results[number] = (title, ok, ", ".join(f"{k}={v}" for k, v in detail.items()))
    return run


def eval_set(test_set, n=EVAL_IMAGES):
    return LabeledDataset(test_set.images[:n], test_set.labels[:n], test_set.source)


def trained(name, seed, train_set, test_set):
    return nn.train(nn.build(name, seed), train_set, seed=seed, test=test_set, **nn.TRAIN_DEFAULTS)


def rel_err(a, b, floor=0.0):
    return abs(a - b) / max(abs(a), abs(b), floor, 1e-300)


def fd_floor(loss_value):
    """Smallest gradient whose central difference can resolve GRAD_RTOL.

    Each loss evaluation carries about eps*|L| rounding error, so the
    difference quotient is only good to ~2*eps*|L|/(2h) in absolute terms.
    """
    noise = 2 * np.finfo(np.float64).eps * max(abs(loss_value), 1.0) / GRAD_STEP
    return noise / GRAD_RTOL


def test_c01_gradient_oracle(criterion):
    with criterion(1, "autodiff vs central differences, input and parameter gradients") as d:
        t0 = time.perf_counter()
        r = np.random.default_rng(101)
        worst = raw_worst = 0.0
        for name in nn.ARCHS:
            net = nn.build(name, 5).copy(requires_grad=True, dtype=np.float64)
            x = r.random((2, 1, 28, 28))
            y = r.integers(0, 10, size=2)
            xt = Tensor(x, requires_grad=True)
            base = nll_loss(log_softmax(net(xt)), y)
            floor = fd_floor(base.item())
            base.backward()

            def loss(v):
                return nll_loss(log_softmax(net(Tensor(v))), y).item()

            def check(analytic, numeric):
                nonlocal worst, raw_worst
                worst = max(worst, rel_err(analytic, numeric, floor))
                raw_worst = max(raw_worst, rel_err(analytic, numeric))

            for _ in range(GRAD_COORDS):
                idx = tuple(int(r.integers(0, n)) for n in x.shape)
                xp, xm = x.copy(), x.copy()
                xp[idx] += GRAD_STEP
                xm[idx] -= GRAD_STEP
                check(xt.grad[idx], (loss(xp) - loss(xm)) / (2 * GRAD_STEP))

            keys = sorted(net.params)
            for _ in range(GRAD_COORDS):
                p = net.params[keys[int(r.integers(len(keys)))]]
                idx = tuple(int(r.integers(0, n)) for n in p.shape)
                analytic = p.grad[idx]
                orig = p.data[idx]
                p.data[idx] = orig + GRAD_STEP
                up = loss(x)
                p.data[idx] = orig - GRAD_STEP
                down = loss(x)
                p.data[idx] = orig
                check(analytic, (up - down) / (2 * GRAD_STEP))
        elapsed = time.perf_counter() - t0
        d.update(max_rel_err=f"{worst:.2e}", unfloored=f"{raw_worst:.2e}", seconds=f"{elapsed:.1f}")
        assert worst < GRAD_RTOL
        assert elapsed < GRAD_BUDGET_S


def test_c02_fgsm_closed_form(criterion):
    with criterion(2, "FGSM on a logistic model gives -eps*sign(w)") as d:
        arch = nn.ArchSpec("logistic", (("flatten",), ("linear", 2)), (1, 8, 8))
        r = np.random.default_rng(22)
        w = r.normal(size=64)
        net = nn.Network(arch, {
            "1.weight": Tensor(np.stack([np.zeros(64), w]).astype(np.float32)),
            "1.bias": Tensor(np.array([0.0, 0.1], dtype=np.float32)),
        })
        x = np.full((1, 1, 8, 8), 0.5, dtype=np.float32)
        eps = 0.1
        out = atk.craft(atk.preset("fgsm", epsilon=eps), net, x, [1])
        expected = (-np.float32(eps) * np.sign(w).astype(np.float32)).reshape(1, 1, 8, 8)
        mismatches = int(np.sum(np.sign(out.deltas) != np.sign(expected)))
        d.update(sign_mismatches=mismatches, bitwise=out.deltas.tobytes() == expected.tobytes())
        assert mismatches == 0
        assert out.deltas.tobytes() == expected.tobytes()


def test_c03_feasibility(criterion, proxy, test_set):
    with criterion(3, "every iteration feasible for every method and transform") as d:
        data = eval_set(test_set, FEAS_IMAGES)
        chunks = np.array_split(np.arange(FEAS_IMAGES), len(atk.PRESETS))
        violations, checked = 0, 0
        for name, ids in zip(atk.PRESETS, chunks):
            spec = atk.preset(name)
            x = data.images[ids]

            def monitor(t, local, xs, delta):
                nonlocal violations, checked
                adv = x[local] + delta
                bad = (np.abs(delta).reshape(len(delta), -1).max(axis=1) > spec.epsilon + FEAS_TOL)
                bad |= (adv.reshape(len(adv), -1).min(axis=1) < 0) | (adv.reshape(len(adv), -1).max(axis=1) > 1)
                violations += int(bad.sum())
                checked += len(delta)

            atk.craft(spec, proxy, x, data.labels[ids], monitor=monitor)
        d.update(images=FEAS_IMAGES, image_iterations=checked, violations=violations)
        assert checked == sum(len(c) * atk.preset(n).T for n, c in zip(atk.PRESETS, chunks))
        assert violations == 0


def test_c04_degenerations(criterion, proxy, test_set, monkeypatch):
    with criterion(4, "maskblock(identity)=BIM, PGD(zero init)=BIM, MI(mu=0) signs=BIM") as d:
        data = eval_set(test_set, 100)
        x, y = data.images, data.labels

        def trace(spec):
            seen = []
            out = atk.craft(spec, proxy, x, y, monitor=lambda t, i, xs, dl: seen.append(dl.copy()))
            return out, seen

        bim, bim_trace = trace(atk.preset("bim", seed=7))
        pgd, _ = trace(atk.AttackSpec(name="pgd", method="pgd", pgd_init="zero", seed=7))
        _, mi_trace = trace(atk.AttackSpec(name="mi", method="mi", mu=0.0, seed=7))
        with monkeypatch.context() as m:
            m.setattr(tf, "mask_draws", lambda spec, H, W: [None])
            masked, _ = trace(atk.preset("maskblock", seed=7))
        sign_equal = all(np.array_equal(np.sign(a), np.sign(b)) for a, b in zip(bim_trace, mi_trace))
        d.update(maskblock_bitwise=masked.deltas.tobytes() == bim.deltas.tobytes(),
                 pgd_bitwise=pgd.deltas.tobytes() == bim.deltas.tobytes(), mi_signs=sign_equal)
        assert masked.deltas.tobytes() == bim.deltas.tobytes()
        assert pgd.deltas.tobytes() == bim.deltas.tobytes()
        assert len(mi_trace) == len(bim_trace) and sign_equal


def direct_block(s, ur, uc, H, W):
    m = np.ones((H, W), dtype=np.float32)
    for i in range(H):
        for j in range(W):
            if s * ur <= i < min(s * (ur + 1), H) and s * uc <= j < min(s * (uc + 1), W):
                m[i, j] = 0.0
    return m


def test_c05_mask_construction(criterion):
    with criterion(5, "masks match direct block bounds, exhaustive") as d:
        mismatches, checked = 0, 0
        for H in (4, 5, 28):
            for s in (2, 7):
                for mode in ("diagonal", "grid"):
                    spec = tf.maskblock(s, mode=mode)
                    legal = range(H // s + 1)
                    pairs = [(u, u) for u in legal] if mode == "diagonal" else [(r, c) for r in legal for c in legal]
                    for ur, uc in pairs:
                        got = tf.make_mask(spec, ur if mode == "diagonal" else (ur, uc), H, H).data[0, 0]
                        mismatches += int(not np.array_equal(got, direct_block(s, ur, uc, H, H)))
                        checked += 1
        d.update(masks=checked, mismatches=mismatches)
        assert mismatches == 0


def test_c06_white_box_efficacy(criterion, train_set, test_set):
    with criterion(6, "white-box BIM ASR >= 90% on a >= 95% proxy") as d:
        t0 = time.perf_counter()
        net = trained("cnn_b", 1, train_set, test_set)
        data = eval_set(test_set)
        spec = atk.preset("bim", epsilon=WB_EPS, alpha=WB_ALPHA, T=WB_T)
        res = ev.evaluate(net, atk.craft(spec, net, data.images, data.labels))
        elapsed = time.perf_counter() - t0
        d.update(proxy=net.name, test_acc=f"{net.meta['test_acc']:.3f}", asr=f"{res.asr_clean_correct:.2f}",
                 n=res.n_clean_correct, seconds=f"{elapsed:.0f}")
        assert net.meta["test_acc"] >= WB_MIN_ACC
        assert res.asr_clean_correct >= WB_MIN_ASR
        assert elapsed < WB_BUDGET_S


def test_c07_transfer_trend(criterion, train_set, test_set):
    with criterion(7, "MaskBlock transfers better than BIM over 3 seed triples") as d:
        t0 = time.perf_counter()
        data = eval_set(test_set)
        gaps = []
        for proxy_seed, target_seed, attack_seed in TREND_TRIPLES:
            proxy = trained("cnn_a", proxy_seed, train_set, test_set)
            target = trained("cnn_b", target_seed, train_set, test_set)
            rates = []
            for name in ("bim", "maskblock"):
                spec = atk.preset(name, seed=attack_seed)
                assert name == "bim" or (str(spec.transform).startswith("maskblock") and spec.N is None)
                rates.append(ev.evaluate(target, atk.craft(spec, proxy, data.images, data.labels)).asr_clean_correct)
            gaps.append(rates[1] - rates[0])
            d[f"gap{proxy_seed}{target_seed}{attack_seed}"] = f"{rates[0]:.1f}->{rates[1]:.1f}"
        elapsed = time.perf_counter() - t0
        d.update(mean_gap=f"{np.mean(gaps):.2f}", seconds=f"{elapsed:.0f}")
        assert np.mean(gaps) > 0
        assert sum(g > 0 for g in gaps) >= 2
        assert elapsed < TREND_BUDGET_S


def test_c08_loss_preservation(criterion, proxy, test_set):
    with criterion(8, "masked loss at s=7 within 2x clean; curve non-decreasing, <= 1 inversion") as d:
        rows = tf.loss_preservation_curve(proxy, eval_set(test_set), LOSS_SIZES)
        masked = [r[1] for r in rows]
        clean = rows[0][2]
        ratio = dict((r[0], r[1] / r[2]) for r in rows)[7]
        inversions = sum(b < a for a, b in zip(masked, masked[1:]))
        d.update(curve="/".join(f"{v:.3f}" for v in masked), ratio_s7=f"{ratio:.4f}", inversions=inversions)
        assert rows[0][1] == clean
        assert ratio <= LOSS_RATIO_MAX
        assert inversions <= 1


def test_c09_patch_sweep(criterion, proxy, target, test_set):
    with criterion(9, "best nonzero s beats s=0; s=0 row equals the BIM matrix row") as d:
        data = eval_set(test_set)
        base = atk.preset("maskblock")
        rows = ev.patch_sweep(proxy, [target], base, cli.DEFAULT_SWEEP_SIZES, data)
        by_s = {r.s: r for r in rows}
        best = max((r for r in rows if r.s > 0), key=lambda r: r.asr_pct)
        batches = {}
        report = ev.transfer_matrix([proxy], [target], [atk.preset("bim")], data, modes=ev.MODES, batches=batches)
        matrix = {r.mode: r for r in report.rows}
        zero = by_s[0]
        same_row = (zero.asr_pct == matrix["clean_correct"].asr_pct and zero.asr_all_pct == matrix["all"].asr_pct
                    and zero.n == matrix["clean_correct"].n)
        zero_batch = atk.craft(ev.sweep_spec(base, 0), proxy, data.images, data.labels, np.arange(len(data)))
        same_deltas = zero_batch.deltas.tobytes() == batches[(proxy.name, "bim")].deltas.tobytes()
        d.update(sweep=" ".join(f"s{r.s}:{r.asr_pct:.1f}" for r in rows), best_s=best.s,
                 row_identical=same_row, deltas_identical=same_deltas)
        assert best.asr_pct > zero.asr_pct
        assert same_row and same_deltas


def test_c10_reproducible_matrix(criterion, proxy, target, mnist_paths, tmp_path):
    with criterion(10, "two matrix runs give byte-identical CSV") as d:
        nn.save(proxy, tmp_path / "p.tlab")
        nn.save(target, tmp_path / "t.tlab")
        config = tmp_path / "run.toml"
        config.write_text("\n".join([
            "seed = 11",
            "[data]", f'images = "{mnist_paths["test_images"]}"', f'labels = "{mnist_paths["test_labels"]}"',
            "[eval]", "subset = 200",
            "[[models]]", 'checkpoint = "p.tlab"', 'role = "proxy"',
            "[[models]]", 'checkpoint = "t.tlab"', 'role = "target"',
            "[[attacks]]", 'name = "bim"', "[[attacks]]", 'name = "maskblock"', "[[attacks]]", 'name = "di"',
        ]) + "\n")
        blobs = []
        for k in range(2):
            out = tmp_path / f"run{k}.csv"
            assert cli.main(["matrix", "--config", str(config), "--out", str(out)]) == 0
            blobs.append(out.read_bytes())
        d.update(rows=len(blobs[0].splitlines()) - 1, identical=blobs[0] == blobs[1])
        assert blobs[0] == blobs[1]


def test_c11_serialization(criterion, proxy, test_set, tmp_path):
    with criterion(11, "checkpoint and batch files round-trip; CRC rejects corruption") as d:
        ckpt = tmp_path / "m.tlab"
        nn.save(proxy, ckpt)
        back = nn.load(ckpt)
        params_ok = all(back.params[k].data.tobytes() == proxy.params[k].data.tobytes() for k in proxy.params)
        data = eval_set(test_set, 20)
        batch = atk.craft(atk.preset("maskblock"), proxy, data.images, data.labels)
        tadv = tmp_path / "b.tadv"
        atk.save_batch(batch, tadv)
        again = atk.load_batch(tadv)
        batch_ok = (again.originals.tobytes() == batch.originals.tobytes()
                    and again.deltas.tobytes() == batch.deltas.tobytes()
                    and again.labels.tobytes() == batch.labels.tobytes() and again.spec == batch.spec)
        rejected = 0
        for path, loader in ((ckpt, nn.load), (tadv, atk.load_batch)):
            blob = bytearray(path.read_bytes())
            blob[-20] ^= 0x01
            bad = tmp_path / ("bad" + path.suffix)
            bad.write_bytes(bytes(blob))
            with pytest.raises(ChecksumError):
                loader(bad)
            rejected += 1
        d.update(checkpoint=params_ok, batch=batch_ok, crc_rejections=rejected)
        assert params_ok and batch_ok and back.arch == proxy.arch
