"""Acceptance run: eight criteria, one PASS/FAIL line each.

Run alone with ``pytest tests/test_acceptance.py -v`` or
``python3 tests/test_acceptance.py``. Criteria 5 and 6 train full models on
an 800/200 corpus and take most of an hour on one core.
"""

import contextlib
import io
import json
import sys
import time
import zlib

import numpy as np
import pytest

from fddf.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint
from fddf.cli import main
from fddf.disentangle import (
    BRANCHES,
    RgbImage,
    haar_dwt_level1,
    haar_idwt_level1,
    laplacian,
    ycrcb_planes,
)
from fddf.errors import CorruptionError, FormatError
from fddf.model import DynamicFusion, FddfModel, dff_fuse, fuse_subset
from fddf.nn import Tensor, functional as F, precision
from fddf.nn.gradcheck import check_gradients
from fddf.synth import (
    PATTERNS,
    DatasetManifest,
    apply_artifact,
    apply_edge,
    apply_moire,
    build_dataset,
    derive_seed,
    gen_base_image,
    pattern_statistic,
)
from fddf.training import LEAVE_ONE_OUT, Metrics, TrainConfig, evaluate, format_table, prepare_data, run_ablation, train

DESK_EPOCHS = 20
_LINES: list[str] = []


@pytest.fixture(scope="module", autouse=True)
def _summary(request):
    yield
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")
    if reporter and _LINES:
        reporter.write_sep("=", "acceptance")
        for line in _LINES:
            reporter.write_line(line)


@contextlib.contextmanager
def criterion(request, number, title, budget_s):
    notes = []
    start = time.perf_counter()
    ok = False
    try:
        yield notes
        elapsed = time.perf_counter() - start
        assert elapsed < budget_s, f"took {elapsed:.1f}s, budget {budget_s}s"
        notes.append(f"{elapsed:.1f}s")
        ok = True
    except Exception as exc:
        notes.append(f"{type(exc).__name__}: {(str(exc).splitlines() or [''])[0]}")
        raise
    finally:
        line = f"{'PASS' if ok else 'FAIL'} [{number}] {title}: {'; '.join(notes)}"
        _LINES.append(line)
        reporter = request.config.pluginmanager.get_plugin("terminalreporter")
        if reporter:
            reporter.write_line("\n" + line)


def _cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = main([str(a) for a in argv], out, err)
    return code, out.getvalue()


# 1 --------------------------------------------------------------------------


GRAD_OPS = {
    "conv2d": (lambda x, w, b: F.conv2d(x, w, b, stride=1, padding=1), [(2, 3, 5, 5), (4, 3, 3, 3), (4,)]),
    "conv2d_s2": (lambda x, w: F.conv2d(x, w, stride=2, padding=1), [(2, 2, 6, 6), (3, 2, 3, 3)]),
    "batchnorm2d": (lambda x, g, b: F.batchnorm2d(x, g, b, np.zeros(3), np.ones(3), training=True),
                    [(3, 3, 4, 4), (3,), (3,)]),
    "relu6": (F.relu6, [(4, 6)]),
    "sigmoid": (F.sigmoid, [(3, 5)]),
    "global_avg_pool": (F.global_avg_pool, [(2, 3, 4, 4)]),
    "linear": (F.linear, [(3, 5), (4, 5), (4,)]),
    "softmax": (F.softmax, [(3, 4)]),
    "cross_entropy": (lambda z: F.cross_entropy(z, np.array([0, 1, 1, 0, 1, 0])), [(6, 2)]),
}


def test_1_gradient_suite(request):
    with criterion(request, 1, "gradient suite", 30) as notes:
        worst = {}
        for bits, tol in ((32, 1e-3), (64, 1e-6)):
            with precision(bits):
                for name, (op, shapes) in GRAD_OPS.items():
                    rng = np.random.default_rng(zlib.crc32(f"accept/{name}/{bits}".encode()))
                    for _ in range(5):
                        arrays = [rng.standard_normal(s) for s in shapes]
                        if name == "relu6":
                            arrays[0] = rng.uniform(0.2, 2.0, shapes[0]) * rng.choice([-1, 1, 4], shapes[0])
                        err = check_gradients(op, [Tensor(a, requires_grad=True) for a in arrays], rng)
                        assert err < tol, f"{name} {bits}-bit rel err {err:.2e}"
                        worst[bits] = max(worst.get(bits, 0.0), err)
        notes.append(f"{len(GRAD_OPS)} ops x 5, worst {worst[32]:.1e} (32-bit) {worst[64]:.1e} (64-bit)")


# 2 --------------------------------------------------------------------------


def test_2_transform_oracles(request):
    with criterion(request, 2, "transform oracles", 5) as notes:
        rng = np.random.default_rng(2)
        recon = energy = 0.0
        for _ in range(20):
            plane = rng.uniform(0, 255, (2 * rng.integers(2, 33), 2 * rng.integers(2, 33)))
            ll, bands = haar_dwt_level1(plane)
            recon = max(recon, np.max(np.abs(haar_idwt_level1(ll, bands) - plane)))
            total = sum(np.sum(a**2) for a in (ll, bands.lh, bands.hl, bands.hh))
            energy = max(energy, abs(total - np.sum(plane**2)) / np.sum(plane**2))
        assert recon < 1e-5 and energy < 1e-4, f"haar recon {recon:.1e} energy {energy:.1e}"
        assert np.all(laplacian(np.full((9, 7), 93.0)) == 0)
        yy, xx = np.mgrid[0:12, 0:10]
        assert np.max(np.abs(laplacian(3.0 * xx - 2.0 * yy + 7)[1:-1, 1:-1])) < 1e-12
        for v in range(256):
            planes = ycrcb_planes(RgbImage.solid(8, 8, (v, v, v)))
            assert np.all(planes[1:] == 128.0), f"gray {v}"
        red = ycrcb_planes(RgbImage.solid(8, 8, (255, 0, 0)))[:, 0, 0]
        assert red[0] == pytest.approx(76.245, abs=1e-9)
        assert red[1] == 255.0 and red[2] == pytest.approx(85.0, abs=0.01)
        notes.append(f"haar recon {recon:.1e}, energy {energy:.1e}")


# 3 --------------------------------------------------------------------------


def test_3_fusion_invariants(request):
    with criterion(request, 3, "fusion invariants", 30) as notes:
        rng = np.random.default_rng(3)
        lo, hi = 1.0, 0.0
        for draw in range(100):
            fusion = DynamicFusion(rng, 8, BRANCHES)
            w = fusion.redistribute.weight
            w.data[...] = rng.standard_normal(w.shape) * np.sqrt(2.0 / w.shape[1])
            fusion.redistribute.bias.data[...] = rng.standard_normal(4) * 0.5
            feats = {b: Tensor(rng.standard_normal((2, 8, 4, 4))) for b in BRANCHES}
            _, weights = dff_fuse(feats, fusion)
            v = weights.values
            assert np.all((v > 0) & (v < 1)), f"draw {draw} left the open simplex"
            assert np.max(np.abs(v.sum(axis=1) - 1)) < 1e-6
            lo, hi = min(lo, v.min()), max(hi, v.max())
        for hot, name in enumerate(BRANCHES):
            fusion = DynamicFusion(rng, 8, BRANCHES)
            fusion.redistribute.bias.data[...] = 0.0
            fusion.redistribute.bias.data[hot] = 30.0
            feats = {b: Tensor(rng.standard_normal((2, 8, 4, 4))) for b in BRANCHES}
            out, _ = dff_fuse(feats, fusion)
            gap = np.max(np.abs(out.data - feats[name].data))
            assert gap < 1e-4, f"one-hot {name}: {gap:.1e}"
        for name in BRANCHES:
            single = {name: Tensor(rng.standard_normal((2, 8, 4, 4)))}
            out, w = fuse_subset(single, DynamicFusion(rng, 8, (name,)))
            assert np.array_equal(out.data, single[name].data) and np.all(w.values == 1.0)
        notes.append(f"100 draws, weights in [{lo:.3f}, {hi:.3f}]")


# 4 --------------------------------------------------------------------------


def test_4_overfit_harness(request, tmp_path):
    with criterion(request, 4, "overfit harness", 180) as notes:
        data = prepare_data(build_dataset(32, tmp_path, seed=3))
        _, hist = train(FddfModel(seed=0), data, TrainConfig(epochs=60, seed=0))
        first = next((i + 1 for i, a in enumerate(hist.accuracy) if a == 1.0), None)
        ratio = hist.loss[-1] / hist.loss[0]
        notes.append(f"100% train acc at epoch {first}, loss ratio {ratio:.3f}")
        assert first is not None, f"never reached 100% train accuracy (best {max(hist.accuracy):.3f})"
        assert ratio < 0.1, f"loss ratio {ratio:.3f}"


# 5 and 6 ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    train_set = build_dataset(800, root / "train", seed=1)
    test_set = build_dataset(200, root / "test", seed=2)
    return {"train": prepare_data(train_set), "test": prepare_data(test_set), "config": TrainConfig(DESK_EPOCHS, seed=0)}


def test_5_desk_generalization(request, desk):
    with criterion(request, 5, "desk-scale generalization", 15 * 60) as notes:
        model, _ = train(FddfModel(seed=0), desk["train"], desk["config"])
        m = evaluate(model, desk["test"])
        desk["full"] = model
        notes.append(f"acc {m.accuracy:.3f} P {m.precision:.3f} R {m.recall:.3f}")
        assert m.accuracy >= 0.90 and m.precision >= 0.85 and m.recall >= 0.85


def test_6_ablation_protocol(request, desk):
    with criterion(request, 6, "ablation protocol", 60 * 60) as notes:
        rows = run_ablation(desk["config"], desk["train"], desk["test"], LEAVE_ONE_OUT)
        assert [r.name for r in rows] == [s.name for s in LEAVE_ONE_OUT]
        for row in rows[1:]:
            (dropped,) = row.spec.dropped
            assert not any(k.startswith(f"branch.{dropped.value}.") for k in row.model.state()), row.name
            assert set(row.metrics.mean_fusion_weights) == set(row.spec.branches)
        if "full" in desk:
            # the all row retrains from the same seed; it must match the criterion 5 model bit for bit
            ref = desk["full"].state()
            assert all(np.array_equal(v, ref[k]) for k, v in rows[0].model.state().items()), "all row not reproducible"
        all_acc = rows[0].metrics.accuracy
        best_without = max(r.metrics.accuracy for r in rows[1:])
        notes.append(" ".join(f"{r.name}={r.metrics.accuracy:.3f}" for r in rows))
        print(format_table(rows))
        assert all_acc >= best_without - 0.02, f"all {all_acc:.3f} vs best without {best_without:.3f}"


# 7 --------------------------------------------------------------------------


def test_7_pattern_separability(request):
    ops = dict(zip(PATTERNS[:3], (apply_moire, apply_edge, apply_artifact)))
    with criterion(request, 7, "pattern separability", 60) as notes:
        for kind, op in ops.items():
            clean, rec = [], []
            for s in range(100):
                base = gen_base_image(derive_seed("accept", kind.value, s))
                clean.append(pattern_statistic(kind, base))
                rec.append(pattern_statistic(kind, op(base, s)))
            assert max(clean) < min(rec), f"{kind.value}: clean max {max(clean):.4g} >= recaptured min {min(rec):.4g}"
            notes.append(f"{kind.value} margin {min(rec) - max(clean):.3g}")


# 8 --------------------------------------------------------------------------


def test_8_persistence(request, tmp_path):
    with criterion(request, 8, "persistence", 60) as notes:
        assert _cli("synth", "--n", 16, "--out", tmp_path / "d", "--seed", 8, "--size", 32, 32)[0] == 0
        assert _cli("train", "--data", tmp_path / "d", "--out-ckpt", tmp_path / "m.ckpt", "--epochs", 2)[0] == 0
        raw = (tmp_path / "m.ckpt").read_bytes()
        model = load_checkpoint(tmp_path / "m.ckpt")
        assert encode_checkpoint(model) == raw, "save/load/save not byte-identical"
        flips = 0
        for i in np.random.default_rng(8).choice(len(raw), 64, replace=False):
            bad = bytearray(raw)
            bad[i] ^= 0xFF
            with pytest.raises((CorruptionError, FormatError)):
                decode_checkpoint(bytes(bad))
            flips += 1
        manifest = DatasetManifest.load(tmp_path / "d")
        paths = [manifest.image_path(e) for e in manifest.entries]
        ckpt = tmp_path / "m.ckpt"
        _, out = _cli("predict", "--ckpt", ckpt, "--images", *paths)
        # threshold at the median score so both labels occur
        t = float(np.median([json.loads(line)["p_recaptured"] for line in out.splitlines()]))
        code, out = _cli("eval", "--ckpt", ckpt, "--data", tmp_path / "d", "--format", "records", "--threshold", t)
        assert code == 0
        rec = {line.split("\t")[1]: float(line.split("\t")[2]) for line in out.splitlines()}
        code, out = _cli("predict", "--ckpt", ckpt, "--images", *paths, "--threshold", t)
        assert code == 0
        pred = [int(json.loads(line)["label"] == "recaptured") for line in out.splitlines()]
        assert 0 < sum(pred) < len(pred)
        (tn, fp), (fn, tp) = Metrics.from_predictions(manifest.labels(), pred).confusion.tolist()
        assert (rec["tn"], rec["fp"], rec["fn"], rec["tp"]) == (tn, fp, fn, tp), "predict and eval disagree"
        notes.append(f"{len(raw)} B checkpoint, {flips} corruptions caught, confusion {tn}/{fp}/{fn}/{tp}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-p", "no:cacheprovider"]))
