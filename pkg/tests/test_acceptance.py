"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines; tolerances are pinned here and nowhere else.  The end-to-end criteria
replay the committed calibration fixture (tests/fixtures/e2e_calibration.json,
regenerated by tools/make_e2e_fixture.py).
"""

import dataclasses
import io
import json
import math
import pathlib
import time

import numpy as np
import pytest

from scribbleseg import (
    CorruptionSpec,
    GeodesicConfig,
    GraphCutConfig,
    LabelMap,
    LikelihoodModel,
    ModelConfig,
    PhantomSpec,
    ProbMap,
    ScribbleSet,
    Volume,
    adaptive_loss,
    corrupt_segmentation,
    energy_of,
    geodesic_distance,
    geodesic_distance_exact,
    graphcut_refine,
    linear_index,
    make_phantom,
    prune_labels,
    weights_from_distance,
)
from scribbleseg.cli import main as cli_main
from scribbleseg.formats import (
    read_labelmap,
    read_probmap,
    read_scribbles,
    read_volume,
    scribbles_from_bytes,
    scribbles_to_bytes,
    write_nrrd,
    write_scribbles,
)
from scribbleseg.geodesic import DistanceMap
from scribbleseg.model import BalanceWeights, extract_patches, save_config, save_model, load_model
from scribbleseg.nn import BatchNorm, Conv3d, Dense, log_softmax, log_softmax_backward

from helpers import random_volume
from test_graphcut import exhaustive_argmin, random_instance
from test_nn import fd_grad, rel_err

FIXTURE = pathlib.Path(__file__).parent / "fixtures" / "e2e_calibration.json"


def report(name: str, detail: str) -> None:
    print(f"ACCEPTANCE PASS {name}: {detail}")


# --- geodesic oracle equivalence ---------------------------------------------------


def test_geodesic_oracle_equivalence():
    """Raster scan (4 passes, 26-conn) vs exact solver on 20 random volumes."""
    gen = np.random.default_rng(20240501)
    worst_gap = 0.0
    worst_time = 0.0
    for trial in range(20):
        dims = tuple(int(d) for d in gen.integers(8, 17, size=3))
        v = random_volume(dims, seed=9000 + trial)
        n = dims[0] * dims[1] * dims[2]
        seeds = gen.choice(n, size=int(gen.integers(1, 8)), replace=False)
        t0 = time.perf_counter()
        approx = geodesic_distance(v, seeds, GeodesicConfig(passes=4, connectivity=26))
        elapsed = time.perf_counter() - t0
        exact = geodesic_distance_exact(v, seeds, GeodesicConfig(connectivity=26))
        assert np.all(approx.dist >= exact.dist - 1e-9), "raster scan must upper-bound the oracle"
        lo, hi = v.intensity_range
        gap = float((approx.dist - exact.dist).max()) / (hi - lo)
        assert gap <= 0.01, f"gap {gap:.4f} of intensity range on dims {dims}"
        assert elapsed < 1.0, f"raster scan took {elapsed:.2f}s on dims {dims}"
        worst_gap = max(worst_gap, gap)
        worst_time = max(worst_time, elapsed)
    report("geodesic-oracle-equivalence", f"20 volumes, worst gap {worst_gap:.2e} of range, worst time {worst_time:.2f}s")


# --- weight map pointwise checks ---------------------------------------------------


def test_weight_map_pointwise():
    v = random_volume((8, 8, 8), seed=17)
    seed_idx = linear_index((4, 4, 4), v.dims)
    cfg = GeodesicConfig(tau=0.3)
    w_seeded = weights_from_distance(geodesic_distance(v, [seed_idx], cfg), cfg.tau)
    assert abs(w_seeded.w[seed_idx] - 1.0) <= 1e-6

    w_empty = weights_from_distance(geodesic_distance(v, [], cfg), cfg.tau)
    assert np.all(w_empty.w == 0.0)

    at_tau = weights_from_distance(DistanceMap((1, 1, 1), np.array([0.3])), tau=0.3)
    assert abs(at_tau.w[0] - math.exp(-1.0)) <= 1e-6
    report("eq2-pointwise", "W=1 on scribbles, W=0 for empty set, W=e^-1 at D=tau (abs err <= 1e-6)")


# --- gradient correctness -----------------------------------------------------------


def test_gradient_correctness_all_layers_and_loss():
    t0 = time.perf_counter()
    checked = 0
    for seed in range(10):
        gen = np.random.default_rng(seed)

        conv = Conv3d(2, 2, 3, padding="same", rng=gen, dtype=np.float64)
        x = gen.standard_normal((1, 2, 4, 4, 4))
        proj = gen.standard_normal(conv.forward(x).shape)
        gx, gw, gb = conv.backward(x, proj)
        assert rel_err(gx, fd_grad(x, lambda: float((conv.forward(x) * proj).sum()))) < 1e-4
        assert rel_err(gw, fd_grad(conv.weights, lambda: float((conv.forward(x) * proj).sum()))) < 1e-4
        assert rel_err(gb, fd_grad(conv.bias, lambda: float((conv.forward(x) * proj).sum()))) < 1e-4

        bn = BatchNorm(3, dtype=np.float64)
        bn.gamma[:] = gen.standard_normal(3)
        xb = gen.standard_normal((6, 3))
        pb = gen.standard_normal((6, 3))

        def bn_loss():
            saved = (bn.running_mean.copy(), bn.running_var.copy())
            value = float((bn.forward(xb, train=True) * pb).sum())
            bn.running_mean[:], bn.running_var[:] = saved
            return value

        gxb, ggamma, gbeta = bn.backward(xb, pb, train=True)
        assert rel_err(gxb, fd_grad(xb, bn_loss)) < 1e-4
        assert rel_err(ggamma, fd_grad(bn.gamma, bn_loss)) < 1e-4
        assert rel_err(gbeta, fd_grad(bn.beta, bn_loss)) < 1e-4

        fc = Dense(4, 3, rng=gen, dtype=np.float64)
        xf = gen.standard_normal((5, 4))
        pf = gen.standard_normal((5, 3))
        gxf, gwf, gbf = fc.backward(xf, pf)
        assert rel_err(gxf, fd_grad(xf, lambda: float((fc.forward(xf) * pf).sum()))) < 1e-4
        assert rel_err(gwf, fd_grad(fc.weights, lambda: float((fc.forward(xf) * pf).sum()))) < 1e-4

        xs = gen.standard_normal((4, 3))
        ps = gen.standard_normal((4, 3))
        assert rel_err(
            log_softmax_backward(xs, ps), fd_grad(xs, lambda: float((log_softmax(xs) * ps).sum()))
        ) < 1e-4

        logits = gen.standard_normal((6, 2))
        labels = gen.integers(0, 2, size=6)
        weights = gen.random(6)
        cw = gen.random(6) * 3
        _, grad = adaptive_loss(logits, labels, weights, cw)
        assert rel_err(grad, fd_grad(logits, lambda: adaptive_loss(logits, labels, weights, cw)[0])) < 1e-4
        checked += 1

    # full loss through the whole network, directional probe per seed
    tiny = ModelConfig(patch_size=5, scales=(1, 3, 5), filters_per_scale=4, fc_sizes=(8, 4, 2), dropout=0.0)
    for seed in range(10):
        gen = np.random.default_rng(100 + seed)
        model = LikelihoodModel(tiny, rng=gen, dtype=np.float64)
        patches = gen.standard_normal((4, 5, 5, 5))
        labels = gen.integers(0, 2, size=4)
        w = gen.random(4)
        cw = np.ones(4)
        params = model.parameters()
        buffers = model.buffers()
        direction = [gen.standard_normal(p.shape) for p in params]

        def loss_at(t):
            for p, d in zip(params, direction):
                p += t * d
            saved = [b.copy() for b in buffers]
            logits, _ = model.forward_patches(patches, train=True)
            value, _ = adaptive_loss(logits, labels, w, cw)
            for buf, orig in zip(buffers, saved):
                buf[...] = orig
            for p, d in zip(params, direction):
                p -= t * d
            return value

        logits, cache = model.forward_patches(patches, train=True)
        _, grad_logits = adaptive_loss(logits, labels, w, cw)
        grads = model.backward_patches(cache, grad_logits)
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, direction))
        h = 1e-5
        numeric = (loss_at(h) - loss_at(-h)) / (2 * h)
        assert abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-10) < 1e-4

    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0, f"gradient suite took {elapsed:.1f}s"
    report("gradient-correctness", f"10 seeds x (conv, batchnorm, dense, log-softmax, loss, end-to-end) in {elapsed:.1f}s")


# --- patch / fully-convolutional consistency ----------------------------------------


def test_patch_fcn_consistency():
    cfg = ModelConfig()
    gen = np.random.default_rng(50)
    model = LikelihoodModel(cfg, rng=np.random.default_rng(51))
    for bn in model.scale_bns + model.fc_bns:
        bn.running_mean[:] = (gen.standard_normal(bn.channels) * 0.1).astype(np.float32)
        bn.running_var[:] = (gen.random(bn.channels) * 0.5 + 0.5).astype(np.float32)
    v = random_volume((16, 16, 16), seed=52)
    fcn_logits = model.infer_volume_logits(v)

    margin = (max(cfg.scales) - 1) // 2
    nx, ny, nz = v.dims
    centers = np.array(
        [
            linear_index((x, y, z), v.dims)
            for z in range(margin, nz - margin)
            for y in range(margin, ny - margin)
            for x in range(margin, nx - margin)
        ]
    )
    patches = extract_patches(v, centers, cfg.patch_size)
    patch_logits, _ = model.forward_patches(patches, train=False)
    diff = float(np.abs(patch_logits - fcn_logits[centers]).max())
    assert diff <= 1e-5, f"max abs logit difference {diff:.2e}"
    report("patch-fcn-consistency", f"{len(centers)} interior voxels, max |logit diff| = {diff:.2e} <= 1e-5")


# --- graph cut exactness --------------------------------------------------------------


def test_graphcut_exactness():
    cfg = GraphCutConfig(lam=2.5, sigma=0.15)
    for seed in range(50):
        dims = (3, 2, 2)
        v, p = random_instance(dims, seed=40000 + seed)
        labels = graphcut_refine(p, v, None, cfg)
        oracle_labels, _ = exhaustive_argmin(p, v, cfg)
        solver_energy = energy_of(labels, p, v, cfg)
        oracle_energy = energy_of(LabelMap(dims, oracle_labels), p, v, cfg)
        assert solver_energy == oracle_energy, f"seed {seed}: {solver_energy} != {oracle_energy}"

    for seed in range(50):
        v, p = random_instance((3, 2, 2), seed=41000 + seed)
        labels = graphcut_refine(p, v, None, GraphCutConfig(lam=0.0))
        assert np.array_equal(labels.labels, (p.prob > 0.5).astype(np.uint8))
    report("graphcut-exactness", "50 exhaustive 2^12-labeling instances exactly matched; lambda=0 equals argmax on 50 more")


# --- pruning statistics ---------------------------------------------------------------


def test_pruning_statistics():
    n = 10 ** 6
    labels = LabelMap((100, 100, 100), np.zeros(n, dtype=np.uint8))
    probs = ProbMap((100, 100, 100), np.full(n, 0.9, dtype=np.float32))
    kept = int(prune_labels(labels, probs, 0.8, 0.98, np.random.default_rng(424242)).sum())
    mean = n * 0.02
    bound = 4 * math.sqrt(n * 0.02 * 0.98)
    assert abs(kept - mean) <= bound, f"kept {kept} outside {mean} +- {bound:.0f}"
    report("pruning-statistics", f"kept {kept} of 1e6 confident voxels (binomial mean 20000 +- {bound:.0f})")


# --- balance weight identity -----------------------------------------------------------


def test_balance_weight_identity():
    gen = np.random.default_rng(99)
    checked = 0
    for _ in range(300):
        c_f, c_b = int(gen.integers(0, 2000)), int(gen.integers(0, 2000))
        s_f, s_b = int(gen.integers(0, 100)), int(gen.integers(0, 100))
        bw = BalanceWeights.from_counts(c_f, c_b, s_f, s_b)
        total = c_f + c_b + s_f + s_b
        for weight, count in ((bw.alpha_f, c_f), (bw.alpha_b, c_b), (bw.beta_f, s_f), (bw.beta_b, s_b)):
            if count > 0:
                assert weight * count == pytest.approx(total, rel=1e-12)
                checked += 1
    report("balance-weight-identity", f"{checked} weight*count == |T| identities over 300 random set sizes")


# --- end-to-end refinement, ablation, determinism ----------------------------------------


def _write_study(tmp, case, phantom_spec, corruption_spec):
    volume, gt = make_phantom(dataclasses.replace(phantom_spec, seed=case["phantom_seed"]))
    labels, probs = corrupt_segmentation(gt, dataclasses.replace(corruption_spec, seed=case["corruption_seed"]))
    paths = {}
    for obj, name in ((volume, "volume"), (gt, "gt"), (labels, "init"), (probs, "probs")):
        path = tmp / f"{name}_{case['phantom_seed']}.nrrd"
        write_nrrd(obj, path)
        paths[name] = path
    return paths


def _run_cli_case(tmp, paths, seed, extra=()):
    report_path = tmp / f"report_{seed}_{len(extra)}.jsonl"
    args = [
        "refine",
        "--volume", str(paths["volume"]),
        "--init-seg", str(paths["init"]),
        "--init-prob", str(paths["probs"]),
        "--gt", str(paths["gt"]),
        "--rounds", "5",
        "--seed", str(seed),
        "--report", str(report_path),
        "--stop-dice", "0.95",
    ] + list(extra)
    t0 = time.perf_counter()
    code = cli_main(args)
    elapsed = time.perf_counter() - t0
    assert code == 0
    rows = [json.loads(line) for line in report_path.read_text().splitlines()]
    return rows, elapsed


@pytest.fixture(scope="module")
def e2e_runs(tmp_path_factory):
    fixture = json.loads(FIXTURE.read_text())
    phantom_spec = PhantomSpec(**fixture["phantom"])
    corruption_spec = CorruptionSpec(**fixture["corruption"])
    tmp = tmp_path_factory.mktemp("e2e")
    single_cfg = tmp / "single_scale.cfg"
    save_config(ModelConfig.single_scale(), single_cfg)

    runs = {"multi": [], "single": [], "times": [], "initial": []}
    for case in fixture["cases"]:
        paths = _write_study(tmp, case, phantom_spec, corruption_spec)
        rows, elapsed = _run_cli_case(tmp, paths, case["phantom_seed"])
        runs["initial"].append(rows[0]["dice"])
        runs["multi"].append(rows[-1]["dice"])
        runs["times"].append(elapsed)
        rows_s, _ = _run_cli_case(tmp, paths, case["phantom_seed"], extra=("--model-config", str(single_cfg)))
        runs["single"].append(rows_s[-1]["dice"])
    return runs


def test_end_to_end_synthetic_refinement(e2e_runs):
    initial = np.array(e2e_runs["initial"])
    final = np.array(e2e_runs["multi"])
    times = np.array(e2e_runs["times"])
    assert np.all(initial >= 0.5) and np.all(initial <= 0.7), "calibration band violated"
    assert final.mean() >= 0.90, f"mean final dice {final.mean():.4f}"
    assert times.max() <= 60.0, f"slowest phantom took {times.max():.1f}s"
    report(
        "end-to-end-synthetic-refinement",
        f"20 phantoms: init dice {initial.mean():.3f} in [0.5, 0.7] -> final {final.mean():.4f} >= 0.90, "
        f"max {times.max():.1f}s/phantom <= 60s",
    )


def test_ablation_direction(e2e_runs):
    multi = float(np.mean(e2e_runs["multi"]))
    single = float(np.mean(e2e_runs["single"]))
    assert multi >= single - 0.01, f"multi-scale {multi:.4f} vs single-scale {single:.4f}"
    report("ablation-direction", f"mean dice multi-scale {multi:.4f} >= single-scale {single:.4f} - 0.01")


def test_determinism_byte_identical(tmp_path):
    fixture = json.loads(FIXTURE.read_text())
    case = fixture["cases"][0]
    paths = _write_study(tmp_path, case, PhantomSpec(**fixture["phantom"]), CorruptionSpec(**fixture["corruption"]))
    outputs = []
    for tag in ("a", "b"):
        report_path = tmp_path / f"{tag}.jsonl"
        label_path = tmp_path / f"{tag}.nrrd"
        code = cli_main([
            "refine",
            "--volume", str(paths["volume"]),
            "--init-seg", str(paths["init"]),
            "--init-prob", str(paths["probs"]),
            "--gt", str(paths["gt"]),
            "--rounds", "2",
            "--seed", "7",
            "--report", str(report_path),
            "--out", str(label_path),
        ])
        assert code == 0
        outputs.append((report_path.read_bytes(), label_path.read_bytes()))
    assert outputs[0][0] == outputs[1][0], "report files differ between identical runs"
    assert outputs[0][1] == outputs[1][1], "label maps differ between identical runs"
    report("determinism", f"two identical runs: report ({len(outputs[0][0])} B) and labels ({len(outputs[0][1])} B) byte-identical")


# --- I/O round trips -----------------------------------------------------------------------


def test_io_round_trips_bit_exact(tmp_path):
    gen = np.random.default_rng(31337)
    v = Volume((5, 6, 7), (0.5, 1.0, 1.5), gen.random(210).astype(np.float32))
    vol_path = tmp_path / "v.nrrd"
    write_nrrd(v, vol_path)
    first = vol_path.read_bytes()
    write_nrrd(read_volume(vol_path), vol_path)
    assert vol_path.read_bytes() == first

    lab = LabelMap((5, 6, 7), (gen.random(210) > 0.5).astype(np.uint8))
    lab_path = tmp_path / "l.nrrd"
    write_nrrd(lab, lab_path)
    first = lab_path.read_bytes()
    write_nrrd(read_labelmap(lab_path), lab_path)
    assert lab_path.read_bytes() == first

    p = ProbMap((5, 6, 7), gen.random(210).astype(np.float32))
    p_path = tmp_path / "p.nrrd"
    write_nrrd(p, p_path)
    first = p_path.read_bytes()
    write_nrrd(read_probmap(p_path), p_path)
    assert p_path.read_bytes() == first

    picks = gen.choice(210, size=60, replace=False)
    s = ScribbleSet((5, 6, 7), foreground=picks[:30], background=picks[30:])
    raw = scribbles_to_bytes(s)
    assert scribbles_to_bytes(scribbles_from_bytes(raw)) == raw
    s_path = tmp_path / "s.scrb"
    write_scribbles(s, s_path)
    assert read_scribbles(s_path) == s

    model = LikelihoodModel(ModelConfig(patch_size=5, scales=(1, 3), filters_per_scale=4, fc_sizes=(8, 2)))
    ckpt = tmp_path / "m.monw"
    save_model(model, ckpt)
    first = ckpt.read_bytes()
    save_model(load_model(ckpt), ckpt)
    assert ckpt.read_bytes() == first
    report("io-round-trips", "volume, labels, probabilities, scribbles and checkpoint all bit-exact")
