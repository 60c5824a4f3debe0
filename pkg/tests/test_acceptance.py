"""End-to-end acceptance gate.

Nine checks: gradient correctness through the whole network, exact
agreement of the geometry kernels and the metrics with brute-force
oracles, softmax normalization, permutation behavior, overfit capability
on synthetic scenes, ablation ordering, run-to-run determinism,
checkpoint round-trips, and the robustness harness. Each check prints
one pass/fail line on the live terminal.
"""

import itertools
import json
import math
import re
import time

import numpy as np
import pytest

import pointseg.tensor as T
from pointseg import attention, gpm
from pointseg.backbone import (NetworkConfig, build_plan, forward,
                               load_checkpoint, save_checkpoint)
from pointseg.cli import main
from pointseg.cloud import generate_synthetic_scene
from pointseg.spatial import ball_group, farthest_point_sample, knn
from pointseg.tensor import Tensor
from pointseg.training import (TrainConfig, effective_config, evaluate,
                               evaluate_params, run_ablation, run_robustness,
                               train, training_blocks)

TWO_PLANES = {"primitives": [
    {"kind": "hplane", "class": 0, "count": 1024,
     "params": {"z": 0.2, "size": [1.0, 1.0]}, "jitter": 0.0},
    {"kind": "hplane", "class": 1, "count": 1024,
     "params": {"z": 0.8, "size": [1.0, 1.0]}, "jitter": 0.0},
]}

FOUR_CLASS = {"primitives": [
    {"kind": "hplane", "class": 0, "count": 1024,
     "params": {"z": 0.02, "size": [1.0, 1.0]}, "jitter": 0.0},
    {"kind": "hplane", "class": 1, "count": 1024,
     "params": {"z": 0.98, "size": [1.0, 1.0]}, "jitter": 0.0},
    {"kind": "box", "class": 2, "count": 512,
     "params": {"min": [0.15, 0.15, 0.15], "max": [0.45, 0.45, 0.45]},
     "jitter": 0.0},
    {"kind": "sphere", "class": 3, "count": 512,
     "params": {"center": [0.7, 0.7, 0.5], "radius": 0.18}, "jitter": 0.0},
]}


def overfit_net(num_classes: int) -> NetworkConfig:
    """Desk-scale architecture with every module enabled."""
    return NetworkConfig(
        num_classes=num_classes, feature_width=3, k_neighbors=3,
        enrich_radius=0.2, enrich_mode="gated",
        layer_scales=(64, 16), layer_radii=(0.2, 0.4), group_sizes=(16, 16),
        channel_widths=(32, 32), decoder_widths=(32, 32),
        gpm_enabled=(True, True), gpm_stack_depth=2, use_attention=True,
        block_points=256)


def overfit_train(epochs: int) -> TrainConfig:
    return TrainConfig(epochs=epochs, batch_size=1, learning_rate=5e-3,
                       optimizer="adam", seed=0)


def announce(capsys, number: int, ok: bool, detail: str):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    with capsys.disabled():
        print(f"\n{line}")
    assert ok, line


@pytest.fixture(scope="module")
def two_plane_run():
    cloud = generate_synthetic_scene(TWO_PLANES, seed=0)
    net = overfit_net(2)
    tc = overfit_train(epochs=200)
    blocks = training_blocks(cloud, net, tc.seed)
    started = time.perf_counter()
    params, history = train(blocks, net, tc)
    elapsed = time.perf_counter() - started
    cfg = effective_config(net, tc)
    report = evaluate_params(params, cfg, blocks)
    return {"cloud": cloud, "net": net, "tc": tc, "blocks": blocks,
            "params": params, "history": history, "elapsed": elapsed,
            "cfg": cfg, "report": report}


@pytest.fixture(scope="module")
def four_class_ablation():
    cloud = generate_synthetic_scene(FOUR_CLASS, seed=0)
    net = overfit_net(4)
    tc = overfit_train(epochs=120)
    blocks = training_blocks(cloud, net, tc.seed)
    started = time.perf_counter()
    table = run_ablation(blocks, net, tc,
                         variants=("full", "no_cr", "no_gpm", "no_am"))
    return {"table": table, "elapsed": time.perf_counter() - started}


def test_criterion_1_gradient_correctness(capsys):
    started = time.perf_counter()
    code = main(["gradcheck", "--seed", "0"])
    elapsed = time.perf_counter() - started
    out = capsys.readouterr().out
    worst = float(re.search(r"max relative error (\S+) \(", out).group(1))
    ok = code == 0 and worst <= 1e-4 and elapsed < 60
    announce(capsys, 1, ok,
             f"cmd_gradcheck max rel err {worst:.2e} <= 1e-4, {elapsed:.1f}s < 60s")


def test_criterion_2_oracle_equivalence(capsys):
    rng = np.random.default_rng(0)
    started = time.perf_counter()

    def d2_row(points, center):
        return ((points - center) ** 2).sum(axis=-1)

    def knn_oracle(points, queries, k, radius):
        idx = np.empty((len(queries), k), dtype=np.int64)
        d2s = np.empty((len(queries), k))
        for qi, q in enumerate(queries):
            d2 = d2_row(points, q)
            order = np.argsort(d2, kind="stable")
            within = order[d2[order] <= radius * radius]
            if within.size == 0:
                within = order[:1]
            row = within[:k]
            pad = np.full(k - row.size, row[0] if row.size else order[0])
            idx[qi] = np.concatenate([row, pad])
            d2s[qi] = d2[idx[qi]]
        return idx, d2s

    def ball_oracle(points, cents, radius, gsize):
        members = np.empty((len(cents), gsize), dtype=np.int64)
        for s, ci in enumerate(cents):
            hits = [i for i in range(len(points))
                    if d2_row(points[i], points[ci]) <= radius * radius][:gsize]
            hits += [ci] * (gsize - len(hits))
            members[s] = hits
        return members

    def fps_oracle(points, count):
        sel = [0]
        mind = d2_row(points, points[0])
        while len(sel) < count:
            nxt = int(np.argmax(mind))
            sel.append(nxt)
            mind = np.minimum(mind, d2_row(points, points[nxt]))
        return np.asarray(sel, dtype=np.int64)

    def metrics_oracle(pred, true, c):
        conf = np.zeros((c, c), dtype=np.int64)
        for p, t in zip(pred, true):
            conf[t, p] += 1
        ious = []
        for cc in range(c):
            tp = conf[cc, cc]
            union = conf[cc, :].sum() + conf[:, cc].sum() - tp
            ious.append(None if union == 0 else float(tp) / float(union))
        present = [v for v in ious if v is not None]
        return conf, float(np.trace(conf)) / len(pred), ious, float(np.mean(present))

    trials = 100
    for trial in range(trials):
        n = int(rng.integers(10, 201))
        pts = rng.uniform(-1.0, 1.0, size=(n, 3))
        k = int(rng.integers(1, 6))
        radius = np.inf if trial % 2 == 0 else float(rng.uniform(0.3, 1.2))

        nl = knn(pts, pts, k, radius)
        oi, od = knn_oracle(pts, pts, k, radius)
        assert np.array_equal(nl.indices, oi), f"knn trial {trial}"
        assert np.array_equal(nl.sq_dists, od), f"knn dists trial {trial}"

        cents = rng.choice(n, size=min(8, n), replace=False)
        gsize = int(rng.integers(1, 9))
        brad = float(rng.uniform(0.3, 1.0))
        bg = ball_group(pts, cents, brad, gsize)
        assert np.array_equal(bg.members, ball_oracle(pts, cents, brad, gsize)), \
            f"ball_group trial {trial}"

        count = int(rng.integers(1, min(n, 64) + 1))
        assert np.array_equal(farthest_point_sample(pts, count),
                              fps_oracle(pts, count)), f"fps trial {trial}"

        c = int(rng.integers(2, 7))
        pred = rng.integers(0, c, size=n)
        true = rng.integers(0, c, size=n)
        rep = evaluate(pred, true, c)
        conf, oa, ious, miou = metrics_oracle(pred, true, c)
        assert np.array_equal(rep.confusion, conf) and rep.oa == oa
        assert rep.per_class_iou == ious and rep.miou == miou, f"evaluate trial {trial}"

    elapsed = time.perf_counter() - started
    announce(capsys, 2, elapsed < 30,
             f"knn/ball_group/fps/evaluate exact vs brute force on {trials} "
             f"instances each, {elapsed:.1f}s < 30s")


def test_criterion_3_normalization(capsys):
    rng = np.random.default_rng(1)
    worst = 0.0
    trials = 0
    for _ in range(334):  # graph attention weights (beta)
        g = int(rng.integers(2, 9))
        ghat = Tensor(rng.normal(size=(g, 6)))
        beta = T.softmax_rows(
            T.leaky_relu(T.matmul_rowstable(ghat, T.transpose(ghat))))
        worst = max(worst, float(np.abs(beta.data.sum(axis=1) - 1.0).max()))
        trials += 1
    for _ in range(333):  # spatial attention weights (v)
        n, c = int(rng.integers(4, 33)), 8
        f = Tensor(rng.normal(size=(n, c)))
        wa = Tensor(rng.normal(size=(c, c)))
        wb = Tensor(rng.normal(size=(c, c)))
        b0 = Tensor(np.zeros(c))
        v = T.softmax_rows(T.matmul_rowstable(
            T.fc_rowstable(f, wa, b0), T.transpose(T.fc_rowstable(f, wb, b0))))
        worst = max(worst, float(np.abs(v.data.sum(axis=1) - 1.0).max()))
        trials += 1
    for _ in range(333):  # channel attention columns
        n, c = int(rng.integers(8, 65)), int(rng.integers(4, 17))
        f = Tensor(rng.normal(size=(n, c)))
        energy = T.matmul_sorted(T.transpose(f), f)
        m = T.transpose(T.softmax_rows(T.transpose(energy)))
        worst = max(worst, float(np.abs(m.data.sum(axis=0) - 1.0).max()))
        trials += 1
    announce(capsys, 3, trials == 1000 and worst <= 1e-9,
             f"softmax weight sums off by at most {worst:.2e} <= 1e-9 "
             f"over {trials} trials")


def test_criterion_4_permutation(capsys):
    rng = np.random.default_rng(2)
    c_in, c_e = 6, 4
    params = {name: Tensor(arr)
              for name, arr in gpm.init_params(rng, c_in, c_e).items()}
    checked = 0
    for _ in range(100):
        feats = rng.normal(size=(1, 3, c_in))
        base = gpm.gpm_forward(params, Tensor(feats)).data
        for perm in itertools.permutations(range(3)):
            out = gpm.gpm_forward(params, Tensor(feats[:, perm, :])).data
            assert np.array_equal(out, base), f"order {perm}"
        checked += 1

    head = {name: Tensor(arr)
            for name, arr in attention.init_params(rng, 12, 3).items()}
    for _ in range(20):
        f = rng.normal(size=(40, 12))
        p = rng.permutation(40)
        direct = attention.spatial_attention(head, Tensor(f)).data
        permuted = attention.spatial_attention(head, Tensor(f[p])).data
        assert np.array_equal(permuted, direct[p])
    announce(capsys, 4, checked == 100,
             "gpm pooling bit-invariant over all 3! member orders x 100 "
             "groups; spatial attention permutes exactly")


def test_criterion_5_overfit(capsys, two_plane_run, four_class_ablation):
    assert two_plane_run["cloud"].n == 2048
    oa2 = two_plane_run["report"].oa
    el = two_plane_run["elapsed"]
    oa4 = four_class_ablation["table"]["full"]["oa"]
    ok = oa2 >= 0.95 and el < 600 and oa4 >= 0.85
    announce(capsys, 5, ok,
             f"two-planes training OA {oa2:.3f} >= 0.95 in {el:.0f}s < 600s; "
             f"4-class full-model OA {oa4:.3f} >= 0.85")


def test_criterion_6_ablation_direction(capsys, four_class_ablation):
    table = four_class_ablation["table"]
    full = table["full"]["miou"]
    deltas = {v: full - table[v]["miou"] for v in ("no_cr", "no_gpm", "no_am")}
    ok = all(delta >= -0.02 for delta in deltas.values())
    detail = ", ".join(f"{v} {table[v]['miou']:.3f}" for v in deltas)
    announce(capsys, 6, ok,
             f"full mIoU {full:.3f} >= each ablation - 0.02 ({detail})")


def test_criterion_7_determinism(capsys, tmp_path):
    scene = tmp_path / "scene.json"
    scene.write_text(json.dumps(TWO_PLANES))
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"network": overfit_net(2).to_dict(),
                                  "train": overfit_train(epochs=15).to_dict()}))
    data = tmp_path / "scene.pcld"
    assert main(["gen-data", "--spec", str(scene), "--out", str(data)]) == 0
    outs = []
    for name in ("run1.elgs", "run2.elgs"):
        out = tmp_path / name
        code = main(["train", "--config", str(config), "--data", str(data),
                     "--out", str(out)])
        assert code == 0
        outs.append(out.read_bytes())
    capsys.readouterr()
    ok = outs[0] == outs[1]
    announce(capsys, 7, ok,
             f"two cmd_train runs, identical {len(outs[0])}-byte checkpoints")


def test_criterion_8_checkpoint_round_trip(capsys, two_plane_run, tmp_path):
    params = two_plane_run["params"]
    cfg = two_plane_run["cfg"]
    block = two_plane_run["blocks"][0]
    first, second = tmp_path / "a.elgs", tmp_path / "b.elgs"
    save_checkpoint(params, first)
    loaded = load_checkpoint(first)
    save_checkpoint(loaded, second)
    bytes_equal = first.read_bytes() == second.read_bytes()

    plan = build_plan(cfg, block.xyz)
    before = forward(params, cfg, plan, block.features).data
    after = forward(loaded, cfg, plan, block.features).data
    preds_equal = np.array_equal(before, after)
    announce(capsys, 8, bytes_equal and preds_equal,
             "save->load->save byte-identical; loaded predictions bit-exact")


def test_criterion_9_robustness(capsys, two_plane_run):
    result = run_robustness(two_plane_run["params"], two_plane_run["cfg"],
                            two_plane_run["cloud"], seed=two_plane_run["tc"].seed)
    rows = {(r["kind"], round(r["value"], 9)): r for r in result["perturbations"]}
    identity_scale = rows[("scale", 1.0)]["delta"]
    identity_rot = rows[("rotation", 0.0)]["delta"]
    full_turn = rows[("rotation", round(2 * math.pi, 9))]["delta"]
    half_scale = rows[("scale", 0.5)]["delta"]
    tenth_rot = rows[("rotation", round(math.pi / 10, 9))]["delta"]
    ok = identity_scale == 0.0 and identity_rot == 0.0 and abs(full_turn) <= 1e-6
    announce(capsys, 9, ok,
             f"identity deltas exactly 0; 2pi delta {full_turn:+.1e} <= 1e-6; "
             f"informational: scale 0.5 {half_scale:+.3f}, "
             f"rotation pi/10 {tenth_rot:+.3f}")
