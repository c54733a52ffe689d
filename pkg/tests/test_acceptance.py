"""End-to-end acceptance suite.

Each test prints one PASS/FAIL line (run with `pytest -s` to see them on
success).  The heavyweight fixtures (datasets, the two full training
runs) are session-scoped and shared across criteria.
"""

import json
import math
import time

import numpy as np
import pytest

from peerloc import datagen, detect, geometry, model, nn, quantize
from peerloc import uwb_ekf as ekf
from peerloc.geometry import Attitude, CameraCoord, CameraIntrinsics, HorizontalCoord

from test_detect import brute_force_maxima, brute_force_threshold, random_grid
from test_nn import make_conv, numeric_grad, rel_err

TRAIN_SEED = 11
TEST_SEED = 12
MODEL_SEED = 5
TRAIN_SIZE = 800
TEST_SIZE = 200


def report(criterion: int, ok: bool, detail: str) -> None:
    print(f"\n[criterion {criterion}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


# --- session fixtures ---------------------------------------------------


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def train_dataset(workspace):
    bg = workspace / "bg_train"
    datagen.make_noise_backgrounds(bg, 96, seed=3)
    cfg = datagen.DatagenConfig(
        backgrounds_dir=str(bg), count=TRAIN_SIZE, seed=TRAIN_SEED
    )
    out = workspace / "train"
    datagen.generate_dataset(cfg, out)
    return out


@pytest.fixture(scope="session")
def heldout_dataset(workspace):
    bg = workspace / "bg_test"
    datagen.make_noise_backgrounds(bg, 16, seed=4)
    cfg = datagen.DatagenConfig(
        backgrounds_dir=str(bg), count=TEST_SIZE, seed=TEST_SEED
    )
    out = workspace / "heldout"
    datagen.generate_dataset(cfg, out)
    return out


@pytest.fixture(scope="session")
def trained(train_dataset):
    train_set = model.TrainingSet.from_dataset_dir(train_dataset)
    config = model.TrainConfig(seed=MODEL_SEED)
    started = time.monotonic()
    ckpt, curve = model.train(config, train_set)
    elapsed = time.monotonic() - started
    return ckpt, curve, elapsed


@pytest.fixture(scope="session")
def heldout_eval(trained, heldout_dataset):
    """Float-model grids plus ground truth for the held-out set."""
    ckpt, _, _ = trained
    test_set = model.TrainingSet.from_dataset_dir(heldout_dataset)
    images = [test_set.image(i) for i in range(len(test_set))]
    grids = model.forward_images(ckpt, images)
    records = datagen.read_records(heldout_dataset / "labels.jsonl")
    truths = []
    for rec in records:
        att = Attitude(rec.roll, rec.pitch)
        truths.append(
            [l for l in (geometry.label_from_horizontal(r, att) for r in rec.robots) if l]
        )
    return images, grids, truths, test_set


# --- criterion 1: projection geometry ----------------------------------


def test_criterion_1_geometry():
    started = time.monotonic()
    expected = np.array(
        [[166.90, -183.73, 0.0], [77.51, 0.0, -184.12], [1.0, 0.0, 0.0]]
    )
    matrix_err = np.abs(CameraIntrinsics().projection_matrix() - expected).max()

    rng = np.random.default_rng(101)
    ortho_worst = 0.0
    compose_exact = True
    homog_worst = 0.0
    checked = 0
    while checked < 10_000:
        att = Attitude(*rng.uniform(-1.5, 1.5, 2))
        rot = geometry.rotation_from_attitude(att)
        ortho_worst = max(ortho_worst, np.abs(rot.T @ rot - np.eye(3)).max())

        p = HorizontalCoord(*rng.uniform([0.3, -2.5, -1.5], [4.0, 2.5, 1.5]))
        composed = geometry.camera_to_pixel(geometry.horizontal_to_camera(p, att))
        label = geometry.label_from_horizontal(p, att)
        if composed is None:
            compose_exact &= label is None
        else:
            compose_exact &= (
                label is not None
                and label.xp == composed[0].xp
                and label.yp == composed[0].yp
                and label.depth == composed[1]
            )
            cam = geometry.horizontal_to_camera(p, att)
            s = rng.uniform(1.5, 4.0)
            scaled = geometry.camera_to_pixel(
                CameraCoord(s * cam.xc, s * cam.yc, s * cam.zc)
            )
            homog_worst = max(
                homog_worst,
                abs(scaled[0].xp - composed[0].xp),
                abs(scaled[0].yp - composed[0].yp),
                abs(scaled[1] - s * composed[1]),
            )
        checked += 1
    elapsed = time.monotonic() - started
    ok = (
        matrix_err < 1e-9
        and ortho_worst < 1e-12
        and compose_exact
        and homog_worst < 1e-9
        and elapsed < 10.0
    )
    report(
        1,
        ok,
        f"projection matrix err {matrix_err:.2e}, orthonormality {ortho_worst:.2e}, "
        f"composition exact={compose_exact}, homogeneity {homog_worst:.2e}, "
        f"{elapsed:.1f}s over 10k samples",
    )


# --- criterion 2: gradient correctness ----------------------------------


def test_criterion_2_gradients():
    started = time.monotonic()
    rng = np.random.default_rng(202)
    worst = {}

    for trial in range(3):
        conv, store = make_conv(rng, 2, 3, 3)
        x = rng.normal(size=(2, 2, 6, 6))
        gy = rng.normal(size=(2, 3, 6, 6))

        def conv_loss():
            y, _ = conv.forward(store, x, True)
            return float((y * gy).sum())

        _, cache = conv.forward(store, x, True)
        gx, gparams = conv.backward(store, cache, gy)
        worst["conv dx"] = max(worst.get("conv dx", 0), rel_err(gx, numeric_grad(conv_loss, x)))
        worst["conv dw"] = max(
            worst.get("conv dw", 0),
            rel_err(gparams["c.weight"], numeric_grad(conv_loss, store.params["c.weight"])),
        )
        worst["conv db"] = max(
            worst.get("conv db", 0),
            rel_err(gparams["c.bias"], numeric_grad(conv_loss, store.params["c.bias"])),
        )

    pool = nn.MaxPool2d("p")
    x = rng.normal(size=(2, 3, 6, 6))
    gy = rng.normal(size=(2, 3, 3, 3))

    def pool_loss():
        y, _ = pool.forward(None, x, True)
        return float((y * gy).sum())

    _, cache = pool.forward(None, x, True)
    gx, _ = pool.backward(None, cache, gy)
    worst["pool dx"] = rel_err(gx, numeric_grad(pool_loss, x))

    relu = nn.ReLU("r")
    x = rng.normal(size=(2, 3, 5, 5))
    x[np.abs(x) < 1e-3] += 0.1
    gy = rng.normal(size=x.shape)

    def relu_loss():
        y, _ = relu.forward(None, x, True)
        return float((y * gy).sum())

    _, cache = relu.forward(None, x, True)
    gx, _ = relu.backward(None, cache, gy)
    worst["relu dx"] = rel_err(gx, numeric_grad(relu_loss, x))

    bn = nn.BatchNorm2d("b", 3)
    store = nn.ParamStore()
    bn.init_params(store, rng, np.float64)
    store.params["b.gamma"][:] = rng.uniform(0.5, 1.5, 3)
    store.params["b.beta"][:] = rng.normal(size=3)
    x = rng.normal(size=(3, 3, 4, 4))
    gy = rng.normal(size=x.shape)

    def bn_loss():
        y, _ = bn.forward(store, x, True)
        return float((y * gy).sum())

    _, cache = bn.forward(store, x, True)
    gx, gparams = bn.backward(store, cache, gy)
    worst["bn dx"] = rel_err(gx, numeric_grad(bn_loss, x))
    worst["bn dgamma"] = rel_err(gparams["b.gamma"], numeric_grad(bn_loss, store.params["b.gamma"]))
    worst["bn dbeta"] = rel_err(gparams["b.beta"], numeric_grad(bn_loss, store.params["b.beta"]))

    # losses, including the optional class term
    raw = rng.normal(size=(2, 4, 3, 4))
    conf_t = (rng.random((2, 3, 4)) < 0.25).astype(float)
    depth_t = conf_t * rng.uniform(0.5, 3.5, (2, 3, 4))
    prob_t = np.zeros((2, 3, 4, 2))
    prob_t[conf_t > 0, 0] = 1.0
    _, grad = model.loss_and_grad(raw, conf_t, depth_t, prob_t)
    num = np.zeros_like(raw)
    it = np.nditer(raw, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        rp = raw.copy()
        rp[i] += 1e-5
        rm = raw.copy()
        rm[i] -= 1e-5
        lp, _ = model.loss_and_grad(rp, conf_t, depth_t, prob_t)
        lm, _ = model.loss_and_grad(rm, conf_t, depth_t, prob_t)
        num[i] = (lp.total - lm.total) / 2e-5
    worst["losses"] = rel_err(grad, num)

    elapsed = time.monotonic() - started
    overall = max(worst.values())
    ok = overall < 1e-4 and elapsed < 120.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(2, ok, f"worst relative error {overall:.2e} ({detail}), {elapsed:.1f}s")


# --- criterion 3: training reproduction ---------------------------------


def test_criterion_3_training_convergence(trained, heldout_eval):
    ckpt, curve, elapsed = trained
    steps_per_epoch = math.ceil(TRAIN_SIZE / 5)
    assert steps_per_epoch == 160
    assert len(curve) == 25 * steps_per_epoch

    conf = np.array([p.loss.confidence for p in curve])
    first_epoch = conf[:steps_per_epoch].mean()
    last_epoch = conf[-steps_per_epoch:].mean()
    epoch_means = conf.reshape(25, steps_per_epoch).mean(axis=1)
    drop_ok = last_epoch <= 0.10 * first_epoch
    # stabilized: the last epochs sit near the curve's floor, not rebounding
    stable_ok = last_epoch <= 1.5 * epoch_means[5:].min()

    _, grids, _, test_set = heldout_eval
    sq_errs = []
    for grid, label in zip(grids, test_set.labels):
        mask = label.confidence > 0
        sq_errs.extend(((grid.depth[mask] - label.depth[mask]) ** 2).tolist())
    depth_rmse = float(np.sqrt(np.mean(sq_errs)))

    ok = drop_ok and stable_ok and depth_rmse <= 0.15 and elapsed <= 40 * 60
    report(
        3,
        ok,
        f"confidence loss {first_epoch:.2f} -> {last_epoch:.4f} "
        f"({last_epoch / first_epoch:.2%} of first epoch, stable={stable_ok}), "
        f"held-out depth RMSE {depth_rmse:.3f} m over {len(sq_errs)} cells, "
        f"training {elapsed / 60:.1f} min",
    )


# --- criterion 4: detection quality --------------------------------------


def test_criterion_4_detection_quality(heldout_eval):
    _, grids, truths, _ = heldout_eval
    cfg = detect.DetectionConfig(threshold=0.33)
    metrics = detect.evaluate_grids(grids, truths, cfg)
    pix = np.array(metrics.pixel_errs)
    within20 = float((pix <= 20.0).mean()) if len(pix) else 0.0
    depth_median = float(np.median(np.abs(metrics.depth_errs))) if metrics.depth_errs else 99.0
    ok = (
        within20 >= 0.80
        and depth_median <= 0.10
        and metrics.tp_rate >= 0.85
        and metrics.fp_per_image <= 0.15
    )
    report(
        4,
        ok,
        f"within-20px {within20:.1%}, median |depth err| {depth_median:.3f} m, "
        f"tp_rate {metrics.tp_rate:.3f}, fp/image {metrics.fp_per_image:.3f}",
    )


# --- criterion 5: decoding oracle equivalence ----------------------------


def test_criterion_5_decoding_oracle():
    rng = np.random.default_rng(505)
    cfg_plain = detect.DetectionConfig(threshold=0.33, suppression=False)
    cfg_supp = detect.DetectionConfig(threshold=0.33, suppression=True)
    mismatches = 0
    for i in range(10_000):
        rows, cols = (28, 40) if i % 10 == 0 else (6, 8)
        grid = random_grid(rng, rows, cols, ties=(i % 3 == 0))
        if detect.extract_detections(grid, cfg_plain) != brute_force_threshold(grid, 0.33):
            mismatches += 1
        if detect.extract_detections(grid, cfg_supp) != brute_force_maxima(grid, 0.33):
            mismatches += 1
    report(5, mismatches == 0, f"{mismatches} mismatches over 10000 random grids")


# --- criterion 6: quantization fidelity -----------------------------------


def test_criterion_6_quantization(trained, heldout_eval):
    ckpt, _, _ = trained
    images, _, _, _ = heldout_eval
    calib = images[:64]
    folded = quantize.fold_batchnorm(ckpt)
    qparams = quantize.calibrate(folded, calib)
    qmodel = quantize.build_quantized(folded, qparams)
    rep = quantize.compare_float_quant(folded, qmodel, images)
    agree_rate = rep["argmax_agree_rate"]
    agreed = np.array(rep["argmax_agree"])
    depth_diff = np.array(rep["depth_at_argmax_diff"])[agreed]
    depth_ok_rate = float((depth_diff <= 0.2).mean()) if len(depth_diff) else 0.0
    ok = agree_rate >= 0.90 and depth_ok_rate >= 0.90
    report(
        6,
        ok,
        f"argmax agreement {agree_rate:.1%} ({int(agreed.sum())}/{len(images)}), "
        f"depth-at-argmax within 0.2 m on {depth_ok_rate:.1%} of agreed images",
    )


# --- criterion 7: the self-supervision loop -------------------------------


def test_criterion_7a_noise_free_convergence():
    cfg = ekf.SimConfig(
        duration_s=120.0, seed=7,
        vel_noise=0.0, yaw_rate_noise=0.0, range_noise=0.0, height_noise=0.0,
    )
    traj, _, _ = ekf.simulate_and_label(cfg)
    err = traj.position_error()
    after_60 = err[np.searchsorted(traj.times, 60.0):]
    ok = float(after_60.max()) < 0.1
    report(
        7,
        ok,
        f"(a) noise-free error after 60 s: max {after_60.max():.4f} m "
        f"(final {err[-1]:.4f} m)",
    )


def test_criterion_7b_noisy_monte_carlo():
    sq = []
    per_seed = []
    for seed in range(20):
        cfg = ekf.SimConfig(duration_s=150.0, seed=700 + seed)
        traj, _, _ = ekf.simulate_and_label(cfg)
        err = traj.position_error()
        steady = err[np.searchsorted(traj.times, 60.0):]
        sq.extend((steady**2).tolist())
        per_seed.append(float(np.sqrt(np.mean(steady**2))))
    rmse = float(np.sqrt(np.mean(sq)))
    ok = rmse < 0.3
    report(
        7,
        ok,
        f"(b) steady-state RMSE {rmse:.3f} m pooled over 20 seeds "
        f"(per-seed max {max(per_seed):.3f})",
    )


@pytest.fixture(scope="session")
def ekf_trained(workspace, train_dataset):
    """Train on images rendered at simulated true poses but labeled with
    the filter's estimates."""
    sim_cfg = ekf.SimConfig(duration_s=230.0, seed=77, settle_s=20.0)
    _, labels, truth = ekf.simulate_and_label(sim_cfg)
    gen_cfg = datagen.DatagenConfig(
        backgrounds_dir=str(workspace / "bg_train"), count=0, seed=TRAIN_SEED
    )
    out = workspace / "ekf_train"
    datagen.generate_dataset(gen_cfg, out, pose_records=truth, label_records=labels)
    records = datagen.read_records(out / "labels.jsonl")[:TRAIN_SIZE]
    datagen.write_records(out / "labels.jsonl", records)
    train_set = model.TrainingSet.from_dataset_dir(out)
    ckpt, _ = model.train(model.TrainConfig(seed=MODEL_SEED), train_set)
    return ckpt, len(train_set)


def test_criterion_7c_training_on_ekf_labels(ekf_trained, heldout_eval, trained):
    ekf_ckpt, n_train = ekf_trained
    images, grids_gt, truths, _ = heldout_eval
    cfg = detect.DetectionConfig(threshold=0.33)

    def within20(grids):
        metrics = detect.evaluate_grids(grids, truths, cfg)
        pix = np.array(metrics.pixel_errs)
        return (float((pix <= 20.0).mean()) if len(pix) else 0.0), metrics

    base_rate, _ = within20(grids_gt)
    ekf_grids = model.forward_images(ekf_ckpt, images)
    ekf_rate, ekf_metrics = within20(ekf_grids)
    ok = ekf_rate >= base_rate - 0.10
    report(
        7,
        ok,
        f"(c) within-20px: ground-truth-trained {base_rate:.1%} vs "
        f"estimator-labeled {ekf_rate:.1%} ({n_train} frames, "
        f"tp {ekf_metrics.tp_rate:.2f})",
    )


# --- criterion 8: determinism ---------------------------------------------


def test_criterion_8_determinism(workspace):
    bg = workspace / "bg_det"
    datagen.make_noise_backgrounds(bg, 4, seed=9)

    def dataset_digest(out):
        cfg = datagen.DatagenConfig(backgrounds_dir=str(bg), count=10, seed=55)
        datagen.generate_dataset(cfg, out)
        blobs = [(out / "labels.jsonl").read_bytes()]
        blobs += [p.read_bytes() for p in sorted((out / "images").iterdir())]
        import hashlib

        return hashlib.sha256(b"".join(blobs)).hexdigest()

    data_ok = dataset_digest(workspace / "det_a") == dataset_digest(workspace / "det_b")

    train_set = model.TrainingSet.from_dataset_dir(workspace / "det_a")
    cfg = model.TrainConfig(epochs=2, warm_epochs=1, batch=5, seed=66)

    def ckpt_digest():
        ckpt, _ = model.train(cfg, train_set)
        path = workspace / "det.ckpt"
        model.save_checkpoint(ckpt, path)
        import hashlib

        return hashlib.sha256(path.read_bytes()).hexdigest()

    train_ok = ckpt_digest() == ckpt_digest()

    sim_cfg = ekf.SimConfig(duration_s=30.0, seed=88)

    def sim_digest():
        _, labels, truth = ekf.simulate_and_label(sim_cfg)
        payload = json.dumps(
            [r.to_json() for r in labels] + [r.to_json() for r in truth]
        ).encode()
        import hashlib

        return hashlib.sha256(payload).hexdigest()

    sim_ok = sim_digest() == sim_digest()

    ok = data_ok and train_ok and sim_ok
    report(
        8,
        ok,
        f"byte-identical reruns: dataset={data_ok}, checkpoint={train_ok}, "
        f"label stream={sim_ok}",
    )


# --- supplementary: single-image inference through the CLI -----------------


def test_infer_on_single_drone_image(trained, workspace, capsys):
    """A clear one-robot frame yields exactly one printed detection."""
    from peerloc import cli

    ckpt, _, _ = trained
    ckpt_path = workspace / "trained.ckpt"
    model.save_checkpoint(ckpt, ckpt_path)

    bg = workspace / "bg_infer"
    datagen.make_noise_backgrounds(bg, 1, seed=13)
    cfg = datagen.DatagenConfig(
        backgrounds_dir=str(bg), count=1, seed=14, max_robots=1,
        depth_range=(1.0, 2.0),
    )
    out = workspace / "infer_fixture"
    datagen.generate_dataset(cfg, out)
    image_path = out / "images" / "000000.png"

    assert cli.main(["infer", "--model", str(ckpt_path), "--image", str(image_path)]) == 0
    detections = json.loads(capsys.readouterr().out)
    assert len(detections) == 1
    record = datagen.read_records(out / "labels.jsonl")[0]
    truth = geometry.label_from_horizontal(
        record.robots[0], Attitude(record.roll, record.pitch)
    )
    err = math.hypot(detections[0]["xp"] - truth.xp, detections[0]["yp"] - truth.yp)
    assert err <= 20.0
