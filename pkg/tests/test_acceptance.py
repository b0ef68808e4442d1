"""End-to-end acceptance checks on the synthetic corpus.

Each test covers one numbered criterion and records a single PASS/FAIL line
(shown in the terminal summary). The heavy artifacts (the Arch5-analog
classifier, the family echo, the CycleGAN bundle) are built once per module.
Expect roughly an hour and a half of single-core CPU time for the full file.
"""

import csv
import time

import numpy as np
import pytest

import test_gradients as grads
from underpass import checkpoint
from underpass.arch import TARGET_COUNTS, count_parameters, desk_family, generate_family
from underpass.cli import main as cli_main
from underpass.cyclegan import (
    ConstantNetwork,
    CycleGANBundle,
    GANConfig,
    IdentityNetwork,
    adversarial_losses,
    cycle_and_identity_losses,
    generator_objective,
    mean_l1,
    train_cyclegan,
    transform_pixels,
)
from underpass.data import ClassLabel, SplitSpec, stratified_split
from underpass.engine import Sequential, Tensor
from underpass.evaluation import DEFAULT_TEST_SETS, EVAL_DOMAINS, TOTAL, build_experiment_b_sets, evaluate, run_experiment_b
from underpass.synth import NIGHT_COUNTS, build_corpus, day_twin
from underpass.training import TrainConfig, run_experiment_a, train_classifier

pytestmark = pytest.mark.slow

CORPUS_SEED = 0
GAN_SEED = 1  # training images for the CycleGAN
NIGHT_POOL_SEED = 2  # held-out night scenes for Experiment B and the L1 check
# the family echo runs every cell for a fixed five-epoch budget
ECHO_CONFIG = TrainConfig(max_epochs=5, patience=4)
ECHO_SEEDS = (0, 1, 2)
ECHO_FRACTIONS = (0.25, 1.0)
GAN_CONFIG = GANConfig(epochs=20, seed=0)
GAN_PER_CLASS = 100  # x 3 classes = 300 images per domain


@pytest.fixture(scope="module")
def corpus():
    return build_corpus(seed=CORPUS_SEED)


@pytest.fixture(scope="module")
def splits(corpus):
    return stratified_split(corpus, SplitSpec(seed=CORPUS_SEED))


@pytest.fixture(scope="module")
def arch5_run(splits):
    train, val, test = splits
    spec = desk_family()[4]
    result = train_classifier(spec, train, val, cfg=TrainConfig(max_epochs=150, patience=10, seed=0))
    return result, evaluate(result.model, test)


@pytest.fixture(scope="module")
def echo_rows(corpus):
    return run_experiment_a(desk_family(), corpus, ECHO_FRACTIONS, ECHO_SEEDS, cfg=ECHO_CONFIG)


@pytest.fixture(scope="module")
def gan_run():
    labels = (ClassLabel.EMPTY, ClassLabel.PEDESTRIAN, ClassLabel.BICYCLIST)
    counts = {c: GAN_PER_CLASS for c in labels}
    data = build_corpus(counts, counts, seed=GAN_SEED)
    day, night = data.filter(domain="day"), data.filter(domain="night")
    start = time.perf_counter()
    bundle, history = train_cyclegan(CycleGANBundle.create(GAN_CONFIG), day, night)
    return bundle, history, time.perf_counter() - start, len(day), len(night)


@pytest.fixture(scope="module")
def night_pool():
    return build_corpus({}, NIGHT_COUNTS, seed=NIGHT_POOL_SEED)


@pytest.fixture(scope="module")
def experiment_b(arch5_run, gan_run, splits, night_pool):
    model = arch5_run[0].model
    bundle = gan_run[0]
    sets = build_experiment_b_sets(splits[2], night_pool, bundle, DEFAULT_TEST_SETS, seed=0)
    return sets, run_experiment_b(model, sets)


def test_criterion_1_parameter_parity(verdict):
    start = time.perf_counter()
    counts = generate_family().counts()
    elapsed = time.perf_counter() - start
    worst = max(abs(c / t - 1) for c, t in zip(counts, TARGET_COUNTS))
    vgg = abs(counts[10] / 134e6 - 1)
    ratio = counts[4] / counts[10]
    ok = worst <= 0.15 and vgg <= 0.03 and abs(ratio - 0.011) <= 0.003 and elapsed < 1.0
    detail = f"worst deviation {worst:.1%}, Arch11 {counts[10]} ({vgg:.2%}), Arch5/Arch11 {ratio:.4f}, {elapsed * 1e3:.0f} ms"
    assert verdict(1, "parameter parity", ok, detail), detail


def test_criterion_2_counter_matches_instantiated_models(verdict):
    mismatches = []
    for spec in generate_family():
        built = Sequential(spec.layers(), spec.input_resolution, seed=0).num_parameters()
        if built != count_parameters(spec):
            mismatches.append((spec.name, built, count_parameters(spec)))
    detail = "all 11 equal" if not mismatches else f"mismatches {mismatches}"
    assert verdict(2, "oracle equivalence", not mismatches, detail), detail


def test_criterion_3_gradient_suite(verdict):
    start = time.perf_counter()
    worst_rel, worst_abs, cases = 0.0, 0.0, 0
    for kind in grads.LAYER_KINDS:
        for seed in range(grads.CASES):
            rel, small = grads._layer_errors(kind, seed)
            worst_rel, worst_abs, cases = max(worst_rel, rel), max(worst_abs, small), cases + 1
    for kind in ("cross_entropy", "mse", "l1"):
        for seed in range(grads.CASES):
            rel, small = grads._loss_errors(kind, seed)
            worst_rel, worst_abs, cases = max(worst_rel, rel), max(worst_abs, small), cases + 1
    elapsed = time.perf_counter() - start
    ok = worst_rel <= 1e-3 and worst_abs <= 1e-6 and elapsed < 120 and grads.CASES >= 20
    detail = (
        f"{len(grads.LAYER_KINDS)} layer kinds + 3 losses x {grads.CASES} cases, "
        f"max rel {worst_rel:.1e}, max tiny-abs {worst_abs:.1e}, {elapsed:.0f} s"
    )
    assert verdict(3, "gradient suite", ok, detail), detail


def test_criterion_4_experiment_a_echo(verdict, corpus, arch5_run, echo_rows):
    result, test_eval = arch5_run
    single_ok = (
        len(corpus) == 2241 and test_eval.accuracy >= 0.90 and len(result.history) <= 150 and result.wall_seconds <= 15 * 60
    )
    failures = [r for r in echo_rows if r.error]
    means: dict[tuple[str, float], float] = {}
    for r in echo_rows:
        means.setdefault((r.arch_id, r.data_fraction), 0.0)
        means[(r.arch_id, r.data_fraction)] += r.val_accuracy / len(ECHO_SEEDS)
    archs = list(dict.fromkeys(r.arch_id for r in echo_rows))
    gaps = {a: means[(a, 1.0)] - means[(a, 0.25)] for a in archs}
    echo_ok = not failures and len(archs) == 11 and all(g >= 0 for g in gaps.values())
    worst = min(gaps, key=gaps.get)
    detail = (
        f"Arch5-analog test acc {test_eval.accuracy:.3f} after {len(result.history)} epochs in {result.wall_seconds:.0f} s; "
        f"3-seed mean acc(1.0) - acc(0.25) >= 0 for {sum(g >= 0 for g in gaps.values())}/{len(archs)} archs "
        f"(smallest gap {worst} {gaps[worst]:+.3f})"
    )
    assert verdict(4, "desk-scale experiment A echo", single_ok and echo_ok, detail), detail


def test_criterion_5_training_time_monotone(verdict, echo_rows):
    smallest = [s.name for s in desk_family()[:4]]
    rows = {r.arch_id: r for r in echo_rows if r.data_fraction == 1.0 and r.seed == ECHO_SEEDS[0]}
    times = [rows[name].wall_seconds for name in smallest]
    epochs = [rows[name].epochs for name in smallest]
    ok = all(b >= a for a, b in zip(times, times[1:]))
    detail = ", ".join(f"{n} {t:.1f}s/{e}ep" for n, t, e in zip(smallest, times, epochs))
    assert verdict(5, "training-time monotonicity", ok, detail), detail


def test_criterion_6_cyclegan_recovery(verdict, gan_run, night_pool, experiment_b):
    bundle, history, seconds, n_day, n_night = gan_run
    night = [i.pixels for i in night_pool]
    twins = [day_twin(i).pixels for i in night_pool]
    translated = list(transform_pixels(bundle, np.stack(night), "night2day"))
    raw_l1, new_l1 = mean_l1(night, twins), mean_l1(translated, twins)
    reduction = 1 - new_l1 / raw_l1
    _, report = experiment_b
    acc_night, acc_n2d = report.accuracy(TOTAL, "night"), report.accuracy(TOTAL, "night2day")
    first, last = history.rows[0], history.rows[-1]
    falling = {k: last[k] < first[k] for k in ("identity_a", "identity_b", "cycle_forward")}
    ok = (
        n_day >= 300 and n_night >= 300 and len(history.rows) >= 20 and GAN_CONFIG.resolution == (64, 64, 3)
        and reduction >= 0.5 and acc_n2d > acc_night and all(falling.values()) and seconds <= 45 * 60
    )  # fmt: skip
    detail = (
        f"L1 to day twin {raw_l1:.3f} -> {new_l1:.3f} ({reduction:.0%} lower); "
        f"union acc night {acc_night:.3f} vs night2day {acc_n2d:.3f}; "
        f"epoch 1 -> {len(history.rows)}: identity_a {first['identity_a']:.3f}->{last['identity_a']:.3f}, "
        f"identity_b {first['identity_b']:.3f}->{last['identity_b']:.3f}, "
        f"cycle_forward {first['cycle_forward']:.3f}->{last['cycle_forward']:.3f}; "
        f"{n_day}+{n_night} images, {seconds / 60:.1f} min"
    )
    assert verdict(6, "CycleGAN recovery", ok, detail), detail


def test_criterion_7_experiment_b_schema(verdict, experiment_b, tmp_path):
    sets, report = experiment_b
    table = [(s.name, s.day, s.night, s.night2day) for s in DEFAULT_TEST_SETS]
    table_ok = table == [("PedSet", 180, 106, 106), ("BikeSet", 50, 60, 60), ("EmpSet", 180, 106, 106)]
    sizes_ok = all(len(ts.partitions[d]) == ts.spec.counts()[d] for ts in sets for d in EVAL_DOMAINS)
    rows = report.rows()
    grid = {(c.test_set, c.domain) for c in rows}
    grid_ok = len(rows) == 12 and grid == {(s, d) for s in ("PedSet", "BikeSet", "EmpSet", TOTAL) for d in EVAL_DOMAINS}
    paths = {p.name for p in report.write(tmp_path)}
    files_ok = paths == {"experiment_b.csv", "fig7_data.csv"} | {f"confusion_{d}.csv" for d in EVAL_DOMAINS}
    totals_ok = all(report.confusion[d].total == sum(len(ts.partitions[d]) for ts in sets) for d in EVAL_DOMAINS)
    ok = table_ok and sizes_ok and grid_ok and files_ok and totals_ok
    detail = f"sets {table}; {len(rows)} report rows; files {sorted(paths)}"
    assert verdict(7, "experiment B schema", ok, detail), detail


def _csv_bytes(directory, drop_wall_seconds: bool = True) -> dict[str, bytes]:
    out = {}
    for path in sorted(directory.rglob("*.csv")):
        data = path.read_bytes()
        if drop_wall_seconds and path.name == "experiment_a.csv":
            rows = list(csv.reader(data.decode().splitlines()))
            col = rows[0].index("wall_seconds")
            data = "\n".join(",".join(r[:col] + r[col + 1 :]) for r in rows).encode()
        out[str(path.relative_to(directory))] = data
    return out


def _cli_pipeline(root) -> None:
    common = ["--data-root", str(root / "data"), "--resolution", "16", "--seed", "5", "--max-epochs", "2", "--patience", "1"]
    steps = [
        ["gen-data", "--counts", "920,920,40,260", "--night-counts", "106,106,0,60"],
        ["split"],
        ["train", "--arch", "Arch2"],
        ["family", "--archs", "Arch1,Arch2", "--fractions", "0.5,1.0"],
        ["gan-train", "--images", "6", "--gen-filters", "2", "--disc-filters", "2"],
    ]
    for k, step in enumerate(steps):
        assert cli_main([*step, *common, "--out-dir", str(root / f"out{k}")]) == 0
    models = ["--model", str(root / "out2" / "model.evl"), "--bundle", str(root / "out4" / "bundle.evl")]
    assert cli_main(["eval-b", *common, *models, "--out-dir", str(root / "eval")]) == 0


def test_criterion_8_determinism_and_persistence(verdict, arch5_run, gan_run, experiment_b, splits, night_pool, tmp_path):
    _cli_pipeline(tmp_path / "a")
    _cli_pipeline(tmp_path / "b")
    first, second = _csv_bytes(tmp_path / "a"), _csv_bytes(tmp_path / "b")
    runs_ok = first == second and len(first) >= 10

    model, bundle = arch5_run[0].model, gan_run[0]
    checkpoint.save(model, tmp_path / "m.evl")
    checkpoint.save(bundle, tmp_path / "b.evl")
    _, report = experiment_b
    report.write(tmp_path / "before")
    sets_again = build_experiment_b_sets(splits[2], night_pool, checkpoint.load(tmp_path / "b.evl"), DEFAULT_TEST_SETS, seed=0)
    run_experiment_b(checkpoint.load(tmp_path / "m.evl"), sets_again).write(tmp_path / "after")
    round_trip_ok = _csv_bytes(tmp_path / "before") == _csv_bytes(tmp_path / "after")

    data = (tmp_path / "m.evl").read_bytes()
    rng = np.random.default_rng(8)
    positions = sorted(set(range(64)) | set(rng.choice(len(data), 400, replace=False).tolist()))
    undetected = []
    for pos in positions:
        bad = bytearray(data)
        bad[pos] ^= 1 << int(rng.integers(8))
        (tmp_path / "bad.evl").write_bytes(bytes(bad))
        try:
            checkpoint.load(tmp_path / "bad.evl")
            undetected.append(pos)
        except checkpoint.CheckpointError:
            pass
    ok = runs_ok and round_trip_ok and not undetected
    detail = (
        f"{len(first)} CSVs identical across two seeded runs: {runs_ok}; "
        f"experiment B after checkpoint round trip identical: {round_trip_ok}; "
        f"{len(positions) - len(undetected)}/{len(positions)} single-byte corruptions detected"
    )
    assert verdict(8, "determinism and persistence", ok, detail), detail


def test_criterion_9_loss_structure(verdict):
    cfg = GANConfig(resolution=(16, 16, 3), gen_filters=2, disc_filters=2, residual_blocks=2)
    rng = np.random.default_rng(9)
    a = Tensor(rng.uniform(-1, 1, (2, 16, 16, 3)).astype(np.float32))
    b = Tensor(rng.uniform(-1, 1, (2, 16, 16, 3)).astype(np.float32))

    identity = CycleGANBundle(cfg, IdentityNetwork(), IdentityNetwork(), ConstantNetwork(0.5, (2, 2, 1)), ConstantNetwork(0.5, (2, 2, 1)))
    zero = sum(float(t.data) for t in cycle_and_identity_losses(identity, a, b))

    d_loss, g_loss = adversarial_losses(ConstantNetwork(0.5, (2, 2, 1)), a, b)
    half = (float(d_loss.data), float(g_loss.data))

    # decomposition is checked in double precision so float32 rounding of a
    # total near 20 does not mask the structure
    a64, b64 = Tensor(a.data.astype(np.float64)), Tensor(b.data.astype(np.float64))
    worst = 0.0
    for seed in range(5):
        bundle = CycleGANBundle.create(GANConfig(**{**cfg.__dict__, "seed": seed}), dtype=np.float64)
        losses = generator_objective(bundle, a64, b64)
        c = losses.components()
        parts = (
            c["gen_adv_ab"] + c["gen_adv_ba"]
            + cfg.lambda_cycle * (c["cycle_forward"] + c["cycle_backward"])
            + cfg.lambda_identity * (c["identity_a"] + c["identity_b"])
        )  # fmt: skip
        worst = max(worst, abs(c["gen_total"] - parts))
    ok = zero == 0.0 and np.allclose(half, (0.5, 0.25), atol=1e-7) and worst <= 1e-6
    detail = f"identity cycle+identity loss {zero}; constant-0.5 critic {half}; max |total - sum| {worst:.1e}"
    assert verdict(9, "loss structure", ok, detail), detail
